//! Dense row-major tensors and the reverse-mode autograd engine built on them.
//!
//! [`Tensor`] is an immutable value (shape + shared buffer). Differentiable
//! computation happens on a [`Tape`], which records each operation applied to
//! [`Var`] handles and replays them backwards to produce gradients.

mod adam;
mod gradcheck;
pub mod nn;
mod params;
mod tape;

use std::fmt::{Debug, Display};
use std::sync::Arc;

use num_traits::Float;

use crate::{Error, Result};

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{finite_diff_check, GradCheckReport, FLOOR as GRADCHECK_FLOOR};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};

/// Scalar element type. Implemented for `f32` (training, sampling) and `f64`
/// (gradient checking).
pub trait Real:
    Float + Default + Debug + Display + Send + Sync + std::iter::Sum + 'static
{
    const NAME: &'static str;

    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = a·b` (or `c += a·b` when `accumulate`), with arbitrary row/column
    /// strides on `a` and `b` and `c` row-major contiguous `[m, n]`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        c: &mut [Self],
        accumulate: bool,
    );
}

fn check_gemm_bounds(rows: usize, cols: usize, strides: (usize, usize), len: usize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) * strides.0 + (cols - 1) * strides.1;
    assert!(last < len, "gemm operand out of bounds");
}

macro_rules! impl_real {
    ($t:ty, $name:literal, $gemm:path) => {
        impl Real for $t {
            const NAME: &'static str = $name;

            fn of(x: f64) -> Self {
                x as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                c: &mut [Self],
                accumulate: bool,
            ) {
                check_gemm_bounds(m, k, a_strides, a.len());
                check_gemm_bounds(k, n, b_strides, b.len());
                assert!(c.len() >= m * n, "gemm output out of bounds");
                if m == 0 || n == 0 {
                    return;
                }
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: every index touched by the kernel lies inside the
                // slices, checked above; `c` does not alias `a` or `b`.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, "f32", matrixmultiply::sgemm);
impl_real!(f64, "f64", matrixmultiply::dgemm);

/// Immutable n-dimensional array. An empty shape denotes a scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Arc<Vec<F>>,
}

impl<F: Real> Tensor<F> {
    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub fn scalar(x: F) -> Self {
        Tensor {
            shape: Vec::new(),
            data: Arc::new(vec![x]),
        }
    }

    pub fn full(shape: &[usize], x: F) -> Self {
        let n = shape.iter().product();
        Self::from_vec(shape, vec![x; n]).expect("valid shape")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> F) -> Self {
        let n = shape.iter().product();
        Self::from_vec(shape, (0..n).map(&mut f).collect()).expect("valid shape")
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&x| F::of(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Mutable access; copies the buffer if it is shared.
    pub fn data_mut(&mut self) -> &mut [F] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<F> {
        Arc::try_unwrap(self.data).unwrap_or_else(|arc| (*arc).clone())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    pub fn item(&self) -> F {
        self.data[0]
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|x| G::of(x.as_f64())).collect()),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.len() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| f(x)).collect()),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(F, F) -> F) -> Result<Self> {
        same_shape(op, &self.shape, &other.shape)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: Arc::new(
                self.data
                    .iter()
                    .zip(other.data.iter())
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            ),
        })
    }

    /// Reorder axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let shape = permuted_shape(&self.shape, axes)?;
        Ok(Tensor {
            shape,
            data: Arc::new(permute_data(&self.data, &self.shape, axes)),
        })
    }

    /// Batched matrix product `[.., m, k] × [k, n]` or `[.., m, k] × [.., k, n]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let dims = MatmulDims::resolve(&self.shape, &other.shape)?;
        Ok(Tensor {
            shape: dims.out_shape.clone(),
            data: Arc::new(dims.forward(&self.data, &other.data)),
        })
    }

    /// Select `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.shape.len() || len == 0 || start + len > self.shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("axis {axis} range {start}+{len} of {:?}", self.shape),
            ));
        }
        let (outer, extent, inner) = split_axis(&self.shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * extent * inner + start * inner;
            out.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Tensor::from_vec(&shape, out)
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let rank = first.shape.len();
        if axis >= rank {
            return Err(Error::shape("concat", format!("axis {axis} of rank {rank}")));
        }
        for p in parts {
            let ok = p.shape.len() == rank
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?} along axis {axis}", first.shape, p.shape),
                ));
            }
        }
        let (outer, _, inner) = split_axis(&first.shape, axis);
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                out.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Tensor::from_vec(&shape, out)
    }

    pub fn max_abs_diff(&self, other: &Self) -> F {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(F::zero(), F::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Bit-level equality, treating the buffer as raw scalars.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

pub(crate) fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

/// `(product of axes before, extent, product of axes after)`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn permuted_shape(shape: &[usize], axes: &[usize]) -> Result<Vec<usize>> {
    let mut seen = vec![false; shape.len()];
    if axes.len() != shape.len() {
        return Err(Error::shape("permute", format!("axes {axes:?} for {shape:?}")));
    }
    for &a in axes {
        if a >= shape.len() || seen[a] {
            return Err(Error::shape("permute", format!("axes {axes:?} for {shape:?}")));
        }
        seen[a] = true;
    }
    Ok(axes.iter().map(|&a| shape[a]).collect())
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

pub(crate) fn permute_data<F: Copy>(data: &[F], shape: &[usize], axes: &[usize]) -> Vec<F> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    if rank == 0 {
        out.extend_from_slice(data);
        return out;
    }
    // Odometer over output indices; the innermost axis is a strided copy.
    let last = rank - 1;
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    loop {
        let s = strides[last];
        for j in 0..out_shape[last] {
            out.push(data[offset + j * s]);
        }
        let mut axis = last;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            idx[axis] += 1;
            offset += strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            offset -= strides[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
}

/// Resolved geometry of a batched matmul.
#[derive(Clone, Debug)]
pub(crate) struct MatmulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// `b` is a single `[k, n]` matrix shared across the batch.
    pub shared_rhs: bool,
    pub out_shape: Vec<usize>,
}

impl MatmulDims {
    pub fn resolve(a: &[usize], b: &[usize]) -> Result<Self> {
        let err = || Error::shape("matmul", format!("{a:?} × {b:?}"));
        if a.len() < 2 || b.len() < 2 {
            return Err(err());
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(err());
        }
        let a_batch = &a[..a.len() - 2];
        let b_batch = &b[..b.len() - 2];
        let shared_rhs = b_batch.is_empty();
        if !shared_rhs && a_batch != b_batch {
            return Err(err());
        }
        let mut out_shape = a_batch.to_vec();
        out_shape.extend([m, n]);
        Ok(MatmulDims {
            batch: a_batch.iter().product(),
            m,
            k,
            n,
            shared_rhs,
            out_shape,
        })
    }

    pub fn forward<F: Real>(&self, a: &[F], b: &[F]) -> Vec<F> {
        let (m, k, n) = (self.m, self.k, self.n);
        let mut out = vec![F::zero(); self.batch * m * n];
        if self.shared_rhs {
            F::gemm(self.batch * m, k, n, a, (k, 1), b, (n, 1), &mut out, false);
        } else {
            for i in 0..self.batch {
                F::gemm(
                    m,
                    k,
                    n,
                    &a[i * m * k..(i + 1) * m * k],
                    (k, 1),
                    &b[i * k * n..(i + 1) * k * n],
                    (n, 1),
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        out
    }

    /// `(∂a, ∂b)` given `∂out`.
    pub fn backward<F: Real>(&self, a: &[F], b: &[F], g: &[F], need_a: bool, need_b: bool) -> (Vec<F>, Vec<F>) {
        let (m, k, n) = (self.m, self.k, self.n);
        let mut ga = Vec::new();
        let mut gb = Vec::new();
        if self.shared_rhs {
            let rows = self.batch * m;
            if need_a {
                // ∂a = g · bᵀ
                ga = vec![F::zero(); rows * k];
                F::gemm(rows, n, k, g, (n, 1), b, (1, n), &mut ga, false);
            }
            if need_b {
                // ∂b = aᵀ · g, summed over all rows in order
                gb = vec![F::zero(); k * n];
                F::gemm(k, rows, n, a, (1, k), g, (n, 1), &mut gb, false);
            }
        } else {
            if need_a {
                ga = vec![F::zero(); self.batch * m * k];
            }
            if need_b {
                gb = vec![F::zero(); self.batch * k * n];
            }
            for i in 0..self.batch {
                let gi = &g[i * m * n..(i + 1) * m * n];
                if need_a {
                    let bi = &b[i * k * n..(i + 1) * k * n];
                    F::gemm(m, n, k, gi, (n, 1), bi, (1, n), &mut ga[i * m * k..(i + 1) * m * k], false);
                }
                if need_b {
                    let ai = &a[i * m * k..(i + 1) * m * k];
                    F::gemm(k, m, n, ai, (1, k), gi, (n, 1), &mut gb[i * k * n..(i + 1) * k * n], false);
                }
            }
        }
        (ga, gb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::<f32>::from_vec(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::from_vec(&[0, 2], vec![]).is_err());
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let id = Tensor::<f64>::from_f64(&[2, 2], &[1., 0., 0., 1.]).unwrap();
        let b = Tensor::<f64>::from_f64(&[2, 2], &[3., 4., 5., 6.]).unwrap();
        assert_eq!(id.matmul(&b).unwrap().data(), &[3., 4., 5., 6.]);

        let r = Tensor::<f64>::from_f64(&[1, 2], &[1., 2.]).unwrap();
        let c = Tensor::<f64>::from_f64(&[2, 1], &[3., 4.]).unwrap();
        let out = r.matmul(&c).unwrap();
        assert_eq!(out.shape(), &[1, 1]);
        assert_eq!(out.data(), &[11.]);
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[4, 5]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn batched_matmul_matches_per_slice() {
        let a = Tensor::<f64>::from_fn(&[3, 2, 4], |i| (i as f64 * 0.37).sin());
        let b = Tensor::<f64>::from_fn(&[3, 4, 5], |i| (i as f64 * 0.11).cos());
        let out = a.matmul(&b).unwrap();
        for s in 0..3 {
            for i in 0..2 {
                for j in 0..5 {
                    let mut acc = 0.0;
                    for p in 0..4 {
                        acc += a.data()[s * 8 + i * 4 + p] * b.data()[s * 20 + p * 5 + j];
                    }
                    let got = out.data()[s * 10 + i * 5 + j];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn permute_roundtrip_and_transpose() {
        let t = Tensor::<f32>::from_fn(&[2, 3, 4], |i| i as f32);
        let p = t.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        // p[k, i, j] == t[i, j, k]
        assert_eq!(p.data()[6 + 3 + 2], t.data()[12 + 2 * 4 + 1]);
        let back = p.permute(&inverse_axes(&[2, 0, 1])).unwrap();
        assert!(back.bit_eq(&t));
    }

    #[test]
    fn narrow_and_concat_invert() {
        let t = Tensor::<f32>::from_fn(&[2, 5, 3], |i| i as f32);
        let a = t.narrow(1, 0, 2).unwrap();
        let b = t.narrow(1, 2, 3).unwrap();
        let joined = Tensor::concat(&[&a, &b], 1).unwrap();
        assert!(joined.bit_eq(&t));
    }
}
