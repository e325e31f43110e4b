use std::cell::RefCell;

use super::{
    inverse_axes, permute_data, permuted_shape, same_shape, split_axis, MatmulDims, Real, Tensor,
};
use crate::{Error, Result};

/// A value flowing through a [`Tape`]. `node` is `None` for constants and for
/// anything computed while gradients are disabled.
#[derive(Clone, Debug)]
pub struct Var<F: Real> {
    value: Tensor<F>,
    node: Option<usize>,
}

impl<F: Real> Var<F> {
    pub fn value(&self) -> &Tensor<F> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn into_value(self) -> Tensor<F> {
        self.value
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }
}

type Slot = Option<usize>;

#[derive(Debug)]
enum Op<F: Real> {
    Leaf,
    Add {
        a: Slot,
        b: Slot,
    },
    Sub {
        a: Slot,
        b: Slot,
    },
    Mul {
        a: Slot,
        b: Slot,
        av: Tensor<F>,
        bv: Tensor<F>,
    },
    Scale {
        x: usize,
        c: F,
    },
    AddTrailing {
        x: Slot,
        y: Slot,
        y_len: usize,
    },
    MatMul {
        a: Slot,
        b: Slot,
        av: Tensor<F>,
        bv: Tensor<F>,
        dims: MatmulDims,
    },
    Reshape {
        x: usize,
    },
    Permute {
        x: usize,
        out_shape: Vec<usize>,
        axes: Vec<usize>,
    },
    Narrow {
        x: usize,
        in_len: usize,
        outer: usize,
        extent: usize,
        inner: usize,
        start: usize,
        len: usize,
    },
    Concat {
        parts: Vec<(Slot, usize)>,
        outer: usize,
        inner: usize,
    },
    Repeat {
        x: usize,
        outer: usize,
        count: usize,
        inner: usize,
    },
    GatherRows {
        table: usize,
        table_len: usize,
        width: usize,
        idx: Vec<usize>,
    },
    LayerNorm {
        x: Slot,
        gain: Slot,
        bias: Slot,
        xhat: Vec<F>,
        rstd: Vec<F>,
        gain_v: Tensor<F>,
        d: usize,
    },
    Softmax {
        x: usize,
        y: Tensor<F>,
        n: usize,
    },
    Gelu {
        x: usize,
        xv: Tensor<F>,
    },
    MeanSquare {
        a: Slot,
        b: Slot,
        diff: Vec<F>,
    },
    Sum {
        x: usize,
        len: usize,
    },
}

/// Append-only record of differentiable operations.
///
/// Nodes are pushed in evaluation order, so operands always precede their
/// consumers and [`Tape::backward`] is a single reverse sweep.
#[derive(Debug)]
pub struct Tape<F: Real> {
    nodes: RefCell<Vec<Op<F>>>,
    grad_enabled: bool,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.044715;
// sqrt(2 / π)
const GELU_K: f64 = 0.797_884_560_802_865_4;

/// Tanh-approximation GELU, `0.5 x (1 + tanh(√(2/π)(x + 0.044715 x³)))`.
pub(crate) fn gelu_scalar<F: Real>(x: F) -> F {
    // 0.5 · (1 + tanh(u)) is the logistic function of 2u.
    let u = F::of(GELU_K) * (x + F::of(GELU_C) * x * x * x);
    x / (F::one() + (-(u + u)).exp())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let k = F::of(GELU_K);
    let c = F::of(GELU_C);
    let u = k * (x + c * x * x * x);
    let s = F::one() / (F::one() + (-(u + u)).exp());
    s + x * s * (F::one() - s) * F::of(2.0) * k * (F::one() + F::of(3.0) * c * x * x)
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A tape that records nothing; every result is a constant.
    pub fn no_grad() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn constant(&self, value: Tensor<F>) -> Var<F> {
        Var { value, node: None }
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor<F>) -> Var<F> {
        if !self.grad_enabled {
            return self.constant(value);
        }
        self.push(value, Op::Leaf)
    }

    fn push(&self, value: Tensor<F>, op: Op<F>) -> Var<F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(op);
        Var {
            value,
            node: Some(nodes.len() - 1),
        }
    }

    fn tracks(&self, slots: &[Slot]) -> bool {
        self.grad_enabled && slots.iter().any(Option::is_some)
    }

    fn emit(&self, value: Tensor<F>, slots: &[Slot], op: impl FnOnce() -> Op<F>) -> Var<F> {
        if self.tracks(slots) {
            self.push(value, op())
        } else {
            self.constant(value)
        }
    }

    pub fn add(&self, a: &Var<F>, b: &Var<F>) -> Result<Var<F>> {
        let value = a.value.zip_map(&b.value, "add", |x, y| x + y)?;
        Ok(self.emit(value, &[a.node, b.node], || Op::Add {
            a: a.node,
            b: b.node,
        }))
    }

    pub fn sub(&self, a: &Var<F>, b: &Var<F>) -> Result<Var<F>> {
        let value = a.value.zip_map(&b.value, "sub", |x, y| x - y)?;
        Ok(self.emit(value, &[a.node, b.node], || Op::Sub {
            a: a.node,
            b: b.node,
        }))
    }

    pub fn mul(&self, a: &Var<F>, b: &Var<F>) -> Result<Var<F>> {
        let value = a.value.zip_map(&b.value, "mul", |x, y| x * y)?;
        Ok(self.emit(value, &[a.node, b.node], || Op::Mul {
            a: a.node,
            b: b.node,
            av: a.value.clone(),
            bv: b.value.clone(),
        }))
    }

    pub fn scale(&self, x: &Var<F>, c: F) -> Var<F> {
        let value = x.value.map(|v| v * c);
        self.emit(value, &[x.node], || Op::Scale {
            x: x.node.unwrap(),
            c,
        })
    }

    /// `x + y` where `y`'s shape equals the trailing axes of `x`'s shape
    /// (bias vectors, positional tables). `y` is repeated over the leading axes.
    pub fn add_trailing(&self, x: &Var<F>, y: &Var<F>) -> Result<Var<F>> {
        let (xs, ys) = (x.shape(), y.shape());
        if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != *ys {
            return Err(Error::shape("add_trailing", format!("{xs:?} + {ys:?}")));
        }
        let yd = y.value.data();
        let y_len = yd.len();
        let mut data = x.value.data().to_vec();
        for row in data.chunks_exact_mut(y_len) {
            for (a, &b) in row.iter_mut().zip(yd) {
                *a = *a + b;
            }
        }
        let value = Tensor::from_vec(xs, data)?;
        Ok(self.emit(value, &[x.node, y.node], || Op::AddTrailing {
            x: x.node,
            y: y.node,
            y_len,
        }))
    }

    /// Batched matrix product; see [`Tensor::matmul`].
    pub fn matmul(&self, a: &Var<F>, b: &Var<F>) -> Result<Var<F>> {
        let dims = MatmulDims::resolve(a.shape(), b.shape())?;
        let value = Tensor::from_vec(&dims.out_shape, dims.forward(a.value.data(), b.value.data()))?;
        Ok(self.emit(value, &[a.node, b.node], || Op::MatMul {
            a: a.node,
            b: b.node,
            av: a.value.clone(),
            bv: b.value.clone(),
            dims,
        }))
    }

    pub fn reshape(&self, x: &Var<F>, shape: &[usize]) -> Result<Var<F>> {
        let value = x.value.reshape(shape)?;
        Ok(self.emit(value, &[x.node], || Op::Reshape { x: x.node.unwrap() }))
    }

    pub fn permute(&self, x: &Var<F>, axes: &[usize]) -> Result<Var<F>> {
        let value = x.value.permute(axes)?;
        Ok(self.emit(value, &[x.node], || Op::Permute {
            x: x.node.unwrap(),
            out_shape: permuted_shape(x.shape(), axes).expect("checked by forward"),
            axes: axes.to_vec(),
        }))
    }

    pub fn narrow(&self, x: &Var<F>, axis: usize, start: usize, len: usize) -> Result<Var<F>> {
        let value = x.value.narrow(axis, start, len)?;
        let (outer, extent, inner) = split_axis(x.shape(), axis);
        Ok(self.emit(value, &[x.node], || Op::Narrow {
            x: x.node.unwrap(),
            in_len: x.value.len(),
            outer,
            extent,
            inner,
            start,
            len,
        }))
    }

    pub fn concat(&self, parts: &[&Var<F>], axis: usize) -> Result<Var<F>> {
        let values: Vec<&Tensor<F>> = parts.iter().map(|p| &p.value).collect();
        let value = Tensor::concat(&values, axis)?;
        let slots: Vec<Slot> = parts.iter().map(|p| p.node).collect();
        let (outer, _, inner) = split_axis(value.shape(), axis);
        Ok(self.emit(value, &slots, || Op::Concat {
            parts: parts.iter().map(|p| (p.node, p.shape()[axis])).collect(),
            outer,
            inner,
        }))
    }

    /// Insert a new axis at `axis` holding `count` copies of `x`.
    pub fn repeat(&self, x: &Var<F>, axis: usize, count: usize) -> Result<Var<F>> {
        let xs = x.shape();
        if axis > xs.len() || count == 0 {
            return Err(Error::shape("repeat", format!("axis {axis} x{count} of {xs:?}")));
        }
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis..].iter().product();
        let d = x.value.data();
        let mut data = Vec::with_capacity(outer * count * inner);
        for o in 0..outer {
            for _ in 0..count {
                data.extend_from_slice(&d[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = xs.to_vec();
        shape.insert(axis, count);
        let value = Tensor::from_vec(&shape, data)?;
        Ok(self.emit(value, &[x.node], || Op::Repeat {
            x: x.node.unwrap(),
            outer,
            count,
            inner,
        }))
    }

    /// Rows `idx` of a `[rows, width]` table, giving `[idx.len(), width]`.
    pub fn gather_rows(&self, table: &Var<F>, idx: &[usize]) -> Result<Var<F>> {
        let ts = table.shape();
        if ts.len() != 2 || idx.is_empty() {
            return Err(Error::shape("gather_rows", format!("table {ts:?}")));
        }
        let (rows, width) = (ts[0], ts[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!("row {bad} out of range for {rows} rows")));
        }
        let d = table.value.data();
        let data: Vec<F> = idx
            .iter()
            .flat_map(|&i| d[i * width..(i + 1) * width].iter().copied())
            .collect();
        let value = Tensor::from_vec(&[idx.len(), width], data)?;
        Ok(self.emit(value, &[table.node], || Op::GatherRows {
            table: table.node.unwrap(),
            table_len: rows * width,
            width,
            idx: idx.to_vec(),
        }))
    }

    /// Normalize the last axis to zero mean and unit variance, then apply
    /// `gain` and `bias` (both `[d]`).
    pub fn layer_norm(&self, x: &Var<F>, gain: &Var<F>, bias: &Var<F>, eps: f64) -> Result<Var<F>> {
        let d = *x.shape().last().ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("x {:?}, gain {:?}, bias {:?}", x.shape(), gain.shape(), bias.shape()),
            ));
        }
        if !(eps > 0.0) {
            return Err(Error::invalid(format!("layer_norm eps must be positive, got {eps}")));
        }
        let eps = F::of(eps);
        let inv_d = F::one() / F::of(d as f64);
        let (g, b) = (gain.value.data(), bias.value.data());
        let rows = x.value.len() / d;
        let mut out = Vec::with_capacity(x.value.len());
        let mut xhat = Vec::with_capacity(x.value.len());
        let mut rstd = Vec::with_capacity(rows);
        for row in x.value.data().chunks_exact(d) {
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let r = F::one() / (var + eps).sqrt();
            rstd.push(r);
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::from_vec(x.shape(), out)?;
        Ok(self.emit(value, &[x.node, gain.node, bias.node], || Op::LayerNorm {
            x: x.node,
            gain: gain.node,
            bias: bias.node,
            xhat,
            rstd,
            gain_v: gain.value.clone(),
            d,
        }))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&self, x: &Var<F>) -> Result<Var<F>> {
        let n = *x.shape().last().ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let mut out = Vec::with_capacity(x.value.len());
        for row in x.value.data().chunks_exact(n) {
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let start = out.len();
            let mut s = F::zero();
            for &v in row {
                let e = (v - m).exp();
                s = s + e;
                out.push(e);
            }
            let inv = F::one() / s;
            for e in &mut out[start..] {
                *e = *e * inv;
            }
        }
        let value = Tensor::from_vec(x.shape(), out)?;
        Ok(self.emit(value.clone(), &[x.node], || Op::Softmax {
            x: x.node.unwrap(),
            y: value,
            n,
        }))
    }

    pub fn gelu(&self, x: &Var<F>) -> Var<F> {
        let value = x.value.map(gelu_scalar);
        self.emit(value, &[x.node], || Op::Gelu {
            x: x.node.unwrap(),
            xv: x.value.clone(),
        })
    }

    /// `mean((a - b)²)` over all elements, as a scalar.
    pub fn mean_square_error(&self, a: &Var<F>, b: &Var<F>) -> Result<Var<F>> {
        same_shape("mean_square_error", a.shape(), b.shape())?;
        let diff: Vec<F> = a
            .value
            .data()
            .iter()
            .zip(b.value.data())
            .map(|(&x, &y)| x - y)
            .collect();
        let n = F::of(diff.len() as f64);
        let loss = diff.iter().map(|&d| d * d).sum::<F>() / n;
        Ok(self.emit(Tensor::scalar(loss), &[a.node, b.node], || Op::MeanSquare {
            a: a.node,
            b: b.node,
            diff,
        }))
    }

    pub fn sum(&self, x: &Var<F>) -> Var<F> {
        let total = x.value.data().iter().copied().sum::<F>();
        self.emit(Tensor::scalar(total), &[x.node], || Op::Sum {
            x: x.node.unwrap(),
            len: x.value.len(),
        })
    }

    pub fn mean(&self, x: &Var<F>) -> Var<F> {
        let s = self.sum(x);
        self.scale(&s, F::one() / F::of(x.value.len() as f64))
    }

    /// Reverse sweep from a scalar `loss`. Gradients of the same leaf from
    /// different paths are summed in reverse node order.
    pub fn backward(&self, loss: &Var<F>) -> Result<Gradients<F>> {
        if loss.value.len() != 1 {
            return Err(Error::NonScalarLoss(loss.shape().to_vec()));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<F>>> = Vec::new();
        grads.resize_with(nodes.len(), || None);
        if let Some(root) = loss.node {
            grads[root] = Some(vec![F::one()]);
            for id in (0..=root).rev() {
                if matches!(nodes[id], Op::Leaf) {
                    continue;
                }
                let Some(g) = grads[id].take() else { continue };
                vjp(&nodes[id], &g, &mut |input, contrib| accumulate(&mut grads[input], contrib));
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<F: Real>(slot: &mut Option<Vec<F>>, contrib: Vec<F>) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contrib) {
                *a = *a + c;
            }
        }
        None => *slot = Some(contrib),
    }
}

/// Push `(operand, ∂operand)` pairs for one node, in operand order.
fn vjp<F: Real>(op: &Op<F>, g: &[F], out: &mut dyn FnMut(usize, Vec<F>)) {
    match op {
        Op::Leaf => {}
        Op::Add { a, b } => {
            if let Some(a) = *a {
                out(a, g.to_vec());
            }
            if let Some(b) = *b {
                out(b, g.to_vec());
            }
        }
        Op::Sub { a, b } => {
            if let Some(a) = *a {
                out(a, g.to_vec());
            }
            if let Some(b) = *b {
                out(b, g.iter().map(|&v| -v).collect());
            }
        }
        Op::Mul { a, b, av, bv } => {
            if let Some(a) = *a {
                out(a, g.iter().zip(bv.data()).map(|(&g, &y)| g * y).collect());
            }
            if let Some(b) = *b {
                out(b, g.iter().zip(av.data()).map(|(&g, &x)| g * x).collect());
            }
        }
        Op::Scale { x, c } => out(*x, g.iter().map(|&v| v * *c).collect()),
        Op::AddTrailing { x, y, y_len } => {
            if let Some(x) = *x {
                out(x, g.to_vec());
            }
            if let Some(y) = *y {
                let mut gy = vec![F::zero(); *y_len];
                for row in g.chunks_exact(*y_len) {
                    for (acc, &v) in gy.iter_mut().zip(row) {
                        *acc = *acc + v;
                    }
                }
                out(y, gy);
            }
        }
        Op::MatMul { a, b, av, bv, dims } => {
            let (ga, gb) = dims.backward(av.data(), bv.data(), g, a.is_some(), b.is_some());
            if let Some(a) = *a {
                out(a, ga);
            }
            if let Some(b) = *b {
                out(b, gb);
            }
        }
        Op::Reshape { x } => out(*x, g.to_vec()),
        Op::Permute { x, out_shape, axes } => {
            out(*x, permute_data(g, out_shape, &inverse_axes(axes)));
        }
        Op::Narrow {
            x,
            in_len,
            outer,
            extent,
            inner,
            start,
            len,
        } => {
            let mut gx = vec![F::zero(); *in_len];
            let chunk = len * inner;
            for o in 0..*outer {
                let dst = o * extent * inner + start * inner;
                gx[dst..dst + chunk].copy_from_slice(&g[o * chunk..(o + 1) * chunk]);
            }
            out(*x, gx);
        }
        Op::Concat { parts, outer, inner } => {
            let total: usize = parts.iter().map(|p| p.1).sum();
            let mut offset = 0;
            for &(slot, extent) in parts {
                let chunk = extent * inner;
                if let Some(id) = slot {
                    let mut gp = Vec::with_capacity(outer * chunk);
                    for o in 0..*outer {
                        let base = o * total * inner + offset;
                        gp.extend_from_slice(&g[base..base + chunk]);
                    }
                    out(id, gp);
                }
                offset += chunk;
            }
        }
        Op::Repeat {
            x,
            outer,
            count,
            inner,
        } => {
            let mut gx = vec![F::zero(); outer * inner];
            for o in 0..*outer {
                let dst = &mut gx[o * inner..(o + 1) * inner];
                for c in 0..*count {
                    let src = &g[(o * count + c) * inner..(o * count + c + 1) * inner];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
            }
            out(*x, gx);
        }
        Op::GatherRows {
            table,
            table_len,
            width,
            idx,
        } => {
            let mut gt = vec![F::zero(); *table_len];
            for (r, &i) in idx.iter().enumerate() {
                let dst = &mut gt[i * width..(i + 1) * width];
                for (d, &s) in dst.iter_mut().zip(&g[r * width..(r + 1) * width]) {
                    *d = *d + s;
                }
            }
            out(*table, gt);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
            gain_v,
            d,
        } => {
            let d = *d;
            let gv = gain_v.data();
            if let Some(x) = *x {
                let inv_d = F::one() / F::of(d as f64);
                let mut gx = Vec::with_capacity(g.len());
                for ((gr, hr), &r) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).zip(rstd) {
                    let mut mean_dh = F::zero();
                    let mut mean_dh_h = F::zero();
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        mean_dh = mean_dh + dh;
                        mean_dh_h = mean_dh_h + dh * hr[j];
                    }
                    mean_dh = mean_dh * inv_d;
                    mean_dh_h = mean_dh_h * inv_d;
                    for j in 0..d {
                        gx.push(r * (gr[j] * gv[j] - mean_dh - hr[j] * mean_dh_h));
                    }
                }
                out(x, gx);
            }
            if let Some(gain) = *gain {
                let mut gg = vec![F::zero(); d];
                for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for j in 0..d {
                        gg[j] = gg[j] + gr[j] * hr[j];
                    }
                }
                out(gain, gg);
            }
            if let Some(bias) = *bias {
                let mut gb = vec![F::zero(); d];
                for gr in g.chunks_exact(d) {
                    for j in 0..d {
                        gb[j] = gb[j] + gr[j];
                    }
                }
                out(bias, gb);
            }
        }
        Op::Softmax { x, y, n } => {
            let mut gx = Vec::with_capacity(g.len());
            for (gr, yr) in g.chunks_exact(*n).zip(y.data().chunks_exact(*n)) {
                let dot = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<F>();
                gx.extend(gr.iter().zip(yr).map(|(&a, &b)| b * (a - dot)));
            }
            out(*x, gx);
        }
        Op::Gelu { x, xv } => {
            out(*x, g.iter().zip(xv.data()).map(|(&g, &v)| g * gelu_grad(v)).collect());
        }
        Op::MeanSquare { a, b, diff } => {
            let k = g[0] * F::of(2.0) / F::of(diff.len() as f64);
            if let Some(a) = *a {
                out(a, diff.iter().map(|&d| d * k).collect());
            }
            if let Some(b) = *b {
                out(b, diff.iter().map(|&d| -(d * k)).collect());
            }
        }
        Op::Sum { x, len } => out(*x, vec![g[0]; *len]),
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient with respect to `var`; zeros when `var` does not reach the loss.
    pub fn wrt(&self, var: &Var<F>) -> Tensor<F> {
        match var.node.and_then(|id| self.grads.get(id)).and_then(Option::as_ref) {
            Some(g) => Tensor::from_vec(var.shape(), g.clone()).expect("gradient matches shape"),
            None => Tensor::zeros(var.shape()),
        }
    }

    pub fn for_bound(&self, bound: &super::Bound<F>) -> Vec<Tensor<F>> {
        bound.vars().iter().map(|v| self.wrt(v)).collect()
    }
}
