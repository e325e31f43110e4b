//! Parameterized layers expressed as compositions of tape operations.

use super::{Bound, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::rng::Rng;
use crate::{Error, Result};

/// Truncated-normal weights with standard deviation `std`.
pub fn trunc_normal<F: Real>(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor<F> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| F::of(rng.truncated_normal() * std)).collect();
    Tensor::from_vec(shape, data).expect("shape and length agree")
}

/// Affine map over the last axis: `x · W + b`, `W` stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut Rng,
        std: f64,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), trunc_normal(rng, &[in_dim, out_dim], std));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn param_count(in_dim: usize, out_dim: usize, bias: bool) -> usize {
        in_dim * out_dim + if bias { out_dim } else { 0 }
    }

    pub fn forward<F: Real>(&self, tape: &Tape<F>, p: &Bound<F>, x: &Var<F>) -> Result<Var<F>> {
        let y = tape.matmul(x, &p[self.weight])?;
        match self.bias {
            Some(b) => tape.add_trailing(&y, &p[b]),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-6;

    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], F::one())),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn param_count(dim: usize) -> usize {
        2 * dim
    }

    pub fn forward<F: Real>(&self, tape: &Tape<F>, p: &Bound<F>, x: &Var<F>) -> Result<Var<F>> {
        tape.layer_norm(x, &p[self.gain], &p[self.bias], Self::EPS)
    }
}

/// Projections for multi-head attention. The key projection has no bias: a
/// key bias shifts every score in a row equally and cancels in the softmax.
#[derive(Clone, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut Rng,
        std: f64,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::invalid(format!("embedding width {dim} not divisible by {heads} heads")));
        }
        Ok(Attention {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, true, rng, std),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, false, rng, std),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, true, rng, std),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, true, rng, std),
            heads,
        })
    }

    pub fn param_count(dim: usize) -> usize {
        3 * Linear::param_count(dim, dim, true) + Linear::param_count(dim, dim, false)
    }
}

/// Scaled dot-product attention over `[b, n, d]` inputs with per-head
/// projections; scores are scaled by `1/√(d/heads)`.
pub fn multi_head_attention<F: Real>(
    tape: &Tape<F>,
    p: &Bound<F>,
    attn: &Attention,
    q_in: &Var<F>,
    k_in: &Var<F>,
    v_in: &Var<F>,
) -> Result<Var<F>> {
    let (qs, ks) = (q_in.shape(), k_in.shape());
    if qs.len() != 3 || ks.len() != 3 || ks != v_in.shape() || qs[0] != ks[0] || qs[2] != ks[2] {
        return Err(Error::shape(
            "multi_head_attention",
            format!("q {qs:?}, k {ks:?}, v {:?}", v_in.shape()),
        ));
    }
    let (b, nq, d) = (qs[0], qs[1], qs[2]);
    let nk = ks[1];
    let h = attn.heads;
    if d % h != 0 {
        return Err(Error::invalid(format!("embedding width {d} not divisible by {h} heads")));
    }
    let dh = d / h;

    let q = attn.query.forward(tape, p, q_in)?;
    let q = tape.permute(&tape.reshape(&q, &[b, nq, h, dh])?, &[0, 2, 1, 3])?;
    let k = attn.key.forward(tape, p, k_in)?;
    let k_t = tape.permute(&tape.reshape(&k, &[b, nk, h, dh])?, &[0, 2, 3, 1])?;
    let v = attn.value.forward(tape, p, v_in)?;
    let v = tape.permute(&tape.reshape(&v, &[b, nk, h, dh])?, &[0, 2, 1, 3])?;

    let scores = tape.scale(&tape.matmul(&q, &k_t)?, F::of(1.0 / (dh as f64).sqrt()));
    let weights = tape.softmax(&scores)?;
    let ctx = tape.matmul(&weights, &v)?;
    let ctx = tape.reshape(&tape.permute(&ctx, &[0, 2, 1, 3])?, &[b, nq, d])?;
    attn.out.forward(tape, p, &ctx)
}

/// Two-layer GELU perceptron.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        hidden: usize,
        out: usize,
        rng: &mut Rng,
        std: f64,
    ) -> Self {
        Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, rng, std),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, out, true, rng, std),
        }
    }

    pub fn param_count(dim: usize, hidden: usize, out: usize) -> usize {
        Linear::param_count(dim, hidden, true) + Linear::param_count(hidden, out, true)
    }

    pub fn forward<F: Real>(&self, tape: &Tape<F>, p: &Bound<F>, x: &Var<F>) -> Result<Var<F>> {
        let h = tape.gelu(&self.fc1.forward(tape, p, x)?);
        self.fc2.forward(tape, p, &h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, Tensor};

    fn setup(d: usize, heads: usize, seed: u64) -> (ParamStore<f64>, Attention) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let attn = Attention::new(&mut store, "attn", d, heads, &mut rng, 0.5).unwrap();
        // Non-zero biases so the bias paths are exercised.
        for t in store.tensors_mut() {
            if t.shape().len() == 1 {
                *t = trunc_normal(&mut rng, t.shape(), 0.3);
            }
        }
        (store, attn)
    }

    fn self_attend(store: &ParamStore<f64>, attn: &Attention, x: &Tensor<f64>) -> Tensor<f64> {
        let tape = Tape::no_grad();
        let p = store.bind(&tape);
        let xv = tape.constant(x.clone());
        multi_head_attention(&tape, &p, attn, &xv, &xv, &xv).unwrap().into_value()
    }

    #[test]
    fn indivisible_heads_rejected() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = Rng::new(0);
        assert!(Attention::new(&mut store, "a", 6, 4, &mut rng, 0.02).is_err());
    }

    #[test]
    fn single_token_is_value_then_out_projection() {
        let (store, attn) = setup(4, 2, 1);
        let mut rng = Rng::new(9);
        let x = rng.normal_tensor::<f64>(&[2, 1, 4]);
        let got = self_attend(&store, &attn, &x);

        let tape = Tape::no_grad();
        let p = store.bind(&tape);
        let v = attn.value.forward(&tape, &p, &tape.constant(x)).unwrap();
        let expect = attn.out.forward(&tape, &p, &v).unwrap();
        assert!(got.max_abs_diff(expect.value()) < 1e-12);
    }

    #[test]
    fn permutation_equivariant() {
        let (store, attn) = setup(8, 2, 2);
        let mut rng = Rng::new(10);
        let x = rng.normal_tensor::<f64>(&[1, 5, 8]);
        let perm = [3usize, 0, 4, 1, 2];
        let permute = |t: &Tensor<f64>| {
            let d = t.data();
            let data: Vec<f64> = perm.iter().flat_map(|&i| d[i * 8..(i + 1) * 8].to_vec()).collect();
            Tensor::from_vec(&[1, 5, 8], data).unwrap()
        };
        let y = self_attend(&store, &attn, &x);
        let y_perm = self_attend(&store, &attn, &permute(&x));
        assert!(permute(&y).max_abs_diff(&y_perm) < 1e-12);
    }

    #[test]
    fn gradients_over_all_projections() {
        let (store, attn) = setup(4, 2, 3);
        let mut rng = Rng::new(11);
        let x = rng.normal_tensor::<f64>(&[1, 3, 4]);
        let w = rng.normal_tensor::<f64>(&[1, 3, 4]);
        let loss = |s: &ParamStore<f64>| -> (f64, Vec<Tensor<f64>>) {
            let tape = Tape::new();
            let p = s.bind(&tape);
            let xv = tape.constant(x.clone());
            let y = multi_head_attention(&tape, &p, &attn, &xv, &xv, &xv).unwrap();
            let l = tape.sum(&tape.mul(&y, &tape.constant(w.clone())).unwrap());
            let g = tape.backward(&l).unwrap().for_bound(&p);
            (l.value().item(), g)
        };
        let (_, grads) = loss(&store);
        let report = finite_diff_check(&store, &grads, 1e-5, |s| loss(s).0);
        assert!(report.max_error() < 1e-3, "{report:?}");
    }
}
