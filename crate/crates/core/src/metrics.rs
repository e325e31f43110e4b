//! Proxy-FID: Fréchet distance between Gaussian fits of random-feature
//! embeddings of two image sets.
//!
//! The feature map is `W2 · tanh(W1 · x + b1)` with weights drawn once from a
//! seeded generator. All statistics are computed in f64.

mod linalg;

pub use linalg::{symmetric_eigen, Eigen, Matrix, MAX_SWEEPS};

use crate::rng::Rng;
use crate::tensor::{Real, Tensor};
use crate::{Error, Result};

/// Eigenvalues above `−PSD_TOLERANCE · max(1, ‖A‖_F)` are clipped to zero;
/// anything lower is rejected.
pub const PSD_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    pub cov: Matrix,
    pub count: usize,
}

/// Sample mean and unbiased covariance of `[n, d]` features, two-pass.
pub fn fit_stats(features: &Tensor<f64>) -> Result<GaussianStats> {
    let &[n, d] = features.shape() else {
        return Err(Error::shape("fit_stats", format!("expected [n, d], got {:?}", features.shape())));
    };
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 samples, got {n}")));
    }
    let x = features.data();
    let mut mean = vec![0.0; d];
    for row in x.chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = Matrix::zeros(d);
    let mut centered = vec![0.0; d];
    for row in x.chunks_exact(d) {
        for ((c, v), m) in centered.iter_mut().zip(row).zip(&mean) {
            *c = v - m;
        }
        for i in 0..d {
            for j in i..d {
                cov.set(i, j, cov.get(i, j) + centered[i] * centered[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov.get(i, j) / (n - 1) as f64;
            cov.set(i, j, v);
            cov.set(j, i, v);
        }
    }
    Ok(GaussianStats { mean, cov, count: n })
}

fn clipped_eigen(a: &Matrix) -> Result<Eigen> {
    let mut e = symmetric_eigen(a)?;
    let floor = -PSD_TOLERANCE * a.frobenius().max(1.0);
    if let Some(&low) = e.values.iter().find(|&&v| v < floor) {
        return Err(Error::NotPsd { eigenvalue: low });
    }
    for v in &mut e.values {
        *v = v.max(0.0);
    }
    Ok(e)
}

/// `Tr((a·b)^{1/2})` for symmetric PSD `a`, `b`, computed as the sum of
/// square roots of the eigenvalues of `a^{1/2} · b · a^{1/2}`.
pub fn sqrtm_trace(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape("sqrtm_trace", format!("{0}×{0} vs {1}×{1}", a.dim(), b.dim())));
    }
    // Validates b before the product hides it.
    clipped_eigen(b)?;
    let root = clipped_eigen(a)?.reconstruct_with(f64::sqrt);
    let inner = root.matmul(b).matmul(&root).symmetrized();
    Ok(clipped_eigen(&inner)?.values.iter().map(|v| v.sqrt()).sum())
}

/// `‖μ₁ − μ₂‖² + Tr Σ₁ + Tr Σ₂ − 2 Tr((Σ₁Σ₂)^{1/2})`, clipped at zero.
pub fn frechet_distance(s1: &GaussianStats, s2: &GaussianStats) -> Result<f64> {
    if s1.mean.len() != s2.mean.len() || s1.cov.dim() != s2.cov.dim() || s1.cov.dim() != s1.mean.len() {
        return Err(Error::shape(
            "frechet_distance",
            format!("dimensions {} and {}", s1.mean.len(), s2.mean.len()),
        ));
    }
    let shift: f64 = s1.mean.iter().zip(&s2.mean).map(|(a, b)| (a - b).powi(2)).sum();
    let cross = sqrtm_trace(&s1.cov, &s2.cov)?;
    Ok((shift + s1.cov.trace() + s2.cov.trace() - 2.0 * cross).max(0.0))
}

/// Fixed random two-layer feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    pub seed: u64,
    input_dim: usize,
    hidden: usize,
    output_dim: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
}

impl FeatureExtractor {
    pub const HIDDEN: usize = 256;
    pub const OUTPUT: usize = 64;

    pub fn new(seed: u64, input_dim: usize) -> Self {
        Self::with_dims(seed, input_dim, Self::HIDDEN, Self::OUTPUT)
    }

    /// `W1 ~ N(0, 1/input_dim)`, `b1 ~ N(0, 1/4)`, `W2 ~ N(0, 1/hidden)`.
    pub fn with_dims(seed: u64, input_dim: usize, hidden: usize, output_dim: usize) -> Self {
        let mut rng = Rng::new(seed);
        let mut draw = |count: usize, std: f64| (0..count).map(|_| rng.normal() * std).collect::<Vec<f64>>();
        let w1 = draw(input_dim * hidden, 1.0 / (input_dim as f64).sqrt());
        let b1 = draw(hidden, 0.5);
        let w2 = draw(hidden * output_dim, 1.0 / (hidden as f64).sqrt());
        FeatureExtractor {
            seed,
            input_dim,
            hidden,
            output_dim,
            w1,
            b1,
            w2,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    /// Features of `n` flattened images stored row after row.
    pub fn features_of(&self, x: &[f64], n: usize) -> Vec<f64> {
        assert_eq!(x.len(), n * self.input_dim, "feature input width");
        let mut h: Vec<f64> = (0..n).flat_map(|_| self.b1.iter().copied()).collect();
        f64::gemm(n, self.input_dim, self.hidden, x, (self.input_dim, 1), &self.w1, (self.hidden, 1), &mut h, true);
        for v in &mut h {
            *v = v.tanh();
        }
        let mut out = vec![0.0; n * self.output_dim];
        f64::gemm(n, self.hidden, self.output_dim, &h, (self.hidden, 1), &self.w2, (self.output_dim, 1), &mut out, false);
        out
    }
}

/// `[n, …]` images to `[n, d_out]` features.
pub fn extract_features<F: Real>(images: &Tensor<F>, extractor: &FeatureExtractor) -> Result<Tensor<f64>> {
    let n = images.shape().first().copied().unwrap_or(0);
    if images.shape().len() < 2 || n == 0 {
        return Err(Error::invalid("feature extraction needs a non-empty batch"));
    }
    let per = images.len() / n;
    if per != extractor.input_dim() {
        return Err(Error::shape(
            "extract_features",
            format!("image size {per}, extractor expects {}", extractor.input_dim()),
        ));
    }
    let out = extractor.features_of(&images.to_f64_vec(), n);
    Tensor::from_vec(&[n, extractor.output_dim()], out)
}

/// Fréchet distance between the feature Gaussians of two image sets.
pub fn proxy_fid<F: Real>(generated: &Tensor<F>, reference: &Tensor<F>, extractor: &FeatureExtractor) -> Result<f64> {
    let a = fit_stats(&extract_features(generated, extractor)?)?;
    let b = fit_stats(&extract_features(reference, extractor)?)?;
    frechet_distance(&a, &b)
}
