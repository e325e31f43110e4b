//! Discrete-time Gaussian diffusion: noise schedule, forward noising,
//! the ε-prediction objective, classifier-free guidance and ancestral
//! sampling.
//!
//! Timesteps are 0-based. Step `t` of the reverse chain maps `z_t` to
//! `z_{t-1}`, and step 0 adds no noise, so the chain ends on the mean.

use crate::codec::LatentCodec;
use crate::rng::Rng;
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::{Error, Result};

/// Anything that predicts the noise in `z_t` given timesteps and labels.
pub trait EpsilonModel<F: Real> {
    /// `[channels, height, width]` of one latent.
    fn latent_shape(&self) -> [usize; 3];
    /// Real classes; label `num_classes()` means "no label".
    fn num_classes(&self) -> usize;
    fn predict(&self, tape: &Tape<F>, z_t: &Tensor<F>, t: &[usize], y: &[usize]) -> Result<Var<F>>;
}

/// Precomputed β, α, ᾱ and σ tables, all in f64.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// β linear from `beta_start` (t = 0) to `beta_end` (t = steps − 1).
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("diffusion.steps must be positive".into()));
        }
        let valid = |b: f64| b > 0.0 && b < 1.0;
        if !valid(beta_start) || !valid(beta_end) || beta_start > beta_end {
            return Err(Error::Config(format!(
                "beta range [{beta_start}, {beta_end}] must satisfy 0 < start <= end < 1"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|t| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * t as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Ok(Self::from_betas(betas))
    }

    fn from_betas(betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Reverse-step noise scale: `√β_t`, and 0 at the last step.
    pub fn sigma(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.betas[t].sqrt()
        }
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::invalid(format!("timestep {t} outside [0, {})", self.steps())));
        }
        Ok(())
    }
}

pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(steps, beta_start, beta_end)
}

fn per_sample_shape<F: Real>(x: &Tensor<F>, batch: usize, op: &'static str) -> Result<usize> {
    if x.shape().len() < 2 || x.shape()[0] != batch {
        return Err(Error::shape(op, format!("{:?} for a batch of {batch}", x.shape())));
    }
    Ok(x.len() / batch)
}

/// `z_t = √ᾱ_t · z0 + √(1 − ᾱ_t) · ε`, one timestep per batch row.
pub fn q_sample<F: Real>(schedule: &NoiseSchedule, z0: &Tensor<F>, t: &[usize], eps: &Tensor<F>) -> Result<Tensor<F>> {
    if z0.shape() != eps.shape() {
        return Err(Error::shape("q_sample", format!("z0 {:?} vs eps {:?}", z0.shape(), eps.shape())));
    }
    let per = per_sample_shape(z0, t.len(), "q_sample")?;
    let mut out = Vec::with_capacity(z0.len());
    for (i, &step) in t.iter().enumerate() {
        schedule.check(step)?;
        let ab = schedule.alpha_bar(step);
        let (a, b) = (F::of(ab.sqrt()), F::of((1.0 - ab).sqrt()));
        let range = i * per..(i + 1) * per;
        out.extend(z0.data()[range.clone()].iter().zip(&eps.data()[range]).map(|(&z, &e)| a * z + b * e));
    }
    Tensor::from_vec(z0.shape(), out)
}

/// Replace each label by `null_label` with probability `p`.
pub fn drop_labels(labels: &[usize], p: f64, null_label: usize, rng: &mut Rng) -> Vec<usize> {
    labels
        .iter()
        .map(|&y| if rng.uniform() < p { null_label } else { y })
        .collect()
}

/// Label dropout and guidance settings. `null_label` equals the class count.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceConfig {
    pub drop_probability: f64,
    pub guidance_scale: f64,
    pub null_label: usize,
}

impl GuidanceConfig {
    pub fn new(num_classes: usize) -> Self {
        GuidanceConfig {
            drop_probability: 0.10,
            guidance_scale: 1.25,
            null_label: num_classes,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.drop_probability) {
            return Err(Error::Config(format!(
                "guidance.drop_probability ({}) must be in [0, 1]",
                self.drop_probability
            )));
        }
        if !(self.guidance_scale.is_finite() && self.guidance_scale >= 0.0) {
            return Err(Error::Config(format!(
                "guidance.scale ({}) must be finite and non-negative",
                self.guidance_scale
            )));
        }
        if self.null_label != num_classes {
            return Err(Error::Config(format!(
                "null label {} must equal the class count {num_classes}",
                self.null_label
            )));
        }
        Ok(())
    }
}

/// `count` timesteps uniform on `[0, steps)`.
pub fn draw_timesteps(rng: &mut Rng, count: usize, steps: usize) -> Vec<usize> {
    (0..count).map(|_| rng.below(steps)).collect()
}

/// The ε-prediction objective on pixel images: encode `x0`, noise it to
/// `z_t`, drop labels to the null label with the configured probability,
/// and return the mean squared error between `eps` and the prediction.
#[allow(clippy::too_many_arguments)]
pub fn training_loss<F: Real, M: EpsilonModel<F> + ?Sized>(
    tape: &Tape<F>,
    model: &M,
    codec: &LatentCodec<F>,
    schedule: &NoiseSchedule,
    x0: &Tensor<F>,
    y: &[usize],
    t: &[usize],
    eps: &Tensor<F>,
    guidance: &GuidanceConfig,
    rng: &mut Rng,
) -> Result<Var<F>> {
    if let Some(&bad) = y.iter().find(|&&l| l > guidance.null_label) {
        return Err(Error::invalid(format!("label {bad} out of range [0, {}]", guidance.null_label)));
    }
    let z0 = codec.encode(x0)?;
    let z_t = q_sample(schedule, &z0, t, eps)?;
    let y = drop_labels(y, guidance.drop_probability, guidance.null_label, rng);
    let pred = model.predict(tape, &z_t, t, &y)?;
    tape.mean_square_error(&pred, &tape.constant(eps.clone()))
}

/// `uncond + s · (cond − uncond)`, returning `cond` itself at `s = 1` and
/// `uncond` itself at `s = 0`.
pub fn cfg_epsilon<F: Real>(cond: &Tensor<F>, uncond: &Tensor<F>, scale: f64) -> Result<Tensor<F>> {
    if cond.shape() != uncond.shape() {
        return Err(Error::shape("cfg_epsilon", format!("{:?} vs {:?}", cond.shape(), uncond.shape())));
    }
    if scale == 1.0 {
        return Ok(cond.clone());
    }
    if scale == 0.0 {
        return Ok(uncond.clone());
    }
    let s = F::of(scale);
    cond.zip_map(uncond, "cfg_epsilon", |c, u| u + s * (c - u))
}

/// Guided noise estimate from `model`. Scales 1 and 0 evaluate only the
/// branch they return; other scales run cond and uncond as one doubled batch.
pub fn guided_epsilon<F: Real, M: EpsilonModel<F> + ?Sized>(
    model: &M,
    z_t: &Tensor<F>,
    t: &[usize],
    y: &[usize],
    scale: f64,
) -> Result<Tensor<F>> {
    if !(scale.is_finite() && scale >= 0.0) {
        return Err(Error::invalid(format!("guidance scale {scale} must be finite and non-negative")));
    }
    let tape = Tape::no_grad();
    let null = vec![model.num_classes(); y.len()];
    if scale == 1.0 {
        return Ok(model.predict(&tape, z_t, t, y)?.into_value());
    }
    if scale == 0.0 {
        return Ok(model.predict(&tape, z_t, t, &null)?.into_value());
    }
    let b = y.len();
    let both = Tensor::concat(&[z_t, z_t], 0)?;
    let tt: Vec<usize> = t.iter().chain(t).copied().collect();
    let yy: Vec<usize> = y.iter().chain(&null).copied().collect();
    let out = model.predict(&tape, &both, &tt, &yy)?.into_value();
    cfg_epsilon(&out.narrow(0, 0, b)?, &out.narrow(0, b, b)?, scale)
}

/// One ancestral step at timestep `t` (shared by the batch):
/// `z_{t-1} = (z_t − β_t/√(1−ᾱ_t) · ε̂) / √α_t + σ_t · noise`.
pub fn ddpm_step<F: Real>(
    schedule: &NoiseSchedule,
    z_t: &Tensor<F>,
    eps_hat: &Tensor<F>,
    t: usize,
    noise: &Tensor<F>,
) -> Result<Tensor<F>> {
    schedule.check(t)?;
    if z_t.shape() != eps_hat.shape() || z_t.shape() != noise.shape() {
        return Err(Error::shape(
            "ddpm_step",
            format!("z {:?}, eps {:?}, noise {:?}", z_t.shape(), eps_hat.shape(), noise.shape()),
        ));
    }
    let k = F::of(schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt());
    let inv = F::of(1.0 / schedule.alpha(t).sqrt());
    let sigma = F::of(schedule.sigma(t));
    let data = z_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .zip(noise.data())
        .map(|((&z, &e), &n)| (z - k * e) * inv + sigma * n)
        .collect();
    Tensor::from_vec(z_t.shape(), data)
}

/// A batch of images to draw. Image `i` uses the random stream
/// `first_stream + i` of `seed`, so an image does not depend on how the
/// request is split into batches.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRequest {
    pub labels: Vec<usize>,
    pub seed: u64,
    pub first_stream: u64,
    pub guidance: f64,
}

/// Run the full reverse chain from pure noise; returns `[b, c, h, w]` latents.
pub fn sample<F: Real, M: EpsilonModel<F> + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    request: &SampleRequest,
) -> Result<Tensor<F>> {
    let b = request.labels.len();
    if b == 0 {
        return Err(Error::invalid("sample request has no labels"));
    }
    if let Some(&bad) = request.labels.iter().find(|&&y| y > model.num_classes()) {
        return Err(Error::invalid(format!("label {bad} out of range")));
    }
    let [c, h, w] = model.latent_shape();
    let mut rngs: Vec<Rng> = (0..b as u64)
        .map(|i| Rng::stream(request.seed, request.first_stream + i))
        .collect();
    let draw = |rngs: &mut [Rng]| -> Result<Tensor<F>> {
        let data = rngs.iter_mut().flat_map(|r| r.normal_tensor::<F>(&[c * h * w]).into_vec()).collect();
        Tensor::from_vec(&[b, c, h, w], data)
    };
    let mut z = draw(&mut rngs)?;
    for t in (0..schedule.steps()).rev() {
        let ts = vec![t; b];
        let eps = guided_epsilon(model, &z, &ts, &request.labels, request.guidance)?;
        let noise = if t > 0 { draw(&mut rngs)? } else { Tensor::zeros(z.shape()) };
        z = ddpm_step(schedule, &z, &eps, t, &noise)?;
    }
    Ok(z)
}

/// [`sample`] in chunks of at most `batch` images.
pub fn sample_chunked<F: Real, M: EpsilonModel<F> + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    request: &SampleRequest,
    batch: usize,
) -> Result<Tensor<F>> {
    if batch == 0 {
        return Err(Error::invalid("sampling batch size must be positive"));
    }
    let mut parts = Vec::new();
    for (i, chunk) in request.labels.chunks(batch).enumerate() {
        let sub = SampleRequest {
            labels: chunk.to_vec(),
            first_stream: request.first_stream + (i * batch) as u64,
            ..request.clone()
        };
        parts.push(sample(model, schedule, &sub)?);
    }
    let refs: Vec<&Tensor<F>> = parts.iter().collect();
    Tensor::concat(&refs, 0)
}

/// Sample latents in chunks and decode them to clamped pixels.
pub fn sample_images<F: Real, M: EpsilonModel<F> + ?Sized>(
    model: &M,
    codec: &LatentCodec<F>,
    schedule: &NoiseSchedule,
    request: &SampleRequest,
    batch: usize,
) -> Result<Tensor<F>> {
    codec.decode(&sample_chunked(model, schedule, request, batch)?)
}
