//! Pixel ↔ latent mapping: either the identity or a per-patch linear
//! autoencoder. The linear codec maps each `f×f×3` pixel patch to one latent
//! cell of `latent_channels` values and back.

use crate::data::{batches, LabeledImage};
use crate::tensor::nn::Linear;
use crate::tensor::{AdamConfig, AdamState, Bound, ParamStore, Real, Tape, Tensor, Var};
use crate::rng::Rng;
use crate::vit::patchify;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CodecKind {
    Identity,
    LinearPatch,
}

impl CodecKind {
    pub fn name(self) -> &'static str {
        match self {
            CodecKind::Identity => "identity",
            CodecKind::LinearPatch => "linear_patch",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "identity" => Some(CodecKind::Identity),
            "linear_patch" => Some(CodecKind::LinearPatch),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodecConfig {
    pub kind: CodecKind,
    pub factor: usize,
    pub latent_channels: usize,
    pub pixel_hw: usize,
    pub pixel_channels: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            kind: CodecKind::LinearPatch,
            factor: 4,
            latent_channels: 4,
            pixel_hw: 32,
            pixel_channels: 3,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.pixel_channels != 3 {
            return fail(format!("codec.pixel_channels ({}) must be 3", self.pixel_channels));
        }
        match self.kind {
            CodecKind::Identity => {
                if self.factor != 1 || self.latent_channels != self.pixel_channels {
                    return fail(format!(
                        "identity codec needs codec.factor = 1 and codec.latent_channels = {}",
                        self.pixel_channels
                    ));
                }
            }
            CodecKind::LinearPatch => {
                if self.factor == 0 || !self.pixel_hw.is_multiple_of(self.factor) {
                    return fail(format!(
                        "codec.pixel_hw ({}) must be divisible by codec.factor ({})",
                        self.pixel_hw, self.factor
                    ));
                }
                if self.latent_channels == 0 {
                    return fail("codec.latent_channels must be positive".into());
                }
            }
        }
        Ok(())
    }

    pub fn latent_hw(&self) -> usize {
        self.pixel_hw / self.factor
    }

    pub fn pixel_shape(&self) -> [usize; 3] {
        [self.pixel_channels, self.pixel_hw, self.pixel_hw]
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.latent_channels, self.latent_hw(), self.latent_hw()]
    }

    fn patch_dim(&self) -> usize {
        self.factor * self.factor * self.pixel_channels
    }
}

#[derive(Clone, Debug)]
struct Maps {
    encode: Linear,
    decode: Linear,
}

#[derive(Clone, Debug)]
pub struct LatentCodec<F: Real> {
    config: CodecConfig,
    params: ParamStore<F>,
    maps: Option<Maps>,
}

impl<F: Real> LatentCodec<F> {
    /// Linear maps start from small truncated-normal weights and zero biases.
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let maps = match config.kind {
            CodecKind::Identity => None,
            CodecKind::LinearPatch => {
                let mut rng = Rng::new(seed);
                let (p, c) = (config.patch_dim(), config.latent_channels);
                let std = 1.0 / (p as f64).sqrt();
                Some(Maps {
                    encode: Linear::new(&mut params, "codec.encode", p, c, true, &mut rng, std),
                    decode: Linear::new(&mut params, "codec.decode", c, p, true, &mut rng, std),
                })
            }
        };
        Ok(LatentCodec { config, params, maps })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    fn check(&self, x: &Tensor<F>, want: [usize; 3], op: &'static str) -> Result<()> {
        if x.shape().len() != 4 || x.shape()[1..] != want {
            return Err(Error::shape(op, format!("{:?}, expected [b, {}, {}, {}]", x.shape(), want[0], want[1], want[2])));
        }
        Ok(())
    }

    fn encode_var(&self, tape: &Tape<F>, p: &Bound<F>, maps: &Maps, x: &Tensor<F>) -> Result<Var<F>> {
        let b = x.shape()[0];
        let g = self.config.latent_hw();
        let h = maps.encode.forward(tape, p, &tape.constant(patchify(x, self.config.factor)?))?;
        let h = tape.reshape(&h, &[b, g, g, self.config.latent_channels])?;
        tape.permute(&h, &[0, 3, 1, 2])
    }

    fn decode_var(&self, tape: &Tape<F>, p: &Bound<F>, maps: &Maps, z: &Var<F>) -> Result<Var<F>> {
        let b = z.shape()[0];
        let g = self.config.latent_hw();
        let h = tape.permute(z, &[0, 2, 3, 1])?;
        let h = tape.reshape(&h, &[b, g * g, self.config.latent_channels])?;
        let out = maps.decode.forward(tape, p, &h)?;
        let hw = self.config.pixel_hw;
        let (c, f) = (self.config.pixel_channels, self.config.factor);
        let out = tape.reshape(&out, &[b, g, g, c, f, f])?;
        let out = tape.permute(&out, &[0, 3, 1, 4, 2, 5])?;
        tape.reshape(&out, &[b, c, hw, hw])
    }

    /// `[b, 3, hw, hw]` pixels to `[b, c, hw/f, hw/f]` latents.
    pub fn encode(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        self.check(x, self.config.pixel_shape(), "encode")?;
        let Some(maps) = &self.maps else {
            return Ok(x.clone());
        };
        let tape = Tape::no_grad();
        let p = self.params.bind(&tape);
        Ok(self.encode_var(&tape, &p, maps, x)?.into_value())
    }

    /// Latents back to pixels without the final clamp.
    pub fn decode_unclamped(&self, z: &Tensor<F>) -> Result<Tensor<F>> {
        self.check(z, self.config.latent_shape(), "decode")?;
        let Some(maps) = &self.maps else {
            return Ok(z.clone());
        };
        let tape = Tape::no_grad();
        let p = self.params.bind(&tape);
        let out = self.decode_var(&tape, &p, maps, &tape.constant(z.clone()))?;
        Ok(out.into_value())
    }

    /// Latents back to pixels, clamped to `[-1, 1]`.
    pub fn decode(&self, z: &Tensor<F>) -> Result<Tensor<F>> {
        let (lo, hi) = (-F::one(), F::one());
        Ok(self.decode_unclamped(z)?.map(|v| v.max(lo).min(hi)))
    }

    /// Mean squared reconstruction error (unclamped) over a batch.
    pub fn reconstruction_error(&self, x: &Tensor<F>) -> Result<f64> {
        let r = self.decode_unclamped(&self.encode(x)?)?;
        let sum: f64 = r.data().iter().zip(x.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
        Ok(sum / x.len() as f64)
    }

    fn loss(&self, tape: &Tape<F>, p: &Bound<F>, x: &Tensor<F>) -> Result<Var<F>> {
        let maps = self.maps.as_ref().expect("linear codec");
        let z = self.encode_var(tape, p, maps, x)?;
        let r = self.decode_var(tape, p, maps, &z)?;
        tape.mean_square_error(&r, &tape.constant(x.clone()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodecTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        CodecTrainConfig {
            steps: 1500,
            batch_size: 64,
            adam: AdamConfig {
                learning_rate: 3e-3,
                ..AdamConfig::default()
            },
            seed: 0,
        }
    }
}

/// Per-step reconstruction loss recorded while training.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CodecTrainLog {
    pub losses: Vec<f64>,
}

/// Fit a linear-patch codec to `dataset` by Adam on reconstruction MSE.
/// The identity codec is returned unchanged.
pub fn train_codec(
    config: &CodecConfig,
    dataset: &[LabeledImage],
    train: &CodecTrainConfig,
) -> Result<(LatentCodec<f32>, CodecTrainLog)> {
    if dataset.is_empty() {
        return Err(Error::invalid("codec training needs a non-empty dataset"));
    }
    let mut codec = LatentCodec::<f32>::new(config.clone(), train.seed)?;
    let mut log = CodecTrainLog::default();
    if config.kind == CodecKind::Identity {
        return Ok((codec, log));
    }
    let mut adam = AdamState::new(&codec.params, train.adam);
    let mut epoch = 0u64;
    let mut iter = batches(dataset, train.batch_size, train.seed.wrapping_add(epoch))?;
    while log.losses.len() < train.steps {
        let Some((x, _)) = iter.next() else {
            epoch += 1;
            iter = batches(dataset, train.batch_size, train.seed.wrapping_add(epoch))?;
            continue;
        };
        let tape = Tape::new();
        let p = codec.params.bind(&tape);
        let loss = codec.loss(&tape, &p, &x)?;
        let grads = tape.backward(&loss)?.for_bound(&p);
        adam.step(&mut codec.params, &grads)?;
        log.losses.push(loss.value().item().as_f64());
    }
    Ok((codec, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::nn::trunc_normal;
    use crate::data::{make_dataset, stack, DatasetSpec};

    fn linear() -> CodecConfig {
        CodecConfig::default()
    }

    #[test]
    fn identity_roundtrip_is_exact() {
        let cfg = CodecConfig {
            kind: CodecKind::Identity,
            factor: 1,
            latent_channels: 3,
            ..CodecConfig::default()
        };
        let codec = LatentCodec::<f32>::new(cfg, 0).unwrap();
        let x = Rng::new(1).normal_tensor::<f32>(&[2, 3, 32, 32]).map(|v| v.clamp(-1.0, 1.0));
        assert!(codec.encode(&x).unwrap().bit_eq(&x));
        assert!(codec.decode(&codec.encode(&x).unwrap()).unwrap().bit_eq(&x));
    }

    #[test]
    fn config_validation() {
        assert!(CodecConfig { factor: 3, ..linear() }.validate().is_err());
        assert!(CodecConfig { kind: CodecKind::Identity, ..linear() }.validate().is_err());
        assert!(CodecConfig { latent_channels: 0, ..linear() }.validate().is_err());
        assert!(linear().validate().is_ok());
    }

    #[test]
    fn linear_shapes_and_zero_map() {
        let mut codec = LatentCodec::<f64>::new(linear(), 0).unwrap();
        let x = Rng::new(2).normal_tensor::<f64>(&[2, 3, 32, 32]);
        assert_eq!(codec.encode(&x).unwrap().shape(), &[2, 4, 8, 8]);
        assert_eq!(codec.decode(&codec.encode(&x).unwrap()).unwrap().shape(), &[2, 3, 32, 32]);
        for t in codec.params_mut().tensors_mut() {
            *t = Tensor::zeros(t.shape());
        }
        assert!(codec.encode(&x).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(codec.encode(&Tensor::zeros(&[1, 3, 16, 16])).is_err());
        assert!(codec.decode(&Tensor::zeros(&[1, 4, 4, 4])).is_err());
    }

    #[test]
    fn encode_matches_per_patch_affine_map() {
        let codec = LatentCodec::<f64>::new(linear(), 3).unwrap();
        let x = Rng::new(4).normal_tensor::<f64>(&[1, 3, 32, 32]);
        let z = codec.encode(&x).unwrap();
        let w = codec.params().get(codec.params().find("codec.encode.weight").unwrap());
        // Latent cell (row 2, col 5), channel 1, from the raw pixel indices.
        let (gy, gx, ch) = (2, 5, 1);
        let mut acc = 0.0;
        for c in 0..3 {
            for py in 0..4 {
                for px in 0..4 {
                    let pix = x.data()[c * 1024 + (gy * 4 + py) * 32 + gx * 4 + px];
                    acc += pix * w.data()[(c * 16 + py * 4 + px) * 4 + ch];
                }
            }
        }
        assert!((z.data()[ch * 64 + gy * 8 + gx] - acc).abs() < 1e-12);
    }

    #[test]
    fn linear_codec_is_linear_without_clamp() {
        let mut codec = LatentCodec::<f64>::new(linear(), 5).unwrap();
        for t in codec.params_mut().tensors_mut() {
            *t = Tensor::zeros(t.shape());
        }
        let mut rng = Rng::new(6);
        // Superposition holds for the linear part, so zero the biases.
        for name in ["codec.encode.weight", "codec.decode.weight"] {
            let id = codec.params().find(name).unwrap();
            let shape = codec.params().get(id).shape().to_vec();
            *codec.params_mut().get_mut(id) = trunc_normal(&mut rng, &shape, 0.3);
        }
        let a = rng.normal_tensor::<f64>(&[1, 3, 32, 32]);
        let b = rng.normal_tensor::<f64>(&[1, 3, 32, 32]);
        let sum = a.zip_map(&b, "add", |x, y| 2.0 * x + y).unwrap();
        let ea = codec.encode(&a).unwrap();
        let eb = codec.encode(&b).unwrap();
        let combined = ea.zip_map(&eb, "add", |x, y| 2.0 * x + y).unwrap();
        assert!(codec.encode(&sum).unwrap().max_abs_diff(&combined) < 1e-5);
        let da = codec.decode_unclamped(&ea).unwrap();
        let db = codec.decode_unclamped(&eb).unwrap();
        let dsum = codec.decode_unclamped(&combined).unwrap();
        assert!(dsum.max_abs_diff(&da.zip_map(&db, "add", |x, y| 2.0 * x + y).unwrap()) < 1e-5);
    }

    #[test]
    fn identical_images_are_learned_by_bias() {
        let ds = make_dataset(&DatasetSpec { count_per_class: 1, num_classes: 2, ..DatasetSpec::default() }).unwrap();
        let same: Vec<LabeledImage> = (0..8).map(|_| ds[0].clone()).collect();
        let train = CodecTrainConfig { steps: 3000, batch_size: 8, ..CodecTrainConfig::default() };
        let (codec, log) = train_codec(&linear(), &same, &train).unwrap();
        let (x, _) = stack(&[&same[0]]).unwrap();
        assert!(codec.reconstruction_error(&x).unwrap() < 1e-3, "{:?}", log.losses.last());
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let ds = make_dataset(&DatasetSpec { count_per_class: 8, ..DatasetSpec::default() }).unwrap();
        let train = CodecTrainConfig { steps: 100, batch_size: 16, ..CodecTrainConfig::default() };
        let (a, log) = train_codec(&linear(), &ds, &train).unwrap();
        let (b, _) = train_codec(&linear(), &ds, &train).unwrap();
        assert!(a.params().tensors().iter().zip(b.params().tensors()).all(|(x, y)| x.bit_eq(y)));
        assert!(log.losses.last().unwrap() < &(0.5 * log.losses[0]));
        assert!(train_codec(&linear(), &[], &train).is_err());
    }
}
