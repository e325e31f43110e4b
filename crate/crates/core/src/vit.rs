//! The transformer ε-predictor.
//!
//! A latent `[b, c, h, w]` is cut into `p×p` patches, each patch is linearly
//! embedded and offset by a fixed 2-D sine-cosine position code, and a learned
//! class token is prepended at index 0. A sinusoidal timestep vector, passed
//! through a small MLP, is added to every token including the class token.
//! The sequence runs through the encoder blocks and then the decoder blocks
//! (pre-norm attention + MLP, residual), is normalized, and the patch tokens
//! are projected back to patch pixels and reassembled on the latent grid.

use crate::diffusion::EpsilonModel;
use crate::rng::Rng;
use crate::tensor::nn::{multi_head_attention, trunc_normal, Attention, LayerNorm, Linear, Mlp};
use crate::tensor::{Bound, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ViTConfig {
    pub latent_hw: usize,
    pub latent_channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub enc_depth: usize,
    pub dec_depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
    pub init_std: f64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ViTConfig {
    /// 8×8×4 latent, 16 patch tokens, width 128, 3+3 blocks, 8 classes.
    pub fn desk() -> Self {
        ViTConfig {
            latent_hw: 8,
            latent_channels: 4,
            patch_size: 2,
            embed_dim: 128,
            enc_depth: 3,
            dec_depth: 3,
            heads: 4,
            mlp_ratio: 4.0,
            num_classes: 8,
            init_std: 0.02,
        }
    }

    /// Full-size geometry: 32×32 latent with 2×2 patches (256 tokens), 12+12 blocks.
    pub fn full_scale() -> Self {
        ViTConfig {
            latent_hw: 32,
            latent_channels: 4,
            patch_size: 2,
            embed_dim: 768,
            enc_depth: 12,
            dec_depth: 12,
            heads: 12,
            mlp_ratio: 4.0,
            num_classes: 1000,
            init_std: 0.02,
        }
    }

    /// The smallest useful model, for gradient checks.
    pub fn micro() -> Self {
        ViTConfig {
            latent_hw: 4,
            latent_channels: 2,
            patch_size: 2,
            embed_dim: 8,
            enc_depth: 1,
            dec_depth: 1,
            heads: 2,
            mlp_ratio: 4.0,
            num_classes: 3,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.latent_hw == 0 || !self.latent_hw.is_multiple_of(self.patch_size) {
            return fail(format!(
                "vit.latent_hw ({}) must be a positive multiple of vit.patch_size ({})",
                self.latent_hw, self.patch_size
            ));
        }
        if self.latent_channels == 0 {
            return fail("vit.latent_channels must be positive".into());
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(4) {
            return fail(format!("vit.embed_dim ({}) must be a positive multiple of 4", self.embed_dim));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "vit.embed_dim ({}) must be divisible by vit.heads ({})",
                self.embed_dim, self.heads
            ));
        }
        if self.num_classes == 0 {
            return fail("vit.num_classes must be positive".into());
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return fail(format!("vit.mlp_ratio ({}) must be positive", self.mlp_ratio));
        }
        if !(self.init_std > 0.0) {
            return fail(format!("vit.init_std ({}) must be positive", self.init_std));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.latent_hw / self.patch_size
    }

    /// Patch tokens, excluding the class token.
    pub fn token_count(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.latent_channels
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.embed_dim as f64).round() as usize
    }

    /// Index of the reserved "no label" row in the class table.
    pub fn null_label(&self) -> usize {
        self.num_classes
    }
}

/// `[b, c, h, w] → [b, (h/p)(w/p), c·p·p]`. Patches are taken in row-major
/// grid order; inside a patch the layout is channel, then row, then column.
pub fn patchify<F: Real>(z: &Tensor<F>, patch: usize) -> Result<Tensor<F>> {
    let (pre, axes, post) = patch_geometry(z.shape(), patch)?;
    z.reshape(&pre)?.permute(&axes)?.reshape(&post)
}

/// Inverse of [`patchify`] for a `[channels, h, w]` grid.
pub fn unpatchify<F: Real>(tokens: &Tensor<F>, chw: [usize; 3], patch: usize) -> Result<Tensor<F>> {
    let (pre, axes, post) = unpatch_geometry(tokens.shape(), chw, patch)?;
    tokens.reshape(&pre)?.permute(&axes)?.reshape(&post)
}

fn patch_geometry(shape: &[usize], p: usize) -> Result<(Vec<usize>, [usize; 6], Vec<usize>)> {
    let &[b, c, h, w] = shape else {
        return Err(Error::shape("patchify", format!("expected [b, c, h, w], got {shape:?}")));
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape("patchify", format!("{h}×{w} not divisible by patch {p}")));
    }
    let (gh, gw) = (h / p, w / p);
    Ok((
        vec![b, c, gh, p, gw, p],
        [0, 2, 4, 1, 3, 5],
        vec![b, gh * gw, c * p * p],
    ))
}

fn unpatch_geometry(
    shape: &[usize],
    [c, h, w]: [usize; 3],
    p: usize,
) -> Result<(Vec<usize>, [usize; 6], Vec<usize>)> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape("unpatchify", format!("{h}×{w} not divisible by patch {p}")));
    }
    let (gh, gw) = (h / p, w / p);
    let &[b, n, width] = shape else {
        return Err(Error::shape("unpatchify", format!("expected [b, n, width], got {shape:?}")));
    };
    if n != gh * gw || width != c * p * p {
        return Err(Error::shape(
            "unpatchify",
            format!("{shape:?} does not tile a {c}×{h}×{w} grid with patch {p}"),
        ));
    }
    Ok((vec![b, gh, gw, c, p, p], [0, 3, 1, 4, 2, 5], vec![b, c, h, w]))
}

fn frequencies(count: usize, denom: usize) -> impl Iterator<Item = f64> {
    (0..count).map(move |i| 10000f64.powf(-(i as f64) / denom as f64))
}

/// Fixed 2-D position code `[grid², dim]`. The first half of the channels
/// encodes the patch row and the second half the column; within a half,
/// channel `2i` is `sin(pos·ωᵢ)` and `2i+1` is `cos(pos·ωᵢ)` with
/// `ωᵢ = 10000^(-i/(dim/4))`.
pub fn sincos_pos_embed<F: Real>(grid: usize, dim: usize) -> Result<Tensor<F>> {
    if dim == 0 || !dim.is_multiple_of(4) || grid == 0 {
        return Err(Error::invalid(format!("position embedding width {dim} must be a positive multiple of 4")));
    }
    let quarter = dim / 4;
    let freqs: Vec<f64> = frequencies(quarter, quarter).collect();
    let mut data = Vec::with_capacity(grid * grid * dim);
    for row in 0..grid {
        for col in 0..grid {
            for pos in [row, col] {
                for &w in &freqs {
                    let a = pos as f64 * w;
                    data.push(F::of(a.sin()));
                    data.push(F::of(a.cos()));
                }
            }
        }
    }
    Tensor::from_vec(&[grid * grid, dim], data)
}

/// Sinusoidal timestep vector `[dim]`: `sin(t·ωᵢ)` in the first half and
/// `cos(t·ωᵢ)` in the second, `ωᵢ = 10000^(-i/(dim/2))`.
pub fn timestep_embed<F: Real>(t: usize, dim: usize) -> Result<Tensor<F>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::invalid(format!("timestep embedding width {dim} must be even")));
    }
    let half = dim / 2;
    let angles: Vec<f64> = frequencies(half, half).map(|w| t as f64 * w).collect();
    let data = angles
        .iter()
        .map(|a| F::of(a.sin()))
        .chain(angles.iter().map(|a| F::of(a.cos())))
        .collect();
    Tensor::from_vec(&[dim], data)
}

#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    fn new<F: Real>(store: &mut ParamStore<F>, name: &str, cfg: &ViTConfig, rng: &mut Rng) -> Result<Self> {
        let d = cfg.embed_dim;
        Ok(Block {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            attn: Attention::new(store, &format!("{name}.attn"), d, cfg.heads, rng, cfg.init_std)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, cfg.mlp_hidden(), d, rng, cfg.init_std),
        })
    }

    pub fn param_count(cfg: &ViTConfig) -> usize {
        let d = cfg.embed_dim;
        2 * LayerNorm::param_count(d) + Attention::param_count(d) + Mlp::param_count(d, cfg.mlp_hidden(), d)
    }

    pub fn forward<F: Real>(&self, tape: &Tape<F>, p: &Bound<F>, x: &Var<F>) -> Result<Var<F>> {
        let h = self.norm1.forward(tape, p, x)?;
        let x = tape.add(x, &multi_head_attention(tape, p, &self.attn, &h, &h, &h)?)?;
        let h = self.norm2.forward(tape, p, &x)?;
        tape.add(&x, &self.mlp.forward(tape, p, &h)?)
    }
}

#[derive(Clone, Debug)]
struct Layout {
    patch_embed: Linear,
    class_embed: ParamId,
    time_mlp: Mlp,
    encoder: Vec<Block>,
    decoder: Vec<Block>,
    final_norm: LayerNorm,
    head: Linear,
}

/// Embedded token sequence `[b, 1 + tokens, dim]`; index 0 is the class token.
#[derive(Clone, Debug)]
pub struct TokenSequence<F: Real>(pub Var<F>);

/// The ε-predictor: configuration, learnable parameters and their layout.
#[derive(Clone, Debug)]
pub struct Denoiser<F: Real> {
    config: ViTConfig,
    params: ParamStore<F>,
    layout: Layout,
    pos_embed: Tensor<F>,
}

impl<F: Real> Denoiser<F> {
    /// Fresh parameters: truncated-normal weights (std `init_std`), zero
    /// biases, unit norm gains.
    pub fn new(config: ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let cfg = &config;
        let d = cfg.embed_dim;
        let std = cfg.init_std;
        let patch_embed = Linear::new(&mut store, "patch_embed", cfg.patch_dim(), d, true, &mut rng, std);
        let class_embed = store.add("class_embed", trunc_normal(&mut rng, &[cfg.num_classes + 1, d], std));
        let time_mlp = Mlp::new(&mut store, "time_mlp", d, d, d, &mut rng, std);
        let encoder = (0..cfg.enc_depth)
            .map(|i| Block::new(&mut store, &format!("enc.{i}"), cfg, &mut rng))
            .collect::<Result<_>>()?;
        let decoder = (0..cfg.dec_depth)
            .map(|i| Block::new(&mut store, &format!("dec.{i}"), cfg, &mut rng))
            .collect::<Result<_>>()?;
        let final_norm = LayerNorm::new(&mut store, "final_norm", d);
        let head = Linear::new(&mut store, "head", d, cfg.patch_dim(), true, &mut rng, std);
        Ok(Denoiser {
            pos_embed: sincos_pos_embed(cfg.grid(), d)?,
            config,
            params: store,
            layout: Layout {
                patch_embed,
                class_embed,
                time_mlp,
                encoder,
                decoder,
                final_norm,
                head,
            },
        })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    /// Same architecture and weights at another precision.
    pub fn cast<G: Real>(&self) -> Denoiser<G> {
        Denoiser {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
            pos_embed: self.pos_embed.cast(),
        }
    }

    pub fn bind<'a>(&'a self, tape: &Tape<F>) -> BoundDenoiser<'a, F> {
        BoundDenoiser {
            model: self,
            params: self.params.bind(tape),
        }
    }

    fn check_inputs(&self, z_t: &Tensor<F>, t: &[usize], y: &[usize]) -> Result<usize> {
        let c = &self.config;
        let s = z_t.shape();
        if s.len() != 4 || s[1..] != [c.latent_channels, c.latent_hw, c.latent_hw] {
            return Err(Error::shape(
                "denoiser",
                format!(
                    "latent {s:?}, expected [b, {}, {}, {}]",
                    c.latent_channels, c.latent_hw, c.latent_hw
                ),
            ));
        }
        let b = s[0];
        if t.len() != b || y.len() != b {
            return Err(Error::shape(
                "denoiser",
                format!("batch {b} with {} timesteps and {} labels", t.len(), y.len()),
            ));
        }
        if let Some(&bad) = y.iter().find(|&&l| l > c.num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range [0, {}] (last is the null label)",
                c.num_classes
            )));
        }
        Ok(b)
    }

    /// Build the token sequence for `(z_t, t, y)`; `y` may be the null label.
    pub fn embed_inputs(
        &self,
        tape: &Tape<F>,
        p: &Bound<F>,
        z_t: &Tensor<F>,
        t: &[usize],
        y: &[usize],
    ) -> Result<TokenSequence<F>> {
        let b = self.check_inputs(z_t, t, y)?;
        let cfg = &self.config;
        let (d, n) = (cfg.embed_dim, cfg.token_count());
        let l = &self.layout;

        let patches = tape.constant(patchify(z_t, cfg.patch_size)?);
        let tokens = l.patch_embed.forward(tape, p, &patches)?;
        let tokens = tape.add_trailing(&tokens, &tape.constant(self.pos_embed.clone()))?;

        let class = tape.gather_rows(&p[l.class_embed], y)?;
        let class = tape.reshape(&class, &[b, 1, d])?;
        let seq = tape.concat(&[&class, &tokens], 1)?;

        let mut raw = Vec::with_capacity(b * d);
        for &step in t {
            raw.extend_from_slice(timestep_embed::<F>(step, d)?.data());
        }
        let temb = l.time_mlp.forward(tape, p, &tape.constant(Tensor::from_vec(&[b, d], raw)?))?;
        let temb = tape.repeat(&temb, 1, n + 1)?;
        Ok(TokenSequence(tape.add(&seq, &temb)?))
    }

    /// Encoder then decoder blocks over `[b, n, dim]` tokens.
    pub fn transform(&self, tape: &Tape<F>, p: &Bound<F>, tokens: &Var<F>) -> Result<Var<F>> {
        let mut x = tokens.clone();
        for block in self.layout.encoder.iter().chain(&self.layout.decoder) {
            x = block.forward(tape, p, &x)?;
        }
        Ok(x)
    }

    /// Predicted noise with the same shape as `z_t`.
    pub fn forward(&self, tape: &Tape<F>, p: &Bound<F>, z_t: &Tensor<F>, t: &[usize], y: &[usize]) -> Result<Var<F>> {
        let cfg = &self.config;
        let TokenSequence(seq) = self.embed_inputs(tape, p, z_t, t, y)?;
        let x = self.transform(tape, p, &seq)?;
        let x = self.layout.final_norm.forward(tape, p, &x)?;
        let x = tape.narrow(&x, 1, 1, cfg.token_count())?;
        let out = self.layout.head.forward(tape, p, &x)?;
        let (pre, axes, post) = unpatch_geometry(
            out.shape(),
            [cfg.latent_channels, cfg.latent_hw, cfg.latent_hw],
            cfg.patch_size,
        )?;
        let out = tape.permute(&tape.reshape(&out, &pre)?, &axes)?;
        tape.reshape(&out, &post)
    }
}

/// Learnable scalar count for `config`, from layer shapes alone.
pub fn count_params(config: &ViTConfig) -> usize {
    let d = config.embed_dim;
    let fixed = Linear::param_count(config.patch_dim(), d, true)
        + (config.num_classes + 1) * d
        + Mlp::param_count(d, d, d)
        + LayerNorm::param_count(d)
        + Linear::param_count(d, config.patch_dim(), true);
    fixed + (config.enc_depth + config.dec_depth) * Block::param_count(config)
}

/// A [`Denoiser`] whose parameters are registered on a particular tape, so
/// gradients can be read back after `backward`.
pub struct BoundDenoiser<'a, F: Real> {
    pub model: &'a Denoiser<F>,
    pub params: Bound<F>,
}

impl<F: Real> EpsilonModel<F> for BoundDenoiser<'_, F> {
    fn latent_shape(&self) -> [usize; 3] {
        self.model.latent_shape()
    }

    fn num_classes(&self) -> usize {
        self.model.config.num_classes
    }

    fn predict(&self, tape: &Tape<F>, z_t: &Tensor<F>, t: &[usize], y: &[usize]) -> Result<Var<F>> {
        self.model.forward(tape, &self.params, z_t, t, y)
    }
}

impl<F: Real> EpsilonModel<F> for Denoiser<F> {
    fn latent_shape(&self) -> [usize; 3] {
        let c = &self.config;
        [c.latent_channels, c.latent_hw, c.latent_hw]
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn predict(&self, tape: &Tape<F>, z_t: &Tensor<F>, t: &[usize], y: &[usize]) -> Result<Var<F>> {
        let p = self.params.bind(tape);
        self.forward(tape, &p, z_t, t, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn infer(model: &Denoiser<f64>, z: &Tensor<f64>, t: &[usize], y: &[usize]) -> Tensor<f64> {
        model.predict(&Tape::no_grad(), z, t, y).unwrap().into_value()
    }

    #[test]
    fn full_scale_geometry_gives_256_patches() {
        let z = Tensor::<f32>::zeros(&[1, 4, 32, 32]);
        let tokens = patchify(&z, 2).unwrap();
        assert_eq!(tokens.shape(), &[1, 256, 16]);
        assert_eq!(ViTConfig::full_scale().token_count(), 256);
    }

    #[test]
    fn patch_equal_to_image_is_single_token() {
        let z = Tensor::<f64>::from_fn(&[1, 3, 4, 4], |i| i as f64);
        let tokens = patchify(&z, 4).unwrap();
        assert_eq!(tokens.shape(), &[1, 1, 48]);
        assert_eq!(tokens.data(), z.data());
    }

    #[test]
    fn patch_layout_is_channel_then_row_then_column() {
        // z[0, ch, y, x] = 100 ch + 10 y + x on a 2×4 grid with 2×2 patches.
        let z = Tensor::<f64>::from_fn(&[1, 2, 2, 4], |i| {
            let (ch, y, x) = (i / 8, (i / 4) % 2, i % 4);
            (100 * ch + 10 * y + x) as f64
        });
        let tokens = patchify(&z, 2).unwrap();
        assert_eq!(tokens.shape(), &[1, 2, 8]);
        let second: Vec<f64> = tokens.data()[8..].to_vec();
        assert_eq!(second, vec![2., 3., 12., 13., 102., 103., 112., 113.]);
    }

    #[test]
    fn patchify_rejects_indivisible() {
        assert!(patchify(&Tensor::<f32>::zeros(&[1, 1, 5, 4]), 2).is_err());
        assert!(unpatchify(&Tensor::<f32>::zeros(&[1, 3, 4]), [1, 4, 4], 2).is_err());
    }

    #[test]
    fn pos_embed_properties() {
        let e = sincos_pos_embed::<f64>(16, 64).unwrap();
        assert_eq!(e.shape(), &[256, 64]);
        assert!(e.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        for (i, &v) in e.data()[..64].iter().enumerate() {
            assert_eq!(v, if i % 2 == 0 { 0.0 } else { 1.0 });
        }
        let rows: Vec<&[f64]> = e.data().chunks_exact(64).collect();
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                let dist = rows[i].iter().zip(rows[j]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(dist > 1e-6, "positions {i} and {j} collide");
            }
        }
        assert!(sincos_pos_embed::<f64>(4, 6).is_err());
    }

    #[test]
    fn timestep_embed_properties() {
        let e0 = timestep_embed::<f64>(0, 16).unwrap();
        assert!(e0.data()[..8].iter().all(|&v| v == 0.0));
        assert!(e0.data()[8..].iter().all(|&v| v == 1.0));
        let all: Vec<Tensor<f64>> = (0..200).map(|t| timestep_embed(t, 128).unwrap()).collect();
        for (i, a) in all.iter().enumerate() {
            assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            for b in &all[i + 1..] {
                assert!(a.max_abs_diff(b) > 1e-6);
            }
        }
    }

    #[test]
    fn embed_inputs_structure() {
        let cfg = ViTConfig::micro();
        let model = Denoiser::<f64>::new(cfg.clone(), 1).unwrap();
        let mut rng = Rng::new(2);
        let z = rng.normal_tensor::<f64>(&[1, 2, 4, 4]);
        let tape = Tape::no_grad();
        let p = model.params().bind(&tape);
        let embed = |t: usize, y: usize| model.embed_inputs(&tape, &p, &z, &[t], &[y]).unwrap().0.into_value();

        let a = embed(5, 0);
        assert_eq!(a.shape(), &[1, 1 + cfg.token_count(), cfg.embed_dim]);
        let b = embed(5, 2);
        let d = cfg.embed_dim;
        assert!(a.data()[..d] != b.data()[..d]);
        assert_eq!(a.data()[d..], b.data()[d..]);

        let c = embed(6, 0);
        for (ta, tc) in a.data().chunks_exact(d).zip(c.data().chunks_exact(d)) {
            assert!(ta != tc);
        }

        // The null label reads the last class-table row.
        let null = embed(5, cfg.null_label());
        let table = model.params().get(model.layout.class_embed);
        let temb = {
            let raw = tape.constant(timestep_embed::<f64>(5, d).unwrap().reshape(&[1, d]).unwrap());
            model.layout.time_mlp.forward(&tape, &p, &raw).unwrap().into_value()
        };
        for j in 0..d {
            let expect = table.data()[cfg.num_classes * d + j] + temb.data()[j];
            assert!((null.data()[j] - expect).abs() < 1e-12);
        }
        assert!(model.embed_inputs(&tape, &p, &z, &[0], &[cfg.num_classes + 1]).is_err());
    }

    #[test]
    fn output_shape_matches_latent() {
        for cfg in [ViTConfig::desk(), ViTConfig { enc_depth: 1, dec_depth: 1, embed_dim: 32, heads: 4, ..ViTConfig::full_scale() }] {
            let model = Denoiser::<f32>::new(cfg.clone(), 0).unwrap();
            let z = Tensor::<f32>::zeros(&[2, cfg.latent_channels, cfg.latent_hw, cfg.latent_hw]);
            let out = model.predict(&Tape::no_grad(), &z, &[0, 3], &[1, 2]).unwrap();
            assert_eq!(out.shape(), z.shape());
        }
    }

    #[test]
    fn wrong_latent_shape_rejected() {
        let model = Denoiser::<f32>::new(ViTConfig::micro(), 0).unwrap();
        let z = Tensor::<f32>::zeros(&[1, 3, 4, 4]);
        assert!(model.predict(&Tape::no_grad(), &z, &[0], &[0]).is_err());
    }

    #[test]
    fn label_changes_output() {
        let model = Denoiser::<f64>::new(ViTConfig::micro(), 3).unwrap();
        let z = Rng::new(4).normal_tensor::<f64>(&[1, 2, 4, 4]);
        let a = infer(&model, &z, &[7], &[0]);
        let b = infer(&model, &z, &[7], &[1]);
        assert!(a.max_abs_diff(&b) > 0.0);
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let model = Denoiser::<f32>::new(ViTConfig::desk(), 3).unwrap();
        let z = Rng::new(4).normal_tensor::<f32>(&[3, 4, 8, 8]);
        let a = model.predict(&Tape::no_grad(), &z, &[1, 2, 3], &[0, 1, 8]).unwrap();
        let b = model.predict(&Tape::no_grad(), &z, &[1, 2, 3], &[0, 1, 8]).unwrap();
        assert!(a.value().bit_eq(b.value()));
    }

    #[test]
    fn block_stack_is_permutation_equivariant() {
        let cfg = ViTConfig::micro();
        let model = Denoiser::<f64>::new(ViTConfig { init_std: 0.5, ..cfg.clone() }, 5).unwrap();
        let d = cfg.embed_dim;
        let x = Rng::new(6).normal_tensor::<f64>(&[1, 4, d]);
        let perm = [2usize, 0, 3, 1];
        let permute = |t: &Tensor<f64>| {
            let data: Vec<f64> = perm.iter().flat_map(|&i| t.data()[i * d..(i + 1) * d].to_vec()).collect();
            Tensor::from_vec(&[1, 4, d], data).unwrap()
        };
        let tape = Tape::no_grad();
        let p = model.params().bind(&tape);
        let run = |t: Tensor<f64>| model.transform(&tape, &p, &tape.constant(t)).unwrap().into_value();
        assert!(permute(&run(x.clone())).max_abs_diff(&run(permute(&x))) < 1e-12);
    }

    #[test]
    fn param_count_ledger() {
        let cfg = ViTConfig::micro();
        // Hand ledger for latent 4×4×2, patch 2, width 8, 1+1 blocks, 3 classes.
        let patch = 8 * 8 + 8;
        let class = 4 * 8;
        let time = (8 * 8 + 8) * 2;
        let block = 16 + (3 * (64 + 8) + 64) + 16 + (8 * 32 + 32) + (32 * 8 + 8);
        let tail = 16 + (8 * 8 + 8);
        let expect = patch + class + time + 2 * block + tail;
        assert_eq!(count_params(&cfg), expect);
        let model = Denoiser::<f32>::new(cfg.clone(), 0).unwrap();
        assert_eq!(model.params().scalar_count(), expect);

        let zero = ViTConfig { enc_depth: 0, dec_depth: 0, ..cfg.clone() };
        assert_eq!(count_params(&zero), patch + class + time + tail);

        let doubled = ViTConfig { enc_depth: 2, ..cfg.clone() };
        assert_eq!(count_params(&doubled) - count_params(&cfg), cfg.enc_depth * Block::param_count(&cfg));
    }

    #[test]
    fn desk_param_count_matches_store() {
        let cfg = ViTConfig::desk();
        let model = Denoiser::<f32>::new(cfg.clone(), 0).unwrap();
        assert_eq!(model.params().scalar_count(), count_params(&cfg));
    }

    #[test]
    fn micro_model_gradients_match_finite_differences() {
        let cfg = ViTConfig { init_std: 0.3, ..ViTConfig::micro() };
        let mut model = Denoiser::<f64>::new(cfg, 7).unwrap();
        let mut rng = Rng::new(8);
        for t in model.params_mut().tensors_mut() {
            if t.shape().len() == 1 {
                *t = trunc_normal(&mut rng, t.shape(), 0.3);
            }
        }
        let z = rng.normal_tensor::<f64>(&[2, 2, 4, 4]);
        let target = rng.normal_tensor::<f64>(&[2, 2, 4, 4]);
        let loss = |store: &ParamStore<f64>, grads: bool| {
            let m = Denoiser {
                params: store.clone(),
                ..model.clone()
            };
            let tape = Tape::new();
            let b = m.bind(&tape);
            let pred = b.predict(&tape, &z, &[3, 11], &[1, 3]).unwrap();
            let l = tape.mean_square_error(&pred, &tape.constant(target.clone())).unwrap();
            let g = grads.then(|| tape.backward(&l).unwrap().for_bound(&b.params));
            (l.value().item(), g)
        };
        let analytic = loss(model.params(), true).1.unwrap();
        let report = crate::tensor::finite_diff_check(model.params(), &analytic, 1e-5, |s| loss(s, false).0);
        assert!(report.max_error() < 1e-4, "{report:?}");
    }
}
