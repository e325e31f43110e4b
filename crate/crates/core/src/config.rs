//! Run configuration as flat `key = value` text.
//!
//! Keys are dotted (`vit.embed_dim = 128`), `#` starts a comment, blank lines
//! are ignored. Every key has a default; a file only lists what it changes.
//! Unknown or repeated keys and unparsable values are errors that name the
//! offending line.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::codec::{CodecConfig, CodecKind, CodecTrainConfig};
use crate::data::DatasetSpec;
use crate::diffusion::{GuidanceConfig, NoiseSchedule};
use crate::tensor::AdamConfig;
use crate::vit::ViTConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub reference_seed: u64,
    pub feature_seed: u64,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub data: DatasetSpec,
    pub codec: CodecConfig,
    pub codec_train: CodecTrainConfig,
    pub vit: ViTConfig,
    pub schedule: ScheduleConfig,
    pub guidance: GuidanceConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: PathBuf::from("runs/desk"),
            data: DatasetSpec::default(),
            codec: CodecConfig::default(),
            codec_train: CodecTrainConfig::default(),
            vit: ViTConfig::desk(),
            schedule: ScheduleConfig {
                steps: 200,
                beta_start: 1e-4,
                beta_end: 0.02,
            },
            guidance: GuidanceConfig::new(8),
            train: TrainConfig {
                steps: 2000,
                batch_size: 32,
                adam: AdamConfig::default(),
                seed: 0,
                checkpoint_every: 500,
            },
            eval: EvalConfig {
                reference_seed: 1_000_003,
                feature_seed: 7,
                batch_size: 100,
            },
        }
    }
}

/// Access to one field for both parsing and printing.
enum Field<'a> {
    Usize(&'a mut usize),
    U64(&'a mut u64),
    F64(&'a mut f64),
    Path(&'a mut PathBuf),
    Codec(&'a mut CodecKind),
}

impl Field<'_> {
    fn set(&mut self, raw: &str) -> std::result::Result<(), String> {
        fn num<T: FromStr>(raw: &str) -> std::result::Result<T, String> {
            raw.parse().map_err(|_| format!("cannot parse {raw:?}"))
        }
        match self {
            Field::Usize(v) => **v = num(raw)?,
            Field::U64(v) => **v = num(raw)?,
            Field::F64(v) => {
                let x: f64 = num(raw)?;
                if !x.is_finite() {
                    return Err(format!("{raw:?} is not finite"));
                }
                **v = x;
            }
            Field::Path(v) => **v = PathBuf::from(raw),
            Field::Codec(v) => {
                **v = CodecKind::parse(raw).ok_or_else(|| format!("unknown codec kind {raw:?}"))?;
            }
        }
        Ok(())
    }

    fn render(&self) -> String {
        match self {
            Field::Usize(v) => v.to_string(),
            Field::U64(v) => v.to_string(),
            Field::F64(v) => format!("{v:?}"),
            Field::Path(v) => v.display().to_string(),
            Field::Codec(v) => v.name().to_string(),
        }
    }
}

impl RunConfig {
    /// Every key with its field, in file order.
    fn fields(&mut self) -> Vec<(&'static str, Field<'_>)> {
        use Field::*;
        vec![
            ("run.out_dir", Path(&mut self.out_dir)),
            ("data.num_classes", Usize(&mut self.data.num_classes)),
            ("data.image_hw", Usize(&mut self.data.image_hw)),
            ("data.count_per_class", Usize(&mut self.data.count_per_class)),
            ("data.seed", U64(&mut self.data.seed)),
            ("codec.kind", Codec(&mut self.codec.kind)),
            ("codec.factor", Usize(&mut self.codec.factor)),
            ("codec.latent_channels", Usize(&mut self.codec.latent_channels)),
            ("codec.pixel_hw", Usize(&mut self.codec.pixel_hw)),
            ("codec.steps", Usize(&mut self.codec_train.steps)),
            ("codec.batch_size", Usize(&mut self.codec_train.batch_size)),
            ("codec.learning_rate", F64(&mut self.codec_train.adam.learning_rate)),
            ("codec.seed", U64(&mut self.codec_train.seed)),
            ("vit.latent_hw", Usize(&mut self.vit.latent_hw)),
            ("vit.latent_channels", Usize(&mut self.vit.latent_channels)),
            ("vit.patch_size", Usize(&mut self.vit.patch_size)),
            ("vit.embed_dim", Usize(&mut self.vit.embed_dim)),
            ("vit.enc_depth", Usize(&mut self.vit.enc_depth)),
            ("vit.dec_depth", Usize(&mut self.vit.dec_depth)),
            ("vit.heads", Usize(&mut self.vit.heads)),
            ("vit.mlp_ratio", F64(&mut self.vit.mlp_ratio)),
            ("vit.num_classes", Usize(&mut self.vit.num_classes)),
            ("vit.init_std", F64(&mut self.vit.init_std)),
            ("diffusion.steps", Usize(&mut self.schedule.steps)),
            ("diffusion.beta_start", F64(&mut self.schedule.beta_start)),
            ("diffusion.beta_end", F64(&mut self.schedule.beta_end)),
            ("guidance.drop_probability", F64(&mut self.guidance.drop_probability)),
            ("guidance.scale", F64(&mut self.guidance.guidance_scale)),
            ("guidance.null_label", Usize(&mut self.guidance.null_label)),
            ("train.steps", Usize(&mut self.train.steps)),
            ("train.batch_size", Usize(&mut self.train.batch_size)),
            ("train.learning_rate", F64(&mut self.train.adam.learning_rate)),
            ("train.beta1", F64(&mut self.train.adam.beta1)),
            ("train.beta2", F64(&mut self.train.adam.beta2)),
            ("train.epsilon", F64(&mut self.train.adam.epsilon)),
            ("train.seed", U64(&mut self.train.seed)),
            ("train.checkpoint_every", Usize(&mut self.train.checkpoint_every)),
            ("eval.reference_seed", U64(&mut self.eval.reference_seed)),
            ("eval.feature_seed", U64(&mut self.eval.feature_seed)),
            ("eval.batch_size", Usize(&mut self.eval.batch_size)),
        ]
    }

    /// Parse and validate config text over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        {
            let mut fields = cfg.fields();
            for (lineno, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let at = |msg: String| Error::Config(format!("line {}: {msg}", lineno + 1));
                let (key, value) = line
                    .split_once('=')
                    .ok_or_else(|| at(format!("expected key = value, got {line:?}")))?;
                let (key, value) = (key.trim(), value.trim());
                let field = fields
                    .iter_mut()
                    .find(|(k, _)| *k == key)
                    .ok_or_else(|| at(format!("unknown key {key:?}")))?;
                if seen.iter().any(|k| k == key) {
                    return Err(at(format!("duplicate key {key:?}")));
                }
                seen.push(key.to_string());
                field.1.set(value).map_err(|e| at(format!("{key}: {e}")))?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key, one per line, in a form [`RunConfig::parse`] reads back.
    pub fn to_text(&self) -> String {
        let mut copy = self.clone();
        let mut out = String::new();
        let mut section = "";
        for (key, field) in copy.fields() {
            let head = key.split('.').next().unwrap_or("");
            if head != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                section = head;
            }
            writeln!(out, "{key} = {}", field.render()).expect("writing to a string");
        }
        out
    }

    /// Per-module checks plus agreement between modules.
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.codec.validate()?;
        self.vit.validate()?;
        self.schedule.build()?;
        self.guidance.validate(self.data.num_classes)?;
        let fail = |m: String| Err(Error::Config(m));
        if self.codec.pixel_hw != self.data.image_hw {
            return fail(format!(
                "codec.pixel_hw ({}) must equal data.image_hw ({})",
                self.codec.pixel_hw, self.data.image_hw
            ));
        }
        if self.vit.latent_hw != self.codec.latent_hw() || self.vit.latent_channels != self.codec.latent_channels {
            return fail(format!(
                "vit latent {}×{}×{} does not match the codec latent {}×{}×{}",
                self.vit.latent_hw,
                self.vit.latent_hw,
                self.vit.latent_channels,
                self.codec.latent_hw(),
                self.codec.latent_hw(),
                self.codec.latent_channels
            ));
        }
        if self.vit.num_classes != self.data.num_classes {
            return fail(format!(
                "vit.num_classes ({}) must equal data.num_classes ({})",
                self.vit.num_classes, self.data.num_classes
            ));
        }
        for (key, v) in [
            ("train.batch_size", self.train.batch_size),
            ("codec.batch_size", self.codec_train.batch_size),
            ("eval.batch_size", self.eval.batch_size),
        ] {
            if v == 0 {
                return fail(format!("{key} must be positive"));
            }
        }
        for (key, v) in [
            ("train.learning_rate", self.train.adam.learning_rate),
            ("codec.learning_rate", self.codec_train.adam.learning_rate),
            ("train.epsilon", self.train.adam.epsilon),
        ] {
            if v <= 0.0 {
                return fail(format!("{key} must be positive"));
            }
        }
        for (key, v) in [("train.beta1", self.train.adam.beta1), ("train.beta2", self.train.adam.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return fail(format!("{key} must be in [0, 1)"));
            }
        }
        if self.eval.reference_seed == self.data.seed {
            return fail("eval.reference_seed must differ from data.seed".into());
        }
        Ok(())
    }

    /// The gradient-check configuration: a 4×4×2 latent from 8×8 images,
    /// width 8, two heads, one encoder and one decoder block, three classes.
    pub fn micro() -> Self {
        let defaults = RunConfig::default();
        RunConfig {
            data: DatasetSpec {
                num_classes: 3,
                image_hw: 8,
                count_per_class: 2,
                seed: 0,
            },
            codec: CodecConfig {
                factor: 2,
                latent_channels: 2,
                pixel_hw: 8,
                ..CodecConfig::default()
            },
            vit: ViTConfig {
                init_std: 0.3,
                ..ViTConfig::micro()
            },
            guidance: GuidanceConfig::new(3),
            train: TrainConfig {
                batch_size: 2,
                ..defaults.train
            },
            ..defaults
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_roundtrip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        let micro = RunConfig::micro();
        assert_eq!(RunConfig::parse(&micro.to_text()).unwrap(), micro);
    }

    #[test]
    fn parses_comments_and_overrides() {
        let cfg = RunConfig::parse("# desk run\n\ntrain.steps = 10  # short\nvit.embed_dim=64\n").unwrap();
        assert_eq!(cfg.train.steps, 10);
        assert_eq!(cfg.vit.embed_dim, 64);
        assert_eq!(cfg.vit.heads, 4);
    }

    #[test]
    fn errors_name_the_line() {
        let msg = |text: &str| RunConfig::parse(text).unwrap_err().to_string();
        assert!(msg("\nbogus.key = 1").contains("line 2"));
        assert!(msg("train.steps = ten").contains("train.steps"));
        assert!(msg("train.steps = 1\ntrain.steps = 2").contains("duplicate"));
        assert!(msg("just words").contains("key = value"));
        assert!(msg("codec.kind = vqgan").contains("vqgan"));
        assert!(msg("diffusion.beta_end = nan").contains("finite"));
    }

    #[test]
    fn cross_field_checks() {
        assert!(RunConfig::parse("vit.latent_hw = 16").is_err());
        assert!(RunConfig::parse("vit.num_classes = 5").is_err());
        assert!(RunConfig::parse("guidance.null_label = 3").is_err());
        assert!(RunConfig::parse("vit.heads = 3").is_err());
        assert!(RunConfig::parse("data.image_hw = 64").is_err());
        assert!(RunConfig::parse("data.image_hw = 64\ncodec.pixel_hw = 64\nvit.latent_hw = 16").is_ok());
        assert!(RunConfig::parse("eval.reference_seed = 0").is_err());
        assert!(RunConfig::parse("diffusion.steps = 0").is_err());
    }

    #[test]
    fn shipped_configs_parse() {
        let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let desk = RunConfig::load(&dir.join("desk.cfg")).unwrap();
        assert_eq!(RunConfig { out_dir: desk.out_dir.clone(), ..RunConfig::default() }, desk);
        let micro = RunConfig::load(&dir.join("micro.cfg")).unwrap();
        assert_eq!(RunConfig { out_dir: micro.out_dir.clone(), ..RunConfig::micro() }, micro);
    }
}
