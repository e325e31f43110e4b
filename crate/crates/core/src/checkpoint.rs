//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LDTC"  u32 version
//! u32 len, config text (UTF-8)
//! u32 count, then per tensor: u32 len, name, u32 ndim, u64 dims…, f32 data…
//! u8 has_optimizer
//!   [u64 step, u32 count, moment tensors: first moments then second moments]
//! 32-byte SHA-256 of everything above
//! ```
//!
//! Loading checks the header, then the checksum, then parses; each stage has
//! its own error so a foreign file, a truncated file and a malformed body are
//! told apart.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::codec::LatentCodec;
use crate::config::RunConfig;
use crate::diffusion::NoiseSchedule;
use crate::tensor::{AdamState, ParamStore, Tensor};
use crate::vit::Denoiser;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LDTC";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// SHA-256 over every name, shape and value of a store.
pub fn params_digest(store: &ParamStore<f32>) -> [u8; 32] {
    let mut h = Sha256::new();
    for (name, t) in store.iter() {
        let mut buf = Vec::new();
        put_u32(&mut buf, name.len());
        buf.extend_from_slice(name.as_bytes());
        put_tensor(&mut buf, t);
        h.update(&buf);
    }
    h.finalize().into()
}

/// Adam moments in parameter-store order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSnapshot {
    pub step_count: u64,
    pub first_moment: Vec<Tensor<f32>>,
    pub second_moment: Vec<Tensor<f32>>,
}

impl OptimizerSnapshot {
    pub fn from_adam(state: &AdamState<f32>) -> Self {
        OptimizerSnapshot {
            step_count: state.step_count,
            first_moment: state.first_moment.clone(),
            second_moment: state.second_moment.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub optimizer: Option<OptimizerSnapshot>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("field fits in u32").to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor<f32>) {
    put_u32(out, t.shape().len());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Corrupt(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Corrupt("string is not UTF-8".into()))
    }

    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let ndim = self.u32()?;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(usize::try_from(self.u64()?).map_err(|_| Error::Corrupt("dimension overflow".into()))?);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|c| c.checked_mul(4).is_some_and(|b| b <= self.buf.len() - self.pos))
            .ok_or_else(|| Error::Corrupt(format!("tensor shape {shape:?} exceeds the file")))?;
        let data = self
            .take(count * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        Tensor::from_vec(&shape, data).map_err(|e| Error::Corrupt(e.to_string()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, self.config_text.len());
        out.extend_from_slice(self.config_text.as_bytes());
        put_u32(&mut out, self.tensors.len());
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_tensor(&mut out, t);
        }
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                out.extend_from_slice(&opt.step_count.to_le_bytes());
                put_u32(&mut out, opt.first_moment.len());
                for t in opt.first_moment.iter().chain(&opt.second_moment) {
                    put_tensor(&mut out, t);
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::Version("not a checkpoint (bad magic bytes)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Version(format!("checkpoint version {version}, expected {VERSION}")));
        }
        if bytes.len() < 8 + DIGEST_LEN {
            return Err(Error::Checksum);
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checksum);
        }
        let mut r = Reader { buf: body, pos: 8 };
        let config_text = r.string()?;
        let count = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            tensors.push((name, r.tensor()?));
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step_count = r.u64()?;
                let n = r.u32()?;
                let first_moment = (0..n).map(|_| r.tensor()).collect::<Result<_>>()?;
                let second_moment = (0..n).map(|_| r.tensor()).collect::<Result<_>>()?;
                Some(OptimizerSnapshot {
                    step_count,
                    first_moment,
                    second_moment,
                })
            }
            flag => return Err(Error::Corrupt(format!("optimizer flag {flag}"))),
        };
        if r.pos != body.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Checkpoint {
            config_text,
            tensors,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// Everything needed to sample: configuration, frozen codec, denoiser and
/// noise schedule.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub config: RunConfig,
    pub codec: LatentCodec<f32>,
    pub denoiser: Denoiser<f32>,
    pub schedule: NoiseSchedule,
}

impl TrainedModel {
    pub fn new(config: RunConfig, codec: LatentCodec<f32>, denoiser: Denoiser<f32>) -> Result<Self> {
        let schedule = config.schedule.build()?;
        Ok(TrainedModel {
            config,
            codec,
            denoiser,
            schedule,
        })
    }

    pub fn to_checkpoint(&self, optimizer: Option<OptimizerSnapshot>) -> Checkpoint {
        let tensors = self
            .codec
            .params()
            .iter()
            .chain(self.denoiser.params().iter())
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        Checkpoint {
            config_text: self.config.to_text(),
            tensors,
            optimizer,
        }
    }

    /// Rebuild from a checkpoint whose tensor table matches its config exactly.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = RunConfig::parse(&ckpt.config_text).map_err(|e| Error::Corrupt(format!("embedded config: {e}")))?;
        let mut codec = LatentCodec::<f32>::new(config.codec.clone(), config.codec_train.seed)?;
        let mut denoiser = Denoiser::<f32>::new(config.vit.clone(), config.train.seed)?;
        let expected = codec.params().len() + denoiser.params().len();
        if ckpt.tensors.len() != expected {
            return Err(Error::Corrupt(format!("{} tensors, expected {expected}", ckpt.tensors.len())));
        }
        codec.params_mut().load_from(|n| ckpt.tensor(n))?;
        denoiser.params_mut().load_from(|n| ckpt.tensor(n))?;
        if let Some(opt) = &ckpt.optimizer {
            let shapes_match = |ms: &[Tensor<f32>]| {
                ms.len() == denoiser.params().len()
                    && ms.iter().zip(denoiser.params().tensors()).all(|(m, p)| m.shape() == p.shape())
            };
            if !shapes_match(&opt.first_moment) || !shapes_match(&opt.second_moment) {
                return Err(Error::Corrupt("optimizer moments do not match the denoiser".into()));
            }
        }
        TrainedModel::new(config, codec, denoiser)
    }

    pub fn load(path: &Path) -> Result<(Self, Checkpoint)> {
        let ckpt = Checkpoint::load(path)?;
        Ok((Self::from_checkpoint(&ckpt)?, ckpt))
    }
}
