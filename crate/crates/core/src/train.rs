//! The training pipeline: dataset, codec, then the denoiser.
//!
//! Every random draw of denoiser step `k` comes from stream `k` of
//! `train.seed`, so a run resumed from a checkpoint continues exactly as the
//! uninterrupted run would have.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checkpoint::{params_digest, Checkpoint, OptimizerSnapshot, TrainedModel};
use crate::codec::{train_codec, CodecKind, LatentCodec};
use crate::config::RunConfig;
use crate::data::{make_dataset, stack, DatasetSpec, LabeledImage};
use crate::diffusion::{draw_timesteps, training_loss, NoiseSchedule};
use crate::rng::Rng;
use crate::tensor::{AdamState, Tape, Tensor};
use crate::vit::Denoiser;
use crate::{Error, Result};

/// Codec reconstruction MSE above which training continues with a warning.
pub const CODEC_MSE_TARGET: f64 = 0.01;

/// Images per class in the held-out codec check.
const HOLDOUT_PER_CLASS: usize = 16;

/// Held-out images drawn with the evaluation reference seed, never seen in training.
pub fn holdout_set(config: &RunConfig, per_class: usize) -> Result<Vec<LabeledImage>> {
    make_dataset(&DatasetSpec {
        count_per_class: per_class,
        seed: config.eval.reference_seed,
        ..config.data.clone()
    })
}

#[derive(Clone, Debug)]
pub struct CodecStage {
    pub codec: LatentCodec<f32>,
    pub losses: Vec<f64>,
    pub holdout_mse: f64,
}

pub fn fit_codec(config: &RunConfig, dataset: &[LabeledImage]) -> Result<CodecStage> {
    let (codec, log) = train_codec(&config.codec, dataset, &config.codec_train)?;
    let holdout = holdout_set(config, HOLDOUT_PER_CLASS)?;
    let refs: Vec<&LabeledImage> = holdout.iter().collect();
    let (x, _) = stack(&refs)?;
    let holdout_mse = codec.reconstruction_error(&x)?;
    Ok(CodecStage {
        codec,
        losses: log.losses,
        holdout_mse,
    })
}

/// Denoiser, optimizer and schedule, advanced one minibatch at a time.
pub struct DenoiserTrainer<'a> {
    pub config: &'a RunConfig,
    pub codec: &'a LatentCodec<f32>,
    pub dataset: &'a [LabeledImage],
    pub schedule: NoiseSchedule,
    pub denoiser: Denoiser<f32>,
    pub adam: AdamState<f32>,
}

impl<'a> DenoiserTrainer<'a> {
    pub fn new(config: &'a RunConfig, codec: &'a LatentCodec<f32>, dataset: &'a [LabeledImage]) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::invalid("denoiser training needs a non-empty dataset"));
        }
        let denoiser = Denoiser::new(config.vit.clone(), config.train.seed)?;
        let adam = AdamState::new(denoiser.params(), config.train.adam);
        Ok(DenoiserTrainer {
            config,
            codec,
            dataset,
            schedule: config.schedule.build()?,
            denoiser,
            adam,
        })
    }

    /// Continue from saved weights and optimizer moments.
    pub fn resume(&mut self, denoiser: Denoiser<f32>, optimizer: &OptimizerSnapshot) -> Result<()> {
        if denoiser.config() != &self.config.vit {
            return Err(Error::Config("checkpoint architecture differs from the config".into()));
        }
        self.adam.step_count = optimizer.step_count;
        self.adam.first_moment = optimizer.first_moment.clone();
        self.adam.second_moment = optimizer.second_moment.clone();
        self.denoiser = denoiser;
        Ok(())
    }

    pub fn steps_done(&self) -> u64 {
        self.adam.step_count
    }

    /// One Adam step on a fresh minibatch; returns the loss before the update.
    pub fn step(&mut self) -> Result<f64> {
        let cfg = &self.config.train;
        let mut rng = Rng::stream(cfg.seed, self.adam.step_count);
        let picks: Vec<&LabeledImage> = (0..cfg.batch_size)
            .map(|_| &self.dataset[rng.below(self.dataset.len())])
            .collect();
        let (x0, y) = stack(&picks)?;
        let t = draw_timesteps(&mut rng, cfg.batch_size, self.schedule.steps());
        let latent = self.codec.config().latent_shape();
        let eps: Tensor<f32> = rng.normal_tensor(&[cfg.batch_size, latent[0], latent[1], latent[2]]);
        let tape = Tape::new();
        let bound = self.denoiser.bind(&tape);
        let loss = training_loss(
            &tape,
            &bound,
            self.codec,
            &self.schedule,
            &x0,
            &y,
            &t,
            &eps,
            &self.config.guidance,
            &mut rng,
        )?;
        let grads = tape.backward(&loss)?.for_bound(&bound.params);
        drop(bound);
        self.adam.step(self.denoiser.params_mut(), &grads)?;
        Ok(loss.value().item() as f64)
    }

    pub fn snapshot(&self) -> Result<Checkpoint> {
        let model = TrainedModel::new(self.config.clone(), self.codec.clone(), self.denoiser.clone())?;
        Ok(model.to_checkpoint(Some(OptimizerSnapshot::from_adam(&self.adam))))
    }
}

/// Progress messages for the caller to print.
pub enum Event<'a> {
    Dataset { images: usize },
    Codec { holdout_mse: f64, warn: bool },
    Step { step: u64, loss: f64 },
    Checkpoint { path: &'a Path },
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub losses: Vec<f64>,
    pub codec_holdout_mse: f64,
    pub final_checkpoint: PathBuf,
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(format!("step_{step:06}.ldtc"))
}

pub fn final_checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("final.ldtc")
}

/// Full run into `config.out_dir`: `metrics.csv`, periodic checkpoints and
/// `final.ldtc`. With `resume`, the codec and denoiser come from the
/// checkpoint and training continues at its step count.
pub fn run(config: &RunConfig, resume: Option<&Checkpoint>, mut on_event: impl FnMut(Event)) -> Result<TrainSummary> {
    let out = &config.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let started = Instant::now();
    let mut csv = String::from("phase,step,loss,wall_time_s\n");

    let dataset = make_dataset(&config.data)?;
    on_event(Event::Dataset { images: dataset.len() });

    let (codec, holdout_mse, resumed) = match resume {
        Some(ckpt) => {
            let model = TrainedModel::from_checkpoint(ckpt)?;
            let opt = ckpt
                .optimizer
                .clone()
                .ok_or_else(|| Error::Corrupt("checkpoint has no optimizer state to resume".into()))?;
            if model.config.codec != config.codec {
                return Err(Error::Config("checkpoint codec differs from the config".into()));
            }
            let holdout = holdout_set(config, HOLDOUT_PER_CLASS)?;
            let (x, _) = stack(&holdout.iter().collect::<Vec<_>>())?;
            let mse = model.codec.reconstruction_error(&x)?;
            (model.codec, mse, Some((model.denoiser, opt)))
        }
        None => {
            let stage = fit_codec(config, &dataset)?;
            for (i, loss) in stage.losses.iter().enumerate() {
                writeln!(csv, "codec,{},{loss},{:.3}", i + 1, started.elapsed().as_secs_f64()).expect("string write");
            }
            (stage.codec, stage.holdout_mse, None)
        }
    };
    let warn = config.codec.kind == CodecKind::LinearPatch && holdout_mse > CODEC_MSE_TARGET;
    on_event(Event::Codec { holdout_mse, warn });

    let codec_digest = params_digest(codec.params());
    let mut trainer = DenoiserTrainer::new(config, &codec, &dataset)?;
    if let Some((denoiser, opt)) = resumed {
        trainer.resume(denoiser, &opt)?;
    }
    let write_csv = |csv: &str| {
        let path = out.join("metrics.csv");
        fs::write(&path, csv).map_err(|e| Error::io(&path, e))
    };
    let mut losses = Vec::new();
    while trainer.steps_done() < config.train.steps as u64 {
        let loss = trainer.step()?;
        let step = trainer.steps_done();
        losses.push(loss);
        writeln!(csv, "denoiser,{step},{loss},{:.3}", started.elapsed().as_secs_f64()).expect("string write");
        on_event(Event::Step { step, loss });
        let every = config.train.checkpoint_every as u64;
        if every > 0 && step % every == 0 && step < config.train.steps as u64 {
            let path = checkpoint_path(out, step);
            trainer.snapshot()?.save(&path)?;
            write_csv(&csv)?;
            on_event(Event::Checkpoint { path: &path });
        }
    }
    if params_digest(trainer.codec.params()) != codec_digest {
        return Err(Error::Corrupt("codec parameters changed during denoiser training".into()));
    }
    let final_checkpoint = final_checkpoint_path(out);
    trainer.snapshot()?.save(&final_checkpoint)?;
    write_csv(&csv)?;
    on_event(Event::Checkpoint { path: &final_checkpoint });
    Ok(TrainSummary {
        losses,
        codec_holdout_mse: holdout_mse,
        final_checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::micro();
        cfg.out_dir = dir.to_path_buf();
        cfg.codec_train.steps = 20;
        cfg.codec_train.batch_size = 4;
        cfg.schedule.steps = 10;
        cfg.train.steps = 6;
        cfg.train.checkpoint_every = 4;
        cfg
    }

    #[test]
    fn writes_artifacts_and_resumes_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let summary = run(&cfg, None, |_| {}).unwrap();
        assert_eq!(summary.losses.len(), 6);
        assert!(summary.losses.iter().all(|l| l.is_finite()));
        let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(csv.starts_with("phase,step,loss,wall_time_s\n"));
        assert_eq!(csv.lines().filter(|l| l.starts_with("denoiser,")).count(), 6);
        assert_eq!(csv.lines().filter(|l| l.starts_with("codec,")).count(), 20);
        let full = fs::read(final_checkpoint_path(dir.path())).unwrap();

        let mid = Checkpoint::load(&checkpoint_path(dir.path(), 4)).unwrap();
        assert_eq!(mid.optimizer.as_ref().unwrap().step_count, 4);
        let dir2 = tempfile::tempdir().unwrap();
        let resumed = run(&tiny(dir2.path()), Some(&mid), |_| {}).unwrap();
        assert_eq!(resumed.losses, summary.losses[4..]);
        let mut a = Checkpoint::from_bytes(&full).unwrap();
        let mut b = Checkpoint::load(&final_checkpoint_path(dir2.path())).unwrap();
        a.config_text.clear();
        b.config_text.clear();
        assert_eq!(a, b);
    }
}
