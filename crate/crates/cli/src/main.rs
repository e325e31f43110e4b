//! `ldt`: train, sample and evaluate a latent diffusion transformer.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ldt_core::checkpoint::{Checkpoint, TrainedModel};
use ldt_core::config::RunConfig;
use ldt_core::eval::{self, EvalReport, ELEMENTWISE_TOLERANCE, GRADCHECK_TOLERANCE};
use ldt_core::train::{self, Event, CODEC_MSE_TARGET};
use ldt_core::Error;

const DEFAULT_GUIDANCE: f64 = 1.25;

#[derive(Parser)]
#[command(name = "ldt", version, about = "Latent diffusion transformer on synthetic shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the codec and the denoiser; writes checkpoints and metrics.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint that carries optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides `run.out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the loss every this many steps.
        #[arg(long, default_value_t = 100)]
        log_every: u64,
    },
    /// Write `count` PPM samples of one class.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        label: usize,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_GUIDANCE)]
        guidance: f64,
        #[arg(long, default_value = "samples")]
        out: PathBuf,
    },
    /// Proxy-FID of `n` samples against a fresh reference set.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_GUIDANCE)]
        guidance: f64,
        /// Results file; defaults to eval.csv next to the checkpoint.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Finite-difference check of the training loss gradients in f64.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Io { .. } => 3,
        Error::Version(_) | Error::Checksum | Error::Corrupt(_) => 4,
        _ => 1,
    }
}

fn cmd_train(config: &Path, resume: Option<&Path>, out: Option<PathBuf>, log_every: u64) -> Result<(), Error> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(out) = out {
        cfg.out_dir = out;
    }
    let resume = resume.map(Checkpoint::load).transpose()?;
    let summary = train::run(&cfg, resume.as_ref(), |event| match event {
        Event::Dataset { images } => println!("dataset: {images} images"),
        Event::Codec { holdout_mse, warn } => {
            println!("codec: held-out reconstruction mse {holdout_mse:.5}");
            if warn {
                eprintln!("warning: codec mse above {CODEC_MSE_TARGET}; continuing with a weak codec");
            }
        }
        Event::Step { step, loss } => {
            if log_every > 0 && step % log_every == 0 {
                println!("step {step:>6}  loss {loss:.5}");
            }
        }
        Event::Checkpoint { path } => println!("checkpoint: {}", path.display()),
    })?;
    if let (Some(first), Some(last)) = (summary.losses.first(), summary.losses.last()) {
        println!("done: {} steps, loss {first:.4} -> {last:.4}", summary.losses.len());
    }
    Ok(())
}

fn cmd_sample(ckpt: &Path, label: usize, count: usize, seed: u64, guidance: f64, out: &Path) -> Result<(), Error> {
    let (model, _) = TrainedModel::load(ckpt)?;
    let paths = eval::sample_to_files(&model, label, count, seed, guidance, out)?;
    println!("wrote {} images to {}", paths.len(), out.display());
    Ok(())
}

fn cmd_eval(ckpt: &Path, n: usize, seed: u64, guidance: f64, csv: Option<PathBuf>) -> Result<(), Error> {
    let (model, _) = TrainedModel::load(ckpt)?;
    println!("note: {}", eval::BANNER);
    let report: EvalReport = eval::evaluate(&model, n, seed, guidance)?;
    println!(
        "proxy-FID {:.4}  (n = {}, seed = {}, guidance = {}, {:.1} s)",
        report.proxy_fid, report.n, report.seed, report.guidance, report.wall_time_s
    );
    let csv = csv.unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).join("eval.csv"));
    report.append_csv(&csv)
}

fn cmd_gradcheck(config: &Path) -> Result<bool, Error> {
    let cfg = RunConfig::load(config)?;
    let report = eval::gradcheck(&cfg)?;
    let mut ok = true;
    println!("full loss, max relative error per group (tolerance {GRADCHECK_TOLERANCE:e}):");
    for (group, err) in report.by_group() {
        let pass = err < GRADCHECK_TOLERANCE;
        ok &= pass;
        println!("  {group:<16} {err:.3e}  {}", if pass { "ok" } else { "FAIL" });
    }
    println!("elementwise ops (tolerance {ELEMENTWISE_TOLERANCE:e}):");
    for (op, err) in eval::elementwise_gradcheck(cfg.train.seed) {
        let pass = err < ELEMENTWISE_TOLERANCE;
        ok &= pass;
        println!("  {op:<16} {err:.3e}  {}", if pass { "ok" } else { "FAIL" });
    }
    println!("{}", if ok { "gradcheck passed" } else { "gradcheck FAILED" });
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            resume,
            out,
            log_every,
        } => cmd_train(&config, resume.as_deref(), out, log_every).map(|_| true),
        Command::Sample {
            ckpt,
            label,
            count,
            seed,
            guidance,
            out,
        } => cmd_sample(&ckpt, label, count, seed, guidance, &out).map(|_| true),
        Command::Eval {
            ckpt,
            n,
            seed,
            guidance,
            csv,
        } => cmd_eval(&ckpt, n, seed, guidance, csv).map(|_| true),
        Command::Gradcheck { config } => cmd_gradcheck(&config),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
