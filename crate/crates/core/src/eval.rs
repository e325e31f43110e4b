//! Sampling to files, proxy-FID evaluation and the gradient check.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checkpoint::TrainedModel;
use crate::codec::LatentCodec;
use crate::config::RunConfig;
use crate::data::{make_dataset, stack, DatasetSpec, LabeledImage};
use crate::diffusion::{sample_images, training_loss, SampleRequest};
use crate::metrics::{proxy_fid, FeatureExtractor};
use crate::ppm;
use crate::rng::Rng;
use crate::tensor::nn::trunc_normal;
use crate::tensor::{finite_diff_check, GradCheckReport, ParamStore, Tape, Tensor};
use crate::vit::Denoiser;
use crate::{Error, Result};

pub const BANNER: &str =
    "proxy-FID uses a fixed random feature extractor on synthetic shapes; values are not comparable to published FID scores";

/// Pass threshold for the full-model gradient check.
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;
/// Pass threshold for single elementwise operations.
pub const ELEMENTWISE_TOLERANCE: f64 = 1e-5;

/// Random stream of image `index` of class `label`, so a file's contents
/// depend only on (label, seed, index).
pub fn sample_stream(label: usize, index: usize) -> u64 {
    ((label as u64) << 32) | index as u64
}

pub fn sample_file_name(label: usize, seed: u64, index: usize) -> String {
    format!("label{label}_seed{seed}_{index:04}.ppm")
}

/// Draw `count` images of `label` and write them as PPM files into `out_dir`.
pub fn sample_to_files(
    model: &TrainedModel,
    label: usize,
    count: usize,
    seed: u64,
    guidance: f64,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let k = model.config.data.num_classes;
    if label >= k {
        return Err(Error::Config(format!("label {label} out of range: the model has {k} classes")));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let batch = model.config.eval.batch_size;
    let mut paths = Vec::with_capacity(count);
    for start in (0..count).step_by(batch) {
        let len = batch.min(count - start);
        let request = SampleRequest {
            labels: vec![label; len],
            seed,
            first_stream: sample_stream(label, start),
            guidance,
        };
        let images = sample_images(&model.denoiser, &model.codec, &model.schedule, &request, batch)?;
        for i in 0..len {
            let path = out_dir.join(sample_file_name(label, seed, start + i));
            ppm::write(&path, &images.narrow(0, i, 1)?.reshape(&images.shape()[1..])?)?;
            paths.push(path);
        }
    }
    Ok(paths)
}

/// `n` samples with labels `0, 1, …, K−1, 0, 1, …`, decoded to pixels.
pub fn generate_round_robin(model: &TrainedModel, n: usize, seed: u64, guidance: f64) -> Result<Tensor<f32>> {
    let k = model.config.data.num_classes;
    let request = SampleRequest {
        labels: (0..n).map(|i| i % k).collect(),
        seed,
        first_stream: 0,
        guidance,
    };
    sample_images(&model.denoiser, &model.codec, &model.schedule, &request, model.config.eval.batch_size)
}

/// `n` dataset images from `seed`, in the same round-robin class order.
pub fn reference_images(config: &RunConfig, n: usize, seed: u64) -> Result<Tensor<f32>> {
    let k = config.data.num_classes;
    let per_class = n.div_ceil(k);
    let set = make_dataset(&DatasetSpec {
        count_per_class: per_class,
        seed,
        ..config.data.clone()
    })?;
    let picks: Vec<&LabeledImage> = (0..n).map(|i| &set[(i % k) * per_class + i / k]).collect();
    Ok(stack(&picks)?.0)
}

/// Pixel noise `N(0, 1)` clamped to `[-1, 1]`.
pub fn noise_images(config: &RunConfig, n: usize, seed: u64) -> Tensor<f32> {
    let hw = config.data.image_hw;
    Rng::new(seed).normal_tensor::<f32>(&[n, 3, hw, hw]).map(|v| v.clamp(-1.0, 1.0))
}

pub fn feature_extractor(config: &RunConfig) -> FeatureExtractor {
    let hw = config.data.image_hw;
    FeatureExtractor::new(config.eval.feature_seed, 3 * hw * hw)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub n: usize,
    pub seed: u64,
    pub guidance: f64,
    pub proxy_fid: f64,
    pub wall_time_s: f64,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "n,seed,guidance_scale,proxy_fid,wall_time_s";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{:.3}", self.n, self.seed, self.guidance, self.proxy_fid, self.wall_time_s)
    }

    /// Append a row, writing the header first if the file is new or empty.
    pub fn append_csv(&self, path: &Path) -> Result<()> {
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let empty = file.metadata().map_err(|e| Error::io(path, e))?.len() == 0;
        let text = if empty {
            format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
        } else {
            format!("{}\n", self.csv_row())
        };
        file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Proxy-FID of `n` round-robin samples against a fresh reference set.
pub fn evaluate(model: &TrainedModel, n: usize, seed: u64, guidance: f64) -> Result<EvalReport> {
    if n < 2 {
        return Err(Error::invalid(format!("evaluation needs at least 2 samples, got {n}")));
    }
    let started = Instant::now();
    let generated = generate_round_robin(model, n, seed, guidance)?;
    let reference = reference_images(&model.config, n, model.config.eval.reference_seed)?;
    let fid = proxy_fid(&generated, &reference, &feature_extractor(&model.config))?;
    Ok(EvalReport {
        n,
        seed,
        guidance,
        proxy_fid: fid,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

/// Finite-difference check of the full latent training loss in f64 on the
/// given (small) configuration. Norm gains and biases are randomized so that
/// no gradient is trivially zero.
pub fn gradcheck(config: &RunConfig) -> Result<GradCheckReport> {
    let mut rng = Rng::new(config.train.seed);
    let codec = LatentCodec::<f64>::new(config.codec.clone(), config.codec_train.seed)?;
    let mut model = Denoiser::<f64>::new(config.vit.clone(), config.train.seed)?;
    for t in model.params_mut().tensors_mut() {
        if t.shape().len() == 1 {
            *t = trunc_normal(&mut rng, t.shape(), 0.3);
        }
    }
    let schedule = config.schedule.build()?;
    let dataset = make_dataset(&config.data)?;
    let b = config.train.batch_size.min(dataset.len());
    let picks: Vec<&LabeledImage> = (0..b).map(|_| &dataset[rng.below(dataset.len())]).collect();
    let (x0, y) = stack(&picks)?;
    let x0 = x0.cast::<f64>();
    let t: Vec<usize> = (0..b).map(|_| rng.below(schedule.steps())).collect();
    let latent = codec.config().latent_shape();
    let eps = rng.normal_tensor::<f64>(&[b, latent[0], latent[1], latent[2]]);
    let drop_rng = rng.clone();

    let loss = |store: &ParamStore<f64>, grads: bool| -> Result<(f64, Option<Vec<Tensor<f64>>>)> {
        let mut m = model.clone();
        *m.params_mut() = store.clone();
        let tape = Tape::new();
        let bound = m.bind(&tape);
        let mut r = drop_rng.clone();
        let l = training_loss(&tape, &bound, &codec, &schedule, &x0, &y, &t, &eps, &config.guidance, &mut r)?;
        let g = if grads {
            Some(tape.backward(&l)?.for_bound(&bound.params))
        } else {
            None
        };
        Ok((l.value().item(), g))
    };
    let analytic = loss(model.params(), true)?.1.expect("gradients requested");
    let mut failure = None;
    let report = finite_diff_check(model.params(), &analytic, 1e-5, |s| match loss(s, false) {
        Ok((v, _)) => v,
        Err(e) => {
            failure.get_or_insert(e);
            f64::NAN
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

/// Max relative error of each elementwise tape operation against central
/// differences in f64.
pub fn elementwise_gradcheck(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    store.add("a", rng.normal_tensor::<f64>(&[3, 4]));
    store.add("b", rng.normal_tensor::<f64>(&[3, 4]));
    type Op = fn(&Tape<f64>, &crate::tensor::Var<f64>, &crate::tensor::Var<f64>) -> crate::tensor::Var<f64>;
    let ops: [(&'static str, Op); 5] = [
        ("add", |t, a, b| t.add(a, b).expect("same shape")),
        ("sub", |t, a, b| t.sub(a, b).expect("same shape")),
        ("mul", |t, a, b| t.mul(a, b).expect("same shape")),
        ("scale", |t, a, _| t.scale(a, 1.7)),
        ("gelu", |t, a, _| t.gelu(a)),
    ];
    // A fixed random weighting makes every output entry matter differently.
    let weights = rng.normal_tensor::<f64>(&[3, 4]);
    ops.iter()
        .map(|&(name, op)| {
            let run = |s: &ParamStore<f64>, grads: bool| {
                let tape = Tape::new();
                let p = s.bind(&tape);
                let out = op(&tape, &p.vars()[0], &p.vars()[1]);
                let weighted = tape.mul(&out, &tape.constant(weights.clone())).expect("same shape");
                let l = tape.sum(&weighted);
                let g = grads.then(|| tape.backward(&l).expect("scalar loss").for_bound(&p));
                (l.value().item(), g)
            };
            let analytic = run(&store, true).1.expect("gradients requested");
            (name, finite_diff_check(&store, &analytic, 1e-5, |s| run(s, false).0).max_error())
        })
        .collect()
}
