//! Fixed-learning-rate SGD with momentum and weight decay, one image per
//! step, with periodic validation snapshots and best-snapshot selection.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_set, AugmentPlan};
use crate::dataio::{DatasetSplit, FundusSample};
use crate::error::{Error, Result};
use crate::inference::{patch_samples, predict, Mode, Network, Predictor};
use crate::metrics::{evaluate_lenient, macro_average, MetricsReport};
use crate::model::{save_checkpoint, Backbone, ModelGraph, Params};
use crate::objective::gradients;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// `None` means ten passes over the augmented training set.
    pub max_iterations: Option<usize>,
    /// `None` means once per pass over the augmented training set.
    pub snapshot_every: Option<usize>,
    pub seed: u64,
}

impl OptimizerConfig {
    /// Fine-tuning settings for a pretrained backbone.
    pub fn fine_tune(backbone: Backbone) -> Self {
        let learning_rate = match backbone {
            Backbone::Vgg => 1e-8,
            Backbone::ResNet => 1e-7,
        };
        OptimizerConfig {
            learning_rate,
            momentum: 0.9,
            weight_decay: 5e-4,
            max_iterations: None,
            snapshot_every: None,
            seed: 0,
        }
    }

    /// Settings that train a small randomly initialised network in minutes.
    ///
    /// The loss is a per-pixel sum, so the step size scales inversely with
    /// image area; this preset is tuned for images around 128×128.
    pub fn desk() -> Self {
        OptimizerConfig {
            learning_rate: 5e-6,
            momentum: 0.9,
            weight_decay: 5e-4,
            max_iterations: None,
            snapshot_every: None,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be ≥ 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be ≥ 0, got {}", self.weight_decay)));
        }
        if self.max_iterations == Some(0) || self.snapshot_every == Some(0) {
            return Err(Error::Config("max_iterations and snapshot_every must be positive".into()));
        }
        Ok(())
    }

    /// `(max_iterations, snapshot_every)` for a training set of `n` samples.
    pub fn resolved(&self, n: usize) -> (usize, usize) {
        let n = n.max(1);
        (self.max_iterations.unwrap_or(10 * n), self.snapshot_every.unwrap_or(n))
    }
}

/// One step of `v ← μv − lr(g + λθ); θ ← θ + v`.
pub fn sgd_update(theta: &mut [f64], velocity: &mut [f64], grad: &[f64], opt: &OptimizerConfig) {
    for ((t, v), g) in theta.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = opt.momentum * *v - opt.learning_rate * (g + opt.weight_decay * *t);
        *t += *v;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub mode: Mode,
    /// Restrict the loss to FOV pixels.
    pub loss_in_fov: bool,
    /// Binarisation threshold for validation metrics.
    pub threshold: f64,
    /// Where snapshots go; nothing is written when `None`.
    pub checkpoint_dir: Option<PathBuf>,
    /// Print one line per snapshot to stdout.
    pub progress: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            mode: Mode::Image,
            loss_in_fov: false,
            threshold: 0.5,
            checkpoint_dir: None,
            progress: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub iteration: usize,
    /// Mean total loss over the steps since the previous snapshot.
    pub train_loss: f64,
    pub val: MetricsReport,
    pub checkpoint_path: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Params,
    pub best_iteration: usize,
    pub history: Vec<TrainRecord>,
    /// Number of samples in one pass (after augmentation and patching).
    pub samples_per_pass: usize,
}

pub fn train(
    graph: &ModelGraph,
    init: &Params,
    data: &DatasetSplit,
    plan: &AugmentPlan,
    opt: &OptimizerConfig,
) -> Result<(Params, Vec<TrainRecord>)> {
    train_with(graph, init, data, plan, opt, &TrainOptions::default()).map(|o| (o.best, o.history))
}

/// The training view: augmented, then split into patches in patch mode.
pub fn training_samples(train: &[FundusSample], plan: &AugmentPlan, mode: Mode) -> Result<Vec<FundusSample>> {
    let samples = augment_set(train, plan)?;
    Ok(match mode {
        Mode::Image => samples,
        Mode::Patch => samples.iter().flat_map(patch_samples).collect(),
    })
}

pub fn train_with(
    graph: &ModelGraph,
    init: &Params,
    data: &DatasetSplit,
    plan: &AugmentPlan,
    opt: &OptimizerConfig,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    opt.validate()?;
    init.check_against(graph)?;
    if data.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if data.val.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    let samples = training_samples(&data.train, plan, options.mode)?;
    let (max_iterations, snapshot_every) = opt.resolved(samples.len());
    if let Some(dir) = &options.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut params = init.clone();
    let alpha = params.alpha.clone();
    let mut velocity: BTreeMap<String, Vec<f64>> = params
        .tensors
        .iter()
        .filter(|(_, t)| t.learnable)
        .map(|(k, t)| (k.clone(), vec![0.0; t.len()]))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Params)> = None;
    let mut last_finite = params.clone();
    let (mut loss_sum, mut loss_count) = (0.0, 0usize);

    for iteration in 1..=max_iterations {
        if cursor == order.len() {
            order = (0..samples.len()).collect();
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let sample = &samples[order[cursor]];
        cursor += 1;

        let region = options.loss_in_fov.then_some(&sample.fov);
        let (loss, grads) = gradients(graph, &params, &sample.image, &sample.truth, &alpha, region)?;
        let finite = loss.total.is_finite() && grads.values().all(|g| g.iter().all(|v| v.is_finite()));
        if !finite {
            if let Some(dir) = &options.checkpoint_dir {
                save_checkpoint(&graph.config, &last_finite, &dir.join("last_finite.ckpt"))?;
            }
            return Err(Error::Diverged { iteration });
        }
        for (name, g) in &grads {
            if let (Some(v), Some(t)) = (velocity.get_mut(name), params.tensors.get_mut(name)) {
                sgd_update(&mut t.data, v, g, opt);
            }
        }
        loss_sum += loss.total;
        loss_count += 1;

        if iteration % snapshot_every == 0 || iteration == max_iterations {
            let val = validate_with(&Network { graph, params: &params }, &data.val, options.threshold, options.mode)?;
            let checkpoint_path = match &options.checkpoint_dir {
                Some(dir) => {
                    let p = dir.join(format!("iter_{iteration:07}.ckpt"));
                    save_checkpoint(&graph.config, &params, &p)?;
                    Some(p)
                }
                None => None,
            };
            let record = TrainRecord {
                iteration,
                train_loss: loss_sum / loss_count as f64,
                val,
                checkpoint_path,
            };
            if options.progress {
                println!(
                    "iter {:>7}  loss {:>12.4}  val AUC {:.4}  F1 {:.4}  ACC {:.4}",
                    record.iteration, record.train_loss, record.val.auc, record.val.f1, record.val.acc
                );
            }
            if best.as_ref().is_none_or(|b| record.val.auc > b.0) {
                best = Some((record.val.auc, iteration, params.clone()));
            }
            history.push(record);
            last_finite = params.clone();
            loss_sum = 0.0;
            loss_count = 0;
        }
    }

    let (_, best_iteration, best) = best.expect("at least one snapshot is always taken");
    if let Some(dir) = &options.checkpoint_dir {
        save_checkpoint(&graph.config, &best, &dir.join("best.ckpt"))?;
    }
    Ok(TrainOutcome {
        best,
        best_iteration,
        history,
        samples_per_pass: samples.len(),
    })
}

/// Image-level validation of `params` on `val`, macro-averaged.
pub fn validate(graph: &ModelGraph, params: &Params, val: &[FundusSample], threshold: f64) -> Result<MetricsReport> {
    validate_with(&Network { graph, params }, val, threshold, Mode::Image)
}

/// Per-image reports of `predictor` on `samples`, in input order.
pub fn evaluate_samples<P: Predictor + ?Sized>(
    predictor: &P,
    samples: &[FundusSample],
    threshold: f64,
    mode: Mode,
) -> Result<Vec<MetricsReport>> {
    samples
        .par_iter()
        .map(|s| {
            let prob = predict(predictor, &s.image, mode)?;
            evaluate_lenient(&prob, &s.truth, &s.fov, threshold)
        })
        .collect()
}

pub fn validate_with<P: Predictor + ?Sized>(
    predictor: &P,
    val: &[FundusSample],
    threshold: f64,
    mode: Mode,
) -> Result<MetricsReport> {
    if val.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    Ok(macro_average(&evaluate_samples(predictor, val, threshold, mode)?))
}

pub const LOG_COLUMNS: [&str; 9] = [
    "iteration",
    "train_loss",
    "val_SE",
    "val_SP",
    "val_ACC",
    "val_AUC",
    "val_MCC",
    "val_F1",
    "checkpoint_path",
];

/// Training log as CSV; `comments` become leading `# ` lines.
pub fn write_log(path: &Path, history: &[TrainRecord], comments: &[String]) -> Result<()> {
    let mut out = Vec::new();
    for c in comments {
        writeln!(out, "# {c}").expect("write to memory");
    }
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(LOG_COLUMNS)?;
        for r in history {
            w.write_record([
                r.iteration.to_string(),
                r.train_loss.to_string(),
                r.val.se.to_string(),
                r.val.sp.to_string(),
                r.val.acc.to_string(),
                r.val.auc.to_string(),
                r.val.mcc.to_string(),
                r.val.f1.to_string(),
                r.checkpoint_path
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
