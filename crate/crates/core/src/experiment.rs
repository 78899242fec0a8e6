//! Reproducible experiments: a flat `key = value` configuration and the
//! commands built on it (train, eval, predict, ablate, cross-train, synth).
//!
//! Configuration precedence is defaults, then the config file, then
//! explicit overrides. Every artifact carries the resolved configuration:
//! CSV files as leading `# key = value` lines, PNG maps as text chunks and
//! checkpoints through the embedded graph description.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::augment::{default_plan, AugmentPlan, PLAN_VERSION};
use crate::dataio::{load_dataset, read_image, save_binary_map, save_probability_map, Dataset, DatasetSplit, FundusSample, LoadOptions};
use crate::error::{Error, Result};
use crate::inference::{binarize, predict, Mode, Network};
use crate::metrics::{best_f1_threshold, macro_average, roc_points, MetricsReport};
use crate::model::{
    build_graph, init_params, load_checkpoint, load_checkpoint_for, Backbone, FuseOn, GraphConfig, ModelGraph,
    Params, Variant, DESK_WIDTHS, FULL_WIDTHS, TOY_WIDTHS,
};
use crate::synth::write_synthetic;
use crate::tensor::{Map, ProbMap, Tensor};
use crate::trainer::{evaluate_samples, train_with, write_log, OptimizerConfig, TrainOptions, TrainOutcome};

/// Environment variable naming the directory that holds one sub-directory
/// per dataset (`DRIVE/`, `STARE/`, `CHASE_DB1/`, `SYNTHETIC/`).
pub const DATA_ROOT_ENV: &str = "BTSDSN_DATA_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Step sizes for training small networks from scratch.
    Desk,
    /// Fine-tuning step sizes for pretrained backbones.
    FineTune,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "fine-tune" => Ok(Preset::FineTune),
            _ => Err(Error::Config(format!("preset must be 'desk' or 'fine-tune', got '{s}'"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::FineTune => "fine-tune",
        })
    }
}

/// How the binarisation threshold is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdPolicy {
    Fixed(f64),
    /// The grid threshold maximising mean validation F1.
    BestValF1,
}

impl FromStr for ThresholdPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "val-f1" {
            return Ok(ThresholdPolicy::BestValF1);
        }
        match s.parse::<f64>() {
            Ok(t) if (0.0..=1.0).contains(&t) => Ok(ThresholdPolicy::Fixed(t)),
            _ => Err(Error::Config(format!(
                "threshold must be a number in [0, 1] or 'val-f1', got '{s}'"
            ))),
        }
    }
}

impl fmt::Display for ThresholdPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdPolicy::Fixed(t) => write!(f, "{t}"),
            ThresholdPolicy::BestValF1 => f.write_str("val-f1"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: Dataset,
    /// Root of `dataset`; falls back to `$BTSDSN_DATA_ROOT/<DATASET>`.
    pub data_root: Option<PathBuf>,
    /// Root of the evaluation dataset in cross-training.
    pub test_data_root: Option<PathBuf>,
    pub variant: Variant,
    pub backbone: Backbone,
    pub mode: Mode,
    pub widths: [usize; 4],
    pub resnet_blocks: [usize; 3],
    pub fuse_on: FuseOn,
    pub preset: Preset,
    pub learning_rate: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub max_iterations: Option<usize>,
    pub snapshot_every: Option<usize>,
    pub alpha: f64,
    pub loss_in_fov: bool,
    pub augment_plan_version: String,
    pub threshold: ThresholdPolicy,
    pub green_only: Option<bool>,
    pub rescale: Option<f64>,
    pub pretrained: Option<PathBuf>,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: Dataset::Drive,
            data_root: None,
            test_data_root: None,
            variant: Variant::BtsDsn,
            backbone: Backbone::Vgg,
            mode: Mode::Image,
            widths: DESK_WIDTHS,
            resnet_blocks: [3, 4, 23],
            fuse_on: FuseOn::Logits,
            preset: Preset::Desk,
            learning_rate: None,
            momentum: None,
            weight_decay: None,
            max_iterations: None,
            snapshot_every: None,
            alpha: 1.0,
            loss_in_fov: false,
            augment_plan_version: PLAN_VERSION.to_string(),
            threshold: ThresholdPolicy::Fixed(0.5),
            green_only: None,
            rescale: None,
            pretrained: None,
            seed: 0,
            output_dir: PathBuf::from("runs"),
        }
    }
}

/// Recognised configuration keys, in serialisation order.
pub const CONFIG_KEYS: [&str; 24] = [
    "dataset",
    "data_root",
    "test_data_root",
    "variant",
    "backbone",
    "mode",
    "widths",
    "resnet_blocks",
    "fuse_on",
    "preset",
    "learning_rate",
    "momentum",
    "weight_decay",
    "max_iterations",
    "snapshot_every",
    "alpha",
    "loss_in_fov",
    "augment_plan_version",
    "threshold",
    "green_only",
    "rescale",
    "pretrained",
    "seed",
    "output_dir",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn auto<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn parse_list<const N: usize>(key: &str, value: &str) -> Result<[usize; N]> {
    let items: Vec<usize> = value
        .split(',')
        .map(|s| parse(key, s.trim()))
        .collect::<Result<_>>()?;
    items
        .try_into()
        .map_err(|_| Error::Config(format!("{key}: expected {N} comma-separated integers, got '{value}'")))
}

fn show<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".to_string(), T::to_string)
}

fn show_path(v: &Option<PathBuf>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

fn join<T: fmt::Display>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let path = |v: &str| (v != "none").then(|| PathBuf::from(v));
        match key {
            "dataset" => self.dataset = value.parse()?,
            "data_root" => self.data_root = path(value),
            "test_data_root" => self.test_data_root = path(value),
            "variant" => self.variant = value.parse()?,
            "backbone" => self.backbone = value.parse()?,
            "mode" => self.mode = value.parse()?,
            "widths" => {
                self.widths = match value {
                    "toy" => TOY_WIDTHS,
                    "desk" => DESK_WIDTHS,
                    "full" => FULL_WIDTHS,
                    _ => parse_list(key, value)?,
                }
            }
            "resnet_blocks" => self.resnet_blocks = parse_list(key, value)?,
            "fuse_on" => self.fuse_on = value.parse()?,
            "preset" => self.preset = value.parse()?,
            "learning_rate" => self.learning_rate = auto(key, value)?,
            "momentum" => self.momentum = auto(key, value)?,
            "weight_decay" => self.weight_decay = auto(key, value)?,
            "max_iterations" => self.max_iterations = auto(key, value)?,
            "snapshot_every" => self.snapshot_every = auto(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "loss_in_fov" => self.loss_in_fov = parse(key, value)?,
            "augment_plan_version" => self.augment_plan_version = value.to_string(),
            "threshold" => self.threshold = value.parse()?,
            "green_only" => self.green_only = auto(key, value)?,
            "rescale" => self.rescale = auto(key, value)?,
            "pretrained" => self.pretrained = path(value),
            "seed" => self.seed = parse(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Parses config-file text: `key = value` lines, `#` comments.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value', got '{line}'", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Defaults, then `file`, then `overrides`.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut config = ExperimentConfig::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            config.apply_text(&text)?;
        }
        for (k, v) in overrides {
            config.set(k, v)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.augment_plan_version != PLAN_VERSION {
            return Err(Error::Config(format!(
                "augment_plan_version '{}' is not available (this build provides '{PLAN_VERSION}')",
                self.augment_plan_version
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be ≥ 0, got {}", self.alpha)));
        }
        if self.rescale.is_some_and(|r| !(r > 0.0 && r.is_finite())) {
            return Err(Error::Config("rescale must be positive".into()));
        }
        self.optimizer().validate()?;
        self.graph_config(3).validate()
    }

    /// The fully resolved settings, one `key = value` per line.
    pub fn to_lines(&self) -> Vec<String> {
        let values = [
            self.dataset.to_string(),
            show_path(&self.data_root),
            show_path(&self.test_data_root),
            self.variant.to_string(),
            self.backbone.to_string(),
            self.mode.to_string(),
            join(&self.widths),
            join(&self.resnet_blocks),
            self.fuse_on.to_string(),
            self.preset.to_string(),
            show(&self.learning_rate),
            show(&self.momentum),
            show(&self.weight_decay),
            show(&self.max_iterations),
            show(&self.snapshot_every),
            self.alpha.to_string(),
            self.loss_in_fov.to_string(),
            self.augment_plan_version.clone(),
            self.threshold.to_string(),
            show(&self.green_only),
            show(&self.rescale),
            show_path(&self.pretrained),
            self.seed.to_string(),
            self.output_dir.display().to_string(),
        ];
        let opt = self.optimizer();
        let mut lines: Vec<String> = CONFIG_KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}"))
            .collect();
        lines.push(format!(
            "resolved_optimizer = lr {} momentum {} weight_decay {}",
            opt.learning_rate, opt.momentum, opt.weight_decay
        ));
        lines
    }

    pub fn to_text(&self) -> String {
        let mut s = self.to_lines().join("\n");
        s.push('\n');
        s
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        let base = match self.preset {
            Preset::Desk => OptimizerConfig::desk(),
            Preset::FineTune => OptimizerConfig::fine_tune(self.backbone),
        };
        OptimizerConfig {
            learning_rate: self.learning_rate.unwrap_or(base.learning_rate),
            momentum: self.momentum.unwrap_or(base.momentum),
            weight_decay: self.weight_decay.unwrap_or(base.weight_decay),
            max_iterations: self.max_iterations,
            snapshot_every: self.snapshot_every,
            seed: self.seed,
        }
    }

    pub fn graph_config(&self, in_channels: usize) -> GraphConfig {
        let mut g = GraphConfig::for_variant(self.variant, self.backbone)
            .with_widths(self.widths)
            .with_in_channels(in_channels);
        g.resnet_blocks = self.resnet_blocks.to_vec();
        g.fuse_on = self.fuse_on;
        g
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            green_only: self.green_only,
            rescale: self.rescale,
            ..LoadOptions::default()
        }
    }

    /// Root directory of `dataset`.
    pub fn root_for(&self, dataset: Dataset, explicit: Option<&Path>) -> Result<PathBuf> {
        if let Some(p) = explicit {
            return Ok(p.to_path_buf());
        }
        match std::env::var_os(DATA_ROOT_ENV) {
            Some(base) => Ok(PathBuf::from(base).join(dataset.name())),
            None => Err(Error::Config(format!(
                "no data root for {dataset}: set data_root or {DATA_ROOT_ENV}"
            ))),
        }
    }

    pub fn load_data(&self) -> Result<DatasetSplit> {
        let root = self.root_for(self.dataset, self.data_root.as_deref())?;
        load_dataset(&root, self.dataset, &self.load_options())
    }
}

fn comment_block(config: &ExperimentConfig, extra: &[String]) -> Vec<String> {
    let mut lines = config.to_lines();
    lines.extend_from_slice(extra);
    lines
}

fn write_csv_with_comments(path: &Path, comments: &[String], header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    for c in comments {
        out.push_str("# ");
        out.push_str(c);
        out.push('\n');
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let body = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    out.push_str(&String::from_utf8(body).expect("csv output is UTF-8"));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn fmt_metric(v: f64) -> String {
    format!("{v:.6}")
}

/// Converts an image to `channels` (3 → 1 keeps green, 1 → 3 replicates).
pub fn adapt_channels(image: &Tensor, channels: usize) -> Result<Tensor> {
    match (image.channels, channels) {
        (a, b) if a == b => Ok(image.clone()),
        (3, 1) => Ok(Tensor::from(image.channel_map(1))),
        (1, 3) => Ok(Tensor::from_fn(3, image.height, image.width, |_, y, x| image.get(0, y, x))),
        (a, b) => Err(Error::Shape(format!("cannot convert a {a}-channel image to {b} channels"))),
    }
}

fn adapt_samples(samples: &[FundusSample], channels: usize) -> Result<Vec<FundusSample>> {
    samples
        .iter()
        .map(|s| {
            Ok(FundusSample {
                image: adapt_channels(&s.image, channels)?,
                ..s.clone()
            })
        })
        .collect()
}

/// Artifacts of a training run.
#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub graph: ModelGraph,
    pub outcome: TrainOutcome,
}

/// Trains on already-loaded data and writes `best.ckpt`, `train_log.csv`
/// and `config.txt` under `out_dir`.
pub fn train_on(config: &ExperimentConfig, data: &DatasetSplit, out_dir: &Path, progress: bool) -> Result<TrainArtifacts> {
    let first = data
        .train
        .first()
        .ok_or_else(|| Error::Config("training split is empty".into()))?;
    let graph = build_graph(&config.graph_config(first.image.channels))?;
    let pretrained = config
        .pretrained
        .as_deref()
        .map(|p| load_checkpoint(p).map(|c| c.params))
        .transpose()?;
    let mut init = init_params(&graph, config.seed, pretrained.as_ref())?;
    init.alpha = vec![config.alpha; graph.num_sides()];

    let plan = default_plan(data.dataset.unwrap_or(config.dataset))?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ckpt_dir = out_dir.join("checkpoints");
    let options = TrainOptions {
        mode: config.mode,
        loss_in_fov: config.loss_in_fov,
        threshold: match config.threshold {
            ThresholdPolicy::Fixed(t) => t,
            ThresholdPolicy::BestValF1 => 0.5,
        },
        checkpoint_dir: Some(ckpt_dir),
        progress,
    };
    let mut outcome = train_with(&graph, &init, data, &plan, &config.optimizer(), &options)?;
    // log paths relative to the run directory so reruns elsewhere compare equal
    for r in &mut outcome.history {
        if let Some(p) = &r.checkpoint_path {
            r.checkpoint_path = Some(p.strip_prefix(out_dir).unwrap_or(p).to_path_buf());
        }
    }
    let checkpoint = out_dir.join("best.ckpt");
    fs::rename(out_dir.join("checkpoints").join("best.ckpt"), &checkpoint).map_err(|e| Error::io(&checkpoint, e))?;
    let log = out_dir.join("train_log.csv");
    let extra = [
        format!("graph_hash = {}", graph.config.hash()),
        format!("samples_per_pass = {}", outcome.samples_per_pass),
        format!("best_iteration = {}", outcome.best_iteration),
    ];
    write_log(&log, &outcome.history, &comment_block(config, &extra))?;
    let cfg_path = out_dir.join("config.txt");
    fs::write(&cfg_path, config.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
    Ok(TrainArtifacts {
        checkpoint,
        log,
        graph,
        outcome,
    })
}

/// `train`: loads the configured dataset, trains, writes artifacts under
/// `output_dir`.
pub fn cmd_train(config: &ExperimentConfig) -> Result<TrainArtifacts> {
    let data = config.load_data()?;
    train_on(config, &data, &config.output_dir, true)
}

/// Threshold according to the configured policy.
pub fn choose_threshold(config: &ExperimentConfig, net: &Network<'_>, val: &[FundusSample]) -> Result<f64> {
    match config.threshold {
        ThresholdPolicy::Fixed(t) => Ok(t),
        ThresholdPolicy::BestValF1 => {
            if val.is_empty() {
                return Err(Error::Config("threshold = val-f1 needs a validation split".into()));
            }
            let items = val
                .iter()
                .map(|s| Ok((predict(net, &s.image, config.mode)?, s.truth.clone(), s.fov.clone())))
                .collect::<Result<Vec<_>>>()?;
            let grid: Vec<f64> = (1..100).map(|i| i as f64 / 100.0).collect();
            best_f1_threshold(&items, &grid)
        }
    }
}

pub const REPORT_COLUMNS: [&str; 12] = [
    "dataset", "variant", "backbone", "mode", "image", "threshold", "SE", "SP", "ACC", "AUC", "MCC", "F1",
];

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub per_image: Vec<(String, MetricsReport)>,
    pub mean: MetricsReport,
    pub threshold: f64,
    pub csv: PathBuf,
    pub roc: PathBuf,
}

fn metric_cells(r: &MetricsReport) -> [String; 6] {
    [r.se, r.sp, r.acc, r.auc, r.mcc, r.f1].map(fmt_metric)
}

/// Evaluates `params` on `data.test` and writes `report_csv` plus a
/// pooled ROC dump next to it.
pub fn evaluate_split(
    config: &ExperimentConfig,
    graph: &ModelGraph,
    params: &Params,
    data: &DatasetSplit,
    report_csv: &Path,
) -> Result<EvalReport> {
    let channels = graph.config.in_channels;
    let test = adapt_samples(&data.test, channels)?;
    let val = adapt_samples(&data.val, channels)?;
    if test.is_empty() {
        return Err(Error::Config("test split is empty".into()));
    }
    let net = Network { graph, params };
    let threshold = choose_threshold(config, &net, &val)?;
    let reports = evaluate_samples(&net, &test, threshold, config.mode)?;
    let mean = macro_average(&reports);

    let dataset = data.dataset.unwrap_or(config.dataset);
    let variant = graph.config.variant().map_or("custom", |v| v.name());
    let head = |image: &str| {
        vec![
            dataset.to_string(),
            variant.to_string(),
            graph.config.backbone.to_string(),
            config.mode.to_string(),
            image.to_string(),
            threshold.to_string(),
        ]
    };
    let mut rows = Vec::new();
    for (s, r) in test.iter().zip(&reports) {
        let mut row = head(&s.id);
        row.extend(metric_cells(r));
        rows.push(row);
    }
    let mut row = head("mean");
    row.extend(metric_cells(&mean));
    rows.push(row);
    let extra = [format!("graph_hash = {}", graph.config.hash())];
    let comments = comment_block(config, &extra);
    write_csv_with_comments(report_csv, &comments, &REPORT_COLUMNS, &rows)?;

    // pooled ROC over all test pixels inside the FOV
    let preds = test
        .iter()
        .map(|s| predict(&net, &s.image, config.mode))
        .collect::<Result<Vec<_>>>()?;
    let probs: Vec<f64> = preds.iter().flat_map(|p| p.data.iter().copied()).collect();
    let truth: Vec<bool> = test.iter().flat_map(|s| s.truth.data.iter().copied()).collect();
    let fov: Vec<bool> = test.iter().flat_map(|s| s.fov.data.iter().copied()).collect();
    let n = probs.len();
    let grid: Vec<f64> = (0..=256).map(|i| i as f64 / 256.0).collect();
    let roc_path = report_csv.with_extension("roc.csv");
    let points = roc_points(
        &Map::from_vec(1, n, probs)?,
        &Map::from_vec(1, n, truth)?,
        &Map::from_vec(1, n, fov)?,
        &grid,
    )
    .unwrap_or_default();
    let roc_rows: Vec<Vec<String>> = points.iter().map(|(f, t)| vec![f.to_string(), t.to_string()]).collect();
    write_csv_with_comments(&roc_path, &comments, &["fpr", "tpr"], &roc_rows)?;

    Ok(EvalReport {
        per_image: test.iter().map(|s| s.id.clone()).zip(reports).collect(),
        mean,
        threshold,
        csv: report_csv.to_path_buf(),
        roc: roc_path,
    })
}

/// `eval`: evaluates a checkpoint on the configured dataset's test split.
/// The checkpoint must match the configured variant and backbone.
pub fn cmd_eval(config: &ExperimentConfig, checkpoint: &Path) -> Result<EvalReport> {
    let data = config.load_data()?;
    let stored = load_checkpoint(checkpoint)?;
    let graph = build_graph(&config.graph_config(stored.config.in_channels))?;
    let params = load_checkpoint_for(checkpoint, &graph)?;
    evaluate_split(config, &graph, &params, &data, &config.output_dir.join("eval.csv"))
}

/// Output of `predict`.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub prob: ProbMap,
    pub binary: Option<crate::tensor::BinaryMap>,
}

/// `predict`: runs a checkpoint on one image file.
pub fn cmd_predict(
    checkpoint: &Path,
    image: &Path,
    mode: Mode,
    threshold: f64,
    out_prob: Option<&Path>,
    out_bin: Option<&Path>,
) -> Result<Prediction> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("threshold must be in [0, 1], got {threshold}")));
    }
    let ck = load_checkpoint(checkpoint)?;
    let graph = build_graph(&ck.config)?;
    ck.params.check_against(&graph)?;
    let input = adapt_channels(&read_image(image)?, ck.config.in_channels)?;
    let prob = predict(&Network { graph: &graph, params: &ck.params }, &input, mode)?;
    let binary = out_bin.map(|_| binarize(&prob, threshold));
    let graph_json = serde_json::to_string(&ck.config).expect("config serializes");
    let threshold_text = threshold.to_string();
    let meta = [
        ("graph", graph_json.as_str()),
        ("graph_hash", ck.params.graph_hash.as_str()),
        ("mode", mode.name()),
        ("threshold", threshold_text.as_str()),
    ];
    if let Some(p) = out_prob {
        save_probability_map(&prob, p, &meta)?;
    }
    if let (Some(p), Some(b)) = (out_bin, &binary) {
        save_binary_map(b, p, &meta)?;
    }
    Ok(Prediction { prob, binary })
}

pub const ABLATION_COLUMNS: [&str; 10] = ["dataset", "variant", "backbone", "mode", "SE", "SP", "ACC", "AUC", "MCC", "F1"];

/// Variants compared in an ablation: HED only exists for VGG.
pub fn ablation_variants(backbone: Backbone) -> Vec<Variant> {
    match backbone {
        Backbone::Vgg => Variant::ALL.to_vec(),
        Backbone::ResNet => vec![Variant::Dsn, Variant::BsDsn, Variant::BtsDsn],
    }
}

/// Trains and tests every variant on the same data with the same seed.
pub fn ablate_on(config: &ExperimentConfig, data: &DatasetSplit) -> Result<PathBuf> {
    let mut rows = Vec::new();
    for variant in ablation_variants(config.backbone) {
        let run = ExperimentConfig {
            variant,
            ..config.clone()
        };
        let dir = config.output_dir.join(variant.name());
        let trained = train_on(&run, data, &dir, false)?;
        let report = evaluate_split(&run, &trained.graph, &trained.outcome.best, data, &dir.join("eval.csv"))?;
        let mut row = vec![
            data.dataset.unwrap_or(config.dataset).to_string(),
            variant.to_string(),
            config.backbone.to_string(),
            config.mode.to_string(),
        ];
        row.extend(metric_cells(&report.mean));
        rows.push(row);
    }
    let path = config.output_dir.join("ablation.csv");
    write_csv_with_comments(&path, &config.to_lines(), &ABLATION_COLUMNS, &rows)?;
    Ok(path)
}

/// `ablate`: the variant comparison on the configured dataset and backbone.
pub fn cmd_ablate(config: &ExperimentConfig) -> Result<PathBuf> {
    let data = config.load_data()?;
    ablate_on(config, &data)
}

pub const CROSS_COLUMNS: [&str; 8] = ["train_dataset", "test_dataset", "variant", "backbone", "SE", "SP", "ACC", "AUC"];

/// Trains on `train`'s training data and tests on `test`'s test split.
/// Images are adapted to the trained model's channel count.
pub fn crosstrain_on(config: &ExperimentConfig, train: &DatasetSplit, test: &DatasetSplit) -> Result<PathBuf> {
    let (a, b) = (train.dataset, test.dataset);
    if a.is_some() && a == b {
        return Err(Error::Config(format!(
            "cross-training needs two different datasets, got {} twice",
            a.unwrap()
        )));
    }
    let dir = config.output_dir.join("cross");
    let trained = train_on(config, train, &dir, false)?;
    let eval_data = DatasetSplit {
        // choose thresholds on the training dataset's validation images
        val: train.val.clone(),
        ..test.clone()
    };
    let report = evaluate_split(config, &trained.graph, &trained.outcome.best, &eval_data, &dir.join("eval.csv"))?;
    let name = |d: Option<Dataset>| d.map_or("custom".to_string(), |d| d.to_string());
    let m = &report.mean;
    let row = vec![
        name(a),
        name(b),
        config.variant.to_string(),
        config.backbone.to_string(),
        fmt_metric(m.se),
        fmt_metric(m.sp),
        fmt_metric(m.acc),
        fmt_metric(m.auc),
    ];
    let path = config.output_dir.join("crosstrain.csv");
    write_csv_with_comments(&path, &config.to_lines(), &CROSS_COLUMNS, &[row])?;
    Ok(path)
}

/// `cross-train`: `config.dataset` for training, `test_dataset` for testing.
pub fn cmd_crosstrain(config: &ExperimentConfig, test_dataset: Dataset) -> Result<PathBuf> {
    if test_dataset == config.dataset {
        return Err(Error::Config(format!(
            "cross-training needs two different datasets, got {test_dataset} twice"
        )));
    }
    let train = config.load_data()?;
    let test_root = config.root_for(test_dataset, config.test_data_root.as_deref())?;
    let test = load_dataset(&test_root, test_dataset, &config.load_options())?;
    crosstrain_on(config, &train, &test)
}

/// `synth`: writes a synthetic corpus in the standard layout.
pub fn cmd_synth(out_dir: &Path, n: usize, size: usize, seed: u64) -> Result<Vec<FundusSample>> {
    write_synthetic(out_dir, n, size, seed)
}

/// `prepare`: loads and checks a dataset, writing a per-image manifest.
pub fn cmd_prepare(config: &ExperimentConfig) -> Result<(PathBuf, DatasetSplit)> {
    let data = config.load_data()?;
    let mut rows = Vec::new();
    for (split, samples) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
        for s in samples {
            let fov = s.fov.count_ones();
            let vessels = s.truth.count_ones();
            rows.push(vec![
                s.id.clone(),
                split.to_string(),
                s.height().to_string(),
                s.width().to_string(),
                s.image.channels.to_string(),
                fmt_metric(vessels as f64 / s.truth.len() as f64),
                fmt_metric(fov as f64 / s.fov.len() as f64),
                s.vessels_outside_fov().to_string(),
            ]);
        }
    }
    let path = config.output_dir.join("manifest.csv");
    let mut comments = config.to_lines();
    comments.extend(data.warnings.iter().map(|w| format!("warning: {w}")));
    write_csv_with_comments(
        &path,
        &comments,
        &["id", "split", "height", "width", "channels", "vessel_fraction", "fov_fraction", "vessels_outside_fov"],
        &rows,
    )?;
    Ok((path, data))
}

/// `augment-plan`: the plan of `dataset` as CSV.
pub fn cmd_augment_plan(dataset: Dataset) -> Result<AugmentPlan> {
    default_plan(dataset)
}

/// `model describe`: the layer table of the configured graph.
pub fn cmd_describe(config: &ExperimentConfig, in_channels: usize) -> Result<String> {
    Ok(build_graph(&config.graph_config(in_channels))?.describe())
}
