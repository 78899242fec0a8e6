use std::path::PathBuf;
use std::process::ExitCode;

use btsdsn::dataio::Dataset;
use btsdsn::experiment::{self, ExperimentConfig};
use btsdsn::inference::Mode;
use clap::{Args, Parser, Subcommand};

/// Retinal vessel segmentation with deeply-supervised short-connection networks.
#[derive(Parser)]
#[command(name = "btsdsn", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by all commands; they override the config file.
#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Extra `key=value` override (repeatable, applied last).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long, global = true)]
    dataset: Option<String>,
    #[arg(long, global = true)]
    data_root: Option<PathBuf>,
    #[arg(long, global = true)]
    variant: Option<String>,
    #[arg(long, global = true)]
    backbone: Option<String>,
    /// `image` or `patch`.
    #[arg(long, global = true)]
    mode: Option<String>,
    /// `toy`, `desk`, `full` or four comma-separated widths.
    #[arg(long, global = true)]
    widths: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    max_iterations: Option<String>,
    #[arg(long, global = true)]
    learning_rate: Option<String>,
    /// A value in [0, 1] or `val-f1`.
    #[arg(long, global = true)]
    threshold: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Load and check a dataset; write a per-image manifest.
    Prepare,
    /// Print a dataset's augmentation plan as CSV.
    AugmentPlan,
    /// Train and keep the best validation snapshot.
    Train,
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Predict one image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long = "out-prob")]
        out_prob: Option<PathBuf>,
        #[arg(long = "out-bin")]
        out_bin: Option<PathBuf>,
    },
    /// Train and test every variant under identical settings.
    Ablate,
    /// Train on `--dataset`, test on `--test-dataset`.
    CrossTrain {
        #[arg(long)]
        test_dataset: String,
        #[arg(long)]
        test_data_root: Option<PathBuf>,
    },
    /// Write a seeded synthetic corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 12)]
        n: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
    },
    /// Model utilities.
    Model {
        #[command(subcommand)]
        action: ModelAction,
    },
}

#[derive(Subcommand)]
enum ModelAction {
    /// Print the layer table of the configured network.
    Describe {
        #[arg(long, default_value_t = 3)]
        in_channels: usize,
    },
}

fn overrides(c: &Common) -> Result<Vec<(String, String)>, btsdsn::Error> {
    let mut out = Vec::new();
    let mut push = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            out.push((k.to_string(), v));
        }
    };
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    push("dataset", c.dataset.clone());
    push("data_root", path(&c.data_root));
    push("variant", c.variant.clone());
    push("backbone", c.backbone.clone());
    push("mode", c.mode.clone());
    push("widths", c.widths.clone());
    push("seed", c.seed.map(|s| s.to_string()));
    push("output_dir", path(&c.output_dir));
    push("max_iterations", c.max_iterations.clone());
    push("learning_rate", c.learning_rate.clone());
    push("threshold", c.threshold.clone());
    for s in &c.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| btsdsn::Error::Config(format!("--set expects KEY=VALUE, got '{s}'")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn run(cli: Cli) -> btsdsn::Result<()> {
    let mut sets = overrides(&cli.common)?;
    if let Command::CrossTrain {
        test_data_root: Some(p), ..
    } = &cli.command
    {
        sets.push(("test_data_root".into(), p.display().to_string()));
    }
    let config = ExperimentConfig::resolve(cli.common.config.as_deref(), &sets)?;
    match cli.command {
        Command::Prepare => {
            let (path, data) = experiment::cmd_prepare(&config)?;
            println!(
                "{}: {} train, {} val, {} test -> {}",
                config.dataset,
                data.train.len(),
                data.val.len(),
                data.test.len(),
                path.display()
            );
            for w in &data.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::AugmentPlan => print!("{}", experiment::cmd_augment_plan(config.dataset)?.to_csv()),
        Command::Train => {
            let out = experiment::cmd_train(&config)?;
            println!(
                "best iteration {} -> {} (log {})",
                out.outcome.best_iteration,
                out.checkpoint.display(),
                out.log.display()
            );
        }
        Command::Eval { checkpoint } => {
            let r = experiment::cmd_eval(&config, &checkpoint)?;
            let m = &r.mean;
            println!(
                "SE {:.4}  SP {:.4}  ACC {:.4}  AUC {:.4}  MCC {:.4}  F1 {:.4}  (threshold {}) -> {}",
                m.se,
                m.sp,
                m.acc,
                m.auc,
                m.mcc,
                m.f1,
                r.threshold,
                r.csv.display()
            );
        }
        Command::Predict {
            checkpoint,
            image,
            out_prob,
            out_bin,
        } => {
            let threshold = match config.threshold {
                experiment::ThresholdPolicy::Fixed(t) => t,
                experiment::ThresholdPolicy::BestValF1 => {
                    return Err(btsdsn::Error::Config(
                        "predict needs a numeric --threshold".into(),
                    ))
                }
            };
            let mode: Mode = config.mode;
            let p = experiment::cmd_predict(
                &checkpoint,
                &image,
                mode,
                threshold,
                out_prob.as_deref(),
                out_bin.as_deref(),
            )?;
            let mean = p.prob.data.iter().sum::<f64>() / p.prob.len() as f64;
            println!("{}×{} map, mean probability {mean:.4}", p.prob.height, p.prob.width);
        }
        Command::Ablate => println!("{}", experiment::cmd_ablate(&config)?.display()),
        Command::CrossTrain { test_dataset, .. } => {
            let test: Dataset = test_dataset.parse()?;
            println!("{}", experiment::cmd_crosstrain(&config, test)?.display());
        }
        Command::Synth { out, n, size } => {
            let samples = experiment::cmd_synth(&out, n, size, config.seed)?;
            println!("{} samples -> {}", samples.len(), out.display());
        }
        Command::Model {
            action: ModelAction::Describe { in_channels },
        } => print!("{}", experiment::cmd_describe(&config, in_channels)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
