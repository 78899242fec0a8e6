//! Trains a toy-width network on a generated corpus and reports test metrics.
//!
//! `cargo run --release --example synthetic_smoke -- [variant] [lr] [iters]`

use std::time::Instant;

use btsdsn::augment::default_plan;
use btsdsn::dataio::{Dataset, DatasetSplit};
use btsdsn::inference::{Mode, Network};
use btsdsn::model::{build_graph, init_params, Backbone, GraphConfig, Variant, TOY_WIDTHS};
use btsdsn::synth::generate_synthetic;
use btsdsn::trainer::{train_with, validate_with, OptimizerConfig, TrainOptions};

fn main() -> btsdsn::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let variant: Variant = args.first().map(|s| s.parse()).transpose()?.unwrap_or(Variant::BtsDsn);
    let mut opt = OptimizerConfig::desk();
    if let Some(lr) = args.get(1) {
        opt.learning_rate = lr.parse().expect("lr");
    }
    if let Some(it) = args.get(2) {
        opt.max_iterations = Some(it.parse().expect("iterations"));
    }

    let mut samples = generate_synthetic(12, 128, 7);
    let test = samples.split_off(10);
    let val = samples.split_off(8);
    let data = DatasetSplit {
        dataset: Some(Dataset::Synthetic),
        train: samples,
        val,
        test,
        warnings: vec![],
    };
    let graph = build_graph(&GraphConfig::for_variant(variant, Backbone::Vgg).with_widths(TOY_WIDTHS))?;
    let init = init_params(&graph, 0, None)?;
    let plan = default_plan(Dataset::Synthetic)?;
    let start = Instant::now();
    let options = TrainOptions {
        progress: true,
        ..TrainOptions::default()
    };
    let out = train_with(&graph, &init, &data, &plan, &opt, &options)?;
    let test = validate_with(&Network { graph: &graph, params: &out.best }, &data.test, 0.5, Mode::Image)?;
    println!(
        "{variant}: best iteration {}, test F1 {:.4} AUC {:.4} ({:.1?})",
        out.best_iteration,
        test.f1,
        test.auc,
        start.elapsed()
    );
    Ok(())
}
