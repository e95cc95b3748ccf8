//! Few-shot experiment orchestration: splits, training, baselines, ablation
//! grids and run outputs.

use std::path::Path;

use serde_json::json;

use crate::datamodel::io::{load_dataset, write_json};
use crate::datamodel::Dataset;
use crate::error::{Error, Result};
use crate::evalkit::{save_csv, save_summary, MetricsRow, SeedMetrics};

pub mod baseline;
pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod matrix;
pub mod model;
pub mod optim;
pub mod split;
pub mod train;

pub use baseline::{run_baseline, Baseline, BaselineKind};
pub use config::{ModuleSwitches, RunConfig};
pub use matrix::{run_matrix, MatrixResult, MatrixSpec};
pub use model::Model;
pub use split::{few_shot_split, Split};
pub use train::{fit, train, Fit, TrainReport};

/// Loads the configured dataset directory, or generates the synthetic one.
pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    match (&cfg.data.path, &cfg.data.synth) {
        (Some(p), _) => load_dataset(p),
        (None, Some(s)) => crate::synthgen::generate_dataset(s),
        (None, None) => Err(Error::Config("no dataset: set data.path or data.synth".into())),
    }
}

fn run_manifest(cfg: &RunConfig) -> serde_json::Value {
    json!({
        "config": cfg,
        "optimizer": {
            "name": "adam",
            "lr": cfg.lr,
            "weight_decay": cfg.weight_decay,
            "weight_decay_mode": "l2_coupled",
            "beta1": cfg.adam.beta1,
            "beta2": cfg.adam.beta2,
            "eps": cfg.adam.eps,
            "lr_schedule": "constant",
        },
        "early_stopping": { "monitor": "val_macro_f1", "patience": cfg.patience, "max_epochs": cfg.max_epochs },
        "float": "f64",
    })
}

/// Writes `metrics.csv`, `summary.json`, `manifest.json` and one checkpoint
/// per seed under `dir`.
pub fn save_train_outputs(dir: &Path, cfg: &RunConfig, report: &TrainReport) -> Result<()> {
    let rows: Vec<MetricsRow> = report.metrics.per_seed.iter().map(|m| MetricsRow::ok("hivemil", m)).collect();
    save_csv(&dir.join("metrics.csv"), &rows)?;
    save_summary(&dir.join("summary.json"), &[("hivemil".to_owned(), report.metrics.summary())])?;
    let mut manifest = run_manifest(cfg);
    manifest["runs"] = report
        .runs
        .iter()
        .map(|r| {
            json!({
                "seed": r.seed,
                "best_epoch": r.fit.best_epoch,
                "best_val_f1": r.fit.best_val_f1,
                "steps": r.fit.steps,
                "history": r.fit.history,
                "checkpoint": format!("checkpoints/seed{}", r.seed),
            })
        })
        .collect();
    write_json(&dir.join("manifest.json"), &manifest)?;
    for r in &report.runs {
        let meta = json!({ "seed": r.seed, "best_epoch": r.fit.best_epoch, "best_val_f1": r.fit.best_val_f1 });
        checkpoint::save_checkpoint(&dir.join(format!("checkpoints/seed{}", r.seed)), r.fit.model.tensors(), meta)?;
    }
    Ok(())
}

pub fn save_matrix_outputs(dir: &Path, cfg: &RunConfig, spec: &MatrixSpec, result: &MatrixResult) -> Result<()> {
    save_csv(&dir.join("metrics.csv"), &result.rows)?;
    save_summary(&dir.join("summary.json"), &result.summaries())?;
    let mut manifest = run_manifest(cfg);
    manifest["matrix"] = serde_json::to_value(spec)?;
    write_json(&dir.join("manifest.json"), &manifest)
}

/// Rebuilds a trained model from a checkpoint written by
/// [`save_train_outputs`] and returns it with its seed.
pub fn load_model(ds: &Dataset, cfg: &RunConfig, base: &Path) -> Result<(Model, u64)> {
    let (tensors, manifest) = checkpoint::load_checkpoint(base)?;
    let seed = manifest.meta["seed"].as_u64().unwrap_or(0);
    let mut model = Model::new(ds, cfg, seed)?;
    checkpoint::restore(model.tensors_mut(), &tensors)?;
    Ok((model, seed))
}

/// Test metrics of a checkpoint on its own seed's split.
pub fn eval_checkpoint(ds: &Dataset, cfg: &RunConfig, base: &Path) -> Result<SeedMetrics> {
    let (model, seed) = load_model(ds, cfg, base)?;
    let split = split::split_bags(&ds.bags, ds.num_classes(), cfg.shots, seed)?;
    let (m, hit) = train::evaluate_model(&model, ds, &split.test, cfg)?;
    Ok(SeedMetrics::new(seed, m, Some(hit)))
}
