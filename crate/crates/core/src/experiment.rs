//! One training run end to end: window, normalize, train, score on test.

use std::path::Path;

use crate::config::RunConfig;
use crate::data::{normalize, window_split, Splits, TimeSeriesFrame};
use crate::error::Result;
use crate::metrics::RunResult;
use crate::model::DeepDive;
use crate::training::{evaluate_run, train, TrainConfig, TrainOutcome, Variant};

/// Chronological splits of `frame`, z-scored with train statistics.
pub fn prepare(frame: &TimeSeriesFrame, cfg: &RunConfig) -> Result<Splits> {
    let mut splits = window_split(frame, &cfg.window)?;
    normalize(&mut splits)?;
    Ok(splits)
}

/// `cfg` specialized to one variant and seed. The latent layout is reduced
/// to what the variant trains.
pub fn run_config(cfg: &RunConfig, variant: Variant, seed: u64) -> Result<RunConfig> {
    let mut out = cfg.clone();
    out.latent = variant.latent_for(&cfg.latent);
    out.train.variant = variant;
    out.train.seed = seed;
    out.validate()?;
    Ok(out)
}

/// Trains a fresh model and scores it on the test split, falling back to
/// validation when the test split is empty. Curves are filled from the
/// epoch summaries.
pub fn run(cfg: &RunConfig, splits: &Splits, variant: Variant, seed: u64, out_dir: Option<&Path>) -> Result<(TrainOutcome, RunResult)> {
    let mut rc = run_config(cfg, variant, seed)?;
    if let Some(dir) = out_dir {
        rc.train.checkpoint = Some(dir.join("checkpoint.bin"));
        rc.train.log = Some(dir.join("trainlog.jsonl"));
    }
    let model = DeepDive::new(rc.latent.clone(), rc.net.clone(), seed)?;
    let outcome = train(&rc.train, model, splits)?;
    let mut result = score(&outcome.model, splits, &rc.train)?;
    result.train_curve = outcome.epochs.iter().map(|e| e.main_loss).collect();
    result.val_curve = outcome.epochs.iter().filter_map(|e| e.val_rrse_forecast).collect();
    Ok((outcome, result))
}

/// Test metrics of `model` under `train` (variant, seed and MIG bins).
pub fn score(model: &DeepDive, splits: &Splits, train: &TrainConfig) -> Result<RunResult> {
    let set = if splits.test.is_empty() { &splits.val } else { &splits.test };
    evaluate_run(model, set, train.variant, train.seed, train.mig_bins)
}
