//! Interleaved optimization: classifier passes per marginal label, then a
//! main pass, each under its own freeze mask and Adam state.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Tape};
use crate::data::{Batch, Splits, WindowSet};
use crate::error::{invalid, Error, Result};
use crate::losses::{beta_tcvae_loss, classifier_pass_loss, main_loss, LossBreakdown};
use crate::metrics::{export_latent, mig, rrse, RunResult, DEFAULT_MIG_BINS};
use crate::model::{checkpoint, DeepDive, LatentSpec, Mode};
use crate::rng::{substream, substream_indexed};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Deepdive,
    ConditionalOnly,
    MarginalOnly,
    BetaTcvae,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Self::Deepdive, Self::ConditionalOnly, Self::MarginalOnly, Self::BetaTcvae];

    pub fn name(self) -> &'static str {
        match self {
            Self::Deepdive => "deepdive",
            Self::ConditionalOnly => "conditional_only",
            Self::MarginalOnly => "marginal_only",
            Self::BetaTcvae => "beta_tcvae",
        }
    }

    /// The latent layout this variant trains, derived from a full layout by
    /// dropping the dimension group it does without.
    pub fn latent_for(self, full: &LatentSpec) -> LatentSpec {
        match self {
            Self::Deepdive => full.clone(),
            Self::ConditionalOnly | Self::BetaTcvae => LatentSpec {
                n2: 0,
                classes: Vec::new(),
                ..full.clone()
            },
            Self::MarginalOnly => LatentSpec { n1: 0, ..full.clone() },
        }
    }

    pub fn check(self, latent: &LatentSpec) -> Result<()> {
        let ok = match self {
            Self::Deepdive => true,
            Self::ConditionalOnly => latent.n2 == 0,
            Self::BetaTcvae => latent.n2 == 0 && latent.n1 > 0,
            Self::MarginalOnly => latent.n1 == 0,
        };
        if !ok {
            return invalid(format!(
                "variant {} is inconsistent with n1 = {}, n2 = {}",
                self.name(),
                latent.n1,
                latent.n2
            ));
        }
        Ok(())
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant `{s}` (deepdive|conditional_only|marginal_only|beta_tcvae)"))
    }
}

/// When classifier passes run relative to main passes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interleave {
    /// Every batch: classifier pass per label, then one main pass.
    #[default]
    PerBatch,
    /// Every epoch: classifier passes over all batches, then main passes.
    PerEpoch,
}

impl FromStr for Interleave {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "per_batch" => Ok(Self::PerBatch),
            "per_epoch" => Ok(Self::PerEpoch),
            other => Err(format!("unknown interleave `{other}` (per_batch|per_epoch)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_main: f64,
    pub lr_classifier: f64,
    pub seed: u64,
    pub interleave: Interleave,
    pub variant: Variant,
    pub beta: f64,
    pub mig_bins: usize,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            lr_main: 1e-3,
            lr_classifier: 1e-3,
            seed: 0,
            interleave: Interleave::PerBatch,
            variant: Variant::Deepdive,
            beta: 5.0,
            mig_bins: DEFAULT_MIG_BINS,
            checkpoint: None,
            log: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, latent: &LatentSpec) -> Result<()> {
        if self.batch_size == 0 || !(self.lr_main > 0.0) || !(self.lr_classifier > 0.0) {
            return invalid("train: batch size and learning rates must be positive");
        }
        if self.variant == Variant::BetaTcvae && (self.batch_size < 2 || !(self.beta >= 0.0)) {
            return invalid("train: beta_tcvae needs batch_size >= 2 and beta >= 0");
        }
        if self.mig_bins == 0 {
            return invalid("train: mig_bins must be positive");
        }
        self.variant.check(latent)
    }
}

/// Which objective a sub-step optimized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepMode {
    Main,
    Classifier(usize),
}

impl Serialize for StepMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Self::Main => s.serialize_str("main"),
            Self::Classifier(i) => s.serialize_str(&format!("classifier_{i}")),
        }
    }
}

impl<'de> Deserialize<'de> for StepMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s == "main" {
            return Ok(Self::Main);
        }
        s.strip_prefix("classifier_")
            .and_then(|i| i.parse().ok())
            .map(Self::Classifier)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown step mode `{s}`")))
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub batch: usize,
    pub mode: StepMode,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    /// Mean total of the main sub-steps.
    pub main_loss: f64,
    pub val_rrse_recon: Option<f64>,
    pub val_rrse_forecast: Option<f64>,
}

/// Frozen parameter names for a sub-step mode.
pub fn freeze_mask(model: &DeepDive, mode: StepMode) -> Result<BTreeSet<String>> {
    match mode {
        StepMode::Main => Ok(model.main_frozen()),
        StepMode::Classifier(i) => model.classifier_frozen(i),
    }
}

/// Model plus the per-mode optimizer states.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: DeepDive,
    pub main_opt: Adam,
    pub classifier_opts: Vec<Adam>,
    pub variant: Variant,
    pub beta: f64,
    /// Training-set size used by the beta-TCVAE estimator.
    pub dataset_size: usize,
}

impl Trainer {
    pub fn new(model: DeepDive, config: &TrainConfig, dataset_size: usize) -> Result<Self> {
        config.validate(&model.latent)?;
        let classifier_opts = (0..model.latent.n2).map(|_| Adam::new(config.lr_classifier)).collect();
        Ok(Self {
            model,
            main_opt: Adam::new(config.lr_main),
            classifier_opts,
            variant: config.variant,
            beta: config.beta,
            dataset_size,
        })
    }

    /// One optimizer update under `mode`.
    pub fn sub_step<R: Rng + ?Sized>(&mut self, batch: &Batch, mode: StepMode, rng: &mut R) -> Result<LossBreakdown> {
        let frozen = freeze_mask(&self.model, mode)?;
        self.model.params.apply_freeze(&frozen)?;
        let mut tape = Tape::new();
        let (loss, breakdown, bound) = match mode {
            StepMode::Main => {
                let out = self.model.forward(&mut tape, &batch.x, Mode::Main, rng)?;
                let (loss, b) = if self.variant == Variant::BetaTcvae {
                    beta_tcvae_loss(&mut tape, &out, &batch.x, &batch.y, self.beta, self.dataset_size)?
                } else {
                    main_loss(&mut tape, &out, &batch.x, &batch.y, &batch.labels)?
                };
                (loss, b, out.bound)
            }
            StepMode::Classifier(i) => {
                let out = self.model.forward_with(&mut tape, &batch.x, Mode::Classifier(i), rng, false)?;
                let (loss, b) = classifier_pass_loss(&mut tape, &out, i, &batch.labels)?;
                (loss, b, out.bound)
            }
        };
        if !breakdown.is_finite() {
            return Err(Error::NonFinite { op: "loss" });
        }
        tape.backward(loss)?;
        let grads = bound.grads(&tape);
        let opt = match mode {
            StepMode::Main => &mut self.main_opt,
            StepMode::Classifier(i) => &mut self.classifier_opts[i - 1],
        };
        opt.step(&mut self.model.params, &grads)?;
        Ok(breakdown)
    }

    /// Classifier pass for every label in order, then one main pass.
    pub fn interleaved_step<R: Rng + ?Sized>(&mut self, batch: &Batch, rng: &mut R) -> Result<Vec<(StepMode, LossBreakdown)>> {
        let mut out = Vec::with_capacity(self.model.latent.n2 + 1);
        for i in 1..=self.model.latent.n2 {
            out.push((StepMode::Classifier(i), self.sub_step(batch, StepMode::Classifier(i), rng)?));
        }
        out.push((StepMode::Main, self.sub_step(batch, StepMode::Main, rng)?));
        Ok(out)
    }
}

/// Noise-free `(rrse_recon, rrse_forecast)` over a window set.
pub fn evaluate(model: &DeepDive, set: &WindowSet, batch_size: usize) -> Result<(f64, f64)> {
    if set.is_empty() {
        return invalid("evaluate: empty window set");
    }
    let (mut px, mut py) = (Vec::with_capacity(set.x.len()), Vec::with_capacity(set.y.len()));
    for batch in set.batches(batch_size)? {
        let (xh, yh) = model.predict(&batch.x)?;
        px.extend_from_slice(xh.data());
        py.extend_from_slice(yh.data());
    }
    Ok((rrse(&px, &set.x)?, rrse(&py, &set.y)?))
}

/// Test metrics of a trained model. MIG is computed over the conditional
/// and marginal summaries of [`export_latent`] against the set's labels,
/// and is absent when any label column has a single observed class.
pub fn evaluate_run(model: &DeepDive, set: &WindowSet, variant: Variant, seed: u64, bins: usize) -> Result<RunResult> {
    let (rrse_recon, rrse_forecast) = evaluate(model, set, 256)?;
    let informative = !set.labels.is_empty()
        && set.labels.iter().all(|c| c.iter().any(|&j| j != c[0]))
        && model.latent.n1 + model.latent.n2 > 0;
    let mig_value = if informative {
        let table = export_latent(model, set, 256)?;
        let (m, d) = table.mig_matrix();
        Some(mig(&m, d, &set.labels, bins)?)
    } else {
        None
    };
    Ok(RunResult {
        variant: variant.name().to_string(),
        seed,
        rrse_recon,
        rrse_forecast,
        mig: mig_value,
        train_curve: Vec::new(),
        val_curve: Vec::new(),
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: DeepDive,
    pub log: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
}

fn checkpoint_meta(config: &TrainConfig, epoch: usize) -> std::collections::BTreeMap<String, String> {
    [
        ("variant", config.variant.name().to_string()),
        ("seed", config.seed.to_string()),
        ("epoch", epoch.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

/// Trains `model` on `splits.train`. Batches are reshuffled every epoch from
/// a seeded stream; validation metrics are recorded after every epoch. With
/// a checkpoint path the model is saved after every completed epoch, so a
/// divergence leaves the last good checkpoint in place.
pub fn train(config: &TrainConfig, model: DeepDive, splits: &Splits) -> Result<TrainOutcome> {
    let train_set = &splits.train;
    if train_set.is_empty() {
        return invalid("train: no training windows");
    }
    if train_set.labels.len() < model.latent.n2 {
        return invalid(format!(
            "train: model has {} marginal dimensions but the data carries {} label columns",
            model.latent.n2,
            train_set.labels.len()
        ));
    }
    let mut trainer = Trainer::new(model, config, train_set.len())?;
    let n2 = trainer.model.latent.n2;
    let mut log_writer = match &config.log {
        Some(p) => Some(BufWriter::new(std::fs::File::create(p)?)),
        None => None,
    };
    let mut log = Vec::new();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut shuffle_rng = substream(config.seed, "shuffle");
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=config.epochs {
        let mut noise_rng = substream_indexed(config.seed, "noise", epoch as u64);
        order.shuffle(&mut shuffle_rng);
        let batches: Vec<Batch> = order
            .chunks(config.batch_size)
            .map(|idx| {
                let mut b = train_set.batch(idx)?;
                b.labels.truncate(n2);
                Ok(b)
            })
            .collect::<Result<_>>()?;
        let schedule: Vec<(usize, StepMode)> = match config.interleave {
            Interleave::PerBatch => (0..batches.len())
                .flat_map(|b| (1..=n2).map(StepMode::Classifier).chain([StepMode::Main]).map(move |m| (b, m)))
                .collect(),
            Interleave::PerEpoch => (1..=n2)
                .map(StepMode::Classifier)
                .chain([StepMode::Main])
                .flat_map(|m| (0..batches.len()).map(move |b| (b, m)))
                .collect(),
        };
        let (mut main_sum, mut main_count) = (0.0, 0usize);
        for (b, mode) in schedule {
            let loss = trainer
                .sub_step(&batches[b], mode, &mut noise_rng)
                .map_err(|e| Error::Diverged { epoch, batch: b, source: Box::new(e) })?;
            if mode == StepMode::Main {
                main_sum += loss.total;
                main_count += 1;
            }
            let record = StepRecord { epoch, batch: b, mode, loss };
            if let Some(w) = log_writer.as_mut() {
                serde_json::to_writer(&mut *w, &record)?;
                w.write_all(b"\n")?;
            }
            log.push(record);
        }
        let (val_recon, val_forecast) = if splits.val.is_empty() {
            (None, None)
        } else {
            let (r, f) = evaluate(&trainer.model, &splits.val, 256)?;
            (Some(r), Some(f))
        };
        epochs.push(EpochSummary {
            epoch,
            main_loss: main_sum / main_count.max(1) as f64,
            val_rrse_recon: val_recon,
            val_rrse_forecast: val_forecast,
        });
        if let Some(path) = &config.checkpoint {
            checkpoint::save(path, &trainer.model, &checkpoint_meta(config, epoch))?;
        }
    }
    if let Some(mut w) = log_writer {
        w.flush()?;
    }
    let mut model = trainer.model;
    model.params.apply_freeze(&BTreeSet::new())?;
    if config.epochs == 0 {
        if let Some(path) = &config.checkpoint {
            checkpoint::save(path, &model, &checkpoint_meta(config, 0))?;
        }
    }
    Ok(TrainOutcome { model, log, epochs })
}
