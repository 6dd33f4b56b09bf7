//! Flat `key = value` run configuration.
//!
//! Keys are the field names of [`TrainConfig`], [`NetworkConfig`],
//! [`LatentSpec`] and [`WindowSpec`]. `lookback` and `horizon` set both the
//! network and the window. Lists are comma separated, `#` starts a comment,
//! and missing keys keep their defaults.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::WindowSpec;
use crate::error::{Error, Result};
use crate::model::{LatentSpec, NetworkConfig};
use crate::training::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub net: NetworkConfig,
    pub latent: LatentSpec,
    pub window: WindowSpec,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.latent.validate()?;
        self.net.validate()?;
        self.window.validate()?;
        if (self.net.lookback, self.net.horizon) != (self.window.lookback, self.window.horizon) {
            return Err(Error::Invalid("config: network and window disagree on lookback/horizon".into()));
        }
        self.train.validate(&self.latent)
    }
}

pub const KEYS: &[&str] = &[
    "epochs", "batch_size", "lr_main", "lr_classifier", "seed", "interleave", "variant", "beta", "mig_bins", "checkpoint", "log",
    "encoder_widths", "decoder_widths", "activation", "lookback", "horizon", "s_b", "h", "heads", "fusion_residual",
    "l", "n1", "n2", "classes", "gap", "stride", "ratios",
];

fn scalar<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("`{v}`: {e}"))
}

fn list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| scalar(p.trim())).collect()
}

fn set(cfg: &mut RunConfig, key: &str, v: &str) -> std::result::Result<(), String> {
    let (t, n, lat, w) = (&mut cfg.train, &mut cfg.net, &mut cfg.latent, &mut cfg.window);
    match key {
        "epochs" => t.epochs = scalar(v)?,
        "batch_size" => t.batch_size = scalar(v)?,
        "lr_main" => t.lr_main = scalar(v)?,
        "lr_classifier" => t.lr_classifier = scalar(v)?,
        "seed" => t.seed = scalar(v)?,
        "interleave" => t.interleave = v.parse()?,
        "variant" => t.variant = v.parse()?,
        "beta" => t.beta = scalar(v)?,
        "mig_bins" => t.mig_bins = scalar(v)?,
        "checkpoint" => t.checkpoint = Some(PathBuf::from(v)),
        "log" => t.log = Some(PathBuf::from(v)),
        "encoder_widths" => n.encoder_widths = list(v)?,
        "decoder_widths" => n.decoder_widths = list(v)?,
        "activation" => n.activation = v.parse()?,
        "lookback" => {
            n.lookback = scalar(v)?;
            w.lookback = n.lookback;
        }
        "horizon" => {
            n.horizon = scalar(v)?;
            w.horizon = n.horizon;
        }
        "s_b" => n.s_b = scalar(v)?,
        "h" => n.h = scalar(v)?,
        "heads" => n.heads = scalar(v)?,
        "fusion_residual" => n.fusion_residual = scalar(v)?,
        "l" => lat.l = scalar(v)?,
        "n1" => lat.n1 = scalar(v)?,
        "n2" => lat.n2 = scalar(v)?,
        "classes" => lat.classes = list(v)?,
        "gap" => w.gap = scalar(v)?,
        "stride" => w.stride = scalar(v)?,
        "ratios" => {
            let r: Vec<f64> = list(v)?;
            w.ratios = r.try_into().map_err(|r: Vec<f64>| format!("expected 3 ratios, got {}", r.len()))?;
        }
        other => return Err(format!("unknown key `{other}`")),
    }
    Ok(())
}

/// Parses and validates a configuration text.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut seen = std::collections::BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parse = |msg: String| Error::Parse { line: i + 1, msg };
        let (key, value) = line.split_once('=').ok_or_else(|| parse(format!("expected `key = value`, got `{line}`")))?;
        let key = key.trim();
        if !seen.insert(key.to_string()) {
            return Err(parse(format!("duplicate key `{key}`")));
        }
        set(&mut cfg, key, value.trim()).map_err(parse)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}
