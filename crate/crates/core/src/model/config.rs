use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Shape of the latent code `z = [a || b]` with `l` channels per dimension.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentSpec {
    pub l: usize,
    /// Conditional (Gaussian prior) dimensions.
    pub n1: usize,
    /// Marginal (label-supervised) dimensions.
    pub n2: usize,
    /// Class count of each marginal dimension.
    pub classes: Vec<usize>,
}

/// Defaults match the electricity-like generator: eight channels and the
/// hour, weekday and month labels.
impl Default for LatentSpec {
    fn default() -> Self {
        Self { l: 8, n1: 4, n2: 3, classes: vec![24, 7, 12] }
    }
}

impl LatentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.l == 0 {
            return invalid("latent: l must be at least 1");
        }
        if self.n1 + self.n2 == 0 {
            return invalid("latent: n1 + n2 must be at least 1");
        }
        if self.classes.len() != self.n2 {
            return invalid(format!(
                "latent: {} class counts given for n2 = {}",
                self.classes.len(),
                self.n2
            ));
        }
        if let Some(k) = self.classes.iter().find(|&&k| k < 2) {
            return invalid(format!("latent: every class count must be >= 2, got {k}"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "relu" => Ok(Self::Relu),
            "tanh" => Ok(Self::Tanh),
            other => Err(format!("unknown activation `{other}` (relu|tanh)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    pub activation: Activation,
    /// Lookback length.
    pub lookback: usize,
    /// Forecast horizon length.
    pub horizon: usize,
    /// Std of the additive noise on a marginal embedding in its classifier pass.
    pub s_b: f64,
    /// Fusion model width.
    pub h: usize,
    pub heads: usize,
    /// Adds the query tokens back onto the attention output.
    pub fusion_residual: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            encoder_widths: vec![64],
            decoder_widths: vec![64],
            activation: Activation::Relu,
            lookback: 24,
            horizon: 1,
            s_b: 0.1,
            h: 64,
            heads: 1,
            fusion_residual: true,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_widths.iter().chain(&self.decoder_widths).any(|&w| w == 0) {
            return invalid("network: layer widths must be positive");
        }
        if self.lookback == 0 || self.horizon == 0 {
            return invalid("network: lookback and horizon must be at least 1");
        }
        if self.h == 0 || self.heads == 0 || !self.h.is_multiple_of(self.heads) {
            return invalid(format!(
                "network: width h = {} must be a positive multiple of heads = {}",
                self.h, self.heads
            ));
        }
        if !(self.s_b >= 0.0) {
            return invalid("network: s_b must be nonnegative");
        }
        Ok(())
    }
}
