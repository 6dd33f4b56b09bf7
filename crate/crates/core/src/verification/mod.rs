//! Numerical certification of the identities and bounds behind the loss.
//!
//! Every check returns a [`VerificationReport`]. Quadrature checks carry a
//! fixed tolerance; Monte Carlo checks carry three standard errors.

use serde::{Deserialize, Serialize};

use crate::exec::Execution;
use crate::Result;

mod concavity;
mod divergence;
mod elbo;
mod stationarity;

pub use concavity::verify_log_concavity;
pub use divergence::{
    verify_jensen_bound, verify_kl_chain, verify_pairwise_marginal, KlChainSpec, KlMethod, PriorSpec,
};
pub use elbo::{verify_elbo_identity, LinearGaussianToy};
pub use stationarity::{default_start, verify_ce_bound_stationarity, CeToy, StationarityOutcome, Theta};

/// Whether a gap must be small in magnitude or only bounded below.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sidedness {
    TwoSided,
    /// Passes when `gap >= -tolerance`.
    Lower,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
    pub tolerance: f64,
    pub sidedness: Sidedness,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mc_std_error: Option<f64>,
    pub pass: bool,
    /// Free-form diagnostics.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl VerificationReport {
    /// Two-sided report with `gap = lhs - rhs`.
    pub fn two_sided(name: impl Into<String>, lhs: f64, rhs: f64, tolerance: f64) -> Self {
        Self::with_gap(name, lhs, rhs, lhs - rhs, tolerance, Sidedness::TwoSided)
    }

    /// One-sided report with `gap = lhs - rhs`, passing when `gap >= -tolerance`.
    pub fn lower(name: impl Into<String>, lhs: f64, rhs: f64, tolerance: f64) -> Self {
        Self::with_gap(name, lhs, rhs, lhs - rhs, tolerance, Sidedness::Lower)
    }

    pub fn with_gap(name: impl Into<String>, lhs: f64, rhs: f64, gap: f64, tolerance: f64, sidedness: Sidedness) -> Self {
        let pass = match sidedness {
            Sidedness::TwoSided => gap.abs() <= tolerance,
            Sidedness::Lower => gap >= -tolerance,
        };
        Self {
            name: name.into(),
            lhs,
            rhs,
            gap,
            tolerance,
            sidedness,
            mc_std_error: None,
            pass,
            notes: Vec::new(),
        }
    }

    pub fn with_std_error(mut self, se: f64) -> Self {
        self.mc_std_error = Some(se);
        self
    }

    pub fn note(mut self, text: impl Into<String>) -> Self {
        self.notes.push(text.into());
        self
    }

    /// Forces a failure, keeping the numbers.
    pub fn fail(mut self, why: impl Into<String>) -> Self {
        self.pass = false;
        self.notes.push(why.into());
        self
    }
}

/// Runs every check with its default configuration. Checks run
/// independently, each on its own seeded stream.
pub fn run_suite(seed: u64, exec: Execution) -> Result<Vec<VerificationReport>> {
    let jobs: Vec<fn(u64) -> Result<Vec<VerificationReport>>> = vec![
        elbo::default_checks,
        divergence::default_kl_chain_checks,
        divergence::default_pairwise_checks,
        divergence::default_jensen_checks,
        stationarity::default_checks,
        concavity::default_checks,
    ];
    let results = exec.map_slice(&jobs, |job| job(seed));
    let mut out = Vec::new();
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Mean and standard error of a sample.
pub(crate) fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, (var / n).sqrt())
}

#[cfg(test)]
mod tests;
