//! Midpoint log-concavity of the RBF unit in its centroid.

use rand::Rng;

use super::{Sidedness, VerificationReport};
use crate::distributions::log_rbf;
use crate::error::{invalid, Result};
use crate::rng::substream_indexed;

/// `log psi(b; (nu1 + nu2) / 2, tau) >= (log psi(b; nu1) + log psi(b; nu2)) / 2`
/// for every pair; the report carries the smallest slack.
pub fn verify_log_concavity(b: f64, tau: f64, pairs: &[(f64, f64)]) -> Result<VerificationReport> {
    if !(tau > 0.0) || pairs.is_empty() {
        return invalid("log concavity: need a positive scale and at least one pair");
    }
    let mut worst = (f64::INFINITY, 0.0, 0.0);
    for &(n1, n2) in pairs {
        let mid = log_rbf(b, 0.5 * (n1 + n2), tau);
        let avg = 0.5 * (log_rbf(b, n1, tau) + log_rbf(b, n2, tau));
        if mid - avg < worst.0 {
            worst = (mid - avg, mid, avg);
        }
    }
    Ok(VerificationReport::with_gap("log_concavity", worst.1, worst.2, worst.0, 1e-12, Sidedness::Lower)
        .note(format!("{} centroid pairs", pairs.len())))
}

pub(super) fn default_checks(seed: u64) -> Result<Vec<VerificationReport>> {
    let mut rng = substream_indexed(seed, "concavity", 0);
    let (b, tau) = (rng.gen_range(-2.0..2.0), rng.gen_range(0.2..2.0));
    let pairs: Vec<(f64, f64)> = (0..1000).map(|_| (rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0))).collect();
    Ok(vec![verify_log_concavity(b, tau, &pairs)?])
}
