//! Closed-form densities, the Gaussian RBF unit, 1-D Gaussian mixtures and
//! trapezoid quadrature on uniform grids.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::logsumexp;
use crate::error::{invalid, Result};

/// 0.5 * ln(2 pi)
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Points with density below this contribute nothing to quadrature sums.
const DENSITY_FLOOR: f64 = 1e-300;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagonalGaussian {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mu: Vec<f64>, log_sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != log_sigma.len() {
            return invalid(format!(
                "diagonal gaussian: {} means but {} log-scales",
                mu.len(),
                log_sigma.len()
            ));
        }
        if mu.iter().chain(&log_sigma).any(|v| !v.is_finite()) {
            return invalid("diagonal gaussian: non-finite parameter");
        }
        Ok(Self { mu, log_sigma })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn sigma(&self, i: usize) -> f64 {
        self.log_sigma[i].exp()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture1D {
    weights: Vec<f64>,
    centroids: Vec<f64>,
    scales: Vec<f64>,
}

impl GaussianMixture1D {
    pub fn new(weights: Vec<f64>, centroids: Vec<f64>, scales: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || centroids.len() != k || scales.len() != k {
            return invalid(format!(
                "mixture: need equal nonzero lengths, got {}/{}/{}",
                k,
                centroids.len(),
                scales.len()
            ));
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return invalid("mixture: weights must be positive");
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return invalid(format!("mixture: weights sum to {total}, not 1"));
        }
        if scales.iter().any(|&s| !(s > 0.0)) || centroids.iter().any(|c| !c.is_finite()) {
            return invalid("mixture: scales must be positive and centroids finite");
        }
        Ok(Self {
            weights,
            centroids,
            scales,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn centroids(&self) -> &[f64] {
        &self.centroids
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    /// log p(b, k) for every component (0-based).
    pub fn log_joint_all(&self, b: f64) -> Vec<f64> {
        (0..self.len())
            .map(|k| self.weights[k].ln() + log_rbf(b, self.centroids[k], self.scales[k]))
            .collect()
    }

    /// log p(b) = log sum_k p(b, k)
    pub fn log_density(&self, b: f64) -> f64 {
        logsumexp(&self.log_joint_all(b))
    }
}

/// Density values on a uniform grid over `[lo, hi]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridDensity {
    lo: f64,
    hi: f64,
    values: Vec<f64>,
}

impl GridDensity {
    pub fn new(lo: f64, hi: f64, values: Vec<f64>) -> Result<Self> {
        if !(hi > lo) || values.len() < 2 {
            return invalid("grid density: need hi > lo and at least two points");
        }
        if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return invalid("grid density: values must be finite and nonnegative");
        }
        Ok(Self { lo, hi, values })
    }

    /// Samples `f` at `n` uniformly spaced points and normalizes.
    pub fn from_fn(lo: f64, hi: f64, n: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        let g = Self::new(lo, hi, vec![0.0; n.max(2)])?;
        let values = g.points().map(f).collect();
        Self::new(lo, hi, values)?.normalized()
    }

    /// Gaussian N(mu, sigma^2) on the default grid for that density.
    pub fn gaussian(mu: f64, sigma: f64) -> Result<Self> {
        let (lo, hi) = default_bounds(&[mu], &[sigma]);
        Self::from_fn(lo, hi, DEFAULT_GRID_POINTS, |b| gaussian_pdf(b, mu, sigma))
    }

    pub fn normalized(mut self) -> Result<Self> {
        let z = trapezoid(&self.values, self.step());
        if !(z > 0.0) {
            return invalid("grid density: zero mass");
        }
        self.values.iter_mut().for_each(|v| *v /= z);
        Ok(self)
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.values.len() - 1) as f64
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn points(&self) -> impl Iterator<Item = f64> + '_ {
        let h = self.step();
        (0..self.values.len()).map(move |i| self.lo + h * i as f64)
    }

    pub fn mass(&self) -> f64 {
        trapezoid(&self.values, self.step())
    }

    /// Trapezoid integral of `q(b) * f(b)` where `f` is only evaluated at
    /// points carrying mass.
    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        let weighted: Vec<f64> = self
            .points()
            .zip(&self.values)
            .map(|(b, &q)| if q < DENSITY_FLOOR { 0.0 } else { q * f(b) })
            .collect();
        trapezoid(&weighted, self.step())
    }

    fn same_grid(&self, other: &Self) -> bool {
        self.lo == other.lo && self.hi == other.hi && self.values.len() == other.values.len()
    }
}

pub const DEFAULT_GRID_POINTS: usize = 4001;

/// `[min mu - 8 max sigma, max mu + 8 max sigma]`
pub fn default_bounds(mus: &[f64], sigmas: &[f64]) -> (f64, f64) {
    let lo = mus.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = mus.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s = sigmas.iter().cloned().fold(0.0, f64::max);
    (lo - 8.0 * s, hi + 8.0 * s)
}

pub fn trapezoid(values: &[f64], h: f64) -> f64 {
    match values {
        [] | [_] => 0.0,
        [first, mid @ .., last] => h * (0.5 * (first + last) + mid.iter().sum::<f64>()),
    }
}

pub fn gaussian_pdf(b: f64, mu: f64, sigma: f64) -> f64 {
    log_rbf(b, mu, sigma).exp()
}

/// Log of the Gaussian RBF unit; `tau` must be positive.
pub fn log_rbf(b: f64, nu: f64, tau: f64) -> f64 {
    let z = (b - nu) / tau;
    -0.5 * z * z - tau.ln() - HALF_LN_2PI
}

/// Gaussian RBF unit `(2 pi tau^2)^{-1/2} exp(-((b - nu) / tau)^2 / 2)`.
pub fn rbf_eval(b: f64, nu: f64, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return invalid(format!("rbf: scale must be positive, got {tau}"));
    }
    Ok(log_rbf(b, nu, tau).exp())
}

/// KL(q || N(0, I)) for a diagonal Gaussian.
pub fn gaussian_kl_analytic(q: &DiagonalGaussian) -> Result<f64> {
    if q.mu.iter().chain(&q.log_sigma).any(|v| !v.is_finite()) {
        return invalid("gaussian kl: non-finite input");
    }
    Ok(q.mu
        .iter()
        .zip(&q.log_sigma)
        .map(|(&m, &ls)| kl_normal_std(m, ls))
        .sum())
}

/// KL(N(m, e^{2 ls}) || N(0, 1)) = -1/2 (1 + 2 ls - m^2 - e^{2 ls})
pub fn kl_normal_std(m: f64, log_sigma: f64) -> f64 {
    -0.5 * (1.0 + 2.0 * log_sigma - m * m - (2.0 * log_sigma).exp())
}

/// KL(N(m1, s1^2) || N(m2, s2^2)) for scalars.
pub fn kl_normal(m1: f64, s1: f64, m2: f64, s2: f64) -> f64 {
    (s2 / s1).ln() + (s1 * s1 + (m1 - m2).powi(2)) / (2.0 * s2 * s2) - 0.5
}

/// p(b, k) = pi_k psi_k(b) with a 1-based component index.
pub fn mixture_joint(b: f64, k: usize, mix: &GaussianMixture1D) -> Result<f64> {
    if k == 0 || k > mix.len() {
        return invalid(format!("mixture: component {k} outside 1..={}", mix.len()));
    }
    let i = k - 1;
    Ok(mix.weights[i] * rbf_eval(b, mix.centroids[i], mix.scales[i])?)
}

/// Posterior p(k | b) over components, computed in log space.
pub fn responsibility(b: f64, mix: &GaussianMixture1D) -> Vec<f64> {
    let logs = mix.log_joint_all(b);
    let lse = logsumexp(&logs);
    logs.iter()
        .map(|&l| (l - lse).exp().max(f64::MIN_POSITIVE))
        .collect()
}

/// Empirical class prior `n_k / n`, with zero counts floored to one.
pub fn class_prior_estimate(counts: &[usize]) -> Result<Vec<f64>> {
    if counts.is_empty() || counts.iter().all(|&c| c == 0) {
        return invalid("class prior: total count is zero");
    }
    let floored: Vec<f64> = counts.iter().map(|&c| c.max(1) as f64).collect();
    let total: f64 = floored.iter().sum();
    Ok(floored.into_iter().map(|c| c / total).collect())
}

/// Trapezoid estimate of KL(q || p) on a shared grid.
pub fn kl_quadrature(q: &GridDensity, p: &GridDensity) -> Result<f64> {
    if !q.same_grid(p) {
        return invalid("kl quadrature: densities are on different grids");
    }
    let terms: Vec<f64> = q
        .values
        .iter()
        .zip(&p.values)
        .map(|(&qv, &pv)| {
            if qv < DENSITY_FLOOR {
                0.0
            } else {
                qv * (qv.ln() - pv.ln())
            }
        })
        .collect();
    let kl = trapezoid(&terms, q.step());
    if !kl.is_finite() {
        return invalid("kl quadrature: q has mass where p vanishes");
    }
    Ok(kl)
}

/// Trapezoid estimate of the differential entropy `-int q log q`.
pub fn entropy_quadrature(q: &GridDensity) -> Result<f64> {
    let terms: Vec<f64> = q
        .values
        .iter()
        .map(|&v| if v < DENSITY_FLOOR { 0.0 } else { -v * v.ln() })
        .collect();
    let h = trapezoid(&terms, q.step());
    if !h.is_finite() {
        return invalid("entropy quadrature: non-finite result");
    }
    Ok(h)
}

pub fn sqrt_2pi() -> f64 {
    (2.0 * PI).sqrt()
}
