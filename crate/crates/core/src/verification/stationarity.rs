//! Cross-entropy optimum versus the mixture-prior KL bound on a two-class toy.
//!
//! The classifier is `p(2 | b) = sigmoid(w . psi(b) + c)` over two RBF units.
//! Cross entropy is minimized by damped Newton steps on a quadrature estimate,
//! then the bound's centroid and scale gradients are evaluated at the optimum
//! with the responsibilities held fixed.

use nalgebra::{DMatrix, DVector};

use super::{Sidedness, VerificationReport};
use crate::autodiff::sigmoid;
use crate::distributions::{class_prior_estimate, log_rbf, trapezoid, GaussianMixture1D};
use crate::error::{invalid, Result};

const GRID: usize = 2001;
const FD_STEP: f64 = 1e-5;
const MIN_TAU: f64 = 1e-3;

/// Two classes with known Gaussian encoders `q(b | class j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CeToy {
    pub means: [f64; 2],
    pub scales: [f64; 2],
    /// Sample counts per class, feeding the empirical class prior.
    pub counts: [usize; 2],
    /// Newton iteration budget.
    pub max_iter: usize,
    /// Cross-entropy gradient norm accepted as converged.
    pub grad_tol: f64,
}

impl CeToy {
    pub fn separated() -> Self {
        Self { means: [-2.0, 2.0], scales: [1.0, 1.0], counts: [500, 500], max_iter: 2000, grad_tol: 1e-6 }
    }
}

/// `(nu_1, nu_2, tau_1, tau_2, w_1, w_2, c)`
pub type Theta = [f64; 7];

struct Grid {
    points: Vec<f64>,
    weights: Vec<f64>,
    /// Class densities on the grid, each scaled by its class prior.
    class_mass: [Vec<f64>; 2],
}

impl Grid {
    fn new(toy: &CeToy, prior: &[f64]) -> Self {
        let lo = (toy.means[0] - 10.0 * toy.scales[0]).min(toy.means[1] - 10.0 * toy.scales[1]);
        let hi = (toy.means[0] + 10.0 * toy.scales[0]).max(toy.means[1] + 10.0 * toy.scales[1]);
        let h = (hi - lo) / (GRID - 1) as f64;
        let points: Vec<f64> = (0..GRID).map(|i| lo + h * i as f64).collect();
        let mut weights = vec![h; GRID];
        weights[0] *= 0.5;
        weights[GRID - 1] *= 0.5;
        let class_mass = [0, 1].map(|j| {
            let raw: Vec<f64> = points.iter().map(|&b| log_rbf(b, toy.means[j], toy.scales[j]).exp()).collect();
            let z = trapezoid(&raw, h);
            raw.into_iter().map(|v| prior[j] * v / z).collect()
        });
        Self { points, weights, class_mass }
    }

    fn aggregate(&self, g: usize) -> f64 {
        self.class_mass[0][g] + self.class_mass[1][g]
    }
}

fn psi(b: f64, nu: f64, tau: f64) -> (f64, f64, f64) {
    let p = log_rbf(b, nu, tau).exp();
    let d = b - nu;
    (p, p * d / (tau * tau), p * (d * d / (tau * tau * tau) - 1.0 / tau))
}

fn cross_entropy(grid: &Grid, th: &Theta) -> f64 {
    let mut total = 0.0;
    for (g, &b) in grid.points.iter().enumerate() {
        let z = th[4] * psi(b, th[0], th[2]).0 + th[5] * psi(b, th[1], th[3]).0 + th[6];
        // -log sigmoid(-z) for class 1, -log sigmoid(z) for class 2.
        let (l1, l2) = (softplus(z), softplus(-z));
        total += grid.weights[g] * (grid.class_mass[0][g] * l1 + grid.class_mass[1][g] * l2);
    }
    total
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn cross_entropy_grad(grid: &Grid, th: &Theta) -> Theta {
    let mut gr = [0.0; 7];
    for (g, &b) in grid.points.iter().enumerate() {
        let (p1, dn1, dt1) = psi(b, th[0], th[2]);
        let (p2, dn2, dt2) = psi(b, th[1], th[3]);
        let z = th[4] * p1 + th[5] * p2 + th[6];
        let s = sigmoid(z);
        let dz = grid.weights[g] * (grid.class_mass[0][g] * s - grid.class_mass[1][g] * (1.0 - s));
        let parts = [th[4] * dn1, th[5] * dn2, th[4] * dt1, th[5] * dt2, p1, p2, 1.0];
        for (acc, p) in gr.iter_mut().zip(parts) {
            *acc += dz * p;
        }
    }
    gr
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn valid(th: &Theta) -> bool {
    th.iter().all(|v| v.is_finite()) && th[2] >= MIN_TAU && th[3] >= MIN_TAU
}

/// Levenberg-damped Newton on cross entropy with a finite-difference Hessian
/// of the analytic gradient. Returns the final parameters, iterations used and
/// whether the gradient tolerance was reached.
fn minimize_ce(grid: &Grid, toy: &CeToy, start: Theta) -> (Theta, usize, bool) {
    let mut th = start;
    let mut f = cross_entropy(grid, &th);
    let mut lambda = 1e-3;
    for it in 0..toy.max_iter {
        let g = cross_entropy_grad(grid, &th);
        if norm(&g) < toy.grad_tol {
            return (th, it, true);
        }
        let mut h = DMatrix::zeros(7, 7);
        for k in 0..7 {
            let (mut up, mut dn) = (th, th);
            let step = FD_STEP * th[k].abs().max(1.0);
            up[k] += step;
            dn[k] -= step;
            let (gu, gd) = (cross_entropy_grad(grid, &up), cross_entropy_grad(grid, &dn));
            for r in 0..7 {
                h[(r, k)] = (gu[r] - gd[r]) / (2.0 * step);
            }
        }
        let h = (&h + h.transpose()) * 0.5;
        let rhs = -DVector::from_column_slice(&g);
        let mut accepted = false;
        while lambda < 1e12 {
            let damped = &h + DMatrix::identity(7, 7) * lambda;
            if let Some(chol) = damped.cholesky() {
                let delta = chol.solve(&rhs);
                let mut cand = th;
                for (c, d) in cand.iter_mut().zip(delta.iter()) {
                    *c += d;
                }
                if valid(&cand) {
                    let fc = cross_entropy(grid, &cand);
                    if fc <= f + 1e-14 * f.abs() {
                        th = cand;
                        f = fc;
                        lambda = (lambda / 3.0).max(1e-12);
                        accepted = true;
                        break;
                    }
                }
            }
            lambda *= 5.0;
        }
        if !accepted {
            return (th, it, norm(&cross_entropy_grad(grid, &th)) < toy.grad_tol);
        }
    }
    let ok = norm(&cross_entropy_grad(grid, &th)) < toy.grad_tol;
    (th, toy.max_iter, ok)
}

/// Bound `E_q[sum_k Q(k) (log Q(k) - log p(b, k))]` at `(nu, tau)` of `th`
/// with `Q` the responsibilities at `th_q`.
fn bound(grid: &Grid, prior: &[f64], th: &Theta, th_q: &Theta) -> Result<f64> {
    let mix_q = GaussianMixture1D::new(prior.to_vec(), vec![th_q[0], th_q[1]], vec![th_q[2], th_q[3]])?;
    let mut total = 0.0;
    for (g, &b) in grid.points.iter().enumerate() {
        let r = crate::distributions::responsibility(b, &mix_q);
        let mut term = 0.0;
        for k in 0..2 {
            term += r[k] * (r[k].ln() - prior[k].ln() - log_rbf(b, th[k], th[2 + k]));
        }
        total += grid.weights[g] * grid.aggregate(g) * term;
    }
    Ok(total)
}

/// Gradient of the bound in `(nu_1, nu_2, tau_1, tau_2)` from the
/// stationarity expressions, responsibilities taken at `th`.
fn bound_grad_analytic(grid: &Grid, prior: &[f64], th: &Theta) -> Result<[f64; 4]> {
    let mix = GaussianMixture1D::new(prior.to_vec(), vec![th[0], th[1]], vec![th[2], th[3]])?;
    let mut out = [0.0; 4];
    for (g, &b) in grid.points.iter().enumerate() {
        let r = crate::distributions::responsibility(b, &mix);
        let w = grid.weights[g] * grid.aggregate(g);
        for k in 0..2 {
            let (p, dn, dt) = psi(b, th[k], th[2 + k]);
            // -Q(k) p(k) / p(b, k) * dpsi = -Q(k) dpsi / psi
            out[k] -= w * r[k] * dn / p;
            out[2 + k] -= w * r[k] * dt / p;
        }
    }
    Ok(out)
}

fn bound_grad_fd(grid: &Grid, prior: &[f64], th: &Theta) -> Result<[f64; 4]> {
    let mut out = [0.0; 4];
    for (k, o) in out.iter_mut().enumerate() {
        let (mut up, mut dn) = (*th, *th);
        up[k] += FD_STEP;
        dn[k] -= FD_STEP;
        *o = (bound(grid, prior, &up, th)? - bound(grid, prior, &dn, th)?) / (2.0 * FD_STEP);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StationarityOutcome {
    pub theta: Theta,
    pub iterations: usize,
    pub converged: bool,
    pub ce_grad_norm: f64,
    pub bound_grad_analytic: [f64; 4],
    pub bound_grad_fd: [f64; 4],
    /// Bound at the optimum and with both centroids moved apart by 0.5.
    pub bound_at_optimum: f64,
    pub bound_perturbed: f64,
    /// Reports: convergence, gradient agreement, gradient size, RBF derivatives.
    pub reports: Vec<VerificationReport>,
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Minimizes cross entropy from `start`, then checks that the KL bound is
/// stationary at the optimum in the RBF centroids and scales.
pub fn verify_ce_bound_stationarity(toy: &CeToy, start: Theta) -> Result<StationarityOutcome> {
    if toy.scales.iter().any(|s| !(*s > 0.0)) || !valid(&start) || toy.max_iter == 0 {
        return invalid("ce stationarity: scales must be positive, the start valid and the budget nonzero");
    }
    let prior = class_prior_estimate(&toy.counts)?;
    let grid = Grid::new(toy, &prior);
    let (theta, iterations, converged) = minimize_ce(&grid, toy, start);
    let ce_grad_norm = norm(&cross_entropy_grad(&grid, &theta));

    let analytic = bound_grad_analytic(&grid, &prior, &theta)?;
    let fd = bound_grad_fd(&grid, &prior, &theta)?;
    let agreement = analytic.iter().zip(&fd).fold(0.0f64, |m, (a, f)| m.max((a - f).abs()));
    let bound_at_optimum = bound(&grid, &prior, &theta, &theta)?;
    let mut moved = theta;
    moved[0] -= 0.5;
    moved[1] += 0.5;
    let bound_perturbed = bound(&grid, &prior, &moved, &theta)?;

    let mut dpsi = [0.0; 4];
    for (g, &b) in grid.points.iter().enumerate() {
        let w = grid.weights[g] * grid.aggregate(g);
        for k in 0..2 {
            let (_, dn, dt) = psi(b, theta[k], theta[2 + k]);
            dpsi[k] += w * dn;
            dpsi[2 + k] += w * dt;
        }
    }

    let mut convergence = VerificationReport::with_gap("ce_convergence", ce_grad_norm, 0.0, ce_grad_norm, toy.grad_tol, Sidedness::TwoSided)
        .note(format!("{iterations} newton iterations, theta = {theta:?}"));
    if !converged {
        convergence = convergence.fail("cross entropy did not converge within the budget");
    }
    let f_prime = [theta[4], theta[5]];
    if f_prime.iter().any(|w| w.abs() < 1e-8) {
        convergence = convergence.fail(format!("classifier slope vanishes at the optimum: {f_prime:?}"));
    }
    let reports = vec![
        convergence,
        VerificationReport::with_gap("bound_gradient_fd_agreement", max_abs(&analytic), max_abs(&fd), agreement, 1e-6, Sidedness::TwoSided)
            .note(format!("analytic {analytic:?}, finite difference {fd:?}")),
        VerificationReport::with_gap("bound_gradient_at_ce_optimum", max_abs(&analytic), 0.0, max_abs(&analytic), 1e-4, Sidedness::TwoSided),
        VerificationReport::with_gap("rbf_derivatives_at_ce_optimum", max_abs(&dpsi), 0.0, max_abs(&dpsi), 1e-4, Sidedness::TwoSided)
            .note(format!("E_q[dpsi/dnu, dpsi/dtau] = {dpsi:?}")),
    ];
    Ok(StationarityOutcome {
        theta,
        iterations,
        converged,
        ce_grad_norm,
        bound_grad_analytic: analytic,
        bound_grad_fd: fd,
        bound_at_optimum,
        bound_perturbed,
        reports,
    })
}

/// Start with each unit on its class mean and opposite output slopes.
pub fn default_start(toy: &CeToy) -> Theta {
    [toy.means[0], toy.means[1], toy.scales[0], toy.scales[1], -1.0, 1.0, 0.0]
}

pub(super) fn default_checks(_seed: u64) -> Result<Vec<VerificationReport>> {
    let toy = CeToy::separated();
    Ok(verify_ce_bound_stationarity(&toy, default_start(&toy))?.reports)
}
