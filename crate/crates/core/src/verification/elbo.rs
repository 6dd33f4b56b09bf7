//! Joint-likelihood identity on a linear-Gaussian model where every term is
//! tractable.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{mean_se, Sidedness, VerificationReport};
use crate::distributions::HALF_LN_2PI;
use crate::error::{invalid, Result};
use crate::exec::Execution;
use crate::rng::substream_indexed;

const CHUNK: usize = 4096;
/// Added to Monte Carlo tolerances so a zero-variance estimator (q equal to
/// the posterior) is not failed by rounding.
const ROUNDING: f64 = 1e-9;

/// `z ~ N(0, I)`, `x | z ~ N(W z, s^2 I)`, `y | x, z ~ N(V z + U x, s^2 I)`
/// with encoder `q(z | x) = N(A x + c, diag(s_q^2))` and one observed `(x, y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearGaussianToy {
    pub w: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub sigma_obs: f64,
    pub a: DMatrix<f64>,
    pub c: DVector<f64>,
    pub s: DVector<f64>,
    pub x: DVector<f64>,
    pub y: DVector<f64>,
}

fn gauss_matrix<R: Rng + ?Sized>(rng: &mut R, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

fn gauss_vector<R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Exact Gaussian posterior `p(z | x, y)` as (mean, precision).
struct Posterior {
    mean: DVector<f64>,
    precision: DMatrix<f64>,
    half_log_det_precision: f64,
}

impl LinearGaussianToy {
    /// Random model and encoder; the observation is drawn from the model.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, dz: usize, dx: usize, dy: usize) -> Self {
        let w = gauss_matrix(rng, dx, dz, 0.7);
        let v = gauss_matrix(rng, dy, dz, 0.7);
        let u = gauss_matrix(rng, dy, dx, 0.3);
        let sigma_obs = rng.gen_range(0.5..1.0);
        let z = gauss_vector(rng, dz, 1.0);
        let x = &w * &z + gauss_vector(rng, dx, sigma_obs);
        let y = &v * &z + &u * &x + gauss_vector(rng, dy, sigma_obs);
        Self {
            a: gauss_matrix(rng, dz, dx, 0.3),
            c: gauss_vector(rng, dz, 0.3),
            s: DVector::from_fn(dz, |_, _| rng.gen_range(0.3..1.2)),
            w,
            v,
            u,
            sigma_obs,
            x,
            y,
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.w.ncols(), self.w.nrows(), self.v.nrows())
    }

    pub fn validate(&self) -> Result<()> {
        let (dz, dx, dy) = self.dims();
        let shapes_ok = self.v.ncols() == dz
            && self.u.shape() == (dy, dx)
            && self.a.shape() == (dz, dx)
            && self.c.len() == dz
            && self.s.len() == dz
            && self.x.len() == dx
            && self.y.len() == dy;
        if !shapes_ok || dz == 0 || dx == 0 {
            return invalid("linear gaussian toy: inconsistent dimensions");
        }
        if !(self.sigma_obs > 0.0) || self.s.iter().any(|v| !(*v > 0.0)) {
            return invalid("linear gaussian toy: scales must be positive");
        }
        Ok(())
    }

    /// Closed-form `log p(x, y)` from the joint Gaussian of the observations.
    pub fn log_evidence(&self) -> Result<f64> {
        self.validate()?;
        let (_, dx, dy) = self.dims();
        let n = dx + dy;
        // [x; y] = M z + s N e with N = [[I, 0], [U, I]].
        let mut m = DMatrix::zeros(n, self.w.ncols());
        m.rows_mut(0, dx).copy_from(&self.w);
        m.rows_mut(dx, dy).copy_from(&(&self.v + &self.u * &self.w));
        let mut nm = DMatrix::identity(n, n);
        nm.view_mut((dx, 0), (dy, dx)).copy_from(&self.u);
        let cov = &m * m.transpose() + (&nm * nm.transpose()) * self.sigma_obs.powi(2);
        let chol = cov
            .cholesky()
            .ok_or_else(|| crate::Error::Invalid("linear gaussian toy: joint covariance is not positive definite".into()))?;
        let mut obs = DVector::zeros(n);
        obs.rows_mut(0, dx).copy_from(&self.x);
        obs.rows_mut(dx, dy).copy_from(&self.y);
        let sol = chol.solve(&obs);
        let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(-0.5 * obs.dot(&sol) - 0.5 * log_det - n as f64 * HALF_LN_2PI)
    }

    fn posterior(&self) -> Result<Posterior> {
        let (dz, _, _) = self.dims();
        let s2 = self.sigma_obs.powi(2);
        let precision = DMatrix::identity(dz, dz) + (self.w.transpose() * &self.w + self.v.transpose() * &self.v) / s2;
        let rhs = (self.w.transpose() * &self.x + self.v.transpose() * (&self.y - &self.u * &self.x)) / s2;
        let chol = precision
            .clone()
            .cholesky()
            .ok_or_else(|| crate::Error::Invalid("linear gaussian toy: posterior precision is not positive definite".into()))?;
        let mean = chol.solve(&rhs);
        let half_log_det_precision = chol.l().diagonal().iter().map(|d| d.ln()).sum();
        Ok(Posterior { mean, precision, half_log_det_precision })
    }

    /// Replaces the encoder by the exact posterior. Exact only when the
    /// posterior covariance is diagonal (always for a single latent).
    pub fn with_posterior_encoder(mut self) -> Result<Self> {
        let post = self.posterior()?;
        let cov = post
            .precision
            .try_inverse()
            .ok_or_else(|| crate::Error::Invalid("linear gaussian toy: singular posterior precision".into()))?;
        self.a.fill(0.0);
        self.c = post.mean;
        self.s = cov.diagonal().map(f64::sqrt);
        Ok(self)
    }

    fn q_mean(&self) -> DVector<f64> {
        &self.a * &self.x + &self.c
    }

    /// `(log joint - log q, log q)` at `z = mean + s * eps`.
    fn log_terms(&self, mean: &DVector<f64>, eps: &DVector<f64>) -> (f64, f64, DVector<f64>) {
        let (dz, dx, dy) = self.dims();
        let z = mean + self.s.component_mul(eps);
        let log_q: f64 = eps.iter().zip(self.s.iter()).map(|(e, s)| -0.5 * e * e - s.ln() - HALF_LN_2PI).sum();
        let s2 = self.sigma_obs.powi(2);
        let ls = self.sigma_obs.ln();
        let rx = &self.x - &self.w * &z;
        let ry = &self.y - &self.v * &z - &self.u * &self.x;
        let log_px = -0.5 * rx.norm_squared() / s2 - dx as f64 * (ls + HALF_LN_2PI);
        let log_py = -0.5 * ry.norm_squared() / s2 - dy as f64 * (ls + HALF_LN_2PI);
        let log_pz = -0.5 * z.norm_squared() - dz as f64 * HALF_LN_2PI;
        (log_px + log_py + log_pz, log_q, z)
    }
}

/// Monte Carlo draws of a per-sample quantity, chunked over seeded substreams.
fn mc_samples(n: usize, seed: u64, stream: &str, dz: usize, exec: Execution, f: impl Fn(&DVector<f64>) -> f64 + Sync + Send) -> Vec<f64> {
    let chunks = n.div_ceil(CHUNK);
    exec.map(chunks, |c| {
        let mut rng = substream_indexed(seed, stream, c as u64);
        let len = CHUNK.min(n - c * CHUNK);
        (0..len).map(|_| f(&gauss_vector(&mut rng, dz, 1.0))).collect::<Vec<_>>()
    })
    .concat()
}

/// Checks `ELBO + KL(q || p(z | x, y)) = log p(x, y)` with the ELBO and KL
/// estimated on independent Monte Carlo draws, and `ELBO <= log p(x, y)`.
/// Returns the identity report followed by the bound report.
pub fn verify_elbo_identity(toy: &LinearGaussianToy, n_mc: usize, seed: u64, exec: Execution) -> Result<[VerificationReport; 2]> {
    if n_mc < 10_000 {
        return invalid(format!("elbo identity: n_mc must be at least 10000, got {n_mc}"));
    }
    let log_p = toy.log_evidence()?;
    let post = toy.posterior()?;
    let dz = toy.dims().0;
    let mean = toy.q_mean();
    let elbo_samples = mc_samples(n_mc, seed, "elbo", dz, exec, |eps| {
        let (lj, lq, _) = toy.log_terms(&mean, eps);
        lj - lq
    });
    let kl_samples = mc_samples(n_mc, seed, "posterior_kl", dz, exec, |eps| {
        let (_, lq, z) = toy.log_terms(&mean, eps);
        let d = z - &post.mean;
        let log_post = -0.5 * d.dot(&(&post.precision * &d)) + post.half_log_det_precision - dz as f64 * HALF_LN_2PI;
        lq - log_post
    });
    let (elbo, se_elbo) = mean_se(&elbo_samples);
    let (kl, se_kl) = mean_se(&kl_samples);
    let se = se_elbo.hypot(se_kl);
    let identity = VerificationReport::two_sided("elbo_identity", elbo + kl, log_p, 3.0 * se + ROUNDING)
        .with_std_error(se)
        .note(format!("elbo = {elbo:.6}, posterior kl = {kl:.6}"));
    let bound = VerificationReport::with_gap("elbo_upper_bound", elbo, log_p, log_p - elbo, 3.0 * se_elbo + ROUNDING, Sidedness::Lower)
        .with_std_error(se_elbo);
    Ok([identity, bound])
}

pub(super) fn default_checks(seed: u64) -> Result<Vec<VerificationReport>> {
    let mut out = Vec::new();
    for i in 0..10 {
        let mut rng = substream_indexed(seed, "elbo_toy", i);
        let dims = (rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=4));
        let toy = LinearGaussianToy::random(&mut rng, dims.0, dims.1, dims.2);
        for mut r in verify_elbo_identity(&toy, 200_000, seed.wrapping_add(i), Execution::Sequential)? {
            r.name = format!("{}[toy {i}]", r.name);
            out.push(r);
        }
    }
    Ok(out)
}
