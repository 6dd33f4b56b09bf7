//! KL decompositions over the latent split and the mixture-prior entropy bound.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{mean_se, Sidedness, VerificationReport};
use crate::distributions::{
    default_bounds, kl_normal_std, kl_quadrature, entropy_quadrature, log_rbf, responsibility, trapezoid, DiagonalGaussian,
    GaussianMixture1D, GridDensity, HALF_LN_2PI,
};
use crate::error::{invalid, Result};
use crate::exec::Execution;
use crate::rng::substream_indexed;

const GRID_2D: usize = 1201;
const QUADRATURE_TOL: f64 = 1e-6;

/// `q(b | x) = N(m_b, s_b^2)`, `q(a | b, x) = N(alpha b + c, s_a^2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlChainSpec {
    pub m_b: f64,
    pub s_b: f64,
    pub alpha: f64,
    pub c: f64,
    pub s_a: f64,
}

/// Prior over `(a, b)`. Both have standard normal marginals.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PriorSpec {
    Factorized,
    /// Bivariate normal with unit variances and this correlation.
    Correlated(f64),
}

impl PriorSpec {
    fn log_density(self, a: f64, b: f64) -> f64 {
        match self {
            Self::Factorized => -0.5 * (a * a + b * b) - 2.0 * HALF_LN_2PI,
            Self::Correlated(r) => {
                let det = 1.0 - r * r;
                -0.5 * (a * a - 2.0 * r * a * b + b * b) / det - 0.5 * det.ln() - 2.0 * HALF_LN_2PI
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KlMethod {
    Quadrature,
    MonteCarlo { samples: usize, seed: u64 },
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let h = (hi - lo) / (n - 1) as f64;
    (0..n).map(|i| lo + h * i as f64).collect()
}

/// Trapezoid integral of `f` over a rectangle; rows are mapped in parallel.
fn integrate_2d(a: (f64, f64), b: (f64, f64), n: usize, exec: Execution, f: impl Fn(f64, f64) -> f64 + Sync + Send) -> f64 {
    let av = linspace(a.0, a.1, n);
    let bv = linspace(b.0, b.1, n);
    let (ha, hb) = (av[1] - av[0], bv[1] - bv[0]);
    let rows = exec.map_slice(&bv, |&bb| {
        let row: Vec<f64> = av.iter().map(|&aa| f(aa, bb)).collect();
        trapezoid(&row, ha)
    });
    trapezoid(&rows, hb)
}

/// Checks `KL(q(a, b) || p(a, b)) = E_b[KL(q(a | b) || p(a))] + KL(q(b) || p(b))`.
/// The right side always uses the prior marginals, so a correlated prior
/// opens a gap equal to the prior's mutual information contribution.
pub fn verify_kl_chain(q: &KlChainSpec, prior: PriorSpec, method: KlMethod, exec: Execution) -> Result<VerificationReport> {
    if !(q.s_b > 0.0 && q.s_a > 0.0) {
        return invalid("kl chain: scales must be positive");
    }
    if let PriorSpec::Correlated(r) = prior {
        if !(r.abs() < 1.0) {
            return invalid(format!("kl chain: prior correlation must lie in (-1, 1), got {r}"));
        }
    }
    let log_qb = |b: f64| log_rbf(b, q.m_b, q.s_b);
    let log_qa = |a: f64, b: f64| log_rbf(a, q.alpha * b + q.c, q.s_a);
    let kl_a = |b: f64| kl_normal_std(q.alpha * b + q.c, q.s_a.ln());
    let kl_b = kl_normal_std(q.m_b, q.s_b.ln());
    match method {
        KlMethod::Quadrature => {
            let bb = (q.m_b - 10.0 * q.s_b, q.m_b + 10.0 * q.s_b);
            let ends = [q.alpha * bb.0 + q.c, q.alpha * bb.1 + q.c];
            let ab = (ends[0].min(ends[1]) - 10.0 * q.s_a, ends[0].max(ends[1]) + 10.0 * q.s_a);
            let lhs = integrate_2d(ab, bb, GRID_2D, exec, |a, b| {
                let lq = log_qb(b) + log_qa(a, b);
                lq.exp() * (lq - prior.log_density(a, b))
            });
            let qb = GridDensity::from_fn(bb.0, bb.1, GRID_2D, |b| log_qb(b).exp())?;
            let rhs = qb.expect(kl_a) + kl_b;
            Ok(VerificationReport::two_sided("kl_chain", lhs, rhs, QUADRATURE_TOL))
        }
        KlMethod::MonteCarlo { samples, seed } => {
            if samples < 2 {
                return invalid("kl chain: monte carlo needs at least two samples");
            }
            let mut rng = substream_indexed(seed, "kl_chain", 0);
            let (mut lhs, mut diff) = (Vec::with_capacity(samples), Vec::with_capacity(samples));
            for _ in 0..samples {
                let b = q.m_b + q.s_b * rng.sample::<f64, _>(StandardNormal);
                let a = q.alpha * b + q.c + q.s_a * rng.sample::<f64, _>(StandardNormal);
                let l = log_qb(b) + log_qa(a, b) - prior.log_density(a, b);
                lhs.push(l);
                diff.push(l - kl_a(b) - kl_b);
            }
            let (lhs, _) = mean_se(&lhs);
            let (gap, se) = mean_se(&diff);
            Ok(VerificationReport::with_gap("kl_chain", lhs, lhs - gap, gap, 3.0 * se, Sidedness::TwoSided).with_std_error(se))
        }
    }
}

/// Compares the joint KL of correlated marginal codes against the sum of the
/// per-dimension KLs. The excess must equal the Gaussian mutual information
/// `-ln(1 - rho^2) / 2`; it vanishes exactly when the codes are independent.
pub fn verify_pairwise_marginal(q_i: &DiagonalGaussian, q_j: &DiagonalGaussian, rho: f64, exec: Execution) -> Result<VerificationReport> {
    if !(rho.abs() < 1.0) {
        return invalid(format!("pairwise marginal: |rho| must be below 1, got {rho}"));
    }
    if q_i.dim() != 1 || q_j.dim() != 1 {
        return invalid("pairwise marginal: expected one-dimensional codes");
    }
    let (mi, si) = (q_i.mu[0], q_i.sigma(0));
    let (mj, sj) = (q_j.mu[0], q_j.sigma(0));
    let det = 1.0 - rho * rho;
    let log_norm = -(si * sj).ln() - 0.5 * det.ln() - 2.0 * HALF_LN_2PI;
    let joint = integrate_2d((mi - 12.0 * si, mi + 12.0 * si), (mj - 12.0 * sj, mj + 12.0 * sj), GRID_2D, exec, |x, y| {
        let (u, v) = ((x - mi) / si, (y - mj) / sj);
        let lq = -0.5 * (u * u - 2.0 * rho * u * v + v * v) / det + log_norm;
        let lp = -0.5 * (x * x + y * y) - 2.0 * HALF_LN_2PI;
        lq.exp() * (lq - lp)
    });
    let split = kl_normal_std(mi, q_i.log_sigma[0]) + kl_normal_std(mj, q_j.log_sigma[0]);
    let excess = joint - split;
    let expected = -0.5 * det.ln();
    // Independence makes the split exact; otherwise quadrature error is allowed.
    let tolerance = if rho == 0.0 { 1e-10 } else { 1e-5 };
    Ok(VerificationReport::two_sided("pairwise_marginal", excess, expected, tolerance)
        .note(format!("joint kl = {joint:.12}, split kl = {split:.12}")))
}

/// The entropy decomposition of `KL(q || p_b)`, the bound for every constant
/// `Q`, and its tightness when `Q` is the pointwise responsibility. Returns
/// the three reports in that order.
pub fn verify_jensen_bound(q: &GridDensity, mix: &GaussianMixture1D, q_choices: &[Vec<f64>]) -> Result<Vec<VerificationReport>> {
    if (q.mass() - 1.0).abs() > 1e-6 {
        return invalid(format!("jensen bound: q must be normalized, mass {}", q.mass()));
    }
    let k = mix.len();
    for (n, choice) in q_choices.iter().enumerate() {
        let sum: f64 = choice.iter().sum();
        if choice.len() != k || choice.iter().any(|v| !(*v > 0.0 && *v <= 1.0)) || (sum - 1.0).abs() > 1e-9 {
            return invalid(format!("jensen bound: Q choice {} is not a positive distribution over {k} components", n + 1));
        }
    }
    let (lo, hi) = q.bounds();
    let p = GridDensity::new(lo, hi, q.points().map(|b| mix.log_density(b).exp()).collect())?;
    let kl = kl_quadrature(q, &p)?;
    let cross = -q.expect(|b| mix.log_density(b));
    let neg_entropy = -entropy_quadrature(q)?;
    let decomposition = VerificationReport::two_sided("jensen_decomposition", kl, neg_entropy + cross, 1e-8);

    let bound_at = |qk: &dyn Fn(f64) -> Vec<f64>| {
        q.expect(|b| {
            let logs = mix.log_joint_all(b);
            qk(b).iter().zip(&logs).map(|(w, lj)| w * (w.ln() - lj)).sum()
        })
    };
    let mut worst: Option<(f64, f64)> = None;
    for choice in q_choices {
        let rhs = bound_at(&|_| choice.clone());
        if worst.is_none_or(|(g, _)| rhs - cross < g) {
            worst = Some((rhs - cross, rhs));
        }
    }
    let bound = match worst {
        Some((gap, rhs)) => VerificationReport::with_gap("jensen_constant_q", rhs, cross, gap, 1e-10, Sidedness::Lower)
            .note(format!("minimum over {} choices", q_choices.len())),
        None => VerificationReport::lower("jensen_constant_q", cross, cross, 1e-10).note("no Q choices supplied"),
    };
    let tight_rhs = bound_at(&|b| responsibility(b, mix));
    let tight = VerificationReport::two_sided("jensen_tightness", tight_rhs, cross, 1e-8);
    Ok(vec![decomposition, bound, tight])
}

/// `n` random distributions over `k` components, every entry positive.
pub(crate) fn random_simplex<R: Rng + ?Sized>(rng: &mut R, k: usize, n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

pub(super) fn default_kl_chain_checks(seed: u64) -> Result<Vec<VerificationReport>> {
    let mut rng = substream_indexed(seed, "kl_chain_specs", 0);
    let mut specs = vec![
        KlChainSpec { m_b: 0.3, s_b: 0.8, alpha: 0.0, c: 0.1, s_a: 0.6 },
        KlChainSpec { m_b: 0.3, s_b: 0.8, alpha: 0.7, c: 0.1, s_a: 0.6 },
        KlChainSpec { m_b: -0.4, s_b: 1.1, alpha: -0.7, c: -0.2, s_a: 0.9 },
    ];
    while specs.len() < 10 {
        specs.push(KlChainSpec {
            m_b: rng.gen_range(-1.0..1.0),
            s_b: rng.gen_range(0.3..1.5),
            alpha: rng.gen_range(-1.5..1.5),
            c: rng.gen_range(-1.0..1.0),
            s_a: rng.gen_range(0.3..1.5),
        });
    }
    let mut out = Vec::new();
    for (i, s) in specs.iter().enumerate() {
        let mut r = verify_kl_chain(s, PriorSpec::Factorized, KlMethod::Quadrature, Execution::Sequential)?;
        r.name = format!("kl_chain[alpha {:.2}, case {i}]", s.alpha);
        out.push(r);
    }
    let broken = verify_kl_chain(&specs[1], PriorSpec::Correlated(0.6), KlMethod::Quadrature, Execution::Sequential)?;
    out.push(
        VerificationReport::with_gap(
            "kl_chain_correlated_prior_breaks",
            broken.gap.abs(),
            1e-3,
            broken.gap.abs() - 1e-3,
            0.0,
            Sidedness::Lower,
        )
        .note("a correlated prior must open a decomposition gap above 1e-3"),
    );
    Ok(out)
}

pub(super) fn default_pairwise_checks(_seed: u64) -> Result<Vec<VerificationReport>> {
    let qi = DiagonalGaussian::new(vec![0.4], vec![-0.3])?;
    let qj = DiagonalGaussian::new(vec![-0.2], vec![0.2])?;
    let mut out = Vec::new();
    for rho in [0.0, 0.5, -0.5, 0.9] {
        let mut r = verify_pairwise_marginal(&qi, &qj, rho, Execution::Sequential)?;
        r.name = format!("pairwise_marginal[rho {rho}]");
        out.push(r);
    }
    Ok(out)
}

pub(super) fn default_jensen_checks(seed: u64) -> Result<Vec<VerificationReport>> {
    let mix = GaussianMixture1D::new(vec![0.2, 0.5, 0.3], vec![-2.0, 0.0, 1.5], vec![0.6, 0.8, 0.5])?;
    let (lo, hi) = default_bounds(&[-2.0, 1.5, 0.3], &[0.9]);
    let q = GridDensity::from_fn(lo, hi, 4001, |b| (log_rbf(b, 0.3, 0.9)).exp())?;
    let mut rng = substream_indexed(seed, "jensen_q", 0);
    let choices = random_simplex(&mut rng, 3, 100);
    let mut out = verify_jensen_bound(&q, &mix, &choices)?;
    let single = GaussianMixture1D::new(vec![1.0], vec![0.5], vec![1.2])?;
    for mut r in verify_jensen_bound(&q, &single, &[vec![1.0]])? {
        r.name = format!("{}[k 1]", r.name);
        if r.name.starts_with("jensen_constant_q") {
            r.sidedness = Sidedness::TwoSided;
            r.tolerance = 1e-8;
            r.pass = r.gap.abs() <= r.tolerance;
        }
        out.push(r);
    }
    Ok(out)
}
