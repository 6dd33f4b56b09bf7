use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use super::*;
use crate::distributions::{log_rbf, DiagonalGaussian, GaussianMixture1D, GridDensity, HALF_LN_2PI};
use crate::rng::substream_indexed;

fn scalar_toy() -> LinearGaussianToy {
    LinearGaussianToy {
        w: DMatrix::from_row_slice(2, 1, &[0.8, -0.5]),
        v: DMatrix::from_row_slice(1, 1, &[1.2]),
        u: DMatrix::from_row_slice(1, 2, &[0.3, 0.1]),
        sigma_obs: 0.7,
        a: DMatrix::from_row_slice(1, 2, &[0.2, 0.1]),
        c: DVector::from_vec(vec![0.4]),
        s: DVector::from_vec(vec![0.9]),
        x: DVector::from_vec(vec![0.5, -0.3]),
        y: DVector::from_vec(vec![0.9]),
    }
}

/// `log int p(x | z) p(y | x, z) p(z) dz` by trapezoid quadrature over a scalar latent.
fn evidence_by_quadrature(t: &LinearGaussianToy) -> f64 {
    let n = 20_001;
    let (lo, hi) = (-12.0, 12.0);
    let h = (hi - lo) / (n - 1) as f64;
    let mut total = 0.0;
    for i in 0..n {
        let z = lo + h * i as f64;
        let mut lp = log_rbf(z, 0.0, 1.0);
        for r in 0..t.x.len() {
            lp += log_rbf(t.x[r], t.w[(r, 0)] * z, t.sigma_obs);
        }
        for r in 0..t.y.len() {
            let ux: f64 = (0..t.x.len()).map(|c| t.u[(r, c)] * t.x[c]).sum();
            lp += log_rbf(t.y[r], t.v[(r, 0)] * z + ux, t.sigma_obs);
        }
        let wgt = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
        total += wgt * h * lp.exp();
    }
    total.ln()
}

#[test]
fn closed_form_evidence_matches_quadrature() {
    let t = scalar_toy();
    assert!((t.log_evidence().unwrap() - evidence_by_quadrature(&t)).abs() < 1e-10);
}

#[test]
fn exact_posterior_encoder_closes_the_gap() {
    let t = scalar_toy().with_posterior_encoder().unwrap();
    let [identity, bound] = verify_elbo_identity(&t, 20_000, 1, Execution::Sequential).unwrap();
    assert!(identity.pass && bound.pass);
    let log_p = t.log_evidence().unwrap();
    // With q equal to the posterior every ELBO sample equals log p(x, y).
    assert!((bound.lhs - log_p).abs() < 1e-9, "{bound:?}");
}

#[test]
fn random_toys_satisfy_the_identity() {
    for i in 0..3 {
        let mut rng = substream_indexed(7, "toy", i);
        let t = LinearGaussianToy::random(&mut rng, 3, 2, 2);
        let [identity, bound] = verify_elbo_identity(&t, 50_000, i, Execution::Sequential).unwrap();
        assert!(identity.pass, "{identity:?}");
        assert!(bound.pass, "{bound:?}");
    }
}

#[test]
fn mismatched_encoder_leaves_slack() {
    let mut t = scalar_toy().with_posterior_encoder().unwrap();
    t.c[0] += 1.5;
    let [_, bound] = verify_elbo_identity(&t, 20_000, 2, Execution::Sequential).unwrap();
    let se = bound.mc_std_error.unwrap();
    assert!(bound.gap >= 5.0 * se, "{bound:?}");
}

#[test]
fn elbo_estimates_do_not_depend_on_execution() {
    let t = scalar_toy();
    let a = verify_elbo_identity(&t, 10_000, 3, Execution::Sequential).unwrap();
    let b = verify_elbo_identity(&t, 10_000, 3, Execution::Parallel).unwrap();
    assert_eq!(a, b);
}

#[test]
fn elbo_rejects_bad_inputs() {
    let t = scalar_toy();
    assert!(verify_elbo_identity(&t, 9_999, 0, Execution::Sequential).is_err());
    let mut bad = t.clone();
    bad.sigma_obs = 0.0;
    assert!(bad.log_evidence().is_err());
    bad = t;
    bad.s[0] = -1.0;
    assert!(verify_elbo_identity(&bad, 10_000, 0, Execution::Sequential).is_err());
}

/// Closed-form KL of the joint Gaussian q(a, b) against N(0, I).
fn joint_kl_oracle(q: &KlChainSpec) -> f64 {
    let mean = [q.alpha * q.m_b + q.c, q.m_b];
    let vb = q.s_b * q.s_b;
    let cov = [[q.alpha * q.alpha * vb + q.s_a * q.s_a, q.alpha * vb], [q.alpha * vb, vb]];
    let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
    0.5 * (cov[0][0] + cov[1][1] + mean[0] * mean[0] + mean[1] * mean[1] - 2.0 - det.ln())
}

#[test]
fn kl_chain_examples() {
    let base = KlChainSpec { m_b: 0.3, s_b: 0.8, alpha: 0.0, c: 0.1, s_a: 0.6 };
    let r = verify_kl_chain(&base, PriorSpec::Factorized, KlMethod::Quadrature, Execution::Sequential).unwrap();
    assert!(r.gap.abs() < 1e-8 && r.pass);
    let tilted = KlChainSpec { alpha: 0.7, ..base };
    let r = verify_kl_chain(&tilted, PriorSpec::Factorized, KlMethod::Quadrature, Execution::Sequential).unwrap();
    assert!(r.gap.abs() < 1e-6 && r.pass);
    assert!((r.lhs - joint_kl_oracle(&tilted)).abs() < 1e-9);
    let broken = verify_kl_chain(&tilted, PriorSpec::Correlated(0.6), KlMethod::Quadrature, Execution::Sequential).unwrap();
    assert!(broken.gap.abs() > 1e-3 && !broken.pass);
    assert!(verify_kl_chain(&tilted, PriorSpec::Correlated(1.0), KlMethod::Quadrature, Execution::Sequential).is_err());
}

#[test]
fn kl_chain_monte_carlo_agrees() {
    let q = KlChainSpec { m_b: -0.2, s_b: 1.1, alpha: -0.7, c: 0.3, s_a: 0.5 };
    let r = verify_kl_chain(&q, PriorSpec::Factorized, KlMethod::MonteCarlo { samples: 50_000, seed: 4 }, Execution::Sequential).unwrap();
    assert!(r.pass, "{r:?}");
    assert!((r.lhs - joint_kl_oracle(&q)).abs() < 5.0 * r.mc_std_error.unwrap().max(0.01));
}

#[test]
fn pairwise_examples() {
    let qi = DiagonalGaussian::new(vec![0.1], vec![0.0]).unwrap();
    let qj = DiagonalGaussian::new(vec![-0.6], vec![-0.5]).unwrap();
    let r = verify_pairwise_marginal(&qi, &qj, 0.0, Execution::Sequential).unwrap();
    assert!(r.gap.abs() < 1e-10 && r.pass);
    let r = verify_pairwise_marginal(&qi, &qj, 0.5, Execution::Sequential).unwrap();
    assert!((r.lhs - 0.143_841_036_2).abs() < 1e-5 && r.pass, "{r:?}");
    assert!(verify_pairwise_marginal(&qi, &qj, 1.0, Execution::Sequential).is_err());
    assert!(verify_pairwise_marginal(&qi, &qj, -1.2, Execution::Sequential).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn pairwise_split_never_overestimates(rho in -0.95..0.95f64, m in -1.0..1.0f64, ls in -0.5..0.5f64) {
        let qi = DiagonalGaussian::new(vec![m], vec![ls]).unwrap();
        let qj = DiagonalGaussian::new(vec![-m], vec![0.3]).unwrap();
        let r = verify_pairwise_marginal(&qi, &qj, rho, Execution::Sequential).unwrap();
        prop_assert!(r.lhs >= -1e-10);
        prop_assert!(r.pass);
    }

    #[test]
    fn log_concavity_holds_everywhere(b in -5.0..5.0f64, tau in 0.05..5.0f64, n1 in -10.0..10.0f64, n2 in -10.0..10.0f64) {
        let r = verify_log_concavity(b, tau, &[(n1, n2)]).unwrap();
        prop_assert!(r.pass && r.gap >= 0.0);
    }
}

fn jensen_setup() -> (GridDensity, GaussianMixture1D) {
    let q = GridDensity::from_fn(-8.0, 8.0, 4001, |b| log_rbf(b, 0.4, 0.7).exp()).unwrap();
    let mix = GaussianMixture1D::new(vec![0.3, 0.3, 0.4], vec![-1.0, 0.5, 2.0], vec![0.5, 0.9, 0.6]).unwrap();
    (q, mix)
}

#[test]
fn jensen_bound_holds_for_constant_q_and_is_tight_at_responsibilities() {
    let (q, mix) = jensen_setup();
    let mut rng = substream_indexed(5, "q", 0);
    let choices = super::divergence::random_simplex(&mut rng, 3, 100);
    let reports = verify_jensen_bound(&q, &mix, &choices).unwrap();
    assert!(reports.iter().all(|r| r.pass), "{reports:?}");
    assert!(reports[1].gap >= -1e-10);
    assert!(reports[2].gap.abs() < 1e-8);
    // Independent oracle: the cross term by direct summation.
    let h = q.step();
    let direct: f64 = q
        .points()
        .zip(q.values())
        .enumerate()
        .map(|(i, (b, &v))| {
            let w = if i == 0 || i == q.len() - 1 { 0.5 * h } else { h };
            let p: f64 = (0..3).map(|k| mix.weights()[k] * log_rbf(b, mix.centroids()[k], mix.scales()[k]).exp()).sum();
            -w * v * p.ln()
        })
        .sum();
    assert!((reports[2].rhs - direct).abs() < 1e-10);
}

#[test]
fn single_component_bound_is_an_equality() {
    let (q, _) = jensen_setup();
    let mix = GaussianMixture1D::new(vec![1.0], vec![0.0], vec![1.3]).unwrap();
    let reports = verify_jensen_bound(&q, &mix, &[vec![1.0]]).unwrap();
    assert!(reports[1].gap.abs() < 1e-12);
}

#[test]
fn jensen_rejects_invalid_q() {
    let (q, mix) = jensen_setup();
    assert!(verify_jensen_bound(&q, &mix, &[vec![0.5, 0.5]]).is_err());
    assert!(verify_jensen_bound(&q, &mix, &[vec![0.0, 0.5, 0.5]]).is_err());
    assert!(verify_jensen_bound(&q, &mix, &[vec![0.3, 0.3, 0.3]]).is_err());
}

#[test]
fn concavity_examples() {
    let r = verify_log_concavity(0.3, 0.8, &[(1.2, 1.2)]).unwrap();
    assert!(r.gap.abs() < 1e-15);
    let r = verify_log_concavity(0.0, 1.0, &[(-1.0, 1.0)]).unwrap();
    assert!((r.lhs + HALF_LN_2PI).abs() < 1e-15);
    assert!((r.gap - 0.5).abs() < 1e-14);
}

#[test]
fn stationarity_gradients_agree_and_probe_increases() {
    let toy = CeToy::separated();
    let out = verify_ce_bound_stationarity(&toy, default_start(&toy)).unwrap();
    assert!(out.converged && out.ce_grad_norm < 1e-6);
    let agreement = &out.reports[1];
    assert!(agreement.pass, "{agreement:?}");
    assert!(out.bound_perturbed > out.bound_at_optimum);
}

#[test]
fn identical_classes_give_uniform_predictions() {
    let toy = CeToy { means: [0.0, 0.0], scales: [1.0, 1.0], ..CeToy::separated() };
    let start = [-1.0, 1.0, 1.0, 1.0, -0.5, 0.5, 0.3];
    let out = verify_ce_bound_stationarity(&toy, start).unwrap();
    assert!(out.converged, "{:?}", out.reports[0]);
    // Equal class priors: the log-odds must vanish wherever q has mass.
    let th = out.theta;
    for b in [-2.0, -1.0, 0.0, 1.0, 2.0] {
        let z = th[4] * log_rbf(b, th[0], th[2]).exp() + th[5] * log_rbf(b, th[1], th[3]).exp() + th[6];
        assert!(z.abs() < 1e-3, "log-odds {z} at {b}");
    }
}

#[test]
fn stationarity_rejects_bad_setups() {
    let toy = CeToy::separated();
    let mut start = default_start(&toy);
    start[2] = 0.0;
    assert!(verify_ce_bound_stationarity(&toy, start).is_err());
    let flat = CeToy { scales: [0.0, 1.0], ..toy };
    assert!(verify_ce_bound_stationarity(&flat, default_start(&CeToy::separated())).is_err());
}

#[test]
fn suite_is_deterministic_and_mode_independent() {
    let a = run_suite(3, Execution::Sequential).unwrap();
    let b = run_suite(3, Execution::Parallel).unwrap();
    assert_eq!(a, b);
    let names: Vec<&str> = a.iter().map(|r| r.name.as_str()).collect();
    for prefix in ["elbo_identity", "kl_chain", "pairwise_marginal", "jensen_tightness", "ce_convergence", "log_concavity"] {
        assert!(names.iter().any(|n| n.starts_with(prefix)), "missing {prefix}");
    }
    let json = serde_json::to_string(&a[0]).unwrap();
    let back: VerificationReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, a[0]);
}
