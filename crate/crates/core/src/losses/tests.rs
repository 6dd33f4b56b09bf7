use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::autodiff::{grad_check, Bound};
use crate::model::{DeepDive, LatentSpec, Mode, NetworkConfig};
use crate::rng::substream_indexed;

#[test]
fn mse_examples() {
    let a = Tensor::vector(&[0.5, -2.0, 3.0]);
    assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
    let b = Tensor::vector(&[1.5, -1.0, 4.0]);
    assert_eq!(mse_loss(&b, &a).unwrap(), 1.0);
    let p = Tensor::vector(&[0.0, 2.0]);
    let t = Tensor::vector(&[1.0, 0.0]);
    assert_eq!(mse_loss(&p, &t).unwrap(), 2.5);
    assert!(mse_loss(&p, &a).is_err());
}

#[test]
fn ce_examples() {
    assert_eq!(ce_loss(&[0.0, 1.0, 0.0], 2).unwrap(), 0.0);
    let u = 1.0 / 3.0;
    assert!((ce_loss(&[u, u, u], 3).unwrap() - 3f64.ln()).abs() < 1e-12);
    assert!((ce_loss(&[0.1, 0.9], 2).unwrap() - 0.105_360_5).abs() < 1e-7);
    assert!(ce_loss(&[0.1, 0.9], 0).is_err());
    assert!(ce_loss(&[0.1, 0.9], 3).is_err());
    assert!(ce_loss(&[0.2, 0.9], 1).is_err());
    assert_eq!(classifier_loss(&[0.1, 0.9], 2).unwrap(), ce_loss(&[0.1, 0.9], 2).unwrap());
    assert!((classifier_loss(&[u, u, u], 1).unwrap() - 3f64.ln()).abs() < 1e-12);
}

#[test]
fn ce_from_large_logits_is_stable() {
    let v = ce_from_logits(&[1000.0, 0.0], 2).unwrap();
    assert!((v - 1000.0).abs() < 1e-9);
}

#[test]
fn batch_ce_matches_rowwise() {
    let mut tape = Tape::new();
    let logits = vec![0.3, -1.0, 2.0, 0.0, 0.5, 0.1];
    let lv = tape.constant(Tensor::new(&[2, 3], logits.clone()).unwrap());
    let lp = tape.log_softmax(lv).unwrap();
    let ce = ce_var(&mut tape, lp, &[3, 1]).unwrap();
    let expect = (ce_from_logits(&logits[..3], 3).unwrap() + ce_from_logits(&logits[3..], 1).unwrap()) / 2.0;
    assert!((tape.value(ce).data()[0] - expect).abs() < 1e-14);
    assert!(ce_var(&mut tape, lp, &[4, 1]).is_err());
}

fn code(mu: &[f64], ls: &[f64]) -> LatentCode {
    LatentCode {
        mu_a: Some(Tensor::new(&[1, mu.len(), 1], mu.to_vec()).unwrap()),
        log_sigma_a: Some(Tensor::new(&[1, ls.len(), 1], ls.to_vec()).unwrap()),
        a_sample: None,
        b: Vec::new(),
    }
}

#[test]
fn kl_conditional_examples() {
    assert_eq!(kl_conditional(&code(&[0.0, 0.0], &[0.0, 0.0])), 0.0);
    assert!((kl_conditional(&code(&[1.0], &[0.0])) - 0.5).abs() < 1e-15);
    let empty = LatentCode {
        mu_a: None,
        log_sigma_a: None,
        a_sample: None,
        b: vec![Tensor::zeros(&[1, 1])],
    };
    assert_eq!(kl_conditional(&empty), 0.0);
}

fn spec(l: usize, n1: usize, classes: &[usize]) -> LatentSpec {
    LatentSpec {
        l,
        n1,
        n2: classes.len(),
        classes: classes.to_vec(),
    }
}

fn net() -> NetworkConfig {
    NetworkConfig {
        encoder_widths: vec![6],
        decoder_widths: vec![5],
        lookback: 4,
        horizon: 2,
        h: 4,
        ..NetworkConfig::default()
    }
}

fn labels(batch: usize, classes: &[usize], seed: u64) -> Vec<Vec<usize>> {
    let mut rng = substream_indexed(seed, "labels", 0);
    classes
        .iter()
        .map(|&k| (0..batch).map(|_| rng.gen_range(1..=k)).collect())
        .collect()
}

#[test]
fn perfect_prediction_with_prior_code_has_zero_loss() {
    let mut m = DeepDive::new(spec(2, 2, &[3]), net(), 1).unwrap();
    for (name, p) in m.params.iter_mut() {
        if name.starts_with("encoder.final.mu.")
            || name.starts_with("encoder.final.log_sigma.")
            || name.starts_with("decoder.recon.1.")
            || name.starts_with("decoder.forecast.1.")
        {
            p.value.data_mut().fill(0.0);
        }
    }
    let x = Tensor::zeros(&[3, 2, 4]);
    let y = Tensor::zeros(&[3, 2, 2]);
    let mut tape = Tape::new();
    let out = m.forward(&mut tape, &x, Mode::Main, &mut substream_indexed(0, "n", 0)).unwrap();
    let (_, lb) = main_loss(&mut tape, &out, &x, &y, &labels(3, &[3], 0)).unwrap();
    assert_eq!(lb.total, 0.0);
    assert_eq!(lb.kl_a, Some(0.0));
}

#[test]
fn main_loss_matches_recomputed_components() {
    for seed in 0..5 {
        let m = DeepDive::new(spec(2, 3, &[3, 2]), net(), seed).unwrap();
        let mut rng = substream_indexed(seed, "data", 0);
        let x = Tensor::randn(&[4, 2, 4], 1.0, &mut rng);
        let y = Tensor::randn(&[4, 2, 2], 1.0, &mut rng);
        let lab = labels(4, &[3, 2], seed);
        let mut tape = Tape::new();
        let out = m.forward(&mut tape, &x, Mode::Main, &mut substream_indexed(seed, "n", 0)).unwrap();
        let (total, lb) = main_loss(&mut tape, &out, &x, &y, &lab).unwrap();
        assert!(lb.is_finite());

        let xh = tape.value(out.x_hat.unwrap());
        let yh = tape.value(out.y_hat.unwrap());
        let mx: f64 = xh.data().iter().zip(x.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 32.0;
        let my: f64 = yh.data().iter().zip(y.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 16.0;
        let mu = tape.value(out.code.mu_a.unwrap()).data();
        let ls = tape.value(out.code.log_sigma_a.unwrap()).data();
        let kl: f64 = mu
            .iter()
            .zip(ls)
            .map(|(&m, &s)| 0.5 * (m * m + (2.0 * s).exp() - 1.0 - 2.0 * s))
            .sum::<f64>()
            / 4.0;
        assert!((lb.mse_x.unwrap() - mx).abs() < 1e-12);
        assert!((lb.mse_y.unwrap() - my).abs() < 1e-12);
        assert!((lb.kl_a.unwrap() - kl).abs() < 1e-12);
        assert!((lb.total - (mx + my + kl)).abs() < 1e-12);
        assert!((lb.total - lb.kl_a.unwrap() - (lb.mse_x.unwrap() + lb.mse_y.unwrap())).abs() < 1e-12);
        assert_eq!(tape.value(total).data()[0], lb.total);
        assert_eq!(lb.ce.len(), 2);
        assert!(lb.ce.iter().all(|&c| c >= 0.0));
    }
}

#[test]
fn classifier_pass_total_is_its_cross_entropy() {
    let m = DeepDive::new(spec(1, 1, &[3, 4]), net(), 2).unwrap();
    let x = Tensor::randn(&[5, 1, 4], 1.0, &mut substream_indexed(2, "data", 0));
    let lab = labels(5, &[3, 4], 2);
    let mut tape = Tape::new();
    let out = m
        .forward_with(&mut tape, &x, Mode::Classifier(2), &mut substream_indexed(2, "n", 0), false)
        .unwrap();
    let (_, lb) = classifier_pass_loss(&mut tape, &out, 2, &lab).unwrap();
    assert_eq!(lb.total, lb.ce[1]);
    assert!(lb.mse_x.is_none() && lb.kl_a.is_none());
    assert!(classifier_pass_loss(&mut tape, &out, 3, &lab).is_err());
    assert!(main_loss(&mut tape, &out, &x, &x, &lab).is_err());
}

#[test]
fn main_loss_gradient_matches_finite_differences() {
    let m = DeepDive::new(spec(2, 2, &[3, 2]), net(), 3).unwrap();
    let mut rng = substream_indexed(3, "data", 0);
    let x = Tensor::randn(&[1, 2, 4], 1.0, &mut rng);
    let y = Tensor::randn(&[1, 2, 2], 1.0, &mut rng);
    let lab = labels(1, &[3, 2], 3);
    let names: Vec<String> = m.params.names().map(str::to_string).collect();
    let point: Vec<Tensor> = names.iter().map(|n| m.params.value(n).unwrap().clone()).collect();
    let err = grad_check(
        |tape, vars| {
            let bound = Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()).collect());
            let out = m.forward_bound(tape, bound, &x, Mode::Main, &mut substream_indexed(9, "n", 0), true)?;
            Ok(main_loss(tape, &out, &x, &y, &lab)?.0)
        },
        &point,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn main_loss_is_permutation_invariant(seed in 0u64..1000, shift in 1usize..4) {
        let m = DeepDive::new(spec(1, 2, &[3]), net(), seed).unwrap();
        let mut rng = substream_indexed(seed, "data", 0);
        let x = Tensor::randn(&[4, 1, 4], 1.0, &mut rng);
        let y = Tensor::randn(&[4, 1, 2], 1.0, &mut rng);
        let lab = labels(4, &[3], seed);
        let roll = |t: &Tensor, row: usize| {
            let mut d = t.data().to_vec();
            d.rotate_left(shift * row);
            Tensor::new(t.shape(), d).unwrap()
        };
        let (xr, yr) = (roll(&x, 4), roll(&y, 2));
        let mut labr = lab.clone();
        labr[0].rotate_left(shift);
        let eval = |x: &Tensor, y: &Tensor, lab: &[Vec<usize>]| {
            let mut tape = Tape::new();
            let out = m.forward(&mut tape, x, Mode::Eval, &mut substream_indexed(0, "n", 0)).unwrap();
            main_loss(&mut tape, &out, x, y, lab).unwrap().1
        };
        let a = eval(&x, &y, &lab);
        let b = eval(&xr, &yr, &labr);
        prop_assert!((a.total - b.total).abs() < 1e-12);
        prop_assert!((a.ce[0] - b.ce[0]).abs() < 1e-12);
    }
}

fn mix3() -> GaussianMixture1D {
    GaussianMixture1D::new(vec![0.2, 0.5, 0.3], vec![-2.0, 0.0, 1.5], vec![0.7, 1.0, 0.4]).unwrap()
}

#[test]
fn kl_bound_single_component_collapses() {
    let mix = GaussianMixture1D::new(vec![1.0], vec![0.3], vec![0.8]).unwrap();
    let b = [0.1, -0.5, 1.2];
    let q = vec![vec![1.0]; 3];
    let got = kl_bound_rhs(&b, &q, &mix).unwrap();
    let expect = -b.iter().map(|&v| crate::distributions::log_rbf(v, 0.3, 0.8)).sum::<f64>() / 3.0;
    assert!((got - expect).abs() < 1e-14);
}

#[test]
fn kl_bound_is_tight_at_responsibilities() {
    let mix = mix3();
    let mut rng = substream_indexed(0, "b", 0);
    let b: Vec<f64> = (0..200).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let tight: Vec<Vec<f64>> = b.iter().map(|&v| crate::distributions::responsibility(v, &mix)).collect();
    let got = kl_bound_rhs(&b, &tight, &mix).unwrap();
    let expect = -b.iter().map(|&v| mix.log_density(v)).sum::<f64>() / b.len() as f64;
    assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");

    for trial in 0..20 {
        let mut r = substream_indexed(trial, "q", 0);
        let random: Vec<Vec<f64>> = b
            .iter()
            .map(|_| {
                let w: Vec<f64> = (0..3).map(|_| r.gen_range(0.01..1.0)).collect();
                let s: f64 = w.iter().sum();
                w.into_iter().map(|v| v / s).collect()
            })
            .collect();
        assert!(kl_bound_rhs(&b, &random, &mix).unwrap() >= got - 1e-10);
    }
    assert!(kl_bound_rhs(&b[..1], &[vec![0.5, 0.5, 0.1]], &mix).is_err());
    assert!(kl_bound_rhs(&b[..1], &[vec![0.5, 0.5]], &mix).is_err());
}

fn tc_breakdown(mu: Tensor, ls: Tensor, z: Tensor, dataset: usize) -> (f64, f64, f64) {
    let mut tape = Tape::new();
    let (zv, mv, lv) = (tape.constant(z), tape.constant(mu), tape.constant(ls));
    let t = tc_terms(&mut tape, zv, mv, lv, dataset).unwrap();
    let v = |x| tape.value(x).data()[0];
    (v(t.mi), v(t.tc), v(t.dim_kl))
}

#[test]
fn beta_one_recovers_analytic_kl() {
    let m = DeepDive::new(spec(1, 3, &[]), net(), 4).unwrap();
    let mut rng = substream_indexed(4, "data", 0);
    let x = Tensor::randn(&[512, 1, 4], 1.0, &mut rng);
    let y = Tensor::randn(&[512, 1, 2], 1.0, &mut rng);
    let mut tape = Tape::new();
    let out = m.forward(&mut tape, &x, Mode::Main, &mut substream_indexed(4, "n", 0)).unwrap();
    let (_, tcv) = beta_tcvae_loss(&mut tape, &out, &x, &y, 1.0, 512).unwrap();
    let mut tape2 = Tape::new();
    let out2 = m.forward(&mut tape2, &x, Mode::Main, &mut substream_indexed(4, "n", 0)).unwrap();
    let (_, main) = main_loss(&mut tape2, &out2, &x, &y, &[]).unwrap();
    assert!((tcv.total - main.total).abs() < 0.1, "{} vs {}", tcv.total, main.total);
    let parts = tcv.mse_x.unwrap() + tcv.mse_y.unwrap() + tcv.mi.unwrap() + tcv.tc.unwrap() + tcv.dim_kl.unwrap();
    assert!((tcv.total - parts).abs() < 1e-12);
}

#[test]
fn identical_sharp_codes_have_large_tc() {
    let (b, d) = (64, 3);
    let mu = Tensor::new(&[b, d], (0..b * d).map(|i| (i % d) as f64 * 0.3).collect()).unwrap();
    let ls = Tensor::full(&[b, d], -8.0);
    let (_, tc, _) = tc_breakdown(mu.clone(), ls, mu, 1000);
    assert!(tc > 5.0, "{tc}");
}

#[test]
fn single_dimension_has_no_total_correlation() {
    let mut rng = substream_indexed(5, "tc1", 0);
    let mu = Tensor::randn(&[128, 1], 1.0, &mut rng);
    let ls = Tensor::randn(&[128, 1], 0.2, &mut rng);
    let z = Tensor::randn(&[128, 1], 1.0, &mut rng);
    let (_, tc, _) = tc_breakdown(mu, ls, z, 128);
    assert!(tc.abs() < 1e-12, "{tc}");
}

#[test]
fn tc_estimator_needs_two_samples() {
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::zeros(&[1, 2]));
    assert!(tc_terms(&mut tape, v, v, v, 10).is_err());
}
