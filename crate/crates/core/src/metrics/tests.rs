use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::data::{window_split, TimeSeriesFrame, WindowSpec};
use crate::model::{LatentSpec, NetworkConfig};
use crate::rng::substream_indexed;

#[test]
fn rrse_examples() {
    let t = [0.5, -1.0, 2.0, 3.5];
    assert_eq!(rrse(&t, &t).unwrap(), 0.0);
    let m = t.iter().sum::<f64>() / 4.0;
    assert!((rrse(&[m; 4], &t).unwrap() - 1.0).abs() < 1e-12);
    assert!((rrse(&[0.0, 0.0], &[1.0, -1.0]).unwrap() - 1.0).abs() < 1e-12);
    let err = rrse(&[1.0, 2.0], &[3.0, 3.0]).unwrap_err().to_string();
    assert!(err.contains("denominator"), "{err}");
    assert!(rrse(&[1.0], &[1.0, 2.0]).is_err());
}

proptest! {
    #[test]
    fn rrse_is_affine_covariant(seed in 0u64..10_000, alpha in prop_oneof![-5.0..-0.1f64, 0.1..5.0f64], beta in -10.0..10.0f64) {
        let mut rng = substream_indexed(seed, "rrse", 0);
        let p: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let t: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let pa: Vec<f64> = p.iter().map(|v| alpha * v + beta).collect();
        let ta: Vec<f64> = t.iter().map(|v| alpha * v + beta).collect();
        prop_assert!((rrse(&pa, &ta).unwrap() - rrse(&p, &t).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn equal_frequency_bins_respect_ties() {
    let b = equal_frequency_bins(&[3.0, 1.0, 1.0, 2.0, 5.0, 1.0], 3);
    assert_eq!(b, vec![2, 0, 0, 1, 2, 0]);
    let b = equal_frequency_bins(&[0.4, 0.1, 0.3, 0.2], 2);
    assert_eq!(b, vec![1, 0, 1, 0]);
}

/// Exhaustive MI over all (latent value, class) pairs.
fn brute_mi(z: &[i64], v: &[usize]) -> f64 {
    let n = z.len() as f64;
    let mut zs: Vec<i64> = z.to_vec();
    zs.sort();
    zs.dedup();
    let mut vs: Vec<usize> = v.to_vec();
    vs.sort();
    vs.dedup();
    let mut mi = 0.0;
    for &a in &zs {
        for &b in &vs {
            let joint = z.iter().zip(v).filter(|(x, y)| **x == a && **y == b).count() as f64;
            if joint == 0.0 {
                continue;
            }
            let pa = z.iter().filter(|x| **x == a).count() as f64;
            let pb = v.iter().filter(|y| **y == b).count() as f64;
            mi += joint / n * (joint * n / (pa * pb)).ln();
        }
    }
    mi
}

fn brute_mig(z: &[Vec<i64>], factors: &[Vec<usize>]) -> f64 {
    let mut total = 0.0;
    for v in factors {
        let n = v.len() as f64;
        let mut h = 0.0;
        for c in 1..=v.iter().copied().max().unwrap() {
            let p = v.iter().filter(|&&y| y == c).count() as f64 / n;
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
        let mut mi: Vec<f64> = z.iter().map(|col| brute_mi(col, v)).collect();
        mi.sort_by(|a, b| b.total_cmp(a));
        let second = if mi.len() > 1 { mi[1] } else { 0.0 };
        total += ((mi[0] - second) / h).clamp(0.0, 1.0);
    }
    total / factors.len() as f64
}

fn to_rows(z: &[Vec<i64>]) -> Vec<f64> {
    let n = z[0].len();
    (0..n).flat_map(|r| z.iter().map(move |c| c[r] as f64)).collect()
}

#[test]
fn small_discrete_case_matches_brute_force() {
    let v = vec![1, 1, 2, 2, 1, 2, 1, 1, 2, 2, 1, 2];
    let z = vec![vec![0, 0, 1, 1, 0, 1, 1, 0, 1, 0, 0, 1], vec![3, 1, 2, 3, 1, 2, 2, 3, 1, 1, 2, 3]];
    let got = mig(&to_rows(&z), 2, std::slice::from_ref(&v), 20).unwrap();
    assert!((got - brute_mig(&z, &[v])).abs() < 1e-9);
}

proptest! {
    #[test]
    fn mig_matches_brute_force_on_small_instances(seed in 0u64..100_000, n in 4usize..=20, d in 1usize..=3, nf in 1usize..=2) {
        let mut rng = substream_indexed(seed, "mig", 0);
        let z: Vec<Vec<i64>> = (0..d).map(|_| (0..n).map(|_| rng.gen_range(0..4)).collect()).collect();
        let mut factors: Vec<Vec<usize>> = (0..nf).map(|_| (0..n).map(|_| rng.gen_range(1..=3)).collect()).collect();
        for f in &mut factors {
            f[0] = 1;
            f[1] = 2;
        }
        let got = mig(&to_rows(&z), d, &factors, 20).unwrap();
        prop_assert!((got - brute_mig(&z, &factors)).abs() < 1e-9);
    }
}

#[test]
fn copied_factor_has_near_unit_gap() {
    let mut rng = substream_indexed(1, "copy", 0);
    let n = 10_000;
    let v: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=4)).collect();
    let latents: Vec<f64> = v.iter().flat_map(|&c| [c as f64, rng.gen_range(0.0..1.0)]).collect();
    let got = mig(&latents, 2, &[v], 20).unwrap();
    assert!(got >= 0.9, "{got}");
}

#[test]
fn duplicated_factor_has_zero_gap() {
    let v: Vec<usize> = (0..200).map(|i| i % 3 + 1).collect();
    let latents: Vec<f64> = v.iter().flat_map(|&c| [c as f64, c as f64]).collect();
    assert_eq!(mig(&latents, 2, &[v], 20).unwrap(), 0.0);
}

#[test]
fn single_class_factor_is_rejected() {
    assert!(mig(&[0.1, 0.2, 0.3], 1, &[vec![1, 1, 1]], 20).is_err());
}

fn run(variant: &str, seed: u64, r: f64) -> RunResult {
    RunResult {
        variant: variant.into(),
        seed,
        rrse_recon: r,
        rrse_forecast: 2.0 * r,
        mig: None,
        train_curve: Vec::new(),
        val_curve: Vec::new(),
    }
}

#[test]
fn aggregate_examples() {
    let rows = aggregate(&[run("a", 0, 0.7), run("a", 1, 0.7)]).unwrap();
    assert_eq!(rows[0].rrse_recon.std, Some(0.0));
    let rows = aggregate(&[run("a", 0, 1.0), run("a", 1, 3.0), run("b", 0, 5.0)]).unwrap();
    assert_eq!(rows[0].rrse_recon, Summary { mean: 2.0, std: Some(1.0) });
    assert_eq!(rows[1].rrse_recon, Summary { mean: 5.0, std: None });
    assert!(rows[0].mig.is_none());
    assert!(aggregate(&[]).is_err());
    let text = format_table(&rows);
    assert!(text.contains("2.0000 ± 1.0000") && text.lines().count() == 3, "{text}");
}

#[test]
fn aggregate_is_permutation_invariant() {
    let mut runs: Vec<RunResult> = (0..6).map(|s| run(if s % 2 == 0 { "x" } else { "y" }, s, s as f64 * 0.37)).collect();
    runs[3].mig = Some(0.2);
    let a = aggregate(&runs).unwrap();
    runs.reverse();
    let b = aggregate(&runs).unwrap();
    for (ra, rb) in a.iter().zip(&b) {
        assert!((ra.rrse_recon.mean - rb.rrse_recon.mean).abs() < 1e-12);
        assert!((ra.rrse_recon.std.unwrap() - rb.rrse_recon.std.unwrap()).abs() < 1e-12);
        assert_eq!(ra.mig, rb.mig);
    }
}

fn windows(l: usize, n2: usize) -> WindowSet {
    let t = 40;
    let mut rng = substream_indexed(0, "frame", 0);
    let frame = TimeSeriesFrame {
        timestamps: (0..t as i64).collect(),
        channels: (0..l).map(|_| (0..t).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
        labels: (0..n2).map(|_| (0..t).map(|s| s % 2 + 1).collect()).collect(),
        classes: vec![2; n2],
    };
    let spec = WindowSpec { lookback: 4, horizon: 1, ratios: [1.0, 0.0, 0.0], ..WindowSpec::default() };
    window_split(&frame, &spec).unwrap().train
}

fn net() -> NetworkConfig {
    NetworkConfig { encoder_widths: vec![5], decoder_widths: vec![5], lookback: 4, h: 4, ..NetworkConfig::default() }
}

#[test]
fn export_without_conditional_dims_has_zero_aggregate() {
    let spec = LatentSpec { l: 1, n1: 0, n2: 2, classes: vec![2, 2] };
    let m = DeepDive::new(spec, net(), 0).unwrap();
    let set = windows(1, 2);
    let table = export_latent(&m, &set, 7).unwrap();
    assert!(table.y_agg.iter().all(|&v| v == 0.0));
    // l = 1 with unit weight: x_i is the raw embedding.
    let code = m.encode(&set.batch(&[0, 1, 2]).unwrap().x).unwrap();
    for i in 0..2 {
        assert_eq!(&table.x[i][..3], code.b[i].data());
    }
    let mut buf = Vec::new();
    table.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let header = text.lines().next().unwrap();
    assert_eq!(header, "y_agg,x_1,x_2,label_1,label_2");
    assert_eq!(text.lines().count(), set.len() + 1);
    assert!(text.lines().all(|l| l.split(',').count() == 5));
}

#[test]
fn export_aggregates_conditional_means() {
    let spec = LatentSpec { l: 2, n1: 3, n2: 1, classes: vec![2] };
    let m = DeepDive::new(spec, net(), 1).unwrap();
    let set = windows(2, 1);
    let table = export_latent(&m, &set, 64).unwrap();
    let code = m.encode(&set.batch(&[5]).unwrap().x).unwrap();
    let sum: f64 = code.mu_a.unwrap().data().iter().sum();
    assert!((table.y_agg[5] - sum).abs() < 1e-12);
    let (mat, d) = table.mig_matrix();
    assert_eq!(d, 4);
    assert_eq!(mat.len(), set.len() * 4);
}
