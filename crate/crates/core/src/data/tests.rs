use std::collections::HashMap;

use super::*;

/// Plug-in mutual information over joint counts divided by the smaller marginal entropy.
fn normalized_mi(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let mut ja: HashMap<usize, f64> = HashMap::new();
    let mut jb: HashMap<usize, f64> = HashMap::new();
    let mut jab: HashMap<(usize, usize), f64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *ja.entry(x).or_default() += 1.0;
        *jb.entry(y).or_default() += 1.0;
        *jab.entry((x, y)).or_default() += 1.0;
    }
    let h = |m: &HashMap<usize, f64>| -m.values().map(|c| c / n * (c / n).ln()).sum::<f64>();
    let mi: f64 = jab
        .iter()
        .map(|(&(x, y), &c)| c / n * ((c * n) / (ja[&x] * jb[&y])).ln())
        .sum();
    mi / h(&ja).min(h(&jb))
}

#[test]
fn electricity_labels_follow_the_clock() {
    let f = gen_electricity_like(3, 2000, 1).unwrap();
    f.validate().unwrap();
    for t in 0..1800 {
        assert_eq!(f.labels[0][t], f.labels[0][t + 24]);
        assert_eq!(f.labels[1][t], f.labels[1][t + 168]);
    }
    assert_eq!(f.classes, vec![24, 7, 12]);
}

#[test]
fn electricity_labels_are_nearly_independent() {
    for seed in 0..5 {
        let f = gen_electricity_like(2, 10_000, seed).unwrap();
        let nmi = normalized_mi(&f.labels[0], &f.labels[1]);
        assert!(nmi < 0.05, "seed {seed}: {nmi}");
    }
}

#[test]
fn generators_are_deterministic() {
    assert_eq!(gen_electricity_like(4, 1000, 3).unwrap(), gen_electricity_like(4, 1000, 3).unwrap());
    assert_ne!(gen_electricity_like(4, 1000, 3).unwrap(), gen_electricity_like(4, 1000, 4).unwrap());
    assert_eq!(gen_gait_like(4, 1000, 3).unwrap(), gen_gait_like(4, 1000, 3).unwrap());
}

#[test]
fn gait_labels_are_strongly_dependent() {
    for seed in 0..5 {
        let f = gen_gait_like(3, 10_000, seed).unwrap();
        f.validate().unwrap();
        let nmi = normalized_mi(&f.labels[0], &f.labels[1]);
        assert!(nmi > 0.3, "seed {seed}: {nmi}");
    }
}

#[test]
fn normal_gait_has_longer_strides() {
    let f = gen_gait_like(2, 12_000, 7).unwrap();
    let spec = WindowSpec { lookback: 48, horizon: 8, stride: 1, ratios: [1.0, 0.0, 0.0], ..WindowSpec::default() };
    let w = window_split(&f, &spec).unwrap().train;
    assert!(w.len() >= 10_000);
    let mean_bin = |r: usize| {
        let bins: Vec<f64> = (0..w.len()).filter(|&i| w.labels[0][i] == r).map(|i| w.labels[1][i] as f64).collect();
        bins.iter().sum::<f64>() / bins.len() as f64
    };
    assert!(mean_bin(1) > mean_bin(3));
}

#[test]
fn gait_labels_are_constant_within_segments() {
    let f = gen_gait_like(2, 5000, 2).unwrap();
    let mut run = 1;
    let mut runs = Vec::new();
    for t in 1..f.len() {
        let same = f.labels[0][t] == f.labels[0][t - 1] && f.labels[1][t] == f.labels[1][t - 1];
        if same {
            run += 1;
        } else {
            runs.push(run);
            run = 1;
        }
    }
    assert!(runs.iter().all(|&r| r >= 150), "{runs:?}");
}

fn ramp(t: usize) -> TimeSeriesFrame {
    TimeSeriesFrame {
        timestamps: (0..t as i64).collect(),
        channels: vec![(0..t).map(|v| v as f64).collect(), vec![2.0; t]],
        labels: vec![(0..t).map(|v| v % 3 + 1).collect()],
        classes: vec![3],
    }
}

#[test]
fn minimal_series_gives_one_window() {
    let spec = WindowSpec { lookback: 5, horizon: 2, stride: 1, ratios: [1.0, 0.0, 0.0], ..WindowSpec::default() };
    let s = window_split(&ramp(7), &spec).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (1, 0, 0));
    assert_eq!(s.train.x, vec![0.0, 1.0, 2.0, 3.0, 4.0, 2.0, 2.0, 2.0, 2.0, 2.0]);
    assert_eq!(s.train.y, vec![5.0, 6.0, 2.0, 2.0]);
    assert_eq!(s.train.labels[0], vec![2]);
    let err = window_split(&ramp(6), &spec).unwrap_err().to_string();
    assert!(err.contains('7'), "{err}");
}

#[test]
fn split_sizes_follow_ratios() {
    let spec = WindowSpec { lookback: 24, horizon: 1, ..WindowSpec::default() };
    let s = window_split(&ramp(500), &spec).unwrap();
    assert_eq!(s.segments, [0..300, 300..400, 400..500]);
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (276, 76, 76));
    let strided = WindowSpec { stride: 10, gap: 3, ..spec };
    let s = window_split(&ramp(500), &strided).unwrap();
    assert_eq!(s.train.len(), (300 - 28) / 10 + 1);
    assert_eq!(s.train.y[0], 27.0);
}

#[test]
fn splits_are_chronological_and_disjoint() {
    let spec = WindowSpec { lookback: 12, horizon: 3, gap: 2, stride: 2, ratios: [8.0, 1.0, 1.0] };
    let s = window_split(&gen_gait_like(2, 3000, 1).unwrap(), &spec).unwrap();
    let max_end = |w: &WindowSet| *w.ends.iter().max().unwrap();
    let min_start = |w: &WindowSet| *w.starts.iter().min().unwrap();
    assert!(max_end(&s.train) < min_start(&s.val));
    assert!(max_end(&s.val) < min_start(&s.test));
    for set in [&s.train, &s.val, &s.test] {
        for (i, &k) in [3, STRIDE_BINS].iter().enumerate() {
            assert!(set.labels[i].iter().all(|&j| (1..=k).contains(&j)));
        }
    }
}

#[test]
fn normalization_uses_train_statistics() {
    let spec = WindowSpec { lookback: 4, horizon: 1, ..WindowSpec::default() };
    let mut s = window_split(&ramp(100), &spec).unwrap();
    let raw = s.clone();
    let norm = normalize(&mut s).unwrap();
    assert!((norm.mean[0] - 29.5).abs() < 1e-12);
    assert_eq!(norm.std[1], STD_FLOOR);
    // The constant channel maps to zero everywhere.
    let w = 4;
    for (k, v) in s.test.x.iter().enumerate() {
        if (k / w) % 2 == 1 {
            assert_eq!(*v, 0.0);
        }
    }
    let z: Vec<f64> = s.train_series[0].iter().map(|v| (v - norm.mean[0]) / norm.std[0]).collect();
    let m = z.iter().sum::<f64>() / z.len() as f64;
    let sd = (z.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / z.len() as f64).sqrt();
    assert!(m.abs() < 1e-12 && (sd - 1.0).abs() < 1e-12);

    let mut back = s.test.clone();
    norm.invert(&mut back);
    for (a, b) in back.x.iter().zip(&raw.test.x).chain(back.y.iter().zip(&raw.test.y)) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn batches_gather_rows() {
    let spec = WindowSpec { lookback: 3, horizon: 1, ratios: [1.0, 0.0, 0.0], ..WindowSpec::default() };
    let s = window_split(&ramp(10), &spec).unwrap();
    let b = s.train.batch(&[4, 0]).unwrap();
    assert_eq!(b.x.shape(), &[2, 2, 3]);
    assert_eq!(&b.x.data()[..3], &[4.0, 5.0, 6.0]);
    assert_eq!(b.y.data(), &[7.0, 2.0, 3.0, 2.0]);
    assert_eq!(b.labels, vec![vec![1, 3]]);
    assert!(s.train.batch(&[99]).is_err());
    assert_eq!(s.train.batches(3).unwrap().len(), 3);
}

#[test]
fn csv_round_trip_and_errors() {
    let f = gen_gait_like(2, 300, 9).unwrap();
    let mut buf = Vec::new();
    f.write_csv(&mut buf).unwrap();
    let back = TimeSeriesFrame::read_csv(buf.as_slice(), Some(&f.classes)).unwrap();
    assert_eq!(back, f);

    let bad = "timestamp,ch_1,label_1\n0,1.0,1\n1,oops,2\n";
    match TimeSeriesFrame::read_csv(bad.as_bytes(), None) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
    let out_of_range = "timestamp,ch_1,label_1\n0,1.0,4\n";
    assert!(TimeSeriesFrame::read_csv(out_of_range.as_bytes(), Some(&[3])).is_err());
    assert!(TimeSeriesFrame::read_csv("time,ch_1\n".as_bytes(), None).is_err());
}
