//! Synthetic generators, CSV ingestion, chronological splits, sliding windows
//! and per-channel normalization.
//!
//! CSV schema: header `timestamp,ch_1..ch_l,label_1..label_n2`, integer
//! timestamps, float channels and 1-based integer labels.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::error::{invalid, Error, Result};
use crate::rng::substream;

/// Aligned multichannel series with per-row labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesFrame {
    pub timestamps: Vec<i64>,
    /// `l` series of equal length.
    pub channels: Vec<Vec<f64>>,
    /// `n2` label sequences aligned with the rows, 1-based.
    pub labels: Vec<Vec<usize>>,
    /// Class count per label column.
    pub classes: Vec<usize>,
}

impl TimeSeriesFrame {
    pub fn validate(&self) -> Result<()> {
        let t = self.timestamps.len();
        if self.channels.is_empty() {
            return invalid("frame: at least one channel is required");
        }
        if self.channels.iter().any(|c| c.len() != t) || self.labels.iter().any(|c| c.len() != t) {
            return invalid("frame: all columns must have the timestamp length");
        }
        if self.labels.len() != self.classes.len() {
            return invalid("frame: one class count per label column is required");
        }
        if self.channels.iter().flatten().any(|v| !v.is_finite()) {
            return invalid("frame: channels must be finite");
        }
        for (i, (col, &k)) in self.labels.iter().zip(&self.classes).enumerate() {
            if let Some(bad) = col.iter().find(|&&j| j == 0 || j > k) {
                return invalid(format!("frame: label_{} value {bad} outside 1..={k}", i + 1));
            }
        }
        if self.timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return invalid("frame: timestamps must be strictly increasing");
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let mut header = vec!["timestamp".to_string()];
        header.extend((1..=self.channels.len()).map(|c| format!("ch_{c}")));
        header.extend((1..=self.labels.len()).map(|i| format!("label_{i}")));
        writeln!(out, "{}", header.join(","))?;
        for r in 0..self.len() {
            let mut line = self.timestamps[r].to_string();
            for c in &self.channels {
                line.push(',');
                line.push_str(&format!("{:?}", c[r]));
            }
            for c in &self.labels {
                line.push(',');
                line.push_str(&c[r].to_string());
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    /// Parses the CSV schema. Class counts are the largest label seen per
    /// column unless `classes` is given, in which case labels are checked
    /// against it.
    pub fn read_csv<R: BufRead>(input: R, classes: Option<&[usize]>) -> Result<Self> {
        let mut lines = input.lines().enumerate();
        let Some((_, header)) = lines.next() else {
            return Err(Error::Parse { line: 1, msg: "empty file".into() });
        };
        let header = header?;
        let cols: Vec<&str> = header.trim().split(',').collect();
        if cols.first() != Some(&"timestamp") {
            return Err(Error::Parse { line: 1, msg: "first column must be `timestamp`".into() });
        }
        let l = cols[1..].iter().take_while(|c| c.starts_with("ch_")).count();
        let n2 = cols.len() - 1 - l;
        for (k, c) in cols[1..].iter().enumerate() {
            let expect = if k < l { format!("ch_{}", k + 1) } else { format!("label_{}", k - l + 1) };
            if *c != expect {
                return Err(Error::Parse { line: 1, msg: format!("expected column `{expect}`, found `{c}`") });
            }
        }
        let mut frame = TimeSeriesFrame {
            timestamps: Vec::new(),
            channels: vec![Vec::new(); l],
            labels: vec![Vec::new(); n2],
            classes: Vec::new(),
        };
        for (idx, line) in lines {
            let line = line?;
            let lineno = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != cols.len() {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected {} fields, found {}", cols.len(), fields.len()),
                });
            }
            let err = |msg: String| Error::Parse { line: lineno, msg };
            frame
                .timestamps
                .push(fields[0].parse().map_err(|e| err(format!("timestamp: {e}")))?);
            for c in 0..l {
                let v: f64 = fields[1 + c].parse().map_err(|e| err(format!("ch_{}: {e}", c + 1)))?;
                frame.channels[c].push(v);
            }
            for i in 0..n2 {
                let v: usize = fields[1 + l + i].parse().map_err(|e| err(format!("label_{}: {e}", i + 1)))?;
                frame.labels[i].push(v);
            }
        }
        frame.classes = match classes {
            Some(k) => k.to_vec(),
            None => frame.labels.iter().map(|c| c.iter().copied().max().unwrap_or(0)).collect(),
        };
        frame.validate()?;
        Ok(frame)
    }
}

/// Period in hours used for the month label of the electricity-like series.
pub const HOURS_PER_MONTH: i64 = 730;
/// Number of equal-width stride bins in the gait-like series.
pub const STRIDE_BINS: usize = 14;

/// Hourly load-like channels: per-channel daily, weekly and yearly sinusoids
/// plus AR(1) noise. Labels are hour of day (24), day of week (7) and month
/// (12), all derived from the timestamp.
pub fn gen_electricity_like(l: usize, t: usize, seed: u64) -> Result<TimeSeriesFrame> {
    if l == 0 || t < 2 * 168 {
        return invalid("electricity generator: need l >= 1 and T >= 336");
    }
    let mut rng = substream(seed, "gen/electricity");
    let noise = Normal::new(0.0, 0.25).expect("valid normal");
    let mut channels = Vec::with_capacity(l);
    for _ in 0..l {
        let amps = [rng.gen_range(0.8..1.5), rng.gen_range(0.3..0.8), rng.gen_range(0.2..0.6)];
        let phases = [rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI)];
        let periods = [24.0, 168.0, 8760.0];
        let level = rng.gen_range(-0.5..0.5);
        let mut ar = 0.0;
        let series = (0..t)
            .map(|s| {
                ar = 0.7 * ar + noise.sample(&mut rng);
                let seasonal: f64 = (0..3)
                    .map(|k| amps[k] * (2.0 * PI * s as f64 / periods[k] + phases[k]).sin())
                    .sum();
                level + seasonal + ar
            })
            .collect();
        channels.push(series);
    }
    let timestamps: Vec<i64> = (0..t as i64).collect();
    let hour = timestamps.iter().map(|&s| (s % 24) as usize + 1).collect();
    let day = timestamps.iter().map(|&s| ((s / 24) % 7) as usize + 1).collect();
    let month = timestamps.iter().map(|&s| ((s / HOURS_PER_MONTH) % 12) as usize + 1).collect();
    Ok(TimeSeriesFrame {
        timestamps,
        channels,
        labels: vec![hour, day, month],
        classes: vec![24, 7, 12],
    })
}

/// Regime-switching oscillators. Label 1 is the regime (1 = normal, 3 =
/// most impaired) and label 2 the stride length (amplitude times period)
/// binned into 14 equal-width bins; regime 1 strides are longest, so the
/// two labels are strongly dependent.
pub fn gen_gait_like(l: usize, t: usize, seed: u64) -> Result<TimeSeriesFrame> {
    if l == 0 || t < 100 {
        return invalid("gait generator: need l >= 1 and T >= 100");
    }
    let mut rng = substream(seed, "gen/gait");
    let noise = Normal::new(0.0, 0.1).expect("valid normal");
    let jitter = Normal::new(0.0, 1.0).expect("valid normal");
    let stride_mean = [9.0, 6.5, 4.0];
    let (lo, hi) = (1.0, 12.0);
    let phases: Vec<f64> = (0..l).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let gains: Vec<f64> = (0..l).map(|_| rng.gen_range(0.6..1.4)).collect();

    let mut channels = vec![Vec::with_capacity(t); l];
    let mut regime = Vec::with_capacity(t);
    let mut stride = Vec::with_capacity(t);
    let mut phase = 0.0;
    while regime.len() < t {
        let r = rng.gen_range(0..3usize);
        let seg = rng.gen_range(150..450usize).min(t - regime.len());
        let period = (8.0 + 2.0 * (2 - r) as f64 + 0.8 * jitter.sample(&mut rng)).max(4.0);
        let target = stride_mean[r] + 0.6 * jitter.sample(&mut rng);
        let amp = (target / period * 4.0).max(0.1);
        let product = amp * period / 4.0;
        let bin = (((product - lo) / (hi - lo) * STRIDE_BINS as f64).floor() as i64).clamp(0, STRIDE_BINS as i64 - 1);
        for _ in 0..seg {
            phase += 2.0 * PI / period;
            for c in 0..l {
                let v = gains[c] * amp * ((phase + phases[c]).sin() + 0.3 * (2.0 * (phase + phases[c])).sin())
                    + noise.sample(&mut rng);
                channels[c].push(v);
            }
            regime.push(r + 1);
            stride.push(bin as usize + 1);
        }
    }
    Ok(TimeSeriesFrame {
        timestamps: (0..t as i64).collect(),
        channels,
        labels: vec![regime, stride],
        classes: vec![3, STRIDE_BINS],
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowSpec {
    pub lookback: usize,
    pub horizon: usize,
    /// Steps between the end of the lookback and the start of the horizon.
    pub gap: usize,
    pub stride: usize,
    /// train : val : test
    pub ratios: [f64; 3],
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            lookback: 24,
            horizon: 1,
            gap: 0,
            stride: 1,
            ratios: [3.0, 1.0, 1.0],
        }
    }
}

impl WindowSpec {
    pub fn span(&self) -> usize {
        self.lookback + self.gap + self.horizon
    }

    pub fn validate(&self) -> Result<()> {
        if self.lookback == 0 || self.horizon == 0 || self.stride == 0 {
            return invalid("window: lookback, horizon and stride must be at least 1");
        }
        if self.ratios.iter().any(|r| !(*r >= 0.0)) || !(self.ratios.iter().sum::<f64>() > 0.0) {
            return invalid("window: split ratios must be nonnegative with a positive sum");
        }
        Ok(())
    }
}

/// Windowed samples stored contiguously.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WindowSet {
    pub l: usize,
    pub lookback: usize,
    pub horizon: usize,
    /// `(N, l, L)` row-major.
    pub x: Vec<f64>,
    /// `(N, l, H)` row-major.
    pub y: Vec<f64>,
    /// `n2` columns of `N` labels taken at the lookback end.
    pub labels: Vec<Vec<usize>>,
    /// Timestamp of the first lookback row of each sample.
    pub starts: Vec<i64>,
    /// Timestamp of the last lookback row of each sample.
    pub anchors: Vec<i64>,
    /// Timestamp of the last horizon row of each sample.
    pub ends: Vec<i64>,
}

/// A batch ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub y: Tensor,
    pub labels: Vec<Vec<usize>>,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> Result<Batch> {
        if idx.is_empty() {
            return invalid("batch: no samples selected");
        }
        let (sx, sy) = (self.l * self.lookback, self.l * self.horizon);
        let mut x = Vec::with_capacity(idx.len() * sx);
        let mut y = Vec::with_capacity(idx.len() * sy);
        for &i in idx {
            if i >= self.len() {
                return invalid(format!("batch: sample {i} out of range"));
            }
            x.extend_from_slice(&self.x[i * sx..(i + 1) * sx]);
            y.extend_from_slice(&self.y[i * sy..(i + 1) * sy]);
        }
        Ok(Batch {
            x: Tensor::new(&[idx.len(), self.l, self.lookback], x)?,
            y: Tensor::new(&[idx.len(), self.l, self.horizon], y)?,
            labels: self.labels.iter().map(|c| idx.iter().map(|&i| c[i]).collect()).collect(),
        })
    }

    /// All samples in order, chunked into batches of at most `size`.
    pub fn batches(&self, size: usize) -> Result<Vec<Batch>> {
        let all: Vec<usize> = (0..self.len()).collect();
        all.chunks(size.max(1)).map(|c| self.batch(c)).collect()
    }

    fn push(&mut self, frame: &TimeSeriesFrame, start: usize, spec: &WindowSpec) {
        let end_x = start + spec.lookback;
        let start_y = end_x + spec.gap;
        for c in &frame.channels {
            self.x.extend_from_slice(&c[start..end_x]);
        }
        for c in &frame.channels {
            self.y.extend_from_slice(&c[start_y..start_y + spec.horizon]);
        }
        for (col, src) in self.labels.iter_mut().zip(&frame.labels) {
            col.push(src[end_x - 1]);
        }
        self.starts.push(frame.timestamps[start]);
        self.anchors.push(frame.timestamps[end_x - 1]);
        self.ends.push(frame.timestamps[start_y + spec.horizon - 1]);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
    /// Row ranges of the three contiguous segments.
    pub segments: [std::ops::Range<usize>; 3],
    /// Raw channels of the train segment, the source of normalization statistics.
    pub train_series: Vec<Vec<f64>>,
}

/// Splits the frame chronologically by `spec.ratios`, then slides windows
/// inside each segment so no sample crosses a boundary.
pub fn window_split(frame: &TimeSeriesFrame, spec: &WindowSpec) -> Result<Splits> {
    spec.validate()?;
    frame.validate()?;
    let t = frame.len();
    if t < spec.span() {
        return invalid(format!(
            "window: series of length {t} is shorter than the minimum L + gap + H = {}",
            spec.span()
        ));
    }
    let total: f64 = spec.ratios.iter().sum();
    let n_train = ((t as f64) * spec.ratios[0] / total).round() as usize;
    let n_val = ((t as f64) * (spec.ratios[0] + spec.ratios[1]) / total).round() as usize - n_train;
    let segments = [0..n_train, n_train..n_train + n_val, n_train + n_val..t];
    let empty = WindowSet {
        l: frame.num_channels(),
        lookback: spec.lookback,
        horizon: spec.horizon,
        labels: vec![Vec::new(); frame.labels.len()],
        ..WindowSet::default()
    };
    let mut sets = [empty.clone(), empty.clone(), empty];
    for (set, seg) in sets.iter_mut().zip(&segments) {
        let mut start = seg.start;
        while start + spec.span() <= seg.end {
            set.push(frame, start, spec);
            start += spec.stride;
        }
    }
    let [train, val, test] = sets;
    Ok(Splits {
        train,
        val,
        test,
        train_series: frame.channels.iter().map(|c| c[segments[0].clone()].to_vec()).collect(),
        segments,
    })
}

pub const STD_FLOOR: f64 = 1e-8;

/// Per-channel z-score statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(series: &[Vec<f64>]) -> Result<Self> {
        if series.is_empty() || series.iter().any(|c| c.is_empty()) {
            return invalid("normalize: the train segment is empty");
        }
        let (mut mean, mut std) = (Vec::new(), Vec::new());
        for c in series {
            let n = c.len() as f64;
            let m = c.iter().sum::<f64>() / n;
            let v = c.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            mean.push(m);
            std.push(v.sqrt().max(STD_FLOOR));
        }
        Ok(Self { mean, std })
    }

    fn map(&self, values: &mut [f64], width: usize, f: impl Fn(f64, f64, f64) -> f64) {
        let l = self.mean.len();
        for (k, v) in values.iter_mut().enumerate() {
            let c = (k / width) % l;
            *v = f(*v, self.mean[c], self.std[c]);
        }
    }

    pub fn apply(&self, set: &mut WindowSet) {
        self.map(&mut set.x, set.lookback, |v, m, s| (v - m) / s);
        self.map(&mut set.y, set.horizon, |v, m, s| (v - m) / s);
    }

    pub fn invert(&self, set: &mut WindowSet) {
        self.map(&mut set.x, set.lookback, |v, m, s| v * s + m);
        self.map(&mut set.y, set.horizon, |v, m, s| v * s + m);
    }
}

/// Z-scores every split with statistics of the raw train segment.
pub fn normalize(splits: &mut Splits) -> Result<Normalizer> {
    if splits.train.is_empty() {
        return invalid("normalize: no train windows");
    }
    let norm = Normalizer::fit(&splits.train_series)?;
    for set in [&mut splits.train, &mut splits.val, &mut splits.test] {
        norm.apply(set);
    }
    Ok(norm)
}

#[cfg(test)]
mod tests;
