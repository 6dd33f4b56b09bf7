//! RRSE, the mutual information gap, run aggregation and latent export.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::WindowSet;
use crate::error::{invalid, Result};
use crate::model::DeepDive;

/// Smallest accepted RRSE denominator.
pub const RRSE_FLOOR: f64 = 1e-12;
pub const DEFAULT_MIG_BINS: usize = 20;

/// `sqrt(sum (p - t)^2 / sum (t - mean t)^2)` over all elements.
pub fn rrse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || target.is_empty() {
        return invalid(format!("rrse: {} predictions for {} targets", pred.len(), target.len()));
    }
    let mean = target.iter().sum::<f64>() / target.len() as f64;
    let den: f64 = target.iter().map(|t| (t - mean) * (t - mean)).sum();
    if !(den > RRSE_FLOOR) {
        return invalid("rrse: degenerate denominator, the target is constant");
    }
    let num: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((num / den).sqrt())
}

/// Equal-frequency bin index of every value. Equal values always share a bin
/// (each takes the bin of its first rank).
pub fn equal_frequency_bins(values: &[f64], bins: usize) -> Vec<usize> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0; n];
    let mut first = 0;
    for (rank, &i) in order.iter().enumerate() {
        if rank > 0 && values[i] != values[order[rank - 1]] {
            first = rank;
        }
        out[i] = first * bins / n.max(1);
    }
    out
}

fn counts<K: Ord + Copy>(keys: impl Iterator<Item = K>) -> BTreeMap<K, f64> {
    let mut m = BTreeMap::new();
    for k in keys {
        *m.entry(k).or_insert(0.0) += 1.0;
    }
    m
}

/// Plug-in entropy (nats) of a discrete sample.
pub fn discrete_entropy(a: &[usize]) -> f64 {
    let n = a.len() as f64;
    -counts(a.iter().copied()).values().map(|c| c / n * (c / n).ln()).sum::<f64>()
}

/// Plug-in mutual information (nats) between two discrete samples.
pub fn discrete_mi(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let ca = counts(a.iter().copied());
    let cb = counts(b.iter().copied());
    let cab = counts(a.iter().copied().zip(b.iter().copied()));
    cab.iter()
        .map(|(&(x, y), &c)| c / n * (c * n / (ca[&x] * cb[&y])).ln())
        .sum::<f64>()
        .max(0.0)
}

/// Mutual information gap of `latents` (`N x D`, row-major) against
/// `factors` (one column of `N` labels per factor).
pub fn mig(latents: &[f64], d: usize, factors: &[Vec<usize>], bins: usize) -> Result<f64> {
    if d == 0 || !latents.len().is_multiple_of(d) {
        return invalid("mig: latent matrix width does not divide its length");
    }
    let n = latents.len() / d;
    if n == 0 || factors.is_empty() || bins == 0 {
        return invalid("mig: need samples, factors and at least one bin");
    }
    let binned: Vec<Vec<usize>> = (0..d)
        .map(|j| {
            let col: Vec<f64> = (0..n).map(|r| latents[r * d + j]).collect();
            equal_frequency_bins(&col, bins)
        })
        .collect();
    let mut total = 0.0;
    for (k, v) in factors.iter().enumerate() {
        if v.len() != n {
            return invalid(format!("mig: factor {} has {} rows, expected {n}", k + 1, v.len()));
        }
        let h = discrete_entropy(v);
        if counts(v.iter().copied()).len() < 2 {
            return invalid(format!("mig: factor {} has a single observed class", k + 1));
        }
        let mut mi: Vec<f64> = binned.iter().map(|z| discrete_mi(z, v)).collect();
        mi.sort_by(|a, b| b.total_cmp(a));
        let second = mi.get(1).copied().unwrap_or(0.0);
        total += ((mi[0] - second) / h).clamp(0.0, 1.0);
    }
    Ok(total / factors.len() as f64)
}

/// Outcome of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub variant: String,
    pub seed: u64,
    pub rrse_recon: f64,
    pub rrse_forecast: f64,
    pub mig: Option<f64>,
    /// Epoch-mean main-pass loss, one entry per epoch.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub train_curve: Vec<f64>,
    /// Validation forecast RRSE, one entry per epoch.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub val_curve: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation; absent for a single run.
    pub std: Option<f64>,
}

impl Summary {
    fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.len() >= 2).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt());
        Some(Self { mean, std })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub variant: String,
    pub runs: usize,
    pub rrse_recon: Summary,
    pub rrse_forecast: Summary,
    pub mig: Option<Summary>,
}

/// Mean and population std per metric per variant, variants in name order.
pub fn aggregate(results: &[RunResult]) -> Result<Vec<AggregateRow>> {
    if results.is_empty() {
        return invalid("aggregate: no results");
    }
    let mut groups: BTreeMap<&str, Vec<&RunResult>> = BTreeMap::new();
    for r in results {
        groups.entry(&r.variant).or_default().push(r);
    }
    Ok(groups
        .into_iter()
        .map(|(variant, runs)| {
            let col = |f: &dyn Fn(&RunResult) -> Option<f64>| runs.iter().filter_map(|r| f(r)).collect::<Vec<_>>();
            AggregateRow {
                variant: variant.to_string(),
                runs: runs.len(),
                rrse_recon: Summary::of(&col(&|r| Some(r.rrse_recon))).expect("nonempty group"),
                rrse_forecast: Summary::of(&col(&|r| Some(r.rrse_forecast))).expect("nonempty group"),
                mig: Summary::of(&col(&|r| r.mig)),
            }
        })
        .collect())
}

/// Fixed-width text rendering of an aggregate table.
pub fn format_table(rows: &[AggregateRow]) -> String {
    let cell = |s: &Summary| match s.std {
        Some(sd) => format!("{:.4} ± {:.4}", s.mean, sd),
        None => format!("{:.4}", s.mean),
    };
    let mut out = format!("{:<18} {:>4} {:>20} {:>20} {:>20}\n", "variant", "runs", "rrse_recon", "rrse_forecast", "mig");
    for r in rows {
        let mig = r.mig.as_ref().map(cell).unwrap_or_else(|| "-".into());
        out.push_str(&format!(
            "{:<18} {:>4} {:>20} {:>20} {:>20}\n",
            r.variant,
            r.runs,
            cell(&r.rrse_recon),
            cell(&r.rrse_forecast),
            mig
        ));
    }
    out
}

/// Per-sample scalar summaries of the latent code with true labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTable {
    /// Sum of the conditional means over channels and dimensions.
    pub y_agg: Vec<f64>,
    /// `w_i . b_i` per marginal dimension, one column each.
    pub x: Vec<Vec<f64>>,
    pub labels: Vec<Vec<usize>>,
    /// Per conditional dimension, the sum over channels; one column each.
    pub conditional: Vec<Vec<f64>>,
}

impl LatentTable {
    /// `N x (n1 + n2)` matrix of conditional and marginal summaries, the
    /// latent input to [`mig`].
    pub fn mig_matrix(&self) -> (Vec<f64>, usize) {
        let cols: Vec<&Vec<f64>> = self.conditional.iter().chain(&self.x).collect();
        let n = self.y_agg.len();
        let d = cols.len();
        let mut m = Vec::with_capacity(n * d);
        for r in 0..n {
            m.extend(cols.iter().map(|c| c[r]));
        }
        (m, d)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let n2 = self.x.len();
        let mut header = vec!["y_agg".to_string()];
        header.extend((1..=n2).map(|i| format!("x_{i}")));
        header.extend((1..=self.labels.len()).map(|i| format!("label_{i}")));
        writeln!(out, "{}", header.join(","))?;
        for r in 0..self.y_agg.len() {
            let mut line = format!("{:?}", self.y_agg[r]);
            for c in &self.x {
                line.push_str(&format!(",{:?}", c[r]));
            }
            for c in &self.labels {
                line.push_str(&format!(",{}", c[r]));
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

/// Noise-free latent summaries for every sample of `set`.
pub fn export_latent(model: &DeepDive, set: &WindowSet, batch_size: usize) -> Result<LatentTable> {
    let (l, n1, n2) = (model.latent.l, model.latent.n1, model.latent.n2);
    let mut table = LatentTable {
        y_agg: Vec::with_capacity(set.len()),
        x: vec![Vec::with_capacity(set.len()); n2],
        labels: set.labels.clone(),
        conditional: vec![Vec::with_capacity(set.len()); n1],
    };
    let weights: Vec<Tensor> = (1..=n2)
        .map(|i| model.params.value(&format!("rbf.{i}.w")).cloned())
        .collect::<Result<_>>()?;
    for batch in set.batches(batch_size)? {
        let code = model.encode(&batch.x)?;
        let rows = batch.x.shape()[0];
        for r in 0..rows {
            let mut agg = 0.0;
            if let Some(mu) = &code.mu_a {
                let block = &mu.data()[r * l * n1..(r + 1) * l * n1];
                for (i, col) in table.conditional.iter_mut().enumerate() {
                    let s: f64 = (0..l).map(|j| block[j * n1 + i]).sum();
                    col.push(s);
                    agg += s;
                }
            }
            table.y_agg.push(agg);
            for (i, col) in table.x.iter_mut().enumerate() {
                let b = &code.b[i].data()[r * l..(r + 1) * l];
                col.push(b.iter().zip(weights[i].data()).map(|(b, w)| b * w).sum());
            }
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests;
