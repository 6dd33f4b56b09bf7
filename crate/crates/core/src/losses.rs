//! Loss terms for the main and classifier passes, the mixture-prior KL bound,
//! and the minibatch-weighted-sampling beta-TCVAE objective.

use serde::{Deserialize, Serialize};

use crate::autodiff::{logsumexp, Tape, Tensor, Var};
use crate::distributions::{kl_normal_std, GaussianMixture1D, HALF_LN_2PI};
use crate::error::{invalid, Error, Result};
use crate::model::{ForwardOutput, LatentCode};

/// Scalar loss components of one optimizer sub-step.
///
/// Fields a pass does not compute are `None`: classifier passes skip the
/// decoder, so their `mse_x`, `mse_y` and `kl_a` are absent. For the
/// beta-TCVAE objective `kl_a` is the analytic KL (reported only) and
/// `total = mse_x + mse_y + mi + beta * tc + dim_kl`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse_x: Option<f64>,
    pub mse_y: Option<f64>,
    pub kl_a: Option<f64>,
    pub ce: Vec<f64>,
    pub tc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dim_kl: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.mse_x, self.mse_y, self.kl_a, self.tc, self.mi, self.dim_kl]
            .iter()
            .flatten()
            .chain(&self.ce)
            .chain(std::iter::once(&self.total))
            .all(|v| v.is_finite())
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Shape {
            op,
            detail: format!("{a:?} vs {b:?}"),
        });
    }
    Ok(())
}

/// Mean of squared differences.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    same_shape("mse_loss", pred.shape(), target.shape())?;
    let n = pred.numel() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

pub fn mse_var(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    same_shape("mse_loss", tape.shape(pred), tape.shape(target))?;
    let d = tape.sub(pred, target)?;
    let d2 = tape.square(d)?;
    tape.mean(d2)
}

/// `-ln probs[j]` for a 1-based class `j`, evaluated as a log-softmax of
/// `ln probs`. A zero probability on the true class gives `+inf`.
pub fn ce_loss(probs: &[f64], j: usize) -> Result<f64> {
    if probs.iter().any(|&p| !(p >= 0.0) || p > 1.0) {
        return invalid("ce_loss: probabilities must lie in [0, 1]");
    }
    if (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return invalid("ce_loss: probabilities must sum to 1");
    }
    let logits: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
    ce_from_logits(&logits, j)
}

/// `logsumexp(logits) - logits[j]` for a 1-based class `j`.
pub fn ce_from_logits(logits: &[f64], j: usize) -> Result<f64> {
    if j == 0 || j > logits.len() {
        return invalid(format!("ce_loss: class {j} outside 1..={}", logits.len()));
    }
    Ok(logsumexp(logits) - logits[j - 1])
}

/// Same as [`ce_loss`].
pub fn classifier_loss(probs_i: &[f64], j_i: usize) -> Result<f64> {
    ce_loss(probs_i, j_i)
}

/// Batch-mean cross entropy from `(batch, K)` log-probabilities and 1-based labels.
pub fn ce_var(tape: &mut Tape, log_probs: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(log_probs).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Shape {
            op: "ce_loss",
            detail: format!("log-probs {shape:?} for {} labels", labels.len()),
        });
    }
    let k = shape[1];
    let mut onehot = vec![0.0; labels.len() * k];
    for (n, &j) in labels.iter().enumerate() {
        if j == 0 || j > k {
            return invalid(format!("ce_loss: class {j} outside 1..={k}"));
        }
        onehot[n * k + j - 1] = 1.0;
    }
    let mask = tape.constant(Tensor::new(&shape, onehot)?);
    let picked = tape.mul(log_probs, mask)?;
    let s = tape.sum(picked)?;
    tape.mul_scalar(s, -1.0 / labels.len() as f64)
}

/// Sum over conditional coordinates of KL(q(a|x) || N(0, 1)), averaged over the batch.
pub fn kl_conditional(code: &LatentCode) -> f64 {
    match (&code.mu_a, &code.log_sigma_a) {
        (Some(mu), Some(ls)) => {
            let batch = mu.shape()[0] as f64;
            mu.data()
                .iter()
                .zip(ls.data())
                .map(|(&m, &s)| kl_normal_std(m, s))
                .sum::<f64>()
                / batch
        }
        _ => 0.0,
    }
}

/// Tape version of [`kl_conditional`] on `(batch, D)` parameters.
pub fn kl_conditional_var(tape: &mut Tape, mu: Var, log_sigma: Var) -> Result<Var> {
    same_shape("kl_conditional", tape.shape(mu), tape.shape(log_sigma))?;
    let batch = tape.shape(mu)[0] as f64;
    let mu2 = tape.square(mu)?;
    let two_ls = tape.mul_scalar(log_sigma, 2.0)?;
    let var = tape.exp(two_ls)?;
    let t = tape.sub(var, two_ls)?;
    let t = tape.add(t, mu2)?;
    let t = tape.add_scalar(t, -1.0)?;
    let s = tape.sum(t)?;
    tape.mul_scalar(s, 0.5 / batch)
}

fn decoded(out: &ForwardOutput) -> Result<(Var, Var)> {
    match (out.x_hat, out.y_hat) {
        (Some(x), Some(y)) => Ok((x, y)),
        _ => invalid("loss needs a decoded forward pass"),
    }
}

fn ce_values(tape: &mut Tape, out: &ForwardOutput, labels: &[Vec<usize>]) -> Result<Vec<f64>> {
    if labels.len() != out.heads.len() {
        return invalid(format!(
            "{} label columns for {} classifier heads",
            labels.len(),
            out.heads.len()
        ));
    }
    out.heads
        .iter()
        .zip(labels)
        .map(|(hv, lab)| {
            let v = ce_var(tape, hv.log_probs, lab)?;
            Ok(tape.value(v).data()[0])
        })
        .collect()
}

/// `mse_x + mse_y + kl_a` for a main-mode pass. Cross entropies of every head
/// are reported but excluded from the total.
pub fn main_loss(
    tape: &mut Tape,
    out: &ForwardOutput,
    x: &Tensor,
    y: &Tensor,
    labels: &[Vec<usize>],
) -> Result<(Var, LossBreakdown)> {
    let (x_hat, y_hat) = decoded(out)?;
    let xt = tape.constant(x.clone());
    let yt = tape.constant(y.clone());
    let mse_x = mse_var(tape, x_hat, xt)?;
    let mse_y = mse_var(tape, y_hat, yt)?;
    let recon = tape.add(mse_x, mse_y)?;
    let (total, kl) = match (out.code.mu_a, out.code.log_sigma_a) {
        (Some(mu), Some(ls)) => {
            let kl = kl_conditional_var(tape, mu, ls)?;
            (tape.add(recon, kl)?, tape.value(kl).data()[0])
        }
        _ => (recon, 0.0),
    };
    let ce = ce_values(tape, out, labels)?;
    let breakdown = LossBreakdown {
        mse_x: Some(tape.value(mse_x).data()[0]),
        mse_y: Some(tape.value(mse_y).data()[0]),
        kl_a: Some(kl),
        ce,
        total: tape.value(total).data()[0],
        ..LossBreakdown::default()
    };
    Ok((total, breakdown))
}

/// `CE_i` for a classifier pass over label `i` (1-based).
pub fn classifier_pass_loss(
    tape: &mut Tape,
    out: &ForwardOutput,
    i: usize,
    labels: &[Vec<usize>],
) -> Result<(Var, LossBreakdown)> {
    if i == 0 || i > out.heads.len() {
        return invalid(format!("classifier index {i} out of range"));
    }
    let ce = ce_values(tape, out, labels)?;
    let total = ce_var(tape, out.heads[i - 1].log_probs, &labels[i - 1])?;
    let breakdown = LossBreakdown {
        ce,
        total: tape.value(total).data()[0],
        ..LossBreakdown::default()
    };
    Ok((total, breakdown))
}

/// Minibatch-weighted-sampling estimates of the three KL components.
#[derive(Clone, Copy, Debug)]
pub struct TcTerms {
    /// Index-code mutual information.
    pub mi: Var,
    /// Total correlation.
    pub tc: Var,
    /// Dimension-wise KL to the standard normal prior.
    pub dim_kl: Var,
}

/// Splits `E[log q(z|x) - log p(z)]` into index-code MI, total correlation
/// and dimension-wise KL. `z`, `mu` and `log_sigma` are `(batch, D)`; the
/// aggregate posterior is estimated as `logsumexp_m log q(z_n | x_m) - log(N B)`.
pub fn tc_terms(
    tape: &mut Tape,
    z: Var,
    mu: Var,
    log_sigma: Var,
    dataset_size: usize,
) -> Result<TcTerms> {
    let shape = tape.shape(z).to_vec();
    same_shape("beta_tcvae", &shape, tape.shape(mu))?;
    same_shape("beta_tcvae", &shape, tape.shape(log_sigma))?;
    let (b, d) = (shape[0], shape[1]);
    if b < 2 {
        return invalid("beta_tcvae: estimator needs a batch of at least 2");
    }
    let log_nb = ((dataset_size.max(b) * b) as f64).ln();

    let zc = tape.reshape(z, &[b, 1, d])?;
    let mr = tape.reshape(mu, &[1, b, d])?;
    let lr = tape.reshape(log_sigma, &[1, b, d])?;
    let diff = tape.sub(zc, mr)?;
    let inv = tape.neg(lr)?;
    let inv = tape.exp(inv)?;
    let zs = tape.mul(diff, inv)?;
    let zs2 = tape.square(zs)?;
    let half = tape.mul_scalar(zs2, -0.5)?;
    let lp = tape.sub(half, lr)?;
    let lp = tape.add_scalar(lp, -HALF_LN_2PI)?; // (n, m, d)

    let joint = tape.sum_last(lp)?; // (n, m)
    let log_qz = tape.logsumexp(joint)?; // (n)
    let log_qz = tape.add_scalar(log_qz, -log_nb)?;
    let per_dim = tape.transpose(lp)?; // (n, d, m)
    let per_dim = tape.logsumexp(per_dim)?; // (n, d)
    let log_prod = tape.sum_last(per_dim)?;
    let log_prod = tape.add_scalar(log_prod, -(d as f64) * log_nb)?;

    // log q(z_n | x_n) and log p(z_n)
    let dz = tape.sub(z, mu)?;
    let inv_n = tape.neg(log_sigma)?;
    let inv_n = tape.exp(inv_n)?;
    let zn = tape.mul(dz, inv_n)?;
    let zn2 = tape.square(zn)?;
    let hn = tape.mul_scalar(zn2, -0.5)?;
    let lq = tape.sub(hn, log_sigma)?;
    let lq = tape.sum_last(lq)?;
    let lq = tape.add_scalar(lq, -(d as f64) * HALF_LN_2PI)?;
    let z2 = tape.square(z)?;
    let lpz = tape.sum_last(z2)?;
    let lpz = tape.mul_scalar(lpz, -0.5)?;
    let lpz = tape.add_scalar(lpz, -(d as f64) * HALF_LN_2PI)?;

    let mi = tape.sub(lq, log_qz)?;
    let mi = tape.mean(mi)?;
    let tc = tape.sub(log_qz, log_prod)?;
    let tc = tape.mean(tc)?;
    let dim_kl = tape.sub(log_prod, lpz)?;
    let dim_kl = tape.mean(dim_kl)?;
    Ok(TcTerms { mi, tc, dim_kl })
}

/// `mse_x + mse_y + MI + beta * TC + dimKL` for a main-mode pass of a model
/// without marginal dimensions.
pub fn beta_tcvae_loss(
    tape: &mut Tape,
    out: &ForwardOutput,
    x: &Tensor,
    y: &Tensor,
    beta: f64,
    dataset_size: usize,
) -> Result<(Var, LossBreakdown)> {
    if !out.heads.is_empty() {
        return invalid("beta_tcvae: requires a model without marginal dimensions");
    }
    let (x_hat, y_hat) = decoded(out)?;
    let (Some(mu), Some(ls), Some(z)) = (out.code.mu_a, out.code.log_sigma_a, out.code.a_sample) else {
        return invalid("beta_tcvae: requires conditional dimensions");
    };
    let xt = tape.constant(x.clone());
    let yt = tape.constant(y.clone());
    let mse_x = mse_var(tape, x_hat, xt)?;
    let mse_y = mse_var(tape, y_hat, yt)?;
    let terms = tc_terms(tape, z, mu, ls, dataset_size)?;
    let kl = kl_conditional_var(tape, mu, ls)?;
    let weighted_tc = tape.mul_scalar(terms.tc, beta)?;
    let total = tape.add(mse_x, mse_y)?;
    let total = tape.add(total, terms.mi)?;
    let total = tape.add(total, weighted_tc)?;
    let total = tape.add(total, terms.dim_kl)?;
    let val = |v: Var| tape.value(v).data()[0];
    let breakdown = LossBreakdown {
        mse_x: Some(val(mse_x)),
        mse_y: Some(val(mse_y)),
        kl_a: Some(val(kl)),
        ce: Vec::new(),
        tc: Some(val(terms.tc)),
        mi: Some(val(terms.mi)),
        dim_kl: Some(val(terms.dim_kl)),
        total: val(total),
    };
    Ok((total, breakdown))
}

/// Monte-Carlo mean over `b_samples` of `sum_k Q_k (log Q_k - log p(b, k))`.
pub fn kl_bound_rhs(b_samples: &[f64], q: &[Vec<f64>], mix: &GaussianMixture1D) -> Result<f64> {
    if b_samples.is_empty() || b_samples.len() != q.len() {
        return invalid("kl bound: need one Q vector per sample");
    }
    let mut total = 0.0;
    for (&b, qk) in b_samples.iter().zip(q) {
        if qk.len() != mix.len() || qk.iter().any(|&v| !(v > 0.0)) || (qk.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return invalid("kl bound: each Q must be positive, sum to 1 and match the mixture size");
        }
        let lj = mix.log_joint_all(b);
        total += qk.iter().zip(&lj).map(|(&qv, &l)| qv * (qv.ln() - l)).sum::<f64>();
    }
    Ok(total / b_samples.len() as f64)
}

#[cfg(test)]
mod tests;
