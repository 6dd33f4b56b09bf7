//! Encoder, RBF classifier heads, cross-attention fusion and the dual-head
//! decoder.
//!
//! Inputs are batched lookback windows of shape `(batch, l, L)`. Parameter
//! names follow a fixed scheme (all marginal indices are 1-based):
//!
//! | name | shape |
//! |------|-------|
//! | `encoder.trunk.{j}.weight` / `.bias` | `(in, out)` / `(out)` |
//! | `encoder.final.mu.weight` / `.bias` | `(last, l*n1)` / `(l*n1)` |
//! | `encoder.final.log_sigma.weight` / `.bias` | `(last, l*n1)` / `(l*n1)` |
//! | `encoder.final.b.{i}.weight` / `.bias` | `(last, l)` / `(l)` |
//! | `rbf.{i}.w` | `(l)` channel projection |
//! | `rbf.{i}.nu`, `rbf.{i}.tau` | `(K_i)` |
//! | `rbf.{i}.logit.weight` / `.bias` | `(K_i, K_i)` / `(K_i)` |
//! | `fusion.f_a.weight` / `.bias` | `(l*n1, h)` / `(h)` |
//! | `fusion.f_b.{i}.weight` / `.bias` | `(K_i, h)` / `(h)` |
//! | `fusion.w_q`, `fusion.w_k`, `fusion.w_v`, `fusion.w_o` | `(h, h)`, only when `n1 > 0` |
//! | `decoder.recon.{j}.weight` / `.bias` | MLP to `l*L` |
//! | `decoder.forecast.{j}.weight` / `.bias` | MLP to `l*H` |
//! | `decoder.x_summary.weight` | `(L, 1)` |
//!
//! The conditional code is stored flattened as `(batch, l*n1)` in row-major
//! `(l, n1)` order. Each marginal embedding `b_i` has shape `(batch, l)`.

mod attention;
pub mod checkpoint;
mod config;

pub use attention::attention;
pub use config::{Activation, LatentSpec, NetworkConfig};

use std::collections::BTreeSet;

use rand::Rng;

use crate::autodiff::{Bound, ParamStore, Tape, Tensor, Var};
use crate::distributions::HALF_LN_2PI;
use crate::error::{invalid, Error, Result};
use crate::rng::substream;

pub const LOG_SIGMA_BOUND: f64 = 10.0;
pub const TAU_MIN: f64 = 1e-3;

/// Which noise policy a forward pass applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Conditional code sampled with noise, marginal embeddings as-is.
    Main,
    /// Conditional code at its mean, marginal embedding `i` (1-based)
    /// perturbed by `s_b` noise.
    Classifier(usize),
    /// No noise anywhere.
    Eval,
}

/// Tape handles for the latent code of a batch.
#[derive(Clone, Debug)]
pub struct CodeVars {
    pub mu_a: Option<Var>,
    pub log_sigma_a: Option<Var>,
    pub a_sample: Option<Var>,
    /// Marginal embeddings after the mode's noise policy, each `(batch, l)`.
    pub b: Vec<Var>,
    /// Marginal embeddings straight from the encoder.
    pub b_clean: Vec<Var>,
}

/// Tape handles produced by one RBF classifier head.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    /// Projected scalar `w_i . b_i`, shape `(batch, 1)`.
    pub s: Var,
    pub psi: Var,
    pub logits: Var,
    pub log_probs: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub bound: Bound,
    pub code: CodeVars,
    pub heads: Vec<HeadVars>,
    /// Fused tokens, `(batch, tokens, h)`.
    pub tokens: Option<Var>,
    /// Attention weights per head.
    pub attention: Vec<Var>,
    /// `(batch, l, L)`.
    pub x_hat: Option<Var>,
    /// `(batch, l, H)`.
    pub y_hat: Option<Var>,
}

/// Plain-value latent code of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    /// `(batch, l, n1)`, absent when `n1 = 0`.
    pub mu_a: Option<Tensor>,
    pub log_sigma_a: Option<Tensor>,
    pub a_sample: Option<Tensor>,
    /// One `(batch, l)` tensor per marginal dimension.
    pub b: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeepDive {
    pub latent: LatentSpec,
    pub net: NetworkConfig,
    pub params: ParamStore,
}

fn linear_init(
    params: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    gain: f64,
    rng: &mut impl Rng,
) {
    let scale = gain / (fan_in as f64).sqrt();
    params.insert(format!("{prefix}.weight"), Tensor::randn(&[fan_in, fan_out], scale, rng));
    params.insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]));
}

impl DeepDive {
    /// Builds a model with freshly initialized parameters.
    pub fn new(latent: LatentSpec, net: NetworkConfig, seed: u64) -> Result<Self> {
        latent.validate()?;
        net.validate()?;
        let mut rng = substream(seed, "init");
        let mut params = ParamStore::new();
        let hidden_gain = match net.activation {
            Activation::Relu => std::f64::consts::SQRT_2,
            Activation::Tanh => 1.0,
        };
        let (l, n1, n2) = (latent.l, latent.n1, latent.n2);

        let mut width = l * net.lookback;
        for (j, &w) in net.encoder_widths.iter().enumerate() {
            linear_init(&mut params, &format!("encoder.trunk.{j}"), width, w, hidden_gain, &mut rng);
            width = w;
        }
        if n1 > 0 {
            linear_init(&mut params, "encoder.final.mu", width, l * n1, 1.0, &mut rng);
            linear_init(&mut params, "encoder.final.log_sigma", width, l * n1, 0.1, &mut rng);
        }
        for i in 1..=n2 {
            linear_init(&mut params, &format!("encoder.final.b.{i}"), width, l, 1.0, &mut rng);
        }

        for (idx, &k) in latent.classes.iter().enumerate() {
            let i = idx + 1;
            let spacing = 3.0 / (k - 1) as f64;
            let tau = spacing.min(1.0);
            let nu: Vec<f64> = (0..k).map(|c| -1.5 + spacing * c as f64).collect();
            params.insert(format!("rbf.{i}.w"), Tensor::full(&[l], 1.0 / l as f64));
            if l == 1 {
                params.get_mut(&format!("rbf.{i}.w"))?.trainable = false;
            }
            params.insert(format!("rbf.{i}.nu"), Tensor::vector(&nu));
            params.insert(format!("rbf.{i}.tau"), Tensor::full(&[k], tau));
            // Nearest-centroid start: peak activation maps to a logit of 4.
            let diag = 4.0 * tau * crate::distributions::sqrt_2pi();
            let mut a = vec![0.0; k * k];
            for c in 0..k {
                a[c * k + c] = diag;
            }
            params.insert(format!("rbf.{i}.logit.weight"), Tensor::new(&[k, k], a)?);
            params.insert(format!("rbf.{i}.logit.bias"), Tensor::zeros(&[k]));
        }

        let h = net.h;
        if n1 > 0 {
            linear_init(&mut params, "fusion.f_a", l * n1, h, 1.0, &mut rng);
        }
        for (idx, &k) in latent.classes.iter().enumerate() {
            linear_init(&mut params, &format!("fusion.f_b.{}", idx + 1), k, h, 1.0, &mut rng);
        }
        if n1 > 0 {
            let attn_scale = 1.0 / (h as f64).sqrt();
            for name in ["w_q", "w_k", "w_v", "w_o"] {
                params.insert(format!("fusion.{name}"), Tensor::randn(&[h, h], attn_scale, &mut rng));
            }
        }

        let tokens = usize::from(n1 > 0) + n2;
        let flat = tokens * h;
        let heads = [
            ("recon", flat, l * net.lookback),
            ("forecast", flat + l, l * net.horizon),
        ];
        for (head, input, output) in heads {
            let mut width = input;
            for (j, &w) in net.decoder_widths.iter().enumerate() {
                linear_init(&mut params, &format!("decoder.{head}.{j}"), width, w, hidden_gain, &mut rng);
                width = w;
            }
            let j = net.decoder_widths.len();
            linear_init(&mut params, &format!("decoder.{head}.{j}"), width, output, 1.0, &mut rng);
        }
        params.insert(
            "decoder.x_summary.weight",
            Tensor::full(&[net.lookback, 1], 1.0 / net.lookback as f64),
        );

        Ok(Self { latent, net, params })
    }

    pub fn num_tokens(&self) -> usize {
        usize::from(self.latent.n1 > 0) + self.latent.n2
    }

    /// Parameters held fixed during a main-network pass.
    pub fn main_frozen(&self) -> BTreeSet<String> {
        self.params
            .names()
            .filter(|n| n.starts_with("rbf.") || n.starts_with("encoder.final.b."))
            .map(str::to_string)
            .collect()
    }

    /// Parameters held fixed during classifier pass `i`: everything outside
    /// the encoder trunk, the `b_i` output layer and RBF head `i`.
    pub fn classifier_frozen(&self, i: usize) -> Result<BTreeSet<String>> {
        self.check_label(i)?;
        let own_b = format!("encoder.final.b.{i}.");
        let own_rbf = format!("rbf.{i}.");
        Ok(self
            .params
            .names()
            .filter(|n| !(n.starts_with("encoder.trunk.") || n.starts_with(&own_b) || n.starts_with(&own_rbf)))
            .map(str::to_string)
            .collect())
    }

    fn check_label(&self, i: usize) -> Result<()> {
        if i == 0 || i > self.latent.n2 {
            return invalid(format!(
                "classifier index {i} out of range 1..={}",
                self.latent.n2
            ));
        }
        Ok(())
    }

    fn linear(&self, tape: &mut Tape, bound: &Bound, prefix: &str, x: Var) -> Result<Var> {
        let w = bound.var(&format!("{prefix}.weight"))?;
        let b = bound.var(&format!("{prefix}.bias"))?;
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }

    fn activate(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self.net.activation {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }

    fn mlp(&self, tape: &mut Tape, bound: &Bound, prefix: &str, hidden: usize, mut x: Var) -> Result<Var> {
        for j in 0..hidden {
            x = self.linear(tape, bound, &format!("{prefix}.{j}"), x)?;
            x = self.activate(tape, x)?;
        }
        self.linear(tape, bound, &format!("{prefix}.{hidden}"), x)
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let s = x.shape();
        if s.len() != 3 || s[1] != self.latent.l || s[2] != self.net.lookback || !x.is_finite() {
            return Err(Error::Shape {
                op: "encode",
                detail: format!(
                    "expected finite (batch, {}, {}), got {:?}",
                    self.latent.l, self.net.lookback, s
                ),
            });
        }
        Ok(s[0])
    }

    /// Encoder pass without noise.
    pub fn encode_vars(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<CodeVars> {
        let (l, n1, n2) = (self.latent.l, self.latent.n1, self.latent.n2);
        let batch = tape.shape(x)[0];
        let mut hdn = tape.reshape(x, &[batch, l * self.net.lookback])?;
        for j in 0..self.net.encoder_widths.len() {
            hdn = self.linear(tape, bound, &format!("encoder.trunk.{j}"), hdn)?;
            hdn = self.activate(tape, hdn)?;
        }
        let (mu_a, log_sigma_a) = if n1 > 0 {
            let mu = self.linear(tape, bound, "encoder.final.mu", hdn)?;
            let ls = self.linear(tape, bound, "encoder.final.log_sigma", hdn)?;
            let ls = tape.clamp(ls, -LOG_SIGMA_BOUND, LOG_SIGMA_BOUND)?;
            (Some(mu), Some(ls))
        } else {
            (None, None)
        };
        let b = (1..=n2)
            .map(|i| self.linear(tape, bound, &format!("encoder.final.b.{i}"), hdn))
            .collect::<Result<Vec<_>>>()?;
        Ok(CodeVars {
            mu_a,
            log_sigma_a,
            a_sample: mu_a,
            b: b.clone(),
            b_clean: b,
        })
    }

    /// RBF head `i` (1-based) applied to a `(batch, l)` embedding.
    pub fn classify_vars(&self, tape: &mut Tape, bound: &Bound, i: usize, b_i: Var) -> Result<HeadVars> {
        self.check_label(i)?;
        let l = self.latent.l;
        let w = bound.var(&format!("rbf.{i}.w"))?;
        let w = tape.reshape(w, &[l, 1])?;
        let s = tape.matmul(b_i, w)?;
        let nu = bound.var(&format!("rbf.{i}.nu"))?;
        let tau = bound.var(&format!("rbf.{i}.tau"))?;
        let tau = tape.clamp(tau, TAU_MIN, f64::INFINITY)?;
        let diff = tape.sub(s, nu)?;
        let z = tape.div(diff, tau)?;
        let z2 = tape.square(z)?;
        let half = tape.mul_scalar(z2, -0.5)?;
        let log_tau = tape.log(tau)?;
        let log_psi = tape.sub(half, log_tau)?;
        let log_psi = tape.add_scalar(log_psi, -HALF_LN_2PI)?;
        let psi = tape.exp(log_psi)?;
        let logits = self.linear(tape, bound, &format!("rbf.{i}.logit"), psi)?;
        let log_probs = tape.log_softmax(logits)?;
        Ok(HeadVars { s, psi, logits, log_probs })
    }

    /// Fused tokens `(batch, tokens, h)` and the attention weights.
    pub fn fuse_vars(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        a: Option<Var>,
        psi: &[Var],
    ) -> Result<(Var, Vec<Var>)> {
        let h = self.net.h;
        let mut queries = Vec::with_capacity(psi.len() + 1);
        let mut kv = None;
        if let Some(a) = a {
            let batch = tape.shape(a)[0];
            let ta = self.linear(tape, bound, "fusion.f_a", a)?;
            let ta = tape.reshape(ta, &[batch, 1, h])?;
            queries.push(ta);
            kv = Some(ta);
        }
        for (idx, &p) in psi.iter().enumerate() {
            let batch = tape.shape(p)[0];
            let tb = self.linear(tape, bound, &format!("fusion.f_b.{}", idx + 1), p)?;
            queries.push(tape.reshape(tb, &[batch, 1, h])?);
        }
        let tokens = if queries.len() == 1 { queries[0] } else { tape.concat(&queries, 1)? };
        let Some(kv) = kv else {
            return Ok((tokens, Vec::new()));
        };
        let q = tape.matmul(tokens, bound.var("fusion.w_q")?)?;
        let k = tape.matmul(kv, bound.var("fusion.w_k")?)?;
        let v = tape.matmul(kv, bound.var("fusion.w_v")?)?;
        let w_o = bound.var("fusion.w_o")?;
        let (mut out, weights) = attention(tape, q, k, v, self.net.heads, Some(w_o))?;
        if self.net.fusion_residual {
            out = tape.add(out, tokens)?;
        }
        Ok((out, weights))
    }

    /// Reconstruction and forecast heads.
    pub fn decode_vars(&self, tape: &mut Tape, bound: &Bound, tokens: Var, x: Var) -> Result<(Var, Var)> {
        let (l, lb, hz) = (self.latent.l, self.net.lookback, self.net.horizon);
        let ts = tape.shape(tokens).to_vec();
        let batch = ts[0];
        let flat = tape.reshape(tokens, &[batch, ts[1] * ts[2]])?;
        let hidden = self.net.decoder_widths.len();
        let recon = self.mlp(tape, bound, "decoder.recon", hidden, flat)?;
        let x_hat = tape.reshape(recon, &[batch, l, lb])?;
        let summary = tape.matmul(x, bound.var("decoder.x_summary.weight")?)?;
        let summary = tape.reshape(summary, &[batch, l])?;
        let joined = tape.concat(&[flat, summary], 1)?;
        let fc = self.mlp(tape, bound, "decoder.forecast", hidden, joined)?;
        let y_hat = tape.reshape(fc, &[batch, l, hz])?;
        Ok((x_hat, y_hat))
    }

    /// Full forward pass under `mode`.
    pub fn forward<R: Rng + ?Sized>(&self, tape: &mut Tape, x: &Tensor, mode: Mode, rng: &mut R) -> Result<ForwardOutput> {
        self.forward_with(tape, x, mode, rng, true)
    }

    /// Forward pass that stops after the classifier heads when `decode` is
    /// false. Noise draws are identical either way.
    pub fn forward_with<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        mode: Mode,
        rng: &mut R,
        decode: bool,
    ) -> Result<ForwardOutput> {
        let bound = self.params.bind(tape);
        self.forward_bound(tape, bound, x, mode, rng, decode)
    }

    /// Forward pass over parameters already recorded on `tape`.
    pub fn forward_bound<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: Bound,
        x: &Tensor,
        mode: Mode,
        rng: &mut R,
        decode: bool,
    ) -> Result<ForwardOutput> {
        if let Mode::Classifier(i) = mode {
            self.check_label(i)?;
        }
        let batch = self.check_input(x)?;
        let xv = tape.constant(x.clone());
        let mut code = self.encode_vars(tape, &bound, xv)?;
        let l = self.latent.l;

        if let (Some(mu), Some(ls)) = (code.mu_a, code.log_sigma_a) {
            code.a_sample = Some(reparameterize(tape, mu, ls, mode == Mode::Main, rng)?);
        }
        if let Mode::Classifier(i) = mode {
            let eps = tape.constant(Tensor::randn(&[batch, l], self.net.s_b, rng));
            code.b[i - 1] = tape.add(code.b[i - 1], eps)?;
        }

        let heads = code
            .b
            .iter()
            .enumerate()
            .map(|(idx, &b)| self.classify_vars(tape, &bound, idx + 1, b))
            .collect::<Result<Vec<_>>>()?;

        let (mut tokens, mut att, mut x_hat, mut y_hat) = (None, Vec::new(), None, None);
        if decode {
            let psi: Vec<Var> = heads.iter().map(|hv| hv.psi).collect();
            let (t, w) = self.fuse_vars(tape, &bound, code.a_sample, &psi)?;
            let (xh, yh) = self.decode_vars(tape, &bound, t, xv)?;
            tokens = Some(t);
            att = w;
            x_hat = Some(xh);
            y_hat = Some(yh);
        }
        Ok(ForwardOutput {
            bound,
            code,
            heads,
            tokens,
            attention: att,
            x_hat,
            y_hat,
        })
    }

    /// Noise-free latent code of a batch.
    pub fn encode(&self, x: &Tensor) -> Result<LatentCode> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let code = self.encode_vars(&mut tape, &bound, xv)?;
        Ok(code_values(&tape, &code, self.latent.l, self.latent.n1))
    }

    /// Noise-free predictions `(x_hat, y_hat)` for a batch.
    pub fn predict(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let mut rng = substream(0, "eval");
        let out = self.forward(&mut tape, x, Mode::Eval, &mut rng)?;
        let (xh, yh) = (out.x_hat.expect("decoded"), out.y_hat.expect("decoded"));
        Ok((tape.value(xh).clone(), tape.value(yh).clone()))
    }

    /// Noise-free class probabilities per marginal dimension, each `(batch, K_i)`.
    pub fn class_probs(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let mut rng = substream(0, "eval");
        let out = self.forward_with(&mut tape, x, Mode::Eval, &mut rng, false)?;
        Ok(out
            .heads
            .iter()
            .map(|hv| {
                let lp = tape.value(hv.log_probs);
                Tensor::from_parts(lp.shape().to_vec(), lp.data().iter().map(|v| v.exp()).collect())
            })
            .collect())
    }
}

/// `mu + exp(log_sigma) * eps` with `eps ~ N(0, I)` drawn from `rng` when
/// `noise_on`, otherwise `mu` itself. The noise is a constant on the tape, so
/// gradients reach `mu` and `log_sigma` only.
pub fn reparameterize<R: Rng + ?Sized>(
    tape: &mut Tape,
    mu: Var,
    log_sigma: Var,
    noise_on: bool,
    rng: &mut R,
) -> Result<Var> {
    if tape.shape(mu) != tape.shape(log_sigma) {
        return Err(Error::Shape {
            op: "reparameterize",
            detail: format!("mu {:?} vs log_sigma {:?}", tape.shape(mu), tape.shape(log_sigma)),
        });
    }
    if !noise_on {
        return Ok(mu);
    }
    let eps = tape.constant(Tensor::randn(tape.shape(mu), 1.0, rng));
    let sigma = tape.exp(log_sigma)?;
    let noise = tape.mul(sigma, eps)?;
    tape.add(mu, noise)
}

/// Copies the values of a latent code off the tape, reshaping the
/// conditional parts to `(batch, l, n1)`.
pub fn code_values(tape: &Tape, code: &CodeVars, l: usize, n1: usize) -> LatentCode {
    let cond = |v: Option<Var>| {
        v.map(|v| {
            let t = tape.value(v);
            Tensor::from_parts(vec![t.shape()[0], l, n1], t.data().to_vec())
        })
    };
    LatentCode {
        mu_a: cond(code.mu_a),
        log_sigma_a: cond(code.log_sigma_a),
        a_sample: cond(code.a_sample),
        b: code.b.iter().map(|&v| tape.value(v).clone()).collect(),
    }
}
