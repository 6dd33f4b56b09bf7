use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{invalid, Error, Result};
use crate::exec::Execution;

const CHUNK: usize = 512;

/// Maximum over all input coordinates of
/// `|analytic - central| / max(1, |central|)`.
///
/// `f` must be differentiable at `point`. Kinks (relu at 0, clamp boundaries)
/// are outside the contract: the central difference straddles them and the
/// comparison is meaningless there.
pub fn grad_check<F>(f: F, point: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync + Send,
{
    grad_check_with(Execution::default(), f, point, step)
}

pub fn grad_check_with<F>(exec: Execution, f: F, point: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync + Send,
{
    if !(step > 0.0) {
        return invalid(format!("grad_check: step must be positive, got {step}"));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(point)
        .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    // Coordinates are probed in fixed-size chunks. Each task perturbs a
    // private copy in place, so only the tensor being probed is duplicated.
    let chunks: Vec<(usize, usize, usize)> = point
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| (0..t.numel()).step_by(CHUNK).map(move |s| (ti, s, (s + CHUNK).min(t.numel()))))
        .collect();
    let errors = exec.map(chunks.len(), |c| -> Result<f64> {
        let (ti, lo, hi) = chunks[c];
        let mut shifted = point.to_vec();
        let mut worst: f64 = 0.0;
        for e in lo..hi {
            let x0 = point[ti].data()[e];
            shifted[ti].data_mut()[e] = x0 + step;
            let up = evaluate(&f, &shifted)?;
            shifted[ti].data_mut()[e] = x0 - step;
            let down = evaluate(&f, &shifted)?;
            shifted[ti].data_mut()[e] = x0;
            let central = (up - down) / (2.0 * step);
            let exact = analytic[ti].data()[e];
            let err = (exact - central).abs() / central.abs().max(1.0);
            if !err.is_finite() {
                return Err(Error::NonFinite { op: "grad_check" });
            }
            worst = worst.max(err);
        }
        Ok(worst)
    });
    errors
        .into_iter()
        .try_fold(0.0f64, |acc, e| Ok(acc.max(e?)))
}

/// Scalar value of `f` at `point` on a fresh tape.
pub fn evaluate<F>(f: &F, point: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.value(out)
        .item()
        .ok_or_else(|| Error::NotScalar(tape.shape(out).to_vec()))
}
