use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Scaled dot-product attention over `(batch, tokens, width)` tensors.
///
/// Each head attends on a contiguous `width / heads` slice of the last axis
/// with scale `1 / sqrt(width / heads)`. Head outputs are concatenated and,
/// when `w_o` is given, mixed by it. Also returns the attention weights of
/// every head, shape `(batch, tokens_q, tokens_kv)`.
pub fn attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    w_o: Option<Var>,
) -> Result<(Var, Vec<Var>)> {
    let (sq, sk, sv) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    let width = *sq.last().unwrap_or(&0);
    let ok = sq.len() == 3
        && sk.len() == 3
        && sv.len() == 3
        && sk[2] == width
        && sv[2] == width
        && sk[1] == sv[1]
        && sq[0] == sk[0]
        && sk[0] == sv[0];
    if !ok || heads == 0 || width % heads != 0 {
        return Err(Error::Shape {
            op: "attention",
            detail: format!("q {sq:?}, k {sk:?}, v {sv:?}, heads {heads}"),
        });
    }
    let d = width / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for hd in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice(q, 2, hd * d, d)?,
                tape.slice(k, 2, hd * d, d)?,
                tape.slice(v, 2, hd * d, d)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.mul_scalar(scores, scale)?;
        let att = tape.softmax(scores)?;
        outs.push(tape.matmul(att, vh)?);
        weights.push(att);
    }
    let mut out = if heads == 1 { outs[0] } else { tape.concat(&outs, 2)? };
    if let Some(w) = w_o {
        out = tape.matmul(out, w)?;
    }
    Ok((out, weights))
}
