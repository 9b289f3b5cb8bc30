//! Fused multi-head scaled dot-product attention kernels.

use crate::error::{Error, Result};

use super::kernels;

/// Returns the context `[batch, seq, d]` and weights `[batch, heads, seq, seq]`.
pub(crate) fn forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    [batch, seq, d]: [usize; 3],
    heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; batch * seq * d];
    let mut probs = vec![0.0; batch * heads * seq * seq];
    let mut scores = vec![0.0; seq];
    let mut weights = vec![0.0; seq];

    for b in 0..batch {
        let valid: Vec<usize> = (0..seq)
            .filter(|&j| key_mask.is_none_or(|m| m[b * seq + j]))
            .collect();
        if valid.is_empty() {
            return Err(Error::Degenerate(format!(
                "every key position of sequence {b} is masked"
            )));
        }
        let n = valid.len();
        for h in 0..heads {
            let off = h * dh;
            for i in 0..seq {
                let qi = &q[(b * seq + i) * d + off..][..dh];
                for (s, &j) in scores[..n].iter_mut().zip(&valid) {
                    let kj = &k[(b * seq + j) * d + off..][..dh];
                    let mut acc = 0.0;
                    for (x, y) in qi.iter().zip(kj) {
                        acc += x * y;
                    }
                    *s = acc * scale;
                }
                kernels::softmax_into(&scores[..n], &mut weights[..n]);
                let prow = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                let orow = &mut out[(b * seq + i) * d + off..][..dh];
                for (&p, &j) in weights[..n].iter().zip(&valid) {
                    prow[j] = p;
                    let vj = &v[(b * seq + j) * d + off..][..dh];
                    for (o, &x) in orow.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
            }
        }
    }
    Ok((out, probs))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    dout: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    [batch, seq, d]: [usize; 3],
    heads: usize,
    key_mask: Option<&[bool]>,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; seq];

    for b in 0..batch {
        let valid: Vec<usize> = (0..seq)
            .filter(|&j| key_mask.is_none_or(|m| m[b * seq + j]))
            .collect();
        for h in 0..heads {
            let off = h * dh;
            for i in 0..seq {
                let prow = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                let gi = &dout[(b * seq + i) * d + off..][..dh];
                let mut dot = 0.0;
                for &j in &valid {
                    let vj = &v[(b * seq + j) * d + off..][..dh];
                    let mut acc = 0.0;
                    for (x, y) in gi.iter().zip(vj) {
                        acc += x * y;
                    }
                    dp[j] = acc;
                    dot += prow[j] * acc;
                    let dvj = &mut dv[(b * seq + j) * d + off..][..dh];
                    for (o, &x) in dvj.iter_mut().zip(gi) {
                        *o += prow[j] * x;
                    }
                }
                let qi_base = (b * seq + i) * d + off;
                for &j in &valid {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj_base = (b * seq + j) * d + off;
                    for c in 0..dh {
                        dq[qi_base + c] += ds * k[kj_base + c];
                        dk[kj_base + c] += ds * q[qi_base + c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}
