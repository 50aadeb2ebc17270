//! Causal multi-head scaled dot-product attention.

use crate::linalg::softmax_unchecked;
use crate::matrix::{dot, Matrix};

use super::ToyLmError;

/// Per-head attention weights: `weights[h][i]` is the distribution of query
/// position `i` over key positions `0..=i`.
pub type AttentionWeights = Vec<Vec<Vec<f64>>>;

/// Causal attention over the sequence `x` (one `d_model` row per position).
/// Each head computes `softmax(Q Kᵀ / √d_head) V` on its slice of the
/// projections; head outputs are concatenated (no output projection).
pub fn attention(
    w_q: &Matrix,
    w_k: &Matrix,
    w_v: &Matrix,
    x: &[Vec<f64>],
    n_heads: usize,
) -> Result<Vec<Vec<f64>>, ToyLmError> {
    attention_with_weights(w_q, w_k, w_v, x, n_heads).map(|(out, _)| out)
}

pub fn attention_with_weights(
    w_q: &Matrix,
    w_k: &Matrix,
    w_v: &Matrix,
    x: &[Vec<f64>],
    n_heads: usize,
) -> Result<(Vec<Vec<f64>>, AttentionWeights), ToyLmError> {
    let d_in = w_q.rows();
    let d = w_q.cols();
    for (name, w) in [("w_k", w_k), ("w_v", w_v)] {
        if w.shape() != w_q.shape() {
            return Err(ToyLmError::ShapeMismatch(format!(
                "{name} is {:?}, w_q is {:?}",
                w.shape(),
                w_q.shape()
            )));
        }
    }
    if n_heads == 0 || d % n_heads != 0 {
        return Err(ToyLmError::ShapeMismatch(format!(
            "{d} projection columns do not split into {n_heads} heads"
        )));
    }
    if let Some(row) = x.iter().find(|r| r.len() != d_in) {
        return Err(ToyLmError::ShapeMismatch(format!(
            "input row has {} entries, projections expect {d_in}",
            row.len()
        )));
    }

    let q: Vec<Vec<f64>> = x.iter().map(|r| w_q.left_mul(r)).collect();
    let k: Vec<Vec<f64>> = x.iter().map(|r| w_k.left_mul(r)).collect();
    let v: Vec<Vec<f64>> = x.iter().map(|r| w_v.left_mul(r)).collect();

    let d_head = d / n_heads;
    let scale = 1.0 / (d_head as f64).sqrt();
    let n = x.len();
    let mut out = vec![vec![0.0; d]; n];
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let span = h * d_head..(h + 1) * d_head;
        let mut head_weights = Vec::with_capacity(n);
        for i in 0..n {
            let qi = &q[i][span.clone()];
            let scores: Vec<f64> = (0..=i)
                .map(|j| dot(qi, &k[j][span.clone()]) * scale)
                .collect();
            let a = softmax_unchecked(&scores);
            let oi = &mut out[i][span.clone()];
            for (j, &aij) in a.iter().enumerate() {
                for (o, &vv) in oi.iter_mut().zip(&v[j][span.clone()]) {
                    *o += aij * vv;
                }
            }
            head_weights.push(a);
        }
        weights.push(head_weights);
    }
    Ok((out, weights))
}
