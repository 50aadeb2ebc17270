//! InfoNCE objective over adapter scores and its exact gradient.

use crate::linalg::{gelu_grad, log_sum_exp};
use crate::matrix::{dot, l2_norm, Matrix};

use super::{MlpAdapter, RepRetrieverError};

/// How per-pair probabilities combine into the batch loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossForm {
    /// Mean over (rep, positive) pairs of `-ln p`.
    #[default]
    Standard,
    /// `-ln Σ_pairs p`: the log taken once outside the double sum.
    Literal,
}

/// Representations, their positives and the candidate pool.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub reps: Vec<Vec<f64>>,
    /// Row indices into `doc_embeddings`.
    pub positives: Vec<Vec<usize>>,
    pub doc_embeddings: Matrix,
}

impl TrainBatch {
    pub fn validate(&self, g: &MlpAdapter) -> Result<(), RepRetrieverError> {
        let bad = |m: String| Err(RepRetrieverError::InvalidBatch(m));
        if self.reps.is_empty() {
            return bad("no representations".into());
        }
        if self.reps.len() != self.positives.len() {
            return bad(format!("{} reps but {} positive sets", self.reps.len(), self.positives.len()));
        }
        let m = self.doc_embeddings.rows();
        for (i, p) in self.positives.iter().enumerate() {
            if p.is_empty() {
                return bad(format!("rep {i} has no positive"));
            }
            if let Some(&j) = p.iter().find(|&&j| j >= m) {
                return bad(format!("positive {j} outside a pool of {m}"));
            }
        }
        if let Some(r) = self.reps.iter().find(|r| r.len() != g.d_model()) {
            return Err(RepRetrieverError::DimensionMismatch(format!(
                "rep of {} entries for adapter input {}",
                r.len(),
                g.d_model()
            )));
        }
        if self.doc_embeddings.cols() != g.d_emb() {
            return Err(RepRetrieverError::DimensionMismatch(format!(
                "documents have {} dims, adapter emits {}",
                self.doc_embeddings.cols(),
                g.d_emb()
            )));
        }
        Ok(())
    }

    fn num_pairs(&self) -> usize {
        self.positives.iter().map(Vec::len).sum()
    }
}

fn check_tau(tau: f64) -> Result<(), RepRetrieverError> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(RepRetrieverError::InvalidTemperature(tau))
    }
}

/// Probability of `positive` under `softmax(scores / τ)` and its negative log.
pub fn infonce_single(scores: &[f64], positive: usize, tau: f64) -> Result<(f64, f64), RepRetrieverError> {
    check_tau(tau)?;
    if positive >= scores.len() {
        return Err(RepRetrieverError::InvalidBatch(format!(
            "positive {positive} outside {} scores",
            scores.len()
        )));
    }
    let scaled: Vec<f64> = scores.iter().map(|s| s / tau).collect();
    let log_p = scaled[positive] - log_sum_exp(&scaled);
    Ok((log_p.exp(), -log_p))
}

/// Query vector `u = f(g(r))` together with what backprop needs.
struct Encoded {
    pass: super::AdapterPass,
    u: Vec<f64>,
    norm: f64,
}

fn encode(g: &MlpAdapter, r: &[f64], normalize: bool) -> Encoded {
    let pass = g.pass(r);
    let norm = l2_norm(&pass.out);
    let u = if normalize && norm > 0.0 {
        pass.out.iter().map(|x| x / norm).collect()
    } else if normalize {
        vec![0.0; pass.out.len()]
    } else {
        pass.out.clone()
    };
    Encoded { pass, u, norm }
}

/// Batch loss. `normalize` applies the encoder's L2 normalization to the
/// adapter output before scoring.
pub fn infonce_batch(
    g: &MlpAdapter,
    batch: &TrainBatch,
    tau: f64,
    form: LossForm,
    normalize: bool,
) -> Result<f64, RepRetrieverError> {
    loss_impl(g, batch, tau, form, normalize, false).map(|(l, _)| l)
}

/// Loss and its gradient with respect to every adapter parameter, returned
/// as an adapter-shaped value.
pub fn loss_and_gradients(
    g: &MlpAdapter,
    batch: &TrainBatch,
    tau: f64,
    form: LossForm,
    normalize: bool,
) -> Result<(f64, MlpAdapter), RepRetrieverError> {
    loss_impl(g, batch, tau, form, normalize, true).map(|(l, grad)| (l, grad.expect("requested")))
}

pub fn loss_gradients(
    g: &MlpAdapter,
    batch: &TrainBatch,
    tau: f64,
    form: LossForm,
    normalize: bool,
) -> Result<MlpAdapter, RepRetrieverError> {
    loss_and_gradients(g, batch, tau, form, normalize).map(|(_, grad)| grad)
}

fn loss_impl(
    g: &MlpAdapter,
    batch: &TrainBatch,
    tau: f64,
    form: LossForm,
    normalize: bool,
    want_grad: bool,
) -> Result<(f64, Option<MlpAdapter>), RepRetrieverError> {
    check_tau(tau)?;
    batch.validate(g)?;
    let docs = &batch.doc_embeddings;
    let m = docs.rows();
    let pairs = batch.num_pairs() as f64;

    let encoded: Vec<Encoded> = batch.reps.iter().map(|r| encode(g, r, normalize)).collect();
    // q[i] = softmax over the pool of s_ij / τ, in log space.
    let log_q: Vec<Vec<f64>> = encoded
        .iter()
        .map(|e| {
            let scaled: Vec<f64> = (0..m).map(|j| dot(&e.u, docs.row(j)) / tau).collect();
            let lse = log_sum_exp(&scaled);
            scaled.into_iter().map(|s| s - lse).collect()
        })
        .collect();

    let (loss, literal_sum) = match form {
        LossForm::Standard => {
            let total: f64 = batch
                .positives
                .iter()
                .zip(&log_q)
                .flat_map(|(pos, lq)| pos.iter().map(move |&p| -lq[p]))
                .sum();
            (total / pairs, 0.0)
        }
        LossForm::Literal => {
            let s: f64 = batch
                .positives
                .iter()
                .zip(&log_q)
                .flat_map(|(pos, lq)| pos.iter().map(move |&p| lq[p].exp()))
                .sum();
            (-s.ln(), s)
        }
    };
    if !want_grad {
        return Ok((loss, None));
    }

    let mut grad = MlpAdapter::zeros(g.d_model(), g.d_hidden(), g.d_emb());
    for (i, e) in encoded.iter().enumerate() {
        let q: Vec<f64> = log_q[i].iter().map(|x| x.exp()).collect();
        let pos = &batch.positives[i];
        // dL/ds_ij
        let ds: Vec<f64> = match form {
            LossForm::Standard => {
                let n = pos.len() as f64;
                let mut ds: Vec<f64> = q.iter().map(|qj| n * qj).collect();
                for &p in pos {
                    ds[p] -= 1.0;
                }
                ds.iter().map(|x| x / (pairs * tau)).collect()
            }
            LossForm::Literal => {
                let mass: f64 = pos.iter().map(|&p| q[p]).sum();
                let mut ds: Vec<f64> = q.iter().map(|qj| mass * qj).collect();
                for &p in pos {
                    ds[p] -= q[p];
                }
                ds.iter().map(|x| x / (literal_sum * tau)).collect()
            }
        };
        let mut du = vec![0.0; g.d_emb()];
        for (j, &dsj) in ds.iter().enumerate() {
            if dsj != 0.0 {
                du.iter_mut().zip(docs.row(j)).for_each(|(a, d)| *a += dsj * d);
            }
        }
        let dz: Vec<f64> = if !normalize {
            du
        } else if e.norm > 0.0 {
            let proj = dot(&e.u, &du);
            du.iter().zip(&e.u).map(|(d, u)| (d - u * proj) / e.norm).collect()
        } else {
            vec![0.0; du.len()]
        };
        accumulate(&mut grad, g, &batch.reps[i], &e.pass, &dz);
    }
    Ok((loss, Some(grad)))
}

/// Backprop of `dz` through `z = w2ᵀ GELU(w1ᵀ r + b1) + b2`.
fn accumulate(grad: &mut MlpAdapter, g: &MlpAdapter, r: &[f64], pass: &super::AdapterPass, dz: &[f64]) {
    let (dh, de) = (g.d_hidden(), g.d_emb());
    for k in 0..dh {
        let a = pass.hidden[k];
        let row = grad.w2.row_mut(k);
        row.iter_mut().zip(dz).for_each(|(w, d)| *w += a * d);
    }
    grad.b2.iter_mut().zip(dz).for_each(|(b, d)| *b += d);
    let dpre: Vec<f64> = (0..dh)
        .map(|k| dot(&g.w2.row(k)[..de], dz) * gelu_grad(pass.pre[k]))
        .collect();
    for (p, &rp) in r.iter().enumerate() {
        if rp != 0.0 {
            let row = grad.w1.row_mut(p);
            row.iter_mut().zip(&dpre).for_each(|(w, d)| *w += rp * d);
        }
    }
    grad.b1.iter_mut().zip(&dpre).for_each(|(b, d)| *b += d);
}
