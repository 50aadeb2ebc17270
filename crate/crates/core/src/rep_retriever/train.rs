//! Mini-batch gradient descent for the adapter.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::matrix::{dot, Matrix};
use crate::retrieval::{build_dense_index, DocEncoder, Document};
use crate::seeds;

use super::loss::{loss_and_gradients, LossForm, TrainBatch};
use super::{MlpAdapter, RepRetrieverError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub temperature: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Score each rep against the union of the batch's positives instead
    /// of the whole corpus.
    pub in_batch_negatives: bool,
    pub loss_form: LossForm,
    /// Steps between recall checkpoints; 0 records only the final one.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            temperature: 0.05,
            learning_rate: 0.05,
            steps: 500,
            batch_size: 16,
            seed: 0,
            in_batch_negatives: true,
            loss_form: LossForm::Standard,
            eval_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), RepRetrieverError> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(RepRetrieverError::InvalidTemperature(self.temperature));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(RepRetrieverError::InvalidConfig(format!(
                "learning_rate {} must be non-negative and finite",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(RepRetrieverError::InvalidConfig("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub loss_history: Vec<f64>,
    pub adapter: MlpAdapter,
    /// (step, recall@1 of the training reps against the full pool).
    pub eval_recall: Vec<(usize, f64)>,
}

/// Fraction of reps whose top-scoring pool row is one of their positives.
/// Ties go to the lower row index.
pub fn recall_at_1(
    g: &MlpAdapter,
    reps: &[Vec<f64>],
    positives: &[Vec<usize>],
    docs: &Matrix,
    normalize: bool,
) -> f64 {
    if reps.is_empty() {
        return 0.0;
    }
    let hits = reps
        .iter()
        .zip(positives)
        .filter(|(r, pos)| {
            let z = g.pass(r).out;
            let u = if normalize { crate::matrix::normalized(&z) } else { z };
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for j in 0..docs.rows() {
                let s = dot(&u, docs.row(j));
                if s > best_score {
                    best = j;
                    best_score = s;
                }
            }
            pos.contains(&best)
        })
        .count();
    hits as f64 / reps.len() as f64
}

/// Means of consecutive non-overlapping windows of `size` values (a
/// trailing partial window is dropped).
pub fn windowed_means(values: &[f64], size: usize) -> Vec<f64> {
    values
        .chunks_exact(size.max(1))
        .map(|w| w.iter().sum::<f64>() / w.len() as f64)
        .collect()
}

/// Trains against a fixed matrix of document embeddings. `positives[i]`
/// lists row indices of `docs` relevant to `reps[i]`.
pub fn train_on_embeddings(
    init: &MlpAdapter,
    reps: &[Vec<f64>],
    positives: &[Vec<usize>],
    docs: &Matrix,
    normalize: bool,
    cfg: &TrainConfig,
) -> Result<TrainReport, RepRetrieverError> {
    cfg.validate()?;
    if reps.is_empty() {
        return Err(RepRetrieverError::NoTrainingData);
    }
    // Validates shapes and positives once up front.
    TrainBatch {
        reps: reps.to_vec(),
        positives: positives.to_vec(),
        doc_embeddings: docs.clone(),
    }
    .validate(init)?;

    let n = reps.len();
    let b = cfg.batch_size.min(n);
    let mut rng = seeds::stream(cfg.seed, "train.batches");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;

    let mut g = init.clone();
    let mut loss_history = Vec::with_capacity(cfg.steps);
    let mut eval_recall = Vec::new();
    for step in 0..cfg.steps {
        if cursor + b > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let members = &order[cursor..cursor + b];
        cursor += b;
        let batch = make_batch(members, reps, positives, docs, cfg.in_batch_negatives);
        let (loss, grad) = loss_and_gradients(&g, &batch, cfg.temperature, cfg.loss_form, normalize)?;
        loss_history.push(loss);
        if cfg.learning_rate > 0.0 {
            for (i, d) in grad.params().enumerate() {
                *g.param_mut(i) -= cfg.learning_rate * d;
            }
        }
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 && step + 1 < cfg.steps {
            eval_recall.push((step + 1, recall_at_1(&g, reps, positives, docs, normalize)));
        }
    }
    eval_recall.push((cfg.steps, recall_at_1(&g, reps, positives, docs, normalize)));
    Ok(TrainReport {
        loss_history,
        adapter: g,
        eval_recall,
    })
}

fn make_batch(
    members: &[usize],
    reps: &[Vec<f64>],
    positives: &[Vec<usize>],
    docs: &Matrix,
    in_batch: bool,
) -> TrainBatch {
    let batch_reps = members.iter().map(|&i| reps[i].clone()).collect();
    if !in_batch {
        return TrainBatch {
            reps: batch_reps,
            positives: members.iter().map(|&i| positives[i].clone()).collect(),
            doc_embeddings: docs.clone(),
        };
    }
    let pool: BTreeSet<usize> = members.iter().flat_map(|&i| positives[i].iter().copied()).collect();
    let slot: HashMap<usize, usize> = pool.iter().enumerate().map(|(s, &d)| (d, s)).collect();
    let rows: Vec<Vec<f64>> = pool.iter().map(|&d| docs.row(d).to_vec()).collect();
    TrainBatch {
        reps: batch_reps,
        positives: members
            .iter()
            .map(|&i| positives[i].iter().map(|d| slot[d]).collect())
            .collect(),
        doc_embeddings: Matrix::from_rows(&rows).expect("pool rows share a width"),
    }
}

/// Trains on (representation, positive document ids) pairs against the
/// frozen encodings of `corpus`.
pub fn train_adapter(
    init: &MlpAdapter,
    data: &[(Vec<f64>, Vec<String>)],
    corpus: &[Document],
    encoder: &DocEncoder,
    cfg: &TrainConfig,
) -> Result<TrainReport, RepRetrieverError> {
    if data.is_empty() {
        return Err(RepRetrieverError::NoTrainingData);
    }
    let index = build_dense_index(encoder, corpus)?;
    let row_of: HashMap<&str, usize> = index.doc_ids.iter().enumerate().map(|(i, d)| (d.as_str(), i)).collect();
    let mut reps = Vec::with_capacity(data.len());
    let mut positives = Vec::with_capacity(data.len());
    for (r, ids) in data {
        let pos = ids
            .iter()
            .map(|id| {
                row_of
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| RepRetrieverError::UnknownDocument(id.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        reps.push(r.clone());
        positives.push(pos);
    }
    train_on_embeddings(init, &reps, &positives, &index.embeddings, encoder.normalizes(), cfg)
}
