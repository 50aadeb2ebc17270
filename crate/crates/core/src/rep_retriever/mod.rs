//! Representation retriever: an MLP adapter `g` maps a hidden state of the
//! language model into the document encoder's space, where it is scored
//! against frozen document encodings by inner product. Only `g` trains,
//! with an InfoNCE objective and hand-derived gradients.

mod layers;
mod loss;
mod task;
mod train;

use std::path::Path;

use rand_distr::{Distribution, Normal};
use thiserror::Error;

pub use task::SeparableTask;
pub use layers::{
    candidate_layers, gold_prompt, select_layer, split_indices, train_for_layer, training_pairs, LayerSelection,
    SelectLayerInputs,
};
pub use loss::{infonce_batch, infonce_single, loss_and_gradients, loss_gradients, LossForm, TrainBatch};
pub use train::{
    recall_at_1, train_adapter, train_on_embeddings, windowed_means, TrainConfig, TrainReport,
};

use crate::linalg::gelu;
use crate::matrix::{dot, Matrix};
use crate::retrieval::{DocEncoder, Document, RetrievalError};
use crate::seeds;
use crate::tensor_store::{self, TensorStore, TensorStoreError};
use crate::toy_lm::ToyLmError;

#[derive(Debug, Error)]
pub enum RepRetrieverError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("no training data")]
    NoTrainingData,
    #[error("unknown document id `{0}`")]
    UnknownDocument(String),
    #[error("no candidate layers")]
    NoCandidates,
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Model(#[from] ToyLmError),
    #[error(transparent)]
    Store(#[from] TensorStoreError),
}

/// `g(r) = w2ᵀ · GELU(w1ᵀ r + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpAdapter {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

/// Intermediate values of one adapter evaluation, kept for backprop.
#[derive(Debug, Clone)]
pub(crate) struct AdapterPass {
    pub pre: Vec<f64>,
    pub hidden: Vec<f64>,
    pub out: Vec<f64>,
}

impl MlpAdapter {
    /// Seeded Gaussian initialization (std 0.02) with `d_hidden = 2·d_model`.
    pub fn init(d_model: usize, d_emb: usize, seed: u64) -> Self {
        Self::init_with_hidden(d_model, 2 * d_model, d_emb, seed)
    }

    pub fn init_with_hidden(d_model: usize, d_hidden: usize, d_emb: usize, seed: u64) -> Self {
        let normal = Normal::new(0.0, 0.02).expect("positive std");
        let draw = |name: &str, n: usize| -> Vec<f64> {
            let mut rng = seeds::stream(seed, name);
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        };
        Self {
            w1: Matrix::new(d_model, d_hidden, draw("adapter.w1", d_model * d_hidden)).expect("finite"),
            b1: draw("adapter.b1", d_hidden),
            w2: Matrix::new(d_hidden, d_emb, draw("adapter.w2", d_hidden * d_emb)).expect("finite"),
            b2: draw("adapter.b2", d_emb),
        }
    }

    pub fn zeros(d_model: usize, d_hidden: usize, d_emb: usize) -> Self {
        Self {
            w1: Matrix::zeros(d_model, d_hidden),
            b1: vec![0.0; d_hidden],
            w2: Matrix::zeros(d_hidden, d_emb),
            b2: vec![0.0; d_emb],
        }
    }

    pub fn from_parts(w1: Matrix, b1: Vec<f64>, w2: Matrix, b2: Vec<f64>) -> Result<Self, RepRetrieverError> {
        if b1.len() != w1.cols() || w2.rows() != w1.cols() || b2.len() != w2.cols() {
            return Err(RepRetrieverError::DimensionMismatch(format!(
                "w1 {:?}, b1 {}, w2 {:?}, b2 {}",
                w1.shape(),
                b1.len(),
                w2.shape(),
                b2.len()
            )));
        }
        let a = Self { w1, b1, w2, b2 };
        if !a.params().all(|x| x.is_finite()) {
            return Err(RepRetrieverError::DimensionMismatch("non-finite parameter".into()));
        }
        Ok(a)
    }

    pub fn d_model(&self) -> usize {
        self.w1.rows()
    }

    pub fn d_hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn d_emb(&self) -> usize {
        self.w2.cols()
    }

    pub fn num_params(&self) -> usize {
        self.w1.data().len() + self.b1.len() + self.w2.data().len() + self.b2.len()
    }

    /// All parameters in a fixed order: w1, b1, w2, b2 (row-major).
    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.w1
            .data()
            .iter()
            .chain(&self.b1)
            .chain(self.w2.data())
            .chain(&self.b2)
            .copied()
    }

    /// Mutable access to the `i`-th parameter in [`MlpAdapter::params`] order.
    pub fn param_mut(&mut self, mut i: usize) -> &mut f64 {
        let n1 = self.w1.data().len();
        if i < n1 {
            return &mut self.w1.data_mut()[i];
        }
        i -= n1;
        if i < self.b1.len() {
            return &mut self.b1[i];
        }
        i -= self.b1.len();
        let n2 = self.w2.data().len();
        if i < n2 {
            return &mut self.w2.data_mut()[i];
        }
        &mut self.b2[i - n2]
    }

    fn check_input(&self, r: &[f64]) -> Result<(), RepRetrieverError> {
        if r.len() != self.d_model() {
            return Err(RepRetrieverError::DimensionMismatch(format!(
                "representation has {} entries, adapter expects {}",
                r.len(),
                self.d_model()
            )));
        }
        Ok(())
    }

    pub(crate) fn pass(&self, r: &[f64]) -> AdapterPass {
        let mut pre = self.w1.left_mul(r);
        pre.iter_mut().zip(&self.b1).for_each(|(p, b)| *p += b);
        let hidden: Vec<f64> = pre.iter().map(|&x| gelu(x)).collect();
        let mut out = self.w2.left_mul(&hidden);
        out.iter_mut().zip(&self.b2).for_each(|(o, b)| *o += b);
        AdapterPass { pre, hidden, out }
    }

    pub fn forward(&self, r: &[f64]) -> Result<Vec<f64>, RepRetrieverError> {
        self.check_input(r)?;
        Ok(self.pass(r).out)
    }

    /// Adapter output after the encoder's own output transform, ready to
    /// be dotted with document encodings.
    pub fn query_vector(&self, encoder: &DocEncoder, r: &[f64]) -> Result<Vec<f64>, RepRetrieverError> {
        let z = self.forward(r)?;
        if z.len() != encoder.d_emb() {
            return Err(RepRetrieverError::DimensionMismatch(format!(
                "adapter emits {} values, encoder space has {}",
                z.len(),
                encoder.d_emb()
            )));
        }
        Ok(encoder.finish(&z))
    }

    pub fn to_store(&self) -> TensorStore {
        let mut s = TensorStore::new();
        let row = |v: &[f64]| Matrix::row_vector(v).expect("finite bias");
        s.insert("adapter.w1", self.w1.clone()).expect("unique");
        s.insert("adapter.b1", row(&self.b1)).expect("unique");
        s.insert("adapter.w2", self.w2.clone()).expect("unique");
        s.insert("adapter.b2", row(&self.b2)).expect("unique");
        s
    }

    pub fn from_store(store: &TensorStore) -> Result<Self, RepRetrieverError> {
        let get = |n: &str| store.get_matrix(n).cloned();
        Self::from_parts(
            get("adapter.w1")?,
            get("adapter.b1")?.into_data(),
            get("adapter.w2")?,
            get("adapter.b2")?.into_data(),
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), RepRetrieverError> {
        tensor_store::save_tensor_file(&self.to_store(), path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RepRetrieverError> {
        Self::from_store(&tensor_store::load_tensor_file(path)?)
    }
}

pub fn adapter_forward(g: &MlpAdapter, r: &[f64]) -> Result<Vec<f64>, RepRetrieverError> {
    g.forward(r)
}

/// `s(r, d) = f(g(r))ᵀ f(d)`.
pub fn relevance_score(
    g: &MlpAdapter,
    encoder: &DocEncoder,
    r: &[f64],
    d: &Document,
) -> Result<f64, RepRetrieverError> {
    let q = g.query_vector(encoder, r)?;
    let e = encoder.encode(&d.full_text())?;
    Ok(dot(&q, &e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::Vocabulary;

    #[test]
    fn zero_adapter_outputs_zero() {
        let g = MlpAdapter::zeros(4, 8, 3);
        assert_eq!(g.forward(&[1.0, -2.0, 3.0, 0.5]).unwrap(), vec![0.0; 3]);
        assert!(g.forward(&[1.0]).is_err());
    }

    #[test]
    fn identity_slices_follow_gelu() {
        let mut w1 = Matrix::zeros(2, 2);
        w1.set(0, 0, 1.0);
        w1.set(1, 1, 1.0);
        let g = MlpAdapter::from_parts(w1.clone(), vec![0.0; 2], w1, vec![0.0; 2]).unwrap();
        let out = g.forward(&[0.3, -0.2]).unwrap();
        assert_eq!(out, vec![gelu(0.3), gelu(-0.2)]);
    }

    #[test]
    fn param_indexing_covers_everything() {
        let mut g = MlpAdapter::init_with_hidden(3, 4, 2, 1);
        let n = g.num_params();
        assert_eq!(n, 3 * 4 + 4 + 4 * 2 + 2);
        for i in 0..n {
            *g.param_mut(i) = i as f64;
        }
        assert_eq!(g.params().collect::<Vec<_>>(), (0..n).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn store_roundtrip() {
        let g = MlpAdapter::init(4, 3, 7);
        assert_eq!(MlpAdapter::from_store(&g.to_store()).unwrap(), g);
    }

    #[test]
    fn self_similarity_is_one() {
        let vocab = Vocabulary::from_words(["alpha", "beta"]);
        let enc = DocEncoder::new(vocab, 2, 3, true);
        let d = Document::new("d", "", "alpha");
        let target = enc.encode("alpha").unwrap();
        // A linear adapter that emits the document encoding (scaled).
        let w2 = Matrix::zeros(1, 2);
        let g = MlpAdapter::from_parts(Matrix::zeros(1, 1), vec![0.0], w2, vec![3.0 * target[0], 3.0 * target[1]])
            .unwrap();
        assert!((relevance_score(&g, &enc, &[0.0], &d).unwrap() - 1.0).abs() < 1e-12);
    }
}
