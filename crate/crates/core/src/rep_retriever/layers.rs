//! Candidate layers around a centre and per-layer retriever selection.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::pipeline::{build_prompt, recall_at_k, QAExample};
use crate::retrieval::{build_dense_index, DocEncoder, Document};
use crate::seeds;
use crate::text::Vocabulary;
use crate::toy_lm::{Capture, ToyLm, ToyLmError};

use super::train::{train_on_embeddings, TrainConfig};
use super::{MlpAdapter, RepRetrieverError};

/// `{l - n·k, …, l, …, l + n·k}` clipped to `[0, num_layers]`, deduplicated
/// and ascending.
pub fn candidate_layers(k: usize, n: usize, l: usize, num_layers: usize) -> Vec<usize> {
    let (k, n, l) = (k as i64, n as i64, l as i64);
    let set: BTreeSet<usize> = (-n..=n)
        .map(|i| (l + i * k).clamp(0, num_layers as i64) as usize)
        .collect();
    set.into_iter().collect()
}

/// Everything select_layer needs besides the examples.
#[derive(Debug, Clone, Copy)]
pub struct SelectLayerInputs<'a> {
    pub lm: &'a ToyLm,
    pub vocab: &'a Vocabulary,
    pub corpus: &'a [Document],
    pub encoder: &'a DocEncoder,
    pub template: &'a str,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSelection {
    pub best_layer: usize,
    /// Validation recall@k per candidate layer.
    pub recall: BTreeMap<usize, f64>,
    pub train_size: usize,
    pub validation_size: usize,
}

/// Deterministic 80/20 split of `0..n` by seeded shuffle; validation gets
/// `round(n/5)` items but at least one.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeds::stream(seed, "select.split"));
    let n_val = ((n as f64) / 5.0).round().max(1.0) as usize;
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

/// Prompt with the example's gold first-hop documents as context.
pub fn gold_prompt(example: &QAExample, template: &str) -> String {
    let docs: Vec<&Document> = example
        .first_hop_ids
        .iter()
        .filter_map(|id| example.documents.iter().find(|d| &d.id == id))
        .collect();
    build_prompt(template, &docs, &example.question)
}

/// (representation at `layer`, second-hop ids) for each example, read from
/// the prompt built on its gold first-hop documents.
pub fn training_pairs(
    inputs: SelectLayerInputs<'_>,
    examples: &[QAExample],
    layer: usize,
) -> Result<Vec<(Vec<f64>, Vec<String>)>, RepRetrieverError> {
    examples
        .iter()
        .map(|ex| {
            let tokens = inputs.vocab.encode(&gold_prompt(ex, inputs.template));
            let r = inputs.lm.extract_representation(inputs.lm.fit_window(&tokens), layer)?;
            Ok((r, ex.second_hop_ids.clone()))
        })
        .collect()
}

/// Trains an adapter for `layer` on [`training_pairs`] of `examples`.
pub fn train_for_layer(
    inputs: SelectLayerInputs<'_>,
    examples: &[QAExample],
    layer: usize,
    cfg: &TrainConfig,
) -> Result<super::TrainReport, RepRetrieverError> {
    let data = training_pairs(inputs, examples, layer)?;
    let init = MlpAdapter::init(inputs.lm.d_model(), inputs.encoder.d_emb(), seeds::derive_seed(cfg.seed, "adapter"));
    super::train_adapter(&init, &data, inputs.corpus, inputs.encoder, cfg)
}

/// Trains one adapter per candidate layer on representations of gold
/// first-hop prompts and scores each by validation recall@`k_eval` of the
/// second-hop documents, with first-hop documents excluded from the search.
/// Ties go to the smaller layer.
pub fn select_layer(
    inputs: SelectLayerInputs<'_>,
    dataset: &[QAExample],
    candidates: &[usize],
    cfg: &TrainConfig,
    k_eval: usize,
) -> Result<LayerSelection, RepRetrieverError> {
    if candidates.is_empty() {
        return Err(RepRetrieverError::NoCandidates);
    }
    if dataset.len() < 2 {
        return Err(RepRetrieverError::NoTrainingData);
    }
    let n_layers = inputs.lm.n_layers();
    if let Some(&bad) = candidates.iter().find(|&&c| c > n_layers) {
        return Err(ToyLmError::LayerOutOfRange { layer: bad, n_layers }.into());
    }
    let index = build_dense_index(inputs.encoder, inputs.corpus)?;
    let row_of: HashMap<&str, usize> = index.doc_ids.iter().enumerate().map(|(i, d)| (d.as_str(), i)).collect();

    let states = dataset
        .iter()
        .map(|ex| {
            let tokens = inputs.vocab.encode(&gold_prompt(ex, inputs.template));
            let tokens = inputs.lm.fit_window(&tokens);
            Ok(inputs.lm.forward(tokens, Capture::Last)?.states)
        })
        .collect::<Result<Vec<_>, RepRetrieverError>>()?;
    let positives = dataset
        .iter()
        .map(|ex| {
            ex.second_hop_ids
                .iter()
                .map(|id| {
                    row_of
                        .get(id.as_str())
                        .copied()
                        .ok_or_else(|| RepRetrieverError::UnknownDocument(id.clone()))
                })
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;

    let (train, val) = split_indices(dataset.len(), cfg.seed);
    let init = MlpAdapter::init(inputs.lm.d_model(), inputs.encoder.d_emb(), seeds::derive_seed(cfg.seed, "adapter"));

    let mut recall = BTreeMap::new();
    let layers: BTreeSet<usize> = candidates.iter().copied().collect();
    for &layer in &layers {
        let reps: Vec<Vec<f64>> = train.iter().map(|&i| states[i][layer].clone()).collect();
        let pos: Vec<Vec<usize>> = train.iter().map(|&i| positives[i].clone()).collect();
        let report = train_on_embeddings(&init, &reps, &pos, &index.embeddings, inputs.encoder.normalizes(), cfg)?;
        let g = report.adapter;
        let mut total = 0.0;
        for &i in &val {
            let ex = &dataset[i];
            let q = g.query_vector(inputs.encoder, &states[i][layer])?;
            let exclude: HashSet<&str> = ex.first_hop_ids.iter().map(String::as_str).collect();
            let hits = index.search_excluding(&q, k_eval, &exclude)?;
            total += recall_at_k(&hits, &ex.second_hop_ids).unwrap_or(0.0);
        }
        recall.insert(layer, total / val.len() as f64);
    }
    let best_layer = recall
        .iter()
        .fold(None::<(usize, f64)>, |best, (&l, &r)| match best {
            Some((_, br)) if br >= r => best,
            _ => Some((l, r)),
        })
        .map(|(l, _)| l)
        .expect("at least one candidate");
    Ok(LayerSelection {
        best_layer,
        recall,
        train_size: train.len(),
        validation_size: val.len(),
    })
}
