//! First-hop sparse retrieval (Okapi BM25) and exhaustive dense retrieval
//! over documents encoded by a frozen seeded projection encoder.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::{dot, normalized, Matrix};
use crate::seeds;
use crate::tensor_store::{self, TensorStore, TensorStoreError};
use crate::text::{tokenize, Vocabulary};

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("duplicate document id `{0}`")]
    DuplicateId(String),
    #[error("document `{0}` has empty text")]
    EmptyDocument(String),
    #[error("text has no tokens")]
    EmptyAfterTokenization,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Store(#[from] TensorStoreError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub title: String,
    pub text: String,
}

impl Document {
    pub fn new(id: impl Into<String>, title: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            title: title.into(),
            text: text.into(),
        }
    }

    /// Title and body, the text both retrievers index.
    pub fn full_text(&self) -> String {
        if self.title.is_empty() {
            self.text.clone()
        } else {
            format!("{} {}", self.title, self.text)
        }
    }
}

/// Checks corpus invariants: non-empty, unique ids, non-empty texts.
pub fn validate_corpus(corpus: &[Document]) -> Result<(), RetrievalError> {
    if corpus.is_empty() {
        return Err(RetrievalError::EmptyCorpus);
    }
    let mut seen = HashSet::new();
    for d in corpus {
        if !seen.insert(d.id.as_str()) {
            return Err(RetrievalError::DuplicateId(d.id.clone()));
        }
        if d.text.trim().is_empty() {
            return Err(RetrievalError::EmptyDocument(d.id.clone()));
        }
    }
    Ok(())
}

pub fn read_corpus_jsonl(path: impl AsRef<Path>) -> Result<Vec<Document>, RetrievalError> {
    let file = std::fs::File::open(path)?;
    let mut docs = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|e| RetrievalError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        docs.push(doc);
    }
    validate_corpus(&docs)?;
    Ok(docs)
}

pub fn write_corpus_jsonl(corpus: &[Document], path: impl AsRef<Path>) -> Result<(), RetrievalError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for d in corpus {
        serde_json::to_writer(&mut out, d).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Ranked hits, score descending with ties broken by id ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub ranked: Vec<(String, f64)>,
    pub k_requested: usize,
}

impl RetrievalResult {
    pub fn empty(k: usize) -> Self {
        Self {
            ranked: Vec::new(),
            k_requested: k,
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.ranked.iter().map(|(id, _)| id.as_str())
    }

    pub fn len(&self) -> usize {
        self.ranked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranked.is_empty()
    }
}

/// Total order used by every ranking: score descending, id ascending.
pub fn rank_order(a: &(String, f64), b: &(String, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

fn top_k(mut hits: Vec<(String, f64)>, k: usize) -> RetrievalResult {
    hits.sort_by(rank_order);
    hits.truncate(k);
    RetrievalResult {
        ranked: hits,
        k_requested: k,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bm25Index {
    /// term → (doc ordinal, term frequency), ordinals ascending.
    pub postings: BTreeMap<String, Vec<(usize, usize)>>,
    pub doc_ids: Vec<String>,
    pub doc_lengths: Vec<usize>,
    pub avg_doc_length: f64,
    pub k1: f64,
    pub b: f64,
}

pub fn build_bm25_index(corpus: &[Document], k1: f64, b: f64) -> Result<Bm25Index, RetrievalError> {
    if corpus.is_empty() {
        return Err(RetrievalError::EmptyCorpus);
    }
    let mut postings: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
    let mut doc_lengths = Vec::with_capacity(corpus.len());
    for (ord, doc) in corpus.iter().enumerate() {
        let tokens = tokenize(&doc.full_text());
        doc_lengths.push(tokens.len());
        let mut tf: BTreeMap<String, usize> = BTreeMap::new();
        for t in tokens {
            *tf.entry(t).or_default() += 1;
        }
        for (term, count) in tf {
            postings.entry(term).or_default().push((ord, count));
        }
    }
    let avg_doc_length = doc_lengths.iter().sum::<usize>() as f64 / corpus.len() as f64;
    Ok(Bm25Index {
        postings,
        doc_ids: corpus.iter().map(|d| d.id.clone()).collect(),
        doc_lengths,
        avg_doc_length,
        k1,
        b,
    })
}

impl Bm25Index {
    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn document_frequency(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.doc_count() as f64;
        let df = self.document_frequency(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Scores every document that shares at least one term with the query.
    /// Repeated query terms contribute once per occurrence.
    pub fn score_all(&self, query: &str) -> Vec<(usize, f64)> {
        let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
        for term in tokenize(query) {
            let Some(list) = self.postings.get(&term) else {
                continue;
            };
            let idf = self.idf(&term);
            for &(ord, tf) in list {
                let tf = tf as f64;
                let len_norm = 1.0 - self.b + self.b * self.doc_lengths[ord] as f64 / self.avg_doc_length;
                *acc.entry(ord).or_default() += idf * tf * (self.k1 + 1.0) / (tf + self.k1 * len_norm);
            }
        }
        acc.into_iter().collect()
    }
}

/// Top-`k` BM25 hits. A query that shares no term with the corpus yields
/// an empty result.
pub fn bm25_search(index: &Bm25Index, query: &str, k: usize) -> Result<RetrievalResult, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    let hits = index
        .score_all(query)
        .into_iter()
        .map(|(ord, s)| (index.doc_ids[ord].clone(), s))
        .collect();
    Ok(top_k(hits, k))
}

/// Frozen document encoder: mean of per-token projection rows, optionally
/// L2-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct DocEncoder {
    projection: Matrix,
    vocab: Vocabulary,
    normalize: bool,
}

impl DocEncoder {
    pub fn new(vocab: Vocabulary, d_emb: usize, seed: u64, normalize: bool) -> Self {
        let mut rng = seeds::stream(seed, "encoder.projection");
        let n = vocab.len();
        let data = (0..n * d_emb).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self {
            projection: Matrix::new(n, d_emb, data).expect("gaussian draws are finite"),
            vocab,
            normalize,
        }
    }

    pub fn from_projection(vocab: Vocabulary, projection: Matrix, normalize: bool) -> Result<Self, RetrievalError> {
        if projection.rows() != vocab.len() {
            return Err(RetrievalError::DimensionMismatch {
                expected: vocab.len(),
                got: projection.rows(),
            });
        }
        Ok(Self {
            projection,
            vocab,
            normalize,
        })
    }

    pub fn d_emb(&self) -> usize {
        self.projection.cols()
    }

    pub fn normalizes(&self) -> bool {
        self.normalize
    }

    pub fn projection(&self) -> &Matrix {
        &self.projection
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Applies the encoder's output transform to an arbitrary vector.
    pub fn finish(&self, v: &[f64]) -> Vec<f64> {
        if self.normalize {
            normalized(v)
        } else {
            v.to_vec()
        }
    }

    pub fn encode(&self, text: &str) -> Result<Vec<f64>, RetrievalError> {
        let ids = self.vocab.encode(text);
        if ids.is_empty() {
            return Err(RetrievalError::EmptyAfterTokenization);
        }
        // Weight each distinct token by its share of the text, so repeating
        // a text leaves its encoding unchanged bit for bit.
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &id in &ids {
            *counts.entry(id).or_default() += 1;
        }
        let n = ids.len() as f64;
        let mut acc = vec![0.0; self.d_emb()];
        for (id, c) in counts {
            let w = c as f64 / n;
            acc.iter_mut().zip(self.projection.row(id)).for_each(|(a, p)| *a += w * p);
        }
        Ok(self.finish(&acc))
    }

    pub fn to_store(&self) -> TensorStore {
        let mut s = TensorStore::new();
        s.insert("encoder.projection", self.projection.clone())
            .expect("single entry");
        s.set_metadata("vocab", self.vocab.to_json());
        s.set_metadata("encoder.normalize", self.normalize.to_string());
        s
    }
}

pub fn encode_document(encoder: &DocEncoder, text: &str) -> Result<Vec<f64>, RetrievalError> {
    encoder.encode(text)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseIndex {
    pub doc_ids: Vec<String>,
    pub embeddings: Matrix,
}

pub fn build_dense_index(encoder: &DocEncoder, corpus: &[Document]) -> Result<DenseIndex, RetrievalError> {
    if corpus.is_empty() {
        return Err(RetrievalError::EmptyCorpus);
    }
    let rows = corpus
        .iter()
        .map(|d| encoder.encode(&d.full_text()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DenseIndex {
        doc_ids: corpus.iter().map(|d| d.id.clone()).collect(),
        embeddings: Matrix::from_rows(&rows).expect("encodings are finite and equal width"),
    })
}

impl DenseIndex {
    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.doc_ids.iter().position(|d| d == id)
    }

    /// Top-`k` by inner product, skipping ids in `exclude`.
    pub fn search_excluding(
        &self,
        query: &[f64],
        k: usize,
        exclude: &HashSet<&str>,
    ) -> Result<RetrievalResult, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        if query.len() != self.embeddings.cols() {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.embeddings.cols(),
                got: query.len(),
            });
        }
        let hits = self
            .doc_ids
            .iter()
            .enumerate()
            .filter(|(_, id)| !exclude.contains(id.as_str()))
            .map(|(i, id)| (id.clone(), dot(self.embeddings.row(i), query)))
            .collect();
        Ok(top_k(hits, k))
    }

    /// Embeddings under `dense.embeddings` plus the id list in metadata.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), RetrievalError> {
        let mut s = TensorStore::new();
        s.insert("dense.embeddings", self.embeddings.clone())?;
        s.set_metadata(
            "doc_ids",
            serde_json::to_string(&self.doc_ids).expect("string list serializes"),
        );
        tensor_store::save_tensor_file(&s, path)?;
        Ok(())
    }
}

pub fn dense_search(index: &DenseIndex, query_vec: &[f64], k: usize) -> Result<RetrievalResult, RetrievalError> {
    index.search_excluding(query_vec, k, &HashSet::new())
}

/// Document lookup by id.
pub fn corpus_map(corpus: &[Document]) -> HashMap<&str, &Document> {
    corpus.iter().map(|d| (d.id.as_str(), d)).collect()
}
