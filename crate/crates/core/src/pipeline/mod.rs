//! End-to-end multi-hop retrieval: keyword first hop, hidden-state next hop
//! through the trained adapter, greedy answer generation, and the two
//! baselines (no retrieval, single keyword retrieval).

mod dataset;
mod metrics;

use std::collections::HashSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dataset::{
    generate_synthetic_dataset, read_examples_jsonl, write_examples_jsonl, DatasetSpec, SyntheticData,
    FIRST_RELATIONS, SECOND_RELATIONS,
};
pub use metrics::{accuracy_contains, recall_at_k};

use crate::rep_retriever::{MlpAdapter, RepRetrieverError};
use crate::retrieval::{bm25_search, corpus_map, Bm25Index, DenseIndex, DocEncoder, Document, RetrievalError, RetrievalResult};
use crate::text::Vocabulary;
use crate::toy_lm::{ToyLm, ToyLmError};

pub const DEFAULT_TEMPLATE: &str = "Context: {context}\nQuestion: {question}\nAnswer:";
pub const MAX_NEW_TOKENS: usize = 16;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("gold id set is empty")]
    EmptyGold,
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("invalid example: {0}")]
    InvalidExample(String),
    #[error("config is for mode {got:?}, this path runs {expected}")]
    ModeMismatch { expected: &'static str, got: Mode },
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Model(#[from] ToyLmError),
    #[error(transparent)]
    Retriever(#[from] RepRetrieverError),
}

/// One multi-hop question with its hop-labelled gold documents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAExample {
    pub question: String,
    pub documents: Vec<Document>,
    pub intermediate_answer: String,
    pub final_answer: String,
    pub first_hop_ids: Vec<String>,
    pub second_hop_ids: Vec<String>,
}

impl QAExample {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::InvalidExample(format!("{m} in `{}`", self.question)));
        let ids: HashSet<&str> = self.documents.iter().map(|d| d.id.as_str()).collect();
        let first: HashSet<&str> = self.first_hop_ids.iter().map(String::as_str).collect();
        let second: HashSet<&str> = self.second_hop_ids.iter().map(String::as_str).collect();
        if !first.is_disjoint(&second) {
            return bad("hop id sets overlap");
        }
        if !first.iter().chain(&second).all(|id| ids.contains(id)) {
            return bad("hop id missing from documents");
        }
        if self.intermediate_answer.trim().is_empty() || self.final_answer.trim().is_empty() {
            return bad("empty answer");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Lrag,
    Vanilla,
    NoRetrieval,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Lrag => "lrag",
            Mode::Vanilla => "vanilla",
            Mode::NoRetrieval => "no-retrieval",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub layer: usize,
    pub first_hop_k: usize,
    pub next_hop_k: usize,
    pub prompt_template: String,
    pub mode: Mode,
}

impl PipelineConfig {
    /// Budget `k` split evenly between the hops (first hop gets the odd one).
    pub fn with_budget(mode: Mode, k: usize, layer: usize) -> Self {
        Self {
            layer,
            first_hop_k: k.div_ceil(2).max(1),
            next_hop_k: (k / 2).max(1),
            prompt_template: DEFAULT_TEMPLATE.to_string(),
            mode,
        }
    }

    pub fn total_k(&self) -> usize {
        self.first_hop_k + self.next_hop_k
    }

    fn validate(&self, lm: &ToyLm) -> Result<(), PipelineError> {
        if self.mode != Mode::NoRetrieval && (self.first_hop_k == 0 || self.next_hop_k == 0) {
            return Err(PipelineError::InvalidConfig("retrieval counts must be at least 1".into()));
        }
        if self.mode == Mode::Lrag && self.layer > lm.n_layers() {
            return Err(ToyLmError::LayerOutOfRange {
                layer: self.layer,
                n_layers: lm.n_layers(),
            }
            .into());
        }
        Ok(())
    }
}

/// Fills `{context}` with the documents' texts (space separated) and
/// `{question}` with the question.
pub fn build_prompt(template: &str, context: &[&Document], question: &str) -> String {
    let ctx = context
        .iter()
        .map(|d| d.full_text())
        .collect::<Vec<_>>()
        .join(" ");
    template.replace("{context}", &ctx).replace("{question}", question)
}

/// Language model with the vocabulary it reads and writes.
#[derive(Debug, Clone, Copy)]
pub struct Generator<'a> {
    pub lm: &'a ToyLm,
    pub vocab: &'a Vocabulary,
}

impl Generator<'_> {
    fn tokens(&self, prompt: &str) -> Vec<usize> {
        let t = self.vocab.encode(prompt);
        self.lm.fit_window(&t).to_vec()
    }

    pub fn answer(&self, prompt: &str) -> Result<String, PipelineError> {
        let out = self.lm.generate(&self.tokens(prompt), MAX_NEW_TOKENS)?;
        Ok(self.vocab.decode(&out))
    }

    pub fn representation(&self, prompt: &str, layer: usize) -> Result<Vec<f64>, PipelineError> {
        Ok(self.lm.extract_representation(&self.tokens(prompt), layer)?)
    }
}

/// Indexes over one corpus.
#[derive(Debug, Clone, Copy)]
pub struct Indexes<'a> {
    pub corpus: &'a [Document],
    pub bm25: &'a Bm25Index,
    pub dense: &'a DenseIndex,
    pub encoder: &'a DocEncoder,
}

fn lookup<'a>(corpus: &'a [Document], r: &RetrievalResult) -> Vec<&'a Document> {
    let by_id = corpus_map(corpus);
    r.ids().filter_map(|id| by_id.get(id).copied()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LragOutput {
    pub answer: String,
    pub first_hop: RetrievalResult,
    pub next_hop: RetrievalResult,
}

pub fn run_lrag(
    generator: Generator<'_>,
    idx: Indexes<'_>,
    g: &MlpAdapter,
    cfg: &PipelineConfig,
    question: &str,
) -> Result<LragOutput, PipelineError> {
    if cfg.mode != Mode::Lrag {
        return Err(PipelineError::ModeMismatch {
            expected: "lrag",
            got: cfg.mode,
        });
    }
    cfg.validate(generator.lm)?;
    if idx.corpus.is_empty() {
        return Err(RetrievalError::EmptyCorpus.into());
    }
    let first_hop = bm25_search(idx.bm25, question, cfg.first_hop_k)?;
    let first_docs = lookup(idx.corpus, &first_hop);
    let prompt = build_prompt(&cfg.prompt_template, &first_docs, question);
    let r = generator.representation(&prompt, cfg.layer)?;
    let q = g.query_vector(idx.encoder, &r)?;
    let exclude: HashSet<&str> = first_hop.ids().collect();
    let next_hop = idx.dense.search_excluding(&q, cfg.next_hop_k, &exclude)?;
    let mut all_docs = first_docs;
    all_docs.extend(lookup(idx.corpus, &next_hop));
    let answer = generator.answer(&build_prompt(&cfg.prompt_template, &all_docs, question))?;
    Ok(LragOutput {
        answer,
        first_hop,
        next_hop,
    })
}

pub fn run_baseline(
    generator: Generator<'_>,
    corpus: &[Document],
    bm25: &Bm25Index,
    cfg: &PipelineConfig,
    question: &str,
) -> Result<(String, RetrievalResult), PipelineError> {
    let retrieved = match cfg.mode {
        Mode::Vanilla => {
            cfg.validate(generator.lm)?;
            bm25_search(bm25, question, cfg.total_k())?
        }
        Mode::NoRetrieval => RetrievalResult::empty(0),
        Mode::Lrag => {
            return Err(PipelineError::ModeMismatch {
                expected: "a baseline",
                got: cfg.mode,
            })
        }
    };
    let docs = lookup(corpus, &retrieved);
    let answer = generator.answer(&build_prompt(&cfg.prompt_template, &docs, question))?;
    Ok((answer, retrieved))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExampleRecord {
    pub question: String,
    pub answer: String,
    pub retrieved: Vec<String>,
    pub recall: f64,
    pub correct: bool,
    pub latency_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub mode: Mode,
    pub k: usize,
    pub layer: Option<usize>,
    pub recall_at_k: f64,
    pub accuracy: f64,
    pub mean_latency_seconds: f64,
    pub num_examples: usize,
    pub num_failures: usize,
    pub examples: Vec<ExampleRecord>,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "mode,k,recall,accuracy,latency_s";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6}",
            self.mode.as_str(),
            self.k,
            self.recall_at_k,
            self.accuracy,
            self.mean_latency_seconds
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }
}

/// Runs the configured mode over every example. Second-hop recall is
/// computed over all retrieved documents (zero without retrieval).
/// Failures on single examples are recorded and count as misses.
pub fn evaluate(
    generator: Generator<'_>,
    idx: Indexes<'_>,
    g: Option<&MlpAdapter>,
    dataset: &[QAExample],
    cfg: &PipelineConfig,
) -> Result<EvalReport, PipelineError> {
    if dataset.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    cfg.validate(generator.lm)?;
    if cfg.mode == Mode::Lrag && g.is_none() {
        return Err(PipelineError::InvalidConfig("lrag mode needs a trained adapter".into()));
    }
    let mut records = Vec::with_capacity(dataset.len());
    for ex in dataset {
        let start = Instant::now();
        let outcome = match (cfg.mode, g) {
            (Mode::Lrag, Some(g)) => run_lrag(generator, idx, g, cfg, &ex.question).map(|o| {
                let mut all = o.first_hop.clone();
                all.ranked.extend(o.next_hop.ranked);
                all.k_requested = cfg.total_k();
                (o.answer, all)
            }),
            _ => run_baseline(generator, idx.corpus, idx.bm25, cfg, &ex.question),
        };
        let latency_s = start.elapsed().as_secs_f64();
        let record = match outcome {
            Ok((answer, retrieved)) => {
                let recall = if cfg.mode == Mode::NoRetrieval {
                    0.0
                } else {
                    recall_at_k(&retrieved, &ex.second_hop_ids)?
                };
                ExampleRecord {
                    question: ex.question.clone(),
                    correct: accuracy_contains(&answer, &ex.final_answer),
                    answer,
                    retrieved: retrieved.ids().map(str::to_string).collect(),
                    recall,
                    latency_s,
                    error: None,
                }
            }
            Err(e) => ExampleRecord {
                question: ex.question.clone(),
                answer: String::new(),
                retrieved: Vec::new(),
                recall: 0.0,
                correct: false,
                latency_s,
                error: Some(e.to_string()),
            },
        };
        records.push(record);
    }
    let n = records.len() as f64;
    Ok(EvalReport {
        mode: cfg.mode,
        k: if cfg.mode == Mode::NoRetrieval { 0 } else { cfg.total_k() },
        layer: (cfg.mode == Mode::Lrag).then_some(cfg.layer),
        recall_at_k: records.iter().map(|r| r.recall).sum::<f64>() / n,
        accuracy: records.iter().filter(|r| r.correct).count() as f64 / n,
        mean_latency_seconds: records.iter().map(|r| r.latency_s).sum::<f64>() / n,
        num_examples: records.len(),
        num_failures: records.iter().filter(|r| r.error.is_some()).count(),
        examples: records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_assembly() {
        let d = Document::new("1", "t", "body");
        assert_eq!(
            build_prompt(DEFAULT_TEMPLATE, &[&d], "why"),
            "Context: t body\nQuestion: why\nAnswer:"
        );
        assert_eq!(build_prompt(DEFAULT_TEMPLATE, &[], "why"), "Context: \nQuestion: why\nAnswer:");
    }

    #[test]
    fn budget_split() {
        let c = PipelineConfig::with_budget(Mode::Lrag, 4, 3);
        assert_eq!((c.first_hop_k, c.next_hop_k), (2, 2));
        let c = PipelineConfig::with_budget(Mode::Lrag, 5, 3);
        assert_eq!((c.first_hop_k, c.next_hop_k), (3, 2));
    }
}
