//! Seeded decoder-only transformer small enough to test exhaustively.
//!
//! Pre-norm blocks with RMS normalization, causal multi-head attention and a
//! GELU MLP, joined by a residual stream. Fixed sinusoidal positions are
//! added to the token embeddings. Hidden states are captured after every
//! block at one chosen position, so the stream can be read layer by layer.

mod attention;
pub mod constructed;

use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use attention::{attention, attention_with_weights, AttentionWeights};

use crate::linalg::gelu;
use crate::matrix::Matrix;
use crate::seeds;
use crate::tensor_store::{self, TensorStore, TensorStoreError};
use crate::text::Vocabulary;

/// Standard deviation of the seeded parameter initialization.
pub const INIT_STD: f64 = 0.02;
const RMS_EPS: f64 = 1e-6;
const CONFIG_KEY: &str = "toy_lm.config";
const VOCAB_KEY: &str = "vocab";

#[derive(Debug, Error)]
pub enum ToyLmError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("token id {token} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { token: usize, vocab_size: usize },
    #[error("sequence of {len} tokens exceeds max_seq {max_seq}")]
    SequenceTooLong { len: usize, max_seq: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("layer {layer} out of range (model has {n_layers} layers)")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("capture position {position} outside a sequence of {len}")]
    PositionOutOfRange { position: usize, len: usize },
    #[error("model file lacks `{0}` metadata")]
    MissingMetadata(&'static str),
    #[error("bad metadata: {0}")]
    BadMetadata(String),
    #[error(transparent)]
    Store(#[from] TensorStoreError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyLmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for ToyLmConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            d_model: 64,
            n_layers: 8,
            n_heads: 4,
            d_head: 16,
            max_seq: 256,
            seed: 42,
        }
    }
}

impl ToyLmConfig {
    pub fn validate(&self) -> Result<(), ToyLmError> {
        let bad = |m: String| Err(ToyLmError::InvalidConfig(m));
        if self.vocab_size < 2 {
            return bad(format!("vocab_size {} < 2", self.vocab_size));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_head == 0 || self.max_seq == 0 {
            return bad("d_model, n_heads, d_head and max_seq must be at least 1".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_heads * self.d_head != self.d_model {
            return bad(format!(
                "n_heads {} x d_head {} != d_model {}",
                self.n_heads, self.d_head, self.d_model
            ));
        }
        Ok(())
    }

    pub fn d_mlp(&self) -> usize {
        4 * self.d_model
    }
}

/// Parameters of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub mlp_in: Matrix,
    pub mlp_out: Matrix,
    pub norm1: Vec<f64>,
    pub norm2: Vec<f64>,
}

impl Block {
    /// Blocks whose output projections are zero add nothing to the stream;
    /// forward skips them.
    fn attn_active(&self) -> bool {
        !self.w_o.is_all_zero()
    }

    fn mlp_active(&self) -> bool {
        !self.mlp_out.is_all_zero()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyLm {
    config: ToyLmConfig,
    embedding: Matrix,
    blocks: Vec<Block>,
    final_norm: Vec<f64>,
    unembedding: Matrix,
    active: Vec<(bool, bool)>,
}

/// Where to record hidden states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Capture {
    #[default]
    Last,
    At(usize),
}

/// Hidden states at one position: the post-embedding state, then the
/// residual stream after each block (`n_layers + 1` entries).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenStateTrace {
    pub states: Vec<Vec<f64>>,
    pub final_logits: Vec<f64>,
    pub position: usize,
}

/// Golden-trace file layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenTrace {
    pub config: ToyLmConfig,
    pub tokens: Vec<usize>,
    pub states: Vec<Vec<f64>>,
    pub final_logits: Vec<f64>,
}

pub fn init_toy_lm(config: ToyLmConfig) -> Result<ToyLm, ToyLmError> {
    config.validate()?;
    let root = seeds::derive_seed(config.seed, "model");
    let normal = Normal::new(0.0, INIT_STD).expect("positive std");
    let draw = |name: &str, rows: usize, cols: usize| -> Matrix {
        let mut rng = seeds::stream(root, name);
        let data = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
        Matrix::new(rows, cols, data).expect("gaussian draws are finite")
    };
    let (v, d, dm) = (config.vocab_size, config.d_model, config.d_mlp());
    let blocks = (0..config.n_layers)
        .map(|i| Block {
            w_q: draw(&format!("layer.{i}.w_q"), d, d),
            w_k: draw(&format!("layer.{i}.w_k"), d, d),
            w_v: draw(&format!("layer.{i}.w_v"), d, d),
            w_o: draw(&format!("layer.{i}.w_o"), d, d),
            mlp_in: draw(&format!("layer.{i}.mlp_in"), d, dm),
            mlp_out: draw(&format!("layer.{i}.mlp_out"), dm, d),
            norm1: vec![1.0; d],
            norm2: vec![1.0; d],
        })
        .collect();
    ToyLm::from_parts(
        config,
        draw("embedding", v, d),
        blocks,
        vec![1.0; d],
        draw("unembedding", d, v),
    )
}

/// Fixed sinusoidal position code.
pub fn positional_encoding(pos: usize, d_model: usize) -> Vec<f64> {
    (0..d_model)
        .map(|i| {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d_model as f64);
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// `x / sqrt(mean(x²) + eps) ⊙ gain`.
pub fn rms_norm(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
}

impl ToyLm {
    /// Assembles a model from explicit parameters, checking every shape.
    pub fn from_parts(
        config: ToyLmConfig,
        embedding: Matrix,
        blocks: Vec<Block>,
        final_norm: Vec<f64>,
        unembedding: Matrix,
    ) -> Result<Self, ToyLmError> {
        config.validate()?;
        let (v, d, dm) = (config.vocab_size, config.d_model, config.d_mlp());
        let check = |name: String, m: &Matrix, shape: (usize, usize)| {
            if m.shape() != shape {
                return Err(ToyLmError::ShapeMismatch(format!(
                    "{name} is {:?}, expected {shape:?}",
                    m.shape()
                )));
            }
            if !m.all_finite() {
                return Err(ToyLmError::ShapeMismatch(format!("{name} has non-finite entries")));
            }
            Ok(())
        };
        let check_vec = |name: String, g: &[f64]| {
            if g.len() != d || g.iter().any(|x| !x.is_finite()) {
                return Err(ToyLmError::ShapeMismatch(format!(
                    "{name} must hold {d} finite values"
                )));
            }
            Ok(())
        };
        if blocks.len() != config.n_layers {
            return Err(ToyLmError::ShapeMismatch(format!(
                "{} blocks for n_layers {}",
                blocks.len(),
                config.n_layers
            )));
        }
        check("embedding".into(), &embedding, (v, d))?;
        check("unembedding".into(), &unembedding, (d, v))?;
        check_vec("final_norm".into(), &final_norm)?;
        for (i, b) in blocks.iter().enumerate() {
            for (n, m) in [("w_q", &b.w_q), ("w_k", &b.w_k), ("w_v", &b.w_v), ("w_o", &b.w_o)] {
                check(format!("layer.{i}.{n}"), m, (d, d))?;
            }
            check(format!("layer.{i}.mlp_in"), &b.mlp_in, (d, dm))?;
            check(format!("layer.{i}.mlp_out"), &b.mlp_out, (dm, d))?;
            check_vec(format!("layer.{i}.norm1"), &b.norm1)?;
            check_vec(format!("layer.{i}.norm2"), &b.norm2)?;
        }
        let active = blocks.iter().map(|b| (b.attn_active(), b.mlp_active())).collect();
        Ok(Self {
            config,
            embedding,
            blocks,
            final_norm,
            unembedding,
            active,
        })
    }

    pub fn config(&self) -> &ToyLmConfig {
        &self.config
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn embedding(&self) -> &Matrix {
        &self.embedding
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn unembedding(&self) -> &Matrix {
        &self.unembedding
    }

    pub fn final_norm(&self) -> &[f64] {
        &self.final_norm
    }

    fn validate_tokens(&self, tokens: &[usize]) -> Result<(), ToyLmError> {
        if tokens.is_empty() {
            return Err(ToyLmError::EmptySequence);
        }
        if tokens.len() > self.config.max_seq {
            return Err(ToyLmError::SequenceTooLong {
                len: tokens.len(),
                max_seq: self.config.max_seq,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(ToyLmError::TokenOutOfRange {
                token: t,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Runs the model and records the residual stream at `capture` after the
    /// embedding and after every block.
    pub fn forward(&self, tokens: &[usize], capture: Capture) -> Result<HiddenStateTrace, ToyLmError> {
        self.validate_tokens(tokens)?;
        let n = tokens.len();
        let position = match capture {
            Capture::Last => n - 1,
            Capture::At(p) if p < n => p,
            Capture::At(p) => return Err(ToyLmError::PositionOutOfRange { position: p, len: n }),
        };
        // Positions after the capture point cannot influence it.
        let n = position + 1;
        let d = self.config.d_model;

        let mut x: Vec<Vec<f64>> = tokens[..n]
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let pe = positional_encoding(i, d);
                self.embedding.row(t).iter().zip(pe).map(|(e, p)| e + p).collect()
            })
            .collect();
        let mut states = Vec::with_capacity(self.config.n_layers + 1);
        states.push(x[position].clone());

        for (block, &(attn_on, mlp_on)) in self.blocks.iter().zip(&self.active) {
            if attn_on {
                let normed: Vec<Vec<f64>> = x.iter().map(|r| rms_norm(r, &block.norm1)).collect();
                let heads = attention(&block.w_q, &block.w_k, &block.w_v, &normed, self.config.n_heads)?;
                for (xi, hi) in x.iter_mut().zip(&heads) {
                    let out = block.w_o.left_mul(hi);
                    xi.iter_mut().zip(out).for_each(|(a, b)| *a += b);
                }
            }
            if mlp_on {
                for xi in x.iter_mut() {
                    let normed = rms_norm(xi, &block.norm2);
                    let hidden: Vec<f64> = block.mlp_in.left_mul(&normed).into_iter().map(gelu).collect();
                    let out = block.mlp_out.left_mul(&hidden);
                    xi.iter_mut().zip(out).for_each(|(a, b)| *a += b);
                }
            }
            states.push(x[position].clone());
        }

        let final_logits = self.logits(&x[position], true);
        Ok(HiddenStateTrace {
            states,
            final_logits,
            position,
        })
    }

    /// `W_U` applied to `h`, optionally after the final norm.
    pub fn logits(&self, h: &[f64], apply_final_norm: bool) -> Vec<f64> {
        if apply_final_norm {
            self.unembedding.left_mul(&rms_norm(h, &self.final_norm))
        } else {
            self.unembedding.left_mul(h)
        }
    }

    /// Residual-stream state at the last token after `layer` blocks.
    pub fn extract_representation(&self, tokens: &[usize], layer: usize) -> Result<Vec<f64>, ToyLmError> {
        if layer > self.config.n_layers {
            return Err(ToyLmError::LayerOutOfRange {
                layer,
                n_layers: self.config.n_layers,
            });
        }
        let mut trace = self.forward(tokens, Capture::Last)?;
        Ok(trace.states.swap_remove(layer))
    }

    /// Keeps the last `max_seq` tokens.
    pub fn fit_window<'a>(&self, tokens: &'a [usize]) -> &'a [usize] {
        &tokens[tokens.len().saturating_sub(self.config.max_seq)..]
    }

    /// Greedy argmax continuation of up to `max_new_tokens` tokens. The
    /// context slides to keep at most `max_seq` tokens. Ties in the argmax go
    /// to the smallest id.
    pub fn generate(&self, prompt: &[usize], max_new_tokens: usize) -> Result<Vec<usize>, ToyLmError> {
        let mut ctx: Vec<usize> = self.fit_window(prompt).to_vec();
        let mut out = Vec::with_capacity(max_new_tokens);
        for _ in 0..max_new_tokens {
            let trace = self.forward(&ctx, Capture::Last)?;
            let next = argmax(&trace.final_logits);
            out.push(next);
            ctx.push(next);
            if ctx.len() > self.config.max_seq {
                ctx.remove(0);
            }
        }
        Ok(out)
    }

    /// Parameters under their canonical names, config in metadata.
    pub fn to_store(&self) -> TensorStore {
        let mut s = TensorStore::new();
        let row = |v: &[f64]| Matrix::row_vector(v).expect("validated gain vector");
        let mut put = |name: String, m: Matrix| s.insert(name, m).expect("canonical names are unique");
        put("embedding".into(), self.embedding.clone());
        put("unembedding".into(), self.unembedding.clone());
        put("final_norm".into(), row(&self.final_norm));
        for (i, b) in self.blocks.iter().enumerate() {
            put(format!("layer.{i}.w_q"), b.w_q.clone());
            put(format!("layer.{i}.w_k"), b.w_k.clone());
            put(format!("layer.{i}.w_v"), b.w_v.clone());
            put(format!("layer.{i}.w_o"), b.w_o.clone());
            put(format!("layer.{i}.mlp_in"), b.mlp_in.clone());
            put(format!("layer.{i}.mlp_out"), b.mlp_out.clone());
            put(format!("layer.{i}.norm1"), row(&b.norm1));
            put(format!("layer.{i}.norm2"), row(&b.norm2));
        }
        s.set_metadata(
            CONFIG_KEY,
            serde_json::to_string(&self.config).expect("config serializes"),
        );
        s.set_metadata("model_label", "toy-lm");
        s
    }

    pub fn from_store(store: &TensorStore) -> Result<Self, ToyLmError> {
        let cfg_text = store
            .metadata()
            .get(CONFIG_KEY)
            .ok_or(ToyLmError::MissingMetadata(CONFIG_KEY))?;
        let config: ToyLmConfig =
            serde_json::from_str(cfg_text).map_err(|e| ToyLmError::BadMetadata(e.to_string()))?;
        config.validate()?;
        let get = |name: &str| store.get_matrix(name).cloned().map_err(ToyLmError::from);
        let vec_of = |name: &str| -> Result<Vec<f64>, ToyLmError> { Ok(get(name)?.into_data()) };
        let blocks = (0..config.n_layers)
            .map(|i| {
                Ok(Block {
                    w_q: get(&format!("layer.{i}.w_q"))?,
                    w_k: get(&format!("layer.{i}.w_k"))?,
                    w_v: get(&format!("layer.{i}.w_v"))?,
                    w_o: get(&format!("layer.{i}.w_o"))?,
                    mlp_in: get(&format!("layer.{i}.mlp_in"))?,
                    mlp_out: get(&format!("layer.{i}.mlp_out"))?,
                    norm1: vec_of(&format!("layer.{i}.norm1"))?,
                    norm2: vec_of(&format!("layer.{i}.norm2"))?,
                })
            })
            .collect::<Result<Vec<_>, ToyLmError>>()?;
        Self::from_parts(
            config,
            get("embedding")?,
            blocks,
            vec_of("final_norm")?,
            get("unembedding")?,
        )
    }

    /// Golden trace of a forward pass at the last position.
    pub fn golden_trace(&self, tokens: &[usize]) -> Result<GoldenTrace, ToyLmError> {
        let t = self.forward(tokens, Capture::Last)?;
        Ok(GoldenTrace {
            config: self.config.clone(),
            tokens: tokens.to_vec(),
            states: t.states,
            final_logits: t.final_logits,
        })
    }
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Saves a model, optionally bundling its vocabulary in the metadata.
pub fn save_model(
    lm: &ToyLm,
    vocab: Option<&Vocabulary>,
    path: impl AsRef<Path>,
) -> Result<(), ToyLmError> {
    let mut store = lm.to_store();
    if let Some(v) = vocab {
        store.set_metadata(VOCAB_KEY, v.to_json());
    }
    tensor_store::save_tensor_file(&store, path)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(ToyLm, Option<Vocabulary>), ToyLmError> {
    let store = tensor_store::load_tensor_file(path)?;
    let lm = ToyLm::from_store(&store)?;
    let vocab = store
        .metadata()
        .get(VOCAB_KEY)
        .map(|s| Vocabulary::from_json(s).map_err(ToyLmError::BadMetadata))
        .transpose()?;
    if let Some(v) = &vocab {
        if v.len() > lm.config.vocab_size {
            return Err(ToyLmError::BadMetadata(format!(
                "vocabulary of {} words exceeds model vocab_size {}",
                v.len(),
                lm.config.vocab_size
            )));
        }
    }
    Ok((lm, vocab))
}
