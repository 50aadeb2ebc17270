//! Hand-built models with known behaviour.
//!
//! [`lens_demo_model`] writes one token's unembedding direction in its first
//! block and overwrites it with another in its second, so a logit lens sees
//! the first token peak early and the second peak at the end.
//!
//! [`planted_layer_model`] copies the identity of a "bridge" word from
//! anywhere in the prompt into the last position with one attention block
//! and removes it again with the next, so exactly one hidden state carries
//! a linearly decodable bridge signal. The two planted blocks also have the
//! lowest-entropy value projections in the model.

use rand_distr::{Distribution, Normal, StandardNormal};

use super::{positional_encoding, Block, ToyLm, ToyLmConfig, ToyLmError, INIT_STD};
use crate::matrix::Matrix;
use crate::seeds;
use crate::text::Vocabulary;

/// Two-block, MLP-only model with `vocab_size = d_model = 8`, identity
/// unembedding and embeddings carrying a constant bias unit. Block 0 pushes
/// the stream toward `intermediate`, block 1 cancels that and pushes toward
/// `final_token`.
pub fn lens_demo_model(intermediate: usize, final_token: usize, seed: u64) -> Result<ToyLm, ToyLmError> {
    const D: usize = 8;
    const BIAS: usize = D - 1;
    if intermediate >= BIAS || final_token >= BIAS || intermediate == final_token {
        return Err(ToyLmError::InvalidConfig(format!(
            "tracked tokens must be distinct and below {BIAS}"
        )));
    }
    let config = ToyLmConfig {
        vocab_size: D,
        d_model: D,
        n_layers: 2,
        n_heads: 1,
        d_head: D,
        max_seq: 32,
        seed,
    };
    let mut rng = seeds::stream(seed, "lens_demo.embedding");
    let normal = Normal::new(0.0, 0.1).expect("positive std");
    let mut embedding = Matrix::zeros(D, D);
    for t in 0..D {
        for c in 0..BIAS {
            embedding.set(t, c, normal.sample(&mut rng));
        }
        embedding.set(t, BIAS, 4.0);
    }
    // One MLP unit fires on the bias coordinate; its output row decides what
    // the block writes.
    let block = |writes: &[(usize, f64)]| {
        let mut mlp_in = Matrix::zeros(D, 4 * D);
        mlp_in.set(BIAS, 0, 1.0);
        let mut mlp_out = Matrix::zeros(4 * D, D);
        for &(c, v) in writes {
            mlp_out.set(0, c, v);
        }
        Block {
            w_q: Matrix::zeros(D, D),
            w_k: Matrix::zeros(D, D),
            w_v: Matrix::zeros(D, D),
            w_o: Matrix::zeros(D, D),
            mlp_in,
            mlp_out,
            norm1: vec![1.0; D],
            norm2: vec![1.0; D],
        }
    };
    let blocks = vec![
        block(&[(intermediate, 4.0)]),
        block(&[(intermediate, -4.0), (final_token, 8.0)]),
    ];
    ToyLm::from_parts(config, embedding, blocks, vec![1.0; D], Matrix::identity(D))
}

/// Knobs of the planted-layer construction.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedSpec {
    /// Hidden state index (`1..=n_layers`) that carries the bridge signal.
    pub planted: usize,
    /// Words whose identity gets copied to the last position.
    pub bridge_words: Vec<String>,
    /// Word expected at the start of every prompt. Bridge positions park
    /// their attention on it so that their own rows stay untouched.
    pub sink_word: String,
    pub lex_scale: f64,
    pub marker_level: f64,
    pub attn_gain: f64,
    pub write_gain: f64,
}

impl PlantedSpec {
    pub fn new(planted: usize, bridge_words: Vec<String>) -> Self {
        Self {
            planted,
            bridge_words,
            sink_word: "context".to_string(),
            lex_scale: 3.0,
            marker_level: 10.0,
            attn_gain: 3.0,
            write_gain: 3.0,
        }
    }
}

/// Residual-stream coordinates used by the planted construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlantedLayout {
    /// Lexical coordinates per head; the lexical block is `0..n_heads*chunk`
    /// and the work block follows it.
    pub chunk: usize,
    pub sink: usize,
    pub flag: usize,
    pub constant: usize,
}

impl PlantedLayout {
    /// Marker coordinates sit on even indices near the top of the stream,
    /// where the sinusoidal position code is almost zero for short prompts.
    pub fn for_config(config: &ToyLmConfig) -> Result<Self, ToyLmError> {
        let d = config.d_model;
        let chunk = (config.d_head.saturating_sub(2)).min(d.saturating_sub(6) / (2 * config.n_heads));
        if chunk == 0 || d < 8 {
            return Err(ToyLmError::InvalidConfig(format!(
                "d_model {d} with {} heads of {} leaves no room for the planted layout",
                config.n_heads, config.d_head
            )));
        }
        Ok(Self {
            chunk,
            sink: d - 6,
            flag: d - 4,
            constant: d - 2,
        })
    }

    pub fn lex(&self, head: usize, j: usize) -> usize {
        head * self.chunk + j
    }

    pub fn work(&self, n_heads: usize, head: usize, j: usize) -> usize {
        n_heads * self.chunk + head * self.chunk + j
    }

    /// Coordinates written by the planted block.
    pub fn work_range(&self, n_heads: usize) -> std::ops::Range<usize> {
        n_heads * self.chunk..2 * n_heads * self.chunk
    }
}

pub fn planted_layer_model(
    config: ToyLmConfig,
    vocab: &Vocabulary,
    spec: &PlantedSpec,
) -> Result<ToyLm, ToyLmError> {
    config.validate()?;
    let layout = PlantedLayout::for_config(&config)?;
    if spec.planted == 0 || spec.planted > config.n_layers {
        return Err(ToyLmError::InvalidConfig(format!(
            "planted state {} must lie in 1..={}",
            spec.planted, config.n_layers
        )));
    }
    if vocab.len() > config.vocab_size {
        return Err(ToyLmError::InvalidConfig(format!(
            "vocabulary of {} words exceeds vocab_size {}",
            vocab.len(),
            config.vocab_size
        )));
    }
    let (d, h, dh) = (config.d_model, config.n_heads, config.d_head);
    let root = seeds::derive_seed(config.seed, "planted");

    let mut embedding = Matrix::zeros(config.vocab_size, d);
    let mut lex_rng = seeds::stream(root, "lex");
    let sink_id = vocab.contains(&spec.sink_word).then(|| vocab.id(&spec.sink_word));
    // The sink cancels the position code it receives at the start of a
    // prompt, so attending to it reads nothing.
    let start_code = positional_encoding(0, d);
    for t in 0..config.vocab_size {
        for c in 0..h * layout.chunk {
            let z: f64 = StandardNormal.sample(&mut lex_rng);
            let v = if Some(t) == sink_id { -start_code[c] } else { spec.lex_scale * z };
            embedding.set(t, c, v);
        }
        embedding.set(t, layout.constant, spec.marker_level);
    }
    if let Some(s) = sink_id {
        embedding.set(s, layout.sink, spec.marker_level);
    }
    for w in &spec.bridge_words {
        if vocab.contains(w) {
            embedding.set(vocab.id(w), layout.flag, spec.marker_level);
        }
    }

    let normal = Normal::new(0.0, INIT_STD).expect("positive std");
    let draw = |name: &str, rows: usize, cols: usize| -> Matrix {
        let mut rng = seeds::stream(root, name);
        Matrix::new(rows, cols, (0..rows * cols).map(|_| normal.sample(&mut rng)).collect())
            .expect("gaussian draws are finite")
    };
    let a = spec.attn_gain;
    let planted_block = |sign: f64| {
        let mut b = Block {
            w_q: Matrix::zeros(d, d),
            w_k: Matrix::zeros(d, d),
            w_v: Matrix::zeros(d, d),
            w_o: Matrix::zeros(d, d),
            mlp_in: Matrix::zeros(d, 4 * d),
            mlp_out: Matrix::zeros(4 * d, d),
            norm1: vec![1.0; d],
            norm2: vec![1.0; d],
        };
        for head in 0..h {
            let base = head * dh;
            let park = base + dh - 1;
            // Ordinary positions look for bridge flags; bridge positions
            // cancel that query and look for the sink instead.
            b.w_q.set(layout.constant, base, a);
            b.w_q.set(layout.flag, base, -a);
            b.w_q.set(layout.flag, park, a);
            b.w_k.set(layout.flag, base, a);
            b.w_k.set(layout.sink, park, a);
            for j in 0..layout.chunk {
                b.w_v.set(layout.lex(head, j), base + 1 + j, 1.0);
                b.w_o.set(base + 1 + j, layout.work(h, head, j), sign * spec.write_gain);
            }
        }
        b
    };
    let blocks = (0..config.n_layers)
        .map(|i| {
            if i + 1 == spec.planted {
                planted_block(1.0)
            } else if i == spec.planted {
                planted_block(-1.0)
            } else {
                Block {
                    w_q: draw(&format!("layer.{i}.w_q"), d, d),
                    w_k: draw(&format!("layer.{i}.w_k"), d, d),
                    w_v: draw(&format!("layer.{i}.w_v"), d, d),
                    w_o: Matrix::zeros(d, d),
                    mlp_in: draw(&format!("layer.{i}.mlp_in"), d, 4 * d),
                    mlp_out: Matrix::zeros(4 * d, d),
                    norm1: vec![1.0; d],
                    norm2: vec![1.0; d],
                }
            }
        })
        .collect();
    let unembedding = draw("unembedding", d, config.vocab_size);
    ToyLm::from_parts(config, embedding, blocks, vec![1.0; d], unembedding)
}
