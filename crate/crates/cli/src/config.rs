//! Command-line arguments and the optional TOML config file.
//!
//! Every subcommand option is optional on both sides. A value given as a
//! flag wins over the config file, which wins over the built-in default.
//! Unknown config keys are rejected.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "lrag", version, about = "Layer-wise retrieval toolkit")]
pub struct Cli {
    /// Root seed; every component draws from a named sub-stream of it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// TOML config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Transformation-divergence profile of one weight family.
    Td(TdArgs),
    /// Logit-lens trajectory of tracked tokens through a model.
    Logitlens(LogitlensArgs),
    /// Generate the synthetic two-hop dataset.
    GenData(GenDataArgs),
    /// Write a toy model (random, planted-layer, lens demo or a spectral test file).
    GenToyModel(GenToyModelArgs),
    /// Train the representation retriever for one layer.
    Train(TrainArgs),
    /// Train per candidate layer and pick the best by validation recall.
    SelectLayer(SelectLayerArgs),
    /// Evaluate a pipeline mode on the dataset.
    Eval(EvalArgs),
}

/// Top-level layout of the config file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub td: Option<TdArgs>,
    pub logitlens: Option<LogitlensArgs>,
    pub gen_data: Option<GenDataArgs>,
    pub gen_toy_model: Option<GenToyModelArgs>,
    pub train: Option<TrainArgs>,
    pub select_layer: Option<SelectLayerArgs>,
    pub eval: Option<EvalArgs>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

/// Field-wise `flag.or(file)` for structs whose fields are all `Option`.
macro_rules! mergeable {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl $ty {
            pub fn merged(self, file: Option<Self>) -> Self {
                let file = file.unwrap_or_default();
                Self { $($field: self.$field.or(file.$field)),* }
            }
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadAxisArg {
    Columns,
    Rows,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TdArgs {
    /// Weight file in the tensor container format.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Tensor name pattern with one `{}` layer placeholder.
    #[arg(long)]
    pub pattern: Option<String>,
    /// Also emit the per-head mean profile.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub per_head: Option<bool>,
    /// Number of heads for the per-head profile.
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long, value_enum)]
    pub head_axis: Option<HeadAxisArg>,
    /// Leading layers ignored when locating the minimum.
    #[arg(long)]
    pub skip_first: Option<usize>,
}
mergeable!(TdArgs { weights, pattern, per_head, heads, head_axis, skip_first });

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogitlensArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Prompt text (needs a vocabulary in the model file).
    #[arg(long)]
    pub prompt: Option<String>,
    /// Prompt as comma-separated token ids.
    #[arg(long, value_delimiter = ',')]
    pub tokens: Option<Vec<usize>>,
    /// Words to track.
    #[arg(long, value_delimiter = ',')]
    pub track: Option<Vec<String>>,
    /// Token ids to track.
    #[arg(long, value_delimiter = ',')]
    pub track_ids: Option<Vec<usize>>,
    /// Apply the model's final norm before the unembedding.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub final_norm: Option<bool>,
}
mergeable!(LogitlensArgs { model, prompt, tokens, track, track_ids, final_norm });

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataArgs {
    #[arg(long)]
    pub num_examples: Option<usize>,
    #[arg(long)]
    pub corpus_size: Option<usize>,
    /// Vocabulary budget for the generated text.
    #[arg(long)]
    pub vocab: Option<usize>,
    /// Probability that a question leaks its second-hop descriptor.
    #[arg(long)]
    pub leakage: Option<f64>,
}
mergeable!(GenDataArgs { num_examples, corpus_size, vocab, leakage });

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Random,
    Planted,
    LensDemo,
    Spectral,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenToyModelArgs {
    #[arg(long, value_enum)]
    pub kind: Option<ModelKind>,
    /// Dataset directory (planted models take their vocabulary from it).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Hidden state that carries the bridge signal (planted models).
    #[arg(long)]
    pub planted: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub max_seq: Option<usize>,
}
mergeable!(GenToyModelArgs { kind, data, planted, vocab_size, d_model, n_layers, n_heads, max_seq });

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrieverArgs {
    /// Dimension of the document encoder space.
    #[arg(long)]
    pub d_emb: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub in_batch_negatives: Option<bool>,
    /// Use the log-outside-the-sum loss variant.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub literal_loss: Option<bool>,
}
mergeable!(RetrieverArgs { d_emb, temperature, learning_rate, steps, batch_size, in_batch_negatives, literal_loss });

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub layer: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub retriever: RetrieverArgs,
}

impl TrainArgs {
    pub fn merged(self, file: Option<Self>) -> Self {
        let file = file.unwrap_or_default();
        Self {
            data: self.data.or(file.data),
            model: self.model.or(file.model),
            layer: self.layer.or(file.layer),
            retriever: self.retriever.merged(Some(file.retriever)),
        }
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectLayerArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Centre layer; defaults to the minimum-TD layer of the value projections.
    #[arg(long)]
    pub center: Option<usize>,
    /// Step between candidates.
    #[arg(long)]
    pub step: Option<usize>,
    /// Candidates on each side of the centre.
    #[arg(long)]
    pub width: Option<usize>,
    /// Cut-off for validation recall.
    #[arg(long)]
    pub k_eval: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub retriever: RetrieverArgs,
}

impl SelectLayerArgs {
    pub fn merged(self, file: Option<Self>) -> Self {
        let file = file.unwrap_or_default();
        Self {
            data: self.data.or(file.data),
            model: self.model.or(file.model),
            center: self.center.or(file.center),
            step: self.step.or(file.step),
            width: self.width.or(file.width),
            k_eval: self.k_eval.or(file.k_eval),
            retriever: self.retriever.merged(Some(file.retriever)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    Lrag,
    Vanilla,
    NoRetrieval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitArg {
    /// The held-out fifth that training never sees.
    Validation,
    All,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Trained adapter (lrag mode).
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Total retrieval budget, split evenly between hops in lrag mode.
    #[arg(long)]
    pub k: Option<usize>,
    /// Representation layer; defaults to the adapter's training layer.
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
}
mergeable!(EvalArgs { data, model, adapter, mode, k, layer, split });
