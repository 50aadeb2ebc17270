//! Subcommand implementations.

use std::path::{Path, PathBuf};

use serde::Serialize;

use lrag_core::logit_lens::{token_trajectory, LogitLensTrace};
use lrag_core::pipeline::{
    evaluate, generate_synthetic_dataset, read_examples_jsonl, write_examples_jsonl, DatasetSpec, EvalReport,
    Generator, Indexes, Mode, PipelineConfig, QAExample, DEFAULT_TEMPLATE,
};
use lrag_core::rep_retriever::{
    candidate_layers, select_layer as run_select_layer, split_indices, train_for_layer, windowed_means, LayerSelection,
    LossForm, MlpAdapter, SelectLayerInputs, TrainConfig,
};
use lrag_core::retrieval::{
    build_bm25_index, build_dense_index, read_corpus_jsonl, write_corpus_jsonl, DocEncoder, Document, DEFAULT_B,
    DEFAULT_K1,
};
use lrag_core::seeds::{self, derive_seed};
use lrag_core::synth::{store_with_entropies, three_block_entropies};
use lrag_core::td::{min_td_layer, td_profile, td_profile_per_head, HeadAxis, TdProfile, TdReport};
use lrag_core::tensor_store::{load_tensor_file, save_tensor_file};
use lrag_core::text::Vocabulary;
use lrag_core::toy_lm::constructed::{lens_demo_model, planted_layer_model, PlantedSpec};
use lrag_core::toy_lm::{init_toy_lm, load_model, save_model, ToyLm, ToyLmConfig};

use crate::config::{
    EvalArgs, GenDataArgs, GenToyModelArgs, HeadAxisArg, LogitlensArgs, ModeArg, ModelKind, RetrieverArgs,
    SelectLayerArgs, SplitArg, TdArgs, TrainArgs,
};
use crate::report::{write_json, write_text, Provenance};
use crate::{CliError, Globals};

const DEFAULT_PATTERN: &str = "layer.{}.w_v";
const DEFAULT_D_EMB: usize = 32;
const DEFAULT_K: usize = 4;

fn required<T>(value: Option<T>, name: &str) -> Result<T, CliError> {
    value.ok_or_else(|| CliError::Config(format!("missing required option `{name}`")))
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

// ---------------------------------------------------------------- td

#[derive(Serialize)]
struct TdOutput {
    provenance: Provenance,
    report: TdReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    per_head: Option<PerHead>,
}

#[derive(Serialize)]
struct PerHead {
    heads: usize,
    report: TdReport,
}

/// Head count recorded in a toy model's metadata, if any.
fn heads_from_metadata(store: &lrag_core::TensorStore) -> Option<usize> {
    let text = store.metadata().get("toy_lm.config")?;
    serde_json::from_str::<ToyLmConfig>(text).ok().map(|c| c.n_heads)
}

pub fn td(g: &Globals, a: TdArgs) -> Result<(), CliError> {
    let weights = required(a.weights.clone(), "weights")?;
    let pattern = a.pattern.clone().unwrap_or_else(|| DEFAULT_PATTERN.to_string());
    let skip_first = a.skip_first.unwrap_or(1);
    let mut prov = Provenance::new(g.seed, &a);
    prov.input("weights", &weights)?;
    let store = load_tensor_file(&weights)?;

    let profile = td_profile(&store, &pattern)?;
    write_text(&g.out.join("td_profile.csv"), &profile.to_csv())?;
    let per_head = if a.per_head.unwrap_or(false) {
        let heads = a.heads.or_else(|| heads_from_metadata(&store)).ok_or_else(|| {
            CliError::Config("--per-head needs --heads (the file records no head count)".into())
        })?;
        let axis = match a.head_axis.unwrap_or(HeadAxisArg::Columns) {
            HeadAxisArg::Columns => HeadAxis::Columns,
            HeadAxisArg::Rows => HeadAxis::Rows,
        };
        let ph = td_profile_per_head(&store, &pattern, heads, axis)?;
        write_text(&g.out.join("td_profile_per_head.csv"), &ph.to_csv())?;
        Some(PerHead {
            heads,
            report: ph.report(skip_first),
        })
    } else {
        None
    };
    let report = profile.report(skip_first);
    println!(
        "{} layers, min-TD layer {}",
        report.layers.len(),
        report.min_td_layer.map_or("-".to_string(), |l| l.to_string())
    );
    write_json(
        &g.out.join("td_report.json"),
        &TdOutput {
            provenance: prov,
            report,
            per_head,
        },
    )
}

// ---------------------------------------------------------------- logitlens

#[derive(Serialize)]
struct LensRun {
    apply_final_norm: bool,
    argmax_per_layer: Vec<usize>,
    tracked: Vec<TrackedToken>,
}

#[derive(Serialize)]
struct TrackedToken {
    id: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    word: Option<String>,
    peak_layer: Option<usize>,
    probability: Vec<f64>,
}

#[derive(Serialize)]
struct LensOutput {
    provenance: Provenance,
    tokens: Vec<usize>,
    runs: Vec<LensRun>,
}

pub fn logitlens(g: &Globals, a: LogitlensArgs) -> Result<(), CliError> {
    let model_path = required(a.model.clone(), "model")?;
    let mut prov = Provenance::new(g.seed, &a);
    prov.input("model", &model_path)?;
    let (lm, vocab) = load_model(&model_path)?;
    let need_vocab = || {
        vocab
            .as_ref()
            .ok_or_else(|| CliError::Config("words need a vocabulary, but the model file has none".into()))
    };

    let tokens = match (&a.tokens, &a.prompt) {
        (Some(t), None) => t.clone(),
        (None, Some(p)) => {
            let v = need_vocab()?;
            lm.fit_window(&v.encode(p)).to_vec()
        }
        _ => return Err(CliError::Config("give exactly one of --prompt or --tokens".into())),
    };
    let mut tracked: Vec<(usize, Option<String>)> =
        a.track_ids.iter().flatten().map(|&id| (id, None)).collect();
    if let Some(words) = &a.track {
        let v = need_vocab()?;
        for w in words {
            let w = w.to_lowercase();
            if !v.contains(&w) {
                return Err(CliError::Runtime(format!("tracked word `{w}` is not in the vocabulary")));
            }
            tracked.push((v.id(&w), Some(w)));
        }
    }
    let ids: Vec<usize> = tracked.iter().map(|(id, _)| *id).collect();

    let modes = match a.final_norm {
        Some(flag) => vec![flag],
        None => vec![true, false],
    };
    let mut runs = Vec::new();
    for flag in modes {
        let trace: LogitLensTrace = token_trajectory(&lm, &tokens, &ids, flag)?;
        let name = if flag { "logitlens_norm.csv" } else { "logitlens_raw.csv" };
        write_text(&g.out.join(name), &trace.to_csv())?;
        runs.push(LensRun {
            apply_final_norm: flag,
            argmax_per_layer: trace.argmax_per_layer.clone(),
            tracked: tracked
                .iter()
                .map(|(id, word)| TrackedToken {
                    id: *id,
                    word: word.clone(),
                    peak_layer: trace.peak_layer(*id),
                    probability: trace.tracked[id].clone(),
                })
                .collect(),
        });
    }
    write_json(
        &g.out.join("logitlens.json"),
        &LensOutput {
            provenance: prov,
            tokens,
            runs,
        },
    )
}

// ---------------------------------------------------------------- gen-data

#[derive(Serialize)]
struct DataOutput {
    provenance: Provenance,
    spec: DatasetSpec,
    num_documents: usize,
    num_examples: usize,
    vocab_size: usize,
    num_bridges: usize,
}

pub fn gen_data(g: &Globals, a: GenDataArgs) -> Result<(), CliError> {
    let defaults = DatasetSpec::default();
    let spec = DatasetSpec {
        num_examples: a.num_examples.unwrap_or(defaults.num_examples),
        corpus_size: a.corpus_size.unwrap_or(defaults.corpus_size),
        vocab: a.vocab.unwrap_or(defaults.vocab),
        leakage: a.leakage.unwrap_or(defaults.leakage),
        seed: g.seed,
        ..defaults
    };
    spec.validate().map_err(config_err)?;
    let data = generate_synthetic_dataset(&spec)?;
    write_corpus_jsonl(&data.corpus, g.out.join("corpus.jsonl"))?;
    write_examples_jsonl(&data.examples, g.out.join("examples.jsonl"))?;
    write_text(&g.out.join("vocab.json"), &data.vocab.to_json())?;
    write_json(&g.out.join("bridges.json"), &data.bridges)?;
    println!(
        "{} documents, {} examples, {} words",
        data.corpus.len(),
        data.examples.len(),
        data.vocab.len()
    );
    write_json(
        &g.out.join("data_report.json"),
        &DataOutput {
            provenance: Provenance::new(g.seed, &a),
            num_documents: data.corpus.len(),
            num_examples: data.examples.len(),
            vocab_size: data.vocab.len(),
            num_bridges: data.bridges.len(),
            spec,
        },
    )
}

/// Generated dataset directory contents.
struct DataDir {
    corpus: Vec<Document>,
    examples: Vec<QAExample>,
    vocab: Vocabulary,
    bridges: Vec<String>,
}

impl DataDir {
    fn load(dir: &Path, prov: &mut Provenance) -> Result<Self, CliError> {
        let mut file = |name: &str| -> Result<PathBuf, CliError> {
            let p = dir.join(name);
            prov.input(name, &p)?;
            Ok(p)
        };
        let corpus = read_corpus_jsonl(file("corpus.jsonl")?)?;
        let examples = read_examples_jsonl(file("examples.jsonl")?)?;
        let vocab_path = file("vocab.json")?;
        let text = std::fs::read_to_string(&vocab_path).map_err(|e| CliError::io(&vocab_path, e))?;
        let vocab = Vocabulary::from_json(&text)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", vocab_path.display())))?;
        let bridges_path = file("bridges.json")?;
        let text = std::fs::read_to_string(&bridges_path).map_err(|e| CliError::io(&bridges_path, e))?;
        let bridges = serde_json::from_str(&text)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", bridges_path.display())))?;
        Ok(Self {
            corpus,
            examples,
            vocab,
            bridges,
        })
    }
}

// ---------------------------------------------------------------- gen-toy-model

#[derive(Serialize)]
struct ModelOutput {
    provenance: Provenance,
    kind: ModelKind,
    file: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<ToyLmConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    planted: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    spectral: Option<SpectralInfo>,
}

#[derive(Serialize)]
struct SpectralInfo {
    pattern: &'static str,
    entropies: Vec<f64>,
    boundaries: (usize, usize),
}

pub fn gen_toy_model(g: &Globals, a: GenToyModelArgs) -> Result<(), CliError> {
    let kind = a.kind.unwrap_or(ModelKind::Random);
    let mut prov = Provenance::new(g.seed, &a);
    let model_seed = derive_seed(g.seed, "model");
    let mut out = ModelOutput {
        provenance: prov.clone(),
        kind,
        file: "model.st",
        config: None,
        planted: None,
        spectral: None,
    };
    let lm_config = |vocab_floor: usize| -> Result<ToyLmConfig, CliError> {
        let d = ToyLmConfig::default();
        let d_model = a.d_model.unwrap_or(d.d_model);
        let n_heads = a.n_heads.unwrap_or(d.n_heads);
        let c = ToyLmConfig {
            vocab_size: a.vocab_size.unwrap_or(d.vocab_size).max(vocab_floor),
            d_model,
            n_layers: a.n_layers.unwrap_or(d.n_layers),
            n_heads,
            d_head: if n_heads == 0 { 0 } else { d_model / n_heads },
            max_seq: a.max_seq.unwrap_or(d.max_seq),
            seed: model_seed,
        };
        c.validate().map_err(config_err)?;
        Ok(c)
    };
    let data = match &a.data {
        Some(dir) => Some(DataDir::load(dir, &mut prov)?),
        None => None,
    };
    match kind {
        ModelKind::Random => {
            let config = lm_config(data.as_ref().map_or(0, |d| d.vocab.len()))?;
            let lm = init_toy_lm(config.clone())?;
            save_model(&lm, data.as_ref().map(|d| &d.vocab), g.out.join("model.st"))?;
            out.config = Some(config);
        }
        ModelKind::Planted => {
            let data = data.ok_or_else(|| CliError::Config("planted models need --data".into()))?;
            let config = lm_config(data.vocab.len())?;
            let planted = a.planted.unwrap_or(4);
            let lm = planted_layer_model(config.clone(), &data.vocab, &PlantedSpec::new(planted, data.bridges))?;
            save_model(&lm, Some(&data.vocab), g.out.join("model.st"))?;
            out.config = Some(config);
            out.planted = Some(planted);
        }
        ModelKind::LensDemo => {
            let lm = lens_demo_model(3, 5, model_seed)?;
            save_model(&lm, None, g.out.join("model.st"))?;
            out.config = Some(lm.config().clone());
        }
        ModelKind::Spectral => {
            let layers = a.n_layers.unwrap_or(12);
            if layers < 3 {
                return Err(CliError::Config("spectral files need at least 3 layers".into()));
            }
            let bounds = (layers / 3, 2 * layers / 3);
            let mut rng = seeds::stream(g.seed, "synth.entropies");
            let entropies = three_block_entropies(layers, bounds, [2.4, 1.2, 2.0], 0.05, &mut rng);
            let store = store_with_entropies(&entropies, 16, DEFAULT_PATTERN, model_seed);
            save_tensor_file(&store, g.out.join("weights.st"))?;
            out.file = "weights.st";
            out.spectral = Some(SpectralInfo {
                pattern: DEFAULT_PATTERN,
                entropies,
                boundaries: bounds,
            });
        }
    }
    out.provenance = prov;
    println!("wrote {}", out.file);
    write_json(&g.out.join("model_report.json"), &out)
}

// ---------------------------------------------------------------- shared setup

/// Model plus the vocabulary it reads, falling back to the dataset's.
fn load_lm(path: &Path, data: &DataDir, prov: &mut Provenance) -> Result<(ToyLm, Vocabulary), CliError> {
    prov.input("model", path)?;
    let (lm, vocab) = load_model(path)?;
    let vocab = vocab.unwrap_or_else(|| data.vocab.clone());
    if vocab.len() > lm.config().vocab_size {
        return Err(CliError::Runtime(format!(
            "vocabulary of {} words exceeds the model's {}",
            vocab.len(),
            lm.config().vocab_size
        )));
    }
    Ok((lm, vocab))
}

/// How the frozen document encoder was built; stored with each adapter.
#[derive(Debug, Clone, Copy, Serialize)]
struct EncoderSettings {
    d_emb: usize,
    seed: u64,
    normalize: bool,
}

impl EncoderSettings {
    fn new(root: u64, d_emb: usize) -> Self {
        Self {
            d_emb,
            seed: derive_seed(root, "encoder"),
            normalize: true,
        }
    }

    fn build(&self, vocab: &Vocabulary) -> DocEncoder {
        DocEncoder::new(vocab.clone(), self.d_emb, self.seed, self.normalize)
    }
}

fn train_config(seed: u64, r: &RetrieverArgs) -> Result<TrainConfig, CliError> {
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        temperature: r.temperature.unwrap_or(d.temperature),
        learning_rate: r.learning_rate.unwrap_or(d.learning_rate),
        steps: r.steps.unwrap_or(d.steps),
        batch_size: r.batch_size.unwrap_or(d.batch_size),
        seed,
        in_batch_negatives: r.in_batch_negatives.unwrap_or(d.in_batch_negatives),
        loss_form: if r.literal_loss.unwrap_or(false) {
            LossForm::Literal
        } else {
            LossForm::Standard
        },
        eval_every: d.eval_every,
    };
    cfg.validate().map_err(config_err)?;
    Ok(cfg)
}

fn default_center(lm: &ToyLm) -> Result<usize, CliError> {
    let profile: TdProfile = td_profile(&lm.to_store(), DEFAULT_PATTERN)?;
    Ok(min_td_layer(&profile, 1)?)
}

fn pick(examples: &[QAExample], idx: &[usize]) -> Vec<QAExample> {
    idx.iter().map(|&i| examples[i].clone()).collect()
}

// ---------------------------------------------------------------- train

#[derive(Serialize)]
struct TrainOutput {
    provenance: Provenance,
    layer: usize,
    layer_from_td: bool,
    encoder: EncoderSettings,
    train_config: TrainConfig,
    train_size: usize,
    final_loss: Option<f64>,
    loss_window_means: Vec<f64>,
    checkpoint_recall_at_1: Vec<(usize, f64)>,
}

pub fn train(g: &Globals, a: TrainArgs) -> Result<(), CliError> {
    let data_dir = required(a.data.clone(), "data")?;
    let model_path = required(a.model.clone(), "model")?;
    let cfg = train_config(g.seed, &a.retriever)?;
    let enc = EncoderSettings::new(g.seed, a.retriever.d_emb.unwrap_or(DEFAULT_D_EMB));
    let mut prov = Provenance::new(g.seed, &a);
    let data = DataDir::load(&data_dir, &mut prov)?;
    let (lm, vocab) = load_lm(&model_path, &data, &mut prov)?;
    let layer = match a.layer {
        Some(l) => l,
        None => default_center(&lm)?,
    };
    let encoder = enc.build(&data.vocab);
    let inputs = SelectLayerInputs {
        lm: &lm,
        vocab: &vocab,
        corpus: &data.corpus,
        encoder: &encoder,
        template: DEFAULT_TEMPLATE,
    };
    let (train_idx, _) = split_indices(data.examples.len(), cfg.seed);
    let train_set = pick(&data.examples, &train_idx);
    let report = train_for_layer(inputs, &train_set, layer, &cfg)?;

    let mut store = report.adapter.to_store();
    store.set_metadata("adapter.layer", layer.to_string());
    store.set_metadata("encoder.d_emb", enc.d_emb.to_string());
    store.set_metadata("encoder.seed", enc.seed.to_string());
    store.set_metadata("encoder.normalize", enc.normalize.to_string());
    save_tensor_file(&store, g.out.join("adapter.st"))?;

    let final_recall = report.eval_recall.last().map_or(0.0, |&(_, r)| r);
    println!("layer {layer}: training recall@1 {final_recall:.4}");
    write_json(
        &g.out.join("train_report.json"),
        &TrainOutput {
            provenance: prov,
            layer,
            layer_from_td: a.layer.is_none(),
            encoder: enc,
            train_size: train_set.len(),
            final_loss: report.loss_history.last().copied(),
            loss_window_means: windowed_means(&report.loss_history, 20),
            checkpoint_recall_at_1: report.eval_recall,
            train_config: cfg,
        },
    )
}

// ---------------------------------------------------------------- select-layer

#[derive(Serialize)]
struct SelectOutput {
    provenance: Provenance,
    center: usize,
    center_from_td: bool,
    step: usize,
    width: usize,
    k_eval: usize,
    candidates: Vec<usize>,
    selection: LayerSelection,
}

pub fn select_layer(g: &Globals, a: SelectLayerArgs) -> Result<(), CliError> {
    let data_dir = required(a.data.clone(), "data")?;
    let model_path = required(a.model.clone(), "model")?;
    let cfg = train_config(g.seed, &a.retriever)?;
    let (step, width, k_eval) = (a.step.unwrap_or(1), a.width.unwrap_or(2), a.k_eval.unwrap_or(1));
    if step == 0 || k_eval == 0 {
        return Err(CliError::Config("step and k_eval must be at least 1".into()));
    }
    let enc = EncoderSettings::new(g.seed, a.retriever.d_emb.unwrap_or(DEFAULT_D_EMB));
    let mut prov = Provenance::new(g.seed, &a);
    let data = DataDir::load(&data_dir, &mut prov)?;
    let (lm, vocab) = load_lm(&model_path, &data, &mut prov)?;
    let center = match a.center {
        Some(c) => c,
        None => default_center(&lm)?,
    };
    let candidates = candidate_layers(step, width, center, lm.n_layers());
    let encoder = enc.build(&data.vocab);
    let inputs = SelectLayerInputs {
        lm: &lm,
        vocab: &vocab,
        corpus: &data.corpus,
        encoder: &encoder,
        template: DEFAULT_TEMPLATE,
    };
    let selection = run_select_layer(inputs, &data.examples, &candidates, &cfg, k_eval)?;
    for (layer, r) in &selection.recall {
        println!("layer {layer}: validation recall@{k_eval} {r:.4}");
    }
    println!("best layer {}", selection.best_layer);
    write_json(
        &g.out.join("select_layer.json"),
        &SelectOutput {
            provenance: prov,
            center,
            center_from_td: a.center.is_none(),
            step,
            width,
            k_eval,
            candidates,
            selection,
        },
    )
}

// ---------------------------------------------------------------- eval

#[derive(Serialize)]
struct EvalOutput {
    provenance: Provenance,
    split: SplitArg,
    report: EvalReport,
}

fn metadata_value<T: std::str::FromStr>(store: &lrag_core::TensorStore, key: &str) -> Result<T, CliError> {
    store
        .metadata()
        .get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| CliError::Runtime(format!("adapter file lacks a valid `{key}` entry")))
}

pub fn eval(g: &Globals, a: EvalArgs) -> Result<(), CliError> {
    let data_dir = required(a.data.clone(), "data")?;
    let model_path = required(a.model.clone(), "model")?;
    let mode = match a.mode.unwrap_or(ModeArg::Lrag) {
        ModeArg::Lrag => Mode::Lrag,
        ModeArg::Vanilla => Mode::Vanilla,
        ModeArg::NoRetrieval => Mode::NoRetrieval,
    };
    let k = a.k.unwrap_or(DEFAULT_K);
    if k == 0 && mode != Mode::NoRetrieval {
        return Err(CliError::Config("k must be at least 1".into()));
    }
    if mode == Mode::Lrag && a.adapter.is_none() {
        return Err(CliError::Config("lrag mode needs --adapter".into()));
    }
    let split = a.split.unwrap_or(SplitArg::Validation);
    let mut prov = Provenance::new(g.seed, &a);
    let data = DataDir::load(&data_dir, &mut prov)?;
    let (lm, vocab) = load_lm(&model_path, &data, &mut prov)?;

    let mut enc = EncoderSettings::new(g.seed, DEFAULT_D_EMB);
    let mut layer = a.layer.unwrap_or(0);
    let adapter = match (&a.adapter, mode) {
        (Some(path), Mode::Lrag) => {
            prov.input("adapter", path)?;
            let store = load_tensor_file(path)?;
            enc = EncoderSettings {
                d_emb: metadata_value(&store, "encoder.d_emb")?,
                seed: metadata_value(&store, "encoder.seed")?,
                normalize: metadata_value(&store, "encoder.normalize")?,
            };
            if a.layer.is_none() {
                layer = metadata_value(&store, "adapter.layer")?;
            }
            Some(MlpAdapter::from_store(&store)?)
        }
        _ => None,
    };

    let encoder = enc.build(&data.vocab);
    let bm25 = build_bm25_index(&data.corpus, DEFAULT_K1, DEFAULT_B)?;
    let dense = build_dense_index(&encoder, &data.corpus)?;
    let examples = match split {
        SplitArg::All => data.examples.clone(),
        SplitArg::Validation => pick(&data.examples, &split_indices(data.examples.len(), g.seed).1),
    };
    let cfg = PipelineConfig::with_budget(mode, k, layer);
    let report = evaluate(
        Generator { lm: &lm, vocab: &vocab },
        Indexes {
            corpus: &data.corpus,
            bm25: &bm25,
            dense: &dense,
            encoder: &encoder,
        },
        adapter.as_ref(),
        &examples,
        &cfg,
    )?;
    println!("{}", EvalReport::CSV_HEADER);
    println!("{}", report.csv_row());
    let stem = format!("eval_{}", mode.as_str());
    write_text(&g.out.join(format!("{stem}.csv")), &report.to_csv())?;
    write_json(
        &g.out.join(format!("{stem}.json")),
        &EvalOutput {
            provenance: prov,
            split,
            report,
        },
    )
}
