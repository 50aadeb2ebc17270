//! Seeded two-hop question generator.
//!
//! Each question names a person X and asks for an attribute of X's relative
//! B. X's page names B; B's page lists B's attributes and a distinctive
//! descriptor word. Bridges are shared by several people, so a retriever
//! trained on some questions sees every bridge again at test time. With
//! probability `leakage` the question also carries B's descriptor, which
//! lets plain keyword search find B's page directly.

use std::collections::{BTreeSet, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::retrieval::Document;
use crate::seeds;
use crate::text::{tokenize, Vocabulary};

use super::{PipelineError, QAExample};

pub const FIRST_RELATIONS: [&str; 4] = ["father", "mother", "mentor", "spouse"];
pub const SECOND_RELATIONS: [&str; 4] = ["birthplace", "employer", "hometown", "school"];

const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_examples: usize,
    pub corpus_size: usize,
    /// Upper bound on the vocabulary the generated text may use (UNK
    /// included).
    pub vocab: usize,
    pub bridge_depth: usize,
    pub leakage: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_examples: 200,
            corpus_size: 400,
            vocab: 512,
            bridge_depth: 2,
            leakage: 0.0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn num_bridges(&self) -> usize {
        (self.num_examples / 4).max(1)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::InvalidSpec(m));
        if self.num_examples == 0 {
            return bad("num_examples must be at least 1".into());
        }
        if self.corpus_size < 2 * self.num_examples {
            return bad(format!(
                "corpus_size {} must be at least twice num_examples {}",
                self.corpus_size, self.num_examples
            ));
        }
        if self.bridge_depth != 2 {
            return bad(format!("bridge_depth {} unsupported (only 2)", self.bridge_depth));
        }
        if !(0.0..=1.0).contains(&self.leakage) {
            return bad(format!("leakage {} outside [0, 1]", self.leakage));
        }
        Ok(())
    }
}

/// Generated corpus, examples and the vocabulary covering both.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub corpus: Vec<Document>,
    pub examples: Vec<QAExample>,
    pub vocab: Vocabulary,
    /// Bridge entity names (the intermediate answers).
    pub bridges: Vec<String>,
}

/// Words the prompt template contributes, kept in every vocabulary.
const TEMPLATE_WORDS: [&str; 3] = ["context", "question", "answer"];

fn pseudo_word(rng: &mut ChaCha8Rng, taken: &mut HashSet<String>) -> String {
    loop {
        let syllables = rng.random_range(2..=3);
        let w: String = (0..syllables)
            .map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap()))
            .collect();
        if taken.insert(w.clone()) {
            return w;
        }
    }
}

pub fn generate_synthetic_dataset(spec: &DatasetSpec) -> Result<SyntheticData, PipelineError> {
    spec.validate()?;
    let mut rng = seeds::stream(spec.seed, "data");
    let mut taken: HashSet<String> = FIRST_RELATIONS
        .iter()
        .chain(&SECOND_RELATIONS)
        .chain(&TEMPLATE_WORDS)
        .map(|s| s.to_string())
        .collect();
    for w in ["is", "a", "the", "of", "what", "person", "works", "as", "and", "lives", "in"] {
        taken.insert(w.to_string());
    }

    let nb = spec.num_bridges();
    let people: Vec<String> = (0..spec.num_examples).map(|_| pseudo_word(&mut rng, &mut taken)).collect();
    let bridges: Vec<String> = (0..nb).map(|_| pseudo_word(&mut rng, &mut taken)).collect();
    let descriptors: Vec<String> = (0..nb).map(|_| pseudo_word(&mut rng, &mut taken)).collect();
    let values: Vec<String> = (0..40).map(|_| pseudo_word(&mut rng, &mut taken)).collect();

    // Bridge attributes, one value per second-hop relation.
    let attributes: Vec<Vec<String>> = (0..nb)
        .map(|_| {
            SECOND_RELATIONS
                .iter()
                .map(|_| values.choose(&mut rng).unwrap().clone())
                .collect()
        })
        .collect();

    struct Draft {
        title: String,
        text: String,
    }
    let mut drafts: Vec<Draft> = Vec::with_capacity(spec.corpus_size);
    for (b, name) in bridges.iter().enumerate() {
        let mut text = format!("{name} is a {} .", descriptors[b]);
        for (r, rel) in SECOND_RELATIONS.iter().enumerate() {
            text.push_str(&format!(" the {rel} of {name} is {} .", attributes[b][r]));
        }
        drafts.push(Draft {
            title: name.clone(),
            text,
        });
    }
    let mut assignment: Vec<usize> = (0..spec.num_examples).map(|i| i % nb).collect();
    assignment.shuffle(&mut rng);
    let mut plans = Vec::with_capacity(spec.num_examples);
    for (i, person) in people.iter().enumerate() {
        let b = assignment[i];
        let rel1 = *FIRST_RELATIONS.choose(&mut rng).unwrap();
        let r2 = rng.random_range(0..SECOND_RELATIONS.len());
        let leak = rng.random_bool(spec.leakage);
        drafts.push(Draft {
            title: person.clone(),
            text: format!("{person} is a person . the {rel1} of {person} is {} .", bridges[b]),
        });
        plans.push((i, b, rel1, r2, leak));
    }
    while drafts.len() < spec.corpus_size {
        let person = people.choose(&mut rng).unwrap();
        let job = values.choose(&mut rng).unwrap();
        let place = values.choose(&mut rng).unwrap();
        drafts.push(Draft {
            title: person.clone(),
            text: format!("{person} works as a {job} and lives in {place} ."),
        });
    }

    // Shuffle before numbering so ids carry no information about roles.
    let mut order: Vec<usize> = (0..drafts.len()).collect();
    order.shuffle(&mut rng);
    let width = drafts.len().to_string().len().max(4);
    let mut id_of = vec![String::new(); drafts.len()];
    let mut corpus = Vec::with_capacity(drafts.len());
    for (pos, &d) in order.iter().enumerate() {
        let id = format!("d{pos:0width$}");
        id_of[d] = id.clone();
        corpus.push(Document::new(id, drafts[d].title.clone(), drafts[d].text.clone()));
    }
    corpus.sort_by(|a, b| a.id.cmp(&b.id));
    let doc_by_draft = |d: usize| -> Document {
        let id = &id_of[d];
        corpus.iter().find(|doc| &doc.id == id).expect("every draft is numbered").clone()
    };

    let examples: Vec<QAExample> = plans
        .into_iter()
        .map(|(i, b, rel1, r2, leak)| {
            let rel2 = SECOND_RELATIONS[r2];
            let question = if leak {
                format!("what is the {rel2} of the {} {rel1} of {} ?", descriptors[b], people[i])
            } else {
                format!("what is the {rel2} of the {rel1} of {} ?", people[i])
            };
            let first = doc_by_draft(nb + i);
            let second = doc_by_draft(b);
            QAExample {
                question,
                first_hop_ids: vec![first.id.clone()],
                second_hop_ids: vec![second.id.clone()],
                documents: vec![first, second],
                intermediate_answer: bridges[b].clone(),
                final_answer: attributes[b][r2].clone(),
            }
        })
        .collect();

    let mut words: BTreeSet<String> = TEMPLATE_WORDS.iter().map(|s| s.to_string()).collect();
    for d in &corpus {
        words.extend(tokenize(&d.full_text()));
    }
    for e in &examples {
        words.extend(tokenize(&e.question));
    }
    if words.len() + 1 > spec.vocab {
        return Err(PipelineError::InvalidSpec(format!(
            "generated text needs {} vocabulary entries, limit is {}",
            words.len() + 1,
            spec.vocab
        )));
    }
    Ok(SyntheticData {
        corpus,
        examples,
        vocab: Vocabulary::from_words(words),
        bridges,
    })
}

pub fn write_examples_jsonl(examples: &[QAExample], path: impl AsRef<Path>) -> Result<(), PipelineError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in examples {
        serde_json::to_writer(&mut out, e).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_examples_jsonl(path: impl AsRef<Path>) -> Result<Vec<QAExample>, PipelineError> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: QAExample = serde_json::from_str(&line).map_err(|err| PipelineError::Parse {
            line: i + 1,
            message: err.to_string(),
        })?;
        e.validate()?;
        out.push(e);
    }
    Ok(out)
}
