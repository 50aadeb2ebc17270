//! `lrag`: command-line front end for the layer-wise retrieval toolkit.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on a config or
//! argument error.

mod commands;
mod config;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use thiserror::Error;

use config::{Cli, Command, FileConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Runtime(e.to_string())
            }
        })*
    };
}

runtime_from!(
    lrag_core::tensor_store::TensorStoreError,
    lrag_core::td::TdError,
    lrag_core::toy_lm::ToyLmError,
    lrag_core::logit_lens::LogitLensError,
    lrag_core::retrieval::RetrievalError,
    lrag_core::rep_retriever::RepRetrieverError,
    lrag_core::pipeline::PipelineError
);

/// Settings shared by every subcommand after merging flags and file.
#[derive(Debug, Clone)]
pub struct Globals {
    pub seed: u64,
    pub out: PathBuf,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let globals = Globals {
        seed: cli.seed.or(file.seed).unwrap_or(0),
        out: cli.out.or(file.out).unwrap_or_else(|| PathBuf::from("lrag-out")),
    };
    std::fs::create_dir_all(&globals.out).map_err(|e| CliError::io(&globals.out, e))?;
    match cli.command {
        Command::Td(a) => commands::td(&globals, a.merged(file.td)),
        Command::Logitlens(a) => commands::logitlens(&globals, a.merged(file.logitlens)),
        Command::GenData(a) => commands::gen_data(&globals, a.merged(file.gen_data)),
        Command::GenToyModel(a) => commands::gen_toy_model(&globals, a.merged(file.gen_toy_model)),
        Command::Train(a) => commands::train(&globals, a.merged(file.train)),
        Command::SelectLayer(a) => commands::select_layer(&globals, a.merged(file.select_layer)),
        Command::Eval(a) => commands::eval(&globals, a.merged(file.eval)),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lrag: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
