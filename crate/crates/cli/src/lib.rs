//! Command implementations behind the `tunegram` binary.

use std::path::{Path, PathBuf};

use thiserror::Error;
use tunegram_core::encoding::EncodingError;
use tunegram_core::grammar::GrammarError;
use tunegram_core::pipeline::AnalysisError;
use tunegram_core::MidiError;
use tunegram_cvae::CvaeError;

pub mod commands;
pub mod config;
pub mod meta;
pub mod workers;

pub use config::PipelineConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Midi { path: PathBuf, source: MidiError },
    #[error("{path}: {source}")]
    Analysis { path: PathBuf, source: AnalysisError },
    #[error("grammar: {0}")]
    Grammar(#[from] GrammarError),
    #[error("dataset: {0}")]
    Dataset(#[from] EncodingError),
    #[error("{0}")]
    Model(#[from] CvaeError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Model(CvaeError::NonFinite { .. }) => EXIT_NUMERIC,
            _ => EXIT_DATA,
        }
    }
}
