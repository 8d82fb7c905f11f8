//! End-to-end orchestration: dataset ingestion, configuration, embedding
//! provider client, stage traces, evaluation and training runs.

pub mod config;
pub mod dataset;
pub mod provider;
mod run;
pub mod trace;

use std::path::PathBuf;

use thiserror::Error;

use crate::disambiguation::{InventoryError, MatchError};
use crate::evaluation::EvalError;
use crate::fusion::checkpoint::CheckpointError;
use crate::fusion::{FuserKind, FusionError};
use crate::retrieval::RetrievalError;
use crate::store::StoreError;
use crate::train::TrainError;

pub use config::{ConfigError, PipelineConfig};
pub use dataset::{load_dataset, Dataset, DatasetError, Sample};
pub use provider::{content_id, EmbeddingProvider, ProviderError};
pub use run::{
    history_path, holdout_split, load_model, run_pipeline, run_training, PipelineRun,
    PreparedSample, PromptStage, Resources,
};
pub use trace::{write_traces, GlossTrace, StageTrace};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_PROVIDER: i32 = 3;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("sense inventory: {0}")]
    Inventory(#[from] InventoryError),
    #[error("{path}: {source}")]
    Store { path: PathBuf, source: StoreError },
    #[error("{what} embeddings have dimension {got}, expected {expected}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("sample {sample}: no {stage} embedding for {key:?}")]
    MissingEmbedding {
        sample: String,
        stage: &'static str,
        key: String,
    },
    #[error("sample {sample}: gloss matching: {source}")]
    Match { sample: String, source: MatchError },
    #[error("sample {sample}: fusion: {source}")]
    Fusion { sample: String, source: FusionError },
    #[error("sample {0} has no gold label")]
    MissingGold(String),
    #[error("no sample with id {0:?}")]
    UnknownSample(String),
    #[error("holdout of {holdout} leaves no training samples out of {samples}")]
    Holdout { holdout: usize, samples: usize },
    #[error("checkpoint holds a {got} fuser, configuration asks for {expected}")]
    CheckpointKind { expected: FuserKind, got: FuserKind },
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl PipelineError {
    /// Process exit code: 1 usage, 2 data or format, 3 provider.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => EXIT_USAGE,
            PipelineError::Train(TrainError::NotTrainable(_) | TrainError::InvalidConfig(_)) => EXIT_USAGE,
            PipelineError::Provider(_) => EXIT_PROVIDER,
            _ => EXIT_DATA,
        }
    }
}
