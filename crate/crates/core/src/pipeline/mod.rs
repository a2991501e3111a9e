//! Sample preparation, training, evaluation and the diagnostic analyses.

mod analysis;
mod eval;
mod prepare;
mod train;


use thiserror::Error;

use crate::featstore::FeatError;
use crate::kgstore::KgError;
use crate::models::ModelError;
use crate::synthvqa::SynthError;

pub use analysis::{
    analyze_bias, analyze_retrieval, majority_baseline, overfit_gap, BiasEntry, MajorityBaseline, RetrievalStats,
    OVERFIT_GAP_THRESHOLD,
};
pub use eval::{argmax, evaluate, ConfusionEntry, EvalResult, ModelPredictor, Prediction, Predictor, TypeAccuracy};
pub use prepare::{prepare_samples, to_batch, KnowledgeContext, PreparedSample, DEFAULT_TOP_K_CONCEPTS};
pub use train::{
    read_reports, train, train_prepared, write_reports, EpochReport, Optimizer, TrainConfig, TrainOutcome,
    TrainSummary,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("answer vocabulary has {dataset} entries but the model predicts {model}")]
    VocabularyMismatch { dataset: usize, model: usize },
    #[error("non-finite value in epoch {epoch}, batch {batch} ({detail})")]
    NonFinite { epoch: usize, batch: usize, detail: String },
    #[error("no samples to {0}")]
    Empty(&'static str),
    #[error("sample {sample_id}: {reason}")]
    Sample { sample_id: usize, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Feat(#[from] FeatError),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
