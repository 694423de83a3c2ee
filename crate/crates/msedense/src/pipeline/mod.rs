//! Orchestration: three-phase training, checkpointing on best validation
//! metric, evaluation, prediction, and the run configuration.
//!
//! Phase 1 trains the classification backbone, phase 2 the regression
//! backbone, and phase 3 freezes both and trains the fusion MLP over
//! their concatenated pooled features. Every random draw derives from the
//! run seed, so a config plus seed pins the whole run.

mod checkpoint;
mod config;
mod trainer;

pub use checkpoint::{
    load_backbone, load_fusion, save_backbone, save_fusion, CheckpointMeta, CHECKPOINT_VERSION,
};
pub use config::{PipelineConfig, Profile, CONFIG_KEYS};
pub use trainer::{
    evaluate, evaluate_classifier, predict, severity_by_stage, train_fusion_phase,
    train_multitask, train_phase, EpochRecord, FusionModel, History, MultitaskOutcome,
    OptimizerKind, PhaseName, Prediction, Progress, TrainPhase,
};

use crate::data::DataError;
use crate::metrics::MetricsError;
use crate::nn::NnError;
use crate::tensor::TensorError;
use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error in {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error(
        "non-finite loss at epoch {epoch} step {step}; first non-finite value produced by {node}"
    )]
    NonFinite {
        epoch: usize,
        step: usize,
        node: String,
    },
    #[error("empty {what} split")]
    EmptySplit { what: &'static str },
    #[error("sample `{id}` has shape {got:?} but the network expects {expected:?}")]
    SampleShape {
        id: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("cannot fuse backbones with different input sizes: {cls:?} vs {reg:?}")]
    FusionInputMismatch {
        cls: (usize, usize, usize),
        reg: (usize, usize, usize),
    },
}
