//! Config-driven training recipes: a YAML component graph, a registry that
//! instantiates it, the SFT loop (full and LoRA), checkpoints, the async GRPO
//! recipe and the `tune` command line.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod grpo;
pub mod registry;
pub mod report;
pub mod sft;

use minitune_core::autograd::TensorError;
use minitune_core::data::DataError;
use minitune_core::model::ModelError;
use minitune_core::objectives::LossError;
use minitune_core::optimizers::OptimError;
use minitune_grpo::GrpoError;
use thiserror::Error;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest, CheckpointMode, TrainingMetadata,
};
pub use config::{apply_overrides, load_config, parse_config, parse_raw, resolve, ConfigMap, ConfigNode};
pub use registry::{instantiate, ArgKind, ArgSpec, Args, Component, ComponentRegistry, Instance};
pub use report::{RecipeRunReport, RunSummary, StepRecord};
pub use sft::{SftFlags, SftRecipe};

#[derive(Debug, Error)]
pub enum RecipeError {
    #[error("config parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("unresolved interpolation ${{{reference}}} in {at}")]
    Unresolved { reference: String, at: String },
    #[error("interpolation cycle: {0}")]
    Cycle(String),
    #[error("bad interpolation in {at}: {message}")]
    Interpolation { at: String, message: String },
    #[error("override {text:?}: {message}")]
    Override { text: String, message: String },
    #[error("unknown component {path:?}; nearest registered: {}", nearest.join(", "))]
    UnknownComponent { path: String, nearest: Vec<String> },
    #[error("component path {0:?} is already registered")]
    DuplicateComponent(String),
    #[error("{component}: argument {argument:?}: {message}")]
    Argument { component: String, argument: String, message: String },
    #[error("config key {key:?}: {message}")]
    Config { key: String, message: String },
    #[error("incompatible settings: {0}")]
    Incompatible(String),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
}

impl RecipeError {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        RecipeError::Config { key: key.into(), message: message.into() }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, err: impl std::fmt::Display) -> Self {
        RecipeError::Io { path: path.as_ref().display().to_string(), message: err.to_string() }
    }
}

/// Up to three candidates closest to `name`, best first.
pub(crate) fn nearest<'a>(name: &str, candidates: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    let mut scored: Vec<(f64, &str)> =
        candidates.into_iter().map(|c| (strsim::normalized_damerau_levenshtein(name, c), c)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
    scored.into_iter().take(3).map(|(_, c)| c.to_string()).collect()
}
