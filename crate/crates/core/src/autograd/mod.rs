//! Reverse-mode automatic differentiation over dense f32 tensors.

use std::sync::OnceLock;

use thiserror::Error;

pub mod checkpoint;
pub mod gradcheck;
pub mod meter;
pub mod ops;
mod param;
mod tape;
mod tensor;

pub use checkpoint::{checkpoint, ReplayFn};
pub use meter::{memory_report, Category, MemoryMeter, Phase, Watermark};
pub use ops::RotaryTable;
pub use param::{GradHook, Parameter};
pub use tape::{BackwardFn, Tape};
pub use tensor::{Buffer, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },
    #[error("shape {shape:?} needs {} elements, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: inputs were recorded on different tapes")]
    MixedTapes { op: &'static str },
    #[error("{op}: input was recorded before the tape was reset")]
    StaleNode { op: &'static str },
    #[error("backward already ran on this tape; reset it first")]
    BackwardTwice,
    #[error("backward needs a single-element loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("tensor is not recorded on a tape")]
    NotOnTape,
    #[error("parameter {name} already has a post-accumulate hook")]
    HookAlreadyRegistered { name: String },
    #[error("checkpointed function allocated parameters")]
    ReplayAllocatedParameters,
    #[error("checkpoint replay produced different values than the original forward")]
    NonDeterministicReplay,
    #[error("parameter {name} was modified between forward and checkpoint replay")]
    ParameterModifiedBeforeReplay { name: String },
    #[error("{op}: index {index} out of range for size {bound}")]
    IndexOutOfRange { op: &'static str, index: usize, bound: usize },
}

/// Whether replays are verified against the original forward.
/// Controlled by `MINITUNE_DETERMINISTIC` (`0`/`false` disables); on by default.
pub fn deterministic_mode() -> bool {
    static MODE: OnceLock<bool> = OnceLock::new();
    *MODE.get_or_init(|| {
        std::env::var("MINITUNE_DETERMINISTIC")
            .map(|v| !matches!(v.trim().to_ascii_lowercase().as_str(), "0" | "false" | "off" | "no"))
            .unwrap_or(true)
    })
}
