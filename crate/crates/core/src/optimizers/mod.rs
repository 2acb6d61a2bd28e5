//! AdamW, its blockwise 8-bit variant, and the in-backward wrapper.

mod adamw;
mod in_backward;
pub mod quant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Parameter, TensorError};

pub use adamw::{adamw_step, AdamW, AdamWState, MomentRecord, Moments, OptimizerStateDict, StateRecord};
pub use in_backward::{attach_in_backward, InBackwardOptimizer};
pub use quant::{MomentKind, QuantizedMoment};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient for parameter {name} at index {index}")]
    NonFiniteGradient { name: String, index: usize },
    #[error("optimizer-in-backward requires gradient_accumulation_steps == 1 (got {steps}); partial updates would be applied before the accumulated gradient is complete")]
    AccumulationUnsupported { steps: usize },
    #[error("parameter {0} already has a gradient hook")]
    HookInstalled(String),
    #[error("parameter name {0} appears more than once")]
    DuplicateName(String),
    #[error("optimizer state names do not match parameters (missing: {missing:?}, unexpected: {unexpected:?})")]
    StateNames { missing: Vec<String>, unexpected: Vec<String> },
    #[error("optimizer state for {name}: {reason}")]
    StateMismatch { name: String, reason: String },
    #[error("invalid optimizer setting: {0}")]
    InvalidHyper(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Moment storage precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    Int8,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWHyper {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        AdamWHyper { lr: 2e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamWHyper {
    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |what: String| Err(OptimError::InvalidHyper(what));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        Ok(())
    }
}

/// Learning rate as a function of the optimizer step (0-based).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear warmup to the base rate, then cosine decay to zero at `total_steps`.
    WarmupCosine { warmup_steps: usize, total_steps: usize },
}

impl LrSchedule {
    pub fn lr_at(&self, base: f32, step: usize) -> f32 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::WarmupCosine { warmup_steps, total_steps } => {
                if step < warmup_steps {
                    return base * (step + 1) as f32 / warmup_steps as f32;
                }
                let span = total_steps.saturating_sub(warmup_steps).max(1);
                let progress = ((step - warmup_steps) as f32 / span as f32).min(1.0);
                base * 0.5 * (1.0 + (std::f32::consts::PI * progress).cos())
            }
        }
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping. Only meaningful when gradients are kept
/// until an explicit step.
pub fn clip_grad_norm(params: &[Parameter], max_norm: f32) -> f32 {
    let mut total = 0.0f64;
    for p in params {
        if let Some(g) = p.grad() {
            total += g.data().iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>();
        }
    }
    let norm = total.sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / (norm + 1e-6);
        for p in params {
            p.update_grad(|g| g.iter_mut().for_each(|x| *x *= scale));
        }
    }
    norm
}
