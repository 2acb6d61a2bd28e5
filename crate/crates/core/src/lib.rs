//! Core numerics for minitune: tensors with autograd, decoder builders,
//! training objectives, optimizers and the instruction-data pipeline.

pub mod autograd;
pub mod data;
pub mod fd_suite;
pub mod model;
pub mod objectives;
pub mod optimizers;
