//! Transformer encoder, bottleneck adapters, prefix prompts and recurrent
//! baselines for binary clinical-note classification, built on a small
//! f64 reverse-mode autodiff engine.

// Packed layouts are lists of segment ranges; a single segment is common.
#![allow(clippy::single_range_in_vec_init)]

pub mod data;
pub mod error;
pub mod eval;
pub mod models;
pub mod nn;
pub mod peft;
pub mod pipeline;
pub mod tensor;
pub mod training;
pub mod util;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
