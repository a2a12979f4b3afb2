//! Scheduled knowledge distillation into low-dimensional computing (LDC)
//! classifiers.
//!
//! The pipeline trains a float teacher, ranks training samples by difficulty,
//! and distills into a binary LDC student while the distillation weight and
//! the visible training pool evolve over epochs.

pub mod config;
pub mod cost;
pub mod data;
pub mod distill;
pub mod error;
pub mod ldc;
pub mod nn;
pub mod pipeline;
pub mod teacher;
pub mod vsa;

pub use error::{Error, ErrorKind, Result};
