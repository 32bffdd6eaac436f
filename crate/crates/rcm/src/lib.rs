//! Few-step distillation of a toy diffusion teacher.
//!
//! The crate trains a small transformer velocity model on synthetic particle
//! clips, distils it into a few-step consistency student with a
//! score-regularised objective, and reproduces the surrounding machinery at
//! desk scale: a fused attention tangent kernel, a data-curation pipeline
//! with hard-example mining, a four-stage curriculum with deterministic
//! checkpointing, and an evaluation harness with distribution and physics
//! metrics.
//!
//! A narrative guide lives in `book/`; its code snippets are compiled as
//! doc-tests (see `booktests` at the bottom of this file).

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod exec;
pub mod losses;
pub mod model;
pub mod optim;
pub mod rng;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
