//! Correlation-weighted residual encoding of feature maps against a learned,
//! diversity-regularized prototype set, trained with a multi-similarity loss
//! and a cross-branch consistency constraint.
//!
//! The crate is self-contained: a small f64 tensor engine with reverse-mode
//! autodiff ([`tensor`]), the residual encoder itself ([`crt`]), training
//! objectives ([`loss`]), retrieval and generalization diagnostics
//! ([`metrics`]), a synthetic part-based dataset generator ([`data`]), and a
//! two-branch trainer with checkpointing ([`model`], [`trainer`]). A
//! mean-pooled linear model ([`baseline`]) serves as the comparison point in
//! end-to-end experiments.

pub mod baseline;
pub mod crt;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{singular_values, Gradients, Tape, Tensor};
