//! Selective classification with confidence-aware contrastive training.
//!
//! The network engine lives in [`nn`], losses in [`losses`], the momentum
//! encoder and sample queues in [`contrastive`], the training loop in
//! [`trainer`], risk–coverage evaluation in [`seleval`], generalization-bound
//! monitoring in [`theory`], and datasets, file formats and experiment
//! orchestration in [`data`], [`io`] and [`workbench`].

pub mod contrastive;
pub mod data;
pub mod error;
pub mod io;
pub mod losses;
pub mod matrix;
pub mod nn;
pub mod par;
pub mod seleval;
pub mod theory;
pub mod trainer;
pub mod workbench;

pub use error::{Error, Result};
pub use matrix::Matrix;
