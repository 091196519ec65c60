//! Weak-to-strong generalization under KL-type losses.
//!
//! The crate trains small synthetic teacher/student models, measures every
//! pairwise divergence between them, and checks the resulting numbers against
//! closed-form generalization and calibration bounds.

pub mod bounds;
pub mod calibration;
pub mod cli;
pub mod divergence;
pub mod error;
pub mod mlpnet;
pub mod pipeline;
pub mod selftest;
pub mod stats;

pub use error::{Error, Result};
