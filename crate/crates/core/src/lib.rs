//! Guided learning through successive functional gradient optimization.
//!
//! The crate trains multilayer perceptrons by alternating two steps: build a
//! guide function a few mirror-descent steps ahead of the current model in
//! function space, then fit the model to that guide in parameter space. The
//! same machinery covers regular training, warm-restarted training,
//! self-distillation and label smoothing, plus the diagnostics used to check
//! the method's convergence guarantees numerically.

pub mod bregman;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod funcspace;
pub mod losses;
pub mod models;
pub mod numerics;
pub mod trainers;
pub mod verify;

pub use error::{GulfError, Result};
