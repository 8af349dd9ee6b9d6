//! Training procedures: the SGD engine, the regular-training baselines and
//! the GULF stage loops.

mod gulf;
mod sgd;

pub use gulf::*;
pub use sgd::*;
