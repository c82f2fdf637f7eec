//! Temporal ensembling for semi-supervised classification of MNIST-family
//! images: IDX loading, a small weight-normalized CNN trained with Adam,
//! the masked cross-entropy plus consistency objective, the per-sample
//! prediction ensemble, and experiment runners.

pub mod data;
pub mod error;
pub mod harness;
pub mod idx;
pub mod nn;
pub mod objectives;
pub mod real;
pub mod trainer;

pub use error::{Error, Result};
