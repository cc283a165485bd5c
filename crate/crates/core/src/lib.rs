//! Multi-supervision contrastive language-image pretraining at desk scale.

pub mod augment;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nets;
pub mod nnqueue;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
