//! Mixture-of-experts language model trained with dense gradients through
//! every expert and evaluated with sparse expert selection.

pub mod analysis;
pub mod attention;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod gating;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod moe;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use gating::SelectionStrategy;
pub use model::{DsMoeModel, ModelConfig, TrainMode};
