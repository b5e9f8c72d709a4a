pub mod alloc;
pub mod eliminator;
pub mod error;
pub mod format;
pub mod predictor;
pub mod sampler;
pub mod tensor;

pub use error::{Error, Result};
pub mod provider;
pub mod seed;
pub mod scenegen;
pub mod eval;
pub mod pipeline;
pub mod ablation;
