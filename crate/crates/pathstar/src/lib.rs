//! Path-star lookahead laboratory: graph/data generation, a from-scratch
//! reverse-mode autodiff engine, two small sequence models, the training
//! objectives that distinguish them, and the evaluation metrics.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod num;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
