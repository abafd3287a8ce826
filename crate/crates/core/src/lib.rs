//! Delta-token video tokenization and a best-of-many world model, at desk
//! scale, over a synthetic stochastic world with known future branches.

pub mod bom;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod flops;
pub mod nn;
pub mod predictor;
pub mod sampling;
pub mod seed;
pub mod synthworld;
pub mod tokenizer;
pub mod toyvfm;

pub use error::{Error, Result};
