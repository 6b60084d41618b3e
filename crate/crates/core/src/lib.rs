//! Single-decoder speech language model over interleaved residual-quantizer
//! tokens, together with a synthetic speech world to train and evaluate it on.

pub mod binio;
pub mod codec;
pub mod corpus;
pub mod error;
pub mod judge;
pub mod eval;
pub mod experiment;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod sample;
pub mod tokens;
pub mod train;

pub use error::{Error, Result};
