//! Exact positional embeddings (ExPE / ExQPE) and baseline encodings inside a
//! small decoder-only transformer, with training, evaluation sweeps, and a
//! floating-point collision analyzer.

pub mod error;
pub mod evaluation;
pub mod numerics;
pub mod positional;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
