//! Relation-gated adversarial partial domain adaptation for relation extraction.
//!
//! A source CNN/PCNN encoder and classifier are trained on labeled source
//! data. Target data is then aligned to the source feature space by an
//! adversarial encoder, with source instances reweighted so that relations
//! absent from the target label space contribute little to the alignment.

pub mod adaptation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
