//! Distant-supervision generation for partially-aligned data-to-text.
//!
//! The crate covers the whole pipeline: building partially-aligned corpora
//! ([`corpus`]), subword tokenization ([`tokenizer`]), the supportiveness
//! estimator ([`estimator`]), a small encoder-decoder generator
//! ([`generator`]) trained under a supportiveness adaptor ([`adaptors`]),
//! plain and rebalanced beam search ([`decoding`]), evaluation
//! ([`metrics`]) and the experiment driver ([`pipeline`]).

pub mod adaptors;
pub mod corpus;
pub mod data;
pub mod decoding;
pub mod error;
pub mod estimator;
pub mod generator;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod seed;
pub mod tokenizer;

pub use error::{Error, Result};
