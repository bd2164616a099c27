//! Calibration-data-aware post-training pruning for tiny decoder-only
//! transformers.
//!
//! The crate covers the whole loop: train a byte-level model on a known
//! corpus, draw calibration windows or self-generate them, collect activation
//! statistics, build magnitude/Wanda/OWL/DSnoT masks under unstructured or
//! N:M sparsity, and measure the result with perplexity, Min-K%++ and MinHash
//! similarity.

// `!(x >= lo)` style checks deliberately reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calib;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod fixture;
pub mod model;
pub mod prune;
pub mod rng;
pub mod selfgen;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{LayerId, LinearKind, ModelConfig, WeightContainer};
pub use rng::RngStream;
pub use tensor::Matrix;
pub use tokenizer::TokenId;
