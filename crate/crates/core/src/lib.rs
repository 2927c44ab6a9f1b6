//! Hybrid BM25 + dual-encoder retrieval whose candidates train a listwise
//! cross-attention reranker, plus evaluation and the experiment harness.

pub mod bm25;
pub mod candidates;
pub mod corpus;
pub mod dense;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod hybrid;
pub mod qgen;
pub mod reranker;
pub mod synth;

pub use error::{Error, Result};
