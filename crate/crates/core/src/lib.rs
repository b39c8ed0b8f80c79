//! Unsupervised constituency parsing with tensor-decomposed, neurally
//! parameterized PCFGs.
//!
//! The binary rule tensor of a PCFG with `m` symbols is kept in rank-`d`
//! Kruskal form, which brings the inside algorithm from `O(m³ l³)` down to
//! `O(d l³ + m d l²)`. Factors are produced by small networks over symbol
//! embeddings with softmax normalization, so every emitted grammar is a
//! proper distribution. Parsing uses span posteriors (obtained by
//! differentiating the inside log-likelihood) followed by a CYK pass that
//! maximizes the expected number of correct constituents.

pub mod checkpoint;
pub mod corpus;
pub mod decoder;
mod error;
pub mod evaluator;
pub mod fixtures;
pub mod grammar;
pub mod inside;
pub mod model;
pub mod trainer;

pub use error::{Error, Result};
pub use grammar::{DensePcfg, SymbolTable, TdPcfg, Vocabulary};
pub use inside::{Chart, Sentence};
