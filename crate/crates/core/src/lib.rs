//! Joint visual embeddings for items that appear together in style sets.
//!
//! Two convolutional encoders with separate parameters are trained under a
//! set-wise skip-gram objective with negative sampling: the input network
//! produces the item embeddings, the context network produces the vectors
//! they are scored against. The crate also covers corpus handling,
//! nearest-neighbour and analogy queries, and set-level style classification.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
pub mod cli;
pub mod corpus;
pub mod encoder;
pub mod evaluation;
pub mod objective;
pub mod query;
pub mod trainer;
