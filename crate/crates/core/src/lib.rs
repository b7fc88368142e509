//! Ensemble decoding across language models with different vocabularies.
//!
//! Each model's next-token distribution is mapped into a shared space of
//! anchor tokens (tokens every vocabulary contains) through cosine
//! similarities of its token embeddings. The mapped distributions are
//! averaged there, and a short projected gradient search recovers a
//! distribution over the main model's own vocabulary from the average.

pub mod backends;
pub mod cli;
pub mod config;
pub mod decode;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod relspace;
pub mod vocab;

pub use backends::ModelBackend;
pub use decode::{EnsembleMember, EnsembleSession, StopConditions};
pub use error::{Error, Result};
pub use fusion::{AbsoluteDistribution, EnsembleConfig, RelativeRepresentation};
pub use relspace::{EmbeddingTable, RelativeMatrix};
pub use vocab::{AnchorSet, AnchorStrategy, Vocabulary};
