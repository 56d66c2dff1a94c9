//! Cross-network user identity linkage with Gaussian identity embeddings.
//!
//! Identities from a source and a target social network are encoded by a
//! hierarchical attention network (words, sentences, microblogs, neighbors),
//! projected to diagonal Gaussians by a variational layer, and linked by a
//! Wasserstein-2 triplet loss. Few annotations are augmented with confident
//! pseudo-labels that pass an EM-fitted matched/noise mixture filter.

pub mod autodiff;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gaussian;
pub mod linkage;
pub mod selflearn;

pub use error::{Error, Result};
