//! Ensemble embedded meta-learning.
//!
//! A MAML-pretrained initialization is used to embed tasks by their
//! meta-gradients. Cosine K-means on those embeddings defines expert domains.
//! Experts are trained with similarity-weighted losses and combined at test
//! time by a vote weighted on similarity and post-adaptation support error.

pub mod cluster;
pub mod diffnet;
pub mod ensemble;
pub mod error;
pub mod maml;
pub mod rng;
pub mod tasks;

pub use error::{Error, Result};
