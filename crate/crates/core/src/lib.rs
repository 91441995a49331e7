//! Meta-learned zero- and few-shot event detection.
//!
//! The crate trains a small prompt-based transformer whose event features are
//! the cloze-slot distribution concatenated with attention-weighted trigger
//! features. Initial parameters are meta-learned over sampled N-way K-shot
//! episodes with an MMD-based inter-class contrastive term in the meta
//! objective; unseen event types are recovered by clustering plus Hungarian
//! matching.

pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod matcher;
pub mod meta;
pub mod metrics;
pub mod objective;
pub mod parallel;
pub mod params;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use parallel::Execution;
pub use params::ParameterSet;
pub use tensor::{Dual, Scalar, Tensor};
