//! Feature-space deepfake detection with subcluster-conditioned outlier
//! synthesis.
// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod gaussian;
pub mod outlier;
pub mod pipeline;
pub mod seed;
pub mod store;
pub mod subcluster;
pub mod trainer;

pub use embedding::{EmbeddingSet, Label};
pub use error::{Error, Result};
