//! Hybrid content + metadata audio retrieval.
//!
//! Items (a frame sequence plus tags or a description) and free-text queries
//! are embedded into one retrieval space and compared by cosine similarity.
//! Audio and metadata are combined either by summing their embeddings (late
//! fusion) or by a joint transformer with query-conditioned matching (mid
//! fusion). Everything, including the backward passes, is implemented here in
//! double precision.

pub mod audio;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fusion;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod similarity;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use model::{FusionMode, HybridModel, ModelConfig};
pub use tensor::{Module, Parameter, Tensor2D};
