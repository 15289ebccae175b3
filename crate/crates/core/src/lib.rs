//! Semi-supervised product quantization for compact retrieval codes.
//!
//! The crate covers the full pipeline: a differentiable reference encoder,
//! soft/hard product quantization, the training objectives (N-pair
//! quantization loss, cosine classification loss and subspace entropy
//! mini-max with gradient reversal), an ADAM training loop, a packed binary
//! code index with lookup-table asymmetric search, and mAP evaluation against
//! an unsupervised PQ baseline.

mod binio;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod index;
pub mod numerics;
pub mod objectives;
pub mod pipeline;
pub mod quantizer;
pub mod trainer;

pub use error::{GpqError, Result};
pub use numerics::SubspaceShape;
pub use quantizer::{Code, Codebook};
pub use index::RetrievalIndex;
pub use objectives::Prototypes;
pub use trainer::{GpqModel, TrainConfig};
