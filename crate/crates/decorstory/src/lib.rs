//! Training-free conditioning toolkit for multi-frame prompt embeddings:
//! prompt layout and frame extraction, Gram–Schmidt decorrelation of frame
//! representatives, singular-value reweighting of frame/EOT stacks,
//! identity-preserving cross-attention, and a deterministic toy pipeline
//! that runs the whole chain end to end.

pub mod analysis;
pub mod decorrelation;
pub mod demb;
pub mod error;
pub mod ipca;
pub mod layout;
pub mod matrix;
pub mod pipeline;
pub mod real;
pub mod rng;
pub mod svr;

pub use error::{Error, Result};
pub use real::{Dtype, Real};
