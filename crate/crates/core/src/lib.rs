//! Heterogeneous audio-visual graph neural networks for acoustic event
//! classification.
//!
//! Audio and video segment embeddings become the two node types of a
//! heterogeneous graph. Intra-modality temporal edges feed per-modality GCN
//! branches; video-to-audio edges feed an attention-based fusion branch.
//! Node embeddings are pooled with learnable per-position weights and
//! classified with independent per-class sigmoids.

pub mod data;
pub mod error;
pub mod graph;
pub mod layers;
pub mod metrics;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
