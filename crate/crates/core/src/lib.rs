//! Differentiable skeleton-graph synthesis from point clouds.
//!
//! The pipeline encodes a point cloud, decodes joint coordinates and node
//! features, learns a soft adjacency from them, refines the joints with
//! multi-level graph attention and trains everything against coordinate,
//! Laplacian-spectrum and adversarial objectives.

pub mod adversarial;
pub mod attention;
pub mod dgcn;
pub mod diffcore;
pub mod encdec;
pub mod error;
pub mod gradcheck;
pub mod graphcore;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod spectral;
pub mod synthdata;

pub use error::{Error, Result};
