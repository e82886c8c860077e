//! Dense vertex-level human-scene contact estimation.
//!
//! The crate covers the whole pipeline at desk scale: a template body mesh
//! with edge-graph geodesics and brush caches ([`mesh`]), the vertex-level
//! contact dataset schema ([`data`]), a deterministic synthetic scene
//! generator and geometric contact oracle ([`synth`]), the dual-encoder
//! cross-attention contact network ([`model`]) trained with the losses in
//! [`losses`], evaluation and annotation-quality metrics ([`metrics`]), and
//! the train / eval / infer / stats pipelines ([`pipeline`]).

pub mod data;
pub mod error;
pub mod losses;
pub mod mesh;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod tape;

pub use error::{Error, Result};
