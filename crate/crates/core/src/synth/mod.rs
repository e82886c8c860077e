//! Deterministic synthetic scenes: a posed body, labeled scene boxes on a
//! ground plane, a weak-perspective camera, a flat-shaded rendering, and the
//! geometric contact oracle that labels them.

mod camera;
mod generate;
pub mod geometry;
pub mod render;
mod scene;

pub use camera::{Camera, MIN_IMAGE_SIDE};
pub use generate::{generate_sample, FamilyWeight, PoseFamily, SynthConfig, SynthSample, Synthesizer, TemplateSpec};
pub use render::{render_flat, BodyView, LabelMap, Rendered, RgbImage};
pub use scene::{contact_hits, geometric_contact, per_mesh_contact, PosedBody, SceneGeometry, SceneMesh, VertexHit};
