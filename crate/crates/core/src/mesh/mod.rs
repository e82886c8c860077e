//! Template mesh, edge-graph geodesics and geodesic brush footprints.

mod brush;
mod graph;
pub mod io;
mod template;

pub use brush::{replay_strokes, BrushCache, Stroke, StrokeMode, BRUSH_CACHE_SCHEMA_VERSION};
pub use graph::EdgeGraph;
pub use io::load_template;
pub use template::{
    cluster_parts, icosphere_geometry, TemplateMesh, Vec3, CANONICAL_PART_COUNT, CANONICAL_VERTEX_COUNT,
    DESK_BODY_HALF_EXTENTS, PART_CLUSTER_SEED,
};
