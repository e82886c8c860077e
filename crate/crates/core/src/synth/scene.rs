use serde::{Deserialize, Serialize};

use crate::data::VertexContactVector;
use crate::error::{Error, Result};
use crate::mesh::Vec3;
use crate::synth::geometry::{
    closest_point_on_triangle, mat_vec, norm, point_triangle_distance, sub, triangle_normal, Aabb, Mat3,
};

/// Posed body vertices in the camera frame (meters).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosedBody {
    pub vertices: Vec<Vec3>,
    /// Opaque description of how the body was posed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
}

impl PosedBody {
    pub fn new(vertices: Vec<Vec3>, provenance: Option<String>) -> Result<Self> {
        if vertices.iter().any(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(Error::NonFinite("posed body vertices".into()));
        }
        Ok(Self { vertices, provenance })
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }
}

/// One labeled triangle mesh of the scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMesh {
    pub label: String,
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
}

impl SceneMesh {
    /// Axis-aligned box (before `rotation`), outward-facing triangles.
    pub fn cuboid(label: impl Into<String>, center: Vec3, half: Vec3, rotation: &Mat3) -> Self {
        let mut vertices = Vec::with_capacity(8);
        for i in 0..8 {
            let corner = [
                if i & 1 == 0 { -half[0] } else { half[0] },
                if i & 2 == 0 { -half[1] } else { half[1] },
                if i & 4 == 0 { -half[2] } else { half[2] },
            ];
            let r = mat_vec(rotation, corner);
            vertices.push([center[0] + r[0], center[1] + r[1], center[2] + r[2]]);
        }
        let triangles = vec![
            [0, 4, 6],
            [0, 6, 2], // -x
            [1, 3, 7],
            [1, 7, 5], // +x
            [0, 1, 5],
            [0, 5, 4], // -y
            [2, 6, 7],
            [2, 7, 3], // +y
            [0, 2, 3],
            [0, 3, 1], // -z
            [4, 5, 7],
            [4, 7, 6], // +z
        ];
        Self {
            label: label.into(),
            vertices,
            triangles,
        }
    }

    /// Square ground patch in the `y = height` plane, normal `+y`.
    pub fn ground(label: impl Into<String>, center: Vec3, half_extent: f64) -> Self {
        let (cx, y, cz) = (center[0], center[1], center[2]);
        let h = half_extent;
        Self {
            label: label.into(),
            vertices: vec![
                [cx - h, y, cz - h],
                [cx + h, y, cz - h],
                [cx + h, y, cz + h],
                [cx - h, y, cz + h],
            ],
            triangles: vec![[0, 2, 1], [0, 3, 2]],
        }
    }

    pub fn transformed(&self, rotation: &Mat3) -> Self {
        Self {
            label: self.label.clone(),
            vertices: self.vertices.iter().map(|v| mat_vec(rotation, *v)).collect(),
            triangles: self.triangles.clone(),
        }
    }

    pub fn triangle(&self, t: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneGeometry {
    pub meshes: Vec<SceneMesh>,
}

impl SceneGeometry {
    pub fn new(meshes: Vec<SceneMesh>) -> Self {
        Self { meshes }
    }

    pub fn transformed(&self, rotation: &Mat3) -> Self {
        Self {
            meshes: self.meshes.iter().map(|m| m.transformed(rotation)).collect(),
        }
    }

    pub fn validate(&self, vocabulary: &[String]) -> Result<()> {
        if self.meshes.is_empty() {
            return Err(Error::InvalidArgument("scene has no meshes".into()));
        }
        for m in &self.meshes {
            if !vocabulary.iter().any(|l| l == &m.label) {
                return Err(Error::UnknownLabel(m.label.clone()));
            }
        }
        Ok(())
    }
}

/// Contact of one body vertex with the scene: nearest triangle within threshold.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct VertexHit {
    pub mesh: usize,
    pub distance: f64,
    /// Outward normal of the contacted triangle.
    pub normal: Vec3,
}

/// Exact point-to-triangle contact query with per-triangle bounding-box
/// rejection. Returns the nearest hit per vertex when within `threshold`.
pub fn contact_hits(body: &PosedBody, scene: &SceneGeometry, threshold: f64) -> Result<Vec<Option<VertexHit>>> {
    if !(threshold > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "contact threshold must be positive, got {threshold}"
        )));
    }
    if scene.meshes.is_empty() {
        return Err(Error::InvalidArgument("scene has no meshes".into()));
    }
    let boxes: Vec<Vec<Aabb>> = scene
        .meshes
        .iter()
        .map(|m| {
            (0..m.triangles.len())
                .map(|t| Aabb::from_points(m.triangle(t).iter()))
                .collect()
        })
        .collect();
    let mut hits = Vec::with_capacity(body.num_vertices());
    for &p in &body.vertices {
        let mut best: Option<VertexHit> = None;
        for (mi, m) in scene.meshes.iter().enumerate() {
            for (t, bb) in boxes[mi].iter().enumerate() {
                if bb.distance(p) > threshold {
                    continue;
                }
                let [a, b, c] = m.triangle(t);
                let d = point_triangle_distance(p, a, b, c);
                if d <= threshold && best.is_none_or(|h| d < h.distance) {
                    best = Some(VertexHit {
                        mesh: mi,
                        distance: d,
                        normal: triangle_normal(a, b, c),
                    });
                }
            }
        }
        hits.push(best);
    }
    Ok(hits)
}

/// Binary vertex contact: 1 iff the vertex lies within `threshold` of any
/// scene triangle.
pub fn geometric_contact(body: &PosedBody, scene: &SceneGeometry, threshold: f64) -> Result<VertexContactVector> {
    let hits = contact_hits(body, scene, threshold)?;
    Ok(
        VertexContactVector::from_probabilities(hits.iter().map(|h| if h.is_some() { 1.0 } else { 0.0 }).collect())
            .expect("binary values are in range"),
    )
}

/// Per scene mesh, the body vertices within `threshold` of that mesh.
pub fn per_mesh_contact(body: &PosedBody, scene: &SceneGeometry, threshold: f64) -> Result<Vec<Vec<usize>>> {
    if !(threshold > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "contact threshold must be positive, got {threshold}"
        )));
    }
    Ok(scene
        .meshes
        .iter()
        .map(|m| {
            body.vertices
                .iter()
                .enumerate()
                .filter(|(_, &p)| {
                    (0..m.triangles.len()).any(|t| {
                        let [a, b, c] = m.triangle(t);
                        norm(sub(p, closest_point_on_triangle(p, a, b, c))) <= threshold
                    })
                })
                .map(|(i, _)| i)
                .collect()
        })
        .collect())
}
