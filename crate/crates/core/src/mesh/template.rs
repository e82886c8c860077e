use std::collections::{BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::EdgeGraph;

pub type Vec3 = [f64; 3];

/// Vertex count of the canonical SMPL body template.
pub const CANONICAL_VERTEX_COUNT: usize = 6890;
/// Part count of the canonical SMPL part segmentation.
pub const CANONICAL_PART_COUNT: usize = 24;

/// Seed used when part labels have to be synthesized by clustering.
pub const PART_CLUSTER_SEED: u64 = 0x5eed_0024;

/// Canonical body mesh on which all contact labels live.
///
/// Vertices are in meters. Every vertex carries a part label in `0..num_parts`
/// and every label in that range is used by at least one vertex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateMesh {
    id: String,
    vertices: Vec<Vec3>,
    triangles: Vec<[usize; 3]>,
    part_labels: Vec<usize>,
    num_parts: usize,
}

impl TemplateMesh {
    /// Validates geometry and labels. When `part_labels` is `None`, a `parts`-way
    /// partition is synthesized by seeded spatial k-means.
    pub fn new(
        id: impl Into<String>,
        vertices: Vec<Vec3>,
        triangles: Vec<[usize; 3]>,
        part_labels: Option<Vec<usize>>,
        parts: usize,
    ) -> Result<Self> {
        validate_geometry(&vertices, &triangles)?;
        if parts == 0 {
            return Err(Error::InvalidArgument("part count must be at least 1".into()));
        }
        let part_labels = match part_labels {
            Some(labels) => {
                if labels.len() != vertices.len() {
                    return Err(Error::Validation(format!(
                        "{} part labels for {} vertices",
                        labels.len(),
                        vertices.len()
                    )));
                }
                let distinct: BTreeSet<usize> = labels.iter().copied().collect();
                if distinct.len() != parts || distinct.iter().any(|&l| l >= parts) {
                    return Err(Error::PartCountMismatch {
                        expected: parts,
                        found: distinct.len(),
                    });
                }
                labels
            }
            None => {
                if parts > vertices.len() {
                    return Err(Error::PartCountMismatch {
                        expected: parts,
                        found: vertices.len(),
                    });
                }
                cluster_parts(&vertices, parts, PART_CLUSTER_SEED)
            }
        };
        Ok(Self {
            id: id.into(),
            vertices,
            triangles,
            part_labels,
            num_parts: parts,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn part_labels(&self) -> &[usize] {
        &self.part_labels
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_parts(&self) -> usize {
        self.num_parts
    }

    pub fn is_canonical(&self) -> bool {
        self.num_vertices() == CANONICAL_VERTEX_COUNT && self.num_parts == CANONICAL_PART_COUNT
    }

    pub fn edge_graph(&self) -> EdgeGraph {
        EdgeGraph::from_mesh(self)
    }

    /// Vertices labeled with `part`, ascending.
    pub fn vertices_of_part(&self, part: usize) -> Result<Vec<usize>> {
        if part >= self.num_parts {
            return Err(Error::UnknownPart {
                part,
                parts: self.num_parts,
            });
        }
        Ok(self
            .part_labels
            .iter()
            .enumerate()
            .filter_map(|(v, &p)| (p == part).then_some(v))
            .collect())
    }

    pub fn part_name(&self, part: usize) -> String {
        format!("part_{part:02}")
    }

    /// Number of unique undirected edges.
    pub fn edge_count(&self) -> usize {
        unique_edges(&self.triangles).len()
    }

    /// Regular tetrahedron with unit edges.
    pub fn tetrahedron(part_labels: Option<Vec<usize>>, parts: usize) -> Result<Self> {
        let s3 = 3f64.sqrt();
        let vertices = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.5, s3 / 2.0, 0.0],
            [0.5, s3 / 6.0, (2.0f64 / 3.0).sqrt()],
        ];
        let triangles = vec![[0, 2, 1], [0, 1, 3], [1, 2, 3], [0, 3, 2]];
        Self::new("tetrahedron", vertices, triangles, part_labels, parts)
    }

    /// Unit icosphere after `subdivisions` rounds of 1:4 midpoint subdivision.
    /// Level 3 gives 642 vertices.
    pub fn icosphere(subdivisions: u32, radius: f64, parts: usize) -> Result<Self> {
        let (vertices, triangles) = icosphere_geometry(subdivisions);
        let vertices = vertices
            .into_iter()
            .map(|v| [v[0] * radius, v[1] * radius, v[2] * radius])
            .collect();
        Self::new(
            format!("icosphere-s{subdivisions}-p{parts}"),
            vertices,
            triangles,
            None,
            parts,
        )
    }

    /// Latitude/longitude sphere with `rings` bands and `segments` sectors.
    /// `uv_sphere(83, 84, ..)` has exactly 6890 vertices.
    pub fn uv_sphere(rings: usize, segments: usize, radius: f64, parts: usize) -> Result<Self> {
        let (vertices, triangles) = uv_sphere_geometry(rings, segments, radius)?;
        Self::new(
            format!("uvsphere-{rings}x{segments}-p{parts}"),
            vertices,
            triangles,
            None,
            parts,
        )
    }

    /// Desk-scale body stand-in: a rounded box (superellipsoid, exponent 4)
    /// of 0.44 x 1.70 x 0.28 m, long axis along +y, centered at the origin.
    /// Icosphere points are stretched to the box extents before the radial
    /// projection, so the end faces keep a useful share of the vertices.
    pub fn desk_body(subdivisions: u32, parts: usize) -> Result<Self> {
        let (sphere, triangles) = icosphere_geometry(subdivisions);
        let vertices = sphere
            .iter()
            .map(|u| {
                let stretched = [0, 1, 2].map(|i| u[i] * DESK_BODY_HALF_EXTENTS[i]);
                superellipsoid_point(stretched, DESK_BODY_HALF_EXTENTS, 4.0)
            })
            .collect();
        Self::new(
            format!("desk-body-s{subdivisions}-p{parts}"),
            vertices,
            triangles,
            None,
            parts,
        )
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }
}

pub const DESK_BODY_HALF_EXTENTS: Vec3 = [0.22, 0.85, 0.14];

fn superellipsoid_point(u: Vec3, half: Vec3, exponent: f64) -> Vec3 {
    let sum: f64 = (0..3).map(|i| (u[i] / half[i]).abs().powf(exponent)).sum();
    let r = sum.powf(-1.0 / exponent);
    [u[0] * r, u[1] * r, u[2] * r]
}

pub(crate) fn unique_edges(triangles: &[[usize; 3]]) -> Vec<(usize, usize)> {
    let mut set = BTreeSet::new();
    for t in triangles {
        for k in 0..3 {
            let (a, b) = (t[k], t[(k + 1) % 3]);
            set.insert((a.min(b), a.max(b)));
        }
    }
    set.into_iter().collect()
}

fn validate_geometry(vertices: &[Vec3], triangles: &[[usize; 3]]) -> Result<()> {
    if vertices.is_empty() || triangles.is_empty() {
        return Err(Error::InvalidMesh("mesh has no vertices or no triangles".into()));
    }
    if let Some(v) = vertices.iter().find(|v| v.iter().any(|c| !c.is_finite())) {
        return Err(Error::InvalidMesh(format!("non-finite vertex {v:?}")));
    }
    let n = vertices.len();
    let mut edge_use: HashMap<(usize, usize), usize> = HashMap::new();
    for (ti, t) in triangles.iter().enumerate() {
        if t.iter().any(|&i| i >= n) {
            return Err(Error::InvalidMesh(format!(
                "triangle {ti} references a vertex outside [0, {n})"
            )));
        }
        if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
            return Err(Error::InvalidMesh(format!("triangle {ti} is degenerate: {t:?}")));
        }
        for k in 0..3 {
            let (a, b) = (t[k], t[(k + 1) % 3]);
            let e = (a.min(b), a.max(b));
            if vertices[a] == vertices[b] {
                return Err(Error::InvalidMesh(format!("zero-length edge {e:?}")));
            }
            *edge_use.entry(e).or_default() += 1;
        }
    }
    if let Some((e, c)) = edge_use.iter().find(|(_, &c)| c > 2) {
        return Err(Error::InvalidMesh(format!(
            "non-manifold edge {e:?} shared by {c} triangles"
        )));
    }
    // Connectivity over the edge graph; every vertex must be reached.
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for &(a, b) in edge_use.keys() {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra] = rb;
        }
    }
    let root = find(&mut parent, 0);
    if (0..n).any(|v| find(&mut parent, v) != root) {
        return Err(Error::InvalidMesh("edge graph is disconnected".into()));
    }
    Ok(())
}

/// Seeded k-means (k-means++ seeding, Lloyd iterations) over vertex positions.
/// Empty clusters are refilled with the point farthest from its centroid, so
/// the result always uses exactly `k` labels.
pub fn cluster_parts(points: &[Vec3], k: usize, seed: u64) -> Vec<usize> {
    let n = points.len();
    assert!(k >= 1 && k <= n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d2 = |a: &Vec3, b: &Vec3| (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>();

    let mut centers: Vec<Vec3> = vec![points[rng.random_range(0..n)]];
    let mut nearest: Vec<f64> = points.iter().map(|p| d2(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total <= 0.0 {
            // All remaining points coincide with a center; pick any unused index.
            (0..n).find(|&i| !centers.contains(&points[i])).unwrap_or(0)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, w) in nearest.iter().enumerate() {
                if target < *w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        };
        centers.push(points[next]);
        for (i, p) in points.iter().enumerate() {
            nearest[i] = nearest[i].min(d2(p, &points[next]));
        }
    }

    let mut labels = vec![0usize; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| d2(p, &centers[a]).total_cmp(&d2(p, &centers[b])))
                .unwrap();
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        let mut sums = vec![[0.0; 3]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for c in 0..3 {
                sums[l][c] += p[c];
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Steal the point farthest from its current center.
                let far = (0..n)
                    .filter(|&i| counts[labels[i]] > 1)
                    .max_by(|&a, &b| {
                        d2(&points[a], &centers[labels[a]]).total_cmp(&d2(&points[b], &centers[labels[b]]))
                    })
                    .expect("k <= n guarantees a donor cluster");
                counts[labels[far]] -= 1;
                for j in 0..3 {
                    sums[labels[far]][j] -= points[far][j];
                }
                labels[far] = c;
                counts[c] = 1;
                sums[c] = points[far];
                changed = true;
            }
        }
        for c in 0..k {
            centers[c] = [
                sums[c][0] / counts[c] as f64,
                sums[c][1] / counts[c] as f64,
                sums[c][2] / counts[c] as f64,
            ];
        }
        if !changed {
            break;
        }
    }
    labels
}

pub fn icosphere_geometry(subdivisions: u32) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vec3> = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ]
    .into_iter()
    .map(normalize)
    .collect();
    let mut triangles: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::with_capacity(triangles.len() * 4);
        let mut midpoint = |a: usize, b: usize, vertices: &mut Vec<Vec3>| -> usize {
            *midpoints.entry((a.min(b), a.max(b))).or_insert_with(|| {
                let (p, q) = (vertices[a], vertices[b]);
                vertices.push(normalize([
                    (p[0] + q[0]) / 2.0,
                    (p[1] + q[1]) / 2.0,
                    (p[2] + q[2]) / 2.0,
                ]));
                vertices.len() - 1
            })
        };
        for [a, b, c] in triangles {
            let ab = midpoint(a, b, &mut vertices);
            let bc = midpoint(b, c, &mut vertices);
            let ca = midpoint(c, a, &mut vertices);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        triangles = next;
    }
    (vertices, triangles)
}

fn uv_sphere_geometry(rings: usize, segments: usize, radius: f64) -> Result<(Vec<Vec3>, Vec<[usize; 3]>)> {
    if rings < 2 || segments < 3 {
        return Err(Error::InvalidArgument(
            "uv sphere needs at least 2 rings and 3 segments".into(),
        ));
    }
    let mut vertices = vec![[0.0, radius, 0.0]];
    for r in 1..rings {
        let phi = std::f64::consts::PI * r as f64 / rings as f64;
        for s in 0..segments {
            let theta = 2.0 * std::f64::consts::PI * s as f64 / segments as f64;
            vertices.push([
                radius * phi.sin() * theta.cos(),
                radius * phi.cos(),
                radius * phi.sin() * theta.sin(),
            ]);
        }
    }
    vertices.push([0.0, -radius, 0.0]);
    let bottom = vertices.len() - 1;
    let ring = |r: usize, s: usize| 1 + (r - 1) * segments + (s % segments);
    let mut triangles = Vec::new();
    for s in 0..segments {
        triangles.push([0, ring(1, s + 1), ring(1, s)]);
    }
    for r in 1..rings - 1 {
        for s in 0..segments {
            let (a, b) = (ring(r, s), ring(r, s + 1));
            let (c, d) = (ring(r + 1, s), ring(r + 1, s + 1));
            triangles.push([a, b, d]);
            triangles.push([a, d, c]);
        }
    }
    for s in 0..segments {
        triangles.push([bottom, ring(rings - 1, s), ring(rings - 1, s + 1)]);
    }
    Ok((vertices, triangles))
}

fn normalize(v: Vec3) -> Vec3 {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tetrahedron_two_parts() {
        let m = TemplateMesh::tetrahedron(Some(vec![0, 0, 1, 1]), 2).unwrap();
        assert_eq!(m.num_vertices(), 4);
        assert_eq!(m.num_parts(), 2);
        assert_eq!(m.vertices_of_part(0).unwrap(), vec![0, 1]);
        assert_eq!(m.vertices_of_part(1).unwrap(), vec![2, 3]);
    }

    #[test]
    fn icosphere_euler_characteristic() {
        let m = TemplateMesh::icosphere(3, 1.0, 24).unwrap();
        let (v, e, f) = (m.num_vertices(), m.edge_count(), m.triangles().len());
        assert_eq!(v, 642);
        assert_eq!(v as i64 - e as i64 + f as i64, 2);
        assert_eq!(e, 3 * (v - 2));
    }

    #[test]
    fn synthetic_parts_partition_vertices() {
        let m = TemplateMesh::icosphere(3, 1.0, 24).unwrap();
        let mut total = 0;
        let mut seen = vec![false; m.num_vertices()];
        for p in 0..24 {
            let vs = m.vertices_of_part(p).unwrap();
            assert!(!vs.is_empty());
            for v in vs {
                assert!(!seen[v]);
                seen[v] = true;
                total += 1;
            }
        }
        assert_eq!(total, m.num_vertices());
    }

    #[test]
    fn single_part_is_everything() {
        let m = TemplateMesh::icosphere(1, 1.0, 1).unwrap();
        assert_eq!(m.vertices_of_part(0).unwrap().len(), m.num_vertices());
    }

    #[test]
    fn unknown_part_rejected() {
        let m = TemplateMesh::tetrahedron(Some(vec![0, 0, 1, 1]), 2).unwrap();
        assert!(matches!(m.vertices_of_part(2), Err(Error::UnknownPart { .. })));
    }

    #[test]
    fn clustering_is_deterministic() {
        let a = TemplateMesh::desk_body(2, 24).unwrap();
        let b = TemplateMesh::desk_body(2, 24).unwrap();
        assert_eq!(a.part_labels(), b.part_labels());
    }

    #[test]
    fn part_count_mismatch_rejected() {
        let err = TemplateMesh::tetrahedron(Some(vec![0, 0, 0, 0]), 2).unwrap_err();
        assert!(matches!(err, Error::PartCountMismatch { .. }));
    }

    #[test]
    fn disconnected_and_out_of_range_rejected() {
        let verts = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [5.0, 0.0, 0.0],
            [6.0, 0.0, 0.0],
            [5.0, 1.0, 0.0],
        ];
        let err = TemplateMesh::new("x", verts.clone(), vec![[0, 1, 2], [3, 4, 5]], None, 1).unwrap_err();
        assert!(matches!(err, Error::InvalidMesh(_)));
        let err = TemplateMesh::new("x", verts, vec![[0, 1, 9]], None, 1).unwrap_err();
        assert!(matches!(err, Error::InvalidMesh(_)));
    }

    #[test]
    fn non_manifold_edge_rejected() {
        let verts = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, -1.0, 0.0],
            [0.0, 0.0, 1.0],
        ];
        let tris = vec![[0, 1, 2], [1, 0, 3], [0, 1, 4]];
        assert!(TemplateMesh::new("x", verts, tris, None, 1).is_err());
    }

    #[test]
    fn uv_sphere_has_canonical_vertex_count() {
        let m = TemplateMesh::uv_sphere(83, 84, 1.0, CANONICAL_PART_COUNT).unwrap();
        assert_eq!(m.num_vertices(), CANONICAL_VERTEX_COUNT);
        assert!(m.is_canonical());
    }

    #[test]
    fn desk_body_extents() {
        let m = TemplateMesh::desk_body(3, 24).unwrap();
        let ys: Vec<f64> = m.vertices().iter().map(|v| v[1]).collect();
        let max = ys.iter().cloned().fold(f64::MIN, f64::max);
        let min = ys.iter().cloned().fold(f64::MAX, f64::min);
        assert!((max - 0.85).abs() < 1e-9 && (min + 0.85).abs() < 1e-9);
    }
}
