use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::mesh::template::unique_edges;
use crate::mesh::TemplateMesh;

/// Undirected, weighted vertex adjacency of a triangle mesh. Edge weights are
/// Euclidean edge lengths in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeGraph {
    adjacency: Vec<Vec<(usize, f64)>>,
    num_edges: usize,
}

#[derive(Copy, Clone, PartialEq)]
struct Frontier {
    dist: f64,
    vertex: usize,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on distance, ties broken by vertex index.
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.vertex.cmp(&self.vertex))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl EdgeGraph {
    pub fn from_mesh(mesh: &TemplateMesh) -> Self {
        Self::from_edges(mesh.num_vertices(), mesh.vertices(), &unique_edges(mesh.triangles()))
    }

    fn from_edges(n: usize, vertices: &[[f64; 3]], edges: &[(usize, usize)]) -> Self {
        let mut adjacency = vec![Vec::new(); n];
        for &(a, b) in edges {
            let (p, q) = (vertices[a], vertices[b]);
            let len = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
            adjacency[a].push((b, len));
            adjacency[b].push((a, len));
        }
        for list in &mut adjacency {
            list.sort_by_key(|&(v, _)| v);
        }
        Self {
            adjacency,
            num_edges: edges.len(),
        }
    }

    /// Graph from explicit weighted edges; used for path fixtures.
    pub fn from_weighted_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut adjacency = vec![Vec::new(); n];
        for &(a, b, w) in edges {
            if a >= n || b >= n || a == b {
                return Err(Error::InvalidArgument(format!("bad edge ({a}, {b})")));
            }
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::InvalidArgument(format!("edge ({a}, {b}) has length {w}")));
            }
            adjacency[a].push((b, w));
            adjacency[b].push((a, w));
        }
        for list in &mut adjacency {
            list.sort_by_key(|&(v, _)| v);
        }
        Ok(Self {
            adjacency,
            num_edges: edges.len(),
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.adjacency.len()
    }

    pub fn num_edges(&self) -> usize {
        self.num_edges
    }

    pub fn neighbors(&self, v: usize) -> &[(usize, f64)] {
        &self.adjacency[v]
    }

    /// Each undirected edge once, as `(low, high, length)`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(a, list)| list.iter().filter(move |&&(b, _)| a < b).map(move |&(b, w)| (a, b, w)))
    }

    /// Multi-source shortest-path distances along mesh edges. Unreachable
    /// vertices get `f64::INFINITY`.
    pub fn geodesic_distances(&self, sources: &[usize]) -> Result<Vec<f64>> {
        if sources.is_empty() {
            return Err(Error::InvalidArgument("geodesic source set is empty".into()));
        }
        if let Some(&s) = sources.iter().find(|&&s| s >= self.num_vertices()) {
            return Err(Error::InvalidArgument(format!("source vertex {s} out of range")));
        }
        Ok(self.dijkstra(sources, f64::INFINITY))
    }

    /// `{ v : d(center, v) <= radius }`, ascending.
    pub fn geodesic_neighborhood(&self, center: usize, radius: f64) -> Result<Vec<usize>> {
        if !(radius >= 0.0) {
            return Err(Error::InvalidArgument(format!("brush radius {radius} is negative")));
        }
        if center >= self.num_vertices() {
            return Err(Error::InvalidArgument(format!("center vertex {center} out of range")));
        }
        let dist = self.dijkstra(&[center], radius);
        Ok(within(&dist, radius))
    }

    /// Dijkstra that stops expanding once the frontier exceeds `bound`.
    /// Settled distances `<= bound` are identical to the unbounded run.
    pub(crate) fn dijkstra(&self, sources: &[usize], bound: f64) -> Vec<f64> {
        let mut dist = vec![f64::INFINITY; self.num_vertices()];
        let mut heap = BinaryHeap::new();
        for &s in sources {
            dist[s] = 0.0;
            heap.push(Frontier { dist: 0.0, vertex: s });
        }
        while let Some(Frontier { dist: d, vertex: u }) = heap.pop() {
            if d > dist[u] {
                continue;
            }
            if d > bound {
                break;
            }
            for &(v, w) in &self.adjacency[u] {
                let nd = d + w;
                if nd < dist[v] {
                    dist[v] = nd;
                    heap.push(Frontier { dist: nd, vertex: v });
                }
            }
        }
        dist
    }
}

pub(crate) fn within(dist: &[f64], radius: f64) -> Vec<usize> {
    dist.iter()
        .enumerate()
        .filter_map(|(v, &d)| (d <= radius).then_some(v))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path3() -> EdgeGraph {
        EdgeGraph::from_weighted_edges(3, &[(0, 1, 1.0), (1, 2, 1.0)]).unwrap()
    }

    fn unit_tetra() -> EdgeGraph {
        TemplateMesh::tetrahedron(None, 1).unwrap().edge_graph()
    }

    #[test]
    fn tetrahedron_has_six_unit_edges() {
        let g = unit_tetra();
        assert_eq!(g.num_edges(), 6);
        for (_, _, w) in g.edges() {
            assert!((w - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn three_four_five_triangle() {
        let m = TemplateMesh::new(
            "345",
            vec![[0.0, 0.0, 0.0], [3.0, 0.0, 0.0], [0.0, 4.0, 0.0]],
            vec![[0, 1, 2]],
            None,
            1,
        )
        .unwrap();
        let mut lengths: Vec<f64> = m.edge_graph().edges().map(|e| e.2).collect();
        lengths.sort_by(f64::total_cmp);
        assert_eq!(lengths, vec![3.0, 4.0, 5.0]);
    }

    #[test]
    fn graph_is_symmetric() {
        let g = TemplateMesh::icosphere(2, 1.0, 1).unwrap().edge_graph();
        for u in 0..g.num_vertices() {
            for &(v, w) in g.neighbors(u) {
                assert!(w > 0.0);
                assert!(g.neighbors(v).iter().any(|&(x, wx)| x == u && wx == w));
            }
        }
    }

    #[test]
    fn path_distances() {
        assert_eq!(path3().geodesic_distances(&[0]).unwrap(), vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn all_sources_give_zero() {
        let g = unit_tetra();
        assert_eq!(g.geodesic_distances(&[0, 1, 2, 3]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn tetra_distances() {
        let d = unit_tetra().geodesic_distances(&[0]).unwrap();
        assert_eq!(d[0], 0.0);
        for v in 1..4 {
            assert!((d[v] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_sources_rejected() {
        assert!(path3().geodesic_distances(&[]).is_err());
    }

    #[test]
    fn neighborhoods() {
        let g = unit_tetra();
        assert_eq!(g.geodesic_neighborhood(2, 0.0).unwrap(), vec![2]);
        assert_eq!(g.geodesic_neighborhood(0, 1.0).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(g.geodesic_neighborhood(0, 0.5).unwrap(), vec![0]);
        assert_eq!(path3().geodesic_neighborhood(0, 10.0).unwrap(), vec![0, 1, 2]);
        assert!(g.geodesic_neighborhood(0, -0.1).is_err());
    }
}
