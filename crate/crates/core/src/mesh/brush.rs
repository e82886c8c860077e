use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::graph::within;
use crate::mesh::EdgeGraph;

pub const BRUSH_CACHE_SCHEMA_VERSION: u32 = 1;

/// Precomputed geodesic brush footprints for every (radius, vertex) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BrushCache {
    radii: Vec<f64>,
    /// `neighborhoods[radius_index][vertex]`, each list ascending.
    neighborhoods: Vec<Vec<Vec<usize>>>,
}

#[derive(Serialize, Deserialize)]
struct BrushCacheFile {
    schema_version: u32,
    #[serde(flatten)]
    cache: BrushCache,
}

impl BrushCache {
    pub fn precompute(graph: &EdgeGraph, radii: &[f64]) -> Result<Self> {
        if radii.is_empty() {
            return Err(Error::InvalidArgument("brush radius list is empty".into()));
        }
        if let Some(r) = radii.iter().find(|r| !(**r >= 0.0) || !r.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid brush radius {r}")));
        }
        let max = radii.iter().cloned().fold(0.0, f64::max);
        let mut neighborhoods = vec![Vec::with_capacity(graph.num_vertices()); radii.len()];
        for v in 0..graph.num_vertices() {
            let dist = graph.dijkstra(&[v], max);
            for (ri, &r) in radii.iter().enumerate() {
                neighborhoods[ri].push(within(&dist, r));
            }
        }
        Ok(Self {
            radii: radii.to_vec(),
            neighborhoods,
        })
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn num_vertices(&self) -> usize {
        self.neighborhoods.first().map_or(0, Vec::len)
    }

    /// Index of a published radius; matching tolerates 1e-12 of rounding.
    pub fn radius_index(&self, radius: f64) -> Option<usize> {
        self.radii.iter().position(|&r| (r - radius).abs() <= 1e-12)
    }

    pub fn neighborhood(&self, radius: f64, vertex: usize) -> Option<&[usize]> {
        let ri = self.radius_index(radius)?;
        self.neighborhoods[ri].get(vertex).map(Vec::as_slice)
    }

    /// Full table for one radius, indexed by vertex.
    pub fn table(&self, radius: f64) -> Option<&[Vec<usize>]> {
        self.radius_index(radius).map(|ri| self.neighborhoods[ri].as_slice())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = BrushCacheFile {
            schema_version: BRUSH_CACHE_SCHEMA_VERSION,
            cache: self.clone(),
        };
        let text = serde_json::to_string(&file)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: BrushCacheFile = serde_json::from_str(&text)?;
        if file.schema_version != BRUSH_CACHE_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                expected: BRUSH_CACHE_SCHEMA_VERSION,
                found: file.schema_version,
            });
        }
        let cache = file.cache;
        if cache.neighborhoods.len() != cache.radii.len() {
            return Err(Error::Validation("brush cache radius/table count differs".into()));
        }
        Ok(cache)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrokeMode {
    Draw,
    Erase,
}

/// One paint-brush application centered on a vertex.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stroke {
    pub center: usize,
    pub radius: f64,
    pub mode: StrokeMode,
}

/// Reference replay of a stroke log as the painting client performs it:
/// draw adds the cached footprint, erase removes it, in order.
pub fn replay_strokes(cache: &BrushCache, strokes: &[Stroke]) -> Result<Vec<usize>> {
    let mut selected = vec![false; cache.num_vertices()];
    for (i, s) in strokes.iter().enumerate() {
        let footprint = cache.neighborhood(s.radius, s.center).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "stroke {i}: radius {} or center {} not in brush cache",
                s.radius, s.center
            ))
        })?;
        let value = s.mode == StrokeMode::Draw;
        for &v in footprint {
            selected[v] = value;
        }
    }
    Ok(selected
        .iter()
        .enumerate()
        .filter_map(|(v, &on)| on.then_some(v))
        .collect())
}
