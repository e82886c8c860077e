//! Python module `deco_py`: metrics, geodesics, stroke replay, synthetic
//! samples and checkpoint inference.

use std::path::PathBuf;

use deco_core::data::VertexContactVector;
use deco_core::losses::{total_loss as core_total_loss, LossComponents, LossWeights};
use deco_core::mesh::{replay_strokes as core_replay, BrushCache, EdgeGraph, Stroke, StrokeMode, TemplateMesh};
use deco_core::metrics::{self, RatingMatrix};
use deco_core::pipeline::{load_image, Checkpoint};
use deco_core::synth::{SynthConfig, Synthesizer};
use deco_core::tape::Tensor;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err(e: deco_core::error::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn vector(values: Vec<f64>) -> PyResult<VertexContactVector> {
    VertexContactVector::from_probabilities(values).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (pred, gt, threshold = 0.5))]
fn precision_recall_f1(pred: Vec<f64>, gt: Vec<f64>, threshold: f64) -> PyResult<(f64, f64, f64)> {
    let m = metrics::precision_recall_f1(&vector(pred)?, &vector(gt)?, threshold).map_err(err)?;
    Ok((m.precision, m.recall, m.f1))
}

#[pyfunction]
fn iou(a: Vec<usize>, b: Vec<usize>) -> f64 {
    metrics::iou(&a, &b)
}

/// Rows are items, columns categories, entries rater counts.
#[pyfunction]
fn fleiss_kappa(counts: Vec<Vec<usize>>) -> PyResult<f64> {
    Ok(metrics::fleiss_kappa(&RatingMatrix::new(counts).map_err(err)?))
}

#[pyfunction]
fn geodesic_distances(n: usize, edges: Vec<(usize, usize, f64)>, sources: Vec<usize>) -> PyResult<Vec<f64>> {
    let g = EdgeGraph::from_weighted_edges(n, &edges).map_err(err)?;
    g.geodesic_distances(&sources).map_err(err)
}

/// Weighted sum with the default weights; `None` terms are skipped.
#[pyfunction]
#[pyo3(signature = (contact, pal, scene, part))]
fn total_loss(contact: Option<f64>, pal: Option<f64>, scene: Option<f64>, part: Option<f64>) -> PyResult<f64> {
    let c = LossComponents {
        contact,
        pal,
        scene,
        part,
    };
    core_total_loss(&c, &LossWeights::PAPER).map_err(err)
}

/// `strokes` holds `(center, radius, draw)` triples applied in order on an
/// icosphere with `subdivisions` levels.
#[pyfunction]
fn replay_strokes(subdivisions: u32, radii: Vec<f64>, strokes: Vec<(usize, f64, bool)>) -> PyResult<Vec<usize>> {
    let mesh = TemplateMesh::icosphere(subdivisions, 1.0, 1).map_err(err)?;
    let cache = BrushCache::precompute(&mesh.edge_graph(), &radii).map_err(err)?;
    let strokes: Vec<Stroke> = strokes
        .into_iter()
        .map(|(center, radius, draw)| Stroke {
            center,
            radius,
            mode: if draw { StrokeMode::Draw } else { StrokeMode::Erase },
        })
        .collect();
    core_replay(&cache, &strokes).map_err(err)
}

/// Synthetic sample with the default generator: `(image_chw, height, width,
/// contact)`.
#[pyfunction]
fn synth_sample(seed: u64) -> PyResult<(Vec<f64>, usize, usize, Vec<f64>)> {
    let synth = Synthesizer::new(SynthConfig::default()).map_err(err)?;
    let s = synth.generate_sample(seed).map_err(err)?;
    let (h, w) = synth.config().image_size;
    Ok((s.image.to_chw(), h, w, s.gt_contact.into_values()))
}

/// A trained checkpoint.
#[pyclass(module = "deco_py")]
struct Model {
    inner: deco_core::model::DecoModel,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(err)?;
        Ok(Self {
            inner: ckpt.model().map_err(err)?,
        })
    }

    #[getter]
    fn n_vertices(&self) -> usize {
        self.inner.config().n_vertices
    }

    /// Contact probabilities for an image file.
    fn predict(&self, image: PathBuf) -> PyResult<Vec<f64>> {
        let (h, w) = self.inner.config().input_size;
        let chw = load_image(&image, (h, w)).map_err(err)?.to_chw();
        let t = Tensor::new(vec![1, 3, h, w], chw).map_err(err)?;
        let mut out = self.inner.predict_contact(&t).map_err(err)?;
        Ok(out.remove(0).into_values())
    }
}

#[pymodule]
fn deco_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(precision_recall_f1, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(fleiss_kappa, m)?)?;
    m.add_function(wrap_pyfunction!(geodesic_distances, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    m.add_function(wrap_pyfunction!(replay_strokes, m)?)?;
    m.add_function(wrap_pyfunction!(synth_sample, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
