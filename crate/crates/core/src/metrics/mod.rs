//! Contact evaluation metrics and annotation agreement statistics.

mod agreement;

pub use agreement::{fleiss_kappa, iou, pairwise_iou, qualification_gate, RatingMatrix};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::VertexContactVector;
use crate::error::{Error, Result};
use crate::mesh::{EdgeGraph, TemplateMesh};

/// Predictions at or above this probability count as contact.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    /// From true-positive, false-positive and false-negative counts.
    /// Both sets empty scores 1 across the board; one empty set scores 0.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        if tp + fp + fn_ == 0 {
            return Self {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
            };
        }
        let precision = if tp + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = if tp + fn_ == 0 {
            0.0
        } else {
            tp as f64 / (tp + fn_) as f64
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self { precision, recall, f1 }
    }
}

fn check_lengths(pred: &VertexContactVector, gt: &VertexContactVector) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "prediction has {} vertices, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

fn counts(pred: &[f64], gt: &[f64], threshold: f64, subset: Option<&[usize]>) -> (usize, usize, usize) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    let mut visit = |i: usize| match (pred[i] >= threshold, gt[i] >= 0.5) {
        (true, true) => tp += 1,
        (true, false) => fp += 1,
        (false, true) => fn_ += 1,
        (false, false) => {}
    };
    match subset {
        Some(ids) => ids.iter().for_each(|&i| visit(i)),
        None => (0..pred.len()).for_each(&mut visit),
    }
    (tp, fp, fn_)
}

/// Precision, recall and F1 of thresholded predictions against binary labels.
pub fn precision_recall_f1(pred: &VertexContactVector, gt: &VertexContactVector, threshold: f64) -> Result<Prf> {
    check_lengths(pred, gt)?;
    let (tp, fp, fn_) = counts(pred.values(), gt.values(), threshold, None);
    Ok(Prf::from_counts(tp, fp, fn_))
}

/// Mean geodesic distance in centimeters from each false-positive vertex to
/// the nearest ground-truth contact vertex (graph edge lengths in meters).
///
/// No false positives gives `Some(0.0)`. False positives against an empty
/// ground truth have no nearest contact and give `None`.
pub fn geodesic_error_cm(
    pred: &VertexContactVector,
    gt: &VertexContactVector,
    graph: &EdgeGraph,
    threshold: f64,
) -> Result<Option<f64>> {
    check_lengths(pred, gt)?;
    if graph.num_vertices() != gt.len() {
        return Err(Error::TemplateMismatch(format!(
            "graph has {} vertices, labels {}",
            graph.num_vertices(),
            gt.len()
        )));
    }
    let false_pos: Vec<usize> = (0..pred.len())
        .filter(|&i| pred.values()[i] >= threshold && gt.values()[i] < 0.5)
        .collect();
    geodesic_error_of(&false_pos, &gt.positives(0.5), graph)
}

fn geodesic_error_of(false_pos: &[usize], gt_ids: &[usize], graph: &EdgeGraph) -> Result<Option<f64>> {
    if false_pos.is_empty() {
        return Ok(Some(0.0));
    }
    if gt_ids.is_empty() {
        return Ok(None);
    }
    let dist = graph.geodesic_distances(gt_ids)?;
    let total: f64 = false_pos.iter().map(|&v| dist[v]).sum();
    Ok(Some(100.0 * total / false_pos.len() as f64))
}

/// Metrics for a subset of vertices (one body part).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub geodesic_error_cm: Option<f64>,
}

/// Dataset-level metrics: means of per-sample values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Mean over samples where the error is defined; `None` if it never is.
    pub geodesic_error_cm: Option<f64>,
    /// Keyed by part name.
    pub per_part: BTreeMap<String, PartMetrics>,
    pub sample_count: usize,
    pub threshold: f64,
    /// Conventions used to compute the numbers above.
    pub notes: Vec<String>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub const REPORT_NOTES: [&str; 3] = [
    "geodesic error is one-sided: false-positive vertices to the nearest ground-truth contact vertex, in cm",
    "empty prediction and empty ground truth score precision = recall = F1 = 1",
    "no false positives gives geodesic error 0; samples with false positives but no ground-truth contact are excluded from the geodesic mean",
];

#[derive(Default)]
struct Acc {
    p: f64,
    r: f64,
    f: f64,
    n: usize,
    geo: f64,
    geo_n: usize,
}

impl Acc {
    fn add(&mut self, m: Prf, geo: Option<f64>) {
        self.p += m.precision;
        self.r += m.recall;
        self.f += m.f1;
        self.n += 1;
        if let Some(g) = geo {
            self.geo += g;
            self.geo_n += 1;
        }
    }

    fn mean(&self) -> (Prf, Option<f64>) {
        let n = self.n as f64;
        (
            Prf {
                precision: self.p / n,
                recall: self.r / n,
                f1: self.f / n,
            },
            (self.geo_n > 0).then(|| self.geo / self.geo_n as f64),
        )
    }
}

/// Evaluates predictions against labels on `mesh`, with per-part breakdown.
pub fn evaluate(
    preds: &[VertexContactVector],
    gts: &[VertexContactVector],
    mesh: &TemplateMesh,
    threshold: f64,
) -> Result<MetricsReport> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::InvalidArgument("no samples to evaluate".into()));
    }
    let graph = mesh.edge_graph();
    let parts: Vec<Vec<usize>> = (0..mesh.num_parts())
        .map(|p| mesh.vertices_of_part(p))
        .collect::<Result<_>>()?;
    let mut all = Acc::default();
    let mut per_part: Vec<Acc> = (0..parts.len()).map(|_| Acc::default()).collect();
    for (pred, gt) in preds.iter().zip(gts) {
        check_lengths(pred, gt)?;
        if gt.len() != mesh.num_vertices() {
            return Err(Error::TemplateMismatch(format!(
                "labels have {} vertices, template {}",
                gt.len(),
                mesh.num_vertices()
            )));
        }
        let gt_ids = gt.positives(0.5);
        let dist = if gt_ids.is_empty() {
            None
        } else {
            Some(graph.geodesic_distances(&gt_ids)?)
        };
        let geo_of = |fp: &[usize]| -> Option<f64> {
            if fp.is_empty() {
                Some(0.0)
            } else {
                dist.as_ref()
                    .map(|d| 100.0 * fp.iter().map(|&v| d[v]).sum::<f64>() / fp.len() as f64)
            }
        };
        let is_fp = |i: &usize| pred.values()[*i] >= threshold && gt.values()[*i] < 0.5;
        let (tp, fp, fn_) = counts(pred.values(), gt.values(), threshold, None);
        let fps: Vec<usize> = (0..pred.len()).filter(is_fp).collect();
        all.add(Prf::from_counts(tp, fp, fn_), geo_of(&fps));
        for (acc, ids) in per_part.iter_mut().zip(&parts) {
            let (tp, fp, fn_) = counts(pred.values(), gt.values(), threshold, Some(ids));
            let fps: Vec<usize> = ids.iter().copied().filter(is_fp).collect();
            acc.add(Prf::from_counts(tp, fp, fn_), geo_of(&fps));
        }
    }
    let (m, geo) = all.mean();
    Ok(MetricsReport {
        precision: m.precision,
        recall: m.recall,
        f1: m.f1,
        geodesic_error_cm: geo,
        per_part: per_part
            .iter()
            .enumerate()
            .map(|(p, acc)| {
                let (m, geo) = acc.mean();
                (
                    mesh.part_name(p),
                    PartMetrics {
                        precision: m.precision,
                        recall: m.recall,
                        f1: m.f1,
                        geodesic_error_cm: geo,
                    },
                )
            })
            .collect(),
        sample_count: preds.len(),
        threshold,
        notes: REPORT_NOTES.iter().map(|s| s.to_string()).collect(),
    })
}
