use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{object_label_histogram, part_contact_histogram, ContactDataset, VertexContactVector};
use crate::error::{Error, Result};
use crate::losses::contact_bce;
use crate::mesh::io::{probability_color, write_colored_ply};
use crate::mesh::TemplateMesh;
use crate::metrics::{evaluate, precision_recall_f1, MetricsReport, DEFAULT_THRESHOLD};
use crate::model::DecoModel;
use crate::pipeline::generate::load_dataset_template;
use crate::pipeline::samples::{load_image, prepare_split, stack_images, PreparedSample};
use crate::pipeline::train::Checkpoint;
use crate::tape::Tensor;

const PREDICT_CHUNK: usize = 16;

/// Anything that maps prepared samples to per-vertex contact probabilities.
pub trait ContactPredictor {
    fn predict(&self, samples: &[&PreparedSample]) -> Result<Vec<VertexContactVector>>;
}

impl ContactPredictor for DecoModel {
    fn predict(&self, samples: &[&PreparedSample]) -> Result<Vec<VertexContactVector>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(PREDICT_CHUNK) {
            out.extend(self.predict_contact(&stack_images(chunk, self.config().input_size)?)?);
        }
        Ok(out)
    }
}

/// Predicts the same probability for every vertex of every image.
#[derive(Copy, Clone, Debug)]
pub struct ConstantPredictor {
    pub n_vertices: usize,
    pub value: f64,
}

impl ContactPredictor for ConstantPredictor {
    fn predict(&self, samples: &[&PreparedSample]) -> Result<Vec<VertexContactVector>> {
        samples
            .iter()
            .map(|_| VertexContactVector::from_probabilities(vec![self.value; self.n_vertices]))
            .collect()
    }
}

/// Image-independent baseline: a vertex is in contact iff its contact
/// frequency over the training labels reaches a threshold, which is tuned to
/// maximize mean training F1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyBaseline {
    pub frequency: Vec<f64>,
    pub threshold: f64,
}

impl FrequencyBaseline {
    pub fn fit(labels: &[VertexContactVector]) -> Result<Self> {
        let first = labels
            .first()
            .ok_or_else(|| Error::InvalidArgument("no labels to fit the baseline".into()))?;
        let n = first.len();
        let mut frequency = vec![0.0; n];
        for l in labels {
            if l.len() != n {
                return Err(Error::Shape("labels of different lengths".into()));
            }
            for (f, &v) in frequency.iter_mut().zip(l.values()) {
                *f += if v >= 0.5 { 1.0 } else { 0.0 };
            }
        }
        frequency.iter_mut().for_each(|f| *f /= labels.len() as f64);
        let mut candidates: Vec<f64> = frequency.clone();
        candidates.push(f64::INFINITY);
        candidates.sort_by(f64::total_cmp);
        candidates.dedup();
        let mut best = (f64::NEG_INFINITY, f64::INFINITY);
        for &t in &candidates {
            let model = Self {
                frequency: frequency.clone(),
                threshold: t,
            };
            let pred = model.mask();
            let mut f1 = 0.0;
            for l in labels {
                f1 += precision_recall_f1(&pred, l, DEFAULT_THRESHOLD)?.f1;
            }
            if f1 > best.0 {
                best = (f1, t);
            }
        }
        Ok(Self {
            frequency,
            threshold: best.1,
        })
    }

    pub fn mask(&self) -> VertexContactVector {
        VertexContactVector::from_probabilities(
            self.frequency
                .iter()
                .map(|&f| if f >= self.threshold { 1.0 } else { 0.0 })
                .collect(),
        )
        .expect("binary values")
    }
}

impl ContactPredictor for FrequencyBaseline {
    fn predict(&self, samples: &[&PreparedSample]) -> Result<Vec<VertexContactVector>> {
        Ok(vec![self.mask(); samples.len()])
    }
}

/// Contact labels of the samples that carry them.
pub fn labeled(samples: &[PreparedSample]) -> (Vec<&PreparedSample>, Vec<VertexContactVector>) {
    samples
        .iter()
        .filter_map(|s| {
            let c = s.contact.as_ref()?;
            Some((
                s,
                VertexContactVector::from_probabilities(c.clone()).expect("binary labels"),
            ))
        })
        .unzip()
}

/// Metrics of `predictor` on every sample with 3D labels.
pub fn evaluate_predictor(
    predictor: &dyn ContactPredictor,
    samples: &[PreparedSample],
    template: &TemplateMesh,
    threshold: f64,
) -> Result<MetricsReport> {
    let (inputs, gts) = labeled(samples);
    let preds = predictor.predict(&inputs)?;
    evaluate(&preds, &gts, template, threshold)
}

/// Mean pixel BCE between the splatted contact prediction and the 2D
/// contact mask over samples with rendering assets.
pub fn rendered_map_bce(model: &DecoModel, samples: &[PreparedSample]) -> Result<f64> {
    let with_pal: Vec<&PreparedSample> = samples.iter().filter(|s| s.pal.is_some()).collect();
    if with_pal.is_empty() {
        return Err(Error::InvalidArgument("no samples with 2D contact masks".into()));
    }
    let preds = model.predict(&with_pal)?;
    let mut total = 0.0;
    for (s, p) in with_pal.iter().zip(&preds) {
        let (plan, mask) = s.pal.as_ref().expect("filtered");
        total += contact_bce(&plan.render(p.values())?.values, mask)?;
    }
    Ok(total / with_pal.len() as f64)
}

fn check_template(ckpt: &Checkpoint, dataset: &ContactDataset) -> Result<()> {
    if ckpt.template.id() != dataset.template_id || ckpt.template.num_vertices() != dataset.n_vertices {
        return Err(Error::TemplateMismatch(format!(
            "checkpoint template `{}` ({} vertices) vs dataset template `{}` ({} vertices)",
            ckpt.template.id(),
            ckpt.template.num_vertices(),
            dataset.template_id,
            dataset.n_vertices
        )));
    }
    Ok(())
}

/// Evaluates a checkpoint on one split of a dataset.
pub fn cmd_eval(checkpoint: &Path, dataset_dir: &Path, split: &str) -> Result<MetricsReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let dataset = ContactDataset::load(dataset_dir)?;
    check_template(&ckpt, &dataset)?;
    let model = ckpt.model()?;
    let samples = prepare_split(dataset_dir, &dataset, split, model.config(), &ckpt.config.splat)?;
    evaluate_predictor(&model, &samples, &ckpt.template, DEFAULT_THRESHOLD)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferOutput {
    pub image: PathBuf,
    pub template_id: String,
    pub probabilities: Vec<f64>,
    pub seconds: f64,
}

pub const INFER_JSON: &str = "contact.json";
pub const INFER_PLY: &str = "contact.ply";

/// Predicts contact for one image and writes `contact.json` plus a PLY of the
/// rest-pose template with contact as vertex colors.
pub fn cmd_infer(checkpoint: &Path, image: &Path, out_dir: &Path) -> Result<InferOutput> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.model()?;
    let size = model.config().input_size;
    let start = Instant::now();
    let chw = load_image(image, size)?.to_chw();
    let pred = model.predict_contact(&Tensor::new(vec![1, 3, size.0, size.1], chw)?)?;
    let seconds = start.elapsed().as_secs_f64();
    let probabilities = pred.into_iter().next().expect("one image").into_values();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let out = InferOutput {
        image: image.to_path_buf(),
        template_id: ckpt.template.id().to_string(),
        probabilities,
        seconds,
    };
    let json = out_dir.join(INFER_JSON);
    fs::write(&json, serde_json::to_string_pretty(&out)?).map_err(|e| Error::io(&json, e))?;
    let colors: Vec<[u8; 3]> = out.probabilities.iter().map(|&p| probability_color(p)).collect();
    write_colored_ply(
        &out_dir.join(INFER_PLY),
        ckpt.template.vertices(),
        ckpt.template.triangles(),
        &colors,
    )?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub record_count: usize,
    pub object_histogram: BTreeMap<String, usize>,
    /// Records with at least `min_vertices` contact vertices on each part.
    pub part_histogram: BTreeMap<String, usize>,
    pub min_vertices: usize,
    /// Fraction of records in contact at each vertex.
    pub contact_probability: Vec<f64>,
}

pub const STATS_JSON: &str = "stats.json";
pub const STATS_PLY: &str = "contact_probability.ply";
pub const DEFAULT_MIN_PART_VERTICES: usize = 10;

/// Histograms over all records plus the aggregate contact probability mesh.
pub fn cmd_stats(dataset_dir: &Path, out_dir: &Path, min_vertices: usize) -> Result<DatasetStats> {
    let dataset = ContactDataset::load(dataset_dir)?;
    let template = load_dataset_template(dataset_dir, &dataset)?;
    let parts = part_contact_histogram(&dataset, &template, min_vertices)?;
    let mut counts = vec![0usize; dataset.n_vertices];
    for r in &dataset.records {
        for v in r.union_vertices() {
            counts[v] += 1;
        }
    }
    let n = dataset.records.len().max(1) as f64;
    let stats = DatasetStats {
        record_count: dataset.records.len(),
        object_histogram: dataset
            .vocabulary
            .iter()
            .map(|l| (l.clone(), 0))
            .chain(object_label_histogram(&dataset))
            .collect(),
        part_histogram: parts
            .iter()
            .enumerate()
            .map(|(p, &c)| (template.part_name(p), c))
            .collect(),
        min_vertices,
        contact_probability: counts.iter().map(|&c| c as f64 / n).collect(),
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let json = out_dir.join(STATS_JSON);
    fs::write(&json, serde_json::to_string_pretty(&stats)?).map_err(|e| Error::io(&json, e))?;
    let colors: Vec<[u8; 3]> = stats
        .contact_probability
        .iter()
        .map(|&p| probability_color(p))
        .collect();
    write_colored_ply(
        &out_dir.join(STATS_PLY),
        template.vertices(),
        template.triangles(),
        &colors,
    )?;
    Ok(stats)
}
