use std::path::Path;
use std::sync::Arc;

use image::imageops::{self, FilterType};

use crate::data::{BinarizeMode, ContactDataset, ContactRecord};
use crate::error::{Error, Result};
use crate::losses::{project_weak_perspective, BatchTargets, SplatOptions, SplatPlan};
use crate::model::ModelConfig;
use crate::pipeline::generate::read_body;
use crate::synth::{Camera, LabelMap, RgbImage};
use crate::tape::Tensor;

/// One record decoded into network-ready arrays.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub image_id: String,
    /// `[3][H][W]` in `[0, 1]`.
    pub image: Vec<f64>,
    /// Binarized union contact; `None` when the record lacks 3D labels.
    pub contact: Option<Vec<f64>>,
    pub scene_labels: Option<Vec<u16>>,
    pub part_labels: Option<Vec<u16>>,
    pub pal: Option<(Arc<SplatPlan>, Arc<Vec<f64>>)>,
}

/// Reads an image file and resizes it to `(height, width)` when needed.
pub fn load_image(path: &Path, size: (usize, usize)) -> Result<RgbImage> {
    let img = image::open(path)?.to_rgb8();
    let (h, w) = size;
    let img = if img.dimensions() == (w as u32, h as u32) {
        img
    } else {
        imageops::resize(&img, w as u32, h as u32, FilterType::Triangle)
    };
    Ok(RgbImage::from_rgb8(&img))
}

fn load_mask(path: &Path, size: (usize, usize)) -> Result<LabelMap> {
    let img = image::open(path)?.to_luma16();
    let (h, w) = size;
    let img = if img.dimensions() == (w as u32, h as u32) {
        img
    } else {
        imageops::resize(&img, w as u32, h as u32, FilterType::Nearest)
    };
    Ok(LabelMap::from_luma16(&img))
}

fn check_labels(map: &LabelMap, classes: usize, what: &str, id: &str) -> Result<Vec<u16>> {
    if map.max_label() as usize >= classes {
        return Err(Error::Validation(format!(
            "{what} mask of `{id}` has label {} but the model has {classes} channels",
            map.max_label()
        )));
    }
    Ok(map.data.clone())
}

pub fn prepare_record(
    dir: &Path,
    record: &ContactRecord,
    n_vertices: usize,
    model: &ModelConfig,
    splat: &SplatOptions,
) -> Result<PreparedSample> {
    let size = model.input_size;
    let image = load_image(&dir.join(&record.image_path), size)?.to_chw();
    let contact = if record.has_3d_labels {
        Some(record.binarize(n_vertices, &BinarizeMode::Union)?.into_values())
    } else {
        None
    };
    let mut sample = PreparedSample {
        image_id: record.image_id.clone(),
        image,
        contact,
        scene_labels: None,
        part_labels: None,
        pal: None,
    };
    let Some(assets) = &record.assets else {
        return Ok(sample);
    };
    if let Some(p) = &assets.scene_mask_path {
        let m = load_mask(&dir.join(p), size)?;
        sample.scene_labels = Some(check_labels(&m, model.scene_classes, "scene", &record.image_id)?);
    }
    if let Some(p) = &assets.part_mask_path {
        let m = load_mask(&dir.join(p), size)?;
        sample.part_labels = Some(check_labels(&m, model.part_classes(), "part", &record.image_id)?);
    }
    if let Some(p) = &assets.contact_mask_path {
        let mask = load_mask(&dir.join(p), size)?;
        let body = read_body(&dir.join(&assets.body_path))?;
        if body.len() != n_vertices {
            return Err(Error::TemplateMismatch(format!(
                "body of `{}` has {} vertices, template {n_vertices}",
                record.image_id,
                body.len()
            )));
        }
        // normalized camera coordinates do not depend on resolution
        let camera = Camera {
            image_size: size,
            ..assets.camera
        };
        let points = project_weak_perspective(&body, &camera)?;
        let plan = SplatPlan::new(&points, &camera, splat)?;
        let mask: Vec<f64> = mask.data.iter().map(|&m| f64::from(m.min(1))).collect();
        sample.pal = Some((Arc::new(plan), Arc::new(mask)));
    }
    Ok(sample)
}

/// Decodes every record of `split`.
pub fn prepare_split(
    dir: &Path,
    dataset: &ContactDataset,
    split: &str,
    model: &ModelConfig,
    splat: &SplatOptions,
) -> Result<Vec<PreparedSample>> {
    if dataset.n_vertices != model.n_vertices {
        return Err(Error::TemplateMismatch(format!(
            "dataset has {} vertices, model predicts {}",
            dataset.n_vertices, model.n_vertices
        )));
    }
    dataset
        .split_records(split)?
        .into_iter()
        .map(|r| prepare_record(dir, r, dataset.n_vertices, model, splat))
        .collect()
}

/// Stacks images into `[B, 3, H, W]`.
pub fn stack_images(samples: &[&PreparedSample], size: (usize, usize)) -> Result<Tensor> {
    let data: Vec<f64> = samples.iter().flat_map(|s| s.image.iter().copied()).collect();
    Tensor::new(vec![samples.len(), 3, size.0, size.1], data)
}

/// Flattens the labels of a batch; missing labels become inactive rows.
pub fn batch_targets(samples: &[&PreparedSample], model: &ModelConfig) -> BatchTargets {
    let (h, w) = model.input_size;
    let mut t = BatchTargets::default();
    for s in samples {
        t.has_3d.push(s.contact.is_some());
        match &s.contact {
            Some(c) => t.contact.extend_from_slice(c),
            None => t.contact.extend(std::iter::repeat_n(0.0, model.n_vertices)),
        }
        t.has_scene.push(s.scene_labels.is_some());
        match &s.scene_labels {
            Some(l) => t.scene_labels.extend_from_slice(l),
            None => t.scene_labels.extend(std::iter::repeat_n(0, h * w)),
        }
        t.has_part.push(s.part_labels.is_some());
        match &s.part_labels {
            Some(l) => t.part_labels.extend_from_slice(l),
            None => t.part_labels.extend(std::iter::repeat_n(0, h * w)),
        }
        t.pal_plans.push(s.pal.as_ref().map(|p| p.0.clone()));
        t.pal_masks.push(s.pal.as_ref().map(|p| p.1.clone()));
    }
    t
}
