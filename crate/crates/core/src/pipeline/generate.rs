use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ContactDataset, SampleAssets};
use crate::error::{Error, Result};
use crate::mesh::io::{read_labels, read_mesh, sidecar_labels_path, write_template};
use crate::mesh::{TemplateMesh, Vec3};
use crate::synth::{LabelMap, SynthConfig, Synthesizer};

pub const TEMPLATE_FILE: &str = "template.obj";
pub const SYNTH_CONFIG_FILE: &str = "synth_config.json";

/// How many samples go into each split. Sample `i` overall uses seed
/// `seed + i`, so splits of one dataset never share a scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateOptions {
    pub seed: u64,
    pub splits: Vec<(String, usize)>,
}

impl GenerateOptions {
    pub fn single(split: impl Into<String>, count: usize, seed: u64) -> Self {
        Self {
            seed,
            splits: vec![(split.into(), count)],
        }
    }
}

fn write_mask(path: &Path, mask: &LabelMap) -> Result<()> {
    mask.to_luma16().save(path).map_err(Error::from)
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Renders synthetic samples and writes them as a dataset under `out_dir`.
pub fn cmd_generate(config: &SynthConfig, options: &GenerateOptions, out_dir: &Path) -> Result<ContactDataset> {
    let synth = Synthesizer::new(config.clone())?;
    let template = synth.template();
    for sub in ["images", "masks", "bodies"] {
        mkdir(&out_dir.join(sub))?;
    }
    write_template(&out_dir.join(TEMPLATE_FILE), template)?;
    let cfg_path = out_dir.join(SYNTH_CONFIG_FILE);
    fs::write(&cfg_path, serde_json::to_string_pretty(config)?).map_err(|e| Error::io(&cfg_path, e))?;

    let mut dataset = ContactDataset::new(template.id(), template.num_vertices(), config.vocabulary.clone());
    dataset.template_path = Some(TEMPLATE_FILE.into());
    let mut index = 0u64;
    for (split, count) in &options.splits {
        let members = dataset.splits.entry(split.clone()).or_default();
        for _ in 0..*count {
            let sample = synth.generate_sample(options.seed.wrapping_add(index))?;
            index += 1;
            let id = sample.record.image_id.clone();
            let image_path = out_dir.join(&sample.record.image_path);
            sample.image.to_rgb8().save(&image_path)?;
            let rel = |kind: &str| format!("masks/{id}_{kind}.png");
            write_mask(&out_dir.join(rel("scene")), &sample.gt_scene_mask)?;
            write_mask(&out_dir.join(rel("part")), &sample.gt_part_mask)?;
            write_mask(&out_dir.join(rel("contact")), &sample.gt_contact_mask_2d)?;
            let body_rel = format!("bodies/{id}.json");
            let body_path = out_dir.join(&body_rel);
            fs::write(&body_path, serde_json::to_string(&sample.body.vertices)?)
                .map_err(|e| Error::io(&body_path, e))?;
            let mut record = sample.record;
            record.assets = Some(SampleAssets {
                camera: sample.camera,
                body_path: body_rel,
                scene_mask_path: Some(rel("scene")),
                part_mask_path: Some(rel("part")),
                contact_mask_path: Some(rel("contact")),
            });
            members.push(id);
            dataset.records.push(record);
        }
    }
    dataset.save(out_dir)?;
    Ok(dataset)
}

/// Loads the template shipped with a dataset and checks it against the manifest.
pub fn load_dataset_template(dir: &Path, dataset: &ContactDataset) -> Result<TemplateMesh> {
    let rel = dataset
        .template_path
        .as_ref()
        .ok_or_else(|| Error::Validation("dataset does not ship a template mesh".into()))?;
    let path = dir.join(rel);
    let raw = read_mesh(&path)?;
    let labels = read_labels(&sidecar_labels_path(&path))?;
    let parts = labels.iter().max().map_or(0, |m| m + 1);
    let mesh = TemplateMesh::new(
        dataset.template_id.clone(),
        raw.vertices,
        raw.triangles,
        Some(labels),
        parts,
    )?;
    if mesh.num_vertices() != dataset.n_vertices {
        return Err(Error::TemplateMismatch(format!(
            "template file has {} vertices, manifest says {}",
            mesh.num_vertices(),
            dataset.n_vertices
        )));
    }
    Ok(mesh)
}

pub fn read_body(path: &Path) -> Result<Vec<Vec3>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
