use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ContactRecord;
use crate::error::{Error, Result};

pub const DATASET_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "index.json";
pub const ANNOTATION_DIR: &str = "annotations";

/// Small default object vocabulary for synthetic scenes.
pub fn default_vocabulary() -> Vec<String> {
    ["floor", "chair", "table", "bench", "box"]
        .into_iter()
        .map(String::from)
        .collect()
}

/// One label per line; blank lines and `#` comments are skipped.
pub fn load_vocabulary(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let labels: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect();
    let unique: BTreeSet<&String> = labels.iter().collect();
    if unique.len() != labels.len() {
        return Err(Error::Validation("vocabulary contains duplicate labels".into()));
    }
    Ok(labels)
}

/// A collection of contact records sharing one template and vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct ContactDataset {
    pub template_id: String,
    pub n_vertices: usize,
    /// Template mesh file relative to the dataset directory, when shipped.
    pub template_path: Option<String>,
    pub vocabulary: Vec<String>,
    pub records: Vec<ContactRecord>,
    pub splits: BTreeMap<String, Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    template_id: String,
    n_vertices: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    template_path: Option<String>,
    vocabulary: Vec<String>,
    splits: BTreeMap<String, Vec<String>>,
    records: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    image_id: String,
    annotation: String,
}

impl ContactDataset {
    pub fn new(template_id: impl Into<String>, n_vertices: usize, vocabulary: Vec<String>) -> Self {
        Self {
            template_id: template_id.into(),
            n_vertices,
            template_path: None,
            vocabulary,
            records: Vec::new(),
            splits: BTreeMap::new(),
        }
    }

    pub fn record(&self, image_id: &str) -> Option<&ContactRecord> {
        self.records.iter().find(|r| r.image_id == image_id)
    }

    /// Records of a split in split order.
    pub fn split_records(&self, split: &str) -> Result<Vec<&ContactRecord>> {
        let ids = self
            .splits
            .get(split)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown split `{split}`")))?;
        ids.iter()
            .map(|id| {
                self.record(id)
                    .ok_or_else(|| Error::Validation(format!("split member `{id}` has no record")))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for r in &self.records {
            if !ids.insert(r.image_id.as_str()) {
                return Err(Error::Validation(format!("duplicate image id `{}`", r.image_id)));
            }
            r.validate(self.n_vertices, &self.vocabulary)?;
        }
        let mut assigned: BTreeMap<&str, &str> = BTreeMap::new();
        for (split, members) in &self.splits {
            for id in members {
                if !ids.contains(id.as_str()) {
                    return Err(Error::Validation(format!(
                        "split `{split}` references unknown image `{id}`"
                    )));
                }
                if let Some(other) = assigned.insert(id, split) {
                    return Err(Error::Validation(format!(
                        "image `{id}` is in both `{other}` and `{split}` splits"
                    )));
                }
            }
        }
        Ok(())
    }

    fn annotation_rel_path(image_id: &str) -> String {
        format!("{ANNOTATION_DIR}/{image_id}.json")
    }

    /// Writes `index.json` plus one annotation file per record.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        let ann_dir = dir.join(ANNOTATION_DIR);
        fs::create_dir_all(&ann_dir).map_err(|e| Error::io(&ann_dir, e))?;
        let mut entries = Vec::with_capacity(self.records.len());
        for r in &self.records {
            let rel = Self::annotation_rel_path(&r.image_id);
            let path = dir.join(&rel);
            fs::write(&path, serde_json::to_string_pretty(r)?).map_err(|e| Error::io(&path, e))?;
            entries.push(ManifestEntry {
                image_id: r.image_id.clone(),
                annotation: rel,
            });
        }
        let manifest = Manifest {
            schema_version: DATASET_SCHEMA_VERSION,
            template_id: self.template_id.clone(),
            n_vertices: self.n_vertices,
            template_path: self.template_path.clone(),
            vocabulary: self.vocabulary.clone(),
            splits: self.splits.clone(),
            records: entries,
        };
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let found = value
            .get("schema_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Validation("manifest lacks schema_version".into()))?;
        if found != u64::from(DATASET_SCHEMA_VERSION) {
            return Err(Error::SchemaVersion {
                expected: DATASET_SCHEMA_VERSION,
                found: found as u32,
            });
        }
        let manifest: Manifest = serde_json::from_value(value)?;
        let mut records = Vec::with_capacity(manifest.records.len());
        for entry in &manifest.records {
            let path = dir.join(&entry.annotation);
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let record: ContactRecord = serde_json::from_str(&text)?;
            if record.image_id != entry.image_id {
                return Err(Error::Validation(format!(
                    "annotation {} holds image `{}`, manifest says `{}`",
                    entry.annotation, record.image_id, entry.image_id
                )));
            }
            records.push(record);
        }
        let dataset = Self {
            template_id: manifest.template_id,
            n_vertices: manifest.n_vertices,
            template_path: manifest.template_path,
            vocabulary: manifest.vocabulary,
            records,
            splits: manifest.splits,
        };
        dataset.validate()?;
        Ok(dataset)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_round_trip() {
        let d = ContactDataset::new("tetra", 4, default_vocabulary());
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        assert_eq!(ContactDataset::load(dir.path()).unwrap(), d);
    }

    #[test]
    fn invalid_vertex_id_on_load() {
        let mut d = ContactDataset::new("tetra", 10, default_vocabulary());
        d.records
            .push(ContactRecord::new("a", "a.png").with_object("chair", &[1, 9]));
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        let idx = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&idx)
            .unwrap()
            .replace("\"n_vertices\": 10", "\"n_vertices\": 4");
        fs::write(&idx, text).unwrap();
        assert!(matches!(ContactDataset::load(dir.path()), Err(Error::Validation(_))));
    }

    #[test]
    fn schema_version_mismatch() {
        let d = ContactDataset::new("tetra", 4, default_vocabulary());
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        let idx = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&idx)
            .unwrap()
            .replace("\"schema_version\": 1", "\"schema_version\": 7");
        fs::write(&idx, text).unwrap();
        assert!(matches!(
            ContactDataset::load(dir.path()),
            Err(Error::SchemaVersion { found: 7, .. })
        ));
    }

    #[test]
    fn overlapping_splits_rejected() {
        let mut d = ContactDataset::new("t", 4, default_vocabulary());
        d.records.push(ContactRecord::new("a", "a.png"));
        d.splits.insert("train".into(), vec!["a".into()]);
        d.splits.insert("test".into(), vec!["a".into()]);
        assert!(d.validate().is_err());
        d.splits.remove("test");
        d.splits.insert("val".into(), vec!["ghost".into()]);
        assert!(d.validate().is_err());
    }

    #[test]
    fn vocabulary_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        fs::write(&path, "# objects\nchair\n\ncup\n").unwrap();
        assert_eq!(load_vocabulary(&path).unwrap(), vec!["chair", "cup"]);
        fs::write(&path, "chair\nchair\n").unwrap();
        assert!(load_vocabulary(&path).is_err());
    }
}
