use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::Camera;

/// Per-vertex contact values on the template: binary labels or probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VertexContactVector {
    values: Vec<f64>,
}

impl VertexContactVector {
    pub fn zeros(n: usize) -> Self {
        Self { values: vec![0.0; n] }
    }

    /// Binary vector with ones at `ids`.
    pub fn from_indices(n: usize, ids: &[usize]) -> Result<Self> {
        let mut values = vec![0.0; n];
        for &id in ids {
            *values
                .get_mut(id)
                .ok_or_else(|| Error::Validation(format!("vertex id {id} outside template of {n} vertices")))? = 1.0;
        }
        Ok(Self { values })
    }

    pub fn from_probabilities(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("contact value {v} outside [0, 1]")));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Indices with value `>= threshold`.
    pub fn positives(&self, threshold: f64) -> Vec<usize> {
        self.values
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| (v >= threshold).then_some(i))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectContact {
    pub label: String,
    pub vertices: Vec<usize>,
}

/// Supervision assets that accompany a record when it comes from a rendered
/// sample; paths are relative to the dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleAssets {
    pub camera: Camera,
    /// JSON array of posed body vertices (meters, camera frame).
    pub body_path: String,
    pub scene_mask_path: Option<String>,
    pub part_mask_path: Option<String>,
    pub contact_mask_path: Option<String>,
}

/// Vertex-level contact annotation of one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContactRecord {
    pub image_id: String,
    pub image_path: String,
    #[serde(default)]
    pub object_contacts: Vec<ObjectContact>,
    #[serde(default)]
    pub scene_supported: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<String>,
    /// False for images that only carry 2D supervision; the 3D contact loss
    /// is switched off for them.
    #[serde(default = "default_true")]
    pub has_3d_labels: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assets: Option<SampleAssets>,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BinarizeMode {
    /// All object contacts plus scene-supported contact.
    Union,
    PerObject(String),
    SceneOnly,
}

impl ContactRecord {
    pub fn new(image_id: impl Into<String>, image_path: impl Into<String>) -> Self {
        Self {
            image_id: image_id.into(),
            image_path: image_path.into(),
            object_contacts: Vec::new(),
            scene_supported: Vec::new(),
            annotator_id: None,
            feedback: None,
            has_3d_labels: true,
            assets: None,
        }
    }

    /// Adds (or merges into) the contact set of `label`.
    pub fn with_object(mut self, label: impl Into<String>, vertices: &[usize]) -> Self {
        let label = label.into();
        match self.object_contacts.iter_mut().find(|o| o.label == label) {
            Some(o) => o.vertices.extend_from_slice(vertices),
            None => self.object_contacts.push(ObjectContact {
                label,
                vertices: vertices.to_vec(),
            }),
        }
        self.normalize();
        self
    }

    pub fn with_scene_supported(mut self, vertices: &[usize]) -> Self {
        self.scene_supported.extend_from_slice(vertices);
        self.normalize();
        self
    }

    /// Sorts and deduplicates every vertex list.
    pub fn normalize(&mut self) {
        for o in &mut self.object_contacts {
            o.vertices.sort_unstable();
            o.vertices.dedup();
        }
        self.scene_supported.sort_unstable();
        self.scene_supported.dedup();
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.object_contacts.iter().map(|o| o.label.as_str())
    }

    /// Union of all object contacts and scene-supported contact, ascending.
    pub fn union_vertices(&self) -> Vec<usize> {
        let mut set: BTreeSet<usize> = self.scene_supported.iter().copied().collect();
        for o in &self.object_contacts {
            set.extend(o.vertices.iter().copied());
        }
        set.into_iter().collect()
    }

    pub fn validate(&self, n_vertices: usize, vocabulary: &[String]) -> Result<()> {
        let check = |what: &str, ids: &[usize]| -> Result<()> {
            if ids.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Validation(format!(
                    "record {}: {what} vertex list is not sorted and unique",
                    self.image_id
                )));
            }
            if let Some(&bad) = ids.iter().find(|&&v| v >= n_vertices) {
                return Err(Error::Validation(format!(
                    "record {}: {what} vertex id {bad} outside [0, {n_vertices})",
                    self.image_id
                )));
            }
            Ok(())
        };
        for o in &self.object_contacts {
            if !vocabulary.iter().any(|l| l == &o.label) {
                return Err(Error::UnknownLabel(o.label.clone()));
            }
            check(&o.label, &o.vertices)?;
        }
        check("scene-supported", &self.scene_supported)
    }

    pub fn binarize(&self, n_vertices: usize, mode: &BinarizeMode) -> Result<VertexContactVector> {
        match mode {
            BinarizeMode::Union => VertexContactVector::from_indices(n_vertices, &self.union_vertices()),
            BinarizeMode::SceneOnly => VertexContactVector::from_indices(n_vertices, &self.scene_supported),
            BinarizeMode::PerObject(label) => {
                let o = self
                    .object_contacts
                    .iter()
                    .find(|o| &o.label == label)
                    .ok_or_else(|| Error::UnknownLabel(label.clone()))?;
                VertexContactVector::from_indices(n_vertices, &o.vertices)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chair_record() -> ContactRecord {
        ContactRecord::new("img", "img.png")
            .with_object("chair", &[5, 2, 5])
            .with_scene_supported(&[7, 5])
    }

    #[test]
    fn empty_record_is_all_zero() {
        let r = ContactRecord::new("a", "a.png");
        let v = r.binarize(10, &BinarizeMode::Union).unwrap();
        assert_eq!(v.values(), &[0.0; 10]);
    }

    #[test]
    fn union_and_per_object() {
        let r = chair_record();
        assert_eq!(r.object_contacts[0].vertices, vec![2, 5]);
        let u = r.binarize(10, &BinarizeMode::Union).unwrap();
        assert_eq!(u.positives(0.5), vec![2, 5, 7]);
        let c = r.binarize(10, &BinarizeMode::PerObject("chair".into())).unwrap();
        assert_eq!(c.positives(0.5), vec![2, 5]);
        let s = r.binarize(10, &BinarizeMode::SceneOnly).unwrap();
        assert_eq!(s.positives(0.5), vec![5, 7]);
    }

    #[test]
    fn unknown_label_in_per_object_mode() {
        let r = chair_record();
        assert!(matches!(
            r.binarize(10, &BinarizeMode::PerObject("table".into())),
            Err(Error::UnknownLabel(_))
        ));
    }

    #[test]
    fn validation() {
        let vocab = vec!["chair".to_string()];
        let r = chair_record();
        r.validate(10, &vocab).unwrap();
        assert!(r.validate(6, &vocab).is_err());
        assert!(matches!(r.validate(10, &[]), Err(Error::UnknownLabel(_))));
        let mut unsorted = r.clone();
        unsorted.scene_supported = vec![7, 5];
        assert!(unsorted.validate(10, &vocab).is_err());
    }

    #[test]
    fn probability_bounds() {
        assert!(VertexContactVector::from_probabilities(vec![0.2, 1.2]).is_err());
        let v = VertexContactVector::from_probabilities(vec![0.2, 0.5]).unwrap();
        assert!(!v.is_binary());
        assert_eq!(v.positives(0.5), vec![1]);
    }
}
