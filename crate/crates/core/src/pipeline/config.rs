use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::ContactDataset;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, SplatOptions};
use crate::mesh::TemplateMesh;
use crate::model::ModelConfig;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub name: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            name: OptimizerKind::Adam,
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: Some(1.0),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// 64x64 images, batch 8, learning rate 1e-3.
    Desk,
    /// 256x256 images, batch 4, learning rate 5e-5, 12 epochs.
    Paper,
}

/// Everything `train` needs. Paths are resolved relative to the working
/// directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub dataset: PathBuf,
    pub train_split: String,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (and after the last one).
    pub checkpoint_every: usize,
    pub splat: SplatOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::profile(Profile::Desk)
    }
}

impl TrainConfig {
    pub fn profile(profile: Profile) -> Self {
        let (model, optimizer) = match profile {
            Profile::Desk => (ModelConfig::default(), OptimizerConfig::default()),
            Profile::Paper => (
                ModelConfig::paper_scale(),
                OptimizerConfig {
                    learning_rate: 5e-5,
                    batch_size: 4,
                    epochs: 12,
                    grad_clip: None,
                    ..OptimizerConfig::default()
                },
            ),
        };
        Self {
            model,
            weights: LossWeights::PAPER,
            optimizer,
            dataset: PathBuf::from("data"),
            train_split: "train".into(),
            output_dir: PathBuf::from("runs/latest"),
            seed: 0,
            checkpoint_every: 10,
            splat: SplatOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                o.learning_rate
            )));
        }
        if o.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(Error::InvalidArgument(
                "Adam betas must be in [0, 1) and eps positive".into(),
            ));
        }
        if let Some(c) = o.grad_clip {
            if !(c > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "gradient clip must be positive, got {c}"
                )));
            }
        }
        if self.checkpoint_every == 0 {
            return Err(Error::InvalidArgument("checkpoint_every must be at least 1".into()));
        }
        Ok(())
    }

    /// Sets the model output sizes (vertices, parts, scene classes with
    /// background) from a dataset and its template.
    pub fn fit_to_dataset(&mut self, dataset: &ContactDataset, template: &TemplateMesh) {
        self.model.n_vertices = dataset.n_vertices;
        self.model.n_parts = template.num_parts();
        self.model.scene_classes = dataset.vocabulary.len() + 1;
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}
