use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ContactDataset;
use crate::error::{Error, Result};
use crate::losses::{objective_on_tape, LossComponents};
use crate::mesh::TemplateMesh;
use crate::model::{DecoModel, ParamStore};
use crate::pipeline::config::{OptimizerConfig, TrainConfig};
use crate::pipeline::generate::load_dataset_template;
use crate::pipeline::samples::{batch_targets, prepare_split, stack_images, PreparedSample};
use crate::tape::Tape;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

/// First and second moment estimates per parameter.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    /// One bias-corrected Adam update.
    pub fn update(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>, opt: &OptimizerConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - opt.beta1.powi(t);
        let c2 = 1.0 - opt.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("gradient for a known parameter");
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = opt.beta1 * *mi + (1.0 - opt.beta1) * gi;
                *vi = opt.beta2 * *vi + (1.0 - opt.beta2) * gi * gi;
                *w -= opt.learning_rate * (*mi / c1) / ((*vi / c2).sqrt() + opt.eps);
            }
        }
    }
}

/// Everything needed to resume training or run the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub config: TrainConfig,
    pub template: TemplateMesh,
    pub params: ParamStore,
    pub optimizer: AdamState,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    /// Reads and revalidates parameters against the stored configuration and
    /// template.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let found = value.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                expected: CHECKPOINT_SCHEMA_VERSION,
                found,
            });
        }
        let ckpt: Self = serde_json::from_value(value)?;
        ckpt.model()?;
        Ok(ckpt)
    }

    pub fn model(&self) -> Result<DecoModel> {
        if self.template.num_vertices() != self.config.model.n_vertices {
            return Err(Error::TemplateMismatch(format!(
                "checkpoint template has {} vertices, model predicts {}",
                self.template.num_vertices(),
                self.config.model.n_vertices
            )));
        }
        DecoModel::from_params(self.config.model.clone(), self.params.clone())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        epoch: usize,
        step: u64,
        loss: f64,
        components: LossComponents,
        grad_norm: f64,
        batch: usize,
    },
    Epoch {
        epoch: usize,
        steps: usize,
        mean_loss: f64,
        seconds: f64,
    },
}

/// Optimizer loop over in-memory samples.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: TrainConfig,
    model: DecoModel,
    adam: AdamState,
    epoch: usize,
    step: u64,
}

fn shuffle_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = DecoModel::new(config.model.clone())?;
        Ok(Self {
            config,
            model,
            adam: AdamState::default(),
            epoch: 0,
            step: 0,
        })
    }

    /// Continues from `ckpt`. Only the epoch budget, output paths and
    /// cadence may differ from the checkpointed configuration.
    pub fn resume(ckpt: &Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let comparable = |c: &TrainConfig| TrainConfig {
            optimizer: crate::pipeline::OptimizerConfig {
                epochs: 0,
                ..c.optimizer.clone()
            },
            output_dir: PathBuf::new(),
            checkpoint_every: 1,
            ..c.clone()
        };
        if comparable(&config) != comparable(&ckpt.config) {
            return Err(Error::InvalidArgument(
                "resume configuration differs from the checkpoint beyond epochs and output paths".into(),
            ));
        }
        Ok(Self {
            model: ckpt.model()?,
            config,
            adam: ckpt.optimizer.clone(),
            epoch: ckpt.epoch,
            step: ckpt.step,
        })
    }

    pub fn model(&self) -> &DecoModel {
        &self.model
    }

    pub fn into_model(self) -> DecoModel {
        self.model
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn checkpoint(&self, template: &TemplateMesh) -> Checkpoint {
        Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            epoch: self.epoch,
            step: self.step,
            config: self.config.clone(),
            template: template.clone(),
            params: self.model.params().clone(),
            optimizer: self.adam.clone(),
        }
    }

    /// Forward, backward and one optimizer update on `batch`.
    pub fn step(&mut self, batch: &[&PreparedSample]) -> Result<LogRecord> {
        let cfg = &self.config;
        let mut tape = Tape::new();
        let p = self.model.bind(&mut tape, true);
        let images = tape.constant(stack_images(batch, cfg.model.input_size)?);
        let fwd = self.model.forward_on_tape(&mut tape, &p, images)?;
        let targets = batch_targets(batch, &cfg.model);
        let ids = || batch.iter().map(|s| s.image_id.as_str()).collect::<Vec<_>>().join(", ");
        let obj = objective_on_tape(
            &mut tape,
            fwd.contact,
            fwd.scene_logits,
            fwd.part_logits,
            &targets,
            &cfg.weights,
        )
        .map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!(
                "{m} at epoch {} step {} (batch: {})",
                self.epoch,
                self.step,
                ids()
            )),
            other => other,
        })?;
        let loss = tape.value(obj.total).item();
        let grads = tape.backward(obj.total)?;
        let mut named = BTreeMap::new();
        let mut sq = 0.0;
        for (name, var) in p.iter() {
            let n = self.model.params()[name].len();
            let g = grads.get_or_zeros(*var, n);
            sq += g.iter().map(|x| x * x).sum::<f64>();
            named.insert(name.clone(), g);
        }
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient norm at epoch {} step {} (batch: {})",
                self.epoch,
                self.step,
                ids()
            )));
        }
        if let Some(clip) = cfg.optimizer.grad_clip {
            if grad_norm > clip {
                let s = clip / grad_norm;
                named.values_mut().flatten().for_each(|g| *g *= s);
            }
        }
        self.adam.update(self.model.params_mut(), &named, &cfg.optimizer);
        self.step += 1;
        Ok(LogRecord::Step {
            epoch: self.epoch,
            step: self.step,
            loss,
            components: obj.components,
            grad_norm,
            batch: batch.len(),
        })
    }

    /// One pass over `samples` in a seeded order. Every record is passed to `log`.
    pub fn train_epoch(
        &mut self,
        samples: &[PreparedSample],
        log: &mut dyn FnMut(&LogRecord) -> Result<()>,
    ) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("no training samples".into()));
        }
        let start = Instant::now();
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed(
            self.config.seed,
            self.epoch,
        )));
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(self.config.optimizer.batch_size) {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let rec = self.step(&batch)?;
            if let LogRecord::Step { loss, .. } = rec {
                total += loss;
            }
            steps += 1;
            log(&rec)?;
        }
        let mean_loss = total / steps as f64;
        log(&LogRecord::Epoch {
            epoch: self.epoch,
            steps,
            mean_loss,
            seconds: start.elapsed().as_secs_f64(),
        })?;
        self.epoch += 1;
        Ok(mean_loss)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: DecoModel,
    pub checkpoint: PathBuf,
    /// Records produced by this invocation.
    pub log: Vec<LogRecord>,
}

/// Trains on `config.dataset`, writing a JSONL log and checkpoints into
/// `config.output_dir`. With `resume`, training continues from that
/// checkpoint and the log is appended to.
pub fn cmd_train(config: &TrainConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let dataset = ContactDataset::load(&config.dataset)?;
    let template = load_dataset_template(&config.dataset, &dataset)?;
    let samples = prepare_split(
        &config.dataset,
        &dataset,
        &config.train_split,
        &config.model,
        &config.splat,
    )?;
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.template != template {
                return Err(Error::TemplateMismatch(
                    "checkpoint and dataset templates differ".into(),
                ));
            }
            Trainer::resume(&ckpt, config.clone())?
        }
        None => Trainer::new(config.clone())?,
    };
    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    config.save(&out.join("train_config.json"))?;
    let log_path = out.join(LOG_FILE);
    let file = if resume.is_some() {
        OpenOptions::new().create(true).append(true).open(&log_path)
    } else {
        File::create(&log_path)
    }
    .map_err(|e| Error::io(&log_path, e))?;
    let mut writer = BufWriter::new(file);
    let mut records = Vec::new();
    let latest = out.join(CHECKPOINT_FILE);
    while trainer.epoch() < config.optimizer.epochs {
        let mean = trainer.train_epoch(&samples, &mut |rec| {
            serde_json::to_writer(&mut writer, rec)?;
            writeln!(writer).map_err(|e| Error::io(&log_path, e))?;
            records.push(rec.clone());
            Ok(())
        })?;
        writer.flush().map_err(|e| Error::io(&log_path, e))?;
        log::info!("epoch {} mean loss {mean:.6}", trainer.epoch());
        let done = trainer.epoch();
        if done % config.checkpoint_every == 0 || done == config.optimizer.epochs {
            let ckpt = trainer.checkpoint(&template);
            ckpt.save(&out.join(format!("checkpoint_e{done:04}.json")))?;
            ckpt.save(&latest)?;
        }
    }
    if !latest.exists() {
        trainer.checkpoint(&template).save(&latest)?;
    }
    Ok(TrainOutcome {
        model: trainer.into_model(),
        checkpoint: latest,
        log: records,
    })
}

/// Reads a JSONL training log.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
