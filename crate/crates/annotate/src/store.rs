use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use deco_core::data::{ContactDataset, ContactRecord};
use deco_core::mesh::{BrushCache, Stroke};
use deco_core::metrics::{fleiss_kappa, iou, pairwise_iou, qualification_gate, RatingMatrix};
use serde::{Deserialize, Serialize};

use crate::error::ApiError;
use crate::replay::{diff, replay};

/// Final prompt of every task: contact with any supporting surface.
pub const SCENE_SUPPORTED_PROMPT: &str = "scene-supported";

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskState {
    Open,
    Submitted,
    Flagged,
    Reannotate,
    Finalized,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Ok,
    Flag,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub image_id: String,
    pub image_path: String,
    /// Object labels to cycle through; the scene-supported prompt is appended.
    pub labels: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub task_id: String,
    pub image_id: String,
    pub image_path: String,
    pub label_sequence: Vec<String>,
    pub state: TaskState,
    pub assigned_to: Option<String>,
    /// Index into `label_sequence` of the prompt awaiting a submission.
    pub prompt_index: usize,
    /// Number of completed submissions of the whole sequence.
    pub round: u32,
    pub notes: Vec<String>,
    /// Accepted vertex set per prompt of the current round.
    pub fragments: BTreeMap<String, Vec<usize>>,
    pub feedback: Option<String>,
    pub history: Vec<TaskState>,
    pub last_review: Option<(u32, Verdict)>,
}

impl AnnotationTask {
    fn from_spec(spec: &TaskSpec) -> Self {
        let mut label_sequence = spec.labels.clone();
        label_sequence.push(SCENE_SUPPORTED_PROMPT.into());
        Self {
            task_id: spec.task_id.clone(),
            image_id: spec.image_id.clone(),
            image_path: spec.image_path.clone(),
            label_sequence,
            state: TaskState::Open,
            assigned_to: None,
            prompt_index: 0,
            round: 0,
            notes: Vec::new(),
            fragments: BTreeMap::new(),
            feedback: None,
            history: vec![TaskState::Open],
            last_review: None,
        }
    }

    pub fn current_prompt(&self) -> Option<&str> {
        (self.state == TaskState::Open)
            .then(|| self.label_sequence.get(self.prompt_index).map(String::as_str))
            .flatten()
    }

    fn set_state(&mut self, s: TaskState) {
        self.state = s;
        self.history.push(s);
    }

    /// Union of all accepted fragments.
    pub fn vertex_set(&self) -> BTreeSet<usize> {
        self.fragments.values().flatten().copied().collect()
    }

    fn record(&self) -> ContactRecord {
        let mut r = ContactRecord::new(&self.image_id, &self.image_path);
        for label in &self.label_sequence {
            let Some(v) = self.fragments.get(label) else { continue };
            if label == SCENE_SUPPORTED_PROMPT {
                r = r.with_scene_supported(v);
            } else if !v.is_empty() {
                r = r.with_object(label.clone(), v);
            }
        }
        r.annotator_id = self.assigned_to.clone();
        r.feedback = self.feedback.clone();
        r
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualificationItem {
    pub image_id: String,
    pub vertices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub vocabulary: Vec<String>,
    pub tasks: Vec<TaskSpec>,
    /// Reference answers of the qualification images.
    pub qualification: Vec<QualificationItem>,
    pub qualification_threshold: f64,
    /// Annotators admitted without the qualification round.
    pub qualified: Vec<String>,
    pub reviewers: Vec<String>,
    /// Shared secret expected in the `x-annotation-token` header.
    pub token: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            vocabulary: deco_core::data::default_vocabulary(),
            tasks: Vec::new(),
            qualification: Vec::new(),
            qualification_threshold: 0.5,
            qualified: Vec::new(),
            reviewers: Vec::new(),
            token: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrokeSubmission {
    pub annotator: String,
    pub label: String,
    pub strokes: Vec<Stroke>,
    pub final_vertices: Vec<usize>,
    #[serde(default)]
    pub feedback: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Review {
    pub task_id: String,
    pub reviewer: String,
    pub verdict: Verdict,
    #[serde(default)]
    pub notes: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualificationAnswer {
    pub image_id: String,
    pub vertices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualificationResult {
    pub annotator: String,
    pub passed: bool,
    pub mean_iou: f64,
    pub ious: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageAgreement {
    pub image_id: String,
    pub annotators: Vec<String>,
    pub fleiss_kappa: f64,
    pub iou_matrix: Vec<Vec<f64>>,
}

/// Everything that changes state, as written to the append-only log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Qualified {
        annotator: String,
    },
    Assigned {
        task_id: String,
        annotator: String,
    },
    Accepted {
        task_id: String,
        annotator: String,
        label: String,
        vertices: Vec<usize>,
        feedback: Option<String>,
    },
    Reviewed(Review),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum NextTask {
    Assigned { task: AnnotationTask },
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accepted {
    pub task: AnnotationTask,
    pub next_prompt: Option<String>,
    /// Set once the last prompt is in; the client may then send feedback.
    pub feedback_requested: bool,
}

/// Task state and the annotation log. One instance sits behind a mutex, so
/// every transition is applied and logged by a single writer.
#[derive(Debug)]
pub struct Store {
    config: ServiceConfig,
    tasks: BTreeMap<String, AnnotationTask>,
    qualified: BTreeSet<String>,
    log: Option<(PathBuf, File)>,
}

impl Store {
    /// Builds the initial state and replays `log_path` if it exists.
    pub fn open(config: ServiceConfig, cache: &BrushCache, log_path: Option<&Path>) -> Result<Self, ApiError> {
        let mut tasks = BTreeMap::new();
        for spec in &config.tasks {
            if let Some(l) = spec.labels.iter().find(|l| !config.vocabulary.contains(l)) {
                return Err(ApiError::BadRequest(format!(
                    "task {}: unknown label `{l}`",
                    spec.task_id
                )));
            }
            if tasks
                .insert(spec.task_id.clone(), AnnotationTask::from_spec(spec))
                .is_some()
            {
                return Err(ApiError::BadRequest(format!("duplicate task id `{}`", spec.task_id)));
            }
        }
        let mut store = Self {
            qualified: config.qualified.iter().cloned().collect(),
            config,
            tasks,
            log: None,
        };
        if let Some(path) = log_path {
            if path.exists() {
                let text = fs::read_to_string(path).map_err(|e| ApiError::Internal(e.to_string()))?;
                for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                    let ev: Event = serde_json::from_str(line)
                        .map_err(|e| ApiError::Internal(format!("log line {}: {e}", i + 1)))?;
                    store.apply(&ev, cache)?;
                }
            }
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| ApiError::Internal(e.to_string()))?;
            store.log = Some((path.to_path_buf(), file));
        }
        Ok(store)
    }

    pub fn task(&self, id: &str) -> Option<&AnnotationTask> {
        self.tasks.get(id)
    }

    pub fn tasks(&self) -> impl Iterator<Item = &AnnotationTask> {
        self.tasks.values()
    }

    pub fn is_qualified(&self, annotator: &str) -> bool {
        self.qualified.contains(annotator)
    }

    fn commit(&mut self, ev: Event, cache: &BrushCache) -> Result<(), ApiError> {
        self.apply(&ev, cache)?;
        if let Some((path, file)) = &mut self.log {
            let line = serde_json::to_string(&ev).map_err(|e| ApiError::Internal(e.to_string()))?;
            writeln!(file, "{line}")
                .and_then(|_| file.flush())
                .map_err(|e| ApiError::Internal(format!("{}: {e}", path.display())))?;
        }
        Ok(())
    }

    fn task_mut(&mut self, id: &str) -> Result<&mut AnnotationTask, ApiError> {
        self.tasks
            .get_mut(id)
            .ok_or_else(|| ApiError::NotFound(format!("no task `{id}`")))
    }

    /// Applies a checked event. Checks live here so log replay and live
    /// requests share them.
    fn apply(&mut self, ev: &Event, cache: &BrushCache) -> Result<(), ApiError> {
        match ev {
            Event::Qualified { annotator } => {
                self.qualified.insert(annotator.clone());
            }
            Event::Assigned { task_id, annotator } => {
                let task = self.task_mut(task_id)?;
                if task.state != TaskState::Open || task.assigned_to.is_some() {
                    return Err(ApiError::Conflict(format!("task `{task_id}` is not available")));
                }
                task.assigned_to = Some(annotator.clone());
            }
            Event::Accepted {
                task_id,
                annotator,
                label,
                vertices,
                feedback,
            } => {
                let task = self.task_mut(task_id)?;
                if task.assigned_to.as_deref() != Some(annotator) {
                    return Err(ApiError::Forbidden(format!(
                        "task `{task_id}` is not assigned to `{annotator}`"
                    )));
                }
                match task.current_prompt() {
                    Some(p) if p == label => {}
                    Some(p) => {
                        return Err(ApiError::Conflict(format!(
                            "task `{task_id}` expects prompt `{p}`, got `{label}`"
                        )))
                    }
                    None => return Err(ApiError::Conflict(format!("task `{task_id}` is not open"))),
                }
                if vertices.iter().any(|&v| v >= cache.num_vertices()) {
                    return Err(ApiError::BadRequest("vertex id out of range".into()));
                }
                task.fragments.insert(label.clone(), vertices.clone());
                task.prompt_index += 1;
                if task.prompt_index == task.label_sequence.len() {
                    task.round += 1;
                    task.feedback = feedback.clone();
                    task.set_state(TaskState::Submitted);
                }
            }
            Event::Reviewed(r) => {
                let task = self.task_mut(&r.task_id)?;
                if let Some((round, verdict)) = task.last_review {
                    if round == task.round {
                        return if verdict == r.verdict {
                            Ok(())
                        } else {
                            Err(ApiError::Conflict(format!(
                                "task `{}` already reviewed with verdict {verdict:?}",
                                r.task_id
                            )))
                        };
                    }
                }
                if task.state != TaskState::Submitted {
                    return Err(ApiError::Conflict(format!(
                        "task `{}` is {:?}, only submitted tasks can be reviewed",
                        r.task_id, task.state
                    )));
                }
                task.last_review = Some((task.round, r.verdict));
                match r.verdict {
                    Verdict::Ok => task.set_state(TaskState::Finalized),
                    Verdict::Flag => {
                        task.set_state(TaskState::Flagged);
                        task.notes.extend(r.notes.clone());
                        task.set_state(TaskState::Reannotate);
                        task.fragments.clear();
                        task.prompt_index = 0;
                        task.assigned_to = None;
                        task.set_state(TaskState::Open);
                    }
                }
            }
        }
        Ok(())
    }

    /// Returns the task the annotator already holds, or assigns the first
    /// unassigned open task.
    pub fn next_task(&mut self, annotator: &str, cache: &BrushCache) -> Result<NextTask, ApiError> {
        if !self.is_qualified(annotator) {
            return Err(ApiError::Forbidden(format!("annotator `{annotator}` is not qualified")));
        }
        if let Some(t) = self
            .tasks
            .values()
            .find(|t| t.state == TaskState::Open && t.assigned_to.as_deref() == Some(annotator))
        {
            return Ok(NextTask::Assigned { task: t.clone() });
        }
        let Some(id) = self
            .tasks
            .values()
            .find(|t| t.state == TaskState::Open && t.assigned_to.is_none())
            .map(|t| t.task_id.clone())
        else {
            return Ok(NextTask::None);
        };
        self.commit(
            Event::Assigned {
                task_id: id.clone(),
                annotator: annotator.into(),
            },
            cache,
        )?;
        Ok(NextTask::Assigned {
            task: self.tasks[&id].clone(),
        })
    }

    /// Replays the strokes and accepts the submission iff the replay equals
    /// the client's final vertex set.
    pub fn submit(&mut self, task_id: &str, sub: &StrokeSubmission, cache: &BrushCache) -> Result<Accepted, ApiError> {
        let task = self
            .tasks
            .get(task_id)
            .ok_or_else(|| ApiError::NotFound(format!("no task `{task_id}`")))?;
        if task.assigned_to.as_deref() != Some(sub.annotator.as_str()) {
            return Err(ApiError::Forbidden(format!(
                "task `{task_id}` is not assigned to `{}`",
                sub.annotator
            )));
        }
        let server = replay(cache, &sub.strokes)?;
        let client: BTreeSet<usize> = sub.final_vertices.iter().copied().collect();
        if server != client || client.len() != sub.final_vertices.len() {
            let (server_only, client_only) = diff(&server, &client);
            return Err(ApiError::ReplayMismatch {
                server_only,
                client_only,
            });
        }
        self.commit(
            Event::Accepted {
                task_id: task_id.into(),
                annotator: sub.annotator.clone(),
                label: sub.label.clone(),
                vertices: server.into_iter().collect(),
                feedback: sub.feedback.clone(),
            },
            cache,
        )?;
        let task = self.tasks[task_id].clone();
        Ok(Accepted {
            next_prompt: task.current_prompt().map(str::to_string),
            feedback_requested: task.state == TaskState::Submitted,
            task,
        })
    }

    pub fn review(&mut self, review: &Review, cache: &BrushCache) -> Result<AnnotationTask, ApiError> {
        if !self.config.reviewers.contains(&review.reviewer) {
            return Err(ApiError::Forbidden(format!("`{}` is not a reviewer", review.reviewer)));
        }
        self.commit(Event::Reviewed(review.clone()), cache)?;
        Ok(self.tasks[&review.task_id].clone())
    }

    pub fn qualify(
        &mut self,
        annotator: &str,
        answers: &[QualificationAnswer],
        cache: &BrushCache,
    ) -> Result<QualificationResult, ApiError> {
        if self.config.qualification.is_empty() {
            return Err(ApiError::Conflict("no qualification set configured".into()));
        }
        let given: BTreeMap<&str, &[usize]> = answers
            .iter()
            .map(|a| (a.image_id.as_str(), a.vertices.as_slice()))
            .collect();
        let mut ious = BTreeMap::new();
        for item in &self.config.qualification {
            let answer = given
                .get(item.image_id.as_str())
                .ok_or_else(|| ApiError::BadRequest(format!("no answer for `{}`", item.image_id)))?;
            ious.insert(item.image_id.clone(), iou(answer, &item.vertices));
        }
        let scores: Vec<f64> = ious.values().copied().collect();
        let passed = qualification_gate(&scores, self.config.qualification_threshold)?;
        if passed {
            self.commit(
                Event::Qualified {
                    annotator: annotator.into(),
                },
                cache,
            )?;
        }
        Ok(QualificationResult {
            annotator: annotator.into(),
            passed,
            mean_iou: scores.iter().sum::<f64>() / scores.len() as f64,
            ious,
        })
    }

    /// Fleiss' kappa over vertices and pairwise IoU between annotators, per
    /// image. Every image needs completed work from at least two annotators.
    pub fn agreement(&self, images: &[String], n_vertices: usize) -> Result<Vec<ImageAgreement>, ApiError> {
        if images.is_empty() {
            return Err(ApiError::BadRequest("empty image set".into()));
        }
        images
            .iter()
            .map(|image| {
                let mut by: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
                for t in self
                    .tasks
                    .values()
                    .filter(|t| &t.image_id == image && matches!(t.state, TaskState::Submitted | TaskState::Finalized))
                {
                    if let Some(a) = &t.assigned_to {
                        by.insert(a.clone(), t.vertex_set());
                    }
                }
                if by.len() < 2 {
                    return Err(ApiError::Unprocessable(format!(
                        "image `{image}` has {} annotator(s), need at least 2",
                        by.len()
                    )));
                }
                let labels: Vec<Vec<bool>> = by
                    .values()
                    .map(|s| (0..n_vertices).map(|v| s.contains(&v)).collect())
                    .collect();
                let sets: Vec<Vec<usize>> = by.values().map(|s| s.iter().copied().collect()).collect();
                Ok(ImageAgreement {
                    image_id: image.clone(),
                    annotators: by.keys().cloned().collect(),
                    fleiss_kappa: fleiss_kappa(&RatingMatrix::from_binary_labels(&labels)?),
                    iou_matrix: pairwise_iou(&sets),
                })
            })
            .collect()
    }

    /// Finalized work as a dataset; the first finalized task of an image wins.
    pub fn export(&self, template_id: &str, n_vertices: usize) -> Result<ContactDataset, ApiError> {
        let mut ds = ContactDataset::new(template_id, n_vertices, self.config.vocabulary.clone());
        let mut seen = BTreeSet::new();
        for t in self.tasks.values().filter(|t| t.state == TaskState::Finalized) {
            if seen.insert(t.image_id.clone()) {
                ds.records.push(t.record());
            }
        }
        ds.splits
            .insert("train".into(), ds.records.iter().map(|r| r.image_id.clone()).collect());
        ds.validate()?;
        Ok(ds)
    }
}
