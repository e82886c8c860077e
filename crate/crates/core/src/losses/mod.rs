//! Training losses: per-vertex contact BCE, segmentation cross-entropy, the
//! pixel anchoring loss through the splat renderer, and their weighted sum.

mod objective;
mod render;

pub use objective::{objective_on_tape, BatchTargets, Objective};

pub use render::{
    project_weak_perspective, splat_backward, splat_render, RenderedContactMap, SplatGrad, SplatOptions, SplatPlan,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{Camera, PosedBody};

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` before the log.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub contact: f64,
    pub pal: f64,
    pub scene: f64,
    pub part: f64,
}

impl LossWeights {
    pub const PAPER: LossWeights = LossWeights {
        contact: 10.0,
        pal: 0.05,
        scene: 1.0,
        part: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, w) in self.named() {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidArgument(format!("loss weight {name} = {w}")));
            }
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, f64); 4] {
        [
            ("contact", self.contact),
            ("pal", self.pal),
            ("scene", self.scene),
            ("part", self.part),
        ]
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::PAPER
    }
}

/// Loss terms of one sample or batch; `None` marks a term without ground truth.
#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub contact: Option<f64>,
    pub pal: Option<f64>,
    pub scene: Option<f64>,
    pub part: Option<f64>,
}

impl LossComponents {
    pub fn all(contact: f64, pal: f64, scene: f64, part: f64) -> Self {
        Self {
            contact: Some(contact),
            pal: Some(pal),
            scene: Some(scene),
            part: Some(part),
        }
    }

    fn named(&self) -> [(&'static str, Option<f64>); 4] {
        [
            ("contact", self.contact),
            ("pal", self.pal),
            ("scene", self.scene),
            ("part", self.part),
        ]
    }
}

/// Weighted sum of the available terms. Terms with zero weight or no ground
/// truth are skipped; a NaN among the remaining terms is an error.
pub fn total_loss(components: &LossComponents, weights: &LossWeights) -> Result<f64> {
    weights.validate()?;
    let mut total = 0.0;
    for ((name, c), (_, w)) in components.named().into_iter().zip(weights.named()) {
        let Some(c) = c else { continue };
        if w == 0.0 {
            continue;
        }
        if !c.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss = {c}")));
        }
        total += w * c;
    }
    Ok(total)
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(BCE_EPS, 1.0 - BCE_EPS)
}

/// Elementwise binary cross-entropy of one probability against a target.
pub fn bce(p: f64, y: f64) -> f64 {
    let p = clamp_prob(p);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Derivative of [`bce`] with respect to `p` (zero where the clamp is active).
pub fn bce_grad(p: f64, y: f64) -> f64 {
    if p < BCE_EPS || p > 1.0 - BCE_EPS {
        0.0
    } else {
        (p - y) / (p * (1.0 - p))
    }
}

/// Mean binary cross-entropy.
pub fn contact_bce(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "prediction length {} vs ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(pred.iter().zip(gt).map(|(&p, &y)| bce(p, y)).sum::<f64>() / pred.len() as f64)
}

/// Mean per-pixel softmax cross-entropy. `logits` is `[K][H*W]` channel-major.
pub fn segmentation_ce(logits: &[f64], classes: usize, labels: &[u16]) -> Result<f64> {
    let n = labels.len();
    if classes == 0 || n == 0 || logits.len() != classes * n {
        return Err(Error::Shape(format!(
            "{} logits for {classes} classes x {n} pixels",
            logits.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::InvalidArgument(format!("label {l} outside {classes} channels")));
    }
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        let max = (0..classes)
            .map(|k| logits[k * n + i])
            .fold(f64::NEG_INFINITY, f64::max);
        let lse = max + (0..classes).map(|k| (logits[k * n + i] - max).exp()).sum::<f64>().ln();
        total += lse - logits[l as usize * n + i];
    }
    Ok(total / n as f64)
}

/// Mean pixel BCE between the rendered contact map and a binary mask.
pub fn pal_loss(
    pred_contact: &[f64],
    body: &PosedBody,
    camera: &Camera,
    gt_mask: &[u16],
    options: &SplatOptions,
) -> Result<f64> {
    let (plan, mask) = pal_setup(body, camera, gt_mask, options)?;
    let map = plan.render(pred_contact)?;
    contact_bce(&map.values, &mask)
}

/// Gradient of [`pal_loss`] with respect to the contact probabilities.
pub fn pal_loss_grad(
    pred_contact: &[f64],
    body: &PosedBody,
    camera: &Camera,
    gt_mask: &[u16],
    options: &SplatOptions,
) -> Result<Vec<f64>> {
    let (plan, mask) = pal_setup(body, camera, gt_mask, options)?;
    let map = plan.render(pred_contact)?;
    let n = map.values.len() as f64;
    let grad_map: Vec<f64> = map
        .values
        .iter()
        .zip(&mask)
        .map(|(&p, &y)| bce_grad(p, y) / n)
        .collect();
    plan.backward_values(pred_contact, &grad_map)
}

fn pal_setup(
    body: &PosedBody,
    camera: &Camera,
    gt_mask: &[u16],
    options: &SplatOptions,
) -> Result<(SplatPlan, Vec<f64>)> {
    let (h, w) = camera.image_size;
    if gt_mask.len() != h * w {
        return Err(Error::Shape(format!(
            "mask has {} pixels, camera image is {h}x{w}",
            gt_mask.len()
        )));
    }
    let points = project_weak_perspective(&body.vertices, camera)?;
    let plan = SplatPlan::new(&points, camera, options)?;
    Ok((plan, gt_mask.iter().map(|&m| f64::from(m.min(1))).collect()))
}
