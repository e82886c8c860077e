//! The weighted training objective evaluated on a tape.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::losses::{LossComponents, LossWeights, SplatPlan};
use crate::tape::{Tape, Var};

/// Ground truth of one batch, flattened per sample. Every `has_*` flag
/// marks which samples carry that kind of label.
#[derive(Clone, Debug, Default)]
pub struct BatchTargets {
    /// `B * N_V` binary targets.
    pub contact: Vec<f64>,
    pub has_3d: Vec<bool>,
    /// `B * H * W` class ids.
    pub scene_labels: Vec<u16>,
    pub has_scene: Vec<bool>,
    pub part_labels: Vec<u16>,
    pub has_part: Vec<bool>,
    /// Splat plan of each sample's posed body under its camera.
    pub pal_plans: Vec<Option<Arc<SplatPlan>>>,
    /// `H * W` binary contact mask per sample.
    pub pal_masks: Vec<Option<Arc<Vec<f64>>>>,
}

#[derive(Copy, Clone, Debug)]
pub struct Objective {
    pub total: Var,
    /// Unweighted values of the evaluated terms.
    pub components: LossComponents,
    pub terms: [Option<Var>; 4],
}

/// Builds `w_c L_c + w_pal L_pal + w_s L_s + w_p L_p`. Terms with zero weight
/// or without any labeled sample in the batch are left out.
pub fn objective_on_tape(
    tape: &mut Tape,
    contact: Var,
    scene_logits: Var,
    part_logits: Var,
    targets: &BatchTargets,
    weights: &LossWeights,
) -> Result<Objective> {
    weights.validate()?;
    let any = |flags: &[bool]| flags.iter().any(|&f| f);
    let mut comps = LossComponents::default();
    let mut terms: [Option<Var>; 4] = [None; 4];
    if weights.contact > 0.0 && any(&targets.has_3d) {
        terms[0] = Some(tape.bce_rows(contact, &targets.contact, &targets.has_3d)?);
    }
    let has_pal: Vec<bool> = targets
        .pal_plans
        .iter()
        .zip(&targets.pal_masks)
        .map(|(p, m)| p.is_some() && m.is_some())
        .collect();
    if weights.pal > 0.0 && any(&has_pal) {
        terms[1] = Some(tape.pal_rows(contact, &targets.pal_plans, &targets.pal_masks)?);
    }
    if weights.scene > 0.0 && any(&targets.has_scene) {
        terms[2] = Some(tape.softmax_ce_rows(scene_logits, &targets.scene_labels, &targets.has_scene)?);
    }
    if weights.part > 0.0 && any(&targets.has_part) {
        terms[3] = Some(tape.softmax_ce_rows(part_logits, &targets.part_labels, &targets.has_part)?);
    }
    let w = [weights.contact, weights.pal, weights.scene, weights.part];
    let mut weighted = Vec::new();
    for (i, t) in terms.iter().enumerate() {
        if let Some(v) = t {
            let value = tape.value(*v).item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("loss term {i} = {value}")));
            }
            weighted.push((*v, w[i]));
            let slot = match i {
                0 => &mut comps.contact,
                1 => &mut comps.pal,
                2 => &mut comps.scene,
                _ => &mut comps.part,
            };
            *slot = Some(value);
        }
    }
    let total = tape.weighted_sum(&weighted)?;
    Ok(Objective {
        total,
        components: comps,
        terms,
    })
}
