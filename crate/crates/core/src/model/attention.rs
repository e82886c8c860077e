//! Cross-attention fusion of scene and part tokens.
//!
//! With `Q_s = K_s = V_s` the scene tokens and `Q_p = K_p = V_p` the part
//! tokens:
//!
//! ```text
//! F_s' = softmax(Q_p K_s^T / sqrt(C_t)) V_s
//! F_p' = softmax(Q_s K_p^T / sqrt(C_t)) V_p
//! F_c  = LayerNorm(F_s' * F_p')
//! ```
//!
//! The layer norm runs per token over channels.

use crate::error::{Error, Result};
use crate::tape::{Tape, Tensor, Var};

/// Optional learned `(weight, bias)` pairs for each of the six projections.
#[derive(Copy, Clone, Debug)]
pub struct QkvProjections {
    pub scene: [(Var, Var); 3],
    pub part: [(Var, Var); 3],
}

#[derive(Copy, Clone, Debug)]
pub struct FuseOptions {
    pub c_t: f64,
    pub heads: usize,
    pub eps: f64,
}

/// Tape handles of the fusion intermediates.
#[derive(Copy, Clone, Debug)]
pub struct FuseVars {
    pub fused: Var,
    /// `softmax(Q_p K_s^T / sqrt(C_t))`, `[B * heads, T, T]`.
    pub scene_attention: Var,
    /// `softmax(Q_s K_p^T / sqrt(C_t))`.
    pub part_attention: Var,
    pub scene_attended: Var,
    pub part_attended: Var,
}

fn project(tape: &mut Tape, x: Var, wb: Option<(Var, Var)>) -> Result<Var> {
    let Some((w, b)) = wb else { return Ok(x) };
    let s = tape.shape(x).to_vec();
    let flat = tape.reshape(x, vec![s[0] * s[1], s[2]])?;
    let y = tape.linear(flat, w, b)?;
    let out = tape.shape(w)[0];
    tape.reshape(y, vec![s[0], s[1], out])
}

/// Fuses `[B, T, C]` scene and part tokens; `gamma`, `beta` are the layer
/// norm affine parameters of shape `[C]`.
pub fn cross_attention_on_tape(
    tape: &mut Tape,
    scene: Var,
    part: Var,
    gamma: Var,
    beta: Var,
    projections: Option<&QkvProjections>,
    opts: &FuseOptions,
) -> Result<FuseVars> {
    let (ss, ps) = (tape.shape(scene).to_vec(), tape.shape(part).to_vec());
    if ss.len() != 3 || ss != ps || ss[1] == 0 || ss[2] == 0 {
        return Err(Error::Shape(format!("fusion inputs {ss:?} and {ps:?}")));
    }
    if !(opts.c_t > 0.0 && opts.c_t.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "C_t must be positive, got {}",
            opts.c_t
        )));
    }
    let heads = opts.heads.max(1);
    let pick = |side: &[(Var, Var); 3], i: usize| Some(side[i]);
    let qkv = |tape: &mut Tape, x: Var, side: Option<&[(Var, Var); 3]>| -> Result<[Var; 3]> {
        let mut out = [x; 3];
        for (i, o) in out.iter_mut().enumerate() {
            let p = project(tape, x, side.and_then(|s| pick(s, i)))?;
            *o = if heads > 1 { tape.split_heads(p, heads)? } else { p };
        }
        Ok(out)
    };
    let [q_s, k_s, v_s] = qkv(tape, scene, projections.map(|p| &p.scene))?;
    let [q_p, k_p, v_p] = qkv(tape, part, projections.map(|p| &p.part))?;
    let inv = 1.0 / opts.c_t.sqrt();

    let logits_s = tape.matmul_nt(q_p, k_s)?;
    let logits_s = tape.scale(logits_s, inv);
    let scene_attention = tape.softmax_last(logits_s)?;
    let mut scene_attended = tape.matmul(scene_attention, v_s)?;

    let logits_p = tape.matmul_nt(q_s, k_p)?;
    let logits_p = tape.scale(logits_p, inv);
    let part_attention = tape.softmax_last(logits_p)?;
    let mut part_attended = tape.matmul(part_attention, v_p)?;

    if heads > 1 {
        scene_attended = tape.merge_heads(scene_attended, heads)?;
        part_attended = tape.merge_heads(part_attended, heads)?;
    }
    let product = tape.mul(scene_attended, part_attended)?;
    let fused = tape.layer_norm(product, gamma, beta, opts.eps)?;
    Ok(FuseVars {
        fused,
        scene_attention,
        part_attention,
        scene_attended,
        part_attended,
    })
}

/// Fusion result on plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct FuseOutput {
    /// `[T, C]` fused tokens.
    pub fused: Tensor,
    /// `[T, T]` attention used for the scene branch.
    pub scene_attention: Tensor,
    pub part_attention: Tensor,
}

/// Single-head, projection-free fusion of `[T, C]` token matrices with unit
/// layer-norm scale and zero shift.
pub fn cross_attention_fuse(scene: &Tensor, part: &Tensor, c_t: f64, eps: f64) -> Result<FuseOutput> {
    let s = scene.shape().to_vec();
    if s.len() != 2 || part.shape() != s.as_slice() {
        return Err(Error::Shape(format!(
            "token matrices {:?} and {:?}",
            scene.shape(),
            part.shape()
        )));
    }
    let (t, c) = (s[0], s[1]);
    let mut tape = Tape::new();
    let sv = tape.constant(Tensor::new(vec![1, t, c], scene.data().to_vec())?);
    let pv = tape.constant(Tensor::new(vec![1, t, c], part.data().to_vec())?);
    let gamma = tape.constant(Tensor::new(vec![c], vec![1.0; c])?);
    let beta = tape.constant(Tensor::zeros(vec![c]));
    let f = cross_attention_on_tape(
        &mut tape,
        sv,
        pv,
        gamma,
        beta,
        None,
        &FuseOptions { c_t, heads: 1, eps },
    )?;
    Ok(FuseOutput {
        fused: Tensor::new(vec![t, c], tape.value(f.fused).data().to_vec())?,
        scene_attention: Tensor::new(vec![t, t], tape.value(f.scene_attention).data().to_vec())?,
        part_attention: Tensor::new(vec![t, t], tape.value(f.part_attention).data().to_vec())?,
    })
}

/// Sinusoidal position codes, `[T, C]`.
pub fn positional_codes(tokens: usize, channels: usize) -> Vec<f64> {
    let mut out = vec![0.0; tokens * channels];
    for t in 0..tokens {
        for c in 0..channels {
            let freq = 10000f64.powf(-((c / 2 * 2) as f64) / channels as f64);
            let a = t as f64 * freq;
            out[t * channels + c] = if c % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    out
}
