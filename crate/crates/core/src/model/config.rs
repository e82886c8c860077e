use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::Activation;

/// Architecture and initialization settings of the contact network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// `(height, width)`; both divisible by `2^encoder_channels.len()`.
    pub input_size: (usize, usize),
    /// Output channels of each stride-2 encoder stage. The last entry is the
    /// token embedding dimension.
    pub encoder_channels: Vec<usize>,
    /// Attention temperature; `None` uses the per-head embedding dimension.
    pub c_t: Option<f64>,
    pub n_vertices: usize,
    /// Body part count `J`; the part decoder has `J + 1` channels.
    pub n_parts: usize,
    /// Scene decoder channels, background included.
    pub scene_classes: usize,
    pub head_hidden: usize,
    pub heads: usize,
    pub activation: Activation,
    /// Learned linear Q/K/V projections instead of the raw tokens.
    pub qkv_projection: bool,
    /// Add fixed sinusoidal position codes to both token sets.
    pub positional_encoding: bool,
    /// Start the last contact-head layer at zero (all outputs 0.5).
    pub zero_init_head: bool,
    pub layer_norm_eps: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(642, 24, 6)
    }
}

impl ModelConfig {
    /// 64x64 input, three encoder stages ending at 32 channels.
    pub fn desk(n_vertices: usize, n_parts: usize, scene_classes: usize) -> Self {
        Self {
            input_size: (64, 64),
            encoder_channels: vec![8, 16, 32],
            c_t: None,
            n_vertices,
            n_parts,
            scene_classes,
            head_hidden: 64,
            heads: 1,
            activation: Activation::Silu,
            qkv_projection: false,
            positional_encoding: false,
            zero_init_head: false,
            layer_norm_eps: 1e-5,
            seed: 0,
        }
    }

    /// 256x256 input, 6890 vertices, 24 parts, 133 scene categories, 4 heads.
    pub fn paper_scale() -> Self {
        Self {
            input_size: (256, 256),
            encoder_channels: vec![16, 32, 64, 64, 64],
            heads: 4,
            head_hidden: 256,
            ..Self::desk(6890, 24, 133)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return bad(format!("encoder channels {:?}", self.encoder_channels));
        }
        let f = 1usize << self.encoder_channels.len();
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return bad(format!("input {h}x{w} is not divisible by {f}"));
        }
        if self.n_vertices == 0 || self.n_parts == 0 || self.scene_classes < 2 {
            return bad("vertex, part and scene class counts must be positive".into());
        }
        if self.head_hidden == 0 || self.heads == 0 || self.embed_dim() % self.heads != 0 {
            return bad(format!("{} heads over {} channels", self.heads, self.embed_dim()));
        }
        if let Some(c) = self.c_t {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("C_t must be positive, got {c}"));
            }
        }
        if !(self.layer_norm_eps > 0.0) {
            return bad("layer norm epsilon must be positive".into());
        }
        Ok(())
    }

    pub fn embed_dim(&self) -> usize {
        *self.encoder_channels.last().expect("validated non-empty")
    }

    pub fn token_grid(&self) -> (usize, usize) {
        let f = 1usize << self.encoder_channels.len();
        (self.input_size.0 / f, self.input_size.1 / f)
    }

    pub fn num_tokens(&self) -> usize {
        let (h, w) = self.token_grid();
        h * w
    }

    pub fn attention_scale(&self) -> f64 {
        self.c_t.unwrap_or((self.embed_dim() / self.heads) as f64)
    }

    pub fn part_classes(&self) -> usize {
        self.n_parts + 1
    }
}
