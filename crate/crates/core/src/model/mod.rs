//! Dual-encoder contact network.
//!
//! Two independent strided-convolution encoders map the image to scene and
//! part feature maps. Their spatial positions become tokens that exchange
//! information through cross-attention; the fused tokens are pooled and fed
//! to a two-layer perceptron with one sigmoid output per template vertex.
//! Transposed-convolution decoders upsample each encoder output back to the
//! input resolution as segmentation logits.
//!
//! # Parameter names
//!
//! Checkpoints store parameters by name. The scheme is:
//!
//! | name | shape |
//! |---|---|
//! | `scene_encoder.conv{i}.weight` / `.bias` | `[C_i, C_{i-1}, 3, 3]` / `[C_i]` |
//! | `part_encoder.conv{i}.weight` / `.bias` | same |
//! | `fusion.{scene,part}.{q,k,v}.weight` / `.bias` | `[C, C]` / `[C]` (projection flag only) |
//! | `fusion.norm.weight` / `.bias` | `[C]` |
//! | `contact_head.fc0.weight` / `.bias` | `[hidden, C]` / `[hidden]` |
//! | `contact_head.fc1.weight` / `.bias` | `[N_V, hidden]` / `[N_V]` |
//! | `scene_decoder.deconv{i}.weight` / `.bias` | `[C_in, C_out, 2, 2]` / `[C_out]` |
//! | `part_decoder.deconv{i}.weight` / `.bias` | same |

mod attention;
mod config;

pub use attention::{
    cross_attention_fuse, cross_attention_on_tape, positional_codes, FuseOptions, FuseOutput, FuseVars, QkvProjections,
};
pub use config::ModelConfig;

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::VertexContactVector;
use crate::error::{Error, Result};
use crate::tape::{Tape, Tensor, Var};

/// Named parameter tensors in a stable (sorted) order.
pub type ParamStore = BTreeMap<String, Tensor>;

#[derive(Copy, Clone, Debug, PartialEq)]
enum Init {
    /// Uniform in `+- gain * sqrt(3 / fan_in)`.
    Uniform {
        fan_in: usize,
        gain: f64,
    },
    Zeros,
    Ones,
}

/// Name, shape and initializer of every parameter, in construction order.
fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut specs = Vec::new();
    let he = |fan_in| Init::Uniform {
        fan_in,
        gain: 2f64.sqrt(),
    };
    let bias = |specs: &mut Vec<(String, Vec<usize>, Init)>, name: String, n: usize| {
        specs.push((name, vec![n], Init::Zeros));
    };
    for enc in ["scene_encoder", "part_encoder"] {
        let mut cin = 3;
        for (i, &c) in cfg.encoder_channels.iter().enumerate() {
            specs.push((format!("{enc}.conv{i}.weight"), vec![c, cin, 3, 3], he(cin * 9)));
            bias(&mut specs, format!("{enc}.conv{i}.bias"), c);
            cin = c;
        }
    }
    let c = cfg.embed_dim();
    if cfg.qkv_projection {
        for side in ["scene", "part"] {
            for m in ["q", "k", "v"] {
                specs.push((
                    format!("fusion.{side}.{m}.weight"),
                    vec![c, c],
                    Init::Uniform { fan_in: c, gain: 1.0 },
                ));
                bias(&mut specs, format!("fusion.{side}.{m}.bias"), c);
            }
        }
    }
    specs.push(("fusion.norm.weight".into(), vec![c], Init::Ones));
    bias(&mut specs, "fusion.norm.bias".into(), c);
    specs.push(("contact_head.fc0.weight".into(), vec![cfg.head_hidden, c], he(c)));
    bias(&mut specs, "contact_head.fc0.bias".into(), cfg.head_hidden);
    let last = if cfg.zero_init_head {
        Init::Zeros
    } else {
        Init::Uniform {
            fan_in: cfg.head_hidden,
            gain: 1.0,
        }
    };
    specs.push((
        "contact_head.fc1.weight".into(),
        vec![cfg.n_vertices, cfg.head_hidden],
        last,
    ));
    bias(&mut specs, "contact_head.fc1.bias".into(), cfg.n_vertices);
    for (dec, classes) in [
        ("scene_decoder", cfg.scene_classes),
        ("part_decoder", cfg.part_classes()),
    ] {
        for (i, (cin, cout)) in decoder_stages(cfg, classes).into_iter().enumerate() {
            let gain = if i + 1 == cfg.encoder_channels.len() {
                1.0
            } else {
                2f64.sqrt()
            };
            specs.push((
                format!("{dec}.deconv{i}.weight"),
                vec![cin, cout, 2, 2],
                Init::Uniform { fan_in: cin, gain },
            ));
            bias(&mut specs, format!("{dec}.deconv{i}.bias"), cout);
        }
    }
    specs
}

/// `(in, out)` channels of each decoder stage: encoder widths reversed,
/// ending at `classes`.
fn decoder_stages(cfg: &ModelConfig, classes: usize) -> Vec<(usize, usize)> {
    let ch = &cfg.encoder_channels;
    (0..ch.len())
        .rev()
        .map(|l| (ch[l], if l == 0 { classes } else { ch[l - 1] }))
        .collect()
}

/// Parameters placed on a tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` was not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Tape handles of one forward pass over a batch.
#[derive(Copy, Clone, Debug)]
pub struct ForwardVars {
    /// `[B, C, h, w]` encoder outputs.
    pub scene_features: Var,
    pub part_features: Var,
    pub fusion: FuseVars,
    /// `[B, N_V]` probabilities.
    pub contact: Var,
    /// `[B, N_o', H, W]`.
    pub scene_logits: Var,
    /// `[B, J + 1, H, W]`.
    pub part_logits: Var,
}

/// Per-image network output.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoOutput {
    pub contact: VertexContactVector,
    /// `[N_o', H, W]`.
    pub scene_logits: Tensor,
    /// `[J + 1, H, W]`.
    pub part_logits: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoModel {
    config: ModelConfig,
    params: ParamStore,
}

pub const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelFile {
    schema_version: u32,
    config: ModelConfig,
    params: ParamStore,
}

fn slice_batch(t: &Tensor, i: usize) -> Result<Tensor> {
    let s = t.shape();
    let per: usize = s[1..].iter().product();
    Tensor::new(s[1..].to_vec(), t.data()[i * per..(i + 1) * per].to_vec())
}

impl DecoModel {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = param_specs(&config)
            .into_iter()
            .map(|(name, shape, init)| {
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Uniform { fan_in, gain } => {
                        let bound = gain * (3.0 / fan_in as f64).sqrt();
                        (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                    }
                };
                (name, Tensor::new(shape, data).expect("shape matches data"))
            })
            .collect();
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            return Err(Error::Validation(format!(
                "expected {} parameters, found {}",
                specs.len(),
                params.len()
            )));
        }
        for (name, shape, _) in &specs {
            match params.get(name) {
                None => return Err(Error::Validation(format!("missing parameter `{name}`"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Shape(format!(
                        "parameter `{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                Some(t) if t.data().iter().any(|v| !v.is_finite()) => {
                    return Err(Error::NonFinite(format!("parameter `{name}`")))
                }
                Some(_) => {}
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Places every parameter on `tape`, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    fn check_images(&self, shape: &[usize]) -> Result<()> {
        let (h, w) = self.config.input_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != h || shape[3] != w || shape[0] == 0 {
            return Err(Error::Shape(format!(
                "images {shape:?}, model expects [B, 3, {h}, {w}]"
            )));
        }
        Ok(())
    }

    fn encoder(&self, tape: &mut Tape, p: &BoundParams, prefix: &str, images: Var) -> Result<Var> {
        let mut x = images;
        for i in 0..self.config.encoder_channels.len() {
            let w = p.get(&format!("{prefix}.conv{i}.weight"));
            let b = p.get(&format!("{prefix}.conv{i}.bias"));
            x = tape.conv2d(x, w, b, 2, 1)?;
            x = tape.activation(x, self.config.activation);
        }
        Ok(x)
    }

    fn decoder(&self, tape: &mut Tape, p: &BoundParams, prefix: &str, features: Var) -> Result<Var> {
        let stages = self.config.encoder_channels.len();
        let mut x = features;
        for i in 0..stages {
            let w = p.get(&format!("{prefix}.deconv{i}.weight"));
            let b = p.get(&format!("{prefix}.deconv{i}.bias"));
            x = tape.conv_transpose2x2(x, w, b)?;
            if i + 1 < stages {
                x = tape.activation(x, self.config.activation);
            }
        }
        Ok(x)
    }

    /// Encoder pair on the tape: `(F_s, F_p)`, each `[B, C, h, w]`.
    pub fn encode_on_tape(&self, tape: &mut Tape, p: &BoundParams, images: Var) -> Result<(Var, Var)> {
        self.check_images(tape.shape(images))?;
        let f_s = self.encoder(tape, p, "scene_encoder", images)?;
        let f_p = self.encoder(tape, p, "part_encoder", images)?;
        Ok((f_s, f_p))
    }

    /// Full forward pass over `images [B, 3, H, W]`.
    pub fn forward_on_tape(&self, tape: &mut Tape, p: &BoundParams, images: Var) -> Result<ForwardVars> {
        let cfg = &self.config;
        let (f_s, f_p) = self.encode_on_tape(tape, p, images)?;
        let mut s_tok = tape.to_tokens(f_s)?;
        let mut p_tok = tape.to_tokens(f_p)?;
        if cfg.positional_encoding {
            let (b, t, c) = (tape.shape(s_tok)[0], cfg.num_tokens(), cfg.embed_dim());
            let pe = positional_codes(t, c);
            let pe = tape.constant(Tensor::new(vec![b, t, c], pe.repeat(b))?);
            s_tok = tape.add(s_tok, pe)?;
            p_tok = tape.add(p_tok, pe)?;
        }
        let proj = cfg.qkv_projection.then(|| {
            let pair = |side: &str, m: &str| {
                (
                    p.get(&format!("fusion.{side}.{m}.weight")),
                    p.get(&format!("fusion.{side}.{m}.bias")),
                )
            };
            QkvProjections {
                scene: [pair("scene", "q"), pair("scene", "k"), pair("scene", "v")],
                part: [pair("part", "q"), pair("part", "k"), pair("part", "v")],
            }
        });
        let fusion = cross_attention_on_tape(
            tape,
            s_tok,
            p_tok,
            p.get("fusion.norm.weight"),
            p.get("fusion.norm.bias"),
            proj.as_ref(),
            &FuseOptions {
                c_t: cfg.attention_scale(),
                heads: cfg.heads,
                eps: cfg.layer_norm_eps,
            },
        )?;
        let pooled = tape.mean_tokens(fusion.fused)?;
        let h = tape.linear(pooled, p.get("contact_head.fc0.weight"), p.get("contact_head.fc0.bias"))?;
        let h = tape.activation(h, cfg.activation);
        let logits = tape.linear(h, p.get("contact_head.fc1.weight"), p.get("contact_head.fc1.bias"))?;
        let contact = tape.sigmoid(logits);
        let scene_logits = self.decoder(tape, p, "scene_decoder", f_s)?;
        let part_logits = self.decoder(tape, p, "part_decoder", f_p)?;
        Ok(ForwardVars {
            scene_features: f_s,
            part_features: f_p,
            fusion,
            contact,
            scene_logits,
            part_logits,
        })
    }

    /// Encoder outputs `(F_s, F_p)` for `images [B, 3, H, W]`.
    pub fn encode(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let (s, q) = self.encode_on_tape(&mut tape, &p, x)?;
        Ok((tape.value(s).clone(), tape.value(q).clone()))
    }

    /// Inference over a batch.
    pub fn forward(&self, images: &Tensor) -> Result<Vec<DecoOutput>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let f = self.forward_on_tape(&mut tape, &p, x)?;
        let batch = images.shape()[0];
        let contact = tape.value(f.contact);
        (0..batch)
            .map(|i| {
                let n = self.config.n_vertices;
                let c = contact.data()[i * n..(i + 1) * n].to_vec();
                if c.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("contact prediction".into()));
                }
                Ok(DecoOutput {
                    contact: VertexContactVector::from_probabilities(c)?,
                    scene_logits: slice_batch(tape.value(f.scene_logits), i)?,
                    part_logits: slice_batch(tape.value(f.part_logits), i)?,
                })
            })
            .collect()
    }

    /// Contact probabilities for a batch of images.
    pub fn predict_contact(&self, images: &Tensor) -> Result<Vec<VertexContactVector>> {
        Ok(self.forward(images)?.into_iter().map(|o| o.contact).collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ModelFile {
            schema_version: MODEL_SCHEMA_VERSION,
            config: self.config.clone(),
            params: self.params.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(s)?;
        if file.schema_version != MODEL_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                expected: MODEL_SCHEMA_VERSION,
                found: file.schema_version,
            });
        }
        Self::from_params(file.config, file.params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> ModelConfig {
        ModelConfig {
            input_size: (16, 16),
            encoder_channels: vec![4, 8],
            n_vertices: 20,
            n_parts: 3,
            scene_classes: 4,
            head_hidden: 8,
            seed,
            ..ModelConfig::default()
        }
    }

    fn images(b: usize, h: usize, w: usize, salt: f64) -> Tensor {
        let n = b * 3 * h * w;
        Tensor::new(
            vec![b, 3, h, w],
            (0..n).map(|i| ((i as f64 * 0.37 + salt).sin() + 1.0) / 2.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn output_shapes() {
        let m = DecoModel::new(tiny(0)).unwrap();
        let out = m.forward(&images(2, 16, 16, 0.0)).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].contact.len(), 20);
        assert_eq!(out[0].scene_logits.shape(), &[4, 16, 16]);
        assert_eq!(out[0].part_logits.shape(), &[4, 16, 16]);
        assert!(out[0].contact.values().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn channel_counts_follow_config() {
        let cfg = ModelConfig {
            n_parts: 24,
            scene_classes: 133,
            ..tiny(0)
        };
        let out = DecoModel::new(cfg).unwrap().forward(&images(1, 16, 16, 0.0)).unwrap();
        assert_eq!(out[0].part_logits.shape()[0], 25);
        assert_eq!(out[0].scene_logits.shape()[0], 133);
    }

    #[test]
    fn zero_image_is_finite_and_seeds_differ() {
        let a = DecoModel::new(tiny(1)).unwrap();
        let b = DecoModel::new(tiny(2)).unwrap();
        assert_ne!(a.params(), b.params());
        let zero = Tensor::zeros(vec![1, 3, 16, 16]);
        let (fs, fp) = a.encode(&zero).unwrap();
        assert_eq!(fs.shape(), fp.shape());
        assert!(fs.data().iter().chain(fp.data()).all(|v| v.is_finite()));
        assert_eq!(b.encode(&zero).unwrap().0.shape(), fs.shape());
    }

    #[test]
    fn zero_head_outputs_one_half() {
        let m = DecoModel::new(ModelConfig {
            zero_init_head: true,
            ..tiny(3)
        })
        .unwrap();
        let out = m.forward(&images(1, 16, 16, 0.5)).unwrap();
        assert!(out[0].contact.values().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn batch_matches_single_and_swaps() {
        let m = DecoModel::new(tiny(4)).unwrap();
        let a = images(1, 16, 16, 0.1);
        let b = images(1, 16, 16, 2.3);
        let ab = Tensor::new(vec![2, 3, 16, 16], [a.data(), b.data()].concat()).unwrap();
        let ba = Tensor::new(vec![2, 3, 16, 16], [b.data(), a.data()].concat()).unwrap();
        let out_ab = m.forward(&ab).unwrap();
        let out_ba = m.forward(&ba).unwrap();
        let single = m.forward(&a).unwrap();
        let close = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(p, q)| (p - q).abs() < 1e-6);
        assert!(close(out_ab[0].contact.values(), single[0].contact.values()));
        assert!(close(out_ab[0].scene_logits.data(), single[0].scene_logits.data()));
        assert_eq!(out_ab[0], out_ba[1]);
        assert_eq!(out_ab[1], out_ba[0]);
    }

    #[test]
    fn wrong_image_size() {
        let m = DecoModel::new(tiny(0)).unwrap();
        assert!(m.forward(&images(1, 8, 8, 0.0)).is_err());
        assert!(ModelConfig {
            input_size: (18, 16),
            ..tiny(0)
        }
        .validate()
        .is_err());
    }

    #[test]
    fn options_forward() {
        for cfg in [
            ModelConfig { heads: 2, ..tiny(5) },
            ModelConfig {
                qkv_projection: true,
                ..tiny(5)
            },
            ModelConfig {
                positional_encoding: true,
                activation: crate::tape::Activation::Relu,
                ..tiny(5)
            },
        ] {
            let m = DecoModel::new(cfg).unwrap();
            let out = m.forward(&images(2, 16, 16, 0.0)).unwrap();
            assert!(out[1].contact.values().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn json_round_trip_and_validation() {
        let m = DecoModel::new(ModelConfig {
            qkv_projection: true,
            ..tiny(6)
        })
        .unwrap();
        let back = DecoModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        let mut params = m.params().clone();
        params.remove("fusion.norm.bias");
        assert!(DecoModel::from_params(m.config().clone(), params).is_err());
        let mut params = m.params().clone();
        params.insert("fusion.norm.bias".into(), Tensor::zeros(vec![3]));
        assert!(DecoModel::from_params(m.config().clone(), params).is_err());
    }

    #[test]
    fn parameter_names_are_stable() {
        let m = DecoModel::new(tiny(0)).unwrap();
        let names: Vec<&str> = m.params().keys().map(String::as_str).collect();
        assert!(names.contains(&"scene_encoder.conv1.weight"));
        assert!(names.contains(&"part_decoder.deconv1.bias"));
        assert!(names.contains(&"contact_head.fc1.weight"));
        assert_eq!(m.params()["contact_head.fc1.weight"].shape(), &[20, 8]);
    }
}
