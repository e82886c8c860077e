use std::f64::consts::{FRAC_PI_2, PI};
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{default_vocabulary, ContactRecord, VertexContactVector};
use crate::error::{Error, Result};
use crate::losses::{project_weak_perspective, splat_render, SplatOptions};
use crate::mesh::{load_template, TemplateMesh, Vec3};
use crate::synth::geometry::{dot, mat_mul, mat_vec, rot_x, rot_y, rot_z, Aabb, Mat3, IDENTITY};
use crate::synth::render::{render_flat, BodyView, LabelMap, RgbImage};
use crate::synth::scene::{contact_hits, per_mesh_contact};
use crate::synth::{Camera, PosedBody, SceneGeometry, SceneMesh};

/// Largest random tilt (rad) of a supported body away from a resting
/// orientation. Larger tilts leave a rigid body touching at a single corner.
const RESTING_TILT: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseFamily {
    /// Upright on the floor.
    Standing,
    /// Long axis horizontal on the floor, random roll about the long axis.
    Lying,
    /// Upright or tilted on top of a seat box.
    Sitting,
    /// Standing, tilted against the side of a tall box.
    Leaning,
    /// Randomly oriented above the floor; no contact.
    Floating,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyWeight {
    pub family: PoseFamily,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TemplateSpec {
    DeskBody {
        subdivisions: u32,
        parts: usize,
    },
    Icosphere {
        subdivisions: u32,
        radius: f64,
        parts: usize,
    },
    File {
        path: PathBuf,
        parts: usize,
    },
}

impl TemplateSpec {
    pub fn build(&self) -> Result<TemplateMesh> {
        match self {
            TemplateSpec::DeskBody { subdivisions, parts } => TemplateMesh::desk_body(*subdivisions, *parts),
            TemplateSpec::Icosphere {
                subdivisions,
                radius,
                parts,
            } => TemplateMesh::icosphere(*subdivisions, *radius, *parts),
            TemplateSpec::File { path, parts } => load_template(path, *parts),
        }
    }
}

/// Synthetic scene generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub template: TemplateSpec,
    pub vocabulary: Vec<String>,
    /// Vocabulary label of the ground plane.
    pub ground_label: String,
    /// `(height, width)`.
    pub image_size: (usize, usize),
    pub pose_families: Vec<FamilyWeight>,
    /// Vertex-to-scene distance (m) at or below which a vertex is in contact.
    pub contact_threshold: f64,
    /// Range of the gap (m) between the body and the supporting surface;
    /// negative values are slight penetrations.
    pub support_gap: [f64; 2],
    pub float_height: [f64; 2],
    pub max_distractors: usize,
    pub elevation_deg: [f64; 2],
    /// Fraction of the normalized image span covered by the body.
    pub fill: [f64; 2],
    pub splat_sigma: f64,
    /// Probability that a sample keeps its 3D labels.
    pub labels_3d_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            template: TemplateSpec::DeskBody {
                subdivisions: 3,
                parts: 24,
            },
            vocabulary: default_vocabulary(),
            ground_label: "floor".into(),
            image_size: (64, 64),
            pose_families: [
                PoseFamily::Standing,
                PoseFamily::Lying,
                PoseFamily::Sitting,
                PoseFamily::Leaning,
            ]
            .into_iter()
            .map(|family| FamilyWeight { family, weight: 1.0 })
            .collect(),
            contact_threshold: 0.02,
            support_gap: [-0.005, 0.008],
            float_height: [0.2, 0.6],
            max_distractors: 2,
            elevation_deg: [15.0, 35.0],
            fill: [1.0, 1.3],
            splat_sigma: 1.5,
            labels_3d_fraction: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !self.vocabulary.iter().any(|l| l == &self.ground_label) {
            return bad(format!("ground label `{}` not in vocabulary", self.ground_label));
        }
        if self.vocabulary.len() < 2 {
            return bad("vocabulary needs the ground label and at least one object".into());
        }
        let (h, w) = self.image_size;
        if h < 8 || w < 8 {
            return bad(format!("image size {h}x{w} too small"));
        }
        let total: f64 = self.pose_families.iter().map(|f| f.weight).sum();
        if self.pose_families.iter().any(|f| !(f.weight >= 0.0)) || !(total > 0.0) {
            return bad("pose family weights must be non-negative with a positive sum".into());
        }
        if !(self.contact_threshold > 0.0) {
            return bad("contact threshold must be positive".into());
        }
        for (name, r) in [
            ("support_gap", self.support_gap),
            ("float_height", self.float_height),
            ("elevation_deg", self.elevation_deg),
            ("fill", self.fill),
        ] {
            if !(r[0] <= r[1]) || r.iter().any(|v| !v.is_finite()) {
                return bad(format!("{name} range {r:?} is invalid"));
            }
        }
        if !(self.fill[0] > 0.0) || !(self.splat_sigma > 0.0) {
            return bad("fill and splat sigma must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.labels_3d_fraction) {
            return bad("labels_3d_fraction must be in [0, 1]".into());
        }
        Ok(())
    }

    /// Object id written into scene masks: vocabulary index + 1.
    pub fn scene_id(&self, label: &str) -> Result<u16> {
        self.vocabulary
            .iter()
            .position(|l| l == label)
            .map(|i| (i + 1) as u16)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }

    /// Scene segmentation channel count: background plus every label.
    pub fn scene_classes(&self) -> usize {
        self.vocabulary.len() + 1
    }
}

/// One rendered synthetic sample with all ground-truth channels.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub seed: u64,
    pub family: PoseFamily,
    pub image: RgbImage,
    pub body: PosedBody,
    pub scene: SceneGeometry,
    pub camera: Camera,
    pub gt_contact: VertexContactVector,
    pub gt_scene_mask: LabelMap,
    pub gt_part_mask: LabelMap,
    /// Binary (0/1) projection of the ground-truth contact vertices.
    pub gt_contact_mask_2d: LabelMap,
    pub record: ContactRecord,
}

/// Generator bound to a built template.
#[derive(Clone, Debug)]
pub struct Synthesizer {
    config: SynthConfig,
    template: TemplateMesh,
}

fn uniform(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..range[1])
    }
}

impl Synthesizer {
    pub fn new(config: SynthConfig) -> Result<Self> {
        config.validate()?;
        let template = config.template.build()?;
        Ok(Self { config, template })
    }

    pub fn with_template(config: SynthConfig, template: TemplateMesh) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, template })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.config
    }

    pub fn template(&self) -> &TemplateMesh {
        &self.template
    }

    fn object_labels(&self) -> Vec<&String> {
        self.config
            .vocabulary
            .iter()
            .filter(|l| **l != self.config.ground_label)
            .collect()
    }

    fn pick_family(&self, rng: &mut ChaCha8Rng) -> PoseFamily {
        let total: f64 = self.config.pose_families.iter().map(|f| f.weight).sum();
        let mut x = rng.random::<f64>() * total;
        for f in &self.config.pose_families {
            if x < f.weight {
                return f.family;
            }
            x -= f.weight;
        }
        self.config
            .pose_families
            .iter()
            .rev()
            .find(|f| f.weight > 0.0)
            .map(|f| f.family)
            .expect("validated positive weight sum")
    }

    /// Pure function of `seed` and the configuration.
    pub fn generate_sample(&self, seed: u64) -> Result<SynthSample> {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let family = self.pick_family(&mut rng);
        let yaw = rng.random_range(0.0..2.0 * PI);
        let objects = self.object_labels();
        let pick_label = |rng: &mut ChaCha8Rng| objects[rng.random_range(0..objects.len())].clone();

        let (local, provenance): (Mat3, String) = match family {
            PoseFamily::Standing => {
                let (a, b) = (
                    rng.random_range(-RESTING_TILT..RESTING_TILT),
                    rng.random_range(-RESTING_TILT..RESTING_TILT),
                );
                (mat_mul(&rot_x(a), &rot_z(b)), format!("standing tilt=({a:.3},{b:.3})"))
            }
            PoseFamily::Lying => {
                // a rigid body comes to rest on one of its four long faces
                let roll =
                    f64::from(rng.random_range(0..4u8)) * FRAC_PI_2 + rng.random_range(-RESTING_TILT..RESTING_TILT);
                let side = if rng.random::<bool>() { FRAC_PI_2 } else { -FRAC_PI_2 };
                (
                    mat_mul(&rot_z(side), &rot_y(roll)),
                    format!("lying roll={roll:.3} side={side:.3}"),
                )
            }
            PoseFamily::Sitting => {
                let pitch = rng.random_range(-RESTING_TILT..RESTING_TILT);
                (rot_x(pitch), format!("sitting pitch={pitch:.3}"))
            }
            PoseFamily::Leaning => {
                let lean = rng.random_range(0.14..0.35);
                (rot_z(-lean), format!("leaning angle={lean:.3}"))
            }
            PoseFamily::Floating => {
                let (a, b, c) = (
                    rng.random_range(0.0..2.0 * PI),
                    rng.random_range(0.0..2.0 * PI),
                    rng.random_range(0.0..2.0 * PI),
                );
                (
                    mat_mul(&rot_x(a), &mat_mul(&rot_y(b), &rot_z(c))),
                    format!("floating euler=({a:.3},{b:.3},{c:.3})"),
                )
            }
        };
        let mut body: Vec<Vec3> = self.template.vertices().iter().map(|&v| mat_vec(&local, v)).collect();
        let foot = *body
            .iter()
            .min_by(|a, b| a[1].total_cmp(&b[1]))
            .expect("template is non-empty");
        let lowest = foot[1];
        let mut meshes = vec![SceneMesh::ground(cfg.ground_label.clone(), [0.0, 0.0, 0.0], 4.0)];
        let base = match family {
            PoseFamily::Sitting => {
                let seat_height = rng.random_range(0.40..0.55);
                let half = [
                    rng.random_range(0.25..0.35),
                    seat_height / 2.0,
                    rng.random_range(0.25..0.35),
                ];
                meshes.push(SceneMesh::cuboid(
                    pick_label(&mut rng),
                    [foot[0], seat_height / 2.0, foot[2]],
                    half,
                    &IDENTITY,
                ));
                seat_height + uniform(&mut rng, cfg.support_gap)
            }
            PoseFamily::Floating => uniform(&mut rng, cfg.float_height),
            _ => uniform(&mut rng, cfg.support_gap),
        };
        for v in &mut body {
            v[1] += base - lowest;
        }
        if family == PoseFamily::Leaning {
            let top = rng.random_range(1.1..1.9);
            let face = body
                .iter()
                .filter(|v| v[1] <= top)
                .map(|v| v[0])
                .fold(f64::NEG_INFINITY, f64::max)
                + uniform(&mut rng, cfg.support_gap);
            let half = [rng.random_range(0.2..0.4), top / 2.0, rng.random_range(0.4..0.6)];
            meshes.push(SceneMesh::cuboid(
                pick_label(&mut rng),
                [face + half[0], top / 2.0, 0.0],
                half,
                &IDENTITY,
            ));
        }
        let distractors = rng.random_range(0..=cfg.max_distractors);
        for _ in 0..distractors {
            let side: f64 = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let half = [
                rng.random_range(0.15..0.35),
                rng.random_range(0.15..0.5),
                rng.random_range(0.15..0.35),
            ];
            let center = [side * rng.random_range(1.4..2.2), half[1], rng.random_range(-2.2..-1.4)];
            let spin = rng.random_range(0.0..PI);
            meshes.push(SceneMesh::cuboid(pick_label(&mut rng), center, half, &rot_y(spin)));
        }

        // World (y up) -> camera frame: yaw about the vertical, then tilt so
        // the ground faces the viewer.
        let elevation = uniform(&mut rng, cfg.elevation_deg).to_radians();
        let to_camera = mat_mul(&rot_x(elevation), &rot_y(yaw));
        let body = PosedBody::new(
            body.iter().map(|&v| mat_vec(&to_camera, v)).collect(),
            Some(format!("{provenance} yaw={yaw:.3} elevation={elevation:.3}")),
        )?;
        let scene = SceneGeometry::new(meshes).transformed(&to_camera);
        let up = mat_vec(&to_camera, [0.0, 1.0, 0.0]);

        let bb = Aabb::from_points(body.vertices.iter());
        let span = (bb.max[0] - bb.min[0]).max(bb.max[1] - bb.min[1]);
        let scale = uniform(&mut rng, cfg.fill) / span;
        let jitter = [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)];
        let camera = Camera::new(
            scale,
            [
                -scale * 0.5 * (bb.min[0] + bb.max[0]) + jitter[0],
                -scale * 0.5 * (bb.min[1] + bb.max[1]) + jitter[1],
            ],
            cfg.image_size,
        )?;
        let has_3d = rng.random::<f64>() < cfg.labels_3d_fraction;

        let n = self.template.num_vertices();
        let hits = contact_hits(&body, &scene, cfg.contact_threshold)?;
        let per_mesh = per_mesh_contact(&body, &scene, cfg.contact_threshold)?;
        let contact_ids: Vec<usize> = hits.iter().enumerate().filter_map(|(i, h)| h.map(|_| i)).collect();
        let supported: Vec<usize> = hits
            .iter()
            .enumerate()
            .filter_map(|(i, h)| h.filter(|h| dot(h.normal, up) > 0.7).map(|_| i))
            .collect();
        let gt_contact = VertexContactVector::from_indices(n, &contact_ids)?;

        let image_id = format!("synth_{seed:08}");
        let mut record =
            ContactRecord::new(image_id.clone(), format!("images/{image_id}.png")).with_scene_supported(&supported);
        for (mesh, ids) in scene.meshes.iter().zip(&per_mesh) {
            if !ids.is_empty() {
                record = record.with_object(mesh.label.clone(), ids);
            }
        }
        record.has_3d_labels = has_3d;

        let scene_ids = scene
            .meshes
            .iter()
            .map(|m| cfg.scene_id(&m.label))
            .collect::<Result<Vec<_>>>()?;
        let rendered = render_flat(
            &scene,
            &scene_ids,
            Some(BodyView {
                body: &body,
                triangles: self.template.triangles(),
                part_labels: self.template.part_labels(),
            }),
            &camera,
        )?;
        let points = project_weak_perspective(&body.vertices, &camera)?;
        let map = splat_render(
            &points,
            gt_contact.values(),
            &camera,
            &SplatOptions {
                sigma: cfg.splat_sigma,
                ..SplatOptions::default()
            },
        )?;
        let (h, w) = cfg.image_size;
        let gt_contact_mask_2d = LabelMap {
            height: h,
            width: w,
            data: map.values.iter().map(|&v| u16::from(v >= 0.5)).collect(),
        };
        Ok(SynthSample {
            seed,
            family,
            image: rendered.image,
            body,
            scene,
            camera,
            gt_contact,
            gt_scene_mask: rendered.scene_mask,
            gt_part_mask: rendered.part_mask,
            gt_contact_mask_2d,
            record,
        })
    }
}

/// Builds the template and generates one sample.
pub fn generate_sample(seed: u64, config: &SynthConfig) -> Result<SynthSample> {
    Synthesizer::new(config.clone())?.generate_sample(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::geometric_contact;

    fn small_config() -> SynthConfig {
        SynthConfig {
            template: TemplateSpec::DeskBody {
                subdivisions: 2,
                parts: 8,
            },
            image_size: (32, 32),
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let synth = Synthesizer::new(small_config()).unwrap();
        assert_eq!(synth.generate_sample(11).unwrap(), synth.generate_sample(11).unwrap());
        assert_ne!(
            synth.generate_sample(11).unwrap().image,
            synth.generate_sample(12).unwrap().image
        );
    }

    #[test]
    fn floating_body_has_no_contact() {
        let cfg = SynthConfig {
            pose_families: vec![FamilyWeight {
                family: PoseFamily::Floating,
                weight: 1.0,
            }],
            float_height: [1.0, 1.0],
            ..small_config()
        };
        let synth = Synthesizer::new(cfg).unwrap();
        for seed in 0..5 {
            let s = synth.generate_sample(seed).unwrap();
            assert!(s.gt_contact.positives(0.5).is_empty());
            assert!(s.gt_contact_mask_2d.data.iter().all(|&v| v == 0));
        }
    }

    #[test]
    fn ground_truth_channels_are_consistent() {
        let cfg = small_config();
        let synth = Synthesizer::new(cfg.clone()).unwrap();
        let parts = synth.template().num_parts() as u16;
        for seed in 0..20 {
            let s = synth.generate_sample(seed).unwrap();
            let oracle = geometric_contact(&s.body, &s.scene, cfg.contact_threshold).unwrap();
            assert_eq!(s.gt_contact, oracle);
            assert_eq!(s.record.union_vertices(), s.gt_contact.positives(0.5));
            assert!(s.gt_scene_mask.max_label() <= cfg.vocabulary.len() as u16);
            assert!(s.gt_part_mask.max_label() <= parts);
            if s.family != PoseFamily::Floating {
                assert!(!s.gt_contact.positives(0.5).is_empty(), "seed {seed} {:?}", s.family);
                assert!(s.gt_contact_mask_2d.data.iter().any(|&v| v == 1));
            }
            s.record
                .validate(synth.template().num_vertices(), &cfg.vocabulary)
                .unwrap();
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = small_config();
        cfg.ground_label = "lava".into();
        assert!(Synthesizer::new(cfg).is_err());
        let cfg = SynthConfig {
            pose_families: vec![],
            ..small_config()
        };
        assert!(Synthesizer::new(cfg).is_err());
    }
}
