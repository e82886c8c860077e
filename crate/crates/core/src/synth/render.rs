//! Flat-shaded, z-buffered label rasterization under the weak-perspective camera.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::Vec3;
use crate::synth::{Camera, PosedBody, SceneGeometry};

/// H x W x 3 image, row-major, values in [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn filled(height: usize, width: usize, color: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend(color.iter().map(|&c| f64::from(c) / 255.0));
        }
        Self { height, width, data }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    fn set(&mut self, idx: usize, color: [u8; 3]) {
        for c in 0..3 {
            self.data[idx * 3 + c] = f64::from(color[c]) / 255.0;
        }
    }

    /// Channel-major copy, `[3][H][W]`.
    pub fn to_chw(&self) -> Vec<f64> {
        let n = self.height * self.width;
        let mut out = vec![0.0; 3 * n];
        for i in 0..n {
            for c in 0..3 {
                out[c * n + i] = self.data[i * 3 + c];
            }
        }
        out
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.pixel(y as usize, x as usize);
            image::Rgb(p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let mut data = Vec::with_capacity((w * h * 3) as usize);
        for p in img.pixels() {
            data.extend(p.0.iter().map(|&c| f64::from(c) / 255.0));
        }
        Self {
            height: h as usize,
            width: w as usize,
            data,
        }
    }
}

/// H x W integer label map; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u16>,
}

impl LabelMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.data[row * self.width + col]
    }

    pub fn max_label(&self) -> u16 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    pub fn to_luma16(&self) -> image::ImageBuffer<image::Luma<u16>, Vec<u16>> {
        image::ImageBuffer::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("buffer size matches dimensions")
    }

    pub fn from_luma16(img: &image::ImageBuffer<image::Luma<u16>, Vec<u16>>) -> Self {
        let (w, h) = img.dimensions();
        Self {
            height: h as usize,
            width: w as usize,
            data: img.as_raw().clone(),
        }
    }
}

/// Body mesh to rasterize together with its per-vertex part labels.
#[derive(Copy, Clone, Debug)]
pub struct BodyView<'a> {
    pub body: &'a PosedBody,
    pub triangles: &'a [[usize; 3]],
    pub part_labels: &'a [usize],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub image: RgbImage,
    /// Scene object id (`vocabulary index + 1`) of the frontmost scene surface.
    pub scene_mask: LabelMap,
    /// `part + 1` where the body is frontmost.
    pub part_mask: LabelMap,
    /// Depth of the frontmost surface, `-inf` where empty.
    pub depth: Vec<f64>,
}

pub const BACKGROUND_COLOR: [u8; 3] = [140, 170, 205];

fn hsv(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor() as i32;
    let f = h - h.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r, g, b].map(|c| (c * 255.0).round() as u8)
}

/// Distinct saturated colors for body parts.
pub fn part_color(part: usize) -> [u8; 3] {
    let hue = (part as f64 * 0.618_033_988_75).fract();
    let value = if part % 2 == 0 { 0.95 } else { 0.7 };
    hsv(hue, 0.85, value)
}

/// Muted colors for scene objects, keyed by object id (`>= 1`).
pub fn scene_color(id: u16) -> [u8; 3] {
    let hue = (id as f64 * 0.27 + 0.08).fract();
    hsv(hue, 0.25, 0.35 + 0.1 * f64::from(id % 4))
}

enum Paint<'a> {
    Scene(u16),
    Body(&'a [usize]),
}

fn triangle_part(t: &[usize; 3], labels: &[usize]) -> usize {
    let (a, b, c) = (labels[t[0]], labels[t[1]], labels[t[2]]);
    if b == c {
        b
    } else {
        a
    }
}

/// Calls `f(pixel_index, depth)` for every pixel center covered by the
/// projected triangle (edges inclusive).
pub fn rasterize_triangle(tri: [[f64; 3]; 3], height: usize, width: usize, mut f: impl FnMut(usize, f64)) {
    let [a, b, c] = tri;
    let area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
    if area.abs() < 1e-12 {
        return;
    }
    let min_x = a[0].min(b[0]).min(c[0]).ceil().max(0.0);
    let max_x = a[0].max(b[0]).max(c[0]).floor().min(width as f64 - 1.0);
    let min_y = a[1].min(b[1]).min(c[1]).ceil().max(0.0);
    let max_y = a[1].max(b[1]).max(c[1]).floor().min(height as f64 - 1.0);
    if min_x > max_x || min_y > max_y {
        return;
    }
    let edge = |p: [f64; 3], q: [f64; 3], x: f64, y: f64| (q[0] - p[0]) * (y - p[1]) - (q[1] - p[1]) * (x - p[0]);
    for row in min_y as usize..=max_y as usize {
        let y = row as f64;
        for col in min_x as usize..=max_x as usize {
            let x = col as f64;
            let w0 = edge(b, c, x, y) / area;
            let w1 = edge(c, a, x, y) / area;
            let w2 = edge(a, b, x, y) / area;
            if w0 >= 0.0 && w1 >= 0.0 && w2 >= 0.0 {
                f(row * width + col, w0 * a[2] + w1 * b[2] + w2 * c[2]);
            }
        }
    }
}

/// Renders scene and body with flat per-label colors and z-buffered label maps.
/// `scene_ids[i]` is the object id written for `scene.meshes[i]`.
pub fn render_flat(
    scene: &SceneGeometry,
    scene_ids: &[u16],
    body: Option<BodyView<'_>>,
    camera: &Camera,
) -> Result<Rendered> {
    camera.validate()?;
    if scene_ids.len() != scene.meshes.len() {
        return Err(Error::Shape(format!(
            "{} scene ids for {} meshes",
            scene_ids.len(),
            scene.meshes.len()
        )));
    }
    let (h, w) = camera.image_size;
    let mut out = Rendered {
        image: RgbImage::filled(h, w, BACKGROUND_COLOR),
        scene_mask: LabelMap::zeros(h, w),
        part_mask: LabelMap::zeros(h, w),
        depth: vec![f64::NEG_INFINITY; h * w],
    };
    let mut draw = |vertices: &[Vec3], triangles: &[[usize; 3]], paint: Paint<'_>| {
        let projected: Vec<[f64; 3]> = vertices.iter().map(|&v| camera.project(v)).collect();
        for t in triangles {
            let tri = [projected[t[0]], projected[t[1]], projected[t[2]]];
            let (color, scene_id, part_id) = match paint {
                Paint::Scene(id) => (scene_color(id), id, 0),
                Paint::Body(labels) => {
                    let p = triangle_part(t, labels);
                    (part_color(p), 0, (p + 1) as u16)
                }
            };
            rasterize_triangle(tri, h, w, |idx, z| {
                if z > out.depth[idx] {
                    out.depth[idx] = z;
                    out.image.set(idx, color);
                    out.scene_mask.data[idx] = scene_id;
                    out.part_mask.data[idx] = part_id;
                }
            });
        }
    };
    for (mesh, &id) in scene.meshes.iter().zip(scene_ids) {
        draw(&mesh.vertices, &mesh.triangles, Paint::Scene(id));
    }
    if let Some(view) = body {
        if view.part_labels.len() != view.body.num_vertices() {
            return Err(Error::Shape("part labels do not match body vertices".into()));
        }
        draw(&view.body.vertices, view.triangles, Paint::Body(view.part_labels));
    }
    Ok(out)
}
