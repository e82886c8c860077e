//! Weak-perspective projection and the Gaussian point-splat contact renderer.
//!
//! Each vertex `i` at pixel position `p_i` with contact value `c_i` in `[0, 1]`
//! contributes the kernel `k_i(q) = exp(-|q - p_i|^2 / 2 sigma^2)` at pixel
//! center `q`. Contributions are combined with a soft-or,
//! `map(q) = 1 - prod_i (1 - k_i(q) c_i)`, which keeps the map in `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::Vec3;
use crate::synth::Camera;

/// Projects camera-frame vertices to `[column, row, depth]` pixel coordinates.
pub fn project_weak_perspective(vertices: &[Vec3], camera: &Camera) -> Result<Vec<[f64; 3]>> {
    camera.validate()?;
    Ok(vertices.iter().map(|&v| camera.project(v)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplatOptions {
    /// Kernel width in pixels.
    pub sigma: f64,
    /// Kernels are evaluated only within this many sigmas of the point;
    /// `None` evaluates every pixel exactly.
    pub cutoff_sigmas: Option<f64>,
    /// Drop vertices hidden behind a nearer vertex in the same pixel.
    pub visibility: bool,
    /// Depth slack (scene units) for the visibility test.
    pub visibility_tolerance: f64,
}

impl Default for SplatOptions {
    fn default() -> Self {
        Self {
            sigma: 1.5,
            cutoff_sigmas: Some(6.0),
            visibility: false,
            visibility_tolerance: 0.03,
        }
    }
}

impl SplatOptions {
    fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "splat sigma must be positive, got {}",
                self.sigma
            )));
        }
        if let Some(c) = self.cutoff_sigmas {
            if !(c > 0.0) {
                return Err(Error::InvalidArgument(format!("cutoff must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// H x W soft contact map in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderedContactMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl RenderedContactMap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

/// Precomputed sparse kernels for fixed point positions. The body and camera
/// are constants during training, so a plan is built once per sample and
/// reused for every forward and backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatPlan {
    height: usize,
    width: usize,
    /// Per vertex, `(pixel index, kernel weight)`.
    kernels: Vec<Vec<(usize, f64)>>,
}

fn visible_mask(points: &[[f64; 3]], h: usize, w: usize, tol: f64) -> Vec<bool> {
    let cell = |p: &[f64; 3]| {
        let (c, r) = (p[0].round(), p[1].round());
        (c >= 0.0 && r >= 0.0 && (c as usize) < w && (r as usize) < h).then(|| r as usize * w + c as usize)
    };
    let mut front = vec![f64::NEG_INFINITY; h * w];
    for p in points {
        if let Some(i) = cell(p) {
            front[i] = front[i].max(p[2]);
        }
    }
    points
        .iter()
        .map(|p| cell(p).is_none_or(|i| p[2] >= front[i] - tol))
        .collect()
}

impl SplatPlan {
    pub fn new(points: &[[f64; 3]], camera: &Camera, options: &SplatOptions) -> Result<Self> {
        camera.validate()?;
        options.validate()?;
        let (h, w) = camera.image_size;
        let visible = if options.visibility {
            visible_mask(points, h, w, options.visibility_tolerance)
        } else {
            vec![true; points.len()]
        };
        let inv = 1.0 / (2.0 * options.sigma * options.sigma);
        let kernels = points
            .iter()
            .zip(&visible)
            .map(|(p, &vis)| {
                let mut out = Vec::new();
                if !vis || !p[0].is_finite() || !p[1].is_finite() {
                    return out;
                }
                let (r0, r1, c0, c1) = match options.cutoff_sigmas {
                    Some(k) => {
                        let reach = k * options.sigma;
                        (
                            (p[1] - reach).ceil().max(0.0),
                            (p[1] + reach).floor().min(h as f64 - 1.0),
                            (p[0] - reach).ceil().max(0.0),
                            (p[0] + reach).floor().min(w as f64 - 1.0),
                        )
                    }
                    None => (0.0, h as f64 - 1.0, 0.0, w as f64 - 1.0),
                };
                if r0 > r1 || c0 > c1 {
                    return out;
                }
                for row in r0 as usize..=r1 as usize {
                    let dy = row as f64 - p[1];
                    for col in c0 as usize..=c1 as usize {
                        let dx = col as f64 - p[0];
                        let k = (-(dx * dx + dy * dy) * inv).exp();
                        if k > 0.0 {
                            out.push((row * w + col, k));
                        }
                    }
                }
                out
            })
            .collect();
        Ok(Self {
            height: h,
            width: w,
            kernels,
        })
    }

    pub fn num_points(&self) -> usize {
        self.kernels.len()
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn check_values(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.kernels.len() {
            return Err(Error::Shape(format!(
                "{} contact values for {} points",
                values.len(),
                self.kernels.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| v.is_nan()) {
            return Err(Error::NonFinite(format!("contact value {v}")));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("contact value {v} outside [0, 1]")));
        }
        Ok(())
    }

    /// Per pixel, the product of the non-zero factors `1 - k c` and the
    /// number of zero factors.
    fn factors(&self, values: &[f64]) -> (Vec<f64>, Vec<u32>) {
        let n = self.height * self.width;
        let mut prod = vec![1.0; n];
        let mut zeros = vec![0u32; n];
        for (ker, &c) in self.kernels.iter().zip(values) {
            if c == 0.0 {
                continue;
            }
            for &(i, k) in ker {
                let f = 1.0 - k * c;
                if f == 0.0 {
                    zeros[i] += 1;
                } else {
                    prod[i] *= f;
                }
            }
        }
        (prod, zeros)
    }

    pub fn render(&self, values: &[f64]) -> Result<RenderedContactMap> {
        self.check_values(values)?;
        let (prod, zeros) = self.factors(values);
        Ok(RenderedContactMap {
            height: self.height,
            width: self.width,
            values: prod
                .iter()
                .zip(&zeros)
                .map(|(&p, &z)| if z > 0 { 1.0 } else { (1.0 - p).clamp(0.0, 1.0) })
                .collect(),
        })
    }

    /// Gradient of `sum_q grad_map[q] * map[q]` with respect to the values.
    pub fn backward_values(&self, values: &[f64], grad_map: &[f64]) -> Result<Vec<f64>> {
        self.check_values(values)?;
        if grad_map.len() != self.height * self.width {
            return Err(Error::Shape("map gradient does not match image size".into()));
        }
        let (prod, zeros) = self.factors(values);
        Ok(self
            .kernels
            .iter()
            .zip(values)
            .map(|(ker, &c)| {
                ker.iter()
                    .map(|&(i, k)| {
                        let f = 1.0 - k * c;
                        // prod over j != i of (1 - k_j c_j)
                        let others = if f == 0.0 {
                            if zeros[i] > 1 {
                                0.0
                            } else {
                                prod[i]
                            }
                        } else if c == 0.0 {
                            if zeros[i] > 0 {
                                0.0
                            } else {
                                prod[i]
                            }
                        } else if zeros[i] > 0 {
                            0.0
                        } else {
                            prod[i] / f
                        };
                        grad_map[i] * k * others
                    })
                    .sum()
            })
            .collect())
    }
}

/// Renders per-vertex contact values at projected points.
pub fn splat_render(
    points: &[[f64; 3]],
    values: &[f64],
    camera: &Camera,
    options: &SplatOptions,
) -> Result<RenderedContactMap> {
    SplatPlan::new(points, camera, options)?.render(values)
}

/// Gradients of `sum_q grad_map[q] * map[q]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatGrad {
    pub values: Vec<f64>,
    /// `[d/d column, d/d row]` per point.
    pub points: Vec<[f64; 2]>,
}

/// Reverse-mode gradient of the splat map with respect to values and point
/// positions. Visibility, when enabled, is treated as piecewise constant.
pub fn splat_backward(
    points: &[[f64; 3]],
    values: &[f64],
    camera: &Camera,
    options: &SplatOptions,
    grad_map: &[f64],
) -> Result<SplatGrad> {
    let plan = SplatPlan::new(points, camera, options)?;
    let grad_values = plan.backward_values(values, grad_map)?;
    let (prod, zeros) = plan.factors(values);
    let s2 = options.sigma * options.sigma;
    let w = plan.width;
    let grad_points = plan
        .kernels
        .iter()
        .zip(values)
        .zip(points)
        .map(|((ker, &c), p)| {
            let mut g = [0.0, 0.0];
            if c == 0.0 {
                return g;
            }
            for &(i, k) in ker {
                let f = 1.0 - k * c;
                let others = if f == 0.0 {
                    if zeros[i] > 1 {
                        0.0
                    } else {
                        prod[i]
                    }
                } else if zeros[i] > 0 {
                    0.0
                } else {
                    prod[i] / f
                };
                // dmap/dk = c * others; dk/dp = k (q - p) / sigma^2
                let common = grad_map[i] * c * others * k / s2;
                g[0] += common * ((i % w) as f64 - p[0]);
                g[1] += common * ((i / w) as f64 - p[1]);
            }
            g
        })
        .collect();
    Ok(SplatGrad {
        values: grad_values,
        points: grad_points,
    })
}
