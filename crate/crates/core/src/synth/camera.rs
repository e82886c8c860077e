use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::Vec3;

/// Weak-perspective camera with identity rotation.
///
/// A camera-frame point `(x, y, z)` maps to normalized image coordinates
/// `(s x + t_x, s y + t_y)`, where `[-1, 1]` spans the image and `+y` is up.
/// Pixel coordinates are y-down with pixel centers on integers.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub scale: f64,
    pub translation: [f64; 2],
    /// `(height, width)` in pixels.
    pub image_size: (usize, usize),
}

pub const MIN_IMAGE_SIDE: usize = 8;

impl Camera {
    pub fn new(scale: f64, translation: [f64; 2], image_size: (usize, usize)) -> Result<Self> {
        let cam = Self {
            scale,
            translation,
            image_size,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "camera scale must be positive, got {}",
                self.scale
            )));
        }
        if self.translation.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidArgument("camera translation is not finite".into()));
        }
        let (h, w) = self.image_size;
        if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
            return Err(Error::InvalidArgument(format!(
                "image size {h}x{w} below the {MIN_IMAGE_SIDE}px minimum"
            )));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.image_size.0
    }

    pub fn width(&self) -> usize {
        self.image_size.1
    }

    pub fn normalized(&self, p: Vec3) -> [f64; 2] {
        [
            self.scale * p[0] + self.translation[0],
            self.scale * p[1] + self.translation[1],
        ]
    }

    /// Normalized coordinates to `(column, row)` pixel coordinates.
    pub fn normalized_to_pixel(&self, uv: [f64; 2]) -> [f64; 2] {
        let (h, w) = (self.height() as f64, self.width() as f64);
        [(uv[0] + 1.0) * 0.5 * w - 0.5, (1.0 - uv[1]) * 0.5 * h - 0.5]
    }

    /// `(column, row, depth)`; larger depth is closer to the viewer.
    pub fn project(&self, p: Vec3) -> [f64; 3] {
        let px = self.normalized_to_pixel(self.normalized(p));
        [px[0], px[1], p[2]]
    }

    /// Pixels per meter along either image axis.
    pub fn pixels_per_meter(&self) -> [f64; 2] {
        [
            0.5 * self.width() as f64 * self.scale,
            0.5 * self.height() as f64 * self.scale,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_degenerate() {
        assert!(Camera::new(0.0, [0.0, 0.0], (16, 16)).is_err());
        assert!(Camera::new(1.0, [0.0, 0.0], (4, 16)).is_err());
        assert!(Camera::new(1.0, [f64::NAN, 0.0], (16, 16)).is_err());
    }

    #[test]
    fn corners_map_to_image_edges() {
        let cam = Camera::new(1.0, [0.0, 0.0], (10, 20)).unwrap();
        assert_eq!(cam.normalized_to_pixel([-1.0, 1.0]), [-0.5, -0.5]);
        assert_eq!(cam.normalized_to_pixel([1.0, -1.0]), [19.5, 9.5]);
        assert_eq!(cam.normalized_to_pixel([0.0, 0.0]), [9.5, 4.5]);
    }
}
