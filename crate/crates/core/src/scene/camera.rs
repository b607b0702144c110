//! Pinhole and equirectangular camera models.
//!
//! Frame: right-handed, `+z` forward, `+x` right, `+y` down. Yaw rotates
//! about `y` (positive to the right), pitch is elevation (positive up).
//! Continuous pixel coordinates put the center of pixel `i` at `i + 0.5`.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Direction = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CameraKind {
    Pinhole { horizontal_fov: f64 },
    Equirectangular,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    #[serde(flatten)]
    pub kind: CameraKind,
    pub width: usize,
    pub height: usize,
}

/// Unit direction for yaw/pitch angles.
pub fn angles_to_direction(yaw: f64, pitch: f64) -> Direction {
    let (sp, cp) = pitch.sin_cos();
    let (sy, cy) = yaw.sin_cos();
    [cp * sy, -sp, cp * cy]
}

/// `(yaw, pitch)` of a direction, yaw in `[-π, π)`.
pub fn direction_to_angles(d: Direction) -> (f64, f64) {
    let mut yaw = d[0].atan2(d[2]);
    if yaw >= PI {
        yaw -= 2.0 * PI;
    }
    let pitch = (-d[1]).atan2(d[0].hypot(d[2]));
    (yaw, pitch)
}

impl CameraSpec {
    pub fn pinhole(width: usize, height: usize, horizontal_fov: f64) -> Result<Self> {
        let cam = Self {
            kind: CameraKind::Pinhole { horizontal_fov },
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn equirectangular(width: usize, height: usize) -> Result<Self> {
        let cam = Self {
            kind: CameraKind::Equirectangular,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera resolution must be non-zero"));
        }
        if let CameraKind::Pinhole { horizontal_fov } = self.kind {
            if !(horizontal_fov > 0.0 && horizontal_fov < PI) {
                return Err(Error::invalid(format!(
                    "pinhole field of view {horizontal_fov} outside (0, π)"
                )));
            }
        }
        Ok(())
    }

    pub fn is_panoramic(&self) -> bool {
        matches!(self.kind, CameraKind::Equirectangular)
    }

    fn focal(&self) -> Option<f64> {
        match self.kind {
            CameraKind::Pinhole { horizontal_fov } => {
                Some(0.5 * self.width as f64 / (0.5 * horizontal_fov).tan())
            }
            CameraKind::Equirectangular => None,
        }
    }

    /// Unit ray through continuous image coordinates `(u, v)`.
    pub fn pixel_to_direction(&self, u: f64, v: f64) -> Result<Direction> {
        let (w, h) = (self.width as f64, self.height as f64);
        if !(0.0..w).contains(&u) || !(0.0..h).contains(&v) {
            return Err(Error::invalid(format!(
                "pixel ({u}, {v}) outside {}x{} frame",
                self.width, self.height
            )));
        }
        Ok(match self.focal() {
            None => {
                let yaw = -PI + 2.0 * PI * u / w;
                let pitch = FRAC_PI_2 - PI * v / h;
                angles_to_direction(yaw, pitch)
            }
            Some(f) => {
                let x = (u - 0.5 * w) / f;
                let y = (v - 0.5 * h) / f;
                let n = (x * x + y * y + 1.0).sqrt();
                [x / n, y / n, 1.0 / n]
            }
        })
    }

    /// Continuous coordinates at which `d` is imaged, or `None` when a
    /// pinhole camera does not see it.
    pub fn direction_to_pixel(&self, d: Direction) -> Result<Option<(f64, f64)>> {
        let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "direction {d:?} is not a unit vector (norm {norm})"
            )));
        }
        let (w, h) = (self.width as f64, self.height as f64);
        Ok(match self.focal() {
            None => {
                let (yaw, pitch) = direction_to_angles(d);
                let mut u = (yaw + PI) / (2.0 * PI) * w;
                if u >= w {
                    u -= w;
                }
                let v = ((FRAC_PI_2 - pitch) / PI * h).min(h.next_down());
                Some((u.max(0.0), v.max(0.0)))
            }
            Some(f) => {
                if d[2] <= 0.0 {
                    return Ok(None);
                }
                let u = 0.5 * w + f * d[0] / d[2];
                let v = 0.5 * h + f * d[1] / d[2];
                ((0.0..w).contains(&u) && (0.0..h).contains(&v)).then_some((u, v))
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: Direction, b: Direction, tol: f64) -> bool {
        a.iter().zip(&b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn equirect_center_is_forward() {
        let cam = CameraSpec::equirectangular(256, 64).unwrap();
        let d = cam.pixel_to_direction(128.0, 32.0).unwrap();
        assert!(close(d, [0.0, 0.0, 1.0], 1e-15));
        let (u, v) = cam.direction_to_pixel([0.0, 0.0, 1.0]).unwrap().unwrap();
        assert!((u - 128.0).abs() < 1e-12 && (v - 32.0).abs() < 1e-12);
    }

    #[test]
    fn equirect_first_column_yaw() {
        let cam = CameraSpec::equirectangular(2048, 400).unwrap();
        let d = cam.pixel_to_direction(0.5, 200.0).unwrap();
        let (yaw, pitch) = direction_to_angles(d);
        assert!((yaw - (-PI + PI / 2048.0)).abs() < 1e-12);
        assert!(pitch.abs() < 1e-12);
    }

    #[test]
    fn pinhole_center_and_behind() {
        let cam = CameraSpec::pinhole(128, 64, FRAC_PI_2).unwrap();
        let d = cam.pixel_to_direction(64.0, 32.0).unwrap();
        assert!(close(d, [0.0, 0.0, 1.0], 1e-15));
        assert_eq!(cam.direction_to_pixel([0.0, 0.0, -1.0]).unwrap(), None);
        // right frustum edge at 45 degrees
        let edge = cam.pixel_to_direction(127.999, 32.0).unwrap();
        let (yaw, _) = direction_to_angles(edge);
        assert!((yaw - PI / 4.0).abs() < 1e-4);
    }

    #[test]
    fn invalid_inputs() {
        let cam = CameraSpec::equirectangular(16, 8).unwrap();
        assert!(cam.pixel_to_direction(16.0, 1.0).is_err());
        assert!(cam.pixel_to_direction(-0.1, 1.0).is_err());
        assert!(cam.direction_to_pixel([0.0, 0.0, 0.0]).is_err());
        assert!(CameraSpec::pinhole(8, 8, PI).is_err());
        assert!(CameraSpec::pinhole(8, 8, 0.0).is_err());
        assert!(CameraSpec::equirectangular(0, 8).is_err());
    }

    #[test]
    fn backward_direction_wraps_to_left_edge() {
        let cam = CameraSpec::equirectangular(16, 8).unwrap();
        let (u, _) = cam.direction_to_pixel([0.0, 0.0, -1.0]).unwrap().unwrap();
        assert!(u < 1e-9 || (16.0 - u) < 1e-9);
    }
}
