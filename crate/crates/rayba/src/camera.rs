//! Pinhole intrinsics and image observations.

use crate::ray::UnitRay;
use nalgebra::{Vector2, Vector3};

/// Pinhole intrinsics; the radial coefficients are carried only for dataset
/// ingestion (applied at import, never estimated).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub k1: f64,
    pub k2: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        assert!(fx > 0.0 && fy > 0.0, "focal lengths must be positive");
        CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            k1: 0.0,
            k2: 0.0,
        }
    }

    pub fn with_distortion(mut self, k1: f64, k2: f64) -> Self {
        self.k1 = k1;
        self.k2 = k2;
        self
    }

    /// Pixel of a normalized image point (x/z, y/z), pinhole only.
    pub fn project_normalized(&self, n: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * n.x + self.cx, self.fy * n.y + self.cy)
    }

    /// Normalized image point of a pixel: K^-1 applied to (u, 1).
    pub fn unproject(&self, u: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new((u.x - self.cx) / self.fx, (u.y - self.cy) / self.fy)
    }

    /// Unit direction in the camera frame through the pixel `u`:
    /// `normalize(K^-1 [u; 1])`. Pinhole only; distorted data must be
    /// undistorted at ingestion.
    pub fn pixel_ray(&self, u: &Vector2<f64>) -> UnitRay {
        let n = self.unproject(u);
        UnitRay::normalize(Vector3::new(n.x, n.y, 1.0))
    }
}

/// One image measurement: pixel plus the cached unit ray it defines.
///
/// The measured ray is computed once at ingestion so that residual evaluation
/// never re-inverts the intrinsics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub pose_id: usize,
    pub feature_id: usize,
    pub pixel: Vector2<f64>,
    pub measured_ray: UnitRay,
    /// Isotropic residual weight, 1 by default.
    pub weight: f64,
}

impl Observation {
    pub fn new(pose_id: usize, feature_id: usize, pixel: Vector2<f64>, k: &CameraIntrinsics) -> Self {
        Observation {
            pose_id,
            feature_id,
            pixel,
            measured_ray: k.pixel_ray(&pixel),
            weight: 1.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn pixel_ray_matches_unprojection() {
        let k = CameraIntrinsics::new(500.0, 480.0, 320.0, 240.0);
        let u = Vector2::new(400.0, 200.0);
        let ray = k.pixel_ray(&u);
        let n = k.unproject(&u);
        let expect = Vector3::new(n.x, n.y, 1.0).normalize();
        assert_relative_eq!(ray.as_vector(), &expect, epsilon = 1e-15);
        // Projecting the ray back recovers the pixel.
        let v = ray.as_vector();
        let back = k.project_normalized(&Vector2::new(v.x / v.z, v.y / v.z));
        assert_relative_eq!(back, u, epsilon = 1e-9);
    }

    #[test]
    fn principal_point_ray_is_the_optical_axis() {
        let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0);
        let ray = k.pixel_ray(&Vector2::new(320.0, 240.0));
        assert_relative_eq!(ray.as_vector(), &Vector3::z(), epsilon = 1e-15);
    }
}
