//! Residual functions: ray-direction error and pixel reprojection error.
//!
//! The ray-direction residual compares unit vectors in the world frame, so its
//! norm is `2 sin(beta/2)` for view angle `beta` and never exceeds 2. Unlike
//! the pixel residual it stays continuous when a feature crosses the observing
//! camera's image plane.

use crate::camera::CameraIntrinsics;
use crate::feature::{scaled_ray, GeometryError, InverseDepthFeature, ParallaxFeature};
use crate::pose::CameraPose;
use crate::ray::UnitRay;
use nalgebra::{Vector2, Vector3};

/// Norm threshold below which the estimated ray is considered zero.
pub const ZERO_RAY_EPS: f64 = 1e-14;

/// Ray-direction residual in the world frame:
/// `e = normalize(N) - R_obs * measured_ray`.
pub fn ray_error(
    f: &ParallaxFeature,
    t_main: &CameraPose,
    t_assoc: &CameraPose,
    t_obs: &CameraPose,
    measured_ray: &UnitRay,
) -> Result<Vector3<f64>, GeometryError> {
    let n = scaled_ray(f, t_main, t_assoc, &t_obs.position);
    let norm = n.norm();
    if norm <= ZERO_RAY_EPS {
        return Err(GeometryError::ZeroRay);
    }
    Ok(n / norm - t_obs.rotation * measured_ray.as_vector())
}

/// Ray-direction residual for an explicit world point (XYZ and inverse-depth
/// baselines share this form).
pub fn point_ray_error(
    point: &Vector3<f64>,
    t_obs: &CameraPose,
    measured_ray: &UnitRay,
) -> Result<Vector3<f64>, GeometryError> {
    let n = point - t_obs.position;
    let norm = n.norm();
    if norm <= ZERO_RAY_EPS {
        return Err(GeometryError::ZeroRay);
    }
    Ok(n / norm - t_obs.rotation * measured_ray.as_vector())
}

/// Pixel reprojection residual plus a behind-camera diagnostic flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelResidual {
    pub residual: Vector2<f64>,
    /// The point projects through the pinhole model but sits at negative
    /// local depth; the residual is finite yet sign-flipped.
    pub behind_camera: bool,
}

/// Conventional pixel residual: `e = K(pi(R^T (f - p))) - u`.
pub fn reprojection_error(
    point: &Vector3<f64>,
    t_obs: &CameraPose,
    pixel: &Vector2<f64>,
    k: &CameraIntrinsics,
) -> Result<PixelResidual, GeometryError> {
    let q = t_obs.world_to_local(point);
    if q.z == 0.0 {
        return Err(GeometryError::AtImagePlane);
    }
    let n = Vector2::new(q.x / q.z, q.y / q.z);
    Ok(PixelResidual {
        residual: k.project_normalized(&n) - pixel,
        behind_camera: q.z < 0.0,
    })
}

/// Pixel residual of an XYZ-parameterized feature (alias for the conventional
/// form, named for the baseline comparisons).
pub fn xyz_error(
    point: &Vector3<f64>,
    t_obs: &CameraPose,
    pixel: &Vector2<f64>,
    k: &CameraIntrinsics,
) -> Result<PixelResidual, GeometryError> {
    reprojection_error(point, t_obs, pixel, k)
}

/// Pixel residual of an inverse-depth feature: the anchored ray and
/// reciprocal depth are composed into a world point, then projected.
pub fn idp_error(
    f: &InverseDepthFeature,
    t_anchor: &CameraPose,
    t_obs: &CameraPose,
    pixel: &Vector2<f64>,
    k: &CameraIntrinsics,
) -> Result<PixelResidual, GeometryError> {
    reprojection_error(&f.to_point(t_anchor), t_obs, pixel, k)
}
