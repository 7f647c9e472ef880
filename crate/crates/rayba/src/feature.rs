//! Feature parameterizations: parallax-angle, Euclidean XYZ, inverse-depth.
//!
//! A parallax feature stores no depth. It keeps the unit ray `n` toward the
//! feature in its main anchor's frame and the parallax angle `theta` subtended
//! at the feature by the two anchor centers. The implied world point follows
//! from the sine rule over the anchor triangle and scales with the anchor
//! baseline, so the parameter uncertainty stays bounded for far and
//! near-collinear features alike.

use crate::pose::CameraPose;
use crate::ray::{retract_ray, UnitRay};
use nalgebra::{Vector2, Vector3};
use thiserror::Error;

/// Lower clamp for theta; the mirrored bound pi - this applies at the top.
pub const THETA_CLAMP: f64 = 1e-10;

/// Parallax below which the implied depth is treated as undefined.
pub const DEGENERATE_SIN_THETA: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("degenerate parallax: |sin theta| = {sin_theta:e} <= {DEGENERATE_SIN_THETA:e}")]
    DegenerateParallax { sin_theta: f64 },
    #[error("anchors coincide: |p_main - p_assoc| = 0")]
    CoincidentAnchors,
    #[error("point coincides with an anchor center")]
    CoincidentPoint,
    #[error("estimated ray has zero norm (camera at the feature point)")]
    ZeroRay,
    #[error("point lies on the image plane of the observing camera (local z = 0)")]
    AtImagePlane,
}

/// A feature parameterized by parallax angle and main-anchor ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParallaxFeature {
    /// Parallax angle at the feature between the rays to the two anchors,
    /// kept inside (0, pi) by clamped retraction.
    pub theta: f64,
    /// Unit ray from the main anchor center toward the feature, in the main
    /// anchor's local frame.
    pub ray: UnitRay,
    pub main_anchor: usize,
    pub assoc_anchor: usize,
    /// How many retractions had to clamp theta back into (0, pi).
    pub theta_clamp_events: u32,
}

impl ParallaxFeature {
    pub fn new(theta: f64, ray: UnitRay, main_anchor: usize, assoc_anchor: usize) -> Self {
        assert_ne!(main_anchor, assoc_anchor, "anchors must be distinct poses");
        ParallaxFeature {
            theta,
            ray,
            main_anchor,
            assoc_anchor,
            theta_clamp_events: 0,
        }
    }

    /// The (cos theta, sin theta, n) view of the parameters.
    pub fn components(&self) -> (f64, f64, &UnitRay) {
        (self.theta.cos(), self.theta.sin(), &self.ray)
    }
}

/// Inverse-depth feature: bearing fixed from the first observation, only the
/// reciprocal depth is free. `rho` may pass through zero during iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseDepthFeature {
    pub anchor: usize,
    pub ray: UnitRay,
    pub rho: f64,
}

impl InverseDepthFeature {
    /// Implied world point given the anchor pose.
    pub fn to_point(&self, anchor: &CameraPose) -> Vector3<f64> {
        anchor.position + anchor.rotation * self.ray.as_vector() / self.rho
    }
}

/// Angle alpha between the anchor baseline `p_m - p_a` and the world ray
/// `R_m n`, plus the baseline length. Zero-length baselines are an error.
fn baseline_angle(
    f: &ParallaxFeature,
    t_main: &CameraPose,
    t_assoc: &CameraPose,
) -> Result<(f64, f64, Vector3<f64>), GeometryError> {
    let a = t_main.position - t_assoc.position;
    let len = a.norm();
    if len == 0.0 {
        return Err(GeometryError::CoincidentAnchors);
    }
    let w = t_main.rotation * f.ray.as_vector();
    let alpha = (a.dot(&w) / len).clamp(-1.0, 1.0).acos();
    Ok((alpha, len, w))
}

/// Local depth of the feature in the main anchor frame, by the sine rule:
/// `d = sin(alpha - theta) / sin(theta) * |p_m - p_a|`.
pub fn feature_depth(
    f: &ParallaxFeature,
    t_main: &CameraPose,
    t_assoc: &CameraPose,
) -> Result<f64, GeometryError> {
    let sin_theta = f.theta.sin();
    if sin_theta.abs() <= DEGENERATE_SIN_THETA {
        return Err(GeometryError::DegenerateParallax { sin_theta });
    }
    let (alpha, len, _) = baseline_angle(f, t_main, t_assoc)?;
    Ok((alpha - f.theta).sin() / sin_theta * len)
}

/// World position implied by a parallax feature: `f = d R_m n + p_m`.
pub fn feature_to_point(
    f: &ParallaxFeature,
    t_main: &CameraPose,
    t_assoc: &CameraPose,
) -> Result<Vector3<f64>, GeometryError> {
    let d = feature_depth(f, t_main, t_assoc)?;
    Ok(t_main.position + (t_main.rotation * f.ray.as_vector()) * d)
}

/// Parallax parameterization of a world point for the given anchor pair.
pub fn point_to_feature(
    point: &Vector3<f64>,
    main_anchor: usize,
    assoc_anchor: usize,
    t_main: &CameraPose,
    t_assoc: &CameraPose,
) -> Result<ParallaxFeature, GeometryError> {
    let rm = point - t_main.position;
    let ra = point - t_assoc.position;
    if rm.norm() == 0.0 || ra.norm() == 0.0 {
        return Err(GeometryError::CoincidentPoint);
    }
    let ray = UnitRay::normalize(t_main.rotation.transpose() * rm);
    let theta = (rm.dot(&ra) / (rm.norm() * ra.norm())).clamp(-1.0, 1.0).acos();
    Ok(ParallaxFeature::new(theta, ray, main_anchor, assoc_anchor))
}

/// The observation ray toward the feature from position `p_obs`, scaled by
/// `sin(theta)`:
///
/// `N = sin(alpha - theta) |p_m - p_a| R_m n + sin(theta) (p_m - p_obs)`
///
/// which equals `sin(theta) (f - p_obs)` wherever the implied point is
/// defined, but stays finite at zero parallax and needs no division.
pub fn scaled_ray(
    f: &ParallaxFeature,
    t_main: &CameraPose,
    t_assoc: &CameraPose,
    p_obs: &Vector3<f64>,
) -> Vector3<f64> {
    let a = t_main.position - t_assoc.position;
    let w = t_main.rotation * f.ray.as_vector();
    let (cos_t, sin_t) = (f.theta.cos(), f.theta.sin());
    // sin(alpha - theta) * |a| = cos(theta) |a x w| - sin(theta) (a . w)
    let coeff = cos_t * a.cross(&w).norm() - sin_t * a.dot(&w);
    w * coeff + (t_main.position - p_obs) * sin_t
}

/// Retracts the feature: `theta += dtheta`, ray rotated in its tangent plane.
/// Theta leaving (0, pi) is clamped and counted, never an error.
pub fn retract_feature(f: &ParallaxFeature, df: &Vector3<f64>) -> ParallaxFeature {
    let mut out = *f;
    let theta = f.theta + df[0];
    let clamped = theta.clamp(THETA_CLAMP, std::f64::consts::PI - THETA_CLAMP);
    if clamped != theta {
        out.theta_clamp_events += 1;
    }
    out.theta = clamped;
    out.ray = retract_ray(&f.ray, &Vector2::new(df[1], df[2]));
    out
}
