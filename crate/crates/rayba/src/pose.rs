//! Camera poses and their 6-dof retraction.
//!
//! A pose is (rotation, position) in the world frame: a world point maps to
//! camera coordinates via `R^T (x - p)`. Increments are `[dphi, dp]` with a
//! right-multiplicative rotation update `R * Exp(dphi)` and additive position
//! update, so pose Jacobians of ray residuals stay frame-local.

use crate::so3::{exp_so3, Rotation};
use nalgebra::{Vector3, Vector6};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Rotation,
    pub position: Vector3<f64>,
}

impl CameraPose {
    pub fn identity() -> Self {
        CameraPose {
            rotation: Rotation::identity(),
            position: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Rotation, position: Vector3<f64>) -> Self {
        CameraPose { rotation, position }
    }

    /// World point into this camera's local frame.
    pub fn world_to_local(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (x - self.position)
    }

    /// Local point into the world frame.
    pub fn local_to_world(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.position
    }
}

/// Applies a 6-dof increment `d = [dphi, dp]` to a pose.
pub fn retract_pose(t: &CameraPose, d: &Vector6<f64>) -> CameraPose {
    let dphi = Vector3::new(d[0], d[1], d[2]);
    let dp = Vector3::new(d[3], d[4], d[5]);
    CameraPose {
        rotation: t.rotation * exp_so3(&dphi),
        position: t.position + dp,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::so3::log_so3;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    #[test]
    fn zero_increment_is_a_noop() {
        let t = CameraPose::new(
            exp_so3(&Vector3::new(0.2, -0.1, 0.4)),
            Vector3::new(1.0, 2.0, 3.0),
        );
        let t2 = retract_pose(&t, &Vector6::zeros());
        assert_eq!(t, t2);
    }

    #[test]
    fn quarter_turn_about_local_z() {
        let t = CameraPose::identity();
        let d = Vector6::new(0.0, 0.0, PI / 2.0, 0.0, 0.0, 0.0);
        let t2 = retract_pose(&t, &d);
        assert_relative_eq!(t2.rotation * Vector3::x(), Vector3::y(), epsilon = 1e-12);
        assert_eq!(t2.position, Vector3::zeros());
    }

    #[test]
    fn retraction_difference_recovers_small_increments() {
        let t = CameraPose::new(
            exp_so3(&Vector3::new(-0.3, 0.7, 0.1)),
            Vector3::new(0.5, -1.5, 2.0),
        );
        let d = Vector6::new(1e-4, -2e-4, 3e-4, 0.01, -0.02, 0.03);
        let t2 = retract_pose(&t, &d);
        let dphi = log_so3(&(t.rotation.transpose() * t2.rotation));
        let dp = t2.position - t.position;
        assert_relative_eq!(dphi, Vector3::new(d[0], d[1], d[2]), epsilon = 1e-10);
        assert_relative_eq!(dp, Vector3::new(d[3], d[4], d[5]), epsilon = 1e-12);
    }

    #[test]
    fn world_local_round_trip() {
        let t = CameraPose::new(
            exp_so3(&Vector3::new(0.1, 0.2, -0.3)),
            Vector3::new(4.0, 5.0, 6.0),
        );
        let x = Vector3::new(-1.0, 0.5, 2.5);
        assert_relative_eq!(t.local_to_world(&t.world_to_local(&x)), x, epsilon = 1e-12);
    }
}
