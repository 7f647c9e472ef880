//! Bundle adjustment with parallax-angle features on manifold.
//!
//! The crate provides:
//!
//! - rotation-group and unit-ray primitives with retractions ([`so3`],
//!   [`ray`], [`pose`]);
//! - feature parameterizations (parallax angle, XYZ, inverse depth), the
//!   ray-direction and pixel residuals, and their exact Jacobians
//!   ([`feature`], [`residual`], [`jacobian`]);
//! - a block-sparse nonlinear least-squares engine with Schur complement
//!   over features and Gauss-Newton / Levenberg-Marquardt / dogleg steps
//!   ([`solver`]);
//! - a global initialization pipeline: epipolar pairs, chordal rotation
//!   averaging, rotation-only feature initialization, a convex
//!   position-bootstrap QP, and a convex position-only pose graph ([`init`]);
//! - dataset ingestion (BAL format), a synthetic scene generator with
//!   pathological features, similarity alignment, and CSV/PLY export
//!   ([`io`]).
//!
//! Start with the runnable examples (`cargo run --example simulate_scene`)
//! or the `rayba` binary, which exposes each pipeline stage as a subcommand.

pub mod camera;
pub mod feature;
pub mod jacobian;
pub mod pose;
pub mod problem;
pub mod ray;
pub mod residual;
pub mod so3;
pub mod solver;

pub use camera::{CameraIntrinsics, Observation};
pub use feature::{GeometryError, InverseDepthFeature, ParallaxFeature};
pub use pose::CameraPose;
pub use problem::{BaProblem, FeatureSet, Gauge, Intrinsics, Parameterization};
pub use ray::UnitRay;
pub use so3::Rotation;
