//! Rotation-group primitives: skew operator, exponential and logarithm maps.
//!
//! Rotations are stored as plain 3x3 matrices rather than quaternions so that
//! solver code can form products and transposes without conversions. Validity
//! (orthonormality, det +1) is an invariant of the constructors, checkable via
//! [`Rotation::is_valid`].

use nalgebra::{Matrix3, Vector3};

/// Angle below which Rodrigues terms switch to their second-order series.
pub const SMALL_ANGLE: f64 = 1e-8;

/// A 3D rotation matrix (special orthogonal, det +1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation {
    m: Matrix3<f64>,
}

/// Which branch `log_so3_with_branch` took.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogBranch {
    /// Generic angle, standard formula.
    Generic,
    /// Angle below [`SMALL_ANGLE`], series expansion.
    SmallAngle,
    /// Angle at or next to pi; axis extracted from R + I.
    NearPi,
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation {
            m: Matrix3::identity(),
        }
    }

    /// Wraps a matrix that is already known to be a rotation.
    ///
    /// No orthonormalization is performed; callers constructing from raw data
    /// should check [`is_valid`](Self::is_valid) or go through [`exp_so3`].
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation { m }
    }

    /// Nearest rotation to an arbitrary matrix, by SVD with sign correction.
    pub fn project(m: &Matrix3<f64>) -> Self {
        let svd = m.svd(true, true);
        let u = svd.u.expect("svd u");
        let vt = svd.v_t.expect("svd vt");
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            // Flip the singular direction with the smallest singular value.
            let mut u2 = u;
            u2.column_mut(2).neg_mut();
            r = u2 * vt;
        }
        Rotation { m: r }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn transpose(&self) -> Rotation {
        Rotation { m: self.m.transpose() }
    }

    /// Orthonormality and determinant check at the given tolerance.
    pub fn is_valid(&self, tol: f64) -> bool {
        let ortho = (self.m.transpose() * self.m - Matrix3::identity()).norm();
        ortho <= tol && (self.m.determinant() - 1.0).abs() <= tol
    }

    /// Rotation angle in [0, pi].
    pub fn angle(&self) -> f64 {
        let c = ((self.m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }
}

impl std::ops::Mul<Rotation> for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation { m: self.m * rhs.m }
    }
}

impl std::ops::Mul<&Vector3<f64>> for Rotation {
    type Output = Vector3<f64>;
    fn mul(self, rhs: &Vector3<f64>) -> Vector3<f64> {
        self.m * rhs
    }
}

impl std::ops::Mul<Vector3<f64>> for Rotation {
    type Output = Vector3<f64>;
    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.m * rhs
    }
}

/// Skew-symmetric (cross-product) matrix: `skew(x) * y == x.cross(&y)`.
#[rustfmt::skip]
pub fn skew(x: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        0.0,  -x.z,  x.y,
        x.z,   0.0, -x.x,
       -x.y,   x.x,  0.0,
    )
}

/// Exponential map from an axis-angle vector to a rotation (Rodrigues).
pub fn exp_so3(w: &Vector3<f64>) -> Rotation {
    let theta2 = w.norm_squared();
    let s = skew(w);
    let (a, b) = if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        // sin(t)/t and (1-cos(t))/t^2 to second order
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Rotation {
        m: Matrix3::identity() + a * s + b * (s * s),
    }
}

/// Logarithm map: axis-angle vector of a rotation, with norm in [0, pi].
pub fn log_so3(r: &Rotation) -> Vector3<f64> {
    log_so3_with_branch(r).0
}

/// As [`log_so3`], also reporting which numerical branch was used.
///
/// At angle pi the axis sign is ambiguous; the extraction from R + I picks the
/// sign whose largest-magnitude component is positive.
pub fn log_so3_with_branch(r: &Rotation) -> (Vector3<f64>, LogBranch) {
    let m = &r.m;
    let cos_theta = ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    // vee of the antisymmetric part, = sin(theta) * axis
    let v = Vector3::new(
        (m[(2, 1)] - m[(1, 2)]) / 2.0,
        (m[(0, 2)] - m[(2, 0)]) / 2.0,
        (m[(1, 0)] - m[(0, 1)]) / 2.0,
    );
    if theta < SMALL_ANGLE {
        (v * (1.0 + theta * theta / 6.0), LogBranch::SmallAngle)
    } else if cos_theta <= -1.0 + 1e-9 {
        // Near pi: R + I = (1 + cos)I + ... ~ 2 a a^T with a the axis. Take the
        // column with the largest diagonal entry of R + I.
        let b = m + Matrix3::identity();
        let k = (0..3)
            .max_by(|&i, &j| b[(i, i)].partial_cmp(&b[(j, j)]).unwrap())
            .unwrap();
        let col = b.column(k).into_owned();
        let mut axis = col / col.norm();
        // Sign convention: largest-magnitude component positive.
        let imax = (0..3)
            .max_by(|&i, &j| axis[i].abs().partial_cmp(&axis[j].abs()).unwrap())
            .unwrap();
        if axis[imax] < 0.0 {
            axis = -axis;
        }
        // Off the exact-pi point sin(theta) is nonzero; align with the
        // antisymmetric part so exp round-trips.
        if v.dot(&axis) < 0.0 && v.norm() > 1e-12 {
            axis = -axis;
        }
        (axis * theta, LogBranch::NearPi)
    } else {
        (v * (theta / theta.sin()), LogBranch::Generic)
    }
}
