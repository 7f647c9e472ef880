//! Unit observation rays and their tangent-plane retraction.
//!
//! A ray direction lives on the unit sphere; increments are 2-vectors in the
//! tangent plane, mapped back by rotating the ray about an in-plane axis. The
//! tangent basis `A` satisfies `[A n] in SO(3)` so the pair (basis, ray) forms
//! a right-handed frame.

use crate::so3::{exp_so3, skew, Rotation};
use nalgebra::{Matrix3, Matrix3x2, Vector2, Vector3};

/// A unit-norm direction vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitRay {
    v: Vector3<f64>,
}

impl UnitRay {
    /// Normalizes a nonzero vector into a ray. Panics on the zero vector.
    pub fn normalize(v: Vector3<f64>) -> Self {
        let n = v.norm();
        assert!(n > 0.0, "cannot normalize the zero vector into a ray");
        UnitRay { v: v / n }
    }

    /// Normalizes, returning `None` when the norm is at or below `eps`.
    pub fn try_normalize(v: Vector3<f64>, eps: f64) -> Option<Self> {
        let n = v.norm();
        if n <= eps {
            None
        } else {
            Some(UnitRay { v: v / n })
        }
    }

    /// Wraps a vector already known to be unit norm.
    pub fn from_unit_unchecked(v: Vector3<f64>) -> Self {
        UnitRay { v }
    }

    pub fn as_vector(&self) -> &Vector3<f64> {
        &self.v
    }

    pub fn into_vector(self) -> Vector3<f64> {
        self.v
    }

    /// Angle to another ray, in [0, pi].
    pub fn angle_to(&self, other: &UnitRay) -> f64 {
        self.v.dot(&other.v).clamp(-1.0, 1.0).acos()
    }
}

/// Orthonormal 3x2 tangent basis at a ray, with `[A n]` special-orthogonal.
///
/// Construction picks the canonical axis least aligned with the ray and
/// orthonormalizes by two cross products, so the basis is deterministic and
/// smooth away from the axis-switching sets.
pub fn tangent_basis(n: &UnitRay) -> Matrix3x2<f64> {
    let v = n.as_vector();
    let k = (0..3)
        .min_by(|&i, &j| v[i].abs().partial_cmp(&v[j].abs()).unwrap())
        .unwrap();
    let mut e = Vector3::zeros();
    e[k] = 1.0;
    let b1 = e.cross(v).normalize();
    let b2 = v.cross(&b1);
    Matrix3x2::from_columns(&[b1, b2])
}

/// Rotates a ray by a tangent-plane increment: `Exp(A dn) * n`.
pub fn retract_ray(n: &UnitRay, dn: &Vector2<f64>) -> UnitRay {
    if dn.x == 0.0 && dn.y == 0.0 {
        return *n;
    }
    let a = tangent_basis(n);
    let r = exp_so3(&(a * dn));
    // Renormalize to keep the unit invariant exact under accumulation.
    UnitRay::normalize(r * n.as_vector())
}

/// Derivative of `retract_ray(n, dn)` with respect to `dn` at `dn = 0`,
/// i.e. `-skew(n) * A`, a 3x2 matrix with orthonormal columns.
pub fn ray_retraction_jacobian(n: &UnitRay) -> Matrix3x2<f64> {
    let a = tangent_basis(n);
    -skew(n.as_vector()) * a
}

/// Checks that `[A n]` is special orthogonal within `tol`.
pub fn basis_is_valid(a: &Matrix3x2<f64>, n: &UnitRay, tol: f64) -> bool {
    let m = Matrix3::from_columns(&[a.column(0).into(), a.column(1).into(), *n.as_vector()]);
    Rotation::from_matrix_unchecked(m).is_valid(tol)
}
