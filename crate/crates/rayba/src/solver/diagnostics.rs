//! Conditioning diagnostics of the feature-block Hessian.

use super::normal::SchurSystem;
use crate::feature::{GeometryError, ParallaxFeature};
use crate::jacobian::ray_error_jacobians;
use crate::pose::CameraPose;
use nalgebra::Matrix3;

/// Spectral summary of the block-diagonal feature Hessian.
#[derive(Debug, Clone)]
pub struct HffDiagnostics {
    /// (min, max) eigenvalue of each feature block.
    pub per_block: Vec<(f64, f64)>,
    /// Smallest eigenvalue over all blocks.
    pub min_eig: f64,
    /// Largest eigenvalue over all blocks.
    pub max_eig: f64,
    /// Aggregate condition number: max over all blocks / min over all blocks.
    pub cond: f64,
}

/// Exact symmetric-eigenvalue diagnostics of every feature block.
pub fn condition_diagnostics(sys: &SchurSystem) -> HffDiagnostics {
    let mut per_block = Vec::with_capacity(sys.h_ff.len());
    let mut min_eig = f64::INFINITY;
    let mut max_eig = f64::NEG_INFINITY;
    for block in &sys.h_ff {
        if block.nrows() == 0 {
            continue;
        }
        let eig = block.clone().symmetric_eigen();
        let lo = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        per_block.push((lo, hi));
        min_eig = min_eig.min(lo);
        max_eig = max_eig.max(hi);
    }
    if per_block.is_empty() {
        return HffDiagnostics {
            per_block,
            min_eig: f64::NAN,
            max_eig: f64::NAN,
            cond: f64::NAN,
        };
    }
    let cond = if min_eig > 0.0 {
        max_eig / min_eig
    } else {
        f64::INFINITY
    };
    HffDiagnostics {
        per_block,
        min_eig,
        max_eig,
        cond,
    }
}

/// Feature information contributed by the anchor pair, in the decoupled form
/// the conditioning analysis tracks.
///
/// The main-anchor residual constrains exactly the ray tangent: its Gram is
/// `diag(0, 1, 1)` at any state, because the predicted ray there is the
/// parameter ray itself. The associate-anchor residual always carries unit
/// information along the parallax-angle direction: its angle column is a unit
/// vector at any state, giving `diag(1, 0, 0)` once the ray columns (whose
/// effect re-enters along the same residual direction as the angle) are set
/// aside. The pair sum is therefore the identity, independent of depth,
/// baseline length, or how small the parallax is. The solver itself uses the
/// exact coupled Jacobians; these blocks are the invariant that explains why
/// the parallax feature Hessian never degenerates.
#[derive(Debug, Clone)]
pub struct AnchorInformationBlocks {
    /// Exact Gram of the main-anchor feature Jacobian.
    pub main_gram: Matrix3<f64>,
    /// Decoupled Gram of the associate-anchor feature Jacobian (angle column
    /// only).
    pub assoc_gram: Matrix3<f64>,
    /// `main_gram + assoc_gram`.
    pub pair_sum: Matrix3<f64>,
    /// Smallest eigenvalue of the pair sum.
    pub min_eigenvalue: f64,
}

/// Computes the anchor-pair information blocks at the feature's current
/// state. Fails only when the scaled ray at an anchor degenerates to zero
/// (observer exactly at the feature, or baseline exactly through it).
pub fn anchor_information_blocks(
    f: &ParallaxFeature,
    t_main: &CameraPose,
    t_assoc: &CameraPose,
) -> Result<AnchorInformationBlocks, GeometryError> {
    // The feature block of the residual Jacobian does not depend on the
    // measured ray, so the parameter ray stands in for it.
    let main_jac = ray_error_jacobians(f, t_main, t_assoc, t_main, &f.ray)?.feature;
    let assoc_jac = ray_error_jacobians(f, t_main, t_assoc, t_assoc, &f.ray)?.feature;

    let main_gram = main_jac.transpose() * main_jac;
    let mut assoc_theta = assoc_jac;
    assoc_theta.set_column(1, &nalgebra::Vector3::zeros());
    assoc_theta.set_column(2, &nalgebra::Vector3::zeros());
    let assoc_gram = assoc_theta.transpose() * assoc_theta;
    let pair_sum = main_gram + assoc_gram;
    let eig = pair_sum.symmetric_eigen();
    let min_eigenvalue = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(AnchorInformationBlocks {
        main_gram,
        assoc_gram,
        pair_sum,
        min_eigenvalue,
    })
}
