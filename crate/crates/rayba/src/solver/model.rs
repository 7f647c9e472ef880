//! Abstraction the least-squares engine optimizes over.
//!
//! A model owns its state, exposes pose-like blocks and optional per-feature
//! blocks, and evaluates weighted residuals with Jacobian blocks in a
//! deterministic order. The bundle-adjustment parameterizations and the
//! position-only initialization stage are both models.

use crate::problem::ProblemError;
use nalgebra::{DMatrix, DVector};

/// One evaluated residual with its Jacobian blocks.
#[derive(Debug, Clone)]
pub struct ObsEval {
    /// Feature block this residual couples to, if any.
    pub feature: Option<usize>,
    /// Weighted residual.
    pub residual: DVector<f64>,
    /// Weighted Jacobians per involved pose block, distinct ids, ascending.
    pub poses: Vec<(usize, DMatrix<f64>)>,
    /// Weighted Jacobian with respect to the feature block.
    pub feature_jac: Option<DMatrix<f64>>,
}

/// Pseudo-Huber kernel on the squared residual norm; `rho(s) ~ s` near zero
/// and grows linearly in the residual norm far out.
#[derive(Debug, Clone, Copy)]
pub struct RobustKernel {
    pub scale: f64,
}

impl RobustKernel {
    /// Robustified cost of a squared norm.
    pub fn rho(&self, s: f64) -> f64 {
        let d2 = self.scale * self.scale;
        2.0 * d2 * ((1.0 + s / d2).sqrt() - 1.0)
    }

    /// Multiplier applied to the residual and Jacobian, `sqrt(rho'(s))`.
    pub fn sqrt_weight(&self, s: f64) -> f64 {
        let d2 = self.scale * self.scale;
        (1.0 + s / d2).powf(-0.25)
    }
}

/// Applies the optional kernel to a squared norm.
pub fn robust_cost(kernel: Option<RobustKernel>, s: f64) -> f64 {
    match kernel {
        Some(k) => k.rho(s),
        None => s,
    }
}

/// A block nonlinear least-squares problem.
pub trait NlsModel {
    /// Snapshot of the optimizable state, for trial steps and rollback.
    type State: Clone;

    fn state(&self) -> Self::State;
    fn set_state(&mut self, s: &Self::State);

    fn pose_count(&self) -> usize;
    /// Tangent dimension of every pose block (6 for full poses, 3 for
    /// position-only).
    fn pose_dof(&self) -> usize;
    fn feature_count(&self) -> usize;
    /// Tangent dimension of every feature block; 0 when features are fixed.
    fn feature_dof(&self) -> usize;
    /// Gauge: tangent indices of this pose that are frozen.
    fn fixed_pose_dofs(&self, pose: usize) -> Vec<usize>;

    /// Evaluates all residuals and Jacobians, in a fixed deterministic order.
    fn evaluate(&self, out: &mut Vec<ObsEval>) -> Result<(), ProblemError>;

    /// Total cost (sum of weighted squared residual norms) at the current
    /// state, without Jacobians.
    fn cost(&self) -> Result<f64, ProblemError>;

    /// Applies tangent increments; `pose_steps[i]` has `pose_dof()` entries
    /// (fixed dofs included, already zeroed by the engine),
    /// `feature_steps[j]` has `feature_dof()` entries.
    fn apply_step(&mut self, pose_steps: &[DVector<f64>], feature_steps: &[DVector<f64>]);

    /// Diagnostic chi-squared pair (ray metric, pixel metric); either may be
    /// NaN when the model has no meaningful value for it.
    fn chi2_pair(&self) -> (f64, f64);
}
