//! Block normal equations and the Schur complement over feature blocks.
//!
//! The Hessian is kept in block form: pose-pair blocks `H_TT`, pose-feature
//! coupling `H_TF`, and the block-diagonal `H_FF`. Reduction eliminates the
//! feature blocks, leaving the reduced camera system whose fill pattern is
//! the co-observation graph. Gauge-fixed tangent directions are dropped when
//! the reduced system is materialized.

use super::linear::{
    solve_dense, LinearSolveError, SparseCholesky, SparseLower, SPARSE_THRESHOLD_BLOCKS,
};
use super::model::{NlsModel, ObsEval};
use crate::problem::ProblemError;
use nalgebra::{DMatrix, DVector};
use std::collections::BTreeMap;
use thiserror::Error;

/// Condition number beyond which a feature block is regularized before
/// inversion (only reachable in the XYZ / inverse-depth baselines).
pub const FEATURE_BLOCK_COND_LIMIT: f64 = 1e14;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("reduced camera system is singular: {0}")]
    Singular(#[from] LinearSolveError),
    #[error("feature block {feature} is singular even after regularization")]
    FeatureBlockSingular { feature: usize },
}

/// Mapping from pose blocks to the active (gauge-free) parameter vector.
#[derive(Debug, Clone)]
pub struct ActiveLayout {
    pub pose_dof: usize,
    /// Per pose: local tangent indices that remain free.
    pub free_dofs: Vec<Vec<usize>>,
    /// Per pose: offset of its first free dof in the active vector.
    pub offsets: Vec<usize>,
    pub total: usize,
}

impl ActiveLayout {
    pub fn new(model: &impl NlsModel) -> Self {
        let pose_dof = model.pose_dof();
        let mut free_dofs = Vec::with_capacity(model.pose_count());
        let mut offsets = Vec::with_capacity(model.pose_count());
        let mut total = 0;
        for p in 0..model.pose_count() {
            let fixed = model.fixed_pose_dofs(p);
            let free: Vec<usize> = (0..pose_dof).filter(|d| !fixed.contains(d)).collect();
            offsets.push(total);
            total += free.len();
            free_dofs.push(free);
        }
        ActiveLayout {
            pose_dof,
            free_dofs,
            offsets,
            total,
        }
    }
}

/// Assembled block normal equations `H dx = -g` at one linearization point.
#[derive(Debug, Clone)]
pub struct SchurSystem {
    pub pose_dof: usize,
    pub feature_dof: usize,
    /// Upper-triangle pose blocks, key `(i, j)` with `i <= j`.
    pub h_tt: BTreeMap<(usize, usize), DMatrix<f64>>,
    /// Pose-feature coupling blocks, key `(pose, feature)`.
    pub h_tf: BTreeMap<(usize, usize), DMatrix<f64>>,
    /// Per-feature diagonal blocks.
    pub h_ff: Vec<DMatrix<f64>>,
    pub g_t: Vec<DVector<f64>>,
    pub g_f: Vec<DVector<f64>>,
    /// Sorted distinct pose ids coupled to each feature.
    pub feature_poses: Vec<Vec<usize>>,
    pub layout: ActiveLayout,
    /// Cost (sum of weighted squared residuals) at the linearization point.
    pub cost: f64,
}

/// Tangent increments produced by one linear solve.
#[derive(Debug, Clone)]
pub struct StepVectors {
    /// Per pose, full `pose_dof` entries with gauge-fixed dofs zeroed.
    pub poses: Vec<DVector<f64>>,
    /// Per feature, `feature_dof` entries.
    pub features: Vec<DVector<f64>>,
    /// Feature blocks that needed regularization during this solve.
    pub regularized_blocks: usize,
}

impl StepVectors {
    pub fn norm(&self) -> f64 {
        let mut s = 0.0;
        for v in &self.poses {
            s += v.norm_squared();
        }
        for v in &self.features {
            s += v.norm_squared();
        }
        s.sqrt()
    }

    pub fn zeros(pose_count: usize, pose_dof: usize, feat_count: usize, feat_dof: usize) -> Self {
        StepVectors {
            poses: vec![DVector::zeros(pose_dof); pose_count],
            features: vec![DVector::zeros(feat_dof); feat_count],
            regularized_blocks: 0,
        }
    }

    pub fn scale(&self, a: f64) -> StepVectors {
        StepVectors {
            poses: self.poses.iter().map(|v| v * a).collect(),
            features: self.features.iter().map(|v| v * a).collect(),
            regularized_blocks: self.regularized_blocks,
        }
    }

    pub fn add(&self, other: &StepVectors, b: f64) -> StepVectors {
        StepVectors {
            poses: self
                .poses
                .iter()
                .zip(&other.poses)
                .map(|(x, y)| x + y * b)
                .collect(),
            features: self
                .features
                .iter()
                .zip(&other.features)
                .map(|(x, y)| x + y * b)
                .collect(),
            regularized_blocks: self.regularized_blocks,
        }
    }

    pub fn dot(&self, other: &StepVectors) -> f64 {
        let mut s = 0.0;
        for (x, y) in self.poses.iter().zip(&other.poses) {
            s += x.dot(y);
        }
        for (x, y) in self.features.iter().zip(&other.features) {
            s += x.dot(y);
        }
        s
    }
}

/// Builds the normal equations from a model's residuals and Jacobians.
pub fn build_normal_equations(model: &impl NlsModel) -> Result<SchurSystem, ProblemError> {
    let pose_dof = model.pose_dof();
    let feature_dof = model.feature_dof();
    let mut evals: Vec<ObsEval> = Vec::new();
    model.evaluate(&mut evals)?;

    let mut sys = SchurSystem {
        pose_dof,
        feature_dof,
        h_tt: BTreeMap::new(),
        h_tf: BTreeMap::new(),
        h_ff: vec![DMatrix::zeros(feature_dof, feature_dof); model.feature_count()],
        g_t: vec![DVector::zeros(pose_dof); model.pose_count()],
        g_f: vec![DVector::zeros(feature_dof); model.feature_count()],
        feature_poses: vec![Vec::new(); model.feature_count()],
        layout: ActiveLayout::new(model),
        cost: 0.0,
    };

    for ev in &evals {
        sys.cost += ev.residual.norm_squared();
        for (a, (pa, ja)) in ev.poses.iter().enumerate() {
            sys.g_t[*pa] += ja.transpose() * &ev.residual;
            for (pb, jb) in ev.poses.iter().skip(a) {
                debug_assert!(pa <= pb, "pose blocks must be ascending and distinct");
                let block = sys
                    .h_tt
                    .entry((*pa, *pb))
                    .or_insert_with(|| DMatrix::zeros(pose_dof, pose_dof));
                *block += ja.transpose() * jb;
            }
        }
        if let (Some(j), Some(jf)) = (ev.feature, ev.feature_jac.as_ref()) {
            sys.h_ff[j] += jf.transpose() * jf;
            sys.g_f[j] += jf.transpose() * &ev.residual;
            for (pa, ja) in &ev.poses {
                let block = sys
                    .h_tf
                    .entry((*pa, j))
                    .or_insert_with(|| DMatrix::zeros(pose_dof, feature_dof));
                *block += ja.transpose() * jf;
                if !sys.feature_poses[j].contains(pa) {
                    sys.feature_poses[j].push(*pa);
                }
            }
        }
    }
    for list in &mut sys.feature_poses {
        list.sort_unstable();
    }
    Ok(sys)
}

impl SchurSystem {
    /// Infinity norm of the gradient over active (gauge-free) dofs.
    pub fn gradient_inf_norm(&self) -> f64 {
        let mut m: f64 = 0.0;
        for (p, g) in self.g_t.iter().enumerate() {
            for &d in &self.layout.free_dofs[p] {
                m = m.max(g[d].abs());
            }
        }
        for g in &self.g_f {
            for v in g.iter() {
                m = m.max(v.abs());
            }
        }
        m
    }

    /// Negative gradient as step vectors (steepest-descent direction),
    /// gauge-fixed dofs zeroed.
    pub fn neg_gradient(&self) -> StepVectors {
        let mut s = StepVectors::zeros(
            self.g_t.len(),
            self.pose_dof,
            self.g_f.len(),
            self.feature_dof,
        );
        for (p, g) in self.g_t.iter().enumerate() {
            for &d in &self.layout.free_dofs[p] {
                s.poses[p][d] = -g[d];
            }
        }
        for (j, g) in self.g_f.iter().enumerate() {
            s.features[j] = -g;
        }
        s
    }

    /// Applies the (undamped) block Hessian to step vectors, respecting the
    /// gauge mask on both sides.
    pub fn apply_hessian(&self, v: &StepVectors) -> StepVectors {
        let mut out = StepVectors::zeros(
            self.g_t.len(),
            self.pose_dof,
            self.g_f.len(),
            self.feature_dof,
        );
        let mut masked = v.clone();
        for (p, vec) in masked.poses.iter_mut().enumerate() {
            let free = &self.layout.free_dofs[p];
            for d in 0..self.pose_dof {
                if !free.contains(&d) {
                    vec[d] = 0.0;
                }
            }
        }
        for (&(i, j), block) in &self.h_tt {
            out.poses[i] += block * &masked.poses[j];
            if i != j {
                out.poses[j] += block.transpose() * &masked.poses[i];
            }
        }
        for (&(p, f), block) in &self.h_tf {
            out.poses[p] += block * &masked.features[f];
            out.features[f] += block.transpose() * &masked.poses[p];
        }
        for (f, block) in self.h_ff.iter().enumerate() {
            out.features[f] += block * &masked.features[f];
        }
        for (p, vec) in out.poses.iter_mut().enumerate() {
            let free = &self.layout.free_dofs[p];
            for d in 0..self.pose_dof {
                if !free.contains(&d) {
                    vec[d] = 0.0;
                }
            }
        }
        out
    }

    /// Inverts the (damped) feature blocks, regularizing ill-conditioned ones
    /// by `1e-10 * trace` on the diagonal. Returns the inverses and how many
    /// blocks needed the regularization.
    fn invert_feature_blocks(
        &self,
        lambda: f64,
    ) -> Result<(Vec<DMatrix<f64>>, usize), SolveError> {
        let fdim = self.feature_dof;
        let mut inverses = Vec::with_capacity(self.h_ff.len());
        let mut flagged = 0;
        for (j, block) in self.h_ff.iter().enumerate() {
            let mut w = block.clone();
            for d in 0..fdim {
                w[(d, d)] += lambda;
            }
            let eig = w.clone().symmetric_eigen();
            let max_e = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
            let min_e = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
            let cond = if min_e <= 0.0 { f64::INFINITY } else { max_e / min_e };
            if cond > FEATURE_BLOCK_COND_LIMIT {
                flagged += 1;
                let bump = 1e-10 * w.trace();
                for d in 0..fdim {
                    w[(d, d)] += bump;
                }
            }
            let inv = w
                .try_inverse()
                .ok_or(SolveError::FeatureBlockSingular { feature: j })?;
            inverses.push(inv);
        }
        Ok((inverses, flagged))
    }

    /// Reduced camera matrix and right-hand side in active coordinates:
    /// `(H_TT - H_TF W^-1 H_TF^T) dT = -(g_T - H_TF W^-1 g_F)`.
    ///
    /// Returns the active dense matrix (also used to assemble the sparse
    /// form), the rhs, the feature-block inverses for back-substitution, and
    /// the regularization flag count.
    pub fn reduce(
        &self,
        lambda: f64,
    ) -> Result<(Vec<((usize, usize), DMatrix<f64>)>, Vec<DVector<f64>>, Vec<DMatrix<f64>>, usize), SolveError>
    {
        let (hff_inv, flagged) = self.invert_feature_blocks(lambda)?;
        let mut blocks: BTreeMap<(usize, usize), DMatrix<f64>> = self.h_tt.clone();
        // Damp the pose diagonal.
        if lambda != 0.0 {
            for p in 0..self.g_t.len() {
                let block = blocks
                    .entry((p, p))
                    .or_insert_with(|| DMatrix::zeros(self.pose_dof, self.pose_dof));
                for d in 0..self.pose_dof {
                    block[(d, d)] += lambda;
                }
            }
        }
        let mut rhs: Vec<DVector<f64>> = self.g_t.iter().map(|g| -g).collect();
        for (j, winv) in hff_inv.iter().enumerate() {
            let poses = &self.feature_poses[j];
            let wg = winv * &self.g_f[j];
            for (ai, &pa) in poses.iter().enumerate() {
                let ba = &self.h_tf[&(pa, j)];
                rhs[pa] += ba * &wg;
                for &pb in &poses[ai..] {
                    let bb = &self.h_tf[&(pb, j)];
                    let contrib = ba * winv * bb.transpose();
                    let block = blocks
                        .entry((pa, pb))
                        .or_insert_with(|| DMatrix::zeros(self.pose_dof, self.pose_dof));
                    *block -= contrib;
                }
            }
        }
        Ok((blocks.into_iter().collect(), rhs, hff_inv, flagged))
    }

    /// Solves `(H + lambda I) dx = -g` via the Schur complement. The reduced
    /// camera system goes through dense Cholesky below
    /// [`SPARSE_THRESHOLD_BLOCKS`] pose blocks and sparse Cholesky above.
    pub fn solve(&self, lambda: f64) -> Result<StepVectors, SolveError> {
        let layout = &self.layout;
        let n_active = layout.total;
        let (blocks, rhs_blocks, hff_inv, flagged) = self.reduce(lambda)?;

        // Active rhs.
        let mut rhs = DVector::zeros(n_active);
        for (p, r) in rhs_blocks.iter().enumerate() {
            for (k, &d) in layout.free_dofs[p].iter().enumerate() {
                rhs[layout.offsets[p] + k] = r[d];
            }
        }

        let delta_active = if self.g_t.len() < SPARSE_THRESHOLD_BLOCKS {
            let mut s = DMatrix::zeros(n_active, n_active);
            for ((pa, pb), block) in &blocks {
                for (ka, &da) in layout.free_dofs[*pa].iter().enumerate() {
                    for (kb, &db) in layout.free_dofs[*pb].iter().enumerate() {
                        let (ra, rb) = (layout.offsets[*pa] + ka, layout.offsets[*pb] + kb);
                        s[(ra, rb)] = block[(da, db)];
                        if pa != pb {
                            s[(rb, ra)] = block[(da, db)];
                        } else {
                            s[(rb, ra)] = block[(db, da)];
                        }
                    }
                }
            }
            solve_dense(&s, &rhs)?
        } else {
            let mut triplets = Vec::new();
            for ((pa, pb), block) in &blocks {
                for (ka, &da) in layout.free_dofs[*pa].iter().enumerate() {
                    for (kb, &db) in layout.free_dofs[*pb].iter().enumerate() {
                        let (ra, rb) = (layout.offsets[*pa] + ka, layout.offsets[*pb] + kb);
                        let v = block[(da, db)];
                        if v != 0.0 && rb >= ra {
                            triplets.push((rb, ra, v));
                        }
                        if pa == pb && ka == kb {
                            break;
                        }
                    }
                }
            }
            let a = SparseLower::from_triplets(n_active, &triplets);
            SparseCholesky::factor(&a)?.solve(&rhs)
        };

        // Expand to full-dof pose steps.
        let mut steps = StepVectors::zeros(
            self.g_t.len(),
            self.pose_dof,
            self.g_f.len(),
            self.feature_dof,
        );
        steps.regularized_blocks = flagged;
        for p in 0..self.g_t.len() {
            for (k, &d) in layout.free_dofs[p].iter().enumerate() {
                steps.poses[p][d] = delta_active[layout.offsets[p] + k];
            }
        }
        // Back-substitute feature increments.
        for (j, winv) in hff_inv.iter().enumerate() {
            let mut v = self.g_f[j].clone();
            for &p in &self.feature_poses[j] {
                v += self.h_tf[&(p, j)].transpose() * &steps.poses[p];
            }
            steps.features[j] = -(winv * v);
        }
        Ok(steps)
    }
}
