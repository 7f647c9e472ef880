//! [`NlsModel`] implementation for [`BaProblem`] under each feature
//! parameterization.

use super::model::{robust_cost, NlsModel, ObsEval, RobustKernel};
use crate::feature::retract_feature;
use crate::jacobian::{idp_jacobians, ray_error_jacobians, reprojection_jacobians};
use crate::pose::{retract_pose, CameraPose};
use crate::problem::{BaProblem, FeatureSet, ProblemError};
use crate::residual::ray_error;
use nalgebra::{DMatrix, DVector, Vector3, Vector6};

/// Bundle-adjustment model: 6-dof pose blocks, per-feature blocks of the
/// active parameterization, gauge fixed per the problem's fixture.
pub struct BaModel<'a> {
    pub problem: &'a mut BaProblem,
    pub robust: Option<RobustKernel>,
}

impl<'a> BaModel<'a> {
    pub fn new(problem: &'a mut BaProblem, robust_scale: Option<f64>) -> Self {
        BaModel {
            problem,
            robust: robust_scale.map(|scale| RobustKernel { scale }),
        }
    }
}

fn dmat<const R: usize, const C: usize>(m: &nalgebra::SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_fn(R, C, |i, j| m[(i, j)])
}

impl NlsModel for BaModel<'_> {
    type State = (Vec<CameraPose>, FeatureSet);

    fn state(&self) -> Self::State {
        (self.problem.poses.clone(), self.problem.features.clone())
    }

    fn set_state(&mut self, s: &Self::State) {
        self.problem.poses = s.0.clone();
        self.problem.features = s.1.clone();
    }

    fn pose_count(&self) -> usize {
        self.problem.poses.len()
    }

    fn pose_dof(&self) -> usize {
        6
    }

    fn feature_count(&self) -> usize {
        self.problem.features.len()
    }

    fn feature_dof(&self) -> usize {
        match self.problem.features {
            FeatureSet::Parallax(_) | FeatureSet::Xyz(_) => 3,
            FeatureSet::InverseDepth(_) => 1,
        }
    }

    fn fixed_pose_dofs(&self, pose: usize) -> Vec<usize> {
        let g = &self.problem.gauge;
        if pose == g.anchor_pose {
            (0..6).collect()
        } else if pose == g.scale_pose {
            vec![3 + g.scale_coord]
        } else {
            vec![]
        }
    }

    fn evaluate(&self, out: &mut Vec<ObsEval>) -> Result<(), ProblemError> {
        out.clear();
        let p = &self.problem;
        for (oi, o) in p.observations.iter().enumerate() {
            let wrap = |source| ProblemError::Evaluation {
                obs: oi,
                pose: o.pose_id,
                feature: o.feature_id,
                source,
            };
            let (residual, mut poses, feature_jac): (
                DVector<f64>,
                Vec<(usize, DMatrix<f64>)>,
                DMatrix<f64>,
            ) = match &p.features {
                FeatureSet::Parallax(fs) => {
                    let f = &fs[o.feature_id];
                    let (tm, ta, ti) = (
                        &p.poses[f.main_anchor],
                        &p.poses[f.assoc_anchor],
                        &p.poses[o.pose_id],
                    );
                    let r = ray_error(f, tm, ta, ti, &o.measured_ray).map_err(wrap)?;
                    let jac = ray_error_jacobians(f, tm, ta, ti, &o.measured_ray).map_err(wrap)?;
                    let mut ids = vec![f.main_anchor, f.assoc_anchor, o.pose_id];
                    ids.sort_unstable();
                    ids.dedup();
                    let poses = ids
                        .into_iter()
                        .map(|id| {
                            (
                                id,
                                dmat::<3, 6>(&jac.pose_total(
                                    id,
                                    f.main_anchor,
                                    f.assoc_anchor,
                                    o.pose_id,
                                )),
                            )
                        })
                        .collect();
                    (
                        DVector::from_column_slice(r.as_slice()),
                        poses,
                        dmat::<3, 3>(&jac.feature),
                    )
                }
                FeatureSet::Xyz(points) => {
                    let k = p.intrinsics.for_pose(o.pose_id);
                    let (res, jac) = reprojection_jacobians(
                        &points[o.feature_id],
                        &p.poses[o.pose_id],
                        &o.pixel,
                        k,
                    )
                    .map_err(wrap)?;
                    (
                        DVector::from_column_slice(res.residual.as_slice()),
                        vec![(o.pose_id, dmat::<2, 6>(&jac.observer))],
                        dmat::<2, 3>(&jac.point),
                    )
                }
                FeatureSet::InverseDepth(fs) => {
                    let f = &fs[o.feature_id];
                    let k = p.intrinsics.for_pose(o.pose_id);
                    let (res, jac) = idp_jacobians(
                        f,
                        &p.poses[f.anchor],
                        &p.poses[o.pose_id],
                        &o.pixel,
                        k,
                    )
                    .map_err(wrap)?;
                    let poses = if f.anchor == o.pose_id {
                        vec![(o.pose_id, dmat::<2, 6>(&(jac.anchor + jac.observer)))]
                    } else {
                        let mut v = vec![
                            (f.anchor, dmat::<2, 6>(&jac.anchor)),
                            (o.pose_id, dmat::<2, 6>(&jac.observer)),
                        ];
                        v.sort_by_key(|(id, _)| *id);
                        v
                    };
                    (
                        DVector::from_column_slice(res.residual.as_slice()),
                        poses,
                        DMatrix::from_column_slice(2, 1, jac.rho.as_slice()),
                    )
                }
            };
            let mut w = o.weight.sqrt();
            if let Some(kernel) = self.robust {
                w *= kernel.sqrt_weight(residual.norm_squared());
            }
            let residual = residual * w;
            for (_, j) in poses.iter_mut() {
                *j *= w;
            }
            out.push(ObsEval {
                feature: Some(o.feature_id),
                residual,
                poses,
                feature_jac: Some(feature_jac * w),
            });
        }
        Ok(())
    }

    fn cost(&self) -> Result<f64, ProblemError> {
        let p = &self.problem;
        let mut total = 0.0;
        match &p.features {
            FeatureSet::Parallax(fs) => {
                for (oi, o) in p.observations.iter().enumerate() {
                    let f = &fs[o.feature_id];
                    let r = ray_error(
                        f,
                        &p.poses[f.main_anchor],
                        &p.poses[f.assoc_anchor],
                        &p.poses[o.pose_id],
                        &o.measured_ray,
                    )
                    .map_err(|source| ProblemError::Evaluation {
                        obs: oi,
                        pose: o.pose_id,
                        feature: o.feature_id,
                        source,
                    })?;
                    total += o.weight * robust_cost(self.robust, r.norm_squared());
                }
            }
            _ => {
                let mut points = Vec::with_capacity(p.features.len());
                for j in 0..p.features.len() {
                    points.push(p.world_point(j).map_err(|source| ProblemError::Geometry {
                        feature: j,
                        source,
                    })?);
                }
                for (oi, o) in p.observations.iter().enumerate() {
                    let k = p.intrinsics.for_pose(o.pose_id);
                    let res = crate::residual::reprojection_error(
                        &points[o.feature_id],
                        &p.poses[o.pose_id],
                        &o.pixel,
                        k,
                    )
                    .map_err(|source| ProblemError::Evaluation {
                        obs: oi,
                        pose: o.pose_id,
                        feature: o.feature_id,
                        source,
                    })?;
                    total += o.weight * robust_cost(self.robust, res.residual.norm_squared());
                }
            }
        }
        Ok(total)
    }

    fn apply_step(&mut self, pose_steps: &[DVector<f64>], feature_steps: &[DVector<f64>]) {
        for (t, d) in self.problem.poses.iter_mut().zip(pose_steps) {
            *t = retract_pose(t, &Vector6::from_column_slice(d.as_slice()));
        }
        match &mut self.problem.features {
            FeatureSet::Parallax(fs) => {
                for (f, d) in fs.iter_mut().zip(feature_steps) {
                    *f = retract_feature(f, &Vector3::from_column_slice(d.as_slice()));
                }
            }
            FeatureSet::Xyz(points) => {
                for (x, d) in points.iter_mut().zip(feature_steps) {
                    *x += Vector3::from_column_slice(d.as_slice());
                }
            }
            FeatureSet::InverseDepth(fs) => {
                for (f, d) in fs.iter_mut().zip(feature_steps) {
                    f.rho += d[0];
                }
            }
        }
    }

    fn chi2_pair(&self) -> (f64, f64) {
        (self.problem.chi2_ray(), self.problem.chi2_uv().0)
    }
}
