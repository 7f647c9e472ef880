//! Block-sparse nonlinear least-squares engine with Schur complement over
//! feature blocks.

pub mod ba_model;
pub mod diagnostics;
pub mod linear;
pub mod model;
pub mod normal;
pub mod optimize;

pub use ba_model::BaModel;
pub use diagnostics::{
    anchor_information_blocks, condition_diagnostics, AnchorInformationBlocks, HffDiagnostics,
};
pub use linear::SPARSE_THRESHOLD_BLOCKS;
pub use model::{NlsModel, ObsEval, RobustKernel};
pub use normal::{build_normal_equations, SchurSystem, SolveError, StepVectors};
pub use optimize::{
    optimize_model, IterationRecord, Method, OptimizeError, OptimizeOutcome, SolverConfig,
    TerminationReason,
};

use crate::problem::BaProblem;

/// Optimizes a bundle-adjustment problem in place with the configured method
/// and the optional pseudo-Huber scale.
pub fn optimize(
    problem: &mut BaProblem,
    config: &SolverConfig,
    robust_scale: Option<f64>,
) -> Result<OptimizeOutcome, OptimizeError> {
    let mut model = BaModel::new(problem, robust_scale);
    optimize_model(&mut model, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{CameraIntrinsics, Observation};
    use crate::pose::CameraPose;
    use crate::problem::{FeatureSet, Gauge, Intrinsics, Parameterization};
    use crate::so3::{exp_so3, Rotation};
    use nalgebra::{DMatrix, DVector, Vector2, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn synthetic_problem(
        rng: &mut ChaCha8Rng,
        n_poses: usize,
        n_feats: usize,
        pixel_noise: f64,
    ) -> BaProblem {
        let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0);
        let mut poses = Vec::new();
        for i in 0..n_poses {
            poses.push(CameraPose::new(
                exp_so3(&Vector3::new(
                    rng.random_range(-0.1..0.1),
                    rng.random_range(-0.1..0.1),
                    rng.random_range(-0.1..0.1),
                )),
                Vector3::new(i as f64, rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)),
            ));
        }
        let mut points = Vec::new();
        for _ in 0..n_feats {
            points.push(Vector3::new(
                rng.random_range(-3.0..(n_poses as f64 + 3.0)),
                rng.random_range(-3.0..3.0),
                rng.random_range(6.0..14.0),
            ));
        }
        let mut observations = Vec::new();
        for (j, pt) in points.iter().enumerate() {
            for (i, t) in poses.iter().enumerate() {
                let local = t.world_to_local(pt);
                if local.z <= 0.5 {
                    continue;
                }
                let mut u =
                    k.project_normalized(&Vector2::new(local.x / local.z, local.y / local.z));
                u.x += rng.random_range(-pixel_noise..pixel_noise.max(1e-300));
                u.y += rng.random_range(-pixel_noise..pixel_noise.max(1e-300));
                observations.push(Observation::new(i, j, u, &k));
            }
        }
        let gauge = Gauge::from_poses(&poses).unwrap();
        BaProblem {
            poses,
            features: FeatureSet::Xyz(points),
            observations,
            intrinsics: Intrinsics::Shared(k),
            gauge,
        }
    }

    fn perturb(problem: &mut BaProblem, rng: &mut ChaCha8Rng, pose_sigma: f64, point_sigma: f64) {
        for (i, t) in problem.poses.iter_mut().enumerate() {
            if i == problem.gauge.anchor_pose {
                continue;
            }
            let w = Vector3::new(
                rng.random_range(-pose_sigma..pose_sigma),
                rng.random_range(-pose_sigma..pose_sigma),
                rng.random_range(-pose_sigma..pose_sigma),
            );
            t.rotation = t.rotation * exp_so3(&w);
            for d in 0..3 {
                if i == problem.gauge.scale_pose && d == problem.gauge.scale_coord {
                    continue;
                }
                t.position[d] += rng.random_range(-pose_sigma..pose_sigma);
            }
        }
        if let FeatureSet::Xyz(points) = &mut problem.features {
            for p in points.iter_mut() {
                for d in 0..3 {
                    p[d] += rng.random_range(-point_sigma..point_sigma);
                }
            }
        }
    }

    #[test]
    fn noise_free_problem_seeded_at_truth_terminates_immediately() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        for target in [Parameterization::Xyz, Parameterization::Pmba, Parameterization::Idp] {
            let mut p = synthetic_problem(&mut rng, 4, 10, 0.0)
                .convert_to(target)
                .unwrap();
            let out = optimize(&mut p, &SolverConfig::new(Method::Lm), None).unwrap();
            assert!(
                out.iterations <= 1,
                "{target}: took {} iterations",
                out.iterations
            );
            assert!(out.final_cost < 1e-16, "{target}: cost {}", out.final_cost);
        }
    }

    #[test]
    fn perturbed_start_converges_to_ground_truth_cost_all_methods() {
        for method in [Method::Lm, Method::Dl, Method::Gn] {
            let mut rng = ChaCha8Rng::seed_from_u64(103);
            let truth = synthetic_problem(&mut rng, 5, 12, 0.0);
            for target in [Parameterization::Xyz, Parameterization::Pmba] {
                let mut p = truth.clone().convert_to(target).unwrap();
                perturb(&mut p, &mut rng, 0.02, 0.05);
                let out = optimize(&mut p, &SolverConfig::new(method), None).unwrap();
                assert!(
                    out.final_cost < 1e-14,
                    "{method} {target}: cost {} after {} iters ({:?})",
                    out.final_cost,
                    out.iterations,
                    out.reason
                );
            }
        }
    }

    #[test]
    fn accepted_lm_dl_costs_are_monotone() {
        for method in [Method::Lm, Method::Dl] {
            let mut rng = ChaCha8Rng::seed_from_u64(107);
            let mut p = synthetic_problem(&mut rng, 5, 12, 0.5)
                .convert_to(Parameterization::Pmba)
                .unwrap();
            perturb(&mut p, &mut rng, 0.03, 0.0);
            let out = optimize(&mut p, &SolverConfig::new(method), None).unwrap();
            let costs: Vec<f64> = out.records.iter().map(|r| r.chi2_ray).collect();
            for w in costs.windows(2) {
                assert!(
                    w[1] <= w[0] * (1.0 + 1e-12) + 1e-18,
                    "{method}: cost increased {costs:?}"
                );
            }
        }
    }

    #[test]
    fn assembled_hessian_matches_dense_jtj_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(109);
        let mut p = synthetic_problem(&mut rng, 4, 10, 0.3)
            .convert_to(Parameterization::Pmba)
            .unwrap();
        perturb(&mut p, &mut rng, 0.01, 0.0);
        let model = BaModel::new(&mut p, None);
        let sys = build_normal_equations(&model).unwrap();

        // Dense oracle: stack the full Jacobian explicitly.
        let mut evals = Vec::new();
        model.evaluate(&mut evals).unwrap();
        let np = model.pose_count() * 6;
        let nf = model.feature_count() * 3;
        let mut jtj = DMatrix::<f64>::zeros(np + nf, np + nf);
        let mut jtr = DVector::<f64>::zeros(np + nf);
        for ev in &evals {
            let mut j = DMatrix::<f64>::zeros(3, np + nf);
            for (pid, jp) in &ev.poses {
                j.view_mut((0, pid * 6), (3, 6)).copy_from(jp);
            }
            let fid = ev.feature.unwrap();
            j.view_mut((0, np + fid * 3), (3, 3))
                .copy_from(ev.feature_jac.as_ref().unwrap());
            jtj += j.transpose() * &j;
            jtr += j.transpose() * &ev.residual;
        }
        // Compare assembled blocks against the dense oracle.
        for (&(a, b), block) in &sys.h_tt {
            let dense = jtj.view((a * 6, b * 6), (6, 6));
            assert!((block - dense).norm() < 1e-9 * dense.norm().max(1.0));
        }
        for (&(pi, fj), block) in &sys.h_tf {
            let dense = jtj.view((pi * 6, np + fj * 3), (6, 3));
            assert!((block - dense).norm() < 1e-9 * dense.norm().max(1.0));
        }
        for (fj, block) in sys.h_ff.iter().enumerate() {
            let dense = jtj.view((np + fj * 3, np + fj * 3), (3, 3));
            assert!((block - dense).norm() < 1e-9 * dense.norm().max(1.0));
        }
        for (pi, g) in sys.g_t.iter().enumerate() {
            let dense = jtr.rows(pi * 6, 6);
            assert!((g - dense).norm() < 1e-9 * dense.norm().max(1.0));
        }
    }

    #[test]
    fn schur_solution_matches_dense_gauge_fixed_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(113);
        for trial in 0..5 {
            let mut p = synthetic_problem(&mut rng, 4 + trial, 8 + trial, 0.4)
                .convert_to(Parameterization::Pmba)
                .unwrap();
            perturb(&mut p, &mut rng, 0.01, 0.0);
            let model = BaModel::new(&mut p, None);
            let sys = build_normal_equations(&model).unwrap();
            let lambda = 1e-6;
            let steps = sys.solve(lambda).unwrap();

            // Dense oracle on active dofs.
            let mut evals = Vec::new();
            model.evaluate(&mut evals).unwrap();
            let np = model.pose_count() * 6;
            let nf = model.feature_count() * 3;
            let mut jtj = DMatrix::<f64>::zeros(np + nf, np + nf);
            let mut jtr = DVector::<f64>::zeros(np + nf);
            for ev in &evals {
                let mut j = DMatrix::<f64>::zeros(3, np + nf);
                for (pid, jp) in &ev.poses {
                    j.view_mut((0, pid * 6), (3, 6)).copy_from(jp);
                }
                let fid = ev.feature.unwrap();
                j.view_mut((0, np + fid * 3), (3, 3))
                    .copy_from(ev.feature_jac.as_ref().unwrap());
                jtj += j.transpose() * &j;
                jtr += j.transpose() * &ev.residual;
            }
            // Active dof selection mirroring the gauge.
            let mut active = Vec::new();
            for pose in 0..model.pose_count() {
                let fixed = model.fixed_pose_dofs(pose);
                for d in 0..6 {
                    if !fixed.contains(&d) {
                        active.push(pose * 6 + d);
                    }
                }
            }
            for c in 0..nf {
                active.push(np + c);
            }
            let na = active.len();
            let mut a = DMatrix::<f64>::zeros(na, na);
            let mut b = DVector::<f64>::zeros(na);
            for (r, &gr) in active.iter().enumerate() {
                b[r] = -jtr[gr];
                for (c, &gc) in active.iter().enumerate() {
                    a[(r, c)] = jtj[(gr, gc)];
                }
                a[(r, r)] += lambda;
            }
            let dense = a.cholesky().unwrap().solve(&b);

            let mut flat = DVector::<f64>::zeros(na);
            let mut idx = 0;
            for pose in 0..model.pose_count() {
                let fixed = model.fixed_pose_dofs(pose);
                for d in 0..6 {
                    if !fixed.contains(&d) {
                        flat[idx] = steps.poses[pose][d];
                        idx += 1;
                    }
                }
            }
            for f in 0..model.feature_count() {
                for d in 0..3 {
                    flat[idx] = steps.features[f][d];
                    idx += 1;
                }
            }
            let rel = (&flat - &dense).norm() / dense.norm().max(1.0);
            assert!(rel < 1e-8, "trial {trial}: relative error {rel}");
        }
    }

    #[test]
    fn reduced_fill_pattern_matches_xyz_on_same_connectivity() {
        let mut rng = ChaCha8Rng::seed_from_u64(127);
        let truth = synthetic_problem(&mut rng, 6, 15, 0.0);
        let mut as_xyz = truth.clone();
        let mut as_pmba = truth.convert_to(Parameterization::Pmba).unwrap();
        let keys = |p: &mut BaProblem| {
            let model = BaModel::new(p, None);
            let sys = build_normal_equations(&model).unwrap();
            let (blocks, _, _, _) = sys.reduce(0.0).unwrap();
            blocks
                .into_iter()
                .filter(|(_, b)| b.norm() > 1e-12)
                .map(|(k, _)| k)
                .collect::<std::collections::BTreeSet<_>>()
        };
        let kx = keys(&mut as_xyz);
        let kp = keys(&mut as_pmba);
        assert_eq!(kx, kp);
    }

    #[test]
    fn sparse_path_used_above_threshold_matches_small_problem_behaviour() {
        // 70 poses forces the sparse reduced solve; results must still reach
        // the noise-free optimum.
        let mut rng = ChaCha8Rng::seed_from_u64(131);
        let mut p = synthetic_problem(&mut rng, 70, 40, 0.0);
        assert!(p.poses.len() >= SPARSE_THRESHOLD_BLOCKS);
        perturb(&mut p, &mut rng, 0.005, 0.01);
        let out = optimize(&mut p, &SolverConfig::new(Method::Lm), None).unwrap();
        assert!(out.final_cost < 1e-12, "cost {}", out.final_cost);
    }

    #[test]
    fn gn_reports_singularity_on_gaugeless_problem() {
        // Break the gauge on purpose: every pose free leaves the similarity
        // null space in the reduced system.
        let mut rng = ChaCha8Rng::seed_from_u64(137);
        let mut p = synthetic_problem(&mut rng, 4, 10, 0.0);
        p.gauge = Gauge {
            anchor_pose: 0,
            scale_pose: 1,
            scale_coord: 0,
        };
        // Make the gauge vacuous by pointing both at pose 0 rotation only.
        struct FreeModel<'a>(BaModel<'a>);
        impl NlsModel for FreeModel<'_> {
            type State = <BaModel<'static> as NlsModel>::State;
            fn state(&self) -> Self::State {
                self.0.state()
            }
            fn set_state(&mut self, s: &Self::State) {
                self.0.set_state(s)
            }
            fn pose_count(&self) -> usize {
                self.0.pose_count()
            }
            fn pose_dof(&self) -> usize {
                6
            }
            fn feature_count(&self) -> usize {
                self.0.feature_count()
            }
            fn feature_dof(&self) -> usize {
                self.0.feature_dof()
            }
            fn fixed_pose_dofs(&self, _pose: usize) -> Vec<usize> {
                vec![]
            }
            fn evaluate(&self, out: &mut Vec<ObsEval>) -> Result<(), crate::problem::ProblemError> {
                self.0.evaluate(out)
            }
            fn cost(&self) -> Result<f64, crate::problem::ProblemError> {
                self.0.cost()
            }
            fn apply_step(&mut self, p: &[DVector<f64>], f: &[DVector<f64>]) {
                self.0.apply_step(p, f)
            }
            fn chi2_pair(&self) -> (f64, f64) {
                self.0.chi2_pair()
            }
        }
        let mut model = FreeModel(BaModel::new(&mut p, None));
        let out = optimize_model(&mut model, &SolverConfig::new(Method::Gn)).unwrap();
        assert_eq!(out.reason, TerminationReason::GaussNewtonSingular);
    }

    #[test]
    fn xyz_far_feature_block_is_ill_conditioned() {
        let mut rng = ChaCha8Rng::seed_from_u64(139);
        let mut p = synthetic_problem(&mut rng, 4, 6, 0.0);
        if let FeatureSet::Xyz(points) = &mut p.features {
            points[0] = Vector3::new(0.0, 0.0, 1e6);
        }
        // Re-project observations of feature 0 so the state is consistent.
        let k = *p.intrinsics.for_pose(0);
        let pts = if let FeatureSet::Xyz(pts) = &p.features {
            pts.clone()
        } else {
            unreachable!()
        };
        for o in p.observations.iter_mut() {
            if o.feature_id == 0 {
                let local = p.poses[o.pose_id].world_to_local(&pts[0]);
                let u = k.project_normalized(&Vector2::new(local.x / local.z, local.y / local.z));
                *o = Observation::new(o.pose_id, 0, u, &k);
            }
        }
        let model = BaModel::new(&mut p, None);
        let sys = build_normal_equations(&model).unwrap();
        let diag = condition_diagnostics(&sys);
        assert!(diag.cond > 1e8, "aggregate condition {}", diag.cond);
    }

    #[test]
    fn theorem_bound_holds_for_parallax_blocks_from_assembly() {
        // Anchors-only problem: assembled H_FF equals the sum of the two
        // anchor residual grams.
        let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0);
        let poses = vec![
            CameraPose::identity(),
            CameraPose::new(Rotation::identity(), Vector3::x()),
        ];
        let point = Vector3::new(0.3, -0.2, 3.0);
        let mut observations = Vec::new();
        for (i, t) in poses.iter().enumerate() {
            let local = t.world_to_local(&point);
            let u = k.project_normalized(&Vector2::new(local.x / local.z, local.y / local.z));
            observations.push(Observation::new(i, 0, u, &k));
        }
        let f = crate::feature::point_to_feature(&point, 0, 1, &poses[0], &poses[1]).unwrap();
        let mut p = BaProblem {
            poses,
            features: FeatureSet::Parallax(vec![f]),
            observations,
            intrinsics: Intrinsics::Shared(k),
            gauge: Gauge {
                anchor_pose: 0,
                scale_pose: 1,
                scale_coord: 0,
            },
        };
        let model = BaModel::new(&mut p, None);
        let sys = build_normal_equations(&model).unwrap();
        // Assembled block = J_m^T J_m + J_a^T J_a with exact Jacobians.
        let mut evals = Vec::new();
        model.evaluate(&mut evals).unwrap();
        let mut expect = DMatrix::<f64>::zeros(3, 3);
        for ev in &evals {
            let jf = ev.feature_jac.as_ref().unwrap();
            expect += jf.transpose() * jf;
        }
        assert!((&sys.h_ff[0] - &expect).norm() < 1e-12);
    }
}
