//! The bundle-adjustment problem state: poses, features, observations,
//! intrinsics, and the gauge fixture.

use crate::camera::{CameraIntrinsics, Observation};
use crate::feature::{
    feature_to_point, point_to_feature, GeometryError, InverseDepthFeature, ParallaxFeature,
};
use crate::pose::CameraPose;
use crate::ray::UnitRay;
use crate::residual::{point_ray_error, ray_error, reprojection_error};
use nalgebra::Vector3;
use thiserror::Error;

/// Which feature parameterization a problem uses (homogeneous per problem).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parameterization {
    /// Parallax angle + main-anchor ray, ray-direction residuals.
    Pmba,
    /// Euclidean points, pixel residuals.
    Xyz,
    /// Anchored inverse depth, pixel residuals.
    Idp,
}

impl Parameterization {
    pub fn name(&self) -> &'static str {
        match self {
            Parameterization::Pmba => "pmba",
            Parameterization::Xyz => "xyz",
            Parameterization::Idp => "idp",
        }
    }
}

impl std::str::FromStr for Parameterization {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pmba" => Ok(Parameterization::Pmba),
            "xyz" => Ok(Parameterization::Xyz),
            "idp" => Ok(Parameterization::Idp),
            other => Err(format!("unknown parameterization '{other}' (expected pmba|xyz|idp)")),
        }
    }
}

impl std::fmt::Display for Parameterization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Feature storage for one parameterization.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureSet {
    Parallax(Vec<ParallaxFeature>),
    Xyz(Vec<Vector3<f64>>),
    InverseDepth(Vec<InverseDepthFeature>),
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        match self {
            FeatureSet::Parallax(v) => v.len(),
            FeatureSet::Xyz(v) => v.len(),
            FeatureSet::InverseDepth(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn parameterization(&self) -> Parameterization {
        match self {
            FeatureSet::Parallax(_) => Parameterization::Pmba,
            FeatureSet::Xyz(_) => Parameterization::Xyz,
            FeatureSet::InverseDepth(_) => Parameterization::Idp,
        }
    }
}

/// Shared or per-pose intrinsics.
#[derive(Debug, Clone, PartialEq)]
pub enum Intrinsics {
    Shared(CameraIntrinsics),
    PerPose(Vec<CameraIntrinsics>),
}

impl Intrinsics {
    pub fn for_pose(&self, pose_id: usize) -> &CameraIntrinsics {
        match self {
            Intrinsics::Shared(k) => k,
            Intrinsics::PerPose(v) => &v[pose_id],
        }
    }
}

/// Gauge fixture: one pose fully fixed, one position coordinate of a second
/// pose frozen to remove the monocular scale freedom.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Gauge {
    pub anchor_pose: usize,
    pub scale_pose: usize,
    /// Index (0..3) of the frozen coordinate of `scale_pose`'s position.
    pub scale_coord: usize,
}

impl Gauge {
    /// Standard fixture: pose 0 fixed, scale frozen on the largest-magnitude
    /// coordinate of the first nonzero baseline from pose 0.
    pub fn from_poses(poses: &[CameraPose]) -> Result<Gauge, ProblemError> {
        let p0 = poses.first().ok_or(ProblemError::Empty)?.position;
        for (i, t) in poses.iter().enumerate().skip(1) {
            let b = t.position - p0;
            if b.norm() > 0.0 {
                let coord = (0..3)
                    .max_by(|&x, &y| b[x].abs().partial_cmp(&b[y].abs()).unwrap())
                    .unwrap();
                return Ok(Gauge {
                    anchor_pose: 0,
                    scale_pose: i,
                    scale_coord: coord,
                });
            }
        }
        Err(ProblemError::DegenerateGauge)
    }
}

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("problem has no poses")]
    Empty,
    #[error("all poses coincide; no baseline to fix the scale gauge")]
    DegenerateGauge,
    #[error("observation {obs} references pose {pose} out of range {range}")]
    PoseIdOutOfRange { obs: usize, pose: usize, range: usize },
    #[error("observation {obs} references feature {feature} out of range {range}")]
    FeatureIdOutOfRange { obs: usize, feature: usize, range: usize },
    #[error("feature {feature}: anchor pose {anchor} is not among its observing poses")]
    AnchorNotObserving { feature: usize, anchor: usize },
    #[error("feature {feature} is observed by {count} pose(s); at least 2 required")]
    TooFewObservers { feature: usize, count: usize },
    #[error("feature {feature}: {source}")]
    Geometry {
        feature: usize,
        source: GeometryError,
    },
    #[error("evaluation failed at observation {obs} (pose {pose}, feature {feature}): {source}")]
    Evaluation {
        obs: usize,
        pose: usize,
        feature: usize,
        source: GeometryError,
    },
}

/// A full bundle-adjustment problem.
#[derive(Debug, Clone, PartialEq)]
pub struct BaProblem {
    pub poses: Vec<CameraPose>,
    pub features: FeatureSet,
    pub observations: Vec<Observation>,
    pub intrinsics: Intrinsics,
    pub gauge: Gauge,
}

impl BaProblem {
    pub fn parameterization(&self) -> Parameterization {
        self.features.parameterization()
    }

    /// Observation indices grouped by feature id, in input order.
    pub fn observations_by_feature(&self) -> Vec<Vec<usize>> {
        let mut by_feat = vec![Vec::new(); self.features.len()];
        for (i, o) in self.observations.iter().enumerate() {
            by_feat[o.feature_id].push(i);
        }
        by_feat
    }

    /// Structural validation: index ranges, observer counts, anchor rules.
    pub fn validate(&self) -> Result<(), ProblemError> {
        if self.poses.is_empty() {
            return Err(ProblemError::Empty);
        }
        for (i, o) in self.observations.iter().enumerate() {
            if o.pose_id >= self.poses.len() {
                return Err(ProblemError::PoseIdOutOfRange {
                    obs: i,
                    pose: o.pose_id,
                    range: self.poses.len(),
                });
            }
            if o.feature_id >= self.features.len() {
                return Err(ProblemError::FeatureIdOutOfRange {
                    obs: i,
                    feature: o.feature_id,
                    range: self.features.len(),
                });
            }
        }
        let by_feat = self.observations_by_feature();
        for (j, obs) in by_feat.iter().enumerate() {
            let observers: std::collections::BTreeSet<usize> =
                obs.iter().map(|&i| self.observations[i].pose_id).collect();
            if observers.len() < 2 {
                return Err(ProblemError::TooFewObservers {
                    feature: j,
                    count: observers.len(),
                });
            }
            if let FeatureSet::Parallax(fs) = &self.features {
                for anchor in [fs[j].main_anchor, fs[j].assoc_anchor] {
                    if !observers.contains(&anchor) {
                        return Err(ProblemError::AnchorNotObserving { feature: j, anchor });
                    }
                }
            }
        }
        Ok(())
    }

    /// World position implied by feature `j` under the active
    /// parameterization.
    pub fn world_point(&self, j: usize) -> Result<Vector3<f64>, GeometryError> {
        match &self.features {
            FeatureSet::Xyz(v) => Ok(v[j]),
            FeatureSet::InverseDepth(v) => Ok(v[j].to_point(&self.poses[v[j].anchor])),
            FeatureSet::Parallax(v) => {
                let f = &v[j];
                feature_to_point(f, &self.poses[f.main_anchor], &self.poses[f.assoc_anchor])
            }
        }
    }

    /// Sum of squared pixel residuals over all observations, evaluated at the
    /// world points implied by the current state. Features whose conversion
    /// degenerates contribute nothing and are counted in the flag.
    pub fn chi2_uv(&self) -> (f64, usize) {
        let mut chi2 = 0.0;
        let mut flagged = 0;
        let mut points = Vec::with_capacity(self.features.len());
        for j in 0..self.features.len() {
            points.push(self.world_point(j).ok());
        }
        for o in &self.observations {
            match points[o.feature_id] {
                Some(p) => {
                    let k = self.intrinsics.for_pose(o.pose_id);
                    match reprojection_error(&p, &self.poses[o.pose_id], &o.pixel, k) {
                        Ok(r) => chi2 += o.weight * r.residual.norm_squared(),
                        Err(_) => flagged += 1,
                    }
                }
                None => flagged += 1,
            }
        }
        (chi2, flagged)
    }

    /// Sum of squared ray-direction residuals over all observations. For XYZ
    /// and inverse-depth states the ray is taken toward the implied point. A
    /// camera sitting exactly at a feature contributes the maximal squared
    /// norm 4 rather than failing; this only matters for diagnostics.
    pub fn chi2_ray(&self) -> f64 {
        let mut chi2 = 0.0;
        match &self.features {
            FeatureSet::Parallax(fs) => {
                for o in &self.observations {
                    let f = &fs[o.feature_id];
                    let e = ray_error(
                        f,
                        &self.poses[f.main_anchor],
                        &self.poses[f.assoc_anchor],
                        &self.poses[o.pose_id],
                        &o.measured_ray,
                    );
                    chi2 += o.weight * e.map(|e| e.norm_squared()).unwrap_or(4.0);
                }
            }
            _ => {
                let mut points = Vec::with_capacity(self.features.len());
                for j in 0..self.features.len() {
                    points.push(self.world_point(j).ok());
                }
                for o in &self.observations {
                    let e = match points[o.feature_id] {
                        Some(p) => point_ray_error(&p, &self.poses[o.pose_id], &o.measured_ray)
                            .map(|e| e.norm_squared())
                            .unwrap_or(4.0),
                        None => 4.0,
                    };
                    chi2 += o.weight * e;
                }
            }
        }
        chi2
    }

    /// Count of parallax features whose retraction had to clamp theta.
    pub fn theta_clamp_flags(&self) -> usize {
        match &self.features {
            FeatureSet::Parallax(fs) => fs.iter().filter(|f| f.theta_clamp_events > 0).count(),
            _ => 0,
        }
    }

    /// Converts the problem to the target parameterization at the current
    /// world geometry.
    ///
    /// To parallax: anchors are the observing pair with the widest angle at
    /// the feature (ties broken by lower pose-id pair). To inverse depth: the
    /// anchor is the first observing pose, the bearing is its measured ray
    /// (fixed), and only the reciprocal distance stays free.
    pub fn convert_to(&self, target: Parameterization) -> Result<BaProblem, ProblemError> {
        if self.parameterization() == target {
            return Ok(self.clone());
        }
        let by_feat = self.observations_by_feature();
        let mut points = Vec::with_capacity(self.features.len());
        for j in 0..self.features.len() {
            points.push(
                self.world_point(j)
                    .map_err(|source| ProblemError::Geometry { feature: j, source })?,
            );
        }
        let features = match target {
            Parameterization::Xyz => FeatureSet::Xyz(points),
            Parameterization::Idp => {
                let mut fs = Vec::with_capacity(points.len());
                for (j, p) in points.iter().enumerate() {
                    let first = by_feat[j]
                        .iter()
                        .map(|&i| &self.observations[i])
                        .min_by_key(|o| o.pose_id)
                        .ok_or(ProblemError::TooFewObservers { feature: j, count: 0 })?;
                    let anchor = first.pose_id;
                    let dist = (p - self.poses[anchor].position).norm();
                    if dist == 0.0 {
                        return Err(ProblemError::Geometry {
                            feature: j,
                            source: GeometryError::CoincidentPoint,
                        });
                    }
                    fs.push(InverseDepthFeature {
                        anchor,
                        ray: first.measured_ray,
                        rho: 1.0 / dist,
                    });
                }
                FeatureSet::InverseDepth(fs)
            }
            Parameterization::Pmba => {
                let mut fs = Vec::with_capacity(points.len());
                for (j, p) in points.iter().enumerate() {
                    let observers: Vec<usize> = {
                        let mut set: Vec<usize> =
                            by_feat[j].iter().map(|&i| self.observations[i].pose_id).collect();
                        set.sort_unstable();
                        set.dedup();
                        set
                    };
                    if observers.len() < 2 {
                        return Err(ProblemError::TooFewObservers {
                            feature: j,
                            count: observers.len(),
                        });
                    }
                    let (mut best, mut best_angle) = ((observers[0], observers[1]), -1.0);
                    for (ii, &pi) in observers.iter().enumerate() {
                        for &pk in &observers[ii + 1..] {
                            let ri = p - self.poses[pi].position;
                            let rk = p - self.poses[pk].position;
                            if ri.norm() == 0.0 || rk.norm() == 0.0 {
                                continue;
                            }
                            let ang = UnitRay::normalize(ri).angle_to(&UnitRay::normalize(rk));
                            if ang > best_angle {
                                best_angle = ang;
                                best = (pi, pk);
                            }
                        }
                    }
                    let f = point_to_feature(
                        p,
                        best.0,
                        best.1,
                        &self.poses[best.0],
                        &self.poses[best.1],
                    )
                    .map_err(|source| ProblemError::Geometry { feature: j, source })?;
                    fs.push(f);
                }
                FeatureSet::Parallax(fs)
            }
        };
        Ok(BaProblem {
            poses: self.poses.clone(),
            features,
            observations: self.observations.clone(),
            intrinsics: self.intrinsics.clone(),
            gauge: self.gauge,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::so3::{exp_so3, Rotation};
    use nalgebra::Vector2;

    fn toy_problem() -> BaProblem {
        let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0);
        let poses = vec![
            CameraPose::identity(),
            CameraPose::new(Rotation::identity(), Vector3::new(1.0, 0.0, 0.0)),
            CameraPose::new(exp_so3(&Vector3::new(0.0, -0.1, 0.0)), Vector3::new(2.0, 0.0, 0.0)),
        ];
        let points = vec![Vector3::new(0.5, 0.2, 5.0), Vector3::new(-0.5, -0.3, 7.0)];
        let mut observations = Vec::new();
        for (j, p) in points.iter().enumerate() {
            for (i, t) in poses.iter().enumerate() {
                let local = t.world_to_local(p);
                let u = k.project_normalized(&Vector2::new(local.x / local.z, local.y / local.z));
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

    #[test]
    fn validates_and_reports_zero_chi2_at_exact_geometry() {
        let p = toy_problem();
        p.validate().unwrap();
        let (uv, flagged) = p.chi2_uv();
        assert!(uv < 1e-18);
        assert_eq!(flagged, 0);
        assert!(p.chi2_ray() < 1e-18);
    }

    #[test]
    fn gauge_picks_largest_baseline_coordinate() {
        let p = toy_problem();
        assert_eq!(p.gauge.anchor_pose, 0);
        assert_eq!(p.gauge.scale_pose, 1);
        assert_eq!(p.gauge.scale_coord, 0);
    }

    #[test]
    fn conversion_round_trips_preserve_world_points_and_chi2() {
        let p = toy_problem();
        for target in [Parameterization::Pmba, Parameterization::Idp] {
            let q = p.convert_to(target).unwrap();
            q.validate().unwrap();
            for j in 0..p.features.len() {
                let a = p.world_point(j).unwrap();
                let b = q.world_point(j).unwrap();
                assert!((a - b).norm() < 1e-9, "{target}: point {j} moved");
            }
            let (uv, _) = q.chi2_uv();
            assert!(uv < 1e-16, "{target}: chi2 {uv}");
        }
    }

    #[test]
    fn parallax_anchor_pair_maximizes_the_feature_angle() {
        let p = toy_problem().convert_to(Parameterization::Pmba).unwrap();
        if let FeatureSet::Parallax(fs) = &p.features {
            for f in fs {
                // Widest angle is subtended by the extreme poses 0 and 2.
                assert_eq!((f.main_anchor, f.assoc_anchor), (0, 2));
            }
        } else {
            panic!("expected parallax features");
        }
    }

    #[test]
    fn validation_rejects_bad_indices_and_anchors() {
        let mut p = toy_problem();
        p.observations[0].pose_id = 99;
        assert!(matches!(
            p.validate(),
            Err(ProblemError::PoseIdOutOfRange { obs: 0, pose: 99, .. })
        ));

        let mut p = toy_problem().convert_to(Parameterization::Pmba).unwrap();
        if let FeatureSet::Parallax(fs) = &mut p.features {
            // Point anchor at a pose that exists but never observes feature 0
            // by dropping all of pose 1's observations of it first.
            fs[0].assoc_anchor = 1;
        }
        p.observations.retain(|o| !(o.feature_id == 0 && o.pose_id == 1));
        assert!(matches!(
            p.validate(),
            Err(ProblemError::AnchorNotObserving { feature: 0, anchor: 1 })
        ));
    }
}
