//! Analytic Jacobians of the residual functions under the module retractions.
//!
//! All blocks are exact derivatives (chain rule through the scaled-ray
//! construction, including the baseline-angle dependence on the ray), so they
//! match central finite differences of the residuals. Pose tangents are
//! ordered `[dphi, dp]`, feature tangents `[dtheta, dn]`.
//!
//! One residual can involve up to three poses (observer, main anchor,
//! associate anchor). Blocks are returned per role; when roles share a pose
//! the per-role blocks sum to the derivative with respect to that pose.

use crate::camera::CameraIntrinsics;
use crate::feature::{scaled_ray, GeometryError, InverseDepthFeature, ParallaxFeature};
use crate::pose::CameraPose;
use crate::ray::{ray_retraction_jacobian, UnitRay};
use crate::residual::{PixelResidual, ZERO_RAY_EPS};
use crate::so3::skew;
use nalgebra::{Matrix2x3, Matrix2x6, Matrix3, Matrix3x2, Matrix3x6, Vector2, Vector3};

/// Jacobian blocks of [`crate::residual::ray_error`], by role.
#[derive(Debug, Clone)]
pub struct RayErrorJacobians {
    /// With respect to the feature increment `[dtheta, dn]`.
    pub feature: Matrix3<f64>,
    /// Main-anchor role of pose `m` (zero rotation columns never occur here;
    /// the ray is carried in `m`'s frame).
    pub main: Matrix3x6<f64>,
    /// Associate-anchor role of pose `a` (position columns only).
    pub assoc: Matrix3x6<f64>,
    /// Observer role of pose `i` (measurement rotation and center position).
    pub observer: Matrix3x6<f64>,
}

impl RayErrorJacobians {
    /// Derivative with respect to the given pose id, summing coincident roles.
    pub fn pose_total(
        &self,
        pose_id: usize,
        main_id: usize,
        assoc_id: usize,
        obs_id: usize,
    ) -> Matrix3x6<f64> {
        let mut total = Matrix3x6::zeros();
        if pose_id == main_id {
            total += self.main;
        }
        if pose_id == assoc_id {
            total += self.assoc;
        }
        if pose_id == obs_id {
            total += self.observer;
        }
        total
    }
}

/// Exact Jacobians of the ray-direction residual.
pub fn ray_error_jacobians(
    f: &ParallaxFeature,
    t_main: &CameraPose,
    t_assoc: &CameraPose,
    t_obs: &CameraPose,
    measured_ray: &UnitRay,
) -> Result<RayErrorJacobians, GeometryError> {
    let a = t_main.position - t_assoc.position;
    let w = t_main.rotation * f.ray.as_vector();
    let (cos_t, sin_t) = (f.theta.cos(), f.theta.sin());
    let g = a.cross(&w);
    let s_g = g.norm();
    // Unit cross direction; at exact baseline/ray collinearity the norm term
    // is not differentiable and we take the zero subgradient.
    let g_hat = if s_g > 1e-300 { g / s_g } else { Vector3::zeros() };
    let a_dot_w = a.dot(&w);
    let coeff = cos_t * s_g - sin_t * a_dot_w;

    let n = scaled_ray(f, t_main, t_assoc, &t_obs.position);
    let n_norm = n.norm();
    if n_norm <= ZERO_RAY_EPS {
        return Err(GeometryError::ZeroRay);
    }
    let n_hat = n / n_norm;
    // Jacobian of normalization: (I - nn^T)/|N|.
    let proj = (Matrix3::identity() - n_hat * n_hat.transpose()) / n_norm;

    // d theta column.
    let dn_dtheta =
        w * (-sin_t * s_g - cos_t * a_dot_w) + (t_main.position - t_obs.position) * cos_t;

    // Chain through the world ray direction: shared by dn and dphi_main.
    // dN = w * (cos_t g_hat^T S(a) - sin_t a^T) dw + coeff * dw
    let row_w = (cos_t * (skew(&a).transpose() * g_hat) - sin_t * a).transpose();
    let dn_dw = w * row_w + Matrix3::identity() * coeff;
    // S(a)^T = -S(a); using the transpose keeps the row-form explicit.

    let dw_ddn: Matrix3x2<f64> = t_main.rotation.matrix() * ray_retraction_jacobian(&f.ray);
    let dw_dphi_m: Matrix3<f64> = -(t_main.rotation.matrix() * skew(f.ray.as_vector()));

    let feat_dn = dn_dw * dw_ddn;
    let mut feature = Matrix3::zeros();
    feature.set_column(0, &(proj * dn_dtheta));
    let feat_cols = proj * feat_dn;
    feature.set_column(1, &feat_cols.column(0).into_owned());
    feature.set_column(2, &feat_cols.column(1).into_owned());

    // Main anchor: rotation carries the ray, position enters both the
    // baseline and the ray origin.
    let row_pm = (-(skew(&w).transpose() * g_hat) * cos_t - w * sin_t).transpose();
    let dn_dpm = w * row_pm + Matrix3::identity() * sin_t;
    let mut main = Matrix3x6::zeros();
    let main_rot = proj * (dn_dw * dw_dphi_m);
    let main_pos = proj * dn_dpm;
    main.view_mut((0, 0), (3, 3)).copy_from(&main_rot);
    main.view_mut((0, 3), (3, 3)).copy_from(&main_pos);

    // Associate anchor: baseline only, opposite sign of the p_m baseline part.
    let dn_dpa = -(w * row_pm);
    let mut assoc = Matrix3x6::zeros();
    assoc.view_mut((0, 3), (3, 3)).copy_from(&(proj * dn_dpa));

    // Observer: center shifts the ray, rotation moves the measurement.
    let mut observer = Matrix3x6::zeros();
    let obs_rot = t_obs.rotation.matrix() * skew(measured_ray.as_vector());
    let obs_pos = proj * (-sin_t);
    observer.view_mut((0, 0), (3, 3)).copy_from(&obs_rot);
    observer.view_mut((0, 3), (3, 3)).copy_from(&obs_pos);

    Ok(RayErrorJacobians {
        feature,
        main,
        assoc,
        observer,
    })
}

/// Jacobian blocks of the pixel reprojection residual.
#[derive(Debug, Clone)]
pub struct PixelJacobians {
    /// With respect to the world point.
    pub point: Matrix2x3<f64>,
    /// With respect to the observing pose `[dphi, dp]`.
    pub observer: Matrix2x6<f64>,
}

/// Pixel residual and its exact Jacobians for an XYZ feature.
pub fn reprojection_jacobians(
    point: &Vector3<f64>,
    t_obs: &CameraPose,
    pixel: &Vector2<f64>,
    k: &CameraIntrinsics,
) -> Result<(PixelResidual, PixelJacobians), GeometryError> {
    let q = t_obs.world_to_local(point);
    if q.z == 0.0 {
        return Err(GeometryError::AtImagePlane);
    }
    let res = PixelResidual {
        residual: k.project_normalized(&Vector2::new(q.x / q.z, q.y / q.z)) - pixel,
        behind_camera: q.z < 0.0,
    };
    let iz = 1.0 / q.z;
    #[rustfmt::skip]
    let de_dq = Matrix2x3::new(
        k.fx * iz, 0.0,       -k.fx * q.x * iz * iz,
        0.0,       k.fy * iz, -k.fy * q.y * iz * iz,
    );
    let rt = t_obs.rotation.matrix().transpose();
    let point_jac = de_dq * rt;
    let mut observer = Matrix2x6::zeros();
    // Right-multiplicative rotation increment: q = Exp(-dphi) R^T (x - p).
    observer.view_mut((0, 0), (2, 3)).copy_from(&(de_dq * skew(&q)));
    observer.view_mut((0, 3), (2, 3)).copy_from(&(-point_jac));
    Ok((res, PixelJacobians { point: point_jac, observer }))
}

/// Jacobian blocks of the inverse-depth pixel residual.
#[derive(Debug, Clone)]
pub struct IdpJacobians {
    /// With respect to the reciprocal depth.
    pub rho: Vector2<f64>,
    /// Anchor-pose role (the stored bearing rides on the anchor frame).
    pub anchor: Matrix2x6<f64>,
    /// Observer-pose role.
    pub observer: Matrix2x6<f64>,
}

/// Pixel residual and Jacobians for an inverse-depth feature.
pub fn idp_jacobians(
    f: &InverseDepthFeature,
    t_anchor: &CameraPose,
    t_obs: &CameraPose,
    pixel: &Vector2<f64>,
    k: &CameraIntrinsics,
) -> Result<(PixelResidual, IdpJacobians), GeometryError> {
    let point = f.to_point(t_anchor);
    let (res, pj) = reprojection_jacobians(&point, t_obs, pixel, k)?;
    let world_ray = t_anchor.rotation * f.ray.as_vector();
    let rho_col = pj.point * (-world_ray / (f.rho * f.rho));
    let mut anchor = Matrix2x6::zeros();
    let danchor_rot = pj.point * (-(t_anchor.rotation.matrix() * skew(f.ray.as_vector())) / f.rho);
    anchor.view_mut((0, 0), (2, 3)).copy_from(&danchor_rot);
    anchor.view_mut((0, 3), (2, 3)).copy_from(&pj.point);
    Ok((
        res,
        IdpJacobians {
            rho: rho_col,
            anchor,
            observer: pj.observer,
        },
    ))
}
