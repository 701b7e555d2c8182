//! Rigid-body motion, pinhole projection and the projection Jacobian.
//!
//! Poses map points from a source camera frame into a destination frame.
//! Increments are applied on the left: `T <- exp(delta) * T`, and twists are
//! ordered `[translation; rotation]`.

use nalgebra::{Matrix2x6, Matrix3, Matrix4, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Rotation angle below which the closed-form exponential/logarithm switch
/// to their Taylor expansions.
const SMALL_ANGLE: f64 = 1e-8;

/// Default distance to keep between a projected point and the image border.
///
/// Bilinear sampling needs one extra pixel and the central-difference
/// stencil another.
pub const DEFAULT_BORDER_MARGIN: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("point has non-positive inverse depth {0}")]
    NonPositiveInverseDepth(f64),
    #[error("point projects out of view")]
    OutOfView,
    #[error("matrix is not a rigid transform: {0}")]
    NotRigid(String),
}

/// Skew-symmetric cross-product matrix.
pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SE3Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for SE3Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl SE3Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Exponential map of a twist `[v; w]`.
    pub fn exp(twist: &Vector6<f64>) -> Self {
        let v = Vector3::new(twist[0], twist[1], twist[2]);
        let w = Vector3::new(twist[3], twist[4], twist[5]);
        let theta_sq = w.norm_squared();
        let theta = theta_sq.sqrt();
        let w_hat = hat(&w);
        let w_hat_sq = w_hat * w_hat;
        let (a, b, c) = if theta < SMALL_ANGLE {
            (1.0, 0.5, 1.0 / 6.0)
        } else {
            let (s, co) = theta.sin_cos();
            (
                s / theta,
                (1.0 - co) / theta_sq,
                (theta - s) / (theta_sq * theta),
            )
        };
        let rotation = Matrix3::identity() + w_hat * a + w_hat_sq * b;
        let left_jacobian = Matrix3::identity() + w_hat * b + w_hat_sq * c;
        Self {
            rotation,
            translation: left_jacobian * v,
        }
    }

    /// Logarithm map; the rotation part of the result has norm in `[0, pi]`.
    pub fn log(&self) -> Vector6<f64> {
        let w = so3_log(&self.rotation);
        let theta_sq = w.norm_squared();
        let theta = theta_sq.sqrt();
        let w_hat = hat(&w);
        let coeff = if theta < SMALL_ANGLE {
            1.0 / 12.0
        } else {
            let (s, c) = theta.sin_cos();
            (1.0 - theta * s / (2.0 * (1.0 - c))) / theta_sq
        };
        let v_inv = Matrix3::identity() - w_hat * 0.5 + w_hat * w_hat * coeff;
        let v = v_inv * self.translation;
        Vector6::new(v.x, v.y, v.z, w.x, w.y, w.z)
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &SE3Pose) -> SE3Pose {
        SE3Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> SE3Pose {
        let rt = self.rotation.transpose();
        SE3Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Left-multiplied update `exp(delta) * self`.
    pub fn left_update(&self, delta: &Vector6<f64>) -> SE3Pose {
        SE3Pose::exp(delta).compose(self)
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Row-major 4x4 representation used by the dataset manifest.
    pub fn to_row_major(&self) -> [f64; 16] {
        let m = self.to_matrix();
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = m[(r, c)];
            }
        }
        out
    }

    pub fn from_row_major(values: &[f64; 16]) -> Result<SE3Pose, GeometryError> {
        let m = Matrix4::from_row_slice(values);
        SE3Pose::from_matrix(&m)
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Result<SE3Pose, GeometryError> {
        let last = m.fixed_view::<1, 4>(3, 0);
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
            return Err(GeometryError::NotRigid("bottom row must be [0 0 0 1]".into()));
        }
        let rotation: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into();
        let orth = (rotation * rotation.transpose() - Matrix3::identity()).amax();
        if orth > 1e-6 || (rotation.determinant() - 1.0).abs() > 1e-6 {
            return Err(GeometryError::NotRigid(format!(
                "rotation block is not orthonormal (error {orth:e})"
            )));
        }
        Ok(SE3Pose {
            rotation,
            translation: m.fixed_view::<3, 1>(0, 3).into(),
        })
    }

    /// Rotation angle in radians.
    pub fn rotation_angle(&self) -> f64 {
        so3_log(&self.rotation).norm()
    }
}

fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos_theta = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    let skew = vee(&(r - r.transpose())) * 0.5;
    if theta < SMALL_ANGLE {
        return skew;
    }
    if std::f64::consts::PI - theta > 1e-6 {
        return skew * (theta / theta.sin());
    }
    // Near pi the antisymmetric part vanishes; recover the axis from the
    // symmetric part instead.
    let b = (r + Matrix3::identity()) * 0.5;
    let mut k = 0;
    for i in 1..3 {
        if b[(i, i)] > b[(k, k)] {
            k = i;
        }
    }
    let mut axis = Vector3::new(b[(0, k)], b[(1, k)], b[(2, k)]);
    axis /= b[(k, k)].max(0.0).sqrt().max(f64::MIN_POSITIVE);
    axis = axis.normalize();
    if axis.dot(&skew) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64)
            || !(self.cy >= 0.0 && self.cy < self.height as f64)
        {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Intrinsics of pyramid level `level`: coordinates are divided by
    /// `2^level` without a half-pixel shift.
    pub fn at_level(&self, level: usize) -> CameraIntrinsics {
        let s = (1u64 << level) as f64;
        CameraIntrinsics {
            fx: self.fx / s,
            fy: self.fy / s,
            cx: self.cx / s,
            cy: self.cy / s,
            width: self.width >> level,
            height: self.height >> level,
        }
    }

    pub fn in_view(&self, p: &Vector2<f64>, margin: f64) -> bool {
        p.x >= margin
            && p.y >= margin
            && p.x <= self.width as f64 - 1.0 - margin
            && p.y <= self.height as f64 - 1.0 - margin
    }

    /// Bearing with unit z for a pixel.
    pub fn unproject_ray(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new(
            (pixel.x - self.cx) / self.fx,
            (pixel.y - self.cy) / self.fy,
            1.0,
        )
    }

    pub fn project_point(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        )
    }
}

/// A reference pixel with known inverse depth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointWithDepth {
    pub pixel: Vector2<f64>,
    pub inverse_depth: f64,
}

impl PointWithDepth {
    pub fn new(u: f64, v: f64, inverse_depth: f64) -> Self {
        Self {
            pixel: Vector2::new(u, v),
            inverse_depth,
        }
    }

    pub fn from_depth(u: f64, v: f64, depth: f64) -> Self {
        Self::new(u, v, 1.0 / depth)
    }

    pub fn unproject(&self, intr: &CameraIntrinsics) -> Vector3<f64> {
        intr.unproject_ray(&self.pixel) / self.inverse_depth
    }

    /// Same point expressed at pyramid level `level`.
    pub fn at_level(&self, level: usize) -> PointWithDepth {
        let s = (1u64 << level) as f64;
        PointWithDepth {
            pixel: self.pixel / s,
            inverse_depth: self.inverse_depth,
        }
    }
}

/// Projects a reference point into the destination camera: `pi(T * pi^-1(p, d))`.
///
/// Returns `None` when the transformed point is behind the camera or lands
/// within `margin` pixels of the border.
pub fn project(
    point: &PointWithDepth,
    pose: &SE3Pose,
    intr_src: &CameraIntrinsics,
    intr_dst: &CameraIntrinsics,
    margin: f64,
) -> Option<Vector2<f64>> {
    if !(point.inverse_depth > 0.0) {
        return None;
    }
    let q = pose.transform(&point.unproject(intr_src));
    if !(q.z > 0.0) {
        return None;
    }
    let p = intr_dst.project_point(&q);
    intr_dst.in_view(&p, margin).then_some(p)
}

/// Derivative of the projected pixel with respect to a left-multiplied
/// se(3) increment, given the point in the destination camera frame.
pub fn projection_jacobian(q: &Vector3<f64>, intr: &CameraIntrinsics) -> Matrix2x6<f64> {
    let iz = 1.0 / q.z;
    let x = q.x * iz;
    let y = q.y * iz;
    let fx = intr.fx;
    let fy = intr.fy;
    // d(pixel)/dq * [I | -q^]
    Matrix2x6::new(
        fx * iz,
        0.0,
        -fx * x * iz,
        -fx * x * y,
        fx * (1.0 + x * x),
        -fx * y,
        0.0,
        fy * iz,
        -fy * y * iz,
        -fy * (1.0 + y * y),
        fy * x * y,
        fy * x,
    )
}

/// Analytic 2x6 Jacobian of the projection of `point` under `pose`.
pub fn pose_jacobian(
    point: &PointWithDepth,
    pose: &SE3Pose,
    intr_src: &CameraIntrinsics,
    intr_dst: &CameraIntrinsics,
    margin: f64,
) -> Result<Matrix2x6<f64>, GeometryError> {
    if !(point.inverse_depth > 0.0) {
        return Err(GeometryError::NonPositiveInverseDepth(point.inverse_depth));
    }
    let q = pose.transform(&point.unproject(intr_src));
    if !(q.z > 0.0) || !intr_dst.in_view(&intr_dst.project_point(&q), margin) {
        return Err(GeometryError::OutOfView);
    }
    Ok(projection_jacobian(&q, intr_dst))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(56.0, 58.0, 31.5, 30.5, 64, 64).unwrap()
    }

    /// Sum of the first `terms` terms of the matrix exponential of the 4x4
    /// twist matrix.
    fn series_exp(twist: &Vector6<f64>, terms: usize) -> Matrix4<f64> {
        let mut xi = Matrix4::zeros();
        let w = Vector3::new(twist[3], twist[4], twist[5]);
        xi.fixed_view_mut::<3, 3>(0, 0).copy_from(&hat(&w));
        xi[(0, 3)] = twist[0];
        xi[(1, 3)] = twist[1];
        xi[(2, 3)] = twist[2];
        let mut sum = Matrix4::identity();
        let mut term = Matrix4::identity();
        for k in 1..terms {
            term = term * xi / k as f64;
            sum += term;
        }
        sum
    }

    #[test]
    fn exp_of_zero_is_identity() {
        assert_eq!(SE3Pose::exp(&Vector6::zeros()), SE3Pose::identity());
    }

    #[test]
    fn exp_of_pure_translation() {
        let t = 0.75;
        let p = SE3Pose::exp(&Vector6::new(t, 0.0, 0.0, 0.0, 0.0, 0.0));
        assert_eq!(p.rotation, Matrix3::identity());
        assert_eq!(p.translation, Vector3::new(t, 0.0, 0.0));
    }

    #[test]
    fn exp_matches_series_oracle() {
        let v = Vector6::new(0.1, -0.2, 0.05, 0.3, 0.1, -0.2);
        let oracle = series_exp(&v, 20);
        let m = SE3Pose::exp(&v).to_matrix();
        assert!((m - oracle).amax() < 1e-12, "{}", (m - oracle).amax());
    }

    #[test]
    fn exp_small_angle_branch_is_continuous() {
        let v = Vector6::new(0.3, 0.1, -0.2, 1e-9, -2e-9, 5e-10);
        let m = SE3Pose::exp(&v).to_matrix();
        assert!((m - series_exp(&v, 20)).amax() < 1e-15);
    }

    #[test]
    fn log_near_pi() {
        let axis = Vector3::new(1.0, 2.0, -0.5).normalize();
        let w = axis * (std::f64::consts::PI - 1e-9);
        let twist = Vector6::new(0.2, 0.1, 0.3, w.x, w.y, w.z);
        let back = SE3Pose::exp(&twist).log();
        assert!((back - twist).amax() < 1e-6, "{back} vs {twist}");
    }

    #[test]
    fn identity_projection_is_identity() {
        let k = intr();
        let p = PointWithDepth::from_depth(12.25, 40.5, 3.0);
        let q = project(&p, &SE3Pose::identity(), &k, &k, 2.0).unwrap();
        assert_relative_eq!(q, p.pixel, epsilon = 1e-12);
    }

    #[test]
    fn halving_depth_doubles_offset_from_principal_point() {
        let k = intr();
        let p = PointWithDepth::from_depth(40.0, 35.0, 4.0);
        // Moving the camera 2 units toward the point halves its depth.
        let pose = SE3Pose::from_translation(Vector3::new(0.0, 0.0, -2.0));
        let q = project(&p, &pose, &k, &k, 0.0).unwrap();
        assert_relative_eq!(q.x - k.cx, 2.0 * (p.pixel.x - k.cx), epsilon = 1e-12);
        assert_relative_eq!(q.y - k.cy, 2.0 * (p.pixel.y - k.cy), epsilon = 1e-12);
    }

    #[test]
    fn projection_rejects_points_behind_camera_and_outside_margin() {
        let k = intr();
        let p = PointWithDepth::from_depth(31.5, 30.5, 1.0);
        let behind = SE3Pose::from_translation(Vector3::new(0.0, 0.0, -2.0));
        assert!(project(&p, &behind, &k, &k, 2.0).is_none());
        let edge = PointWithDepth::from_depth(1.5, 30.5, 1.0);
        assert!(project(&edge, &SE3Pose::identity(), &k, &k, 2.0).is_none());
        assert!(project(&edge, &SE3Pose::identity(), &k, &k, 1.0).is_some());
        assert!(project(&PointWithDepth::new(3.0, 3.0, 0.0), &SE3Pose::identity(), &k, &k, 0.0).is_none());
    }

    #[test]
    fn jacobian_at_principal_point() {
        let k = intr();
        let p = PointWithDepth::from_depth(k.cx, k.cy, 1.0);
        let j = pose_jacobian(&p, &SE3Pose::identity(), &k, &k, 2.0).unwrap();
        assert_relative_eq!(j[(0, 0)], k.fx, epsilon = 1e-12);
        assert_eq!(j[(0, 2)], 0.0);
        assert_relative_eq!(j[(1, 1)], k.fy, epsilon = 1e-12);
        assert_eq!(j[(1, 2)], 0.0);
    }

    #[test]
    fn rotation_columns_invariant_to_joint_depth_translation_scaling() {
        let k = intr();
        let pose = SE3Pose::exp(&Vector6::new(0.1, -0.05, 0.2, 0.02, -0.03, 0.01));
        let p = PointWithDepth::from_depth(20.0, 41.0, 3.0);
        let j = pose_jacobian(&p, &pose, &k, &k, 0.0).unwrap();
        for s in [0.5, 2.0, 7.0] {
            let scaled_point = PointWithDepth::new(p.pixel.x, p.pixel.y, p.inverse_depth * s);
            let scaled_pose = SE3Pose::from_parts(pose.rotation, pose.translation / s);
            let js = pose_jacobian(&scaled_point, &scaled_pose, &k, &k, 0.0).unwrap();
            for r in 0..2 {
                for c in 3..6 {
                    assert_relative_eq!(js[(r, c)], j[(r, c)], max_relative = 1e-12);
                }
                for c in 0..3 {
                    assert_relative_eq!(js[(r, c)], j[(r, c)] * s, max_relative = 1e-12);
                }
            }
        }
    }

    #[test]
    fn jacobian_rejects_out_of_view() {
        let k = intr();
        let p = PointWithDepth::from_depth(0.5, 0.5, 1.0);
        assert_eq!(
            pose_jacobian(&p, &SE3Pose::identity(), &k, &k, 2.0),
            Err(GeometryError::OutOfView)
        );
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 0.0, 3.9, 4, 4).is_ok());
    }

    #[test]
    fn matrix_round_trip() {
        let pose = SE3Pose::exp(&Vector6::new(0.3, -0.1, 0.7, 0.4, -0.2, 0.9));
        let back = SE3Pose::from_row_major(&pose.to_row_major()).unwrap();
        assert_eq!(back, pose);
        let mut bad = pose.to_row_major();
        bad[0] += 0.1;
        assert!(SE3Pose::from_row_major(&bad).is_err());
    }
}
