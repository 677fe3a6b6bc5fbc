//! Rotations, rigid transforms and the pinhole camera.
//!
//! Rotations are carried as [`UnitQuaternion`]; the matrix view is always
//! available through `to_rotation_matrix()`. Rigid transforms are
//! [`Isometry3`]. Tangent-space perturbations are applied on the right,
//! `R ⊞ δ = R · Exp(δ)`, everywhere in the crate.

use nalgebra::{Isometry3, Matrix3, Translation3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Standard gravity magnitude, m/s².
pub const GRAVITY_MAGNITUDE: f64 = 9.81;

/// Default minimum depth accepted by [`project`], meters.
pub const MIN_DEPTH: f64 = 1e-4;

const SMALL_ANGLE: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("non-finite rotation vector ({0}, {1}, {2})")]
    NonFinite(f64, f64, f64),
    #[error("point depth {depth} is not above the minimum {min_depth}")]
    NonPositiveDepth { depth: f64, min_depth: f64 },
    #[error("gravity magnitude {0} m/s² is too small to define a direction")]
    DegenerateGravity(f64),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
}

/// Gravity vector in the global frame, `[0, 0, g]`.
pub fn gravity_world() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, GRAVITY_MAGNITUDE)
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// SO(3) exponential of a rotation vector.
pub fn exp_so3(omega: &Vector3<f64>) -> Result<UnitQuaternion<f64>, GeometryError> {
    if !omega.iter().all(|c| c.is_finite()) {
        return Err(GeometryError::NonFinite(omega.x, omega.y, omega.z));
    }
    Ok(exp_so3_unchecked(omega))
}

/// [`exp_so3`] for callers that already guarantee finite input.
pub fn exp_so3_unchecked(omega: &Vector3<f64>) -> UnitQuaternion<f64> {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let (w, k) = if theta < SMALL_ANGLE {
        // cos(θ/2) and sin(θ/2)/θ to second order
        (1.0 - theta2 / 8.0, 0.5 - theta2 / 48.0)
    } else {
        let half = 0.5 * theta;
        (half.cos(), half.sin() / theta)
    };
    UnitQuaternion::new_normalize(nalgebra::Quaternion::new(w, k * omega.x, k * omega.y, k * omega.z))
}

/// Principal SO(3) logarithm, `‖result‖ ≤ π`.
///
/// At exactly π the quaternion sign is ambiguous; the axis is then oriented so
/// that its largest-magnitude component (equivalently the largest diagonal
/// entry of `R + I`) is positive.
pub fn log_so3(r: &UnitQuaternion<f64>) -> Vector3<f64> {
    let q = r.quaternion();
    let (mut w, mut v) = (q.w, q.imag());
    if w < 0.0 {
        w = -w;
        v = -v;
    }
    let vn = v.norm();
    if vn < SMALL_ANGLE {
        // 2·atan(|v|/w)/|v| ≈ 2/w · (1 − |v|²/(3w²))
        let scale = 2.0 / w * (1.0 - vn * vn / (3.0 * w * w));
        return v * scale;
    }
    if w < 1e-12 {
        let imax = v.iamax();
        if v[imax] < 0.0 {
            v = -v;
        }
    }
    let theta = 2.0 * vn.atan2(w);
    v * (theta / vn)
}

/// Right Jacobian of SO(3): `Exp(φ + δ) ≈ Exp(φ) Exp(Jr(φ) δ)`.
pub fn right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let k = skew(phi);
    if theta2 < 1e-10 {
        return Matrix3::identity() - 0.5 * k + k * k / 6.0;
    }
    let theta = theta2.sqrt();
    Matrix3::identity() - (1.0 - theta.cos()) / theta2 * k
        + (theta - theta.sin()) / (theta2 * theta) * k * k
}

/// Inverse of [`right_jacobian`].
pub fn right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let k = skew(phi);
    if theta2 < 1e-10 {
        return Matrix3::identity() + 0.5 * k + k * k / 12.0;
    }
    let theta = theta2.sqrt();
    Matrix3::identity() + 0.5 * k + (1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())) * k * k
}

/// Inverse of the left Jacobian, `Jl⁻¹(φ) = Jr⁻¹(−φ)`.
pub fn left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    right_jacobian_inv(&(-phi))
}

/// Normalized pinhole projection `(x/z, y/z)`.
pub fn project(p_camera: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
    project_with_min_depth(p_camera, MIN_DEPTH)
}

pub fn project_with_min_depth(p: &Vector3<f64>, min_depth: f64) -> Result<Vector2<f64>, GeometryError> {
    if !(p.z > min_depth) {
        return Err(GeometryError::NonPositiveDepth { depth: p.z, min_depth });
    }
    Ok(Vector2::new(p.x / p.z, p.y / p.z))
}

/// Jacobian of [`project`] with respect to the camera-frame point.
pub fn projection_jacobian(p: &Vector3<f64>) -> nalgebra::Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    nalgebra::Matrix2x3::new(iz, 0.0, -p.x * iz2, 0.0, iz, -p.y * iz2)
}

/// Rotation `ᴳ_I₀R` that maps the measured gravity (in the first IMU frame)
/// onto `[0, 0, ‖g‖]`.
///
/// The third row is `gᵀ/‖g‖`. The first row is the I₀ x-axis made orthogonal
/// to it by Gram-Schmidt (the y-axis is used when x is nearly parallel to
/// gravity), which fixes the yaw deterministically.
pub fn gravity_align(g_in_i0: &Vector3<f64>) -> Result<UnitQuaternion<f64>, GeometryError> {
    let norm = g_in_i0.norm();
    if !(norm > 1.0) {
        return Err(GeometryError::DegenerateGravity(norm));
    }
    let z = g_in_i0 / norm;
    let mut seed = Vector3::x();
    if z.dot(&seed).abs() > 0.9 {
        seed = Vector3::y();
    }
    let x = (seed - z * z.dot(&seed)).normalize();
    let y = z.cross(&x);
    let m = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    Ok(UnitQuaternion::from_matrix(&m))
}

/// Yaw angle (rotation about the global z-axis) of a world-from-body rotation.
pub fn yaw_of(r: &UnitQuaternion<f64>) -> f64 {
    let m = r.to_rotation_matrix();
    let m = m.matrix();
    m[(1, 0)].atan2(m[(0, 0)])
}

pub fn rotation_about_z(angle: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&Vector3::z_axis(), angle)
}

/// Build an [`Isometry3`] from a rotation and a translation.
pub fn rigid(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Isometry3<f64> {
    Isometry3::from_parts(Translation3::from(translation), rotation)
}

/// Rigid camera-IMU calibration.
///
/// `rot_imu_cam` is `ᴵ_C R` and `trans_imu_cam` is `ᴵp_C`: the pose of the
/// camera expressed in the IMU frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extrinsics {
    pub rot_imu_cam: UnitQuaternion<f64>,
    pub trans_imu_cam: Vector3<f64>,
}

impl Extrinsics {
    pub fn identity() -> Self {
        Self { rot_imu_cam: UnitQuaternion::identity(), trans_imu_cam: Vector3::zeros() }
    }

    /// `ᶜ_I R`
    pub fn rot_cam_imu(&self) -> UnitQuaternion<f64> {
        self.rot_imu_cam.inverse()
    }

    /// `ᶜp_I = −ᶜ_I R ᴵp_C`
    pub fn trans_cam_imu(&self) -> Vector3<f64> {
        -(self.rot_cam_imu() * self.trans_imu_cam)
    }

    pub fn imu_from_cam(&self) -> Isometry3<f64> {
        rigid(self.rot_imu_cam, self.trans_imu_cam)
    }

    pub fn cam_from_imu(&self) -> Isometry3<f64> {
        self.imu_from_cam().inverse()
    }
}

impl Default for Extrinsics {
    fn default() -> Self {
        Self::identity()
    }
}

/// Undistorted pinhole intrinsics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinholeCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl PinholeCamera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self, GeometryError> {
        let cam = Self { fx, fy, cx, cy, width, height };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidCamera(format!("focal lengths must be positive ({}, {})", self.fx, self.fy)));
        }
        let inside = self.cx >= 0.0 && self.cy >= 0.0 && self.cx <= self.width as f64 && self.cy <= self.height as f64;
        if !inside || self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidCamera(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Pixel to normalized image-plane coordinates.
    pub fn normalize(&self, pixel: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy)
    }

    pub fn denormalize(&self, uv: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new(uv.x * self.fx + self.cx, uv.y * self.fy + self.cy)
    }

    /// Project a camera-frame point to pixels.
    pub fn project_pixel(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        project(p).map(|uv| self.denormalize(&uv))
    }

    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0 && pixel.y >= 0.0 && pixel.x <= (self.width - 1) as f64 && pixel.y <= (self.height - 1) as f64
    }

    /// Standard deviation in normalized units that corresponds to `sigma_px` pixels.
    pub fn pixel_sigma_normalized(&self, sigma_px: f64) -> f64 {
        sigma_px / (0.5 * (self.fx + self.fy))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    #[test]
    fn exp_of_zero_is_identity() {
        let r = exp_so3(&Vector3::zeros()).unwrap();
        assert_relative_eq!(r.angle(), 0.0);
    }

    #[test]
    fn exp_of_pi_about_x() {
        let r = exp_so3(&Vector3::new(PI, 0.0, 0.0)).unwrap();
        let m = r.to_rotation_matrix().into_inner();
        assert_relative_eq!(m, Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0)), epsilon = 1e-12);
    }

    #[test]
    fn exp_rejects_nan() {
        assert!(matches!(exp_so3(&Vector3::new(f64::NAN, 0.0, 0.0)), Err(GeometryError::NonFinite(..))));
    }

    #[test]
    fn log_identity_and_roundtrip() {
        assert_relative_eq!(log_so3(&UnitQuaternion::identity()), Vector3::zeros());
        let w = Vector3::new(0.1, 0.2, 0.3);
        assert_relative_eq!(log_so3(&exp_so3(&w).unwrap()), w, epsilon = 1e-10);
    }

    #[test]
    fn log_of_half_turn_about_z() {
        let r = UnitQuaternion::from_matrix(&Matrix3::from_diagonal(&Vector3::new(-1.0, -1.0, 1.0)));
        assert_relative_eq!(log_so3(&r), Vector3::new(0.0, 0.0, PI), epsilon = 1e-8);
        let r = UnitQuaternion::new_unchecked(nalgebra::Quaternion::new(0.0, 0.0, 0.0, -1.0));
        assert_relative_eq!(log_so3(&r), Vector3::new(0.0, 0.0, PI), epsilon = 1e-12);
    }

    #[test]
    fn small_angle_branch_is_continuous() {
        let w = Vector3::new(3e-9, -2e-9, 1e-9);
        let r = exp_so3(&w).unwrap();
        assert_relative_eq!(log_so3(&r), w, epsilon = 1e-20, max_relative = 1e-8);
    }

    #[test]
    fn right_jacobian_matches_finite_difference() {
        let phi = Vector3::new(0.4, -0.7, 1.1);
        let jr = right_jacobian(&phi);
        let base = exp_so3_unchecked(&phi);
        let h = 1e-6;
        for k in 0..3 {
            let mut d = Vector3::zeros();
            d[k] = h;
            let plus = log_so3(&(base.inverse() * exp_so3_unchecked(&(phi + d))));
            let minus = log_so3(&(base.inverse() * exp_so3_unchecked(&(phi - d))));
            let col = (plus - minus) / (2.0 * h);
            assert_relative_eq!(col, jr.column(k).into_owned(), epsilon = 1e-8);
        }
        assert_relative_eq!(right_jacobian_inv(&phi) * jr, Matrix3::identity(), epsilon = 1e-12);
    }

    #[test]
    fn project_examples() {
        assert_eq!(project(&Vector3::new(0.0, 0.0, 1.0)).unwrap(), Vector2::new(0.0, 0.0));
        assert_eq!(project(&Vector3::new(1.0, 2.0, 2.0)).unwrap(), Vector2::new(0.5, 1.0));
        assert!(matches!(project(&Vector3::new(1.0, 1.0, 0.0)), Err(GeometryError::NonPositiveDepth { .. })));
    }

    #[test]
    fn gravity_align_examples() {
        let r = gravity_align(&Vector3::new(0.0, 0.0, GRAVITY_MAGNITUDE)).unwrap();
        assert_relative_eq!(r.angle(), 0.0, epsilon = 1e-12);
        let g = Vector3::new(GRAVITY_MAGNITUDE, 0.0, 0.0);
        let r = gravity_align(&g).unwrap();
        assert_relative_eq!(r * g, gravity_world(), epsilon = 1e-9);
        assert!(matches!(gravity_align(&Vector3::new(0.1, 0.0, 0.0)), Err(GeometryError::DegenerateGravity(_))));
    }

    #[test]
    fn extrinsics_inverse_pair() {
        let ext = Extrinsics {
            rot_imu_cam: exp_so3_unchecked(&Vector3::new(0.3, -1.2, 0.5)),
            trans_imu_cam: Vector3::new(0.05, -0.02, 0.1),
        };
        let p = Vector3::new(1.0, 2.0, 3.0);
        let via_parts = ext.rot_cam_imu() * p + ext.trans_cam_imu();
        assert_relative_eq!(ext.cam_from_imu().transform_vector(&p) + ext.cam_from_imu().translation.vector, via_parts, epsilon = 1e-12);
        let id = ext.imu_from_cam() * ext.cam_from_imu();
        assert_relative_eq!(id.translation.vector, Vector3::zeros(), epsilon = 1e-12);
        assert_relative_eq!(id.rotation.angle(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn camera_validation() {
        assert!(PinholeCamera::new(-1.0, 1.0, 10.0, 10.0, 20, 20).is_err());
        assert!(PinholeCamera::new(100.0, 100.0, 30.0, 10.0, 20, 20).is_err());
        let cam = PinholeCamera::new(250.0, 260.0, 160.0, 120.0, 320, 240).unwrap();
        let px = Vector2::new(10.0, 200.0);
        assert_relative_eq!(cam.denormalize(&cam.normalize(&px)), px, epsilon = 1e-12);
    }

    fn vec3(max: f64) -> impl Strategy<Value = Vector3<f64>> {
        (-max..max, -max..max, -max..max).prop_map(|(a, b, c)| Vector3::new(a, b, c))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn exp_log_roundtrip(w in vec3(2.0)) {
            let n = w.norm();
            prop_assume!(n > 0.0 && n < PI - 1e-3);
            let r = exp_so3(&w).unwrap();
            let m = r.to_rotation_matrix().into_inner();
            prop_assert!((m.determinant() - 1.0).abs() < 1e-9);
            prop_assert!((m.transpose() * m - Matrix3::identity()).amax() < 1e-9);
            prop_assert!((r.quaternion().norm() - 1.0).abs() < 1e-12);
            prop_assert!((log_so3(&r) - w).amax() < 1e-9);
        }

        #[test]
        fn projection_is_scale_invariant(x in -3.0..3.0f64, y in -3.0..3.0f64, z in 0.1..10.0f64, lambda in 0.01..100.0f64) {
            let p = Vector3::new(x, y, z);
            let a = project(&p).unwrap();
            let b = project(&(p * lambda)).unwrap();
            prop_assert!((a - b).amax() < 1e-12);
        }

        #[test]
        fn gravity_align_postcondition(g in vec3(20.0)) {
            prop_assume!(g.norm() > 1.0);
            let r = gravity_align(&g).unwrap();
            let mapped = r * g;
            prop_assert!((mapped - Vector3::new(0.0, 0.0, g.norm())).amax() < 1e-9);
            let third = r.to_rotation_matrix().into_inner().row(2).transpose();
            prop_assert!((third - g / g.norm()).amax() < 1e-9);
        }
    }
}
