//! Initialization metrics and success gating.

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::geometry::{log_so3, rotation_about_z};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("ground-truth displacement {0} m is too small to define a scale")]
    NearZeroMotion(f64),
    #[error("{est} estimated poses but {gt} ground-truth poses")]
    LengthMismatch { est: usize, gt: usize },
    #[error("chi-square test needs positive degrees of freedom, got {0}")]
    NonPositiveDof(i64),
    #[error("confidence level {0} outside (0, 1)")]
    InvalidLevel(f64),
}

/// Minimum ground-truth displacement for [`scale_error`], meters.
pub const MIN_DISPLACEMENT: f64 = 1e-3;

/// Angle in degrees between two gravity vectors.
pub fn gravity_angle(g_est: &Vector3<f64>, g_gt: &Vector3<f64>) -> f64 {
    let c = g_est.dot(g_gt) / (g_est.norm() * g_gt.norm());
    c.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Angle between the body-frame gravity directions `Rᵀe_z` of two
/// world-from-body orientations, in degrees. Yaw-invariant.
pub fn gravity_error(r_est: &UnitQuaternion<f64>, r_gt: &UnitQuaternion<f64>) -> f64 {
    gravity_angle(&(r_est.inverse() * Vector3::z()), &(r_gt.inverse() * Vector3::z()))
}

/// `100·|s − s_gt|/s_gt` with `s_gt = ‖gt‖/‖predicted‖`.
pub fn scale_error(s_est: f64, predicted_displacement: &Vector3<f64>, gt_displacement: &Vector3<f64>) -> Result<f64, EvalError> {
    let gt = gt_displacement.norm();
    if !(gt > MIN_DISPLACEMENT) || !(predicted_displacement.norm() > 0.0) {
        return Err(EvalError::NearZeroMotion(gt));
    }
    let s_gt = gt / predicted_displacement.norm();
    Ok(100.0 * (s_est - s_gt).abs() / s_gt)
}

/// A pose as world-from-body rotation and position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub position: Vector3<f64>,
}

/// Yaw angle of the rotation about z closest to `r`.
fn closest_yaw(r: &UnitQuaternion<f64>) -> f64 {
    let m = r.to_rotation_matrix();
    let e = m.matrix();
    (e[(1, 0)] - e[(0, 1)]).atan2(e[(0, 0)] + e[(1, 1)])
}

/// Align `est` to `gt` by the yaw and translation that best map the first
/// estimated pose onto the first ground-truth pose.
pub fn align_first_pose(est: &[Pose], gt: &[Pose]) -> Result<Vec<Pose>, EvalError> {
    if est.len() != gt.len() || est.is_empty() {
        return Err(EvalError::LengthMismatch { est: est.len(), gt: gt.len() });
    }
    let yaw = rotation_about_z(closest_yaw(&(gt[0].rotation * est[0].rotation.inverse())));
    Ok(est.iter().map(|p| Pose { rotation: yaw * p.rotation, position: yaw * (p.position - est[0].position) + gt[0].position }).collect())
}

/// RMS rotation error (degrees) and RMS position error (meters) after
/// [`align_first_pose`].
pub fn window_ate(est: &[Pose], gt: &[Pose]) -> Result<(f64, f64), EvalError> {
    let aligned = align_first_pose(est, gt)?;
    let n = gt.len() as f64;
    let rot = aligned.iter().zip(gt).map(|(a, g)| log_so3(&(g.rotation.inverse() * a.rotation)).norm_squared()).sum::<f64>() / n;
    let pos = aligned.iter().zip(gt).map(|(a, g)| (a.position - g.position).norm_squared()).sum::<f64>() / n;
    Ok((rot.sqrt().to_degrees(), pos.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareResult {
    pub statistic: f64,
    pub dof: usize,
    pub threshold: f64,
    pub passed: bool,
}

/// Compare a sum of squared whitened residuals with the chi-square quantile.
pub fn chi_square_gate(whitened_cost: f64, residual_dim: usize, variable_dim: usize, level: f64) -> Result<ChiSquareResult, EvalError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(EvalError::InvalidLevel(level));
    }
    let dof = residual_dim as i64 - variable_dim as i64;
    if dof <= 0 {
        return Err(EvalError::NonPositiveDof(dof));
    }
    let threshold = ChiSquared::new(dof as f64).expect("positive dof").inverse_cdf(level);
    Ok(ChiSquareResult { statistic: whitened_cost, dof: dof as usize, threshold, passed: whitened_cost <= threshold })
}

/// Median of finite values; `None` when there are none.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Failure taxonomy of an initialization attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FailureCategory {
    /// Not enough usable observations.
    Obs,
    /// Rank-deficient or otherwise failed linear solve.
    Lin,
    /// Nonlinear refinement diverged or did not converge.
    NL,
    /// Covariance could not be recovered.
    Cov,
    /// Window trajectory error above threshold.
    Ate,
}

impl FailureCategory {
    pub fn label(&self) -> &'static str {
        match self {
            FailureCategory::Obs => "Obs.",
            FailureCategory::Lin => "Lin.",
            FailureCategory::NL => "NL.",
            FailureCategory::Cov => "Cov.",
            FailureCategory::Ate => "ATE",
        }
    }

    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            FailureCategory::Obs => 2,
            FailureCategory::Lin => 3,
            FailureCategory::NL => 4,
            FailureCategory::Cov => 5,
            FailureCategory::Ate => 6,
        }
    }
}

impl std::fmt::Display for FailureCategory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Default window ATE threshold, meters.
pub const ATE_THRESHOLD: f64 = 0.5;

/// Stage outcomes feeding the success gate, in pipeline order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateInputs {
    pub observations_ok: bool,
    pub linear_ok: bool,
    pub converged: bool,
    pub covariance_ok: bool,
    pub ate_m: Option<f64>,
    pub ate_threshold: f64,
}

/// First failing stage, or `None` on success.
pub fn success_gate(inputs: &GateInputs) -> Option<FailureCategory> {
    if !inputs.observations_ok {
        Some(FailureCategory::Obs)
    } else if !inputs.linear_ok {
        Some(FailureCategory::Lin)
    } else if !inputs.converged {
        Some(FailureCategory::NL)
    } else if !inputs.covariance_ok {
        Some(FailureCategory::Cov)
    } else if inputs.ate_m.is_some_and(|a| !(a <= inputs.ate_threshold)) {
        Some(FailureCategory::Ate)
    } else {
        None
    }
}

/// Metrics and verdict of one initialization window.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InitReport {
    pub window_id: usize,
    /// Final-stage gravity error, degrees.
    pub gravity_deg: Option<f64>,
    /// Final-stage error of `ᴵ⁰v_{I₀}`, m/s.
    pub velocity_mps: Option<f64>,
    pub gravity_lin_deg: Option<f64>,
    pub velocity_lin_mps: Option<f64>,
    pub scale_lin_pct: Option<f64>,
    pub scale_nl_pct: Option<f64>,
    pub ate_deg: Option<f64>,
    pub ate_m: Option<f64>,
    pub success: bool,
    pub failure: Option<FailureCategory>,
    pub failure_detail: Option<String>,
    pub chi_square: Option<ChiSquareResult>,
    pub t_lin_ms: Option<f64>,
    pub t_nl_ms: Option<f64>,
}

impl InitReport {
    pub fn set_outcome(&mut self, failure: Option<FailureCategory>, detail: Option<String>) {
        self.success = failure.is_none();
        self.failure = failure;
        self.failure_detail = if failure.is_some() { detail } else { None };
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut ChaCha8Rng) -> UnitQuaternion<f64> {
        UnitQuaternion::from_scaled_axis(Vector3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)))
    }

    #[test]
    fn median_skips_non_finite() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0, f64::NAN, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Some(2.5));
    }

    #[test]
    fn gravity_error_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let r = random_rotation(&mut rng);
            assert!(gravity_error(&r, &r) < 1e-6);
            let yaw = rotation_about_z(rng.random_range(-3.0..3.0));
            assert!(gravity_error(&(yaw * r), &r) < 1e-6);
            assert!(gravity_error(&r, &(yaw * r)) < 1e-6);
            let roll = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), 5f64.to_radians());
            assert_relative_eq!(gravity_error(&(roll * r), &r), 5.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn scale_error_examples() {
        let pred = Vector3::new(0.1, 0.2, -0.05);
        let gt = pred * 2.5;
        assert_relative_eq!(scale_error(2.5, &pred, &gt).unwrap(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(scale_error(2.5 * 1.25, &pred, &gt).unwrap(), 25.0, epsilon = 1e-9);
        assert!(matches!(scale_error(1.0, &pred, &Vector3::new(1e-4, 0.0, 0.0)), Err(EvalError::NearZeroMotion(_))));
    }

    fn random_poses(rng: &mut ChaCha8Rng, n: usize) -> Vec<Pose> {
        (0..n).map(|_| Pose { rotation: random_rotation(rng), position: Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) }).collect()
    }

    #[test]
    fn ate_identity_and_rigid_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = random_poses(&mut rng, 5);
        let (r, t) = window_ate(&gt, &gt).unwrap();
        assert!(r < 1e-9 && t < 1e-12);
        // global translation and yaw are absorbed
        let yaw = rotation_about_z(0.7);
        let shift = Vector3::new(3.0, -1.0, 0.5);
        let moved: Vec<Pose> = gt.iter().map(|p| Pose { rotation: yaw * p.rotation, position: yaw * p.position + shift }).collect();
        let (r, t) = window_ate(&moved, &gt).unwrap();
        assert!(r < 1e-6 && t < 1e-12, "{r} {t}");
        assert!(window_ate(&gt[..4], &gt).is_err());
    }

    #[test]
    fn ate_single_offset_matches_hand_rms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = random_poses(&mut rng, 5);
        let mut est = gt.clone();
        est[3].position += Vector3::new(0.1, 0.0, 0.0);
        let (r, t) = window_ate(&est, &gt).unwrap();
        // only frame 3 differs, by 0.1 m: sqrt(0.1² / 5)
        assert_relative_eq!(t, (0.01f64 / 5.0).sqrt(), epsilon = 1e-12);
        assert!(r < 1e-9);
        // an offset on the first frame moves the whole aligned trajectory
        let mut est = gt.clone();
        est[0].position += Vector3::new(0.1, 0.0, 0.0);
        let (_, t) = window_ate(&est, &gt).unwrap();
        assert_relative_eq!(t, (4.0 * 0.01f64 / 5.0).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn chi_square_examples() {
        // 95% quantile of χ²(10)
        let r = chi_square_gate(5.0, 20, 10, 0.95).unwrap();
        assert_relative_eq!(r.threshold, 18.307038053275146, epsilon = 1e-6);
        assert!(r.passed);
        assert!(!chi_square_gate(5.0 * 1e4, 20, 10, 0.95).unwrap().passed);
        assert!(matches!(chi_square_gate(1.0, 10, 10, 0.95), Err(EvalError::NonPositiveDof(0))));
        assert!(chi_square_gate(1.0, 20, 10, 1.5).is_err());
    }

    #[test]
    fn gate_categories() {
        let ok = GateInputs { observations_ok: true, linear_ok: true, converged: true, covariance_ok: true, ate_m: Some(0.02), ate_threshold: ATE_THRESHOLD };
        assert_eq!(success_gate(&ok), None);
        assert_eq!(success_gate(&GateInputs { linear_ok: false, ..ok }), Some(FailureCategory::Lin));
        assert_eq!(success_gate(&GateInputs { converged: false, ..ok }), Some(FailureCategory::NL));
        assert_eq!(success_gate(&GateInputs { covariance_ok: false, ..ok }), Some(FailureCategory::Cov));
        assert_eq!(success_gate(&GateInputs { ate_m: Some(0.8), ..ok }), Some(FailureCategory::Ate));
        assert_eq!(success_gate(&GateInputs { observations_ok: false, linear_ok: false, ..ok }), Some(FailureCategory::Obs));
        assert_eq!(success_gate(&GateInputs { ate_m: None, ..ok }), None);
        let mut report = InitReport::default();
        report.set_outcome(Some(FailureCategory::Cov), Some("singular".into()));
        assert!(!report.success && report.failure_detail.is_some());
    }
}
