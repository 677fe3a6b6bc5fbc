//! IMU measurement model, preintegration and state propagation.
//!
//! Preintegration uses the midpoint rule between consecutive samples. The
//! error state of a preintegrated measurement is ordered `(δθ, δv, δp)` with
//! `ΔR_true = ΔR · Exp(δθ)`, `Δv_true = Δv + δv` and `Δp_true = Δp + δp`.
//! Bias Jacobians are the exact first-order derivatives of the discrete
//! integration scheme, so re-preintegrating with a perturbed bias agrees with
//! [`ImuPreintegration::correct_for_bias`] to second order.

use nalgebra::{Matrix3, SMatrix, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{exp_so3_unchecked, right_jacobian, skew};

pub type Matrix9 = SMatrix<f64, 9, 9>;
pub type Matrix9x6 = SMatrix<f64, 9, 6>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImuError {
    #[error("need at least 2 IMU samples, got {0}")]
    TooFewSamples(usize),
    #[error("timestamps must be non-decreasing: sample {index} at {t} s follows {prev} s")]
    NonMonotone { index: usize, prev: f64, t: f64 },
    #[error("IMU data [{have_start}, {have_end}] s does not cover [{start}, {end}] s")]
    NotCovered { start: f64, end: f64, have_start: f64, have_end: f64 },
}

/// One gyroscope/accelerometer reading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    /// seconds
    pub timestamp: f64,
    /// rad/s
    pub gyro: Vector3<f64>,
    /// m/s²
    pub accel: Vector3<f64>,
}

impl ImuSample {
    pub fn new(timestamp: f64, gyro: Vector3<f64>, accel: Vector3<f64>) -> Self {
        Self { timestamp, gyro, accel }
    }

    fn lerp(a: &ImuSample, b: &ImuSample, t: f64) -> ImuSample {
        let span = b.timestamp - a.timestamp;
        let alpha = if span > 0.0 { (t - a.timestamp) / span } else { 0.0 };
        ImuSample {
            timestamp: t,
            gyro: a.gyro.lerp(&b.gyro, alpha),
            accel: a.accel.lerp(&b.accel, alpha),
        }
    }
}

/// Continuous-time noise densities and bias random walks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImuNoise {
    /// rad/s/√Hz
    pub gyro_noise_density: f64,
    /// m/s²/√Hz
    pub accel_noise_density: f64,
    /// rad/s²/√Hz
    pub gyro_random_walk: f64,
    /// m/s³/√Hz
    pub accel_random_walk: f64,
}

impl ImuNoise {
    pub fn zero() -> Self {
        Self { gyro_noise_density: 0.0, accel_noise_density: 0.0, gyro_random_walk: 0.0, accel_random_walk: 0.0 }
    }

    /// Consumer-grade MEMS values used throughout the simulator tests.
    pub fn consumer_grade() -> Self {
        Self { gyro_noise_density: 2e-3, accel_noise_density: 2e-2, gyro_random_walk: 2e-5, accel_random_walk: 3e-3 }
    }

    pub fn is_valid(&self) -> bool {
        [self.gyro_noise_density, self.accel_noise_density, self.gyro_random_walk, self.accel_random_walk]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
    }
}

impl Default for ImuNoise {
    fn default() -> Self {
        Self::consumer_grade()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Biases {
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

impl Biases {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn new(gyro: Vector3<f64>, accel: Vector3<f64>) -> Self {
        Self { gyro, accel }
    }
}

/// Relative motion between two timestamps integrated from raw IMU samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImuPreintegration {
    /// `ᴵⁱ_Iⱼ ΔR`
    pub delta_r: UnitQuaternion<f64>,
    pub delta_v: Vector3<f64>,
    pub delta_p: Vector3<f64>,
    pub dt: f64,
    /// Covariance over `(δθ, δv, δp)`.
    pub covariance: Matrix9,
    /// `∂(δθ, δv, δp)/∂(b_ω, b_a)`.
    pub bias_jacobian: Matrix9x6,
    /// Biases the deltas were integrated with.
    pub biases: Biases,
}

impl ImuPreintegration {
    pub fn identity(biases: Biases) -> Self {
        Self {
            delta_r: UnitQuaternion::identity(),
            delta_v: Vector3::zeros(),
            delta_p: Vector3::zeros(),
            dt: 0.0,
            covariance: Matrix9::zeros(),
            bias_jacobian: Matrix9x6::zeros(),
            biases,
        }
    }

    pub fn jac_rot_gyro(&self) -> Matrix3<f64> {
        self.bias_jacobian.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn jac_vel_gyro(&self) -> Matrix3<f64> {
        self.bias_jacobian.fixed_view::<3, 3>(3, 0).into_owned()
    }

    pub fn jac_vel_accel(&self) -> Matrix3<f64> {
        self.bias_jacobian.fixed_view::<3, 3>(3, 3).into_owned()
    }

    pub fn jac_pos_gyro(&self) -> Matrix3<f64> {
        self.bias_jacobian.fixed_view::<3, 3>(6, 0).into_owned()
    }

    pub fn jac_pos_accel(&self) -> Matrix3<f64> {
        self.bias_jacobian.fixed_view::<3, 3>(6, 3).into_owned()
    }

    /// Deltas re-linearized at `new_biases` with the stored first-order Jacobians.
    pub fn correct_for_bias(&self, new_biases: &Biases) -> ImuPreintegration {
        let dbg = new_biases.gyro - self.biases.gyro;
        let dba = new_biases.accel - self.biases.accel;
        if dbg.norm() > 0.1 || dba.norm() > 0.1 {
            log::warn!("first-order bias correction used far from linearization point (|Δb_ω|={:.3}, |Δb_a|={:.3})", dbg.norm(), dba.norm());
        }
        let (rot, vel, pos) = self.corrected_deltas(&dbg, &dba);
        ImuPreintegration {
            delta_r: rot,
            delta_v: vel,
            delta_p: pos,
            biases: *new_biases,
            ..self.clone()
        }
    }

    /// Corrected `(ΔR, Δv, Δp)` for bias offsets from the linearization point.
    pub fn corrected_deltas(&self, dbg: &Vector3<f64>, dba: &Vector3<f64>) -> (UnitQuaternion<f64>, Vector3<f64>, Vector3<f64>) {
        let rot = self.delta_r * exp_so3_unchecked(&(self.jac_rot_gyro() * dbg));
        let vel = self.delta_v + self.jac_vel_gyro() * dbg + self.jac_vel_accel() * dba;
        let pos = self.delta_p + self.jac_pos_gyro() * dbg + self.jac_pos_accel() * dba;
        (rot, vel, pos)
    }

    /// Concatenate `self` (i→j) with `next` (j→k) into i→k.
    ///
    /// Both must share linearization biases.
    pub fn compose(&self, next: &ImuPreintegration) -> ImuPreintegration {
        let r1 = self.delta_r.to_rotation_matrix().into_inner();
        let r2 = next.delta_r.to_rotation_matrix().into_inner();
        let delta_r = self.delta_r * next.delta_r;
        let delta_v = self.delta_v + r1 * next.delta_v;
        let delta_p = self.delta_p + self.delta_v * next.dt + r1 * next.delta_p;

        // error of the composite as a linear map of the two pieces' errors
        let mut a = Matrix9::zeros();
        a.fixed_view_mut::<3, 3>(0, 0).copy_from(&r2.transpose());
        a.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-r1 * skew(&next.delta_v)));
        a.fixed_view_mut::<3, 3>(3, 3).copy_from(&Matrix3::identity());
        a.fixed_view_mut::<3, 3>(6, 0).copy_from(&(-r1 * skew(&next.delta_p)));
        a.fixed_view_mut::<3, 3>(6, 3).copy_from(&(Matrix3::identity() * next.dt));
        a.fixed_view_mut::<3, 3>(6, 6).copy_from(&Matrix3::identity());
        let mut b = Matrix9::zeros();
        b.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
        b.fixed_view_mut::<3, 3>(3, 3).copy_from(&r1);
        b.fixed_view_mut::<3, 3>(6, 6).copy_from(&r1);

        let covariance = a * self.covariance * a.transpose() + b * next.covariance * b.transpose();
        let bias_jacobian = a * self.bias_jacobian + b * next.bias_jacobian;
        ImuPreintegration {
            delta_r,
            delta_v,
            delta_p,
            dt: self.dt + next.dt,
            covariance: 0.5 * (covariance + covariance.transpose()),
            bias_jacobian,
            biases: self.biases,
        }
    }
}

/// Integrate `samples` (first to last timestamp) at fixed linearization biases.
pub fn preintegrate(samples: &[ImuSample], biases: &Biases, noise: &ImuNoise) -> Result<ImuPreintegration, ImuError> {
    if samples.len() < 2 {
        return Err(ImuError::TooFewSamples(samples.len()));
    }
    check_monotone(samples)?;
    let mut pre = ImuPreintegration::identity(*biases);
    let gyro_var = noise.gyro_noise_density.powi(2);
    let accel_var = noise.accel_noise_density.powi(2);
    for w in samples.windows(2) {
        integrate_step(&mut pre, &w[0], &w[1], gyro_var, accel_var);
    }
    Ok(pre)
}

fn check_monotone(samples: &[ImuSample]) -> Result<(), ImuError> {
    for (index, w) in samples.windows(2).enumerate() {
        if !(w[1].timestamp >= w[0].timestamp) {
            return Err(ImuError::NonMonotone { index: index + 1, prev: w[0].timestamp, t: w[1].timestamp });
        }
    }
    Ok(())
}

fn integrate_step(pre: &mut ImuPreintegration, s0: &ImuSample, s1: &ImuSample, gyro_var: f64, accel_var: f64) {
    let dt = s1.timestamp - s0.timestamp;
    if dt <= 0.0 {
        return;
    }
    let omega = 0.5 * (s0.gyro + s1.gyro) - pre.biases.gyro;
    let a0 = s0.accel - pre.biases.accel;
    let a1 = s1.accel - pre.biases.accel;

    let phi = omega * dt;
    let step = exp_so3_unchecked(&phi);
    let r0 = pre.delta_r.to_rotation_matrix().into_inner();
    let new_r = pre.delta_r * step;
    let r1 = new_r.to_rotation_matrix().into_inner();
    let step_t = step.to_rotation_matrix().into_inner().transpose();
    let jr = right_jacobian(&phi);

    // Velocity uses the trapezoid; position integrates the linear
    // acceleration profile exactly.
    let acc = 0.5 * (r0 * a0 + r1 * a1);
    pre.delta_p += pre.delta_v * dt + (r0 * a0 / 3.0 + r1 * a1 / 6.0) * dt * dt;
    pre.delta_v += acc * dt;
    pre.delta_r = new_r;
    pre.dt += dt;

    // ∂acc/∂δθ through both endpoints of the step
    let m = -0.5 * (r0 * skew(&a0) + r1 * skew(&a1) * step_t);
    let m_p = -(r0 * skew(&a0) / 3.0 + r1 * skew(&a1) * step_t / 6.0);
    let mut f = Matrix9::identity();
    f.fixed_view_mut::<3, 3>(0, 0).copy_from(&step_t);
    f.fixed_view_mut::<3, 3>(3, 0).copy_from(&(m * dt));
    f.fixed_view_mut::<3, 3>(6, 0).copy_from(&(m_p * dt * dt));
    f.fixed_view_mut::<3, 3>(6, 3).copy_from(&(Matrix3::identity() * dt));

    // ∂(δθ, δv, δp)/∂(gyro error, accel error) for this step
    let d_acc_d_gyro = -0.5 * r1 * skew(&a1) * jr * dt;
    let d_acc_d_accel = 0.5 * (r0 + r1);
    let mut g = SMatrix::<f64, 9, 6>::zeros();
    g.fixed_view_mut::<3, 3>(0, 0).copy_from(&(jr * dt));
    g.fixed_view_mut::<3, 3>(3, 0).copy_from(&(d_acc_d_gyro * dt));
    g.fixed_view_mut::<3, 3>(3, 3).copy_from(&(d_acc_d_accel * dt));
    g.fixed_view_mut::<3, 3>(6, 0).copy_from(&(-r1 * skew(&a1) * jr * dt * dt * dt / 6.0));
    g.fixed_view_mut::<3, 3>(6, 3).copy_from(&((r0 / 3.0 + r1 / 6.0) * dt * dt));

    // A bias offset enters like a negated measurement error.
    pre.bias_jacobian = f * pre.bias_jacobian - g;

    let mut q = SMatrix::<f64, 6, 6>::zeros();
    q.fixed_view_mut::<3, 3>(0, 0).copy_from(&(Matrix3::identity() * gyro_var / dt));
    q.fixed_view_mut::<3, 3>(3, 3).copy_from(&(Matrix3::identity() * accel_var / dt));
    let cov = f * pre.covariance * f.transpose() + g * q * g.transpose();
    pre.covariance = 0.5 * (cov + cov.transpose());
}

/// Samples covering exactly `[start, end]`, with linearly interpolated
/// samples inserted at the boundaries when needed.
pub fn slice_samples(samples: &[ImuSample], start: f64, end: f64) -> Result<Vec<ImuSample>, ImuError> {
    let not_covered = || ImuError::NotCovered {
        start,
        end,
        have_start: samples.first().map_or(f64::NAN, |s| s.timestamp),
        have_end: samples.last().map_or(f64::NAN, |s| s.timestamp),
    };
    let eps = 1e-9;
    if samples.len() < 2 || samples[0].timestamp > start + eps || samples[samples.len() - 1].timestamp < end - eps {
        return Err(not_covered());
    }
    check_monotone(samples)?;
    let sample_at = |t: f64| -> ImuSample {
        let idx = samples.partition_point(|s| s.timestamp < t);
        if idx < samples.len() && (samples[idx].timestamp - t).abs() <= eps {
            return ImuSample { timestamp: t, ..samples[idx] };
        }
        if idx > 0 && (samples[idx - 1].timestamp - t).abs() <= eps {
            return ImuSample { timestamp: t, ..samples[idx - 1] };
        }
        let hi = idx.min(samples.len() - 1).max(1);
        ImuSample::lerp(&samples[hi - 1], &samples[hi], t)
    };
    let mut out = vec![sample_at(start)];
    out.extend(samples.iter().filter(|s| s.timestamp > start + eps && s.timestamp < end - eps).copied());
    out.push(sample_at(end));
    Ok(out)
}

/// Position, velocity and orientation of the IMU in the global frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NavState {
    /// `ᴳ_I R`
    pub rotation: UnitQuaternion<f64>,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
}

/// Predict the state at the end of `preint` from the state at its start.
///
/// `gravity` is `ᴳg`, pointing opposite to free-fall acceleration.
pub fn propagate(state: &NavState, preint: &ImuPreintegration, gravity: &Vector3<f64>) -> NavState {
    let dt = preint.dt;
    NavState {
        rotation: state.rotation * preint.delta_r,
        velocity: state.velocity - gravity * dt + state.rotation * preint.delta_v,
        position: state.position + state.velocity * dt - 0.5 * gravity * dt * dt + state.rotation * preint.delta_p,
    }
}
