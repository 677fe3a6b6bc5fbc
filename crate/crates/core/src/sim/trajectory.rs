//! Closed-form trajectories with exact derivatives.
//!
//! Orientation follows ZYX Euler angles `R = Rz(ψ) Ry(θ) Rx(φ)` (world from
//! body) with each angle a sinusoid, so body rates are analytic too.

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Pattern {
    /// Lemniscate in the horizontal plane with a slower vertical bob.
    FigureEight,
    /// `p(t) = A sin(ωt) x̂`
    Sinusoid,
    /// Constant world-frame velocity and constant body rate.
    ConstantTwist { linear: Vector3<f64>, angular: Vector3<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectorySpec {
    pub pattern: Pattern,
    /// meters
    pub amplitude: f64,
    /// rad/s
    pub frequency: f64,
    /// Amplitude of the yaw oscillation; pitch and roll use half of it. Radians.
    pub orientation_amplitude: f64,
    /// seconds
    pub duration: f64,
    pub center: Vector3<f64>,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            pattern: Pattern::FigureEight,
            amplitude: 0.6,
            frequency: 1.6,
            orientation_amplitude: 0.3,
            duration: 4.0,
            center: Vector3::zeros(),
        }
    }
}

/// Kinematic state at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KinematicState {
    /// `ᴳ_I R`
    pub rotation: UnitQuaternion<f64>,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    /// World frame, excluding gravity.
    pub acceleration: Vector3<f64>,
    /// Body frame.
    pub angular_velocity: Vector3<f64>,
}

/// `a sin(f t + φ)` with its first two derivatives.
#[derive(Clone, Copy)]
struct Sine {
    amp: f64,
    freq: f64,
    phase: f64,
}

impl Sine {
    fn eval(&self, t: f64) -> (f64, f64, f64) {
        let arg = self.freq * t + self.phase;
        let (s, c) = arg.sin_cos();
        (self.amp * s, self.amp * self.freq * c, -self.amp * self.freq * self.freq * s)
    }
}

fn euler_state(spec: &TrajectorySpec, t: f64) -> (UnitQuaternion<f64>, Vector3<f64>) {
    let b = spec.orientation_amplitude;
    let w = spec.frequency;
    let (yaw, yaw_d, _) = Sine { amp: b, freq: w, phase: 0.0 }.eval(t);
    let (pitch, pitch_d, _) = Sine { amp: 0.5 * b, freq: 1.3 * w, phase: 0.4 }.eval(t);
    let (roll, roll_d, _) = Sine { amp: 0.5 * b, freq: 0.7 * w, phase: 1.1 }.eval(t);
    let rot = UnitQuaternion::from_euler_angles(roll, pitch, yaw);
    let (sr, cr) = roll.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let omega = Vector3::new(roll_d - yaw_d * sp, pitch_d * cr + yaw_d * cp * sr, -pitch_d * sr + yaw_d * cp * cr);
    (rot, omega)
}

/// Kinematics at time `t ∈ [0, duration]`.
pub fn generate_trajectory(spec: &TrajectorySpec, t: f64) -> Result<KinematicState, SimError> {
    if !(t >= 0.0 && t <= spec.duration + 1e-12) {
        return Err(SimError::TimeOutOfRange { t, duration: spec.duration });
    }
    let a = spec.amplitude;
    let w = spec.frequency;
    match spec.pattern {
        Pattern::ConstantTwist { linear, angular } => Ok(KinematicState {
            rotation: UnitQuaternion::from_scaled_axis(angular * t),
            position: spec.center + linear * t,
            velocity: linear,
            acceleration: Vector3::zeros(),
            angular_velocity: angular,
        }),
        Pattern::Sinusoid | Pattern::FigureEight => {
            let axes = match spec.pattern {
                Pattern::Sinusoid => [Sine { amp: a, freq: w, phase: 0.0 }, Sine { amp: 0.0, freq: w, phase: 0.0 }, Sine { amp: 0.0, freq: w, phase: 0.0 }],
                _ => [Sine { amp: a, freq: w, phase: 0.0 }, Sine { amp: 0.5 * a, freq: 2.0 * w, phase: 0.0 }, Sine { amp: 0.25 * a, freq: 1.5 * w, phase: 0.7 }],
            };
            let mut p = Vector3::zeros();
            let mut v = Vector3::zeros();
            let mut acc = Vector3::zeros();
            for (k, s) in axes.iter().enumerate() {
                let (x, dx, ddx) = s.eval(t);
                p[k] = x;
                v[k] = dx;
                acc[k] = ddx;
            }
            let (rotation, angular_velocity) = euler_state(spec, t);
            Ok(KinematicState { rotation, position: spec.center + p, velocity: v, acceleration: acc, angular_velocity })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::log_so3;
    use approx::assert_relative_eq;

    #[test]
    fn zero_twist_is_static() {
        let spec = TrajectorySpec { pattern: Pattern::ConstantTwist { linear: Vector3::zeros(), angular: Vector3::zeros() }, ..Default::default() };
        for t in [0.0, 1.0, 3.5] {
            let s = generate_trajectory(&spec, t).unwrap();
            assert_eq!(s.rotation, UnitQuaternion::identity());
            assert_eq!(s.position, spec.center);
            assert_eq!(s.velocity, Vector3::zeros());
            assert_eq!(s.acceleration, Vector3::zeros());
        }
    }

    #[test]
    fn sinusoid_acceleration() {
        let spec = TrajectorySpec { pattern: Pattern::Sinusoid, amplitude: 0.8, frequency: 3.0, ..Default::default() };
        for t in [0.1, 0.7, 2.2] {
            let s = generate_trajectory(&spec, t).unwrap();
            assert_relative_eq!(s.acceleration, Vector3::new(-0.8 * 9.0 * (3.0 * t).sin(), 0.0, 0.0), epsilon = 1e-12);
        }
    }

    #[test]
    fn out_of_range() {
        let spec = TrajectorySpec::default();
        assert!(matches!(generate_trajectory(&spec, -0.1), Err(SimError::TimeOutOfRange { .. })));
        assert!(matches!(generate_trajectory(&spec, 4.5), Err(SimError::TimeOutOfRange { .. })));
    }

    /// Central differences shrink as h² for every derivative.
    #[test]
    fn derivatives_match_central_differences() {
        for pattern in [Pattern::FigureEight, Pattern::Sinusoid, Pattern::ConstantTwist { linear: Vector3::new(0.3, -0.1, 0.05), angular: Vector3::new(0.2, 0.4, -0.3) }] {
            let spec = TrajectorySpec { pattern, ..Default::default() };
            for t in [0.5, 1.3, 2.9] {
                let s = generate_trajectory(&spec, t).unwrap();
                let mut errs = Vec::new();
                for h in [1e-3, 5e-4] {
                    let a = generate_trajectory(&spec, t - h).unwrap();
                    let b = generate_trajectory(&spec, t + h).unwrap();
                    let ev = ((b.position - a.position) / (2.0 * h) - s.velocity).norm();
                    let ea = ((b.velocity - a.velocity) / (2.0 * h) - s.acceleration).norm();
                    let omega = log_so3(&(a.rotation.inverse() * b.rotation)) / (2.0 * h);
                    let ew = (omega - s.angular_velocity).norm();
                    errs.push([ev, ea, ew]);
                }
                for (k, (coarse, fine)) in errs[0].iter().zip(&errs[1]).enumerate() {
                    assert!(*coarse < 1e-4, "{pattern:?} t={t} component {k}: {coarse}");
                    if *coarse > 1e-10 {
                        let ratio = coarse / fine;
                        assert!(ratio > 3.0 && ratio < 5.0, "{pattern:?} component {k} ratio {ratio}");
                    }
                }
            }
        }
    }
}
