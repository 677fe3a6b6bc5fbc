//! Windows built straight from kinematics, without IMU sampling or a scene.
//!
//! Preintegrated deltas are exact for a polynomial trajectory, so linear
//! systems assembled from a [`ToyWindow`] satisfy the ground truth to machine
//! precision. Used for rank and minimal-case studies.

use nalgebra::{DVector, Matrix2, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloud::{SampledSet, Sample};
use crate::geometry::{exp_so3, project, Extrinsics, GRAVITY_MAGNITUDE};
use crate::imu::{Biases, ImuPreintegration};
use crate::linear_init::{FeatureObservation, LinearInitState};

/// Keyframe spacing, seconds.
pub const TOY_FRAME_DT: f64 = 0.125;

#[derive(Debug, Clone)]
pub struct ToyWindow {
    /// Composed from frame 0, so `preints[0]` is the identity.
    pub preints: Vec<ImuPreintegration>,
    pub extrinsics: Extrinsics,
    pub truth: LinearInitState,
    /// Poses `(ᴵ⁰_Iᵢ R, ᴵ⁰p_Iᵢ)`.
    pub poses: Vec<(UnitQuaternion<f64>, Vector3<f64>)>,
}

impl ToyWindow {
    /// Random gravity tilt, velocity, scale and cubic motion with constant rate.
    pub fn random(frames: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let extrinsics = Extrinsics {
            rot_imu_cam: exp_so3(&Vector3::new(-1.2, 1.2, -1.2)).expect("finite") * exp_so3(&Vector3::new(0.02, -0.03, 0.01)).expect("finite"),
            trans_imu_cam: Vector3::new(0.05, -0.02, 0.01),
        };
        let gdir = Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), 1.0).normalize();
        let v0 = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5));
        let s = rng.random_range(0.5..3.0);
        let mut uniform3 = |r: f64| Vector3::new(rng.random_range(-r..r), rng.random_range(-r..r), rng.random_range(-r..r));
        let w = uniform3(1.0);
        let acc = uniform3(2.0);
        let jerk = uniform3(20.0);
        let g = gdir * GRAVITY_MAGNITUDE;
        let mut preints = Vec::with_capacity(frames);
        let mut poses = Vec::with_capacity(frames);
        for i in 0..frames {
            let t = TOY_FRAME_DT * i as f64;
            let rot = exp_so3(&(w * t)).expect("finite");
            let pos = v0 * t + 0.5 * acc * t * t + jerk * t * t * t / 6.0;
            let mut pre = ImuPreintegration::identity(Biases::zero());
            pre.delta_r = rot;
            pre.dt = t;
            pre.delta_p = pos - v0 * t + 0.5 * g * t * t;
            pre.delta_v = acc * t + 0.5 * jerk * t * t + g * t;
            preints.push(pre);
            poses.push((rot, pos));
        }
        Self { preints, extrinsics, truth: LinearInitState { s, v0, g }, poses }
    }

    pub fn num_frames(&self) -> usize {
        self.poses.len()
    }

    /// Camera-frame point of camera `i` expressed in `I₀`.
    pub fn to_i0(&self, i: usize, p_c: &Vector3<f64>) -> Vector3<f64> {
        let p_ii = self.extrinsics.rot_imu_cam * p_c + self.extrinsics.trans_imu_cam;
        self.poses[i].0 * p_ii + self.poses[i].1
    }

    /// Normalized image coordinates of an `I₀` point in camera `i`.
    pub fn bearing_of(&self, i: usize, p_i0: &Vector3<f64>) -> Vector2<f64> {
        let (r, p) = &self.poses[i];
        let p_ii = r.inverse() * (p_i0 - p);
        let p_c = self.extrinsics.rot_cam_imu() * (p_ii - self.extrinsics.trans_imu_cam);
        project(&p_c).expect("toy points stay in front of the cameras")
    }

    /// Exact cloud sample of an `I₀` point observed in frame `i`.
    pub fn sample_of_point(&self, i: usize, p_i0: &Vector3<f64>) -> Sample {
        let p_c0 = self.extrinsics.rot_cam_imu() * (p_i0 - self.extrinsics.trans_imu_cam);
        Sample { pixel: Vector2::zeros(), bearing: self.bearing_of(i, p_i0), point: p_c0 / self.truth.s, confidence: 4.0, region: 0 }
    }

    /// Sample for the point at `depth` along bearing `uv` of camera `i`.
    pub fn sample(&self, i: usize, uv: Vector2<f64>, depth: f64) -> Sample {
        let p_c = Vector3::new(uv.x, uv.y, 1.0) * depth;
        self.sample_of_point(i, &self.to_i0(i, &p_c))
    }

    /// `per_frame` exact samples per frame at random bearings and depths 1–5.
    pub fn random_sampled(&self, per_frame: usize, rng: &mut ChaCha8Rng) -> SampledSet {
        let frames = (0..self.num_frames())
            .map(|i| {
                (0..per_frame)
                    .map(|_| self.sample(i, Vector2::new(rng.random_range(-0.6..0.6), rng.random_range(-0.4..0.4)), rng.random_range(1.0..5.0)))
                    .collect()
            })
            .collect();
        SampledSet { k: per_frame, frames }
    }

    /// Observations of `I₀` points in every frame.
    pub fn observations(&self, features: &[Vector3<f64>]) -> Vec<FeatureObservation> {
        (0..self.num_frames())
            .flat_map(|frame| features.iter().enumerate().map(move |(feature, p)| FeatureObservation { frame, feature, bearing: self.bearing_of(frame, p) }))
            .collect()
    }

    /// The similarity about the `C₀` center that exact clouds cannot see
    /// with three frames: scale the cloud and move camera centers about `C₀`,
    /// absorbed by `v₀` and `g`. Only defined for three or more frames.
    pub fn similarity_null_vector(&self) -> DVector<f64> {
        let c0 = self.extrinsics.trans_imu_cam;
        let center = |i: usize| self.poses[i].0 * self.extrinsics.trans_imu_cam + self.poses[i].1;
        let (d1, d2) = (center(1) - c0, center(2) - c0);
        let (t1, t2) = (self.preints[1].dt, self.preints[2].dt);
        // δv t − ½ δg t² = dᵢ for i = 1, 2
        let m = Matrix2::new(t1, -0.5 * t1 * t1, t2, -0.5 * t2 * t2).try_inverse().expect("distinct frame times");
        let mut n = DVector::zeros(7);
        n[0] = self.truth.s;
        for c in 0..3 {
            let sol = m * Vector2::new(d1[c], d2[c]);
            n[1 + c] = sol[0];
            n[4 + c] = sol[1];
        }
        n
    }
}

/// Perturb every cloud point by up to `relative` of its norm per axis, which
/// puts the rows in general position (prediction error).
pub fn perturb_points(sampled: &SampledSet, relative: f64, rng: &mut ChaCha8Rng) -> SampledSet {
    let mut out = sampled.clone();
    for s in out.frames.iter_mut().flatten() {
        let n = s.point.norm();
        s.point += Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * relative * n;
    }
    out
}
