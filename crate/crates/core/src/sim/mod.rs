//! Synthetic ground truth: trajectories, IMU samples, predicted clouds and
//! feature tracks, all generated from one seed.

pub mod scene;
pub mod toy;
pub mod trajectory;

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{CloudEntry, CloudFrame, PredictedCloud};
use crate::geometry::{gravity_world, Extrinsics, PinholeCamera};
use crate::imu::{Biases, ImuNoise, ImuSample, NavState};
pub use scene::SceneSpec;
pub use trajectory::{generate_trajectory, KinematicState, Pattern, TrajectorySpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("time {t} s outside trajectory duration {duration} s")]
    TimeOutOfRange { t: f64, duration: f64 },
    #[error("could not find enough visible scene points ({found} of {wanted}) after {attempts} draws")]
    Visibility { found: usize, wanted: usize, attempts: usize },
    #[error("camera center {0:?} is outside the room")]
    OutsideRoom([f64; 3]),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
}

/// Confidence given to injected outliers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutlierConfidence {
    /// Below the default sampling floor.
    Low,
    /// Drawn from the inlier distribution, so confidence cannot reveal them.
    Matched,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorSpec {
    pub imu_rate: f64,
    pub camera_rate: f64,
    pub imu_noise: ImuNoise,
    pub biases: Biases,
    /// Metric units per cloud unit.
    pub true_scale: f64,
    /// Cloud noise standard deviation as a fraction of the point depth,
    /// before the `1/√c` confidence factor.
    pub cloud_noise: f64,
    pub outlier_ratio: f64,
    pub outlier_confidence: OutlierConfidence,
    /// Confidence is `1 + Exp(mean)` clipped to `[1, confidence_max]`.
    pub confidence_mean: f64,
    pub confidence_max: f64,
}

impl SensorSpec {
    pub fn noiseless() -> Self {
        Self {
            imu_rate: 200.0,
            camera_rate: 30.0,
            imu_noise: ImuNoise::zero(),
            biases: Biases::zero(),
            true_scale: 1.7,
            cloud_noise: 0.0,
            outlier_ratio: 0.0,
            outlier_confidence: OutlierConfidence::Low,
            confidence_mean: 5.0,
            confidence_max: 100.0,
        }
    }

    /// Consumer-grade IMU and a 2%-of-depth cloud.
    pub fn consumer() -> Self {
        Self { imu_noise: ImuNoise::consumer_grade(), cloud_noise: 0.02, ..Self::noiseless() }
    }
}

impl Default for SensorSpec {
    fn default() -> Self {
        Self::noiseless()
    }
}

/// Everything needed to generate one dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub trajectory: TrajectorySpec,
    pub sensor: SensorSpec,
    pub scene: SceneSpec,
    pub camera: PinholeCamera,
    pub extrinsics: Extrinsics,
    pub num_keyframes: usize,
    /// seconds
    pub window: f64,
    pub window_start: f64,
    /// The window start is drawn uniformly from `[window_start, window_start + start_jitter]`.
    pub start_jitter: f64,
    pub num_features: usize,
    /// Standard deviation of feature-track pixel noise.
    pub feature_pixel_noise: f64,
}

/// 320×240 camera looking along the IMU x axis.
pub fn default_camera() -> PinholeCamera {
    PinholeCamera { fx: 255.0, fy: 255.0, cx: 160.0, cy: 120.0, width: 320, height: 240 }
}

/// Camera z forward along IMU x, camera x along IMU −y, with a small offset.
pub fn default_extrinsics() -> Extrinsics {
    let axes = nalgebra::Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
    let base = UnitQuaternion::from_matrix(&axes);
    Extrinsics {
        rot_imu_cam: base * UnitQuaternion::from_scaled_axis(Vector3::new(0.01, -0.015, 0.008)),
        trans_imu_cam: Vector3::new(0.05, 0.02, -0.01),
    }
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            trajectory: TrajectorySpec::default(),
            sensor: SensorSpec::noiseless(),
            scene: SceneSpec::default_room(),
            camera: default_camera(),
            extrinsics: default_extrinsics(),
            num_keyframes: 5,
            window: 0.5,
            window_start: 0.5,
            start_jitter: 1.0,
            num_features: 150,
            feature_pixel_noise: 0.0,
        }
    }
}

impl Scenario {
    pub fn noisy() -> Self {
        Self { sensor: SensorSpec::consumer(), feature_pixel_noise: 1.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidScenario(m));
        if self.num_keyframes < 2 {
            return bad(format!("need at least 2 keyframes, got {}", self.num_keyframes));
        }
        if !(self.window > 0.0) {
            return bad(format!("window must be positive, got {}", self.window));
        }
        if self.window_start < 0.0 || self.window_start + self.start_jitter + self.window > self.trajectory.duration {
            return bad(format!(
                "window [{}, {}] exceeds trajectory duration {}",
                self.window_start,
                self.window_start + self.start_jitter + self.window,
                self.trajectory.duration
            ));
        }
        let s = &self.sensor;
        if !(s.imu_rate > 0.0 && s.camera_rate > 0.0) {
            return bad("sensor rates must be positive".into());
        }
        if !(s.true_scale > 0.0) {
            return bad(format!("true scale must be positive, got {}", s.true_scale));
        }
        if !(0.0..1.0).contains(&s.outlier_ratio) {
            return bad(format!("outlier ratio {} outside [0, 1)", s.outlier_ratio));
        }
        if !s.imu_noise.is_valid() || s.cloud_noise < 0.0 || self.feature_pixel_noise < 0.0 {
            return bad("noise levels must be non-negative".into());
        }
        self.camera.validate().map_err(|e| SimError::InvalidScenario(e.to_string()))
    }
}

/// Ground-truth state of one keyframe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtState {
    pub timestamp: f64,
    /// `ᴳ_I R`
    pub rotation: UnitQuaternion<f64>,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
}

impl GtState {
    pub fn nav(&self) -> NavState {
        NavState { rotation: self.rotation, position: self.position, velocity: self.velocity }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub keyframes: Vec<GtState>,
    pub biases: Biases,
    pub scale: f64,
    /// `ᴵ⁰g`
    pub gravity_i0: Vector3<f64>,
    /// `ᴵ⁰v_{I₀}`
    pub velocity_i0: Vector3<f64>,
    /// Indices of corrupted cloud entries, per frame.
    pub outliers: Vec<Vec<usize>>,
}

/// One feature observed in every keyframe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTrack {
    /// `ᴳp_f`
    pub point: Vector3<f64>,
    /// Pixel per keyframe, possibly noisy.
    pub pixels: Vec<Vector2<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub scenario: Scenario,
    pub seed: u64,
    pub imu: Vec<ImuSample>,
    pub cloud: PredictedCloud,
    pub tracks: Vec<FeatureTrack>,
    pub truth: GroundTruth,
}

impl Dataset {
    pub fn keyframe_times(&self) -> Vec<f64> {
        self.truth.keyframes.iter().map(|k| k.timestamp).collect()
    }
}

/// Independent random stream for one purpose.
fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

const STREAM_WINDOW: u64 = 1;
const STREAM_IMU: u64 = 2;
const STREAM_SCENE: u64 = 3;
const STREAM_FEATURES: u64 = 4;
const STREAM_CLOUD: u64 = 1000;

/// Body-frame IMU readings of `spec` sampled at `sensor.imu_rate`.
pub fn synthesize_imu(spec: &TrajectorySpec, sensor: &SensorSpec, seed: u64) -> Result<Vec<ImuSample>, SimError> {
    let mut rng = stream(seed, STREAM_IMU);
    let n = (spec.duration * sensor.imu_rate).floor() as usize;
    let gyro_sd = sensor.imu_noise.gyro_noise_density * sensor.imu_rate.sqrt();
    let accel_sd = sensor.imu_noise.accel_noise_density * sensor.imu_rate.sqrt();
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let noise3 = |sd: f64, rng: &mut ChaCha8Rng| -> Vector3<f64> {
        if sd == 0.0 {
            Vector3::zeros()
        } else {
            Vector3::from_fn(|_, _| unit.sample(rng) * sd)
        }
    };
    let g = gravity_world();
    (0..=n)
        .map(|k| {
            let t = k as f64 / sensor.imu_rate;
            let s = generate_trajectory(spec, t)?;
            let specific_force = s.rotation.inverse() * (s.acceleration + g);
            Ok(ImuSample {
                timestamp: t,
                gyro: s.angular_velocity + sensor.biases.gyro + noise3(gyro_sd, &mut rng),
                accel: specific_force + sensor.biases.accel + noise3(accel_sd, &mut rng),
            })
        })
        .collect()
}

fn confidence<R: Rng>(rng: &mut R, sensor: &SensorSpec) -> f64 {
    let exp = Exp::new(1.0 / sensor.confidence_mean).expect("positive mean");
    (1.0 + exp.sample(rng)).clamp(1.0, sensor.confidence_max)
}

/// Camera pose `(ᴳ_C R, ᴳp_C)` of an IMU state.
fn camera_pose(state: &GtState, ext: &Extrinsics) -> (UnitQuaternion<f64>, Vector3<f64>) {
    (state.rotation * ext.rot_imu_cam, state.position + state.rotation * ext.trans_imu_cam)
}

struct Reference {
    rot_g_c0: UnitQuaternion<f64>,
    c0: Vector3<f64>,
    scale: f64,
}

impl Reference {
    /// True world point to the up-to-scale `C₀` frame.
    fn to_cloud(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rot_g_c0.inverse() * (p - self.c0) / self.scale
    }
}

/// Perturb, weight and corrupt one frame of true points.
fn finish_frame(
    mut entries: Vec<CloudEntry>,
    depths: &[f64],
    sensor: &SensorSpec,
    reference: &Reference,
    rng: &mut ChaCha8Rng,
) -> (Vec<CloudEntry>, Vec<usize>) {
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    for (e, depth) in entries.iter_mut().zip(depths) {
        e.confidence = confidence(rng, sensor);
        if sensor.cloud_noise > 0.0 {
            let sd = sensor.cloud_noise * depth / (reference.scale * e.confidence.sqrt());
            e.point += Vector3::from_fn(|_, _| unit.sample(rng) * sd);
        }
    }
    let count = (sensor.outlier_ratio * entries.len() as f64).floor() as usize;
    let mut outliers: Vec<usize> = sample_indices(rng, entries.len(), count).into_vec();
    outliers.sort_unstable();
    for &idx in &outliers {
        let gross = Vector3::new(rng.random_range(-8.0..8.0), rng.random_range(-6.0..6.0), rng.random_range(0.3..15.0));
        let e = &mut entries[idx];
        e.point = gross / reference.scale;
        e.confidence = match sensor.outlier_confidence {
            OutlierConfidence::Low => rng.random_range(1.0..1.4),
            OutlierConfidence::Matched => confidence(rng, sensor),
        };
    }
    (entries, outliers)
}

fn keyframe_states(scenario: &Scenario, seed: u64) -> Result<Vec<GtState>, SimError> {
    let mut rng = stream(seed, STREAM_WINDOW);
    let start = scenario.window_start + if scenario.start_jitter > 0.0 { rng.random_range(0.0..scenario.start_jitter) } else { 0.0 };
    let n = scenario.num_keyframes;
    (0..n)
        .map(|k| {
            let t = start + scenario.window * k as f64 / (n - 1) as f64;
            let s = generate_trajectory(&scenario.trajectory, t)?;
            Ok(GtState { timestamp: t, rotation: s.rotation, position: s.position, velocity: s.velocity })
        })
        .collect()
}

/// Generate a complete dataset.
pub fn simulate(scenario: &Scenario, seed: u64) -> Result<Dataset, SimError> {
    scenario.validate()?;
    let imu = synthesize_imu(&scenario.trajectory, &scenario.sensor, seed)?;
    let keyframes = keyframe_states(scenario, seed)?;
    let cam = &scenario.camera;
    let ext = &scenario.extrinsics;
    let sensor = &scenario.sensor;
    let (rot_g_c0, c0) = camera_pose(&keyframes[0], ext);
    let reference = Reference { rot_g_c0, c0, scale: sensor.true_scale };

    let (cloud, outliers, tracks) = match scenario.scene {
        SceneSpec::Room { min, max } => {
            for k in &keyframes {
                let (_, c) = camera_pose(k, ext);
                if !scene::point_inside(&c, &min, &max) {
                    return Err(SimError::OutsideRoom([c.x, c.y, c.z]));
                }
            }
            let frames: Vec<(CloudFrame, Vec<usize>)> = keyframes
                .par_iter()
                .enumerate()
                .map(|(i, k)| {
                    let (rot, c) = camera_pose(k, ext);
                    let mut entries = Vec::with_capacity(cam.width * cam.height);
                    let mut depths = Vec::with_capacity(cam.width * cam.height);
                    for row in 0..cam.height {
                        for col in 0..cam.width {
                            let px = Vector2::new(col as f64, row as f64);
                            let p = room_hit(cam, &rot, &c, &px, &min, &max);
                            let in_c0 = reference.to_cloud(&p);
                            depths.push(in_c0.z.abs() * reference.scale);
                            entries.push(CloudEntry::new(px, in_c0, 1.0));
                        }
                    }
                    let mut rng = stream(seed, STREAM_CLOUD + i as u64);
                    let (entries, outl) = finish_frame(entries, &depths, sensor, &reference, &mut rng);
                    (CloudFrame { timestamp: k.timestamp, entries }, outl)
                })
                .collect();
            let tracks = room_tracks(scenario, &keyframes, &min, &max, seed)?;
            let (frames, outliers) = frames.into_iter().unzip();
            (PredictedCloud { width: cam.width, height: cam.height, dense_raster: true, frames, camera_positions: None }, outliers, tracks)
        }
        SceneSpec::RandomPoints { count, lateral, vertical, depth_range } => {
            let points = visible_points(scenario, &keyframes, count, lateral, vertical, depth_range, seed)?;
            let mut frames = Vec::with_capacity(keyframes.len());
            let mut outliers = Vec::with_capacity(keyframes.len());
            for (i, k) in keyframes.iter().enumerate() {
                let (rot, c) = camera_pose(k, ext);
                let mut entries = Vec::with_capacity(points.len());
                let mut depths = Vec::with_capacity(points.len());
                for p in &points {
                    let px = cam.project_pixel(&(rot.inverse() * (p - c))).expect("visible point");
                    let in_c0 = reference.to_cloud(p);
                    depths.push(in_c0.z.abs() * reference.scale);
                    entries.push(CloudEntry::new(px, in_c0, 1.0));
                }
                let mut rng = stream(seed, STREAM_CLOUD + i as u64);
                let (entries, outl) = finish_frame(entries, &depths, sensor, &reference, &mut rng);
                frames.push(CloudFrame { timestamp: k.timestamp, entries });
                outliers.push(outl);
            }
            let tracks = point_tracks(scenario, &keyframes, &points, seed);
            (PredictedCloud { width: cam.width, height: cam.height, dense_raster: false, frames, camera_positions: None }, outliers, tracks)
        }
    };
    let camera_positions = keyframes.iter().map(|k| reference.to_cloud(&camera_pose(k, ext).1)).collect();
    let cloud = PredictedCloud { camera_positions: Some(camera_positions), ..cloud };

    let r0 = keyframes[0].rotation;
    let truth = GroundTruth {
        biases: sensor.biases,
        scale: sensor.true_scale,
        gravity_i0: r0.inverse() * gravity_world(),
        velocity_i0: r0.inverse() * keyframes[0].velocity,
        keyframes,
        outliers,
    };
    Ok(Dataset { scenario: *scenario, seed, imu, cloud, tracks, truth })
}

fn room_hit(cam: &PinholeCamera, rot: &UnitQuaternion<f64>, c: &Vector3<f64>, px: &Vector2<f64>, min: &Vector3<f64>, max: &Vector3<f64>) -> Vector3<f64> {
    let uv = cam.normalize(px);
    let dir = rot * Vector3::new(uv.x, uv.y, 1.0);
    let t = scene::ray_box_exit(c, &dir, min, max).expect("camera inside the room");
    c + dir * t
}

/// Pixel of a world point in keyframe `k`, if it lands inside the image.
fn pixel_in(scenario: &Scenario, k: &GtState, p: &Vector3<f64>, margin: f64) -> Option<Vector2<f64>> {
    let (rot, c) = camera_pose(k, &scenario.extrinsics);
    let pc = rot.inverse() * (p - c);
    if pc.z < 0.1 {
        return None;
    }
    let px = scenario.camera.project_pixel(&pc).ok()?;
    let cam = &scenario.camera;
    (px.x >= margin && px.y >= margin && px.x <= cam.width as f64 - 1.0 - margin && px.y <= cam.height as f64 - 1.0 - margin).then_some(px)
}

fn noisy_pixels(scenario: &Scenario, keyframes: &[GtState], p: &Vector3<f64>, rng: &mut ChaCha8Rng) -> Option<Vec<Vector2<f64>>> {
    let margin = 1.0 + 4.0 * scenario.feature_pixel_noise;
    let clean: Vec<Vector2<f64>> = keyframes.iter().map(|k| pixel_in(scenario, k, p, margin)).collect::<Option<_>>()?;
    let sd = scenario.feature_pixel_noise;
    Some(
        clean
            .into_iter()
            .map(|px| if sd > 0.0 { px + Vector2::new(rng.sample::<f64, _>(rand_distr::StandardNormal) * sd, rng.sample::<f64, _>(rand_distr::StandardNormal) * sd) } else { px })
            .collect(),
    )
}

fn room_tracks(scenario: &Scenario, keyframes: &[GtState], min: &Vector3<f64>, max: &Vector3<f64>, seed: u64) -> Result<Vec<FeatureTrack>, SimError> {
    let mut rng = stream(seed, STREAM_FEATURES);
    let cam = &scenario.camera;
    let (rot, c) = camera_pose(&keyframes[0], &scenario.extrinsics);
    let mut tracks = Vec::with_capacity(scenario.num_features);
    let max_attempts = 200 * scenario.num_features.max(1);
    let mut attempts = 0;
    while tracks.len() < scenario.num_features {
        if attempts == max_attempts {
            return Err(SimError::Visibility { found: tracks.len(), wanted: scenario.num_features, attempts });
        }
        attempts += 1;
        let px = Vector2::new(rng.random_range(0.0..(cam.width - 1) as f64), rng.random_range(0.0..(cam.height - 1) as f64));
        let p = room_hit(cam, &rot, &c, &px, min, max);
        if let Some(pixels) = noisy_pixels(scenario, keyframes, &p, &mut rng) {
            tracks.push(FeatureTrack { point: p, pixels });
        }
    }
    Ok(tracks)
}

fn point_tracks(scenario: &Scenario, keyframes: &[GtState], points: &[Vector3<f64>], seed: u64) -> Vec<FeatureTrack> {
    let mut rng = stream(seed, STREAM_FEATURES);
    points
        .iter()
        .take(scenario.num_features)
        .filter_map(|p| noisy_pixels(scenario, keyframes, p, &mut rng).map(|pixels| FeatureTrack { point: *p, pixels }))
        .collect()
}

fn visible_points(
    scenario: &Scenario,
    keyframes: &[GtState],
    count: usize,
    lateral: f64,
    vertical: f64,
    depth_range: (f64, f64),
    seed: u64,
) -> Result<Vec<Vector3<f64>>, SimError> {
    let mut rng = stream(seed, STREAM_SCENE);
    let centroid = keyframes.iter().map(|k| k.position).sum::<Vector3<f64>>() / keyframes.len() as f64;
    let max_attempts = 1000 * count.max(1);
    let mut points = Vec::with_capacity(count);
    for _ in 0..max_attempts {
        let p = scene::random_box_point(&mut rng, &centroid, lateral, vertical, depth_range);
        if keyframes.iter().all(|k| pixel_in(scenario, k, &p, 0.0).is_some()) {
            points.push(p);
            if points.len() == count {
                return Ok(points);
            }
        }
    }
    Err(SimError::Visibility { found: points.len(), wanted: count, attempts: max_attempts })
}
