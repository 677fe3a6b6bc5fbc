//! On-disk formats for datasets, configs and run outputs.
//!
//! A dataset directory holds
//! - `imu.csv`: `timestamp_ns,wx,wy,wz,ax,ay,az` (EuRoC column order)
//! - `cloud/`: the versioned cloud format
//! - `calibration.json`: camera intrinsics and camera-IMU extrinsics
//! - `gt.csv` (optional): `t,qw,qx,qy,qz,px,py,pz,vx,vy,vz`, world-from-IMU
//! - `tracks.csv` (optional): `feature,frame,u,v` pixel observations
//! - `scenario.json` (simulated data only): the generating scenario

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::format::{read_cloud, write_cloud, FormatError, FrameFormat};
use crate::eval::InitReport;
use crate::geometry::{Extrinsics, PinholeCamera};
use crate::imu::ImuSample;
use crate::pipeline::{RunConfig, RunOutput};
use crate::refine::{ImuState, IterationRecord};
use crate::sim::{Dataset, GtState};

pub const IMU_FILE: &str = "imu.csv";
pub const GT_FILE: &str = "gt.csv";
pub const TRACKS_FILE: &str = "tracks.csv";
pub const CALIBRATION_FILE: &str = "calibration.json";
pub const SCENARIO_FILE: &str = "scenario.json";
pub const CLOUD_DIR: &str = "cloud";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("CSV error in {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Cloud(#[from] FormatError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_path_buf(), source }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> IoError + '_ {
    move |source| IoError::Csv { path: path.to_path_buf(), source }
}

fn parse_err(path: &Path, message: impl Into<String>) -> IoError {
    IoError::Parse { path: path.to_path_buf(), message: message.into() }
}

/// The header is written explicitly so that files with no rows still carry it.
fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = T>) -> Result<(), IoError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, IoError> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_path(path).map_err(csv_err(path))?;
    r.deserialize().map(|row| row.map_err(csv_err(path))).collect()
}

#[derive(Serialize, Deserialize)]
struct ImuRow {
    timestamp_ns: i64,
    wx: f64,
    wy: f64,
    wz: f64,
    ax: f64,
    ay: f64,
    az: f64,
}

pub fn write_imu_csv(path: &Path, samples: &[ImuSample]) -> Result<(), IoError> {
    write_rows(
        path,
        &["timestamp_ns", "wx", "wy", "wz", "ax", "ay", "az"],
        samples.iter().map(|s| ImuRow {
            timestamp_ns: (s.timestamp * 1e9).round() as i64,
            wx: s.gyro.x,
            wy: s.gyro.y,
            wz: s.gyro.z,
            ax: s.accel.x,
            ay: s.accel.y,
            az: s.accel.z,
        }),
    )
}

/// Accepts EuRoC files whose header starts with `#timestamp [ns]`.
pub fn read_imu_csv(path: &Path) -> Result<Vec<ImuSample>, IoError> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).has_headers(false).flexible(true).from_path(path).map_err(csv_err(path))?;
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let first = rec.get(0).unwrap_or("");
        if line == 0 && first.parse::<f64>().is_err() {
            continue;
        }
        if rec.len() != 7 {
            return Err(parse_err(path, format!("line {}: expected 7 columns, got {}", line + 1, rec.len())));
        }
        let v: Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        let v = v.map_err(|e| parse_err(path, format!("line {}: {e}", line + 1)))?;
        out.push(ImuSample::new(v[0] * 1e-9, Vector3::new(v[1], v[2], v[3]), Vector3::new(v[4], v[5], v[6])));
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct GtRow {
    t: f64,
    qw: f64,
    qx: f64,
    qy: f64,
    qz: f64,
    px: f64,
    py: f64,
    pz: f64,
    vx: f64,
    vy: f64,
    vz: f64,
}

pub fn write_gt_csv(path: &Path, states: &[GtState]) -> Result<(), IoError> {
    write_rows(
        path,
        &["t", "qw", "qx", "qy", "qz", "px", "py", "pz", "vx", "vy", "vz"],
        states.iter().map(|s| {
            let q = s.rotation.quaternion();
            GtRow { t: s.timestamp, qw: q.w, qx: q.i, qy: q.j, qz: q.k, px: s.position.x, py: s.position.y, pz: s.position.z, vx: s.velocity.x, vy: s.velocity.y, vz: s.velocity.z }
        }),
    )
}

pub fn read_gt_csv(path: &Path) -> Result<Vec<GtState>, IoError> {
    let rows: Vec<GtRow> = read_rows(path)?;
    Ok(rows
        .into_iter()
        .map(|r| GtState {
            timestamp: r.t,
            rotation: UnitQuaternion::from_quaternion(Quaternion::new(r.qw, r.qx, r.qy, r.qz)),
            position: Vector3::new(r.px, r.py, r.pz),
            velocity: Vector3::new(r.vx, r.vy, r.vz),
        })
        .collect())
}

/// Ground truth at `t`, interpolating linearly (slerp for rotation)
/// between the bracketing rows.
pub fn gt_at(rows: &[GtState], t: f64) -> Option<GtState> {
    const TOL: f64 = 1e-9;
    let idx = rows.partition_point(|r| r.timestamp < t - TOL);
    let next = rows.get(idx)?;
    if (next.timestamp - t).abs() <= TOL {
        return Some(*next);
    }
    let prev = rows.get(idx.checked_sub(1)?)?;
    let a = (t - prev.timestamp) / (next.timestamp - prev.timestamp);
    Some(GtState {
        timestamp: t,
        rotation: prev.rotation.slerp(&next.rotation, a),
        position: prev.position.lerp(&next.position, a),
        velocity: prev.velocity.lerp(&next.velocity, a),
    })
}

/// Pixel track of one feature: `pixels[i]` is its pixel in keyframe `i`.
pub type Track = Vec<Vector2<f64>>;

#[derive(Serialize, Deserialize)]
struct TrackRow {
    feature: usize,
    frame: usize,
    u: f64,
    v: f64,
}

pub fn write_tracks_csv(path: &Path, tracks: &[Track]) -> Result<(), IoError> {
    write_rows(path, &["feature", "frame", "u", "v"], tracks.iter().enumerate().flat_map(|(f, t)| t.iter().enumerate().map(move |(i, px)| TrackRow { feature: f, frame: i, u: px.x, v: px.y })))
}

/// Tracks must list every feature in every frame, in any row order.
pub fn read_tracks_csv(path: &Path, num_frames: usize) -> Result<Vec<Track>, IoError> {
    let rows: Vec<TrackRow> = read_rows(path)?;
    let count = rows.iter().map(|r| r.feature + 1).max().unwrap_or(0);
    let mut tracks: Vec<Vec<Option<Vector2<f64>>>> = vec![vec![None; num_frames]; count];
    for r in rows {
        if r.frame >= num_frames {
            return Err(parse_err(path, format!("feature {} observed in frame {} of {num_frames}", r.feature, r.frame)));
        }
        tracks[r.feature][r.frame] = Some(Vector2::new(r.u, r.v));
    }
    tracks
        .into_iter()
        .enumerate()
        .map(|(f, t)| t.into_iter().collect::<Option<Track>>().ok_or_else(|| parse_err(path, format!("feature {f} is not observed in every frame"))))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub camera: PinholeCamera,
    pub extrinsics: Extrinsics,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| parse_err(path, e.to_string()))?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, e.to_string()))
}

/// Read a JSON (`.json`) or TOML (`.toml`) file into `T`.
pub fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => read_json(path),
        Some("toml") => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            toml::from_str(&text).map_err(|e| parse_err(path, e.to_string()))
        }
        other => Err(parse_err(path, format!("unsupported config extension {other:?}; use .json or .toml"))),
    }
}

/// The `--config` document: a `run` table (pipeline settings) and a
/// `simulation` table (scenario for simulated windows). Both tables and all
/// their keys are optional; missing keys keep their defaults, and the
/// simulation defaults are the noiseless scenario.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ConfigFile {
    pub run: RunConfig,
    pub simulation: crate::sim::Scenario,
}

/// Everything the pipeline reads for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowData {
    pub imu: Vec<ImuSample>,
    pub cloud: crate::cloud::PredictedCloud,
    pub calibration: Calibration,
    pub tracks: Option<Vec<Track>>,
    /// Ground-truth rows; keyframe states are looked up with [`gt_at`].
    pub ground_truth: Option<Vec<GtState>>,
}

impl WindowData {
    pub fn from_dataset(ds: &Dataset) -> Self {
        Self {
            imu: ds.imu.clone(),
            cloud: ds.cloud.clone(),
            calibration: Calibration { camera: ds.scenario.camera, extrinsics: ds.scenario.extrinsics },
            tracks: Some(ds.tracks.iter().map(|t| t.pixels.clone()).collect()),
            ground_truth: Some(ds.truth.keyframes.clone()),
        }
    }
}

/// Write a simulated dataset in the directory layout above.
pub fn write_dataset(dir: &Path, ds: &Dataset, format: FrameFormat) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_imu_csv(&dir.join(IMU_FILE), &ds.imu)?;
    write_cloud(&dir.join(CLOUD_DIR), &ds.cloud, &ds.scenario.camera, format)?;
    write_gt_csv(&dir.join(GT_FILE), &ds.truth.keyframes)?;
    write_tracks_csv(&dir.join(TRACKS_FILE), &ds.tracks.iter().map(|t| t.pixels.clone()).collect::<Vec<_>>())?;
    write_json(&dir.join(CALIBRATION_FILE), &Calibration { camera: ds.scenario.camera, extrinsics: ds.scenario.extrinsics })?;
    write_json(&dir.join(SCENARIO_FILE), &ScenarioManifest { seed: ds.seed, scenario: ds.scenario, true_scale: ds.truth.scale, outliers_per_frame: ds.truth.outliers.iter().map(Vec::len).collect() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioManifest {
    pub seed: u64,
    pub scenario: crate::sim::Scenario,
    pub true_scale: f64,
    pub outliers_per_frame: Vec<usize>,
}

/// Load a dataset directory; `gt.csv` and `tracks.csv` are optional.
pub fn read_window_data(dir: &Path) -> Result<WindowData, IoError> {
    let imu = read_imu_csv(&dir.join(IMU_FILE))?;
    let (cloud, _) = read_cloud(&dir.join(CLOUD_DIR))?;
    let calibration: Calibration = read_json(&dir.join(CALIBRATION_FILE))?;
    let tracks_path = dir.join(TRACKS_FILE);
    let tracks = if tracks_path.exists() { Some(read_tracks_csv(&tracks_path, cloud.num_frames())?) } else { None };
    let gt_path = dir.join(GT_FILE);
    let ground_truth = if gt_path.exists() { Some(read_gt_csv(&gt_path)?) } else { None };
    Ok(WindowData { imu, cloud, calibration, tracks, ground_truth })
}

pub const METRICS_HEADER: [&str; 11] = ["window_id", "grav_deg", "vel_mps", "scale_lin_pct", "scale_nl_pct", "ate_deg", "ate_m", "success", "fail_category", "t_lin_ms", "t_nl_ms"];

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Metrics rows with fixed six-decimal formatting; missing values and
/// unrecorded timings are empty cells.
pub fn write_metrics_csv(path: &Path, reports: &[InitReport]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(METRICS_HEADER).map_err(csv_err(path))?;
    for r in reports {
        w.write_record([
            r.window_id.to_string(),
            cell(r.gravity_deg),
            cell(r.velocity_mps),
            cell(r.scale_lin_pct),
            cell(r.scale_nl_pct),
            cell(r.ate_deg),
            cell(r.ate_m),
            r.success.to_string(),
            r.failure.map(|f| f.label().to_string()).unwrap_or_default(),
            cell(r.t_lin_ms),
            cell(r.t_nl_ms),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_lm_log(path: &Path, log: &[IterationRecord]) -> Result<(), IoError> {
    write_rows(path, &["iter", "cost", "damping", "step_norm", "accepted"], log)
}

/// Version of the run output directory layout.
pub const OUTPUT_FORMAT_VERSION: u32 = 1;
pub const RUN_FILE: &str = "run.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const STATES_FILE: &str = "states.json";
pub const LM_LOG_FILE: &str = "lm_log.csv";

#[derive(Serialize)]
struct RunManifest<'a> {
    format_version: u32,
    config: &'a RunConfig,
    output: &'a RunOutput,
}

#[derive(Serialize)]
struct StatesFile<'a> {
    format_version: u32,
    keyframe_times: &'a [f64],
    initial: &'a [ImuState],
    refined: Option<&'a [ImuState]>,
    /// `ᴳp_f` of the feature-based variants.
    features: Option<&'a [nalgebra::Vector3<f64>]>,
    scales: Option<&'a [f64]>,
}

/// Write `run.json`, `metrics.csv`, `states.json` and, when `log` is set,
/// `lm_log.csv` into `dir`.
pub fn write_run_outputs(dir: &Path, cfg: &RunConfig, out: &RunOutput, log: bool) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_json(&dir.join(RUN_FILE), &RunManifest { format_version: OUTPUT_FORMAT_VERSION, config: cfg, output: out })?;
    write_metrics_csv(&dir.join(METRICS_FILE), std::slice::from_ref(&out.report))?;
    let refined = out.refined.as_ref();
    let regional = refined.map(|r| r.regional_scales.as_slice()).filter(|s| !s.is_empty());
    write_json(
        &dir.join(STATES_FILE),
        &StatesFile {
            format_version: OUTPUT_FORMAT_VERSION,
            keyframe_times: &out.keyframe_times,
            initial: &out.initial_states,
            refined: refined.map(|r| r.values.states.as_slice()),
            features: refined.map(|r| r.values.features.as_slice()).filter(|f| !f.is_empty()),
            scales: regional,
        },
    )?;
    if log {
        write_lm_log(&dir.join(LM_LOG_FILE), &out.lm_log)?;
    }
    Ok(())
}

pub const ABLATION_HEADER: [&str; 9] = ["axis", "value", "runs", "successes", "grav_deg", "vel_mps", "scale_lin_pct", "scale_nl_pct", "ate_m"];

pub fn write_ablation_csv(path: &Path, rows: &[crate::pipeline::AblationRow]) -> Result<(), IoError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    write_ablation(file, rows).map_err(csv_err(path))
}

/// Ablation rows as CSV to any writer, e.g. stdout.
pub fn write_ablation<W: std::io::Write>(writer: W, rows: &[crate::pipeline::AblationRow]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(ABLATION_HEADER)?;
    for r in rows {
        w.write_record([
            r.axis.clone(),
            r.value.clone(),
            r.runs.to_string(),
            r.successes.to_string(),
            cell(r.grav_deg),
            cell(r.vel_mps),
            cell(r.scale_lin_pct),
            cell(r.scale_nl_pct),
            cell(r.ate_m),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{simulate, Scenario};

    #[test]
    fn dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = simulate(&Scenario::noisy(), 3).unwrap();
        write_dataset(dir.path(), &ds, FrameFormat::Bin).unwrap();
        let back = read_window_data(dir.path()).unwrap();
        let direct = WindowData::from_dataset(&ds);
        assert_eq!(back.cloud, direct.cloud);
        assert_eq!(back.tracks, direct.tracks);
        assert_eq!(back.calibration, direct.calibration);
        assert_eq!(back.imu.len(), ds.imu.len());
        for (a, b) in back.imu.iter().zip(&ds.imu) {
            assert!((a.timestamp - b.timestamp).abs() < 1e-12);
            assert_eq!((a.gyro, a.accel), (b.gyro, b.accel));
        }
        let gt = back.ground_truth.unwrap();
        for (a, b) in gt.iter().zip(&ds.truth.keyframes) {
            assert_eq!(a.timestamp, b.timestamp);
            assert!((a.rotation.angle_to(&b.rotation)) < 1e-12);
            assert_eq!(a.position, b.position);
        }
        let m: ScenarioManifest = read_json(&dir.path().join(SCENARIO_FILE)).unwrap();
        assert_eq!(m.seed, 3);
    }

    #[test]
    fn euroc_header_and_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("imu.csv");
        fs::write(&p, "#timestamp [ns],w_RS_S_x [rad s^-1],w_RS_S_y [rad s^-1],w_RS_S_z [rad s^-1],a_RS_S_x [m s^-2],a_RS_S_y [m s^-2],a_RS_S_z [m s^-2]\n1403636579758555392,-0.099,0.142,0.025,8.13,-0.37,-2.43\n").unwrap();
        let s = read_imu_csv(&p).unwrap();
        assert_eq!(s.len(), 1);
        assert!((s[0].timestamp - 1_403_636_579.758_555_4).abs() < 1e-6);
        fs::write(&p, "timestamp_ns,wx,wy,wz,ax,ay,az\n1,2,3\n").unwrap();
        assert!(matches!(read_imu_csv(&p), Err(IoError::Parse { .. })));
    }

    #[test]
    fn gt_interpolation() {
        let rows = vec![
            GtState { timestamp: 0.0, rotation: UnitQuaternion::identity(), position: Vector3::zeros(), velocity: Vector3::x() },
            GtState { timestamp: 1.0, rotation: UnitQuaternion::from_euler_angles(0.0, 0.0, 1.0), position: Vector3::new(2.0, 0.0, 0.0), velocity: Vector3::x() },
        ];
        let mid = gt_at(&rows, 0.5).unwrap();
        assert!((mid.position.x - 1.0).abs() < 1e-12);
        assert!((crate::geometry::yaw_of(&mid.rotation) - 0.5).abs() < 1e-12);
        assert_eq!(gt_at(&rows, 1.0).unwrap(), rows[1]);
        assert!(gt_at(&rows, 1.5).is_none());
        assert!(gt_at(&rows, -0.5).is_none());
    }

    #[test]
    fn tracks_require_full_visibility() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tracks.csv");
        fs::write(&p, "feature,frame,u,v\n0,0,1,2\n0,1,3,4\n1,0,5,6\n").unwrap();
        assert!(read_tracks_csv(&p, 2).is_err());
        fs::write(&p, "feature,frame,u,v\n0,1,3,4\n0,0,1,2\n").unwrap();
        assert_eq!(read_tracks_csv(&p, 2).unwrap(), vec![vec![Vector2::new(1.0, 2.0), Vector2::new(3.0, 4.0)]]);
    }

    #[test]
    fn config_by_extension() {
        #[derive(Debug, PartialEq, Deserialize)]
        struct C {
            a: usize,
            b: String,
        }
        let dir = tempfile::tempdir().unwrap();
        let j = dir.path().join("c.json");
        let t = dir.path().join("c.toml");
        fs::write(&j, r#"{"a": 3, "b": "x"}"#).unwrap();
        fs::write(&t, "a = 3\nb = \"x\"\n").unwrap();
        assert_eq!(read_config::<C>(&j).unwrap(), read_config::<C>(&t).unwrap());
        assert!(read_config::<C>(&dir.path().join("c.yaml")).is_err());
    }

    #[test]
    fn partial_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        fs::write(&p, "[run]\nsamples = 50\nvariant = \"sc\"\n\n[run.regions]\nrows = 1\ncols = 1\n\n[simulation]\nnum_features = 80\n").unwrap();
        let c: ConfigFile = read_config(&p).unwrap();
        assert_eq!(c.run.samples, 50);
        assert_eq!(c.run.variant, crate::pipeline::InitVariant::Sc);
        assert_eq!(c.run.regions.count(), 1);
        assert_eq!(c.run.num_keyframes, RunConfig::default().num_keyframes);
        assert_eq!(c.simulation.num_features, 80);
        assert_eq!(c.simulation.sensor, Scenario::default().sensor);
    }
}
