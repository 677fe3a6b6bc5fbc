//! End-to-end initialization of one window and ablation sweeps over
//! simulated windows.
//!
//! Stages run in order: keyframes → preintegration → cloud sampling → linear
//! solve → gravity alignment → refinement → covariance → evaluation. The first
//! failing stage decides the failure category of the window.

use std::time::Instant;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{assign_regions, filter_and_sample, CloudError, RegionDims, RegionGrid, SampledSet};
use crate::eval::{chi_square_gate, gravity_angle, gravity_error, median, scale_error, success_gate, window_ate, ChiSquareResult, FailureCategory, GateInputs, InitReport, Pose, ATE_THRESHOLD};
use crate::geometry::{gravity_align, gravity_world, GeometryError, GRAVITY_MAGNITUDE};
use crate::imu::{preintegrate, propagate, slice_samples, Biases, ImuError, ImuPreintegration};
use crate::io::{gt_at, WindowData};
use crate::linear_init::{
    build_dongsi_system, build_feature_free_system, rank_diagnostics, ransac_solve, solve_constrained, FeatureObservation, LinearInitError, LinearSystem,
    RansacConfig, WeightConfig, DEFAULT_RANK_TOL,
};
use crate::refine::{recover_covariance, solve_lm, CloudObservation, CovarianceStatus, ImuState, IterationRecord, Problem, RefineConfig, RefineError, Termination, Values, WindowInputs};
use crate::sim::{simulate, GtState, Scenario, SimError};

/// Which initializer runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitVariant {
    /// Feature-free linear solve and feature-free refinement.
    Ff,
    /// Feature-free linear solve, then tracked features with a cloud-scale
    /// constraint.
    Sc,
    /// Feature-based linear solve and bundle adjustment on feature tracks.
    Dongsi,
}

impl std::fmt::Display for InitVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InitVariant::Ff => "ff",
            InitVariant::Sc => "sc",
            InitVariant::Dongsi => "dongsi",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub num_keyframes: usize,
    /// seconds
    pub window: f64,
    /// Cloud samples per frame.
    pub samples: usize,
    pub conf_min: f64,
    pub variant: InitVariant,
    pub use_ransac: bool,
    pub ransac: RansacConfig,
    pub regions: RegionDims,
    pub weights: WeightConfig,
    pub refine: RefineConfig,
    /// When false the linear solution is evaluated directly.
    pub refine_enabled: bool,
    pub ate_threshold: f64,
    pub chi_square_level: f64,
    /// Fail the window (as NL.) when the chi-square test rejects it.
    pub chi_square_gate: bool,
    /// RANSAC seed.
    pub seed: u64,
    /// Wall-clock timings vary between runs, so they are left blank in the
    /// metrics unless requested.
    pub record_timings: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            num_keyframes: 5,
            window: 0.5,
            samples: 100,
            conf_min: 1.5,
            variant: InitVariant::Ff,
            use_ransac: true,
            ransac: RansacConfig::default(),
            regions: RegionDims::default(),
            weights: WeightConfig::default(),
            refine: RefineConfig::default(),
            refine_enabled: true,
            ate_threshold: ATE_THRESHOLD,
            chi_square_level: 0.95,
            chi_square_gate: false,
            seed: 0,
            record_timings: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let config = |category, error| Err(PipelineError { stage: Stage::Config, category, error });
        let invalid = |m: String| StageError::Invalid(m);
        if self.num_keyframes < 3 {
            return config(FailureCategory::Obs, LinearInitError::FewerThanThreeFrames(self.num_keyframes).into());
        }
        if !(self.window > 0.0) {
            return config(FailureCategory::Obs, invalid(format!("window must be positive, got {}", self.window)));
        }
        if self.samples < 2 {
            return config(FailureCategory::Obs, invalid(format!("need at least 2 samples per frame, got {}", self.samples)));
        }
        if self.regions.count() == 0 {
            return config(FailureCategory::Obs, invalid("region grid must have at least one cell".into()));
        }
        if self.use_ransac {
            if let Err(e) = self.ransac.validate() {
                return config(FailureCategory::Lin, e.into());
            }
        }
        if let Err(e) = self.refine.validate() {
            return config(FailureCategory::NL, e.into());
        }
        if !(self.ate_threshold > 0.0) || !(self.chi_square_level > 0.0 && self.chi_square_level < 1.0) {
            return config(FailureCategory::Ate, invalid("ATE threshold must be positive and chi-square level in (0, 1)".into()));
        }
        Ok(())
    }

    /// Make a simulation scenario produce the keyframes this config expects.
    pub fn apply_to(&self, scenario: &mut Scenario) {
        scenario.num_keyframes = self.num_keyframes;
        scenario.window = self.window;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Config,
    Simulation,
    Keyframes,
    Preintegration,
    Sampling,
    Linear,
    Refinement,
    Covariance,
    Evaluation,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Simulation => "simulation",
            Stage::Keyframes => "keyframe selection",
            Stage::Preintegration => "preintegration",
            Stage::Sampling => "cloud sampling",
            Stage::Linear => "linear initialization",
            Stage::Refinement => "refinement",
            Stage::Covariance => "covariance recovery",
            Stage::Evaluation => "evaluation",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StageError {
    #[error(transparent)]
    Linear(#[from] LinearInitError),
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error(transparent)]
    Imu(#[from] ImuError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{0}")]
    Invalid(String),
}

/// A failed stage with its failure category.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("{stage} stage failed [{category}]: {error}")]
pub struct PipelineError {
    pub stage: Stage,
    pub category: FailureCategory,
    pub error: StageError,
}

fn fail<T>(stage: Stage, category: FailureCategory, error: impl Into<StageError>) -> Result<T, PipelineError> {
    Err(PipelineError { stage, category, error: error.into() })
}

/// Output of the linear stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearStage {
    /// Metric units per cloud unit; absent for the feature-based solve.
    pub scale: Option<f64>,
    /// `ᴵ⁰v_{I₀}`
    pub velocity_i0: Vector3<f64>,
    /// `ᴵ⁰g`
    pub gravity_i0: Vector3<f64>,
    pub lagrange_multiplier: f64,
    pub cost: f64,
    pub rank: usize,
    pub condition_number: f64,
    pub blocks: usize,
    /// Blocks kept by RANSAC.
    pub inliers: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefineStage {
    /// Written to `states.json` rather than `run.json`.
    #[serde(skip)]
    pub values: Values,
    /// Reported single scale (weighted mean of regional scales).
    pub scale: Option<f64>,
    pub regional_scales: Vec<f64>,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub termination: Termination,
    pub residuals: usize,
    pub variables: usize,
    pub covariance_rcond: Option<f64>,
}

/// Everything one window produced, serialized into the run directory.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct RunOutput {
    pub report: InitReport,
    pub keyframe_times: Vec<f64>,
    pub linear: Option<LinearStage>,
    /// States after gravity alignment and IMU propagation, in `{G}`.
    #[serde(skip)]
    pub initial_states: Vec<ImuState>,
    pub refined: Option<RefineStage>,
    #[serde(skip)]
    pub lm_log: Vec<IterationRecord>,
    #[serde(skip)]
    pub failure: Option<PipelineError>,
}

impl RunOutput {
    /// Refined states when refinement ran, otherwise the initial ones.
    pub fn final_states(&self) -> &[ImuState] {
        self.refined.as_ref().map_or(&self.initial_states, |r| &r.values.states)
    }
}

/// Initialize one window.
///
/// Only an invalid configuration is returned as `Err`; a stage failure is
/// recorded in the report (and in [`RunOutput::failure`]) so that metrics of
/// the stages that did run are kept.
pub fn run_pipeline(cfg: &RunConfig, data: &WindowData) -> Result<RunOutput, PipelineError> {
    cfg.validate()?;
    let mut out = RunOutput::default();
    let result = run_stages(cfg, data, &mut out);
    let failure = result.err();
    out.report.set_outcome(failure.as_ref().map(|f| f.category), failure.as_ref().map(|f| f.to_string()));
    out.failure = failure;
    Ok(out)
}

/// Ground-truth quantities used by the metrics.
struct Truth {
    keyframes: Vec<GtState>,
    gravity_i0: Vector3<f64>,
    velocity_i0: Vector3<f64>,
    /// `(cloud displacement, metric displacement)` of the last camera center.
    displacement: Option<(Vector3<f64>, Vector3<f64>)>,
}

impl Truth {
    fn new(data: &WindowData, times: &[f64]) -> Option<Self> {
        let rows = data.ground_truth.as_ref()?;
        let keyframes: Vec<GtState> = times.iter().map(|&t| gt_at(rows, t)).collect::<Option<_>>()?;
        let first = keyframes[0];
        let last = keyframes[keyframes.len() - 1];
        let ext = &data.calibration.extrinsics;
        let center = |s: &GtState| s.position + s.rotation * ext.trans_imu_cam;
        let displacement = data.cloud.camera_positions.as_ref().and_then(|c| Some((c.last()? - c.first()?, center(&last) - center(&first))));
        Some(Self {
            gravity_i0: first.rotation.inverse() * gravity_world(),
            velocity_i0: first.rotation.inverse() * first.velocity,
            displacement,
            keyframes,
        })
    }

    fn scale_pct(&self, s: Option<f64>) -> Option<f64> {
        let (pred, gt) = self.displacement?;
        scale_error(s?, &pred, &gt).ok()
    }

    fn poses(&self) -> Vec<Pose> {
        self.keyframes.iter().map(|k| Pose { rotation: k.rotation, position: k.position }).collect()
    }
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Cloud-derived inputs of the linear and feature-free stages.
struct CloudStage {
    samples: SampledSet,
    grid: RegionGrid,
}

fn run_stages(cfg: &RunConfig, data: &WindowData, out: &mut RunOutput) -> Result<(), PipelineError> {
    let camera = &data.calibration.camera;
    let ext = &data.calibration.extrinsics;

    // keyframes are the cloud frames
    let times: Vec<f64> = data.cloud.frames.iter().map(|f| f.timestamp).collect();
    out.keyframe_times = times.clone();
    if times.len() != cfg.num_keyframes {
        return fail(Stage::Keyframes, FailureCategory::Obs, StageError::Invalid(format!("cloud has {} frames, config expects {}", times.len(), cfg.num_keyframes)));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return fail(Stage::Keyframes, FailureCategory::Obs, StageError::Invalid("cloud frame timestamps are not strictly increasing".into()));
    }
    let truth = Truth::new(data, &times);

    let t_lin = Instant::now();
    let segments: Vec<ImuPreintegration> = times
        .windows(2)
        .map(|w| preintegrate(&slice_samples(&data.imu, w[0], w[1])?, &Biases::zero(), &cfg.refine.imu_noise))
        .collect::<Result<_, ImuError>>()
        .or_else(|e| fail(Stage::Preintegration, FailureCategory::Obs, e))?;
    let mut from_first = vec![ImuPreintegration::identity(Biases::zero())];
    for s in &segments {
        let next = from_first[from_first.len() - 1].compose(s);
        from_first.push(next);
    }

    let observations = match (cfg.variant, &data.tracks) {
        (InitVariant::Ff, _) => Vec::new(),
        (_, Some(tracks)) => tracks
            .iter()
            .enumerate()
            .flat_map(|(f, t)| t.iter().enumerate().map(move |(i, px)| FeatureObservation { frame: i, feature: f, bearing: camera.normalize(px) }))
            .collect(),
        (v, None) => return fail(Stage::Sampling, FailureCategory::Obs, StageError::Invalid(format!("variant {v} needs feature tracks"))),
    };

    let cloud_stage = if cfg.variant == InitVariant::Dongsi {
        None
    } else {
        let mut samples = filter_and_sample(&data.cloud, camera, cfg.samples, cfg.conf_min).or_else(|e| fail(Stage::Sampling, FailureCategory::Obs, e))?;
        let grid = assign_regions(&mut samples, camera, cfg.regions).or_else(|e| fail(Stage::Sampling, FailureCategory::Obs, e))?;
        Some(CloudStage { samples, grid })
    };

    // linear stage
    let lin_fail = |e: LinearInitError| PipelineError { stage: Stage::Linear, category: FailureCategory::Lin, error: e.into() };
    let num_tracks = data.tracks.as_ref().map_or(0, Vec::len);
    let system: LinearSystem = match &cloud_stage {
        Some(c) => build_feature_free_system(&c.samples, &from_first, ext, &cfg.weights).map_err(lin_fail)?,
        None => build_dongsi_system(&observations, num_tracks, &from_first, ext).map_err(lin_fail)?,
    };
    let rank = rank_diagnostics(&system, DEFAULT_RANK_TOL);
    let (solution, inliers) = if cfg.use_ransac && cloud_stage.is_some() {
        let r = ransac_solve(&system, &cfg.ransac, GRAVITY_MAGNITUDE, cfg.seed).map_err(lin_fail)?;
        (r.solution, Some(r.inliers))
    } else {
        (solve_constrained(&system, GRAVITY_MAGNITUDE).map_err(lin_fail)?, None)
    };
    let scale = cloud_stage.as_ref().map(|_| solution.x[0]);
    let linear = LinearStage {
        scale,
        velocity_i0: solution.velocity(),
        gravity_i0: solution.gravity(),
        lagrange_multiplier: solution.lambda,
        cost: solution.cost,
        rank: rank.rank,
        condition_number: rank.condition_number,
        blocks: system.num_blocks(),
        inliers: inliers.as_ref().map(Vec::len),
    };
    let report = &mut out.report;
    if let Some(t) = &truth {
        report.gravity_lin_deg = Some(gravity_angle(&linear.gravity_i0, &t.gravity_i0));
        report.velocity_lin_mps = Some((linear.velocity_i0 - t.velocity_i0).norm());
        report.scale_lin_pct = t.scale_pct(scale);
    }
    out.linear = Some(linear.clone());
    if let Some(s) = scale.filter(|s| !(*s > 0.0)) {
        return fail(Stage::Linear, FailureCategory::Lin, StageError::Invalid(format!("linear solve returned non-positive scale {s:.6}")));
    }

    // gravity alignment and propagation
    let r0 = gravity_align(&linear.gravity_i0).or_else(|e| fail(Stage::Linear, FailureCategory::Lin, e))?;
    let mut states = vec![ImuState { rotation: r0, position: Vector3::zeros(), velocity: r0 * linear.velocity_i0, biases: Biases::zero() }];
    for s in &segments {
        let nav = propagate(&states[states.len() - 1].nav(), s, &gravity_world());
        states.push(ImuState::from_nav(&nav, Biases::zero()));
    }
    out.initial_states = states.clone();
    if cfg.record_timings {
        out.report.t_lin_ms = Some(elapsed_ms(t_lin));
    }

    if !cfg.refine_enabled {
        let report = &mut out.report;
        report.gravity_deg = report.gravity_lin_deg;
        report.velocity_mps = report.velocity_lin_mps;
        return evaluate(cfg, truth.as_ref(), &states, true, None, out);
    }

    // refinement
    let t_nl = Instant::now();
    let inputs = WindowInputs { initial: &states, preintegrations: &segments, extrinsics: ext, camera };
    let nl_fail = |e: RefineError| PipelineError { stage: Stage::Refinement, category: FailureCategory::NL, error: e.into() };
    let problem = match (cfg.variant, &cloud_stage) {
        (InitVariant::Ff, Some(c)) => {
            let kept = match &inliers {
                Some(blocks) => inlier_samples(&c.samples, &system, blocks),
                None => c.samples.clone(),
            };
            Problem::feature_free(&inputs, &kept, &c.grid, scale.unwrap_or(1.0), &cfg.refine).map_err(nl_fail)?
        }
        (InitVariant::Sc, _) => {
            let s = scale.unwrap_or(1.0);
            let (features, observations, cloud_obs) = lift_tracked_features(data, &observations, s, &r0);
            if features.is_empty() {
                return fail(Stage::Refinement, FailureCategory::Obs, StageError::Invalid("no tracked feature has a valid cloud point".into()));
            }
            Problem::scale_constrained(&inputs, &observations, &cloud_obs, &features, s, &cfg.refine).map_err(nl_fail)?
        }
        _ => {
            let features: Vec<Vector3<f64>> = (0..num_tracks).map(|f| r0 * Vector3::new(solution.x[3 * f], solution.x[3 * f + 1], solution.x[3 * f + 2])).collect();
            Problem::feature_based(&inputs, &observations, &features, &cfg.refine).map_err(nl_fail)?
        }
    };
    let summary = solve_lm(&problem, &cfg.refine.lm).map_err(nl_fail)?;
    out.lm_log = summary.log.clone();
    let covariance = recover_covariance(&problem, &summary.values).or_else(|e| fail(Stage::Covariance, FailureCategory::Cov, e))?;
    if cfg.record_timings {
        out.report.t_nl_ms = Some(elapsed_ms(t_nl));
    }
    let refined_scale = problem.reported_scale(&summary.values);
    let chi = chi_square_gate(summary.final_cost, problem.num_residuals(), problem.num_variables(), cfg.chi_square_level).ok();
    out.report.chi_square = chi;
    out.refined = Some(RefineStage {
        values: summary.values.clone(),
        scale: refined_scale,
        regional_scales: summary.values.realized_scales(),
        initial_cost: summary.initial_cost,
        final_cost: summary.final_cost,
        iterations: summary.iterations,
        termination: summary.termination,
        residuals: problem.num_residuals(),
        variables: problem.num_variables(),
        covariance_rcond: match &covariance {
            CovarianceStatus::Recovered { rcond, .. } => Some(*rcond),
            CovarianceStatus::Failed { .. } => None,
        },
    });
    let refined = &summary.values.states;
    if let Some(t) = &truth {
        let report = &mut out.report;
        report.gravity_deg = Some(gravity_error(&refined[0].rotation, &t.keyframes[0].rotation));
        report.velocity_mps = Some((refined[0].rotation.inverse() * refined[0].velocity - t.velocity_i0).norm());
        report.scale_nl_pct = t.scale_pct(refined_scale);
    }
    if !summary.termination.converged() {
        return fail(Stage::Refinement, FailureCategory::NL, StageError::Invalid(format!("no convergence after {} iterations", summary.iterations)));
    }
    evaluate(cfg, truth.as_ref(), refined, covariance.is_recovered(), chi, out).and_then(|()| match covariance {
        CovarianceStatus::Failed { reason } => fail(Stage::Covariance, FailureCategory::Cov, StageError::Invalid(reason)),
        CovarianceStatus::Recovered { .. } => Ok(()),
    })
}

/// Window ATE, then the success gate over the remaining criteria.
fn evaluate(cfg: &RunConfig, truth: Option<&Truth>, states: &[ImuState], covariance_ok: bool, chi: Option<ChiSquareResult>, out: &mut RunOutput) -> Result<(), PipelineError> {
    if let Some(t) = truth {
        let est: Vec<Pose> = states.iter().map(|s| Pose { rotation: s.rotation, position: s.position }).collect();
        if let Ok((deg, m)) = window_ate(&est, &t.poses()) {
            out.report.ate_deg = Some(deg);
            out.report.ate_m = Some(m);
        }
    }
    let gate = GateInputs { observations_ok: true, linear_ok: true, converged: true, covariance_ok, ate_m: out.report.ate_m, ate_threshold: cfg.ate_threshold };
    // covariance failure is reported by the caller with its reason
    if success_gate(&gate) == Some(FailureCategory::Ate) {
        return fail(Stage::Evaluation, FailureCategory::Ate, StageError::Invalid(format!("window ATE {:.3} m exceeds {:.3} m", out.report.ate_m.unwrap_or(f64::NAN), cfg.ate_threshold)));
    }
    if let Some(c) = chi.filter(|c| cfg.chi_square_gate && !c.passed) {
        return fail(Stage::Evaluation, FailureCategory::NL, StageError::Invalid(format!("chi-square statistic {:.1} exceeds {:.1} ({} dof)", c.statistic, c.threshold, c.dof)));
    }
    Ok(())
}

/// The samples behind the RANSAC inlier blocks, with their regions.
fn inlier_samples(samples: &SampledSet, system: &LinearSystem, inliers: &[usize]) -> SampledSet {
    let mut frames = vec![Vec::new(); samples.num_frames()];
    for &b in inliers {
        let src = system.sources[b];
        frames[src.frame].push(samples.frames[src.frame][src.index]);
    }
    SampledSet { k: samples.k, frames }
}

/// Tracked features with at least one valid cloud point, initialized in
/// `{G}` from their earliest cloud point. Returns the features, their
/// re-indexed observations and the cloud observations.
fn lift_tracked_features(
    data: &WindowData,
    observations: &[FeatureObservation],
    scale: f64,
    r0: &nalgebra::UnitQuaternion<f64>,
) -> (Vec<Vector3<f64>>, Vec<FeatureObservation>, Vec<CloudObservation>) {
    let ext = &data.calibration.extrinsics;
    let tracks = data.tracks.as_deref().unwrap_or_default();
    let mut features = Vec::new();
    let mut cloud_obs = Vec::new();
    let mut remap = vec![None; tracks.len()];
    for (f, t) in tracks.iter().enumerate() {
        let lookups: Vec<(Vector3<f64>, f64)> = t.iter().enumerate().filter_map(|(i, px)| data.cloud.interpolate_at(i, px).ok()).collect();
        let Some(&(first, _)) = lookups.first() else { continue };
        let id = features.len();
        remap[f] = Some(id);
        features.push(r0 * (ext.rot_imu_cam * (first * scale) + ext.trans_imu_cam));
        cloud_obs.extend(lookups.into_iter().map(|(point, confidence)| CloudObservation { feature: id, point, confidence }));
    }
    let observations = observations.iter().filter_map(|o| Some(FeatureObservation { feature: remap[o.feature]?, ..*o })).collect();
    (features, observations, cloud_obs)
}

/// One knob varied by an ablation sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "axis", content = "values")]
pub enum SweepAxis {
    Samples(Vec<usize>),
    Window(Vec<f64>),
    Regions(Vec<RegionDims>),
    Ransac(Vec<bool>),
    Variant(Vec<InitVariant>),
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Samples(_) => "samples",
            SweepAxis::Window(_) => "window",
            SweepAxis::Regions(_) => "regions",
            SweepAxis::Ransac(_) => "ransac",
            SweepAxis::Variant(_) => "variant",
        }
    }

    /// `(label, config, scenario)` per cell.
    fn cells(&self, base: &RunConfig, scenario: &Scenario) -> Vec<(String, RunConfig, Scenario)> {
        let cell = |label: String, f: &dyn Fn(&mut RunConfig)| {
            let mut cfg = *base;
            f(&mut cfg);
            let mut sc = *scenario;
            cfg.apply_to(&mut sc);
            (label, cfg, sc)
        };
        match self {
            SweepAxis::Samples(v) => v.iter().map(|&k| cell(k.to_string(), &|c| c.samples = k)).collect(),
            SweepAxis::Window(v) => v.iter().map(|&w| cell(format!("{w}"), &|c| c.window = w)).collect(),
            SweepAxis::Regions(v) => v.iter().map(|&d| cell(format!("{}x{}", d.rows, d.cols), &|c| c.regions = d)).collect(),
            SweepAxis::Ransac(v) => v.iter().map(|&r| cell(if r { "on".into() } else { "off".into() }, &|c| c.use_ransac = r)).collect(),
            SweepAxis::Variant(v) => v.iter().map(|&x| cell(x.to_string(), &|c| c.variant = x)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub axis: SweepAxis,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub base: RunConfig,
    #[serde(default = "Scenario::noisy")]
    pub scenario: Scenario,
}

impl AblationSpec {
    pub fn new(axis: SweepAxis, seeds: Vec<u64>) -> Self {
        Self { axis, seeds, base: RunConfig::default(), scenario: Scenario::noisy() }
    }
}

/// Medians of one sweep cell over its seeds; failed windows count toward
/// `runs` but contribute only the metrics they produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    pub runs: usize,
    pub successes: usize,
    pub grav_deg: Option<f64>,
    pub vel_mps: Option<f64>,
    pub scale_lin_pct: Option<f64>,
    pub scale_nl_pct: Option<f64>,
    pub ate_m: Option<f64>,
}

/// Simulate and initialize every `(cell, seed)` pair in parallel.
///
/// Each pair is an independent pure computation, so rows do not depend on
/// scheduling.
pub fn run_ablation(spec: &AblationSpec) -> Result<Vec<AblationRow>, PipelineError> {
    let cells = spec.axis.cells(&spec.base, &spec.scenario);
    for (_, cfg, sc) in &cells {
        cfg.validate()?;
        sc.validate().or_else(|e| fail(Stage::Simulation, FailureCategory::Obs, e))?;
    }
    let jobs: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| spec.seeds.iter().map(move |&s| (c, s))).collect();
    let reports: Vec<InitReport> = jobs
        .par_iter()
        .map(|&(c, seed)| {
            let (_, cfg, sc) = &cells[c];
            let ds = simulate(sc, seed).or_else(|e| fail(Stage::Simulation, FailureCategory::Obs, e))?;
            let cfg = RunConfig { seed, ..*cfg };
            run_pipeline(&cfg, &WindowData::from_dataset(&ds)).map(|o| o.report)
        })
        .collect::<Result<_, _>>()?;
    Ok(cells
        .iter()
        .enumerate()
        .map(|(c, (label, _, _))| {
            let cell: Vec<&InitReport> = reports.iter().zip(&jobs).filter(|(_, j)| j.0 == c).map(|(r, _)| r).collect();
            let med = |f: &dyn Fn(&InitReport) -> Option<f64>| median(&cell.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
            AblationRow {
                axis: spec.axis.name().to_string(),
                value: label.clone(),
                runs: cell.len(),
                successes: cell.iter().filter(|r| r.success).count(),
                grav_deg: med(&|r| r.gravity_deg),
                vel_mps: med(&|r| r.velocity_mps),
                scale_lin_pct: med(&|r| r.scale_lin_pct),
                scale_nl_pct: med(&|r| r.scale_nl_pct),
                ate_m: med(&|r| r.ate_m),
            }
        })
        .collect())
}
