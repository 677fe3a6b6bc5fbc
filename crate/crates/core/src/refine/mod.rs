//! Nonlinear refinement of the closed-form initialization.
//!
//! Three problem layouts share one dense Levenberg–Marquardt solver:
//! feature-based bundle adjustment over 3D points, the scale-constrained
//! variant that additionally ties features to the cloud, and the
//! feature-free variant that replaces features with per-region cloud scales.

pub mod factors;
pub mod lm;

use nalgebra::{DMatrix, DVector, UnitQuaternion, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{RegionGrid, SampledSet};
use crate::geometry::{exp_so3_unchecked, gravity_world, Extrinsics, GeometryError, PinholeCamera};
use crate::imu::{Biases, ImuNoise, ImuPreintegration, NavState};
use crate::linear_init::FeatureObservation;
pub use factors::{CloudScaleFactor, Factor, FeatureFreeFactor, ImuFactor, Linearization, PriorConfig, PriorFactor, ReprojectionFactor, SmoothnessFactor};
pub use lm::{check_jacobians, recover_covariance, solve_lm, CovarianceStatus, IterationRecord, JacobianBlockReport, JacobianReport, LmConfig, LmSummary, Termination};

/// Lower bound of every realized scale.
pub const SCALE_EPSILON: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RefineError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("regions {0} and {1} are not adjacent")]
    NonAdjacentRegions(usize, usize),
    #[error("scale {0} cannot be represented (must exceed {SCALE_EPSILON})")]
    InvalidScale(f64),
    #[error("cost became non-finite at iteration {0}")]
    DivergedNaN(usize),
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
}

/// `ε + ln(1 + eˣ)`
pub fn softplus(x: f64) -> f64 {
    SCALE_EPSILON + if x > 30.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() }
}

pub fn softplus_derivative(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn inverse_softplus(s: f64) -> Result<f64, RefineError> {
    let y = s - SCALE_EPSILON;
    if !(y > 0.0) || !y.is_finite() {
        return Err(RefineError::InvalidScale(s));
    }
    Ok(if y > 30.0 { y + (-(-y).exp_m1()).ln() } else { y.exp_m1().ln() })
}

/// 15-dimensional IMU state. Tangent order `(θ, p, v, b_g, b_a)` with the
/// rotation perturbed on the right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuState {
    /// `ᴳ_I R`
    pub rotation: UnitQuaternion<f64>,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub biases: Biases,
}

impl ImuState {
    pub const DIM: usize = 15;

    pub fn from_nav(nav: &NavState, biases: Biases) -> Self {
        Self { rotation: nav.rotation, position: nav.position, velocity: nav.velocity, biases }
    }

    pub fn nav(&self) -> NavState {
        NavState { rotation: self.rotation, position: self.position, velocity: self.velocity }
    }

    pub fn retract(&self, d: &[f64]) -> Self {
        let v = |k: usize| Vector3::new(d[k], d[k + 1], d[k + 2]);
        Self {
            rotation: self.rotation * exp_so3_unchecked(&v(0)),
            position: self.position + v(3),
            velocity: self.velocity + v(6),
            biases: Biases { gyro: self.biases.gyro + v(9), accel: self.biases.accel + v(12) },
        }
    }
}

/// Handle of one optimization variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VarKey {
    State(usize),
    Feature(usize),
    /// Unconstrained scale parameter `s̃_j`.
    Scale(usize),
}

impl VarKey {
    pub fn tangent_dim(&self) -> usize {
        match self {
            VarKey::State(_) => ImuState::DIM,
            VarKey::Feature(_) => 3,
            VarKey::Scale(_) => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Values {
    pub states: Vec<ImuState>,
    /// `ᴳp_f`
    pub features: Vec<Vector3<f64>>,
    /// Unconstrained `s̃_j`; realized scales are `softplus(s̃_j)`.
    pub scales: Vec<f64>,
}

impl Values {
    pub fn dim(&self) -> usize {
        ImuState::DIM * self.states.len() + 3 * self.features.len() + self.scales.len()
    }

    /// Column of a variable in the stacked tangent vector: states, then
    /// features, then scales.
    pub fn offset(&self, key: VarKey) -> usize {
        let n = self.states.len();
        let m = self.features.len();
        match key {
            VarKey::State(i) => ImuState::DIM * i,
            VarKey::Feature(f) => ImuState::DIM * n + 3 * f,
            VarKey::Scale(j) => ImuState::DIM * n + 3 * m + j,
        }
    }

    pub fn realized_scales(&self) -> Vec<f64> {
        self.scales.iter().map(|s| softplus(*s)).collect()
    }

    /// Apply a full tangent step.
    pub fn retract(&self, delta: &DVector<f64>) -> Values {
        let mut out = self.clone();
        for (i, s) in out.states.iter_mut().enumerate() {
            let o = self.offset(VarKey::State(i));
            *s = s.retract(&delta.as_slice()[o..o + ImuState::DIM]);
        }
        for (f, p) in out.features.iter_mut().enumerate() {
            let o = self.offset(VarKey::Feature(f));
            *p += Vector3::new(delta[o], delta[o + 1], delta[o + 2]);
        }
        for (j, s) in out.scales.iter_mut().enumerate() {
            *s += delta[self.offset(VarKey::Scale(j))];
        }
        out
    }

    /// Move a single tangent coordinate of one variable by `h`.
    pub fn perturbed(&self, key: VarKey, coord: usize, h: f64) -> Values {
        let mut out = self.clone();
        match key {
            VarKey::State(i) => {
                let mut d = [0.0; ImuState::DIM];
                d[coord] = h;
                out.states[i] = self.states[i].retract(&d);
            }
            VarKey::Feature(f) => out.features[f][coord] += h,
            VarKey::Scale(j) => out.scales[j] += h,
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    FeatureBased,
    ScaleConstrained,
    FeatureFree,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    /// Reprojection noise, pixels.
    pub pixel_sigma: f64,
    /// Cloud point noise at confidence 1, up-to-scale units.
    pub cloud_sigma: f64,
    pub smoothness_sigma: f64,
    pub confidence_cap: f64,
    pub imu_noise: ImuNoise,
    pub prior: PriorConfig,
    pub use_prior: bool,
    pub lm: LmConfig,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            pixel_sigma: 1.0,
            cloud_sigma: 0.05,
            smoothness_sigma: 0.05,
            confidence_cap: 100.0,
            imu_noise: ImuNoise::consumer_grade(),
            prior: PriorConfig::default(),
            use_prior: true,
            lm: LmConfig::default(),
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<(), RefineError> {
        let ok = [self.pixel_sigma, self.cloud_sigma, self.smoothness_sigma, self.confidence_cap].iter().all(|v| *v > 0.0 && v.is_finite());
        if !ok || !self.prior.is_valid() || !self.imu_noise.is_valid() {
            return Err(RefineError::InvalidProblem("noise parameters must be positive and finite".into()));
        }
        self.lm.validate()
    }
}

/// A variable set plus the residual blocks over it.
#[derive(Debug)]
pub struct Problem {
    pub variant: Variant,
    pub values: Values,
    pub factors: Vec<Box<dyn Factor>>,
    /// Residual count attached to every scale parameter, used to report a
    /// single scale for regional problems.
    pub scale_support: Vec<usize>,
}

/// A single cloud point looked up at a feature observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CloudObservation {
    pub feature: usize,
    /// `ᶜ⁰p̄`, up-to-scale.
    pub point: Vector3<f64>,
    pub confidence: f64,
}

/// Inputs shared by every variant.
#[derive(Debug, Clone, Copy)]
pub struct WindowInputs<'a> {
    /// Initial states in `{G}`.
    pub initial: &'a [ImuState],
    /// `preintegrations[i]` spans keyframe `i → i+1`.
    pub preintegrations: &'a [ImuPreintegration],
    pub extrinsics: &'a Extrinsics,
    pub camera: &'a PinholeCamera,
}

impl Problem {
    fn with_window(variant: Variant, inputs: &WindowInputs, features: Vec<Vector3<f64>>, scales: Vec<f64>, cfg: &RefineConfig) -> Result<Self, RefineError> {
        cfg.validate()?;
        let n = inputs.initial.len();
        if n == 0 {
            return Err(RefineError::InvalidProblem("no states".into()));
        }
        if inputs.preintegrations.len() + 1 != n {
            return Err(RefineError::InvalidProblem(format!("{} preintegrations for {n} states", inputs.preintegrations.len())));
        }
        let mut factors: Vec<Box<dyn Factor>> = Vec::new();
        for (i, pre) in inputs.preintegrations.iter().enumerate() {
            factors.push(Box::new(ImuFactor::new(i, i + 1, pre.clone(), gravity_world(), &cfg.imu_noise)?));
        }
        if cfg.use_prior {
            factors.push(Box::new(PriorFactor::new(inputs.initial[0], &cfg.prior)));
        }
        let scale_support = vec![0; scales.len()];
        Ok(Self { variant, values: Values { states: inputs.initial.to_vec(), features, scales }, factors, scale_support })
    }

    /// Classical reprojection bundle adjustment over features in `{G}`.
    pub fn feature_based(inputs: &WindowInputs, observations: &[FeatureObservation], features: &[Vector3<f64>], cfg: &RefineConfig) -> Result<Self, RefineError> {
        let mut p = Self::with_window(Variant::FeatureBased, inputs, features.to_vec(), Vec::new(), cfg)?;
        p.add_reprojections(inputs, observations, cfg)?;
        Ok(p)
    }

    /// Feature-based problem plus one cloud-scale residual per cloud
    /// observation, sharing a single scale.
    pub fn scale_constrained(
        inputs: &WindowInputs,
        observations: &[FeatureObservation],
        cloud: &[CloudObservation],
        features: &[Vector3<f64>],
        scale: f64,
        cfg: &RefineConfig,
    ) -> Result<Self, RefineError> {
        let mut p = Self::with_window(Variant::ScaleConstrained, inputs, features.to_vec(), vec![inverse_softplus(scale)?], cfg)?;
        p.add_reprojections(inputs, observations, cfg)?;
        for c in cloud {
            if c.feature >= features.len() {
                return Err(RefineError::InvalidProblem(format!("cloud observation of unknown feature {}", c.feature)));
            }
            let sigma = cfg.cloud_sigma / c.confidence.clamp(1.0, cfg.confidence_cap).sqrt();
            p.factors.push(Box::new(CloudScaleFactor::new(c.feature, 0, c.point, *inputs.extrinsics, sigma)));
            p.scale_support[0] += 1;
        }
        Ok(p)
    }

    /// Reprojection of sampled cloud points with one scale per region and
    /// smoothness between adjacent regions. No feature variables.
    pub fn feature_free(inputs: &WindowInputs, samples: &SampledSet, grid: &RegionGrid, scale: f64, cfg: &RefineConfig) -> Result<Self, RefineError> {
        let regions = grid.num_regions();
        let s0 = inverse_softplus(scale)?;
        let mut p = Self::with_window(Variant::FeatureFree, inputs, Vec::new(), vec![s0; regions], cfg)?;
        if samples.num_frames() != inputs.initial.len() {
            return Err(RefineError::InvalidProblem(format!("{} sampled frames for {} states", samples.num_frames(), inputs.initial.len())));
        }
        let sigma = inputs.camera.pixel_sigma_normalized(cfg.pixel_sigma);
        for (i, s) in samples.iter().filter(|(i, _)| *i > 0) {
            if s.region >= regions {
                return Err(RefineError::InvalidProblem(format!("sample region {} outside {regions} regions", s.region)));
            }
            p.factors.push(Box::new(FeatureFreeFactor::new(i, s.region, s.point, s.bearing, *inputs.extrinsics, sigma)?));
            p.scale_support[s.region] += 1;
        }
        let cols = grid.dims.cols;
        let touching = |a: usize, b: usize| (a / cols).abs_diff(b / cols) + (a % cols).abs_diff(b % cols) == 1;
        for &(j, l) in &grid.adjacency {
            if j >= regions || l >= regions || !touching(j, l) {
                return Err(RefineError::NonAdjacentRegions(j, l));
            }
            p.factors.push(Box::new(SmoothnessFactor::new(j, l, cfg.smoothness_sigma)));
        }
        Ok(p)
    }

    fn add_reprojections(&mut self, inputs: &WindowInputs, observations: &[FeatureObservation], cfg: &RefineConfig) -> Result<(), RefineError> {
        let sigma = inputs.camera.pixel_sigma_normalized(cfg.pixel_sigma);
        let (n, m) = (self.values.states.len(), self.values.features.len());
        for o in observations {
            if o.frame >= n || o.feature >= m {
                return Err(RefineError::InvalidProblem(format!("observation of feature {} in frame {}", o.feature, o.frame)));
            }
            self.factors.push(Box::new(ReprojectionFactor::new(o.frame, o.feature, o.bearing, *inputs.extrinsics, sigma)));
        }
        Ok(())
    }

    pub fn add_factor(&mut self, factor: Box<dyn Factor>) {
        self.factors.push(factor);
    }

    pub fn num_variables(&self) -> usize {
        self.values.dim()
    }

    pub fn num_residuals(&self) -> usize {
        self.factors.iter().map(|f| f.dim()).sum()
    }

    /// Sum of squared whitened residuals.
    pub fn cost(&self, values: &Values) -> Result<f64, RefineError> {
        let parts: Result<Vec<f64>, RefineError> = self
            .factors
            .par_iter()
            .map(|f| Ok(f.whitened(values)?.residual.norm_squared()))
            .collect();
        Ok(parts?.iter().sum())
    }

    /// Whitened residual vector and dense whitened Jacobian.
    pub fn linearize(&self, values: &Values) -> Result<(DVector<f64>, DMatrix<f64>), RefineError> {
        let lins: Result<Vec<Linearization>, RefineError> = self.factors.par_iter().map(|f| f.whitened(values)).collect();
        let lins = lins?;
        let rows = self.num_residuals();
        let mut r = DVector::zeros(rows);
        let mut jac = DMatrix::zeros(rows, values.dim());
        let mut row = 0;
        for (f, lin) in self.factors.iter().zip(&lins) {
            let d = f.dim();
            r.rows_mut(row, d).copy_from(&lin.residual);
            for (key, jk) in f.keys().iter().zip(&lin.jacobians) {
                let col = values.offset(*key);
                let mut view = jac.view_mut((row, col), (d, key.tangent_dim()));
                view += jk;
            }
            row += d;
        }
        Ok((r, jac))
    }

    /// `JᵀJ` at `values`, without damping.
    pub fn information_matrix(&self, values: &Values) -> Result<DMatrix<f64>, RefineError> {
        let (_, j) = self.linearize(values)?;
        Ok(j.transpose() * j)
    }

    /// The single scale reported for a solution: the shared scale, or the
    /// residual-count-weighted mean of regional scales.
    pub fn reported_scale(&self, values: &Values) -> Option<f64> {
        let scales = values.realized_scales();
        if scales.is_empty() {
            return None;
        }
        let total: usize = self.scale_support.iter().sum();
        if total == 0 {
            return Some(scales.iter().sum::<f64>() / scales.len() as f64);
        }
        Some(scales.iter().zip(&self.scale_support).map(|(s, c)| s * *c as f64).sum::<f64>() / total as f64)
    }

    /// Residual blocks named `name`.
    pub fn count_factors(&self, name: &str) -> usize {
        self.factors.iter().filter(|f| f.name() == name).count()
    }
}
