//! Self-checks behind the `check-jacobians`, `check-rank` and `bench`
//! commands: refinement problems built at simulated ground truth, rank
//! statistics of kinematic toy systems, and stage timings.

use std::time::Instant;

use nalgebra::{DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{assign_regions, filter_and_sample, CloudError, RegionDims, RegionGrid, SampledSet};
use crate::eval::median;
use crate::imu::{preintegrate, slice_samples, Biases, ImuError, ImuNoise, ImuPreintegration};
use crate::io::WindowData;
use crate::linear_init::{assemble_feature_free, rank_diagnostics, FeatureObservation, LinearInitError, WeightConfig};
use crate::pipeline::{run_pipeline, PipelineError, RunConfig};
use crate::refine::{check_jacobians, CloudObservation, ImuState, JacobianReport, Problem, RefineConfig, RefineError, Values, Variant, WindowInputs};
use crate::sim::toy::{perturb_points, ToyWindow};
use crate::sim::{simulate, Dataset, Scenario, SimError};

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Imu(#[from] ImuError),
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Linear(#[from] LinearInitError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

/// A simulated window with refinement inputs at the true states.
#[derive(Debug, Clone)]
pub struct TruthWindow {
    pub ds: Dataset,
    /// Keyframe states with the true biases.
    pub truth: Vec<ImuState>,
    /// Keyframe-to-keyframe preintegrations at zero bias.
    pub preints: Vec<ImuPreintegration>,
}

impl TruthWindow {
    pub fn new(ds: Dataset, noise: &ImuNoise) -> Result<Self, DiagnosticsError> {
        let kf = &ds.truth.keyframes;
        let preints = kf
            .windows(2)
            .map(|w| preintegrate(&slice_samples(&ds.imu, w[0].timestamp, w[1].timestamp)?, &Biases::zero(), noise))
            .collect::<Result<_, _>>()?;
        let truth = kf.iter().map(|k| ImuState::from_nav(&k.nav(), ds.truth.biases)).collect();
        Ok(Self { ds, truth, preints })
    }

    pub fn simulate(scenario: &Scenario, seed: u64) -> Result<Self, DiagnosticsError> {
        Self::new(simulate(scenario, seed)?, &ImuNoise::consumer_grade())
    }

    pub fn inputs<'a>(&'a self, states: &'a [ImuState]) -> WindowInputs<'a> {
        WindowInputs { initial: states, preintegrations: &self.preints, extrinsics: &self.ds.scenario.extrinsics, camera: &self.ds.scenario.camera }
    }

    pub fn samples(&self, k: usize, dims: RegionDims) -> Result<(SampledSet, RegionGrid), DiagnosticsError> {
        let mut s = filter_and_sample(&self.ds.cloud, &self.ds.scenario.camera, k, 1.5)?;
        let grid = assign_regions(&mut s, &self.ds.scenario.camera, dims)?;
        Ok((s, grid))
    }

    pub fn observations(&self) -> Vec<FeatureObservation> {
        let cam = &self.ds.scenario.camera;
        self.ds
            .tracks
            .iter()
            .enumerate()
            .flat_map(|(f, t)| t.pixels.iter().enumerate().map(move |(i, px)| FeatureObservation { frame: i, feature: f, bearing: cam.normalize(px) }))
            .collect()
    }

    /// Cloud points at every tracked pixel that has four valid neighbors.
    pub fn cloud_observations(&self) -> Vec<CloudObservation> {
        let mut out = Vec::new();
        for (f, t) in self.ds.tracks.iter().enumerate() {
            for (i, px) in t.pixels.iter().enumerate() {
                if let Ok((point, confidence)) = self.ds.cloud.interpolate_at(i, px) {
                    out.push(CloudObservation { feature: f, point, confidence });
                }
            }
        }
        out
    }

    /// True feature positions in `{G}`.
    pub fn features(&self) -> Vec<Vector3<f64>> {
        self.ds.tracks.iter().map(|t| t.point).collect()
    }

    pub fn feature_free(&self, states: &[ImuState], dims: RegionDims, cfg: &RefineConfig) -> Result<Problem, DiagnosticsError> {
        let (s, grid) = self.samples(100, dims)?;
        Ok(Problem::feature_free(&self.inputs(states), &s, &grid, self.ds.truth.scale, cfg)?)
    }

    pub fn scale_constrained(&self, states: &[ImuState], cfg: &RefineConfig) -> Result<Problem, DiagnosticsError> {
        Ok(Problem::scale_constrained(&self.inputs(states), &self.observations(), &self.cloud_observations(), &self.features(), self.ds.truth.scale, cfg)?)
    }

    pub fn feature_based(&self, states: &[ImuState], cfg: &RefineConfig) -> Result<Problem, DiagnosticsError> {
        Ok(Problem::feature_based(&self.inputs(states), &self.observations(), &self.features(), cfg)?)
    }

    /// One problem per variant, all at the true states.
    pub fn all_variants(&self, cfg: &RefineConfig) -> Result<Vec<Problem>, DiagnosticsError> {
        Ok(vec![self.feature_free(&self.truth, RegionDims::new(3, 3), cfg)?, self.scale_constrained(&self.truth, cfg)?, self.feature_based(&self.truth, cfg)?])
    }
}

/// `base` moved by up to 0.05 along every tangent coordinate, with raw scale
/// parameters drawn from `[−2, 3)`.
pub fn random_values(base: &Values, rng: &mut ChaCha8Rng) -> Values {
    let delta = DVector::from_fn(base.dim(), |_, _| rng.random_range(-0.05..0.05));
    let mut v = base.retract(&delta);
    for s in v.scales.iter_mut() {
        *s = rng.random_range(-2.0..3.0);
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JacobianStudy {
    pub variant: Variant,
    pub states_checked: usize,
    /// Largest block error per factor name over every state.
    pub worst_by_factor: Vec<(String, f64)>,
    pub max_error: f64,
    pub tolerance: f64,
}

impl JacobianStudy {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }
}

fn merge_worst(into: &mut Vec<(String, f64)>, report: &JacobianReport) {
    for (name, e) in report.by_factor() {
        match into.iter_mut().find(|(n, _)| *n == name) {
            Some((_, w)) => *w = w.max(e),
            None => into.push((name, e)),
        }
    }
}

/// Finite-difference check of every factor of every variant at `states`
/// random points around the truth of one simulated window.
pub fn jacobian_study(window: &TruthWindow, cfg: &RefineConfig, states: usize, seed: u64, perturbation: f64, tolerance: f64) -> Result<Vec<JacobianStudy>, DiagnosticsError> {
    window
        .all_variants(cfg)?
        .into_iter()
        .map(|problem| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut worst = Vec::new();
            let mut max_error: f64 = 0.0;
            for _ in 0..states {
                let values = random_values(&problem.values, &mut rng);
                let report = check_jacobians(&problem, &values, perturbation, tolerance)?;
                max_error = max_error.max(report.max_error);
                merge_worst(&mut worst, &report);
            }
            Ok(JacobianStudy { variant: problem.variant, states_checked: states, worst_by_factor: worst, max_error, tolerance })
        })
        .collect()
}

/// Rank histogram of feature-free systems over random toy windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankStudy {
    pub frames: usize,
    pub points_per_frame: usize,
    /// Relative cloud point perturbation; zero means exact clouds.
    pub point_noise: f64,
    pub ranks: Vec<usize>,
}

impl RankStudy {
    /// `(rank, count)` in ascending rank order.
    pub fn histogram(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = Vec::new();
        let mut sorted = self.ranks.clone();
        sorted.sort_unstable();
        for r in sorted {
            match out.last_mut() {
                Some((last, n)) if *last == r => *n += 1,
                _ => out.push((r, 1)),
            }
        }
        out
    }

    pub fn all_equal(&self, rank: usize) -> bool {
        !self.ranks.is_empty() && self.ranks.iter().all(|r| *r == rank)
    }
}

pub fn rank_study(frames: usize, points_per_frame: usize, trials: usize, point_noise: f64, seed: u64, rel_tol: f64) -> Result<RankStudy, DiagnosticsError> {
    let ranks = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let toy = ToyWindow::random(frames, seed.wrapping_add(t));
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t) ^ 0x5eed);
            let mut sampled = toy.random_sampled(points_per_frame, &mut rng);
            if point_noise > 0.0 {
                sampled = perturb_points(&sampled, point_noise, &mut rng);
            }
            let sys = assemble_feature_free(&sampled, &toy.preints, &toy.extrinsics, &WeightConfig::default())?;
            Ok(rank_diagnostics(&sys, rel_tol).rank)
        })
        .collect::<Result<_, DiagnosticsError>>()?;
    Ok(RankStudy { frames, points_per_frame, point_noise, ranks })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub runs: usize,
    pub successes: usize,
    pub median_lin_ms: Option<f64>,
    pub median_nl_ms: Option<f64>,
    /// Median wall time of a whole window, simulation excluded.
    pub median_total_ms: Option<f64>,
}

/// Time the pipeline sequentially over simulated windows.
pub fn bench(scenario: &Scenario, cfg: &RunConfig, seeds: &[u64]) -> Result<BenchSummary, DiagnosticsError> {
    let cfg = RunConfig { record_timings: true, ..*cfg };
    let mut scenario = *scenario;
    cfg.apply_to(&mut scenario);
    let (mut lin, mut nl, mut total) = (Vec::new(), Vec::new(), Vec::new());
    let mut successes = 0;
    for &seed in seeds {
        let data = WindowData::from_dataset(&simulate(&scenario, seed)?);
        let start = Instant::now();
        let out = run_pipeline(&RunConfig { seed, ..cfg }, &data)?;
        total.push(start.elapsed().as_secs_f64() * 1e3);
        lin.extend(out.report.t_lin_ms);
        nl.extend(out.report.t_nl_ms);
        successes += usize::from(out.report.success);
    }
    Ok(BenchSummary { runs: seeds.len(), successes, median_lin_ms: median(&lin), median_nl_ms: median(&nl), median_total_ms: median(&total) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear_init::DEFAULT_RANK_TOL;

    #[test]
    fn histogram_counts() {
        let s = RankStudy { frames: 2, points_per_frame: 3, point_noise: 0.0, ranks: vec![4, 3, 4, 4] };
        assert_eq!(s.histogram(), vec![(3, 1), (4, 3)]);
        assert!(!s.all_equal(4));
    }

    #[test]
    fn exact_and_generic_ranks() {
        assert!(rank_study(2, 6, 10, 0.0, 1, DEFAULT_RANK_TOL).unwrap().all_equal(3));
        assert!(rank_study(2, 6, 10, 1e-2, 1, DEFAULT_RANK_TOL).unwrap().all_equal(4));
        assert!(rank_study(3, 2, 10, 1e-2, 1, DEFAULT_RANK_TOL).unwrap().all_equal(7));
    }

    #[test]
    fn jacobians_of_one_state_pass() {
        let w = TruthWindow::simulate(&Scenario::noisy(), 2).unwrap();
        let studies = jacobian_study(&w, &RefineConfig::default(), 1, 2, 1e-6, 1e-5).unwrap();
        assert_eq!(studies.len(), 3);
        for s in &studies {
            assert!(s.passed(), "{:?}", s);
            assert!(!s.worst_by_factor.is_empty());
        }
    }

    #[test]
    fn bench_counts_runs() {
        let b = bench(&Scenario::default(), &RunConfig::default(), &[0, 1]).unwrap();
        assert_eq!(b.runs, 2);
        assert_eq!(b.successes, 2);
        assert!(b.median_total_ms.unwrap() > 0.0);
        assert!(b.median_nl_ms.is_some());
    }
}
