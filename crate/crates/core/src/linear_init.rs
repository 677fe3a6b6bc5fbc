//! Closed-form initialization.
//!
//! Both linear systems share the layout `[y, g]` where `g = ᴵ⁰g` occupies the
//! last three unknowns. The feature-free system has `y = [s, ᴵ⁰v_{I₀}]`; the
//! feature-based one has `y = [ᴵ⁰p_{f₁} … ᴵ⁰p_{f_M}, ᴵ⁰v_{I₀}]`. Every
//! measurement contributes one 2-row block.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Vector2, Vector3};
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::SampledSet;
use crate::geometry::{Extrinsics, GRAVITY_MAGNITUDE};
use crate::imu::ImuPreintegration;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinearInitError {
    #[error("at least 3 keyframes are required, got {0}")]
    FewerThanThreeFrames(usize),
    #[error("{preints} preintegrations supplied for {frames} frames")]
    FrameCountMismatch { frames: usize, preints: usize },
    #[error("weighted system has numerical rank {rank} < {dim}")]
    RankDeficient { rank: usize, dim: usize },
    #[error("gravity-norm root find failed in bracket [{lo:e}, {hi:e}]")]
    RootFindFailed { lo: f64, hi: f64 },
    #[error("no RANSAC hypothesis produced a solution in {0} iterations")]
    NoValidHypothesis(usize),
    #[error("frame {frame} has {available} measurements, the minimal subset needs {required}")]
    NotEnoughRows { frame: usize, available: usize, required: usize },
    #[error("feature {feature} has {observations} observations, at least 2 are required")]
    TooFewObservations { feature: usize, observations: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// `[s, ᴵ⁰v_{I₀}, ᴵ⁰g]`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearInitState {
    pub s: f64,
    pub v0: Vector3<f64>,
    pub g: Vector3<f64>,
}

impl LinearInitState {
    pub fn from_vector(x: &DVector<f64>) -> Self {
        Self { s: x[0], v0: Vector3::new(x[1], x[2], x[3]), g: Vector3::new(x[4], x[5], x[6]) }
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&[self.s, self.v0.x, self.v0.y, self.v0.z, self.g.x, self.g.y, self.g.z])
    }

    /// A non-positive scale means the solution is physically invalid.
    pub fn has_positive_scale(&self) -> bool {
        self.s > 0.0
    }
}

/// Where a 2-row block came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSource {
    pub frame: usize,
    /// Sample index within the frame, or feature index for feature tracks.
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    /// One weight per block, multiplying its squared residual.
    pub weights: Vec<f64>,
    pub sources: Vec<BlockSource>,
}

impl LinearSystem {
    pub fn num_blocks(&self) -> usize {
        self.sources.len()
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn block_residual(&self, block: usize, x: &DVector<f64>) -> Vector2<f64> {
        let rows = self.a.rows(2 * block, 2);
        let r = rows * x - self.b.rows(2 * block, 2);
        Vector2::new(r[0], r[1])
    }

    /// Keep only the listed blocks, in the given order.
    pub fn subsystem(&self, blocks: &[usize]) -> LinearSystem {
        let n = self.dim();
        let mut a = DMatrix::zeros(2 * blocks.len(), n);
        let mut b = DVector::zeros(2 * blocks.len());
        for (dst, &src) in blocks.iter().enumerate() {
            a.rows_mut(2 * dst, 2).copy_from(&self.a.rows(2 * src, 2));
            b.rows_mut(2 * dst, 2).copy_from(&self.b.rows(2 * src, 2));
        }
        LinearSystem {
            a,
            b,
            weights: blocks.iter().map(|&i| self.weights[i]).collect(),
            sources: blocks.iter().map(|&i| self.sources[i]).collect(),
        }
    }

    /// `√W·A` and `√W·b`.
    pub fn whitened(&self) -> (DMatrix<f64>, DVector<f64>) {
        let mut a = self.a.clone();
        let mut b = self.b.clone();
        for (blk, w) in self.weights.iter().enumerate() {
            let sw = w.sqrt();
            a.rows_mut(2 * blk, 2).scale_mut(sw);
            b.rows_mut(2 * blk, 2).scale_mut(sw);
        }
        (a, b)
    }

    /// Weighted squared residual `Σ w‖A_blk x − b_blk‖²`.
    pub fn cost(&self, x: &DVector<f64>) -> f64 {
        (0..self.num_blocks()).map(|k| self.weights[k] * self.block_residual(k, x).norm_squared()).sum()
    }

    /// Unweighted `‖A x − b‖`.
    pub fn residual_norm(&self, x: &DVector<f64>) -> f64 {
        (&self.a * x - &self.b).norm()
    }
}

/// Confidence-to-weight map `w = √min(c, cap)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightConfig {
    pub confidence_cap: f64,
    /// When false every block gets weight 1.
    pub use_confidence: bool,
}

impl WeightConfig {
    pub fn weight(&self, confidence: f64) -> f64 {
        if self.use_confidence {
            confidence.min(self.confidence_cap).max(0.0).sqrt()
        } else {
            1.0
        }
    }
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self { confidence_cap: 100.0, use_confidence: true }
    }
}

fn bearing_selector(uv: &Vector2<f64>) -> Matrix2x3<f64> {
    Matrix2x3::new(1.0, 0.0, -uv.x, 0.0, 1.0, -uv.y)
}

/// `H = [1 0 −u; 0 1 −v] ᶜ_I R ᴵⁱ_I₀R`
fn projection_constraint(uv: &Vector2<f64>, preint: &ImuPreintegration, extrinsics: &Extrinsics) -> Matrix2x3<f64> {
    let r_ci = extrinsics.rot_cam_imu().to_rotation_matrix().into_inner();
    let r_i0_ii = preint.delta_r.to_rotation_matrix().into_inner();
    bearing_selector(uv) * r_ci * r_i0_ii.transpose()
}

fn motion_blocks(h: &Matrix2x3<f64>, dt: f64) -> (Matrix2x3<f64>, Matrix2x3<f64>) {
    (h * (-dt), h * (0.5 * dt * dt))
}

fn check_frames(frames: usize, preints: usize) -> Result<(), LinearInitError> {
    if frames != preints {
        return Err(LinearInitError::FrameCountMismatch { frames, preints });
    }
    Ok(())
}

/// Feature-free system over `[s, v₀, g]` from sampled cloud points.
///
/// `preints[i]` integrates from keyframe 0 to keyframe `i`; `preints[0]` is
/// the identity. Requires at least three keyframes.
pub fn build_feature_free_system(
    sampled: &SampledSet,
    preints: &[ImuPreintegration],
    extrinsics: &Extrinsics,
    weights: &WeightConfig,
) -> Result<LinearSystem, LinearInitError> {
    if sampled.num_frames() < 3 {
        return Err(LinearInitError::FewerThanThreeFrames(sampled.num_frames()));
    }
    assemble_feature_free(sampled, preints, extrinsics, weights)
}

/// Same assembly as [`build_feature_free_system`] without the frame-count
/// precondition, for observability studies on two-frame systems.
pub fn assemble_feature_free(
    sampled: &SampledSet,
    preints: &[ImuPreintegration],
    extrinsics: &Extrinsics,
    weights: &WeightConfig,
) -> Result<LinearSystem, LinearInitError> {
    check_frames(sampled.num_frames(), preints.len())?;
    let blocks: usize = sampled.frames.iter().map(Vec::len).sum();
    let mut a = DMatrix::zeros(2 * blocks, 7);
    let mut b = DVector::zeros(2 * blocks);
    let mut w = Vec::with_capacity(blocks);
    let mut sources = Vec::with_capacity(blocks);

    let r_ic = extrinsics.rot_imu_cam.to_rotation_matrix().into_inner();
    let cp_i = extrinsics.trans_cam_imu();
    let lever = r_ic * cp_i;
    for (frame, samples) in sampled.frames.iter().enumerate() {
        let pre = &preints[frame];
        let r_i0_ii = pre.delta_r.to_rotation_matrix().into_inner();
        let rhs_point = pre.delta_p - r_i0_ii * lever + lever;
        for (index, s) in samples.iter().enumerate() {
            let row = 2 * sources.len();
            let h = projection_constraint(&s.bearing, pre, extrinsics);
            let (hv, hg) = motion_blocks(&h, pre.dt);
            a.fixed_view_mut::<2, 1>(row, 0).copy_from(&(h * (r_ic * s.point)));
            a.fixed_view_mut::<2, 3>(row, 1).copy_from(&hv);
            a.fixed_view_mut::<2, 3>(row, 4).copy_from(&hg);
            b.fixed_view_mut::<2, 1>(row, 0).copy_from(&(h * rhs_point));
            w.push(weights.weight(s.confidence));
            sources.push(BlockSource { frame, index });
        }
    }
    Ok(LinearSystem { a, b, weights: w, sources })
}

/// Observation of one feature in one keyframe, in normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureObservation {
    pub frame: usize,
    pub feature: usize,
    pub bearing: Vector2<f64>,
}

/// Feature-based system over `[p_{f₁} … p_{f_M}, v₀, g]` with all features
/// expressed in `I₀`.
pub fn build_dongsi_system(
    observations: &[FeatureObservation],
    num_features: usize,
    preints: &[ImuPreintegration],
    extrinsics: &Extrinsics,
) -> Result<LinearSystem, LinearInitError> {
    if preints.len() < 3 {
        return Err(LinearInitError::FewerThanThreeFrames(preints.len()));
    }
    let mut counts = vec![0usize; num_features];
    for o in observations {
        if o.feature >= num_features || o.frame >= preints.len() {
            return Err(LinearInitError::InvalidConfig(format!("observation references feature {} frame {}", o.feature, o.frame)));
        }
        counts[o.feature] += 1;
    }
    if let Some((feature, &n)) = counts.iter().enumerate().find(|(_, &n)| n < 2) {
        return Err(LinearInitError::TooFewObservations { feature, observations: n });
    }
    let dim = 3 * num_features + 6;
    let mut a = DMatrix::zeros(2 * observations.len(), dim);
    let mut b = DVector::zeros(2 * observations.len());
    let r_ic = extrinsics.rot_imu_cam.to_rotation_matrix().into_inner();
    let lever = r_ic * extrinsics.trans_cam_imu();
    for (blk, o) in observations.iter().enumerate() {
        let pre = &preints[o.frame];
        let row = 2 * blk;
        let h = projection_constraint(&o.bearing, pre, extrinsics);
        let (hv, hg) = motion_blocks(&h, pre.dt);
        a.fixed_view_mut::<2, 3>(row, 3 * o.feature).copy_from(&h);
        a.fixed_view_mut::<2, 3>(row, dim - 6).copy_from(&hv);
        a.fixed_view_mut::<2, 3>(row, dim - 3).copy_from(&hg);
        let r_i0_ii = pre.delta_r.to_rotation_matrix().into_inner();
        b.fixed_view_mut::<2, 1>(row, 0).copy_from(&(h * (pre.delta_p - r_i0_ii * lever)));
    }
    Ok(LinearSystem {
        a,
        b,
        weights: vec![1.0; observations.len()],
        sources: observations.iter().map(|o| BlockSource { frame: o.frame, index: o.feature }).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub rank: usize,
    pub condition_number: f64,
    /// Descending.
    pub singular_values: Vec<f64>,
}

pub const DEFAULT_RANK_TOL: f64 = 1e-8;

/// SVD rank of the weighted system with tolerance `rel_tol·σ_max`.
pub fn rank_diagnostics(system: &LinearSystem, rel_tol: f64) -> RankReport {
    let (a, _) = system.whitened();
    let mut sv: Vec<f64> = a.singular_values().iter().copied().collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    let max = sv.first().copied().unwrap_or(0.0);
    let rank = sv.iter().filter(|&&s| s > rel_tol * max).count();
    let min = sv.last().copied().unwrap_or(0.0);
    let condition_number = if min > 0.0 { max / min } else { f64::INFINITY };
    RankReport { rank, condition_number, singular_values: sv }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstrainedSolution {
    pub x: DVector<f64>,
    /// Multiplier of `‖g‖² = g_mag²` (positive pulls ‖g‖ down).
    pub lambda: f64,
    /// Weighted squared residual at `x`.
    pub cost: f64,
}

impl ConstrainedSolution {
    pub fn gravity(&self) -> Vector3<f64> {
        let n = self.x.len();
        Vector3::new(self.x[n - 3], self.x[n - 2], self.x[n - 1])
    }

    pub fn velocity(&self) -> Vector3<f64> {
        let n = self.x.len();
        Vector3::new(self.x[n - 6], self.x[n - 5], self.x[n - 4])
    }

    pub fn feature_free_state(&self) -> LinearInitState {
        LinearInitState::from_vector(&self.x)
    }
}

/// Weighted least squares subject to `‖g‖ = g_mag`.
///
/// The non-gravity unknowns are eliminated, leaving
/// `min gᵀSg − 2dᵀg` on the sphere. The multiplier solves
/// `‖(S + λI)⁻¹d‖ = g_mag` with λ > −λ_min(S); it is found by safeguarded
/// Newton iterations on the secular equation `1/‖g(λ)‖ − 1/g_mag`.
pub fn solve_constrained(system: &LinearSystem, g_mag: f64) -> Result<ConstrainedSolution, LinearInitError> {
    let n = system.dim();
    if n < 3 {
        return Err(LinearInitError::InvalidConfig(format!("state dimension {n} has no gravity block")));
    }
    let report = rank_diagnostics(system, DEFAULT_RANK_TOL);
    if report.rank < n {
        return Err(LinearInitError::RankDeficient { rank: report.rank, dim: n });
    }
    let (aw, bw) = system.whitened();
    let m = aw.tr_mul(&aw);
    let c = aw.tr_mul(&bw);
    let ny = n - 3;
    let m11 = m.view((0, 0), (ny, ny)).into_owned();
    let m12 = m.view((0, ny), (ny, 3)).into_owned();
    let m22: Matrix3<f64> = m.fixed_view::<3, 3>(ny, ny).into_owned();
    let c1 = c.rows(0, ny).into_owned();
    let c2 = Vector3::new(c[ny], c[ny + 1], c[ny + 2]);

    let (s_mat, d, m11_chol) = if ny > 0 {
        let chol = m11.clone().cholesky().ok_or(LinearInitError::RankDeficient { rank: report.rank, dim: n })?;
        let m11_inv_m12 = chol.solve(&m12);
        let m11_inv_c1 = chol.solve(&c1);
        let s: Matrix3<f64> = m22 - (m12.transpose() * m11_inv_m12).fixed_view::<3, 3>(0, 0).into_owned();
        let dd = c2 - Vector3::from_iterator((m12.transpose() * m11_inv_c1).iter().copied());
        (s, dd, Some(chol))
    } else {
        (m22, c2, None)
    };
    let s_mat = 0.5 * (s_mat + s_mat.transpose());
    let (g, lambda) = solve_on_sphere(&s_mat, &d, g_mag)?;

    let mut x = DVector::zeros(n);
    if let Some(chol) = m11_chol {
        let y = chol.solve(&(c1 - &m12 * DVector::from_column_slice(g.as_slice())));
        x.rows_mut(0, ny).copy_from(&y);
    }
    x.fixed_rows_mut::<3>(ny).copy_from(&g);
    let cost = system.cost(&x);
    Ok(ConstrainedSolution { x, lambda, cost })
}

/// Minimize `gᵀSg − 2dᵀg` subject to `‖g‖ = r`.
fn solve_on_sphere(s: &Matrix3<f64>, d: &Vector3<f64>, r: f64) -> Result<(Vector3<f64>, f64), LinearInitError> {
    let eig = s.symmetric_eigen();
    // ascending eigenvalues
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let lam: [f64; 3] = order.map(|i| eig.eigenvalues[i]);
    let q: [Vector3<f64>; 3] = order.map(|i| eig.eigenvectors.column(i).into_owned());
    let dt: [f64; 3] = q.map(|qi| qi.dot(d));

    let scale = lam[2].abs().max(d.norm() / r).max(f64::MIN_POSITIVE);
    let norm_at = |mu: f64| -> f64 { (0..3).map(|i| (dt[i] / (lam[i] + mu)).powi(2)).sum::<f64>().sqrt() };
    let g_at = |mu: f64| -> Vector3<f64> { (0..3).map(|i| q[i] * (dt[i] / (lam[i] + mu))).sum() };

    // Hard case: d has (almost) no component along the smallest eigenvector
    // and the norm at the pole stays below r.
    let pole = -lam[0];
    let hard_tol = 1e-12 * d.norm().max(scale * r);
    if dt[0].abs() <= hard_tol {
        let rest: f64 = (1..3).map(|i| if lam[i] + pole > 0.0 { (dt[i] / (lam[i] + pole)).powi(2) } else { 0.0 }).sum();
        if rest.sqrt() <= r {
            let mut g: Vector3<f64> = (1..3).filter(|&i| lam[i] + pole > 0.0).map(|i| q[i] * (dt[i] / (lam[i] + pole))).sum();
            g += q[0] * (r * r - rest).max(0.0).sqrt();
            return Ok((g, pole));
        }
    }

    // ‖g(μ)‖ decreases on (pole, ∞); hi satisfies ‖g(hi)‖ ≤ r.
    let mut lo = pole;
    let mut hi = pole + d.norm() / r;
    if !(hi > lo) {
        hi = lo + 1e-12 * scale.max(1.0);
    }
    while norm_at(hi) > r {
        hi = lo + 2.0 * (hi - lo);
        if !hi.is_finite() {
            return Err(LinearInitError::RootFindFailed { lo, hi });
        }
    }
    let mut mu = hi;
    for _ in 0..200 {
        let nrm = norm_at(mu);
        let f = 1.0 / nrm - 1.0 / r;
        if ((nrm - r) / r).abs() < 1e-13 {
            return Ok((g_at(mu), mu));
        }
        if f > 0.0 {
            hi = hi.min(mu);
        } else {
            lo = lo.max(mu);
        }
        // d/dμ (1/‖g‖) = Σ dᵢ²/(λᵢ+μ)³ / ‖g‖³
        let dn: f64 = (0..3).map(|i| dt[i] * dt[i] / (lam[i] + mu).powi(3)).sum::<f64>() / nrm.powi(3);
        let mut next = if dn.is_finite() && dn != 0.0 { mu - f / dn } else { f64::NAN };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if next == mu || (hi - lo) <= 4.0 * f64::EPSILON * mu.abs().max(scale) {
            let nrm = norm_at(next);
            if ((nrm - r) / r).abs() < 1e-9 {
                return Ok((g_at(next), next));
            }
            break;
        }
        mu = next;
    }
    Err(LinearInitError::RootFindFailed { lo, hi })
}

/// Feature-free solve with the standard gravity magnitude.
pub fn solve_feature_free(system: &LinearSystem) -> Result<LinearInitState, LinearInitError> {
    solve_constrained(system, GRAVITY_MAGNITUDE).map(|s| s.feature_free_state())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Per-block residual-norm threshold.
    pub threshold: f64,
    /// Measurements drawn from every frame for a hypothesis.
    pub subset_per_frame: usize,
}

impl RansacConfig {
    pub fn validate(&self) -> Result<(), LinearInitError> {
        if self.iterations == 0 {
            return Err(LinearInitError::InvalidConfig("RANSAC needs at least one iteration".into()));
        }
        if !(self.threshold > 0.0) {
            return Err(LinearInitError::InvalidConfig(format!("RANSAC threshold must be positive, got {}", self.threshold)));
        }
        if self.subset_per_frame == 0 {
            return Err(LinearInitError::InvalidConfig("RANSAC subset must contain at least one point per frame".into()));
        }
        Ok(())
    }
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self { iterations: 50, threshold: 0.1, subset_per_frame: 10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub solution: ConstrainedSolution,
    /// Block indices of the winning inlier set, ascending.
    pub inliers: Vec<usize>,
    /// `‖A_S x − b_S‖` of the winner.
    pub score: f64,
    pub valid_hypotheses: usize,
}

struct Hypothesis {
    solution: ConstrainedSolution,
    inliers: Vec<usize>,
    score: f64,
}

/// Hypothesize from random per-frame subsets, grow by the block threshold,
/// refit, and keep the refit with the smallest residual norm.
pub fn ransac_solve(system: &LinearSystem, cfg: &RansacConfig, g_mag: f64, seed: u64) -> Result<RansacResult, LinearInitError> {
    cfg.validate()?;
    let frames = system.sources.iter().map(|s| s.frame).max().map_or(0, |f| f + 1);
    let mut by_frame: Vec<Vec<usize>> = vec![Vec::new(); frames];
    for (blk, s) in system.sources.iter().enumerate() {
        by_frame[s.frame].push(blk);
    }
    for (frame, blocks) in by_frame.iter().enumerate() {
        if blocks.len() < cfg.subset_per_frame {
            return Err(LinearInitError::NotEnoughRows { frame, available: blocks.len(), required: cfg.subset_per_frame });
        }
    }
    // Draw every subset up front so results do not depend on scheduling.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subsets: Vec<Vec<usize>> = (0..cfg.iterations)
        .map(|_| {
            let mut s: Vec<usize> = by_frame
                .iter()
                .flat_map(|blocks| sample_indices(&mut rng, blocks.len(), cfg.subset_per_frame).into_iter().map(|i| blocks[i]).collect::<Vec<_>>())
                .collect();
            s.sort_unstable();
            s
        })
        .collect();

    let hypotheses: Vec<Option<Hypothesis>> = subsets
        .par_iter()
        .map(|subset| {
            let first = solve_constrained(&system.subsystem(subset), g_mag).ok()?;
            let mut in_subset = vec![false; system.num_blocks()];
            for &b in subset {
                in_subset[b] = true;
            }
            let inliers: Vec<usize> = (0..system.num_blocks())
                .filter(|&b| in_subset[b] || system.block_residual(b, &first.x).norm() < cfg.threshold)
                .collect();
            let sub = system.subsystem(&inliers);
            let solution = solve_constrained(&sub, g_mag).ok()?;
            let score = sub.residual_norm(&solution.x);
            Some(Hypothesis { solution, inliers, score })
        })
        .collect();

    let valid_hypotheses = hypotheses.iter().filter(|h| h.is_some()).count();
    let best = hypotheses
        .into_iter()
        .flatten()
        .fold(None::<Hypothesis>, |best, h| match best {
            Some(b) if b.score <= h.score => Some(b),
            _ => Some(h),
        })
        .ok_or(LinearInitError::NoValidHypothesis(cfg.iterations))?;
    Ok(RansacResult { solution: best.solution, inliers: best.inliers, score: best.score, valid_hypotheses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::toy::{perturb_points, ToyWindow};
    use approx::assert_relative_eq;
    use rand::Rng;

    type Toy = ToyWindow;

    fn toy(frames: usize, seed: u64) -> Toy {
        ToyWindow::random(frames, seed)
    }

    fn system(toy: &Toy, per_frame: usize, seed: u64) -> (LinearSystem, SampledSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sampled = toy.random_sampled(per_frame, &mut rng);
        (build_feature_free_system(&sampled, &toy.preints, &toy.extrinsics, &WeightConfig::default()).unwrap(), sampled)
    }

    fn unconstrained(system: &LinearSystem) -> DVector<f64> {
        let (a, b) = system.whitened();
        a.svd(true, true).solve(&b, 1e-14).unwrap()
    }

    #[test]
    fn dimensions_and_frame_zero_rows() {
        let t = toy(5, 1);
        let (sys, _) = system(&t, 100, 2);
        assert_eq!((sys.a.nrows(), sys.a.ncols()), (1000, 7));
        for row in 0..200 {
            assert!(sys.a.row(row).columns(1, 6).iter().all(|v| *v == 0.0));
        }
        assert!(sys.b.rows(0, 200).amax() < 1e-12);
    }

    #[test]
    fn noiseless_truth_satisfies_system() {
        let t = toy(5, 3);
        let (sys, _) = system(&t, 100, 4);
        let r = &sys.a * t.truth.to_vector() - &sys.b;
        assert!(r.amax() < 1e-8, "max residual {}", r.amax());
    }

    #[test]
    fn fewer_than_three_frames() {
        let t = toy(2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sampled = t.random_sampled(10, &mut rng);
        assert_eq!(build_feature_free_system(&sampled, &t.preints, &t.extrinsics, &WeightConfig::default()), Err(LinearInitError::FewerThanThreeFrames(2)));
    }

    fn assert_state_close(est: &LinearInitState, truth: &LinearInitState, rel: f64) {
        assert!(((est.s - truth.s) / truth.s).abs() < rel, "s {} vs {}", est.s, truth.s);
        assert!((est.v0 - truth.v0).norm() / truth.v0.norm().max(1.0) < rel, "v0 {} vs {}", est.v0, truth.v0);
        assert!((est.g - truth.g).norm() / truth.g.norm() < rel, "g {} vs {}", est.g, truth.g);
    }

    #[test]
    fn four_frames_two_points_recover_exactly() {
        for seed in 0..10 {
            let t = toy(4, 10 + seed);
            let (sys, _) = system(&t, 2, seed);
            let est = solve_feature_free(&sys).unwrap();
            assert_state_close(&est, &t.truth, 1e-6);
        }
    }

    #[test]
    fn inactive_constraint_gives_unconstrained_solution() {
        let t = toy(5, 7);
        let (sys, _) = system(&t, 20, 8);
        let sol = solve_constrained(&sys, GRAVITY_MAGNITUDE).unwrap();
        let free = unconstrained(&sys);
        assert!(sol.lambda.abs() < 1e-6, "lambda {}", sol.lambda);
        assert_relative_eq!(sol.x, free, epsilon = 1e-9, max_relative = 1e-9);
    }

    fn random_toy_system(rng: &mut ChaCha8Rng, rows: usize) -> LinearSystem {
        let a = DMatrix::from_fn(rows, 7, |_, _| rng.random_range(-1.0..1.0));
        let b = DVector::from_fn(rows, |_, _| rng.random_range(-10.0..10.0));
        LinearSystem { a, b, weights: (0..rows / 2).map(|_| rng.random_range(0.5..2.0)).collect(), sources: (0..rows / 2).map(|k| BlockSource { frame: 0, index: k }).collect() }
    }

    /// Exhaustive search over gravity directions with the remaining unknowns
    /// solved by ordinary least squares for every direction.
    fn brute_force(sys: &LinearSystem, g_mag: f64) -> DVector<f64> {
        let (a, b) = sys.whitened();
        let ay = a.columns(0, 4).into_owned();
        let ag = a.columns(4, 3).into_owned();
        let svd = ay.clone().svd(true, true);
        let eval = |theta: f64, phi: f64| -> (f64, DVector<f64>) {
            let g = Vector3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()) * g_mag;
            let rhs = &b - &ag * g;
            let y = svd.solve(&rhs, 1e-14).unwrap();
            let mut x = DVector::zeros(7);
            x.rows_mut(0, 4).copy_from(&y);
            x.rows_mut(4, 3).copy_from(&g);
            ((&ay * y - rhs).norm_squared(), x)
        };
        let step = 2f64.to_radians();
        let mut best = (f64::INFINITY, 0.0, 0.0);
        let mut theta = 0.0;
        while theta <= std::f64::consts::PI {
            let mut phi = 0.0;
            while phi < 2.0 * std::f64::consts::PI {
                let (c, _) = eval(theta, phi);
                if c < best.0 {
                    best = (c, theta, phi);
                }
                phi += step;
            }
            theta += step;
        }
        let (mut c, mut th, mut ph) = best;
        let mut h = step;
        while h > 1e-10 {
            let mut improved = false;
            for (dt, dp) in [(h, 0.0), (-h, 0.0), (0.0, h), (0.0, -h), (h, h), (-h, -h), (h, -h), (-h, h)] {
                let (cc, _) = eval(th + dt, ph + dp);
                if cc < c {
                    c = cc;
                    th += dt;
                    ph += dp;
                    improved = true;
                    break;
                }
            }
            if !improved {
                h *= 0.5;
            }
        }
        eval(th, ph).1
    }

    #[test]
    fn lagrangian_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..10 {
            let sys = random_toy_system(&mut rng, 24);
            let sol = solve_constrained(&sys, GRAVITY_MAGNITUDE).unwrap();
            let bf = brute_force(&sys, GRAVITY_MAGNITUDE);
            assert!((&sol.x - &bf).amax() < 1e-4, "lagrangian {} brute force {}", sol.x, bf);
        }
    }

    #[test]
    fn constrained_norm_and_objective_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let sys = random_toy_system(&mut rng, 30);
            let sol = solve_constrained(&sys, GRAVITY_MAGNITUDE).unwrap();
            assert!((sol.gravity().norm() - GRAVITY_MAGNITUDE).abs() < 1e-6);
            let free = unconstrained(&sys);
            assert!(sol.cost >= sys.cost(&free) - 1e-9);
        }
    }

    #[test]
    fn hard_case_is_handled() {
        // S = diag(1, 2, 3) with d orthogonal to the smallest eigenvector and
        // the pole norm below the radius.
        let s = Matrix3::from_diagonal(&Vector3::new(1.0, 2.0, 3.0));
        let d = Vector3::new(0.0, 1.0, 1.0);
        let (g, lam) = solve_on_sphere(&s, &d, 9.81).unwrap();
        assert_relative_eq!(lam, -1.0, epsilon = 1e-12);
        assert_relative_eq!(g.norm(), 9.81, epsilon = 1e-12);
        assert_relative_eq!(g.y, 1.0, epsilon = 1e-12);
        assert_relative_eq!(g.z, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn cloud_rescaling_is_a_gauge() {
        let t = toy(5, 21);
        let (sys, sampled) = system(&t, 30, 22);
        let base = solve_feature_free(&sys).unwrap();
        for lambda in [0.25, 3.0, 17.0] {
            let scaled = build_feature_free_system(&sampled.rescaled(lambda), &t.preints, &t.extrinsics, &WeightConfig::default()).unwrap();
            let est = solve_feature_free(&scaled).unwrap();
            assert_relative_eq!(est.s, base.s / lambda, max_relative = 1e-9);
            assert_relative_eq!(est.v0, base.v0, epsilon = 1e-9);
            assert_relative_eq!(est.g, base.g, epsilon = 1e-9);
        }
    }

    #[test]
    fn vanishing_weight_rows_drop_out() {
        let t = toy(4, 31);
        let (mut sys, _) = system(&t, 10, 32);
        // corrupt a few rows, then give them (almost) no weight
        let bad = [3usize, 12, 25];
        for &blk in &bad {
            sys.b[2 * blk] += 5.0;
            sys.weights[blk] = 1e-300;
        }
        let keep: Vec<usize> = (0..sys.num_blocks()).filter(|b| !bad.contains(b)).collect();
        let reduced = sys.subsystem(&keep);
        let a = solve_constrained(&sys, GRAVITY_MAGNITUDE).unwrap().x;
        let b = solve_constrained(&reduced, GRAVITY_MAGNITUDE).unwrap().x;
        assert!((a - b).amax() < 1e-9);
    }

    /// Similarity about the `C₀` center: scale the cloud by α and move every
    /// camera center accordingly. For three frames v₀ and g can absorb it.
    #[test]
    fn exact_clouds_lose_one_rank_to_the_similarity_gauge() {
        for seed in 0..20 {
            let t = toy(2, 100 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sampled = t.random_sampled(8, &mut rng);
            let sys = assemble_feature_free(&sampled, &t.preints, &t.extrinsics, &WeightConfig::default()).unwrap();
            assert_eq!(rank_diagnostics(&sys, DEFAULT_RANK_TOL).rank, 3);

            let t = toy(3, 200 + seed);
            let (sys, _) = system(&t, 6, seed);
            assert_eq!(rank_diagnostics(&sys, DEFAULT_RANK_TOL).rank, 6);
            let n = t.similarity_null_vector();
            assert!((&sys.a * &n).amax() < 1e-9 * n.norm());
            assert!(matches!(solve_constrained(&sys, GRAVITY_MAGNITUDE), Err(LinearInitError::RankDeficient { rank: 6, dim: 7 })));
        }
    }

    fn generic(sampled: &SampledSet, rng: &mut ChaCha8Rng) -> SampledSet {
        perturb_points(sampled, 1e-2, rng)
    }

    #[test]
    fn generic_rank_two_frames_is_four() {
        for seed in 0..20 {
            let t = toy(2, 100 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sampled = generic(&t.random_sampled(8, &mut rng), &mut rng);
            let sys = assemble_feature_free(&sampled, &t.preints, &t.extrinsics, &WeightConfig::default()).unwrap();
            assert_eq!(rank_diagnostics(&sys, DEFAULT_RANK_TOL).rank, 4);
        }
    }

    #[test]
    fn generic_rank_three_frames_is_seven() {
        for seed in 0..20 {
            let t = toy(3, 200 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sampled = generic(&t.random_sampled(2, &mut rng), &mut rng);
            let sys = build_feature_free_system(&sampled, &t.preints, &t.extrinsics, &WeightConfig::default()).unwrap();
            let r = rank_diagnostics(&sys, DEFAULT_RANK_TOL);
            assert_eq!(r.rank, 7);
            assert!(r.condition_number.is_finite());
        }
    }

    #[test]
    fn identical_points_are_degenerate() {
        let t = toy(3, 300);
        let s0 = t.sample(0, Vector2::new(0.1, -0.05), 2.5);
        let point = t.to_i0(0, &(Vector3::new(0.1, -0.05, 1.0) * 2.5));
        let frames = (0..3).map(|i| vec![t.sample_of_point(i, &point); 4]).collect();
        let sampled = SampledSet { k: 4, frames };
        assert_eq!(sampled.frames[0][0].point, s0.point);
        let sys = build_feature_free_system(&sampled, &t.preints, &t.extrinsics, &WeightConfig::default()).unwrap();
        assert!(rank_diagnostics(&sys, DEFAULT_RANK_TOL).rank < 7);
        assert!(matches!(solve_constrained(&sys, GRAVITY_MAGNITUDE), Err(LinearInitError::RankDeficient { .. })));
    }


    fn toy_features(t: &Toy, m: usize, seed: u64) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..m)
            .map(|_| t.to_i0(0, &(Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.4..0.4), 1.0) * rng.random_range(1.5..4.0))))
            .collect()
    }

    #[test]
    fn dongsi_recovers_features_and_motion() {
        let t = toy(5, 400);
        let feats = toy_features(&t, 12, 1);
        let sys = build_dongsi_system(&t.observations(&feats), feats.len(), &t.preints, &t.extrinsics).unwrap();
        assert_eq!(sys.dim(), 3 * 12 + 6);
        let sol = solve_constrained(&sys, GRAVITY_MAGNITUDE).unwrap();
        assert_relative_eq!(sol.velocity(), t.truth.v0, epsilon = 1e-6);
        assert_relative_eq!(sol.gravity(), t.truth.g, epsilon = 1e-6);
        for (m, f) in feats.iter().enumerate() {
            let est = Vector3::new(sol.x[3 * m], sol.x[3 * m + 1], sol.x[3 * m + 2]);
            assert_relative_eq!(est, *f, epsilon = 1e-6);
        }
    }

    #[test]
    fn dongsi_single_feature_dimension() {
        let t = toy(3, 401);
        let feats = toy_features(&t, 1, 2);
        let sys = build_dongsi_system(&t.observations(&feats), 1, &t.preints, &t.extrinsics).unwrap();
        assert_eq!(sys.dim(), 9);
        let one = vec![FeatureObservation { frame: 0, feature: 0, bearing: Vector2::zeros() }];
        assert_eq!(build_dongsi_system(&one, 1, &t.preints, &t.extrinsics), Err(LinearInitError::TooFewObservations { feature: 0, observations: 1 }));
    }

    #[test]
    fn dongsi_and_feature_free_agree() {
        let t = toy(5, 402);
        let feats = toy_features(&t, 10, 3);
        let ds = solve_constrained(&build_dongsi_system(&t.observations(&feats), feats.len(), &t.preints, &t.extrinsics).unwrap(), GRAVITY_MAGNITUDE).unwrap();
        let frames = (0..5).map(|i| feats.iter().map(|p| t.sample_of_point(i, p)).collect()).collect();
        let sampled = SampledSet { k: feats.len(), frames };
        let ff = solve_feature_free(&build_feature_free_system(&sampled, &t.preints, &t.extrinsics, &WeightConfig::default()).unwrap()).unwrap();
        assert_relative_eq!(ds.velocity(), ff.v0, epsilon = 1e-6);
        assert_relative_eq!(ds.gravity(), ff.g, epsilon = 1e-6);
        // metric displacement between two features
        let pbar = |k: usize| ext_lift(&t.extrinsics, &sampled.frames[0][k].point, ff.s);
        let ds_p = |k: usize| Vector3::new(ds.x[3 * k], ds.x[3 * k + 1], ds.x[3 * k + 2]);
        assert_relative_eq!(pbar(4) - pbar(7), ds_p(4) - ds_p(7), epsilon = 1e-6);
    }

    fn ext_lift(ext: &Extrinsics, p: &Vector3<f64>, s: f64) -> Vector3<f64> {
        ext.rot_imu_cam * (p * s) + ext.trans_imu_cam
    }

    #[test]
    fn ransac_without_outliers_equals_direct_solve() {
        let t = toy(5, 500);
        let (sys, _) = system(&t, 30, 501);
        let cfg = RansacConfig { iterations: 5, threshold: 1.0, subset_per_frame: 10 };
        let r = ransac_solve(&sys, &cfg, GRAVITY_MAGNITUDE, 7).unwrap();
        assert_eq!(r.inliers, (0..sys.num_blocks()).collect::<Vec<_>>());
        let direct = solve_constrained(&sys, GRAVITY_MAGNITUDE).unwrap();
        assert!((r.solution.x - direct.x).amax() < 1e-9);
    }

    #[test]
    fn ransac_is_reproducible_and_rejects_gross_outliers() {
        let t = toy(5, 510);
        let (mut sys, _) = system(&t, 40, 511);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut bad = Vec::new();
        for blk in 0..sys.num_blocks() {
            if sys.sources[blk].frame > 0 && rng.random_bool(0.3) {
                sys.b[2 * blk] += rng.random_range(1.0..3.0);
                bad.push(blk);
            }
        }
        let cfg = RansacConfig { iterations: 200, threshold: 0.05, subset_per_frame: 2 };
        let a = ransac_solve(&sys, &cfg, GRAVITY_MAGNITUDE, 11).unwrap();
        let b = ransac_solve(&sys, &cfg, GRAVITY_MAGNITUDE, 11).unwrap();
        assert_eq!(a, b);
        assert!(bad.iter().all(|blk| !a.inliers.contains(blk)));
        assert_state_close(&a.solution.feature_free_state(), &t.truth, 1e-6);
    }

    #[test]
    fn ransac_errors() {
        let t = toy(3, 520);
        let (sys, _) = system(&t, 4, 521);
        let cfg = RansacConfig { iterations: 3, threshold: 0.1, subset_per_frame: 5 };
        assert!(matches!(ransac_solve(&sys, &cfg, GRAVITY_MAGNITUDE, 0), Err(LinearInitError::NotEnoughRows { .. })));
        let zero = RansacConfig { iterations: 0, ..cfg };
        assert!(matches!(ransac_solve(&sys, &zero, GRAVITY_MAGNITUDE, 0), Err(LinearInitError::InvalidConfig(_))));
        // one point per frame never reaches full rank
        let tiny = RansacConfig { iterations: 1, threshold: 1e-12, subset_per_frame: 1 };
        assert_eq!(ransac_solve(&sys, &tiny, GRAVITY_MAGNITUDE, 0), Err(LinearInitError::NoValidHypothesis(1)));
    }
}
