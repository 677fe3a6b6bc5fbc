//! Dense Levenberg–Marquardt on the state manifold, covariance recovery and
//! finite-difference Jacobian checks.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Problem, RefineError, Values, VarKey};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub max_iterations: usize,
    pub initial_damping: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    /// Stop when an accepted step lowers the cost by less than this fraction.
    pub cost_tolerance: f64,
    /// Stop when the step norm drops below this.
    pub step_tolerance: f64,
    /// Give up once damping exceeds this without finding a descent step.
    pub max_damping: f64,
    /// Cost per residual row treated as zero; far below any noise floor.
    pub zero_cost_per_residual: f64,
    /// Gauss–Newton passes over each feature alone after every step, with
    /// the other variables held. Zero disables them.
    pub feature_iterations: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            initial_damping: 1e-4,
            damping_up: 10.0,
            damping_down: 0.5,
            cost_tolerance: 1e-6,
            step_tolerance: 1e-10,
            max_damping: 1e12,
            zero_cost_per_residual: 1e-8,
            feature_iterations: 3,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<(), RefineError> {
        let ok = self.max_iterations > 0
            && self.initial_damping > 0.0
            && self.damping_up > 1.0
            && self.damping_down > 0.0
            && self.damping_down < 1.0
            && self.cost_tolerance >= 0.0
            && self.step_tolerance >= 0.0
            && self.max_damping > self.initial_damping
            && self.zero_cost_per_residual >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(RefineError::InvalidProblem(format!("invalid solver settings {self:?}")))
        }
    }
}

/// One attempted step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    /// Cost after the step if accepted, otherwise the unchanged cost.
    pub cost: f64,
    pub damping: f64,
    pub step_norm: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    /// Relative cost decrease fell below tolerance.
    CostTolerance,
    StepTolerance,
    /// Cost is negligible (below `zero_cost_per_residual` per row).
    ZeroCost,
    /// No descent direction found before damping saturated; the current
    /// point is a numerical minimum.
    DampingSaturated,
    MaxIterations,
}

impl Termination {
    pub fn converged(&self) -> bool {
        !matches!(self, Termination::MaxIterations)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmSummary {
    /// Best values found.
    pub values: Values,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Outer iterations (linearizations) performed.
    pub iterations: usize,
    pub log: Vec<IterationRecord>,
    pub termination: Termination,
}

/// Minimize the problem's cost starting from `problem.values`.
pub fn solve_lm(problem: &Problem, cfg: &LmConfig) -> Result<LmSummary, RefineError> {
    cfg.validate()?;
    let mut values = problem.values.clone();
    let mut cost = problem.cost(&values)?;
    if !cost.is_finite() {
        return Err(RefineError::DivergedNaN(0));
    }
    let initial_cost = cost;
    let zero_cost = cfg.zero_cost_per_residual * problem.num_residuals() as f64;
    let mut lambda = cfg.initial_damping;
    let mut log = Vec::new();
    let mut iterations = 0;
    let mut termination = Termination::MaxIterations;
    let groups = feature_factors(problem);

    'outer: for iter in 1..=cfg.max_iterations {
        if cost <= zero_cost {
            termination = Termination::ZeroCost;
            break;
        }
        iterations = iter;
        let (r, j) = problem.linearize(&values)?;
        let h = j.transpose() * &j;
        let g = j.transpose() * r;
        if !(h.iter().all(|v| v.is_finite()) && g.iter().all(|v| v.is_finite())) {
            return Err(RefineError::DivergedNaN(iter));
        }
        loop {
            let mut damped = h.clone();
            for k in 0..damped.nrows() {
                damped[(k, k)] += lambda * h[(k, k)].max(1e-9);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= cfg.damping_up;
                if lambda > cfg.max_damping {
                    termination = Termination::DampingSaturated;
                    break 'outer;
                }
                continue;
            };
            let step = -chol.solve(&g);
            let step_norm = step.norm();
            let candidate = relax_features(problem, &groups, values.retract(&step), cfg.feature_iterations);
            // a step that pushes a point behind a camera is simply rejected
            let new_cost = problem.cost(&candidate).unwrap_or(f64::INFINITY);
            if new_cost.is_finite() && new_cost < cost {
                let relative = (cost - new_cost) / cost;
                values = candidate;
                cost = new_cost;
                log.push(IterationRecord { iter, cost, damping: lambda, step_norm, accepted: true });
                lambda = (lambda * cfg.damping_down).max(1e-15);
                if relative < cfg.cost_tolerance {
                    termination = Termination::CostTolerance;
                    break 'outer;
                }
                if step_norm < cfg.step_tolerance {
                    termination = Termination::StepTolerance;
                    break 'outer;
                }
                break;
            }
            log.push(IterationRecord { iter, cost, damping: lambda, step_norm, accepted: false });
            if step_norm < cfg.step_tolerance {
                termination = Termination::StepTolerance;
                break 'outer;
            }
            lambda *= cfg.damping_up;
            if lambda > cfg.max_damping {
                termination = Termination::DampingSaturated;
                break 'outer;
            }
        }
    }
    if iterations == cfg.max_iterations && termination == Termination::MaxIterations {
        log::warn!("LM stopped after {iterations} iterations at cost {cost:.6e}");
    }
    Ok(LmSummary { values, initial_cost, final_cost: cost, iterations, log, termination })
}

/// Factor indices touching each feature.
pub(super) fn feature_factors(problem: &Problem) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); problem.values.features.len()];
    for (idx, f) in problem.factors.iter().enumerate() {
        for key in f.keys() {
            if let VarKey::Feature(m) = key {
                groups[*m].push(idx);
            }
        }
    }
    groups
}

/// Embedded point iterations: each feature is moved by Gauss–Newton on its
/// own factors with everything else held. Features do not share factors, so
/// lowering every local cost lowers the total.
pub(super) fn relax_features(problem: &Problem, groups: &[Vec<usize>], values: Values, iterations: usize) -> Values {
    if iterations == 0 || groups.is_empty() {
        return values;
    }
    let moved: Vec<Vector3<f64>> = (0..groups.len())
        .into_par_iter()
        .map(|m| {
            let mut local = values.clone();
            let cost = |v: &Values| -> Option<f64> {
                groups[m].iter().map(|&k| problem.factors[k].whitened(v).ok().map(|l| l.residual.norm_squared())).sum()
            };
            let Some(mut current) = cost(&local) else { return values.features[m] };
            for _ in 0..iterations {
                let mut h = Matrix3::zeros();
                let mut g = Vector3::zeros();
                for &k in &groups[m] {
                    let f = &problem.factors[k];
                    let Ok(lin) = f.whitened(&local) else { return local.features[m] };
                    let slot = f.keys().iter().position(|key| *key == VarKey::Feature(m)).expect("grouped by feature");
                    let j = &lin.jacobians[slot];
                    for r in 0..3 {
                        g[r] += j.column(r).dot(&lin.residual);
                        for c in 0..3 {
                            h[(r, c)] += j.column(r).dot(&j.column(c));
                        }
                    }
                }
                let Some(chol) = h.cholesky() else { break };
                let step = -chol.solve(&g);
                let before = local.features[m];
                local.features[m] = before + step;
                match cost(&local) {
                    Some(c) if c < current => current = c,
                    _ => {
                        local.features[m] = before;
                        break;
                    }
                }
            }
            local.features[m]
        })
        .collect();
    let mut out = values;
    out.features = moved;
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CovarianceStatus {
    Recovered {
        /// Full tangent-space covariance, layout of [`Values::offset`].
        #[serde(skip)]
        covariance: DMatrix<f64>,
        /// Reciprocal condition number of the Jacobi-scaled information.
        rcond: f64,
    },
    Failed {
        reason: String,
    },
}

impl CovarianceStatus {
    pub fn is_recovered(&self) -> bool {
        matches!(self, CovarianceStatus::Recovered { .. })
    }
}

/// Smallest reciprocal condition accepted for the scaled information.
pub const COVARIANCE_RCOND: f64 = 1e-12;

/// Invert the undamped information matrix at `values`.
pub fn recover_covariance(problem: &Problem, values: &Values) -> Result<CovarianceStatus, RefineError> {
    let h = problem.information_matrix(values)?;
    let n = h.nrows();
    let diag = h.diagonal();
    if let Some(k) = (0..n).find(|&k| !(diag[k] > 0.0)) {
        return Ok(CovarianceStatus::Failed { reason: format!("tangent coordinate {k} carries no information") });
    }
    let scale = diag.map(|d| 1.0 / d.sqrt());
    let scaled = DMatrix::from_fn(n, n, |r, c| h[(r, c)] * scale[r] * scale[c]);
    let eig = SymmetricEigen::new(scaled);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let rcond = min / max;
    if !(rcond > COVARIANCE_RCOND) {
        return Ok(CovarianceStatus::Failed { reason: format!("information matrix is singular (reciprocal condition {rcond:.3e})") });
    }
    match h.cholesky() {
        Some(chol) => Ok(CovarianceStatus::Recovered { covariance: chol.inverse(), rcond }),
        None => Ok(CovarianceStatus::Failed { reason: "information matrix is not positive definite".into() }),
    }
}

/// Finite-difference agreement of one factor's Jacobian for one variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JacobianBlockReport {
    pub factor: usize,
    pub name: String,
    pub key: VarKey,
    /// `‖J − J_fd‖_F / max(‖J_fd‖_F, 1)`
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JacobianReport {
    pub blocks: Vec<JacobianBlockReport>,
    pub max_error: f64,
    pub tolerance: f64,
}

impl JacobianReport {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }

    /// Largest error per factor name.
    pub fn by_factor(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for b in &self.blocks {
            match out.iter_mut().find(|(n, _)| *n == b.name) {
                Some((_, e)) => *e = e.max(b.error),
                None => out.push((b.name.clone(), b.error)),
            }
        }
        out
    }
}

/// Compare every analytic Jacobian block with central differences of the
/// raw (unwhitened) residual at `values`.
pub fn check_jacobians(problem: &Problem, values: &Values, perturbation: f64, tolerance: f64) -> Result<JacobianReport, RefineError> {
    let mut blocks = Vec::new();
    for (idx, factor) in problem.factors.iter().enumerate() {
        let lin = factor.evaluate(values)?;
        for (key, analytic) in factor.keys().iter().zip(&lin.jacobians) {
            let mut numeric = DMatrix::zeros(factor.dim(), key.tangent_dim());
            for c in 0..key.tangent_dim() {
                let plus = factor.evaluate(&values.perturbed(*key, c, perturbation))?.residual;
                let minus = factor.evaluate(&values.perturbed(*key, c, -perturbation))?.residual;
                let col: DVector<f64> = (plus - minus) / (2.0 * perturbation);
                numeric.set_column(c, &col);
            }
            let error = (analytic - &numeric).norm() / numeric.norm().max(1.0);
            blocks.push(JacobianBlockReport { factor: idx, name: factor.name().to_string(), key: *key, error });
        }
    }
    let max_error = blocks.iter().map(|b| b.error).fold(0.0, f64::max);
    Ok(JacobianReport { blocks, max_error, tolerance })
}
