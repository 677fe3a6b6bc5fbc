//! Residual blocks with analytic Jacobians.
//!
//! Every factor returns its raw residual and one Jacobian per variable it
//! touches, taken with respect to that variable's tangent coordinates
//! (`ImuState` order θ, p, v, b_g, b_a). Whitening is kept separate so the
//! raw blocks can be checked against finite differences.
//!
//! Residual and Jacobian blocks of [`Factor::whitened`] are what the solver
//! sees; for all factors but the cloud-scale one this is `L·r` and `L·J`.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, UnitQuaternion, Vector2, Vector3};

use super::{softplus, softplus_derivative, ImuState, RefineError, Values, VarKey};
use crate::geometry::{exp_so3_unchecked, left_jacobian_inv, log_so3, project, projection_jacobian, right_jacobian, right_jacobian_inv, skew, Extrinsics};
use crate::imu::{ImuNoise, ImuPreintegration};

const THETA: usize = 0;
const POS: usize = 3;
const VEL: usize = 6;
const BG: usize = 9;
const BA: usize = 12;

/// Raw residual and per-key Jacobians of one factor.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    pub residual: DVector<f64>,
    /// `jacobians[k]` is `dim × tangent_dim(keys[k])`.
    pub jacobians: Vec<DMatrix<f64>>,
}

pub trait Factor: Send + Sync + std::fmt::Debug {
    fn name(&self) -> &'static str;
    fn keys(&self) -> &[VarKey];
    fn dim(&self) -> usize;
    fn evaluate(&self, values: &Values) -> Result<Linearization, RefineError>;
    /// Upper-triangular `L` with `LᵀL = Σ⁻¹`.
    fn sqrt_information(&self) -> &DMatrix<f64>;

    /// Whitened residual and Jacobians.
    fn whitened(&self, values: &Values) -> Result<Linearization, RefineError> {
        let lin = self.evaluate(values)?;
        let l = self.sqrt_information();
        Ok(Linearization { residual: l * lin.residual, jacobians: lin.jacobians.iter().map(|j| l * j).collect() })
    }
}

/// Square-root information of a covariance; a tiny diagonal floor keeps
/// noiseless configurations finite.
pub fn sqrt_information(cov: &DMatrix<f64>) -> Result<DMatrix<f64>, RefineError> {
    let n = cov.nrows();
    let floored = cov + DMatrix::identity(n, n) * 1e-14;
    let info = floored
        .cholesky()
        .ok_or_else(|| RefineError::InvalidProblem("covariance is not positive definite".into()))?
        .inverse();
    let info = 0.5 * (&info + info.transpose());
    let chol = info.cholesky().ok_or_else(|| RefineError::InvalidProblem("information is not positive definite".into()))?;
    Ok(chol.l().transpose())
}

fn isotropic_sqrt_info(dim: usize, sigma: f64) -> DMatrix<f64> {
    DMatrix::identity(dim, dim) / sigma
}

fn put<const R: usize, const C: usize>(m: &mut DMatrix<f64>, row: usize, col: usize, block: &SMatrix<f64, R, C>) {
    m.fixed_view_mut::<R, C>(row, col).copy_from(block);
}

fn state_of(values: &Values, key: VarKey) -> &ImuState {
    match key {
        VarKey::State(i) => &values.states[i],
        _ => unreachable!("factor key layout is fixed at construction"),
    }
}

/// Preintegrated IMU constraint between consecutive states, residual order
/// `(θ, v, p, b_g, b_a)`.
#[derive(Debug, Clone)]
pub struct ImuFactor {
    keys: [VarKey; 2],
    pub preint: ImuPreintegration,
    pub gravity: Vector3<f64>,
    sqrt_info: DMatrix<f64>,
}

impl ImuFactor {
    pub fn new(i: usize, j: usize, preint: ImuPreintegration, gravity: Vector3<f64>, noise: &ImuNoise) -> Result<Self, RefineError> {
        let mut cov = DMatrix::zeros(15, 15);
        cov.view_mut((0, 0), (9, 9)).copy_from(&preint.covariance);
        let dt = preint.dt;
        for k in 0..3 {
            cov[(9 + k, 9 + k)] = noise.gyro_random_walk.powi(2) * dt;
            cov[(12 + k, 12 + k)] = noise.accel_random_walk.powi(2) * dt;
        }
        Ok(Self { keys: [VarKey::State(i), VarKey::State(j)], preint, gravity, sqrt_info: sqrt_information(&cov)? })
    }

    /// The whitening matrix; equal blocks mean structurally equal factors.
    pub fn sqrt_info(&self) -> &DMatrix<f64> {
        &self.sqrt_info
    }
}

impl Factor for ImuFactor {
    fn name(&self) -> &'static str {
        "imu"
    }

    fn keys(&self) -> &[VarKey] {
        &self.keys
    }

    fn dim(&self) -> usize {
        15
    }

    fn evaluate(&self, values: &Values) -> Result<Linearization, RefineError> {
        let si = state_of(values, self.keys[0]);
        let sj = state_of(values, self.keys[1]);
        let pre = &self.preint;
        let dt = pre.dt;
        let dbg = si.biases.gyro - pre.biases.gyro;
        let dba = si.biases.accel - pre.biases.accel;
        let (d_rot, d_vel, d_pos) = pre.corrected_deltas(&dbg, &dba);

        let ri_t = si.rotation.inverse();
        let e = d_rot.inverse() * ri_t * sj.rotation;
        let r_theta = log_so3(&e);
        let vel_term = ri_t * (sj.velocity - si.velocity + self.gravity * dt);
        let pos_term = ri_t * (sj.position - si.position - si.velocity * dt + 0.5 * self.gravity * dt * dt);
        let mut residual = DVector::zeros(15);
        residual.fixed_rows_mut::<3>(0).copy_from(&r_theta);
        residual.fixed_rows_mut::<3>(3).copy_from(&(vel_term - d_vel));
        residual.fixed_rows_mut::<3>(6).copy_from(&(pos_term - d_pos));
        residual.fixed_rows_mut::<3>(9).copy_from(&(sj.biases.gyro - si.biases.gyro));
        residual.fixed_rows_mut::<3>(12).copy_from(&(sj.biases.accel - si.biases.accel));

        let jr_inv = right_jacobian_inv(&r_theta);
        let ri_m = ri_t.to_rotation_matrix().into_inner();
        let rel = (sj.rotation.inverse() * si.rotation).to_rotation_matrix().into_inner();
        let exp_r_t = exp_so3_unchecked(&r_theta).to_rotation_matrix().into_inner().transpose();
        let phi = pre.jac_rot_gyro() * dbg;

        let mut ji = DMatrix::zeros(15, 15);
        put(&mut ji, 0, THETA, &(-jr_inv * rel));
        put(&mut ji, 0, BG, &(-jr_inv * exp_r_t * right_jacobian(&phi) * pre.jac_rot_gyro()));
        put(&mut ji, 3, THETA, &skew(&vel_term));
        put(&mut ji, 3, VEL, &(-ri_m));
        put(&mut ji, 3, BG, &(-pre.jac_vel_gyro()));
        put(&mut ji, 3, BA, &(-pre.jac_vel_accel()));
        put(&mut ji, 6, THETA, &skew(&pos_term));
        put(&mut ji, 6, POS, &(-ri_m));
        put(&mut ji, 6, VEL, &(-ri_m * dt));
        put(&mut ji, 6, BG, &(-pre.jac_pos_gyro()));
        put(&mut ji, 6, BA, &(-pre.jac_pos_accel()));
        put(&mut ji, 9, BG, &(-Matrix3::identity()));
        put(&mut ji, 12, BA, &(-Matrix3::identity()));

        let mut jj = DMatrix::zeros(15, 15);
        put(&mut jj, 0, THETA, &jr_inv);
        put(&mut jj, 3, VEL, &ri_m);
        put(&mut jj, 6, POS, &ri_m);
        put(&mut jj, 9, BG, &Matrix3::identity());
        put(&mut jj, 12, BA, &Matrix3::identity());
        Ok(Linearization { residual, jacobians: vec![ji, jj] })
    }

    fn sqrt_information(&self) -> &DMatrix<f64> {
        &self.sqrt_info
    }
}

/// Camera-frame point, its projection Jacobian, and `∂p_C/∂(θ_i, p_i, ᴳP)`.
struct CameraPoint {
    pc: Vector3<f64>,
    d_theta: Matrix3<f64>,
    d_pos: Matrix3<f64>,
    d_world: Matrix3<f64>,
}

fn to_camera(state: &ImuState, world: &Vector3<f64>, ext: &Extrinsics) -> CameraPoint {
    let r_ci = ext.rot_cam_imu().to_rotation_matrix().into_inner();
    let ri_t = state.rotation.inverse().to_rotation_matrix().into_inner();
    let in_imu = ri_t * (world - state.position);
    CameraPoint {
        pc: r_ci * in_imu + ext.trans_cam_imu(),
        d_theta: r_ci * skew(&in_imu),
        d_pos: -r_ci * ri_t,
        d_world: r_ci * ri_t,
    }
}

fn reprojection(z: &Vector2<f64>, pc: &Vector3<f64>) -> Result<(Vector2<f64>, SMatrix<f64, 2, 3>), RefineError> {
    let uv = project(pc)?;
    Ok((z - uv, -projection_jacobian(pc)))
}

/// `z − π(ᶜ_I R ᴵᵢ_G R (ᴳp_f − ᴳp_{Iᵢ}) + ᶜp_I)` in normalized coordinates.
#[derive(Debug, Clone)]
pub struct ReprojectionFactor {
    keys: [VarKey; 2],
    pub observation: Vector2<f64>,
    pub extrinsics: Extrinsics,
    sqrt_info: DMatrix<f64>,
}

impl ReprojectionFactor {
    pub fn new(frame: usize, feature: usize, observation: Vector2<f64>, extrinsics: Extrinsics, sigma: f64) -> Self {
        Self { keys: [VarKey::State(frame), VarKey::Feature(feature)], observation, extrinsics, sqrt_info: isotropic_sqrt_info(2, sigma) }
    }
}

impl Factor for ReprojectionFactor {
    fn name(&self) -> &'static str {
        "reprojection"
    }

    fn keys(&self) -> &[VarKey] {
        &self.keys
    }

    fn dim(&self) -> usize {
        2
    }

    fn evaluate(&self, values: &Values) -> Result<Linearization, RefineError> {
        let state = state_of(values, self.keys[0]);
        let VarKey::Feature(m) = self.keys[1] else { unreachable!() };
        let cp = to_camera(state, &values.features[m], &self.extrinsics);
        let (r, jpi) = reprojection(&self.observation, &cp.pc)?;
        let mut js = DMatrix::zeros(2, 15);
        put(&mut js, 0, THETA, &(jpi * cp.d_theta));
        put(&mut js, 0, POS, &(jpi * cp.d_pos));
        let jf = DMatrix::from_column_slice(2, 3, (jpi * cp.d_world).as_slice());
        Ok(Linearization { residual: DVector::from_column_slice(r.as_slice()), jacobians: vec![js, jf] })
    }

    fn sqrt_information(&self) -> &DMatrix<f64> {
        &self.sqrt_info
    }
}

/// `ᴳp_f − (s ᴳ_{C₀}R ᶜ⁰p̄_f + ᴳp_{C₀})`, with the `C₀` pose taken from the
/// first IMU state through the extrinsics.
///
/// The point noise is given in up-to-scale units, so its metric standard
/// deviation is `s·σ` at the current scale. Whitening therefore divides by
/// `s` as well, which keeps the optimizer from shrinking the scale just to
/// shrink the noise.
#[derive(Debug, Clone)]
pub struct CloudScaleFactor {
    keys: [VarKey; 3],
    pub point: Vector3<f64>,
    pub extrinsics: Extrinsics,
    sqrt_info: DMatrix<f64>,
}

impl CloudScaleFactor {
    /// `sigma` is in up-to-scale units.
    pub fn new(feature: usize, scale: usize, point: Vector3<f64>, extrinsics: Extrinsics, sigma: f64) -> Self {
        Self { keys: [VarKey::Feature(feature), VarKey::State(0), VarKey::Scale(scale)], point, extrinsics, sqrt_info: isotropic_sqrt_info(3, sigma) }
    }

    fn scale_param(&self, values: &Values) -> f64 {
        let VarKey::Scale(j) = self.keys[2] else { unreachable!() };
        values.scales[j]
    }
}

impl Factor for CloudScaleFactor {
    fn name(&self) -> &'static str {
        "cloud_scale"
    }

    fn keys(&self) -> &[VarKey] {
        &self.keys
    }

    fn dim(&self) -> usize {
        3
    }

    fn evaluate(&self, values: &Values) -> Result<Linearization, RefineError> {
        let VarKey::Feature(m) = self.keys[0] else { unreachable!() };
        let s0 = &values.states[0];
        let raw = self.scale_param(values);
        let s = softplus(raw);
        let r_ic = self.extrinsics.rot_imu_cam.to_rotation_matrix().into_inner();
        let r0 = s0.rotation.to_rotation_matrix().into_inner();
        let in_i0 = s * (r_ic * self.point) + self.extrinsics.trans_imu_cam;
        let r = values.features[m] - (r0 * in_i0 + s0.position);

        let jf = DMatrix::identity(3, 3);
        let mut js = DMatrix::zeros(3, 15);
        put(&mut js, 0, THETA, &(r0 * skew(&in_i0)));
        put(&mut js, 0, POS, &(-Matrix3::identity()));
        let d_scale = -(r0 * r_ic * self.point) * softplus_derivative(raw);
        let jscale = DMatrix::from_column_slice(3, 1, d_scale.as_slice());
        Ok(Linearization { residual: DVector::from_column_slice(r.as_slice()), jacobians: vec![jf, js, jscale] })
    }

    fn sqrt_information(&self) -> &DMatrix<f64> {
        &self.sqrt_info
    }

    /// `e = L·r/s`, so `∂e/∂s̃ = L·(∂r/∂s̃ − r·s'/s)/s`.
    fn whitened(&self, values: &Values) -> Result<Linearization, RefineError> {
        let lin = self.evaluate(values)?;
        let raw = self.scale_param(values);
        let s = softplus(raw);
        let l = &self.sqrt_info / s;
        let mut jacobians: Vec<DMatrix<f64>> = lin.jacobians.iter().map(|j| &l * j).collect();
        let d_scale = &lin.jacobians[2] - DMatrix::from_column_slice(3, 1, lin.residual.as_slice()) * (softplus_derivative(raw) / s);
        jacobians[2] = &l * d_scale;
        Ok(Linearization { residual: &l * &lin.residual, jacobians })
    }
}

/// Feature-free reprojection of a lifted cloud point into frame `i`:
/// `z − π(ᶜ_I T ᴵᵢ_G T ᴳ_{I₀}T ᴵ_C T (s·p̄))`.
#[derive(Debug, Clone)]
pub struct FeatureFreeFactor {
    keys: [VarKey; 3],
    pub point: Vector3<f64>,
    pub observation: Vector2<f64>,
    pub extrinsics: Extrinsics,
    sqrt_info: DMatrix<f64>,
}

impl FeatureFreeFactor {
    /// `frame` must not be 0: the reference-frame residual does not depend
    /// on any variable.
    pub fn new(frame: usize, region: usize, point: Vector3<f64>, observation: Vector2<f64>, extrinsics: Extrinsics, sigma: f64) -> Result<Self, RefineError> {
        if frame == 0 {
            return Err(RefineError::InvalidProblem("feature-free residuals need a frame other than the reference".into()));
        }
        Ok(Self {
            keys: [VarKey::State(0), VarKey::State(frame), VarKey::Scale(region)],
            point,
            observation,
            extrinsics,
            sqrt_info: isotropic_sqrt_info(2, sigma),
        })
    }
}

impl Factor for FeatureFreeFactor {
    fn name(&self) -> &'static str {
        "feature_free"
    }

    fn keys(&self) -> &[VarKey] {
        &self.keys
    }

    fn dim(&self) -> usize {
        2
    }

    fn evaluate(&self, values: &Values) -> Result<Linearization, RefineError> {
        let VarKey::Scale(j) = self.keys[2] else { unreachable!() };
        let s0 = state_of(values, self.keys[0]);
        let si = state_of(values, self.keys[1]);
        let raw = values.scales[j];
        let s = softplus(raw);
        let r_ic = self.extrinsics.rot_imu_cam.to_rotation_matrix().into_inner();
        let r0 = s0.rotation.to_rotation_matrix().into_inner();
        let in_i0 = s * (r_ic * self.point) + self.extrinsics.trans_imu_cam;
        let world = r0 * in_i0 + s0.position;
        let cp = to_camera(si, &world, &self.extrinsics);
        let (r, jpi) = reprojection(&self.observation, &cp.pc)?;
        let j_world = jpi * cp.d_world;

        let mut j0 = DMatrix::zeros(2, 15);
        put(&mut j0, 0, THETA, &(j_world * (-r0 * skew(&in_i0))));
        put(&mut j0, 0, POS, &j_world);
        let mut ji = DMatrix::zeros(2, 15);
        put(&mut ji, 0, THETA, &(jpi * cp.d_theta));
        put(&mut ji, 0, POS, &(jpi * cp.d_pos));
        let d_scale = j_world * (r0 * r_ic * self.point) * softplus_derivative(raw);
        let jscale = DMatrix::from_column_slice(2, 1, d_scale.as_slice());
        Ok(Linearization { residual: DVector::from_column_slice(r.as_slice()), jacobians: vec![j0, ji, jscale] })
    }

    fn sqrt_information(&self) -> &DMatrix<f64> {
        &self.sqrt_info
    }
}

/// `s_j − s_l` on realized scales of adjacent regions.
#[derive(Debug, Clone)]
pub struct SmoothnessFactor {
    keys: [VarKey; 2],
    sqrt_info: DMatrix<f64>,
}

impl SmoothnessFactor {
    pub fn new(j: usize, l: usize, sigma: f64) -> Self {
        Self { keys: [VarKey::Scale(j), VarKey::Scale(l)], sqrt_info: isotropic_sqrt_info(1, sigma) }
    }
}

impl Factor for SmoothnessFactor {
    fn name(&self) -> &'static str {
        "smoothness"
    }

    fn keys(&self) -> &[VarKey] {
        &self.keys
    }

    fn dim(&self) -> usize {
        1
    }

    fn evaluate(&self, values: &Values) -> Result<Linearization, RefineError> {
        let (VarKey::Scale(j), VarKey::Scale(l)) = (self.keys[0], self.keys[1]) else { unreachable!() };
        let (a, b) = (values.scales[j], values.scales[l]);
        Ok(Linearization {
            residual: DVector::from_element(1, softplus(a) - softplus(b)),
            jacobians: vec![DMatrix::from_element(1, 1, softplus_derivative(a)), DMatrix::from_element(1, 1, -softplus_derivative(b))],
        })
    }

    fn sqrt_information(&self) -> &DMatrix<f64> {
        &self.sqrt_info
    }
}

/// Standard deviations of the first-frame prior.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    /// meters
    pub position: f64,
    /// radians
    pub yaw: f64,
    pub gyro_bias: f64,
    pub accel_bias: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self { position: 1e-3, yaw: 1e-3, gyro_bias: 1e-2, accel_bias: 0.1 }
    }
}

impl PriorConfig {
    pub fn is_valid(&self) -> bool {
        [self.position, self.yaw, self.gyro_bias, self.accel_bias].iter().all(|s| *s > 0.0 && s.is_finite())
    }
}

/// Anchors position, yaw and biases of state 0 at its linearization point;
/// residual order `(p, ψ, b_g, b_a)`.
///
/// The yaw component is the world-z part of `Log(R₀ R̄₀ᵀ)`, so roll and
/// pitch stay free.
#[derive(Debug, Clone)]
pub struct PriorFactor {
    keys: [VarKey; 1],
    pub anchor: ImuState,
    sqrt_info: DMatrix<f64>,
}

impl PriorFactor {
    pub fn new(anchor: ImuState, cfg: &PriorConfig) -> Self {
        let mut sqrt_info = DMatrix::zeros(10, 10);
        let sigmas = [cfg.position, cfg.position, cfg.position, cfg.yaw, cfg.gyro_bias, cfg.gyro_bias, cfg.gyro_bias, cfg.accel_bias, cfg.accel_bias, cfg.accel_bias];
        for (k, s) in sigmas.iter().enumerate() {
            sqrt_info[(k, k)] = 1.0 / s;
        }
        Self { keys: [VarKey::State(0)], anchor, sqrt_info }
    }
}

impl Factor for PriorFactor {
    fn name(&self) -> &'static str {
        "prior"
    }

    fn keys(&self) -> &[VarKey] {
        &self.keys
    }

    fn dim(&self) -> usize {
        10
    }

    fn evaluate(&self, values: &Values) -> Result<Linearization, RefineError> {
        let s = &values.states[0];
        let a = &self.anchor;
        let world_err: UnitQuaternion<f64> = s.rotation * a.rotation.inverse();
        let rot = log_so3(&world_err);
        let mut residual = DVector::zeros(10);
        residual.fixed_rows_mut::<3>(0).copy_from(&(s.position - a.position));
        residual[3] = rot.z;
        residual.fixed_rows_mut::<3>(4).copy_from(&(s.biases.gyro - a.biases.gyro));
        residual.fixed_rows_mut::<3>(7).copy_from(&(s.biases.accel - a.biases.accel));

        let mut j = DMatrix::zeros(10, 15);
        put(&mut j, 0, POS, &Matrix3::identity());
        let d_yaw = (left_jacobian_inv(&rot) * s.rotation.to_rotation_matrix().into_inner()).row(2).into_owned();
        put(&mut j, 3, THETA, &d_yaw);
        put(&mut j, 4, BG, &Matrix3::identity());
        put(&mut j, 7, BA, &Matrix3::identity());
        Ok(Linearization { residual, jacobians: vec![j] })
    }

    fn sqrt_information(&self) -> &DMatrix<f64> {
        &self.sqrt_info
    }
}
