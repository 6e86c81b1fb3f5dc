//! Error-state EKF over the composite calibration manifold.
//!
//! Error-state layout (27 dims), fixed for the whole crate:
//!
//! | block           | offset |
//! |-----------------|--------|
//! | IMU rotation    | 0      |
//! | IMU position    | 3      |
//! | velocity        | 6      |
//! | gyro bias       | 9      |
//! | accel bias      | 12     |
//! | LiDAR rotation  | 15     |
//! | LiDAR position  | 18     |
//! | camera rotation | 21     |
//! | camera position | 24     |
//!
//! Pose blocks are right perturbations through [`Pose::boxplus`], the rest are
//! additive.

use std::collections::VecDeque;

use nalgebra::{Cholesky, DMatrix, DVector, SMatrix, SVector, Vector3};

use crate::error::{CalibError, Result};
use crate::geometry::{Pose, Twist};
use crate::propagation::{self, ImuNoiseModel, ImuSample, TrajectoryBuffer};

pub const STATE_DIM: usize = 27;
pub const IMU_ROT: usize = 0;
pub const IMU_POS: usize = 3;
pub const VEL: usize = 6;
pub const BIAS_GYRO: usize = 9;
pub const BIAS_ACCEL: usize = 12;
pub const LIDAR_ROT: usize = 15;
pub const LIDAR_POS: usize = 18;
pub const CAM_ROT: usize = 21;
pub const CAM_POS: usize = 24;
/// Number of leading error dims driven by IMU kinematics.
pub const IMU_DIM: usize = 15;

pub type ErrorCovariance = SMatrix<f64, STATE_DIM, STATE_DIM>;
pub type ErrorVector = SVector<f64, STATE_DIM>;
pub type Transition = SMatrix<f64, STATE_DIM, STATE_DIM>;

/// Chi-square 99.7% quantiles for 1..=12 degrees of freedom.
pub const CHI2_997: [f64; 12] = [
    8.807468, 11.618286, 13.931423, 16.014326, 17.957612, 19.804652, 21.580145, 23.299735,
    24.974068, 26.610785, 28.215584, 29.792854,
];

/// Innovation covariances with a condition estimate above this are rejected.
pub const MAX_CONDITION: f64 = 1e12;

/// Nominal state.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterState {
    /// `T^G_I` at `stamp`.
    pub imu_pose: Pose,
    pub velocity: Vector3<f64>,
    pub bias_gyro: Vector3<f64>,
    pub bias_accel: Vector3<f64>,
    /// `T^I_L`
    pub extr_lidar: Pose,
    /// `T^I_C`
    pub extr_cam: Pose,
    /// IMU pose at the first accepted LiDAR scan; set once.
    pub anchor_pose: Option<Pose>,
    pub stamp: f64,
}

impl FilterState {
    pub fn new(imu_pose: Pose, velocity: Vector3<f64>, extr_lidar: Pose, extr_cam: Pose, stamp: f64) -> Self {
        FilterState {
            imu_pose,
            velocity,
            bias_gyro: Vector3::zeros(),
            bias_accel: Vector3::zeros(),
            extr_lidar,
            extr_cam,
            anchor_pose: None,
            stamp,
        }
    }
}

fn twist_at(delta: &ErrorVector, rot: usize, pos: usize) -> Twist {
    Twist::new(
        delta.fixed_rows::<3>(pos).into_owned(),
        delta.fixed_rows::<3>(rot).into_owned(),
    )
}

/// Retracts an error vector onto the nominal state.
pub fn inject_error(state: &FilterState, delta: &ErrorVector) -> FilterState {
    let mut out = state.clone();
    out.imu_pose = state.imu_pose.boxplus(&twist_at(delta, IMU_ROT, IMU_POS));
    out.velocity += delta.fixed_rows::<3>(VEL);
    out.bias_gyro += delta.fixed_rows::<3>(BIAS_GYRO);
    out.bias_accel += delta.fixed_rows::<3>(BIAS_ACCEL);
    out.extr_lidar = state.extr_lidar.boxplus(&twist_at(delta, LIDAR_ROT, LIDAR_POS));
    out.extr_cam = state.extr_cam.boxplus(&twist_at(delta, CAM_ROT, CAM_POS));
    out
}

/// Error of `truth` relative to `estimate` in the filter's layout, i.e. the
/// `delta` for which `inject_error(estimate, delta) == truth`.
pub fn state_difference(truth: &FilterState, estimate: &FilterState) -> ErrorVector {
    let mut d = ErrorVector::zeros();
    let mut put = |t: Twist, rot: usize, pos: usize| {
        d.fixed_rows_mut::<3>(rot).copy_from(&t.phi);
        d.fixed_rows_mut::<3>(pos).copy_from(&t.rho);
    };
    put(truth.imu_pose.boxminus(&estimate.imu_pose), IMU_ROT, IMU_POS);
    put(truth.extr_lidar.boxminus(&estimate.extr_lidar), LIDAR_ROT, LIDAR_POS);
    put(truth.extr_cam.boxminus(&estimate.extr_cam), CAM_ROT, CAM_POS);
    d.fixed_rows_mut::<3>(VEL).copy_from(&(truth.velocity - estimate.velocity));
    d.fixed_rows_mut::<3>(BIAS_GYRO).copy_from(&(truth.bias_gyro - estimate.bias_gyro));
    d.fixed_rows_mut::<3>(BIAS_ACCEL).copy_from(&(truth.bias_accel - estimate.bias_accel));
    d
}

/// A residual linearized about the current nominal state: `r ~ H dx + n`,
/// `n ~ N(0, noise_cov)`. The Jacobian has one column per error dim of
/// whatever (possibly clone-augmented) state it was built for.
#[derive(Clone, Debug)]
pub struct LinearizedMeasurement {
    pub residual: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    pub noise_cov: DMatrix<f64>,
}

impl LinearizedMeasurement {
    pub fn dim(&self) -> usize {
        self.residual.len()
    }

    fn check(&self, n: usize) -> Result<()> {
        let m = self.residual.len();
        if m == 0
            || self.jacobian.nrows() != m
            || self.jacobian.ncols() != n
            || self.noise_cov.nrows() != m
            || self.noise_cov.ncols() != m
        {
            return Err(CalibError::InvalidArgument(format!(
                "measurement dims r={} H={}x{} R={}x{} against state dim {n}",
                m,
                self.jacobian.nrows(),
                self.jacobian.ncols(),
                self.noise_cov.nrows(),
                self.noise_cov.ncols()
            )));
        }
        Ok(())
    }
}

fn factor(s: DMatrix<f64>) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    let chol = Cholesky::new(s).ok_or(CalibError::DegenerateMeasurement(f64::INFINITY))?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = diag
        .iter()
        .fold((f64::INFINITY, 0.0_f64), |(lo, hi), d| (lo.min(*d), hi.max(*d)));
    // (max L_ii / min L_ii)^2 bounds the 2-norm condition number from below.
    let cond = (hi / lo).powi(2);
    if !(cond <= MAX_CONDITION) {
        return Err(CalibError::DegenerateMeasurement(cond));
    }
    Ok(chol)
}

fn symmetrize_dyn(p: &mut DMatrix<f64>) {
    let n = p.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (p[(i, j)] + p[(j, i)]);
            p[(i, j)] = v;
            p[(j, i)] = v;
        }
    }
}

pub fn symmetrize(p: &mut ErrorCovariance) {
    for i in 0..STATE_DIM {
        for j in (i + 1)..STATE_DIM {
            let v = 0.5 * (p[(i, j)] + p[(j, i)]);
            p[(i, j)] = v;
            p[(j, i)] = v;
        }
    }
}

/// `true` iff `r' S^-1 r` is within the 99.7% chi-square quantile.
pub fn chi_square_gate(r: &DVector<f64>, s: &DMatrix<f64>) -> Result<bool> {
    let m = r.len();
    if m == 0 || m > CHI2_997.len() {
        return Err(CalibError::UnsupportedDimension(m));
    }
    let chol = factor(s.clone())?;
    Ok(r.dot(&chol.solve(r)) <= CHI2_997[m - 1])
}

/// Result of a Kalman correction on a (possibly augmented) covariance.
#[derive(Clone, Debug)]
pub struct Correction {
    pub accepted: bool,
    /// Squared Mahalanobis distance of the innovation.
    pub mahalanobis: f64,
    pub delta: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// `I - K H`, the linear map the update applies to the prior error.
    pub i_minus_kh: DMatrix<f64>,
}

/// Kalman gain, gating and Joseph-form covariance update.
///
/// Gating only applies to measurements of at most 12 rows (the extent of the
/// quantile table); stacked reprojection residuals are never gated.
pub fn kalman_correct(p: &DMatrix<f64>, meas: &LinearizedMeasurement, gate: bool) -> Result<Correction> {
    let n = p.nrows();
    meas.check(n)?;
    let m = meas.dim();
    let h = &meas.jacobian;
    let hp = h * p;
    let mut s = &hp * h.transpose() + &meas.noise_cov;
    symmetrize_dyn(&mut s);
    let chol = factor(s)?;
    let mahalanobis = meas.residual.dot(&chol.solve(&meas.residual));
    if gate && m <= CHI2_997.len() && mahalanobis > CHI2_997[m - 1] {
        return Ok(Correction {
            accepted: false,
            mahalanobis,
            delta: DVector::zeros(n),
            cov: p.clone(),
            i_minus_kh: DMatrix::identity(n, n),
        });
    }
    // K = P H' S^-1 = (S^-1 H P)'
    let k = chol.solve(&hp).transpose();
    let delta = &k * &meas.residual;
    let ikh = DMatrix::identity(n, n) - &k * h;
    let mut cov = &ikh * p * ikh.transpose() + &k * &meas.noise_cov * k.transpose();
    symmetrize_dyn(&mut cov);
    Ok(Correction {
        accepted: true,
        mahalanobis,
        delta,
        cov,
        i_minus_kh: ikh,
    })
}

/// One EKF measurement update on the 27-dim state.
pub fn ekf_update(
    state: &FilterState,
    cov: &ErrorCovariance,
    meas: &LinearizedMeasurement,
    gate: bool,
) -> Result<(FilterState, ErrorCovariance, bool)> {
    let p = DMatrix::from_column_slice(STATE_DIM, STATE_DIM, cov.as_slice());
    let c = kalman_correct(&p, meas, gate)?;
    if !c.accepted {
        return Ok((state.clone(), *cov, false));
    }
    let delta = ErrorVector::from_column_slice(c.delta.as_slice());
    let new_cov = ErrorCovariance::from_column_slice(c.cov.as_slice());
    Ok((inject_error(state, &delta), new_cov, true))
}

/// Snapshot kept for retroactive stochastic cloning.
#[derive(Clone, Debug)]
pub(crate) struct HistoryEntry {
    pub stamp: f64,
    /// Nominal IMU pose at `stamp`, after any updates applied at that stamp.
    pub imu_pose: Pose,
    /// Columns of the covariance belonging to the IMU pose error at `stamp`.
    pub cov_cols: SMatrix<f64, STATE_DIM, 6>,
    /// Linear map from this entry's error to the next entry's error.
    pub to_next: Option<Box<Transition>>,
}

/// Tuning that governs the filter itself (not the measurement models).
#[derive(Clone, Debug)]
pub struct FilterConfig {
    pub noise: ImuNoiseModel,
    pub gating: bool,
    /// Seconds of history retained for cloning and undistortion.
    pub history_horizon: f64,
    /// Relinearizations per live update; 1 is the plain EKF.
    pub iterations: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            noise: ImuNoiseModel::default(),
            gating: true,
            history_horizon: 2.0,
            iterations: 1,
        }
    }
}

/// The filter owner: nominal state, covariance and the bounded history that
/// cross-time measurements need.
#[derive(Clone, Debug)]
pub struct Filter {
    pub state: FilterState,
    pub cov: ErrorCovariance,
    pub config: FilterConfig,
    pub(crate) history: VecDeque<HistoryEntry>,
    pub trajectory: TrajectoryBuffer,
    initial_trace: f64,
}

/// Outcome of a single update attempt.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateOutcome {
    pub accepted: bool,
    pub mahalanobis: f64,
}

impl Filter {
    pub fn new(state: FilterState, cov: ErrorCovariance, config: FilterConfig) -> Self {
        let mut f = Filter {
            initial_trace: cov.trace(),
            trajectory: TrajectoryBuffer::new(config.history_horizon),
            history: VecDeque::new(),
            state,
            cov,
            config,
        };
        f.trajectory.push(f.state.stamp, f.state.imu_pose);
        f.push_history(None);
        f
    }

    pub fn initial_trace(&self) -> f64 {
        self.initial_trace
    }

    pub fn stamp(&self) -> f64 {
        self.state.stamp
    }

    fn push_history(&mut self, transition: Option<Transition>) {
        if let (Some(last), Some(phi)) = (self.history.back_mut(), transition) {
            last.to_next = Some(Box::new(phi));
        }
        self.history.push_back(HistoryEntry {
            stamp: self.state.stamp,
            imu_pose: self.state.imu_pose,
            cov_cols: self.cov.fixed_columns::<6>(IMU_ROT).into_owned(),
            to_next: None,
        });
        let horizon = self.state.stamp - self.config.history_horizon;
        while self.history.len() > 1 && self.history[0].stamp < horizon - 1e-9 {
            self.history.pop_front();
        }
    }

    /// Propagates between two IMU samples (the second one defines the new
    /// stamp).
    pub fn propagate(&mut self, from: &ImuSample, to: &ImuSample) -> Result<()> {
        let out = propagation::propagate(&self.state, &self.cov, from, to, &self.config.noise)?;
        self.state = out.state;
        self.cov = out.cov;
        self.trajectory.push(self.state.stamp, self.state.imu_pose);
        self.push_history(Some(out.transition));
        Ok(())
    }

    /// Applies a measurement linearized against the live 27-dim state.
    pub fn update(&mut self, meas: &LinearizedMeasurement, gate: bool) -> Result<UpdateOutcome> {
        let p = DMatrix::from_column_slice(STATE_DIM, STATE_DIM, self.cov.as_slice());
        let c = kalman_correct(&p, meas, gate && self.config.gating)?;
        Ok(self.commit(c))
    }

    /// Iterated update: `model` is relinearized at each intermediate estimate
    /// until the correction settles or `config.iterations` is reached. The
    /// gate is evaluated at the prior.
    pub fn update_iterated(
        &mut self,
        model: &mut dyn FnMut(&FilterState) -> Result<LinearizedMeasurement>,
        gate: bool,
    ) -> Result<UpdateOutcome> {
        let p = DMatrix::from_column_slice(STATE_DIM, STATE_DIM, self.cov.as_slice());
        let mut c = kalman_correct(&p, &model(&self.state)?, gate && self.config.gating)?;
        if !c.accepted {
            return Ok(self.commit(c));
        }
        let mahalanobis = c.mahalanobis;
        for _ in 1..self.config.iterations.max(1) {
            let delta = ErrorVector::from_column_slice(c.delta.as_slice());
            let Ok(mut m) = model(&inject_error(&self.state, &delta)) else {
                break;
            };
            m.residual += &m.jacobian * &c.delta;
            let Ok(next) = kalman_correct(&p, &m, false) else {
                break;
            };
            let change = (&next.delta - &c.delta).norm();
            c = next;
            if change < 1e-10 * (1.0 + c.delta.norm()) {
                break;
            }
        }
        c.mahalanobis = mahalanobis;
        Ok(self.commit(c))
    }

    fn commit(&mut self, c: Correction) -> UpdateOutcome {
        if c.accepted {
            let delta = ErrorVector::from_column_slice(c.delta.as_slice());
            let cov = ErrorCovariance::from_column_slice(c.cov.as_slice());
            let ikh = Transition::from_column_slice(c.i_minus_kh.as_slice());
            self.apply_correction(&delta, cov, &ikh);
        }
        UpdateOutcome {
            accepted: c.accepted,
            mahalanobis: c.mahalanobis,
        }
    }

    /// Injects a correction and keeps the history and trajectory consistent
    /// with it. `live_map` is the map the update applied to the live error.
    pub(crate) fn apply_correction(&mut self, delta: &ErrorVector, cov: ErrorCovariance, live_map: &Transition) {
        let before = self.state.imu_pose;
        self.state = inject_error(&self.state, delta);
        self.cov = cov;
        symmetrize(&mut self.cov);
        let n = self.history.len();
        if n >= 2 {
            if let Some(phi) = self.history[n - 2].to_next.as_mut() {
                **phi = live_map * **phi;
            }
        }
        if let Some(last) = self.history.back_mut() {
            last.imu_pose = self.state.imu_pose;
            last.cov_cols = self.cov.fixed_columns::<6>(IMU_ROT).into_owned();
        }
        // Keep relative motion inside the buffer purely inertial.
        let shift = self.state.imu_pose.compose(&before.inverse());
        self.trajectory.shift(&shift);
    }

    /// Trace check against the divergence limit.
    pub fn check_divergence(&self, factor: f64) -> Result<()> {
        let trace = self.cov.trace();
        let limit = factor * self.initial_trace;
        if !(trace <= limit) {
            return Err(CalibError::Divergence { trace, limit });
        }
        Ok(())
    }

    pub fn history_span(&self) -> (f64, f64) {
        (
            self.history.front().map_or(self.state.stamp, |e| e.stamp),
            self.state.stamp,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rotation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn sample_state(rng: &mut ChaCha8Rng) -> FilterState {
        let mut v = || Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let mut s = FilterState::new(
            Pose::new(Rotation::exp(&v()), v()),
            v(),
            Pose::new(Rotation::exp(&v()), v()),
            Pose::new(Rotation::exp(&v()), v()),
            1.0,
        );
        s.bias_gyro = v() * 0.01;
        s.bias_accel = v() * 0.1;
        s
    }

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(n, n) * 0.1
    }

    fn meas(r: DVector<f64>, h: DMatrix<f64>, noise: DMatrix<f64>) -> LinearizedMeasurement {
        LinearizedMeasurement {
            residual: r,
            jacobian: h,
            noise_cov: noise,
        }
    }

    #[test]
    fn zero_residual_keeps_state_and_shrinks_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_state(&mut rng);
        let p = ErrorCovariance::from_column_slice(random_spd(&mut rng, STATE_DIM).as_slice());
        let h = DMatrix::from_fn(4, STATE_DIM, |_, _| rng.gen_range(-1.0..1.0));
        let m = meas(DVector::zeros(4), h, DMatrix::identity(4, 4) * 0.01);
        let (s2, p2, acc) = ekf_update(&s, &p, &m, true).unwrap();
        assert!(acc);
        assert_eq!(s2, s);
        assert!(p2.trace() <= p.trace());
    }

    #[test]
    fn scalar_kalman_toy() {
        let s = sample_state(&mut ChaCha8Rng::seed_from_u64(2));
        let mut p = ErrorCovariance::zeros();
        p[(BIAS_ACCEL, BIAS_ACCEL)] = 1.0;
        let mut h = DMatrix::zeros(1, STATE_DIM);
        h[(0, BIAS_ACCEL)] = 1.0;
        let m = meas(DVector::from_element(1, 0.5), h, DMatrix::identity(1, 1));
        let (s2, p2, acc) = ekf_update(&s, &p, &m, true).unwrap();
        assert!(acc);
        assert!((s2.bias_accel.x - s.bias_accel.x - 0.25).abs() < 1e-15);
        assert!((p2[(BIAS_ACCEL, BIAS_ACCEL)] - 0.5).abs() < 1e-15);
        assert_eq!(s2.bias_accel.y, s.bias_accel.y);
    }

    #[test]
    fn zero_jacobian_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = sample_state(&mut rng);
        let p = ErrorCovariance::from_column_slice(random_spd(&mut rng, STATE_DIM).as_slice());
        let m = meas(DVector::from_element(3, 0.3), DMatrix::zeros(3, STATE_DIM), DMatrix::identity(3, 3));
        let (s2, p2, _) = ekf_update(&s, &p, &m, false).unwrap();
        assert_eq!(s2, s);
        assert_eq!(p2, p);
    }

    #[test]
    fn singular_innovation_is_degenerate() {
        let s = sample_state(&mut ChaCha8Rng::seed_from_u64(4));
        let p = ErrorCovariance::zeros();
        let m = meas(DVector::from_element(2, 0.1), DMatrix::zeros(2, STATE_DIM), DMatrix::zeros(2, 2));
        assert!(matches!(
            ekf_update(&s, &p, &m, true),
            Err(CalibError::DegenerateMeasurement(_))
        ));
        let mut bad = DMatrix::identity(2, 2);
        bad[(1, 1)] = 1e-14;
        let m = meas(DVector::from_element(2, 0.1), DMatrix::zeros(2, STATE_DIM), bad);
        assert!(matches!(
            ekf_update(&s, &p, &m, true),
            Err(CalibError::DegenerateMeasurement(_))
        ));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let s = sample_state(&mut ChaCha8Rng::seed_from_u64(5));
        let m = meas(DVector::zeros(2), DMatrix::zeros(2, 10), DMatrix::identity(2, 2));
        assert!(ekf_update(&s, &ErrorCovariance::identity(), &m, true).is_err());
    }

    #[test]
    fn gate_accepts_zero_and_rejects_outlier() {
        let s = DMatrix::identity(1, 1);
        assert!(chi_square_gate(&DVector::zeros(1), &s).unwrap());
        assert!(!chi_square_gate(&DVector::from_element(1, 3.5), &s).unwrap());
        assert!(chi_square_gate(&DVector::from_element(1, 2.9), &s).unwrap());
        assert!(matches!(
            chi_square_gate(&DVector::zeros(13), &DMatrix::identity(13, 13)),
            Err(CalibError::UnsupportedDimension(13))
        ));
    }

    #[test]
    fn gate_acceptance_rate_matches_quantile() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = random_spd(&mut rng, 6);
        let l = s.clone().cholesky().unwrap().l();
        let trials = 10_000;
        let mut accepted = 0;
        for _ in 0..trials {
            let z = DVector::from_fn(6, |_, _| StandardNormal.sample(&mut rng));
            if chi_square_gate(&(&l * z), &s).unwrap() {
                accepted += 1;
            }
        }
        let rate = accepted as f64 / trials as f64;
        assert!((rate - 0.997).abs() < 0.005, "rate {rate}");
    }

    #[test]
    fn gated_update_leaves_state() {
        let s = sample_state(&mut ChaCha8Rng::seed_from_u64(7));
        let mut p = ErrorCovariance::identity() * 1e-6;
        p[(0, 0)] = 1e-6;
        let mut h = DMatrix::zeros(1, STATE_DIM);
        h[(0, 0)] = 1.0;
        let m = meas(DVector::from_element(1, 10.0), h, DMatrix::identity(1, 1));
        let (s2, p2, acc) = ekf_update(&s, &p, &m, true).unwrap();
        assert!(!acc);
        assert_eq!(s2, s);
        assert_eq!(p2, p);
    }

    #[test]
    fn inject_zero_is_identity() {
        let s = sample_state(&mut ChaCha8Rng::seed_from_u64(8));
        assert_eq!(inject_error(&s, &ErrorVector::zeros()).imu_pose.trans, s.imu_pose.trans);
        let back = inject_error(&s, &ErrorVector::zeros());
        assert!(state_difference(&back, &s).norm() < 1e-15);
    }

    #[test]
    fn inject_block_isolation() {
        let s = sample_state(&mut ChaCha8Rng::seed_from_u64(9));
        let mut d = ErrorVector::zeros();
        d[BIAS_ACCEL] = 0.1;
        let out = inject_error(&s, &d);
        assert_eq!(out.bias_accel, s.bias_accel + Vector3::new(0.1, 0.0, 0.0));
        assert_eq!(out.imu_pose, s.imu_pose);
        assert_eq!(out.velocity, s.velocity);
        assert_eq!(out.bias_gyro, s.bias_gyro);
        assert_eq!(out.extr_lidar, s.extr_lidar);
        assert_eq!(out.extr_cam, s.extr_cam);
        assert_eq!(out.anchor_pose, s.anchor_pose);
    }

    #[test]
    fn inject_then_negate() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s = sample_state(&mut rng);
        for _ in 0..100 {
            let dir = ErrorVector::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            // Vector blocks and pure-rotation/pure-translation pose blocks are
            // exact inverses.
            let mut d = dir.normalize() * 1e-2;
            for b in [IMU_POS, LIDAR_POS, CAM_POS] {
                d.fixed_rows_mut::<3>(b).fill(0.0);
            }
            let back = inject_error(&inject_error(&s, &d), &(-d));
            assert!(state_difference(&back, &s).norm() < 1e-9);
            // Mixed pose blocks leave a second-order translation term
            // R (I - Exp(phi)) rho, bounded by |phi| |rho|.
            let d = dir.normalize() * 1e-2;
            let back = inject_error(&inject_error(&s, &d), &(-d));
            let mut bound = 1e-12;
            for (r, t) in [(IMU_ROT, IMU_POS), (LIDAR_ROT, LIDAR_POS), (CAM_ROT, CAM_POS)] {
                bound += d.fixed_rows::<3>(r).norm() * d.fixed_rows::<3>(t).norm();
            }
            assert!(state_difference(&back, &s).norm() <= bound);
            // At 1e-5 the same property holds to 1e-9.
            let d = dir.normalize() * 1e-5;
            let back = inject_error(&inject_error(&s, &d), &(-d));
            assert!(state_difference(&back, &s).norm() < 1e-9);
        }
    }

    #[test]
    fn joseph_form_matches_textbook_and_stays_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = 8;
            let p = random_spd(&mut rng, n);
            let h = DMatrix::from_fn(3, n, |_, _| rng.gen_range(-1.0..1.0));
            let r = random_spd(&mut rng, 3) * 0.1;
            let m = meas(DVector::zeros(3), h.clone(), r.clone());
            let c = kalman_correct(&p, &m, false).unwrap();
            let s = &h * &p * h.transpose() + &r;
            let k = &p * h.transpose() * s.try_inverse().unwrap();
            let textbook = (DMatrix::identity(n, n) - &k * &h) * &p;
            assert!((&c.cov - &textbook).amax() < 1e-9);
            // A slightly wrong gain still yields a PSD covariance in Joseph form.
            let kp = &k + DMatrix::from_fn(n, 3, |_, _| rng.gen_range(-1e-6..1e-6));
            let ikh = DMatrix::identity(n, n) - &kp * &h;
            let joseph = &ikh * &p * ikh.transpose() + &kp * &r * kp.transpose();
            let eig = joseph.symmetric_eigenvalues();
            assert!(eig.min() > -1e-12);
        }
    }
}
