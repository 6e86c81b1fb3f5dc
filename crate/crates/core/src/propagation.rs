//! IMU mechanization and error-state covariance propagation.
//!
//! The nominal state is integrated with a midpoint rule on the bias-corrected
//! samples at both ends of the interval:
//!
//! ```text
//! w    = (w0 + w1) / 2 - bg
//! R1   = R Exp(w dt)
//! a    = (R (a0 - ba) + R1 (a1 - ba)) / 2 + g
//! v1   = v + a dt
//! p1   = p + v dt + a dt^2 / 2
//! ```
//!
//! The transition returned alongside is the exact first-order Jacobian of
//! this discrete map in the filter's error coordinates, so it agrees with
//! finite differences of the integrator itself.

use std::collections::VecDeque;

use nalgebra::{Matrix3, SMatrix, Vector3};

use crate::error::{CalibError, Result};
use crate::filter::{
    ErrorCovariance, FilterState, Transition, BIAS_ACCEL, BIAS_GYRO, IMU_DIM, IMU_POS, IMU_ROT, STATE_DIM, VEL,
};
use crate::geometry::{hat, right_jacobian, Pose, Rotation};

/// Largest propagation interval accepted before the stream is considered
/// broken.
pub const MAX_DT: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuSample {
    pub stamp: f64,
    /// Body angular rate, rad/s.
    pub gyro: Vector3<f64>,
    /// Body specific force, m/s^2.
    pub accel: Vector3<f64>,
}

impl ImuSample {
    pub fn new(stamp: f64, gyro: Vector3<f64>, accel: Vector3<f64>) -> Self {
        ImuSample { stamp, gyro, accel }
    }

    /// Linear interpolation between two samples.
    pub fn lerp(a: &ImuSample, b: &ImuSample, stamp: f64) -> ImuSample {
        let s = if b.stamp > a.stamp {
            (stamp - a.stamp) / (b.stamp - a.stamp)
        } else {
            0.0
        };
        ImuSample {
            stamp,
            gyro: a.gyro + (b.gyro - a.gyro) * s,
            accel: a.accel + (b.accel - a.accel) * s,
        }
    }
}

/// Continuous-time noise densities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuNoiseModel {
    /// rad/s/sqrt(Hz)
    pub sigma_g: f64,
    /// m/s^2/sqrt(Hz)
    pub sigma_a: f64,
    /// rad/s^2/sqrt(Hz)
    pub sigma_bg: f64,
    /// m/s^3/sqrt(Hz)
    pub sigma_ba: f64,
    pub gravity: Vector3<f64>,
}

impl Default for ImuNoiseModel {
    /// Tactical-grade MEMS figures in the range of a VN-300.
    fn default() -> Self {
        ImuNoiseModel {
            sigma_g: 6.1e-5,
            sigma_a: 1.4e-3,
            sigma_bg: 1.0e-5,
            sigma_ba: 1.0e-4,
            gravity: Vector3::new(0.0, 0.0, -9.81),
        }
    }
}

impl ImuNoiseModel {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma_g", self.sigma_g),
            ("sigma_a", self.sigma_a),
            ("sigma_bg", self.sigma_bg),
            ("sigma_ba", self.sigma_ba),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CalibError::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Propagated {
    pub state: FilterState,
    pub cov: ErrorCovariance,
    pub transition: Transition,
}

type Block15 = SMatrix<f64, IMU_DIM, IMU_DIM>;

fn put(m: &mut Block15, r: usize, c: usize, b: &Matrix3<f64>) {
    m.fixed_view_mut::<3, 3>(r, c).copy_from(b);
}

/// Integrates the nominal state from `s0` to `s1` and propagates the
/// covariance.
pub fn propagate(
    state: &FilterState,
    cov: &ErrorCovariance,
    s0: &ImuSample,
    s1: &ImuSample,
    noise: &ImuNoiseModel,
) -> Result<Propagated> {
    let dt = s1.stamp - s0.stamp;
    if !(dt > 0.0) {
        return Err(CalibError::InvalidInterval(dt));
    }
    if dt > MAX_DT {
        return Err(CalibError::StreamGap(dt));
    }
    let (nominal, transition15) = integrate(state, s0, s1, dt, &noise.gravity);

    let mut q = [0.0; IMU_DIM];
    let dt3 = dt * dt * dt;
    for i in 0..3 {
        q[IMU_ROT + i] = noise.sigma_g.powi(2) * dt;
        q[IMU_POS + i] = noise.sigma_a.powi(2) * dt3 / 4.0;
        q[VEL + i] = noise.sigma_a.powi(2) * dt;
        q[BIAS_GYRO + i] = noise.sigma_bg.powi(2) * dt;
        q[BIAS_ACCEL + i] = noise.sigma_ba.powi(2) * dt;
    }

    // Only the IMU block of the transition differs from identity.
    let a = &transition15;
    let p11 = cov.fixed_view::<IMU_DIM, IMU_DIM>(0, 0);
    let p12 = cov.fixed_view::<IMU_DIM, { STATE_DIM - IMU_DIM }>(0, IMU_DIM);
    let mut new_cov = *cov;
    let mut top = a * p11 * a.transpose();
    for (i, qi) in q.iter().enumerate() {
        top[(i, i)] += qi;
    }
    let cross = a * p12;
    new_cov.fixed_view_mut::<IMU_DIM, IMU_DIM>(0, 0).copy_from(&top);
    new_cov
        .fixed_view_mut::<IMU_DIM, { STATE_DIM - IMU_DIM }>(0, IMU_DIM)
        .copy_from(&cross);
    new_cov
        .fixed_view_mut::<{ STATE_DIM - IMU_DIM }, IMU_DIM>(IMU_DIM, 0)
        .copy_from(&cross.transpose());
    crate::filter::symmetrize(&mut new_cov);

    let mut transition = Transition::identity();
    transition.fixed_view_mut::<IMU_DIM, IMU_DIM>(0, 0).copy_from(&transition15);
    Ok(Propagated {
        state: nominal,
        cov: new_cov,
        transition,
    })
}

/// Nominal integration and its error-state Jacobian (IMU block only).
fn integrate(
    state: &FilterState,
    s0: &ImuSample,
    s1: &ImuSample,
    dt: f64,
    gravity: &Vector3<f64>,
) -> (FilterState, Block15) {
    let rot0 = state.imu_pose.rot;
    let w = 0.5 * (s0.gyro + s1.gyro) - state.bias_gyro;
    let dphi = w * dt;
    let delta_rot = Rotation::exp(&dphi);
    let rot1 = rot0 * delta_rot;
    let a0 = s0.accel - state.bias_accel;
    let a1 = s1.accel - state.bias_accel;
    let r0 = rot0.matrix();
    let r1 = rot1.matrix();
    let acc = 0.5 * (r0 * a0 + r1 * a1) + gravity;
    let v1 = state.velocity + acc * dt;
    let p1 = state.imu_pose.trans + state.velocity * dt + 0.5 * acc * dt * dt;

    let mut next = state.clone();
    next.imu_pose = Pose::new(rot1, p1);
    next.velocity = v1;
    next.stamp = s1.stamp;

    // dtheta1 = dR' dtheta - Jr(w dt) dt dbg
    let drt = delta_rot.matrix().transpose();
    let g_bg = -right_jacobian(&dphi) * dt;
    // Sensitivities of the averaged global acceleration.
    let da_dtheta = -0.5 * (r0 * hat(&a0) + r1 * hat(&a1) * drt);
    let da_dbg = -0.5 * r1 * hat(&a1) * g_bg;
    let da_dba = -0.5 * (r0 + r1);
    let r1t = r1.transpose();
    let half_dt2 = 0.5 * dt * dt;

    let mut phi = Block15::identity();
    put(&mut phi, IMU_ROT, IMU_ROT, &drt);
    put(&mut phi, IMU_ROT, BIAS_GYRO, &g_bg);
    put(&mut phi, IMU_POS, IMU_ROT, &(half_dt2 * r1t * da_dtheta));
    put(&mut phi, IMU_POS, IMU_POS, &drt);
    put(&mut phi, IMU_POS, VEL, &(dt * r1t));
    put(&mut phi, IMU_POS, BIAS_GYRO, &(half_dt2 * r1t * da_dbg));
    put(&mut phi, IMU_POS, BIAS_ACCEL, &(half_dt2 * r1t * da_dba));
    put(&mut phi, VEL, IMU_ROT, &(dt * da_dtheta));
    put(&mut phi, VEL, BIAS_GYRO, &(dt * da_dbg));
    put(&mut phi, VEL, BIAS_ACCEL, &(dt * da_dba));
    (next, phi)
}

/// Nominal-only propagation, used by tests and trajectory checks.
pub fn integrate_nominal(state: &FilterState, s0: &ImuSample, s1: &ImuSample, gravity: &Vector3<f64>) -> FilterState {
    integrate(state, s0, s1, s1.stamp - s0.stamp, gravity).0
}

/// Time-indexed IMU poses for interpolation, trimmed to a horizon.
#[derive(Clone, Debug, Default)]
pub struct TrajectoryBuffer {
    entries: VecDeque<(f64, Pose)>,
    horizon: f64,
}

impl TrajectoryBuffer {
    pub fn new(horizon: f64) -> Self {
        TrajectoryBuffer {
            entries: VecDeque::new(),
            horizon,
        }
    }

    /// Unbounded buffer built from a list of knots.
    pub fn from_knots(knots: impl IntoIterator<Item = (f64, Pose)>) -> Self {
        let mut b = TrajectoryBuffer::new(f64::INFINITY);
        for (t, p) in knots {
            b.push(t, p);
        }
        b
    }

    pub fn push(&mut self, stamp: f64, pose: Pose) {
        if let Some(last) = self.entries.back_mut() {
            if stamp <= last.0 {
                // Same instant (an update re-expressed the pose): replace.
                last.1 = pose;
                return;
            }
        }
        self.entries.push_back((stamp, pose));
        let oldest = stamp - self.horizon;
        while self.entries.len() > 2 && self.entries[1].0 <= oldest {
            self.entries.pop_front();
        }
    }

    /// Left-multiplies every stored pose.
    pub fn shift(&mut self, by: &Pose) {
        for e in self.entries.iter_mut() {
            e.1 = by.compose(&e.1);
        }
    }

    pub fn span(&self) -> Option<(f64, f64)> {
        Some((self.entries.front()?.0, self.entries.back()?.0))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn knots(&self) -> impl Iterator<Item = &(f64, Pose)> {
        self.entries.iter()
    }

    /// Copy of the knots needed to interpolate anywhere in `[t0, t1]`.
    pub fn segment(&self, t0: f64, t1: f64) -> Result<TrajectoryBuffer> {
        self.check_span(t0)?;
        self.check_span(t1)?;
        let lo = self.entries.partition_point(|e| e.0 <= t0).saturating_sub(1);
        let hi = self.entries.partition_point(|e| e.0 < t1).min(self.entries.len() - 1);
        Ok(TrajectoryBuffer::from_knots(
            self.entries.range(lo..=hi).copied(),
        ))
    }

    fn check_span(&self, t: f64) -> Result<()> {
        let (start, end) = self.span().unwrap_or((f64::NAN, f64::NAN));
        if !(t >= start - 1e-9 && t <= end + 1e-9) {
            return Err(CalibError::Extrapolation { stamp: t, start, end });
        }
        Ok(())
    }

    /// Pose at `t`: translation linear, rotation along the geodesic between
    /// the bracketing knots.
    pub fn interpolate(&self, t: f64) -> Result<Pose> {
        self.check_span(t)?;
        let idx = self.entries.partition_point(|e| e.0 < t);
        if idx == 0 {
            return Ok(self.entries[0].1);
        }
        if idx >= self.entries.len() {
            return Ok(self.entries[self.entries.len() - 1].1);
        }
        let (t1, p1) = self.entries[idx];
        if t1 == t {
            return Ok(p1);
        }
        let (t0, p0) = self.entries[idx - 1];
        let s = (t - t0) / (t1 - t0);
        let rel = (p0.rot.inverse() * p1.rot).log();
        Ok(Pose::new(
            p0.rot * Rotation::exp(&(rel * s)),
            p0.trans + (p1.trans - p0.trans) * s,
        ))
    }
}

pub fn interpolate_pose(t: f64, buffer: &TrajectoryBuffer) -> Result<Pose> {
    buffer.interpolate(t)
}
