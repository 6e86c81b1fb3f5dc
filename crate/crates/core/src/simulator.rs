//! Ground-truth rig simulation: a smooth excitation trajectory and the IMU,
//! camera and LiDAR streams a rig following it would record.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::camera::{project_corner, BoardGeometry, CameraIntrinsics, CornerObservationSet};
use crate::error::{CalibError, Result};
use crate::geometry::{right_jacobian, Pose, Rotation};
use crate::propagation::{ImuNoiseModel, ImuSample};
use crate::scan::{LidarScan, ScanPoint};

/// Sinusoidal excitation about every axis.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySpec {
    /// Translation amplitudes, meters.
    pub amplitudes: Vector3<f64>,
    /// Rotation-vector amplitudes, radians.
    pub angular_amplitudes: Vector3<f64>,
    /// Hz, translation axes first.
    pub frequencies: [f64; 6],
    /// Radians, translation axes first.
    pub phases: [f64; 6],
    /// Seconds.
    pub duration: f64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        TrajectorySpec {
            amplitudes: Vector3::repeat(0.3),
            angular_amplitudes: Vector3::repeat(0.4),
            frequencies: [0.3, 0.38, 0.46, 0.54, 0.62, 0.7],
            phases: [0.0; 6],
            duration: 60.0,
        }
    }
}

/// Trajectory state at one instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectorySample {
    /// `T^G_I`
    pub pose: Pose,
    /// Global-frame velocity.
    pub velocity: Vector3<f64>,
    /// Body-frame angular rate.
    pub angular_rate: Vector3<f64>,
    /// Global-frame acceleration.
    pub acceleration: Vector3<f64>,
}

/// Closed-form pose and derivatives at `t`.
pub fn analytic_pose(spec: &TrajectorySpec, t: f64) -> Result<TrajectorySample> {
    if !(t >= -1e-9 && t <= spec.duration + 1e-9) {
        return Err(CalibError::InvalidArgument(format!(
            "time {t} outside [0, {}]",
            spec.duration
        )));
    }
    let mut pos = Vector3::zeros();
    let mut vel = Vector3::zeros();
    let mut acc = Vector3::zeros();
    let mut phi = Vector3::zeros();
    let mut phi_dot = Vector3::zeros();
    for k in 0..3 {
        let w = 2.0 * PI * spec.frequencies[k];
        let arg = w * t + spec.phases[k];
        let a = spec.amplitudes[k];
        pos[k] = a * arg.sin();
        vel[k] = a * w * arg.cos();
        acc[k] = -a * w * w * arg.sin();

        let w = 2.0 * PI * spec.frequencies[k + 3];
        let arg = w * t + spec.phases[k + 3];
        let a = spec.angular_amplitudes[k];
        phi[k] = a * arg.sin();
        phi_dot[k] = a * w * arg.cos();
    }
    Ok(TrajectorySample {
        pose: Pose::new(Rotation::exp(&phi), pos),
        velocity: vel,
        angular_rate: right_jacobian(&phi) * phi_dot,
        acceleration: acc,
    })
}

/// A wall: the infinite plane `n'x + d = 0` in the global frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScenePlane {
    pub normal: Vector3<f64>,
    pub offset: f64,
}

/// Spinning multi-beam LiDAR.
#[derive(Clone, Debug, PartialEq)]
pub struct LidarModel {
    pub rings: usize,
    /// Elevation of the lowest and highest ring, degrees.
    pub min_elevation: f64,
    pub max_elevation: f64,
    /// Firings per revolution.
    pub azimuth_steps: usize,
    pub max_range: f64,
}

impl Default for LidarModel {
    fn default() -> Self {
        LidarModel {
            rings: 64,
            min_elevation: -22.5,
            max_elevation: 22.5,
            azimuth_steps: 360,
            max_range: 60.0,
        }
    }
}

/// Everything the simulator needs besides the trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct RigConfig {
    pub true_t_il: Pose,
    pub true_t_ic: Pose,
    pub imu_rate: f64,
    pub cam_rate: f64,
    pub lidar_rate: f64,
    pub imu_noise: ImuNoiseModel,
    /// Pixel noise, pixels.
    pub sigma_px: f64,
    /// Range noise along each ray, meters.
    pub sigma_range: f64,
    pub intrinsics: CameraIntrinsics,
    pub board: BoardGeometry,
    pub scene: Vec<ScenePlane>,
    pub lidar: LidarModel,
    pub seed: u64,
}

/// Camera-IMU extrinsic used as ground truth (a Kalibr estimate for a real rig).
pub fn default_t_ic() -> Pose {
    Pose::new(
        Rotation::from_rpy_degrees(89.0547, 1.0927, 90.8185),
        Vector3::new(0.0727, 0.1254, -0.0756),
    )
}

/// LiDAR-IMU extrinsic used as ground truth. The LiDAR faces backwards so the
/// board lies mid-sweep.
pub fn default_t_il() -> Pose {
    Pose::new(
        Rotation::from_rpy_degrees(1.2, -2.1, 176.5),
        Vector3::new(-0.05, 0.08, 0.12),
    )
}

/// A closed hall around the board: four walls 20 m out, floor and ceiling
/// 5 m out, all beyond the plane-extraction range gate as seen from the rig.
pub fn default_scene() -> Vec<ScenePlane> {
    let wall = |normal: Vector3<f64>, offset: f64| ScenePlane { normal, offset };
    vec![
        wall(Vector3::x(), 20.0),
        wall(-Vector3::x(), 20.0),
        wall(Vector3::y(), 20.0),
        wall(-Vector3::y(), 20.0),
        wall(Vector3::z(), 5.0),
        wall(-Vector3::z(), 5.0),
    ]
}

impl Default for RigConfig {
    fn default() -> Self {
        RigConfig {
            true_t_il: default_t_il(),
            true_t_ic: default_t_ic(),
            imu_rate: 400.0,
            cam_rate: 30.0,
            lidar_rate: 10.0,
            imu_noise: ImuNoiseModel::default(),
            sigma_px: 0.5,
            sigma_range: 0.01,
            intrinsics: CameraIntrinsics::default(),
            board: BoardGeometry::default(),
            scene: default_scene(),
            lidar: LidarModel::default(),
            seed: 0,
        }
    }
}

impl RigConfig {
    /// Same rig with every noise source switched off.
    pub fn noise_free(mut self) -> Self {
        self.imu_noise.sigma_g = 0.0;
        self.imu_noise.sigma_a = 0.0;
        self.imu_noise.sigma_bg = 0.0;
        self.imu_noise.sigma_ba = 0.0;
        self.sigma_px = 0.0;
        self.sigma_range = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.imu_rate > 0.0
            && self.cam_rate > 0.0
            && self.lidar_rate > 0.0
            && self.cam_rate <= self.imu_rate
            && self.lidar_rate <= self.cam_rate
            && self.sigma_px >= 0.0
            && self.sigma_range >= 0.0;
        if !ok {
            return Err(CalibError::InvalidArgument("inconsistent rig rates or noise".into()));
        }
        self.intrinsics.validate()
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian3(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::from_fn(|_, _| StandardNormal.sample(rng))
}

fn sample_count(duration: f64, rate: f64) -> usize {
    (duration * rate + 1e-9).floor() as usize
}

/// Per-sample corrections `c` with `(c[k] + c[k+1]) / 2 = defect[k]`, the
/// smooth solution of the two-term recursion.
fn midpoint_corrections(defect: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    let mut c = Vec::with_capacity(defect.len() + 1);
    c.push(match defect {
        [] => Vector3::zeros(),
        [e] => *e,
        [e0, e1, ..] => (e0 * 3.0 - e1) * 0.5,
    });
    for e in defect {
        let last = c[c.len() - 1];
        c.push(e * 2.0 - last);
    }
    c
}

/// IMU samples at `imu_rate` over the whole trajectory, biases drifting as
/// random walks from zero.
///
/// The noise-free part of each sample is the true body rate and specific
/// force plus a correction of order `dt^2` chosen so that the midpoint
/// mechanization reproduces the trajectory's rotation and velocity at every
/// sample instant.
pub fn synth_imu(spec: &TrajectorySpec, rig: &RigConfig) -> Result<Vec<ImuSample>> {
    let mut rng = stream_rng(rig.seed, 1);
    let n = &rig.imu_noise;
    let dt = 1.0 / rig.imu_rate;
    let count = sample_count(spec.duration, rig.imu_rate);
    let truth: Vec<TrajectorySample> = (0..=count)
        .map(|k| analytic_pose(spec, k as f64 * dt))
        .collect::<Result<_>>()?;

    let mut rate_defect = Vec::with_capacity(count);
    let mut force_defect = Vec::with_capacity(count);
    for w in truth.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let step = (a.pose.rot.inverse() * b.pose.rot).log() / dt;
        rate_defect.push(step - (a.angular_rate + b.angular_rate) * 0.5);
        let mean_force = (b.velocity - a.velocity) / dt - n.gravity;
        let ends = (a.acceleration + b.acceleration) * 0.5 - n.gravity;
        force_defect.push(mean_force - ends);
    }
    let rate_fix = midpoint_corrections(&rate_defect);
    let force_fix = midpoint_corrections(&force_defect);

    let white_g = n.sigma_g * rig.imu_rate.sqrt();
    let white_a = n.sigma_a * rig.imu_rate.sqrt();
    let walk_g = n.sigma_bg * dt.sqrt();
    let walk_a = n.sigma_ba * dt.sqrt();
    let mut bg = Vector3::zeros();
    let mut ba = Vector3::zeros();
    let mut out = Vec::with_capacity(count + 1);
    for (k, s) in truth.iter().enumerate() {
        let specific = s.pose.rot.inverse_rotate(&(s.acceleration - n.gravity + force_fix[k]));
        let gyro = s.angular_rate + rate_fix[k] + bg + gaussian3(&mut rng) * white_g;
        let accel = specific + ba + gaussian3(&mut rng) * white_a;
        out.push(ImuSample::new(k as f64 * dt, gyro, accel));
        bg += gaussian3(&mut rng) * walk_g;
        ba += gaussian3(&mut rng) * walk_a;
    }
    Ok(out)
}

/// A synthesized camera frame and the true board pose in the camera.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraFrame {
    pub observation: CornerObservationSet,
    /// `T^C_B`
    pub board_in_camera: Pose,
}

/// Corner detections at `cam_rate`. Frames in which the board is behind the
/// camera are kept with no corners.
pub fn synth_camera(spec: &TrajectorySpec, rig: &RigConfig) -> Result<Vec<CameraFrame>> {
    let mut rng = stream_rng(rig.seed, 2);
    let corners = rig.board.corner_positions();
    let count = sample_count(spec.duration, rig.cam_rate);
    let mut out = Vec::with_capacity(count + 1);
    for k in 0..=count {
        let t = k as f64 / rig.cam_rate;
        let pose = analytic_pose(spec, t)?.pose;
        let mut obs = Vec::new();
        for (i, x) in corners.iter().enumerate() {
            let Ok(px) = project_corner(&pose, &rig.true_t_ic, x, &rig.intrinsics) else {
                continue;
            };
            let noise: [f64; 2] = [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)];
            let px = px + nalgebra::Vector2::new(noise[0], noise[1]) * rig.sigma_px;
            if rig.intrinsics.contains(&px) {
                obs.push((i, px));
            }
        }
        out.push(CameraFrame {
            observation: CornerObservationSet {
                stamp: t,
                board_id: 0,
                corners: obs,
            },
            board_in_camera: pose.compose(&rig.true_t_ic).inverse().compose(&rig.board.pose),
        });
    }
    Ok(out)
}

/// Distance along the ray to the nearest surface, if any.
fn cast(origin: &Vector3<f64>, dir: &Vector3<f64>, rig: &RigConfig) -> Option<f64> {
    let mut best = f64::INFINITY;
    for w in &rig.scene {
        let denom = w.normal.dot(dir);
        if denom.abs() > 1e-12 {
            let t = -(w.normal.dot(origin) + w.offset) / denom;
            if t > 0.0 && t < best {
                best = t;
            }
        }
    }
    let b = &rig.board;
    let o = b.pose.inverse_transform_point(origin);
    let d = b.pose.rot.inverse_rotate(dir);
    if d.z.abs() > 1e-12 {
        let t = -o.z / d.z;
        if t > 0.0 && t < best && b.contains_local(&(o + d * t)) {
            best = t;
        }
    }
    (best <= rig.lidar.max_range).then_some(best)
}

/// Beam directions of one firing, lowest ring first.
fn firing_directions(model: &LidarModel, azimuth: f64) -> Vec<Vector3<f64>> {
    (0..model.rings)
        .map(|r| {
            let e = if model.rings > 1 {
                model.min_elevation + (model.max_elevation - model.min_elevation) * r as f64 / (model.rings - 1) as f64
            } else {
                0.5 * (model.min_elevation + model.max_elevation)
            }
            .to_radians();
            Vector3::new(e.cos() * azimuth.cos(), e.cos() * azimuth.sin(), e.sin())
        })
        .collect()
}

/// Scans at `lidar_rate`, each a full sweep ray-cast from the true LiDAR pose
/// at every firing instant.
pub fn synth_lidar(spec: &TrajectorySpec, rig: &RigConfig) -> Result<Vec<LidarScan>> {
    if rig.scene.is_empty() {
        return Err(CalibError::InvalidArgument("empty scene".into()));
    }
    let mut rng = stream_rng(rig.seed, 3);
    let period = 1.0 / rig.lidar_rate;
    let steps = rig.lidar.azimuth_steps.max(1);
    let firings: Vec<(f64, Vec<Vector3<f64>>)> = (0..steps)
        .map(|a| {
            let frac = a as f64 / steps as f64;
            (frac * period, firing_directions(&rig.lidar, 2.0 * PI * frac))
        })
        .collect();
    let count = sample_count(spec.duration, rig.lidar_rate);
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let start = k as f64 / rig.lidar_rate;
        let mut points = Vec::new();
        for (t_rel, dirs) in &firings {
            let t_gl = analytic_pose(spec, start + t_rel)?.pose.compose(&rig.true_t_il);
            for d in dirs {
                let Some(range) = cast(&t_gl.trans, &t_gl.rot.rotate(d), rig) else {
                    continue;
                };
                let noise: f64 = StandardNormal.sample(&mut rng);
                points.push(ScanPoint {
                    pos: d * (range + noise * rig.sigma_range),
                    t_rel: *t_rel,
                });
            }
        }
        out.push(LidarScan {
            stamp_start: start,
            stamp_end: (k + 1) as f64 / rig.lidar_rate,
            points,
        });
    }
    Ok(out)
}
