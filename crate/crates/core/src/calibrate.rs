//! The calibration event loop: IMU propagation interleaved with camera,
//! LiDAR and plane-pair updates in stamp order.

use std::collections::HashMap;

use crate::camera::{camera_imu_residual, camera_plane_params, solve_board_pose, MIN_CORNERS};
use crate::config::Config;
use crate::dataset::CalibDataset;
use crate::error::{CalibError, Result};
use crate::filter::{
    ErrorCovariance, Filter, FilterState, UpdateOutcome, BIAS_ACCEL, BIAS_GYRO, CAM_POS, CAM_ROT, IMU_POS,
    IMU_ROT, LIDAR_POS, LIDAR_ROT, STATE_DIM, VEL,
};
use crate::geometry::Pose;
use crate::icp::{icp_against_map, TargetMap};
use crate::lidar::{lidar_imu_residual, predict_lidar_pose, LidarNoise};
use crate::planar::{pair_by_stamp, planar_update, PlaneObservation};
use crate::propagation::{ImuSample, TrajectoryBuffer, MAX_DT};
use crate::report::{daisy_chain, CalibReport, Mode, PoseError, TruthErrors, UpdateStats};
use crate::scan::{fit_plane_ransac, range_gate, undistort_scan, LidarScan};

/// Which measurement types a run applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UpdateFlags {
    pub camera: bool,
    pub lidar: bool,
    pub planar: bool,
}

impl UpdateFlags {
    pub fn for_mode(mode: Mode) -> UpdateFlags {
        match mode {
            Mode::CameraImu => UpdateFlags {
                camera: true,
                lidar: false,
                planar: false,
            },
            Mode::LidarImu => UpdateFlags {
                camera: false,
                lidar: true,
                planar: false,
            },
            Mode::Joint => UpdateFlags {
                camera: true,
                lidar: true,
                planar: true,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateKind {
    Camera,
    Lidar,
    Plane,
}

/// Initial covariance from the configured priors.
pub fn initial_covariance(cfg: &Config) -> ErrorCovariance {
    let mut p = ErrorCovariance::zeros();
    for (off, sigma) in [
        (IMU_ROT, cfg.prior_sigma_rot),
        (IMU_POS, cfg.prior_sigma_pos),
        (VEL, cfg.prior_sigma_vel),
        (BIAS_GYRO, cfg.prior_sigma_bg),
        (BIAS_ACCEL, cfg.prior_sigma_ba),
        (LIDAR_ROT, cfg.prior_sigma_ext_rot),
        (LIDAR_POS, cfg.prior_sigma_ext_trans),
        (CAM_ROT, cfg.prior_sigma_ext_rot),
        (CAM_POS, cfg.prior_sigma_ext_trans),
    ] {
        for k in 0..3 {
            p[(off + k, off + k)] = sigma * sigma;
        }
    }
    p
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    Frame,
    Scan,
}

struct Event {
    stamp: f64,
    kind: EventKind,
    index: usize,
}

/// The first scan, kept raw so the map can be rebuilt when `T^I_L` moves.
struct Anchor {
    raw: LidarScan,
    trajectory: TrajectoryBuffer,
    t_il: Pose,
    map: TargetMap,
    /// IMU rotation angle and translation norm over the anchor scan.
    motion: (f64, f64),
}

fn scan_motion(trajectory: &TrajectoryBuffer, t0: f64, t1: f64) -> (f64, f64) {
    match (trajectory.interpolate(t0), trajectory.interpolate(t1)) {
        (Ok(a), Ok(b)) => {
            let d = a.inverse().compose(&b);
            (d.rot.angle(), d.trans.norm())
        }
        _ => (0.0, 0.0),
    }
}

/// Scan-match noise widened by the undistortion error an uncertain `T^I_L`
/// causes over the motion of the current and anchor scans.
fn motion_noise(cfg: &Config, filter: &Filter, raw: &LidarScan, anchor_motion: (f64, f64)) -> LidarNoise {
    let (rot, trans) = scan_motion(&filter.trajectory, raw.stamp_start, raw.stamp_end);
    let (rot, trans) = (rot + anchor_motion.0, trans + anchor_motion.1);
    let sd = |off: usize| (0..3).map(|k| filter.cov[(off + k, off + k)]).fold(0.0, f64::max).sqrt();
    let (s_rot, s_trans) = (sd(LIDAR_ROT), sd(LIDAR_POS));
    let g = cfg.lidar_motion_gain;
    let mut noise = cfg.lidar_noise.clone();
    noise.sigma_rot = noise.sigma_rot.hypot(g * rot * s_rot);
    noise.sigma_trans = noise.sigma_trans.hypot(g * (trans * s_rot + rot * s_trans));
    noise
}

fn skippable(e: &CalibError) -> bool {
    matches!(
        e,
        CalibError::InsufficientObservations { .. }
            | CalibError::MeasurementQuality { .. }
            | CalibError::InsufficientOverlap(_)
            | CalibError::DegenerateGeometry(_)
            | CalibError::DegenerateMeasurement(_)
            | CalibError::SignFault(_)
            | CalibError::HistoryExpired { .. }
            | CalibError::Extrapolation { .. }
            | CalibError::BehindCamera(_)
    )
}

fn pose_moved(a: &Pose, b: &Pose) -> f64 {
    let (r, t) = a.distance(b);
    r.max(t)
}

struct Run<'a> {
    ds: &'a CalibDataset,
    cfg: &'a Config,
    flags: UpdateFlags,
    filter: Filter,
    /// IMU sample at the filter's stamp (possibly interpolated).
    current: ImuSample,
    next_imu: usize,
    clock: f64,
    anchor: Option<Anchor>,
    lidar_planes: HashMap<usize, PlaneObservation>,
    camera_planes: HashMap<usize, PlaneObservation>,
    scan_partner: HashMap<usize, usize>,
    frame_partner: HashMap<usize, usize>,
    stats: [UpdateStats; 3],
}

impl Run<'_> {
    fn propagate_to(&mut self, t: f64) -> Result<()> {
        let imu = &self.ds.imu;
        while self.next_imu < imu.len() && imu[self.next_imu].stamp <= t {
            let s = imu[self.next_imu];
            self.step(s)?;
            self.next_imu += 1;
        }
        if t > self.current.stamp {
            let Some(next) = imu.get(self.next_imu) else {
                return Err(CalibError::DatasetFault(format!("stamp {t} beyond the IMU stream")));
            };
            let s = ImuSample::lerp(&self.current, next, t);
            self.step(s)?;
        }
        Ok(())
    }

    /// Propagates to `to`, splitting intervals longer than the integrator
    /// limit.
    fn step(&mut self, to: ImuSample) -> Result<()> {
        let dt = to.stamp - self.current.stamp;
        if dt <= 0.0 {
            return Ok(());
        }
        if dt > self.cfg.max_stream_gap {
            return Err(CalibError::DatasetFault(format!(
                "IMU gap of {dt} s before stamp {}",
                to.stamp
            )));
        }
        let pieces = (dt / MAX_DT).ceil().max(1.0) as usize;
        let from = self.current;
        for k in 1..=pieces {
            let s = if k == pieces {
                to
            } else {
                ImuSample::lerp(&from, &to, from.stamp + dt * k as f64 / pieces as f64)
            };
            self.filter.propagate(&self.current, &s)?;
            self.current = s;
        }
        Ok(())
    }

    fn record(
        &mut self,
        kind: UpdateKind,
        result: Result<UpdateOutcome>,
        observer: &mut dyn FnMut(UpdateKind, &Filter),
    ) -> Result<()> {
        let slot = &mut self.stats[kind as usize];
        slot.attempted += 1;
        match result {
            Ok(o) if o.accepted => {
                slot.accepted += 1;
                slot.mahalanobis_sum += o.mahalanobis;
                self.filter.check_divergence(self.cfg.divergence_factor)?;
                observer(kind, &self.filter);
            }
            Ok(_) => slot.gated += 1,
            Err(e) if skippable(&e) => slot.skipped += 1,
            Err(e) => return Err(e),
        }
        Ok(())
    }

    fn frame(&mut self, index: usize, observer: &mut dyn FnMut(UpdateKind, &Filter)) -> Result<()> {
        let obs = &self.ds.frames[index];
        let meta = &self.ds.meta;
        if self.flags.camera {
            let sigma = self.cfg.sigma_px;
            let mut model = |s: &FilterState| camera_imu_residual(obs, s, &meta.board, &meta.intrinsics, sigma);
            let gate = 2 * obs.corners.len() <= 12;
            let r = self.filter.update_iterated(&mut model, gate);
            self.record(UpdateKind::Camera, r, observer)?;
        }
        if self.flags.planar && self.frame_partner.contains_key(&index) {
            if let Ok(board_in_camera) = solve_board_pose(obs, &meta.board, &meta.intrinsics) {
                self.camera_planes
                    .insert(index, camera_plane_params(&board_in_camera, obs.stamp));
                let scan = self.frame_partner[&index];
                self.try_plane_pair(scan, index, observer)?;
            }
        }
        Ok(())
    }

    fn try_plane_pair(
        &mut self,
        scan: usize,
        frame: usize,
        observer: &mut dyn FnMut(UpdateKind, &Filter),
    ) -> Result<()> {
        let (Some(l), Some(c)) = (self.lidar_planes.remove(&scan), self.camera_planes.get(&frame).copied()) else {
            return Ok(());
        };
        self.camera_planes.remove(&frame);
        let r = planar_update(&mut self.filter, &l, &c, &self.cfg.plane_noise, true);
        self.record(UpdateKind::Plane, r, observer)
    }

    fn scan(&mut self, index: usize, observer: &mut dyn FnMut(UpdateKind, &Filter)) -> Result<()> {
        let raw = &self.ds.scans[index];
        let t_il = self.filter.state.extr_lidar;
        let undistorted = match undistort_scan(raw, &self.filter.trajectory, &t_il) {
            Ok(s) => s,
            Err(e) if skippable(&e) => {
                for (flag, k) in [(self.flags.lidar, 1), (self.flags.planar, 2)] {
                    if flag {
                        self.stats[k].attempted += 1;
                        self.stats[k].skipped += 1;
                    }
                }
                return Ok(());
            }
            Err(e) => return Err(e),
        };

        if self.flags.planar && self.scan_partner.contains_key(&index) {
            let near = range_gate(&undistorted.positions(), self.cfg.range_min, self.cfg.range_max);
            let plane = fit_plane_ransac(&near, self.cfg.ransac_iterations, self.cfg.ransac_tol, self.cfg.seed ^ index as u64);
            if let Ok(mut p) = plane {
                if p.inlier_count >= self.cfg.min_plane_inliers {
                    p.stamp = raw.stamp_end;
                    self.lidar_planes.insert(index, p);
                }
            }
        }

        if self.flags.lidar {
            self.lidar_update(raw, undistorted, observer)?;
        }

        if let Some(&frame) = self.scan_partner.get(&index) {
            if self.lidar_planes.contains_key(&index) {
                self.try_plane_pair(index, frame, observer)?;
            }
        }
        Ok(())
    }

    fn lidar_update(
        &mut self,
        raw: &LidarScan,
        undistorted: LidarScan,
        observer: &mut dyn FnMut(UpdateKind, &Filter),
    ) -> Result<()> {
        let t_il = self.filter.state.extr_lidar;
        let Some(anchor) = self.anchor.as_mut() else {
            let Some((start, _)) = self.filter.trajectory.span() else {
                return Ok(());
            };
            let trajectory = self.filter.trajectory.segment(start.max(raw.stamp_start), raw.stamp_end)?;
            self.filter.state.anchor_pose = Some(self.filter.state.imu_pose);
            self.anchor = Some(Anchor {
                raw: raw.clone(),
                motion: scan_motion(&trajectory, start.max(raw.stamp_start), raw.stamp_end),
                trajectory,
                t_il,
                map: TargetMap::build(undistorted.positions(), &self.cfg.icp),
            });
            return Ok(());
        };
        if pose_moved(&anchor.t_il, &t_il) > self.cfg.anchor_refresh {
            let again = undistort_scan(&anchor.raw, &anchor.trajectory, &t_il)?;
            anchor.map = TargetMap::build(again.positions(), &self.cfg.icp);
            anchor.t_il = t_il;
        }
        let state = &self.filter.state;
        let anchor_pose = state.anchor_pose.ok_or(CalibError::AnchorUnset)?;
        let init = predict_lidar_pose(&anchor_pose, &state.imu_pose, &t_il);
        let noise = motion_noise(&self.cfg, &self.filter, raw, anchor.motion);
        let r = icp_against_map(&undistorted, &anchor.map, &init, &self.cfg.icp).and_then(|mut z| {
            z.stamp = raw.stamp_end;
            self.filter
                .update_iterated(&mut |s: &FilterState| lidar_imu_residual(&z, s, &noise), true)
        });
        self.record(UpdateKind::Lidar, r, observer)
    }
}

/// Runs the filter over the whole dataset.
pub fn run_calibration(ds: &CalibDataset, cfg: &Config, mode: Mode) -> Result<CalibReport> {
    run_calibration_with(ds, cfg, mode, &mut |_, _| {})
}

/// Same as [`run_calibration`], calling `observer` after every accepted
/// update.
pub fn run_calibration_with(
    ds: &CalibDataset,
    cfg: &Config,
    mode: Mode,
    observer: &mut dyn FnMut(UpdateKind, &Filter),
) -> Result<CalibReport> {
    cfg.validate()?;
    ds.validate()?;
    let flags = UpdateFlags::for_mode(mode);
    let Some(first) = ds.imu.first().copied() else {
        return Err(CalibError::DatasetFault("empty IMU stream".into()));
    };
    let last_imu = ds.imu[ds.imu.len() - 1].stamp;
    for w in ds.imu.windows(2) {
        let gap = w[1].stamp - w[0].stamp;
        if gap > cfg.max_stream_gap {
            return Err(CalibError::DatasetFault(format!(
                "IMU gap of {gap} s at stamp {}",
                w[0].stamp
            )));
        }
    }

    let in_range = |t: f64| t >= first.stamp && t <= last_imu;
    let frames: Vec<usize> = (0..ds.frames.len())
        .filter(|i| i % cfg.frame_stride == 0 && in_range(ds.frames[*i].stamp))
        .collect();
    let scans: Vec<usize> = (0..ds.scans.len())
        .filter(|i| in_range(ds.scans[*i].stamp_start) && in_range(ds.scans[*i].stamp_end))
        .collect();

    let mut scan_partner = HashMap::new();
    let mut frame_partner = HashMap::new();
    if flags.planar {
        let plane_frames: Vec<usize> = frames
            .iter()
            .copied()
            .filter(|i| ds.frames[*i].corners.len() >= MIN_CORNERS)
            .collect();
        let ts: Vec<f64> = scans.iter().map(|i| ds.scans[*i].stamp_end).collect();
        let tf: Vec<f64> = plane_frames.iter().map(|i| ds.frames[*i].stamp).collect();
        for (a, b) in pair_by_stamp(&ts, &tf, cfg.pair_max_dt) {
            scan_partner.insert(scans[a], plane_frames[b]);
            frame_partner.insert(plane_frames[b], scans[a]);
        }
    }

    let mut events: Vec<Event> = Vec::new();
    if flags.camera || flags.planar {
        events.extend(frames.iter().map(|&i| Event {
            stamp: ds.frames[i].stamp,
            kind: EventKind::Frame,
            index: i,
        }));
    }
    if flags.lidar || flags.planar {
        events.extend(scans.iter().map(|&i| Event {
            stamp: ds.scans[i].stamp_end,
            kind: EventKind::Scan,
            index: i,
        }));
    }
    events.sort_by(|a, b| a.stamp.total_cmp(&b.stamp).then(a.kind.cmp(&b.kind)).then(a.index.cmp(&b.index)));

    let state = FilterState::new(
        ds.meta.initial_pose,
        ds.meta.initial_velocity,
        cfg.init_t_il,
        cfg.init_t_ic,
        first.stamp,
    );
    let mut run = Run {
        ds,
        cfg,
        flags,
        filter: Filter::new(state, initial_covariance(cfg), cfg.filter_config()),
        current: first,
        next_imu: 1,
        clock: first.stamp,
        anchor: None,
        lidar_planes: HashMap::new(),
        camera_planes: HashMap::new(),
        scan_partner,
        frame_partner,
        stats: [UpdateStats::default(); 3],
    };

    for ev in &events {
        if ev.stamp < run.clock {
            return Err(CalibError::DatasetFault(format!(
                "event at {} after clock reached {}",
                ev.stamp, run.clock
            )));
        }
        run.clock = ev.stamp;
        run.propagate_to(ev.stamp)?;
        match ev.kind {
            EventKind::Frame => run.frame(ev.index, observer)?,
            EventKind::Scan => run.scan(ev.index, observer)?,
        }
    }
    run.propagate_to(last_imu)?;

    let st = &run.filter.state;
    let truth = match (&ds.meta.truth_t_ic, &ds.meta.truth_t_il) {
        (Some(ic), Some(il)) => Some(TruthErrors {
            t_ic: PoseError::between(&st.extr_cam, ic),
            t_il: PoseError::between(&st.extr_lidar, il),
            t_cl: PoseError::between(&daisy_chain(&st.extr_cam, &st.extr_lidar), &daisy_chain(ic, il)),
        }),
        _ => None,
    };
    Ok(CalibReport {
        mode,
        t_ic: st.extr_cam,
        t_il: st.extr_lidar,
        cov_diag: (0..STATE_DIM).map(|i| run.filter.cov[(i, i)]).collect(),
        camera: run.stats[UpdateKind::Camera as usize],
        lidar: run.stats[UpdateKind::Lidar as usize],
        planar: run.stats[UpdateKind::Plane as usize],
        imu_samples: ds.imu.len(),
        frames: frames.len(),
        scans: scans.len(),
        span: (first.stamp, last_imu),
        truth,
    })
}
