#![allow(dead_code)]

use nalgebra::{Matrix6, Vector3, Vector6};
use rigcal::camera::MIN_CORNERS;
use rigcal::config::Config;
use rigcal::dataset::CalibDataset;
use rigcal::filter::{Filter, CAM_ROT, LIDAR_ROT};
use rigcal::geometry::{Pose, Rotation};
use rigcal::overlay::{board_points, board_quad, alignment_metric, retime_scan, BoardExtraction};
use rigcal::planar::pair_by_stamp;
use rigcal::propagation::TrajectoryBuffer;
use rigcal::report::daisy_chain;
use rigcal::scan::undistort_scan;
use rigcal::simulator::{analytic_pose, RigConfig, TrajectorySpec};

/// `p` rotated 5 degrees about `axis` and shifted 5 cm along `dir`.
pub fn offset(p: &Pose, axis: Vector3<f64>, dir: Vector3<f64>) -> Pose {
    Pose::new(
        p.rot * Rotation::exp(&(axis.normalize() * 5f64.to_radians())),
        p.trans + dir.normalize() * 0.05,
    )
}

/// Default config with both extrinsic guesses 5 deg / 5 cm off the rig truth.
pub fn perturbed_config(rig: &RigConfig) -> Config {
    let mut cfg = Config::default();
    cfg.init_t_ic = offset(&rig.true_t_ic, Vector3::new(1.0, 2.0, -1.0), Vector3::new(1.0, -1.0, 1.0));
    cfg.init_t_il = offset(&rig.true_t_il, Vector3::new(-1.0, 1.0, 2.0), Vector3::new(-1.0, 1.0, 1.0));
    cfg
}

pub fn rig(seed: u64, noisy: bool) -> RigConfig {
    let rig = RigConfig {
        seed,
        ..RigConfig::default()
    };
    if noisy {
        rig
    } else {
        rig.noise_free()
    }
}

pub fn simulate(spec: &TrajectorySpec, rig: &RigConfig) -> CalibDataset {
    CalibDataset::simulate(spec, rig).expect("simulation")
}

pub fn short_spec(duration: f64) -> TrajectorySpec {
    TrajectorySpec {
        duration,
        ..TrajectorySpec::default()
    }
}

/// Ground-truth IMU poses sampled at `rate` over the whole trajectory.
pub fn truth_trajectory(spec: &TrajectorySpec, rate: f64) -> TrajectoryBuffer {
    let n = (spec.duration * rate).ceil() as usize;
    TrajectoryBuffer::from_knots((0..=n).map(|k| {
        let t = (k as f64 / rate).min(spec.duration);
        (t, analytic_pose(spec, t).expect("trajectory").pose)
    }))
}

/// Mean board alignment (pixels) over every scan that ends on a frame with
/// enough corners, projecting through the daisy-chained `T^C_L`.
pub fn overlay_score(
    ds: &CalibDataset,
    truth: &TrajectoryBuffer,
    t_ic: &Pose,
    t_il: &Pose,
    cfg: &Config,
) -> Option<f64> {
    let t_cl = daisy_chain(t_ic, t_il);
    let frames: Vec<usize> = (0..ds.frames.len())
        .filter(|&i| ds.frames[i].corners.len() >= MIN_CORNERS)
        .collect();
    let frame_stamps: Vec<f64> = frames.iter().map(|&i| ds.frames[i].stamp).collect();
    let scan_stamps: Vec<f64> = ds.scans.iter().map(|s| s.stamp_end).collect();
    let mut params = BoardExtraction::from_config(cfg);
    let mut sum = 0.0;
    let mut n = 0usize;
    for (si, fi) in pair_by_stamp(&scan_stamps, &frame_stamps, 1e-6) {
        let frame = &ds.frames[frames[fi]];
        let Ok(scan) = undistort_scan(&ds.scans[si], truth, t_il) else {
            continue;
        };
        let Ok(scan) = retime_scan(&scan, truth, t_il, frame.stamp) else {
            continue;
        };
        let Ok(quad) = board_quad(frame, &ds.meta.board, &ds.meta.intrinsics) else {
            continue;
        };
        params.seed = cfg.seed ^ si as u64;
        let pts = board_points(&scan.positions(), &params);
        if let Some(m) = alignment_metric(&pts, &t_cl, &ds.meta.intrinsics, &quad) {
            sum += m;
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// NEES of a 6-dof extrinsic block (`offset` = rotation start) against truth.
pub fn extrinsic_nees(filter: &Filter, offset: usize, truth: &Pose) -> f64 {
    let est = if offset == CAM_ROT {
        &filter.state.extr_cam
    } else {
        assert_eq!(offset, LIDAR_ROT);
        &filter.state.extr_lidar
    };
    let tw = truth.boxminus(est);
    let e = Vector6::new(tw.phi.x, tw.phi.y, tw.phi.z, tw.rho.x, tw.rho.y, tw.rho.z);
    let p: Matrix6<f64> = filter.cov.fixed_view::<6, 6>(offset, offset).into_owned();
    let inv = p.try_inverse().expect("extrinsic covariance invertible");
    (e.transpose() * inv * e)[(0, 0)]
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Sample standard deviation.
pub fn std_dev(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}
