use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::Vector3;
use rigcal::calibrate::run_calibration;
use rigcal::camera::MIN_CORNERS;
use rigcal::config::Config;
use rigcal::dataset::{read_dataset, write_dataset, CalibDataset};
use rigcal::error::{CalibError, Result};
use rigcal::filter::FilterState;
use rigcal::geometry::{Pose, Rotation};
use rigcal::overlay::{emit_overlay, retime_scan, BoardExtraction};
use rigcal::planar::pair_by_stamp;
use rigcal::propagation::{integrate_nominal, TrajectoryBuffer};
use rigcal::report::{daisy_chain, read_report, report_diff, write_report, Mode};
use rigcal::scan::undistort_scan;
use rigcal::simulator::{RigConfig, TrajectorySpec};

/// LiDAR-IMU-camera extrinsic calibration.
#[derive(Parser)]
#[command(name = "calib", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a calibration dataset, plus a calib.cfg whose extrinsic
    /// guesses are 5 deg / 5 cm off the truth.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Seconds of data.
        #[arg(long, default_value_t = 60.0)]
        duration: f64,
        #[arg(long)]
        noise_free: bool,
    },
    /// Estimate the extrinsics and write a report.
    Calibrate {
        #[arg(long)]
        dataset: PathBuf,
        /// cam-imu, lidar-imu or joint
        #[arg(long, default_value = "joint")]
        mode: Mode,
        /// Defaults to `<dataset>/calib.cfg` when present.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Project one scan into its paired camera frame using a report's extrinsics.
    Overlay {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Scan index; the first scan with a usable frame when omitted.
        #[arg(long)]
        scan: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare two reports.
    ReportDiff { a: PathBuf, b: PathBuf },
    /// Write the commented default configuration.
    InitConfig {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(dataset: &Path, explicit: Option<&Path>, seed: Option<u64>) -> Result<Config> {
    let implicit = dataset.join("calib.cfg");
    let mut cfg = match explicit {
        Some(p) => Config::load(p)?,
        None if implicit.exists() => Config::load(&implicit)?,
        None => Config::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn offset(p: &Pose, axis: Vector3<f64>, dir: Vector3<f64>) -> Pose {
    Pose::new(
        p.rot * Rotation::exp(&(axis.normalize() * 5f64.to_radians())),
        p.trans + dir.normalize() * 0.05,
    )
}

fn simulate(out: &Path, seed: u64, duration: f64, noise_free: bool) -> Result<()> {
    let spec = TrajectorySpec {
        duration,
        ..TrajectorySpec::default()
    };
    let mut rig = RigConfig {
        seed,
        ..RigConfig::default()
    };
    if noise_free {
        rig = rig.noise_free();
    }
    let ds = CalibDataset::simulate(&spec, &rig)?;
    write_dataset(out, &ds)?;
    let mut cfg = Config {
        seed,
        ..Config::default()
    };
    cfg.init_t_ic = offset(&rig.true_t_ic, Vector3::new(1.0, 2.0, -1.0), Vector3::new(1.0, -1.0, 1.0));
    cfg.init_t_il = offset(&rig.true_t_il, Vector3::new(-1.0, 1.0, 2.0), Vector3::new(-1.0, 1.0, 1.0));
    fs::write(out.join("calib.cfg"), cfg.to_text())?;
    println!(
        "wrote {} IMU samples, {} frames, {} scans to {}",
        ds.imu.len(),
        ds.frames.len(),
        ds.scans.len(),
        out.display()
    );
    Ok(())
}

/// IMU poses from integrating the raw stream with zero biases. Only the
/// motion within a scan is used, so drift over the run does not matter.
fn dead_reckon(ds: &CalibDataset, cfg: &Config) -> TrajectoryBuffer {
    let Some(first) = ds.imu.first() else {
        return TrajectoryBuffer::from_knots([]);
    };
    let mut state = FilterState::new(
        ds.meta.initial_pose,
        ds.meta.initial_velocity,
        Pose::identity(),
        Pose::identity(),
        first.stamp,
    );
    let mut knots = vec![(first.stamp, state.imu_pose)];
    for w in ds.imu.windows(2) {
        state = integrate_nominal(&state, &w[0], &w[1], &cfg.imu_noise.gravity);
        knots.push((w[1].stamp, state.imu_pose));
    }
    TrajectoryBuffer::from_knots(knots)
}

fn overlay(
    dataset: &Path,
    report: &Path,
    scan: Option<usize>,
    config: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let ds = read_dataset(dataset)?;
    let cfg = load_config(dataset, config, seed)?;
    let rep = read_report(report)?;
    let frames: Vec<usize> = (0..ds.frames.len())
        .filter(|&i| ds.frames[i].corners.len() >= MIN_CORNERS)
        .collect();
    let ts: Vec<f64> = ds.scans.iter().map(|s| s.stamp_end).collect();
    let tf: Vec<f64> = frames.iter().map(|&i| ds.frames[i].stamp).collect();
    let pairs = pair_by_stamp(&ts, &tf, cfg.pair_max_dt);
    let (si, fi) = match scan {
        Some(k) => pairs
            .iter()
            .copied()
            .find(|p| p.0 == k)
            .ok_or_else(|| CalibError::InvalidArgument(format!("scan {k} has no frame with enough corners")))?,
        None => *pairs
            .first()
            .ok_or_else(|| CalibError::InvalidArgument("no scan pairs with a usable frame".into()))?,
    };
    let frame = &ds.frames[frames[fi]];
    let traj = dead_reckon(&ds, &cfg);
    let undistorted = undistort_scan(&ds.scans[si], &traj, &rep.t_il)?;
    let retimed = retime_scan(&undistorted, &traj, &rep.t_il, frame.stamp)?;
    let mut params = BoardExtraction::from_config(&cfg);
    params.seed = cfg.seed ^ si as u64;
    let t_cl = daisy_chain(&rep.t_ic, &rep.t_il);
    let (ov, files) = emit_overlay(&retimed, frame, &ds.meta.intrinsics, &ds.meta.board, &t_cl, &params, out)?;
    if let Some(w) = &ov.warning {
        eprintln!("warning: {w}");
    }
    println!("scan {si}, frame at {:.4} s: {} points in image", frame.stamp, ov.points.len());
    match ov.alignment {
        Some(m) => println!("alignment {m:.4} px over {} board points", ov.board_points),
        None => println!("alignment unavailable: no board points"),
    }
    println!("wrote {} and {}", files.points.display(), files.raster.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            out,
            seed,
            duration,
            noise_free,
        } => simulate(&out, seed, duration, noise_free),
        Command::Calibrate {
            dataset,
            mode,
            config,
            seed,
            out,
        } => {
            let ds = read_dataset(&dataset)?;
            let cfg = load_config(&dataset, config.as_deref(), seed)?;
            let report = run_calibration(&ds, &cfg, mode)?;
            write_report(&out, &report)?;
            print!("{}", report.to_text());
            Ok(())
        }
        Command::Overlay {
            dataset,
            report,
            scan,
            config,
            seed,
            out,
        } => overlay(&dataset, &report, scan, config.as_deref(), seed, &out),
        Command::ReportDiff { a, b } => {
            print!("{}", report_diff(&read_report(&a)?, &read_report(&b)?));
            Ok(())
        }
        Command::InitConfig { out } => {
            match out {
                Some(p) => fs::write(p, Config::template())?,
                None => print!("{}", Config::template()),
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
