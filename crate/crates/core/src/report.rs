//! Calibration report: a human-readable table followed by a `key = value`
//! block that [`read_report`] parses back.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::dataset::{Fields, KeyValues};
use crate::error::{CalibError, Result};
use crate::filter::STATE_DIM;
use crate::geometry::Pose;

const MACHINE_MARKER: &str = "[values]";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    CameraImu,
    LidarImu,
    Joint,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::CameraImu => "camera-imu",
            Mode::LidarImu => "lidar-imu",
            Mode::Joint => "joint",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = CalibError;

    fn from_str(s: &str) -> Result<Mode> {
        match s {
            "camera-imu" | "cam-imu" => Ok(Mode::CameraImu),
            "lidar-imu" => Ok(Mode::LidarImu),
            "joint" => Ok(Mode::Joint),
            _ => Err(CalibError::InvalidArgument(format!(
                "unknown mode {s:?} (expected cam-imu, lidar-imu or joint)"
            ))),
        }
    }
}

/// Counters for one measurement type.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub attempted: usize,
    pub accepted: usize,
    /// Rejected by the chi-square gate.
    pub gated: usize,
    /// Measurement could not be formed (too few corners, poor scan match, ...).
    pub skipped: usize,
    /// Sum of Mahalanobis distances of accepted updates.
    pub mahalanobis_sum: f64,
}

impl UpdateStats {
    pub fn mean_mahalanobis(&self) -> f64 {
        if self.accepted == 0 {
            0.0
        } else {
            self.mahalanobis_sum / self.accepted as f64
        }
    }

    fn to_text(self) -> String {
        format!(
            "{} {} {} {} {}",
            self.attempted, self.accepted, self.gated, self.skipped, self.mahalanobis_sum
        )
    }

    fn parse(path: &Path, line: usize, s: &str) -> Result<UpdateStats> {
        let p: Vec<&str> = s.split_whitespace().collect();
        let bad = || CalibError::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("bad update statistics `{s}`"),
        };
        if p.len() != 5 {
            return Err(bad());
        }
        let n = |i: usize| p[i].parse::<usize>().map_err(|_| bad());
        Ok(UpdateStats {
            attempted: n(0)?,
            accepted: n(1)?,
            gated: n(2)?,
            skipped: n(3)?,
            mahalanobis_sum: p[4].parse().map_err(|_| bad())?,
        })
    }
}

/// Rotation (degrees) and translation (meters) errors against ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseError {
    pub rot_deg: f64,
    pub trans_m: f64,
}

impl PoseError {
    pub fn between(estimate: &Pose, truth: &Pose) -> PoseError {
        let (rot, trans) = estimate.distance(truth);
        PoseError {
            rot_deg: rot.to_degrees(),
            trans_m: trans,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruthErrors {
    pub t_ic: PoseError,
    pub t_il: PoseError,
    pub t_cl: PoseError,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibReport {
    pub mode: Mode,
    pub t_ic: Pose,
    pub t_il: Pose,
    pub cov_diag: Vec<f64>,
    pub camera: UpdateStats,
    pub lidar: UpdateStats,
    pub planar: UpdateStats,
    pub imu_samples: usize,
    pub frames: usize,
    pub scans: usize,
    /// First and last processed stamp.
    pub span: (f64, f64),
    pub truth: Option<TruthErrors>,
}

/// `T^C_L = (T^I_C)^-1 T^I_L`
pub fn daisy_chain(t_ic: &Pose, t_il: &Pose) -> Pose {
    t_ic.inverse().compose(t_il)
}

fn fixed4(v: f64) -> String {
    let s = format!("{v:.4}");
    if s == "-0.0000" {
        "0.0000".into()
    } else {
        s
    }
}

/// One row in the `R° P° Y° x y z` layout, four decimals per column.
pub fn format_table_row(pose: &Pose) -> String {
    let rpy = pose.rot.to_rpy_degrees();
    [rpy.roll, rpy.pitch, rpy.yaw, pose.trans.x, pose.trans.y, pose.trans.z]
        .iter()
        .map(|v| format!("{:>10}", fixed4(*v)))
        .collect::<String>()
}

const BLOCKS: [(&str, usize); 9] = [
    ("imu rot", 0),
    ("imu pos", 3),
    ("velocity", 6),
    ("gyro bias", 9),
    ("accel bias", 12),
    ("T_IL rot", 15),
    ("T_IL pos", 18),
    ("T_IC rot", 21),
    ("T_IC pos", 24),
];

impl CalibReport {
    pub fn t_cl(&self) -> Pose {
        daisy_chain(&self.t_ic, &self.t_il)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("calibration report: {} mode\n\n", self.mode);
        s += &format!(
            "{:<6}{:>10}{:>10}{:>10}{:>10}{:>10}{:>10}\n",
            "", "R [deg]", "P [deg]", "Y [deg]", "x [m]", "y [m]", "z [m]"
        );
        let show_ic = self.mode != Mode::LidarImu;
        let show_il = self.mode != Mode::CameraImu;
        if show_ic {
            s += &format!("{:<6}{}\n", "T_IC", format_table_row(&self.t_ic));
        }
        if show_il {
            s += &format!("{:<6}{}\n", "T_IL", format_table_row(&self.t_il));
        }
        if show_ic && show_il {
            s += &format!("{:<6}{}\n", "T_CL", format_table_row(&self.t_cl()));
        }
        s += "\n1-sigma (rot deg / pos m):\n";
        for (name, off) in BLOCKS {
            let sd: Vec<String> = (0..3)
                .map(|k| {
                    let sd = self.cov_diag[off + k].max(0.0).sqrt();
                    if name.ends_with("rot") {
                        format!("{:.3e}", sd.to_degrees())
                    } else {
                        format!("{sd:.3e}")
                    }
                })
                .collect();
            s += &format!("  {name:<11}{}\n", sd.join("  "));
        }
        s += "\nupdates (attempted / accepted / gated / skipped / mean mahalanobis):\n";
        for (name, u) in [("camera", self.camera), ("lidar", self.lidar), ("plane", self.planar)] {
            s += &format!(
                "  {name:<8}{:>7}{:>9}{:>7}{:>8}{:>11.3}\n",
                u.attempted,
                u.accepted,
                u.gated,
                u.skipped,
                u.mean_mahalanobis()
            );
        }
        s += &format!(
            "\ninput: {} IMU samples, {} frames, {} scans over [{:.3}, {:.3}] s\n",
            self.imu_samples, self.frames, self.scans, self.span.0, self.span.1
        );
        if let Some(t) = &self.truth {
            s += "\nerror against ground truth (deg / m):\n";
            for (name, e) in [("T_IC", t.t_ic), ("T_IL", t.t_il), ("T_CL", t.t_cl)] {
                s += &format!("  {name:<6}{:.4}  {:.5}\n", e.rot_deg, e.trans_m);
            }
        }
        s += &format!("\n{MACHINE_MARKER}\n");
        s += &format!("mode = {}\n", self.mode);
        s += &format!("t_ic = {}\n", self.t_ic);
        s += &format!("t_il = {}\n", self.t_il);
        s += &format!("t_cl = {}\n", self.t_cl());
        s += &format!(
            "cov_diag = {}\n",
            self.cov_diag.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
        );
        s += &format!("camera_updates = {}\n", self.camera.to_text());
        s += &format!("lidar_updates = {}\n", self.lidar.to_text());
        s += &format!("plane_updates = {}\n", self.planar.to_text());
        s += &format!("imu_samples = {}\nframes = {}\nscans = {}\n", self.imu_samples, self.frames, self.scans);
        s += &format!("span = {} {}\n", self.span.0, self.span.1);
        if let Some(t) = &self.truth {
            for (name, e) in [("t_ic", t.t_ic), ("t_il", t.t_il), ("t_cl", t.t_cl)] {
                s += &format!("error_{name} = {} {}\n", e.rot_deg, e.trans_m);
            }
        }
        s
    }

    pub fn parse(path: &Path, text: &str) -> Result<CalibReport> {
        let start = text
            .lines()
            .position(|l| l.trim() == MACHINE_MARKER)
            .ok_or_else(|| CalibError::Parse {
                path: path.to_path_buf(),
                line: 0,
                msg: format!("no `{MACHINE_MARKER}` section"),
            })?;
        // Keep line numbers relative to the whole file.
        let body: String = text
            .lines()
            .enumerate()
            .map(|(i, l)| if i > start { l } else { "" })
            .collect::<Vec<_>>()
            .join("\n");
        let kv = KeyValues::parse(path, &body)?;
        let f = Fields { path, kv: &kv };
        let mode = {
            let (v, line) = kv.get("mode").ok_or_else(|| CalibError::Parse {
                path: path.to_path_buf(),
                line: 0,
                msg: "missing key `mode`".into(),
            })?;
            v.parse::<Mode>().map_err(|e| CalibError::Parse {
                path: path.to_path_buf(),
                line,
                msg: e.to_string(),
            })?
        };
        let stats = |key: &str| -> Result<UpdateStats> {
            let (v, line) = kv.get(key).ok_or_else(|| CalibError::Parse {
                path: path.to_path_buf(),
                line: 0,
                msg: format!("missing key `{key}`"),
            })?;
            UpdateStats::parse(path, line, v)
        };
        let err = |key: &str| -> Result<Option<PoseError>> {
            if kv.get(key).is_none() {
                return Ok(None);
            }
            let v = f.vec(key, 2)?;
            Ok(Some(PoseError {
                rot_deg: v[0],
                trans_m: v[1],
            }))
        };
        let truth = match (err("error_t_ic")?, err("error_t_il")?, err("error_t_cl")?) {
            (Some(t_ic), Some(t_il), Some(t_cl)) => Some(TruthErrors { t_ic, t_il, t_cl }),
            _ => None,
        };
        let span = f.vec("span", 2)?;
        Ok(CalibReport {
            mode,
            t_ic: f.pose("t_ic")?,
            t_il: f.pose("t_il")?,
            cov_diag: f.vec("cov_diag", STATE_DIM)?,
            camera: stats("camera_updates")?,
            lidar: stats("lidar_updates")?,
            planar: stats("plane_updates")?,
            imu_samples: f.usize("imu_samples")?,
            frames: f.usize("frames")?,
            scans: f.usize("scans")?,
            span: (span[0], span[1]),
            truth,
        })
    }
}

pub fn write_report(path: &Path, report: &CalibReport) -> Result<()> {
    std::fs::write(path, report.to_text())?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<CalibReport> {
    CalibReport::parse(path, &std::fs::read_to_string(path)?)
}

/// Differences between two reports as printable lines: extrinsic deltas in
/// degrees and meters.
pub fn report_diff(a: &CalibReport, b: &CalibReport) -> String {
    let mut s = format!("{:<6}{:>12}{:>12}\n", "", "rot [deg]", "trans [m]");
    for (name, pa, pb) in [
        ("T_IC", a.t_ic, b.t_ic),
        ("T_IL", a.t_il, b.t_il),
        ("T_CL", a.t_cl(), b.t_cl()),
    ] {
        let e = PoseError::between(&pa, &pb);
        s += &format!("{name:<6}{:>12.6}{:>12.6}\n", e.rot_deg, e.trans_m);
    }
    s
}
