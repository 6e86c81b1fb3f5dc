//! On-disk dataset layout:
//!
//! ```text
//! <dir>/imu.csv          stamp,gx,gy,gz,ax,ay,az
//! <dir>/corners.csv      stamp,board_index,u,v   (board_index -1 marks a frame without corners)
//! <dir>/scans/NNNNN.bin  "stamp_start stamp_end count\n" + count x (t_rel, x, y, z) little-endian f64
//! <dir>/rig.cfg          key = value: intrinsics, board, initial IMU state, optional true extrinsics
//! ```
//!
//! Text readers accept commas or whitespace as separators and skip `#`
//! comments and header lines.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Vector2, Vector3};

use crate::camera::{BoardGeometry, CameraIntrinsics, CornerObservationSet};
use crate::error::{CalibError, Result};
use crate::geometry::Pose;
use crate::propagation::ImuSample;
use crate::scan::{LidarScan, ScanPoint};
use crate::simulator::{synth_camera, synth_imu, synth_lidar, analytic_pose, RigConfig, TrajectorySpec};

/// Static description of the rig and the initial IMU state.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub intrinsics: CameraIntrinsics,
    pub board: BoardGeometry,
    /// `T^G_I` at the first IMU stamp.
    pub initial_pose: Pose,
    pub initial_velocity: Vector3<f64>,
    pub truth_t_il: Option<Pose>,
    pub truth_t_ic: Option<Pose>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibDataset {
    pub meta: DatasetMeta,
    pub imu: Vec<ImuSample>,
    pub frames: Vec<CornerObservationSet>,
    pub scans: Vec<LidarScan>,
}

impl CalibDataset {
    /// Simulates a complete dataset with ground truth recorded in the meta.
    pub fn simulate(spec: &TrajectorySpec, rig: &RigConfig) -> Result<CalibDataset> {
        rig.validate()?;
        let start = analytic_pose(spec, 0.0)?;
        Ok(CalibDataset {
            meta: DatasetMeta {
                intrinsics: rig.intrinsics.clone(),
                board: rig.board.clone(),
                initial_pose: start.pose,
                initial_velocity: start.velocity,
                truth_t_il: Some(rig.true_t_il),
                truth_t_ic: Some(rig.true_t_ic),
            },
            imu: synth_imu(spec, rig)?,
            frames: synth_camera(spec, rig)?.into_iter().map(|f| f.observation).collect(),
            scans: synth_lidar(spec, rig)?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        fn increasing(name: &str, stamps: impl Iterator<Item = f64>) -> Result<()> {
            let mut prev = f64::NEG_INFINITY;
            for t in stamps {
                if !(t > prev) {
                    return Err(CalibError::DatasetFault(format!("{name} stamps not increasing at {t}")));
                }
                prev = t;
            }
            Ok(())
        }
        increasing("imu", self.imu.iter().map(|s| s.stamp))?;
        increasing("corner", self.frames.iter().map(|f| f.stamp))?;
        increasing("scan", self.scans.iter().map(|s| s.stamp_end))?;
        for s in &self.scans {
            s.validate()?;
        }
        Ok(())
    }
}

fn fields(line: &str) -> Vec<&str> {
    line.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .collect()
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> CalibError {
    CalibError::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn numbers(path: &Path, line: usize, parts: &[&str]) -> Result<Vec<f64>> {
    parts
        .iter()
        .map(|p| p.parse::<f64>().map_err(|_| parse_err(path, line, format!("not a number: {p}"))))
        .collect()
}

/// Data lines of a text file as `(line_number, fields)`, skipping blank
/// lines, comments and a leading header.
fn data_lines(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let parts = fields(t);
        if out.is_empty() && parts[0].parse::<f64>().is_err() {
            continue;
        }
        out.push((i + 1, parts.into_iter().map(String::from).collect()));
    }
    Ok(out)
}

pub fn parse_imu_line(path: &Path, line: usize, parts: &[&str]) -> Result<ImuSample> {
    if parts.len() != 7 {
        return Err(parse_err(path, line, format!("expected 7 fields, got {}", parts.len())));
    }
    let v = numbers(path, line, parts)?;
    Ok(ImuSample::new(v[0], Vector3::new(v[1], v[2], v[3]), Vector3::new(v[4], v[5], v[6])))
}

/// One corner record: `(stamp, board_index, pixel)`; a negative index marks
/// an empty frame.
pub fn parse_corner_line(path: &Path, line: usize, parts: &[&str]) -> Result<(f64, i64, Vector2<f64>)> {
    if parts.len() != 4 {
        return Err(parse_err(path, line, format!("expected 4 fields, got {}", parts.len())));
    }
    let stamp = parts[0]
        .parse::<f64>()
        .map_err(|_| parse_err(path, line, format!("bad stamp {}", parts[0])))?;
    let index = parts[1]
        .parse::<i64>()
        .map_err(|_| parse_err(path, line, format!("bad board index {}", parts[1])))?;
    let px = numbers(path, line, &parts[2..])?;
    Ok((stamp, index, Vector2::new(px[0], px[1])))
}

pub fn read_imu(path: &Path) -> Result<Vec<ImuSample>> {
    data_lines(path)?
        .iter()
        .map(|(n, p)| parse_imu_line(path, *n, &p.iter().map(String::as_str).collect::<Vec<_>>()))
        .collect()
}

pub fn write_imu(path: &Path, imu: &[ImuSample]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "stamp,gx,gy,gz,ax,ay,az")?;
    for s in imu {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            s.stamp, s.gyro.x, s.gyro.y, s.gyro.z, s.accel.x, s.accel.y, s.accel.z
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corners(path: &Path) -> Result<Vec<CornerObservationSet>> {
    let mut frames: Vec<CornerObservationSet> = Vec::new();
    for (n, p) in data_lines(path)? {
        let parts: Vec<&str> = p.iter().map(String::as_str).collect();
        let (stamp, index, px) = parse_corner_line(path, n, &parts)?;
        let same = frames.last().is_some_and(|f| f.stamp == stamp);
        if !same {
            frames.push(CornerObservationSet {
                stamp,
                board_id: 0,
                corners: Vec::new(),
            });
        }
        if index >= 0 {
            let f = frames.last_mut().expect("frame pushed above");
            if f.corners.iter().any(|(i, _)| *i == index as usize) {
                return Err(parse_err(path, n, format!("duplicate board index {index}")));
            }
            f.corners.push((index as usize, px));
        }
    }
    Ok(frames)
}

pub fn write_corners(path: &Path, frames: &[CornerObservationSet]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "stamp,board_index,u,v")?;
    for f in frames {
        if f.corners.is_empty() {
            writeln!(w, "{},-1,0,0", f.stamp)?;
        }
        for (i, px) in &f.corners {
            writeln!(w, "{},{},{},{}", f.stamp, i, px.x, px.y)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_scan(path: &Path, scan: &LidarScan) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{} {} {}", scan.stamp_start, scan.stamp_end, scan.points.len())?;
    for p in &scan.points {
        for v in [p.t_rel, p.pos.x, p.pos.y, p.pos.z] {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_scan(path: &Path) -> Result<LidarScan> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let nl = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| parse_err(path, 1, "missing header line"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| parse_err(path, 1, "header is not text"))?;
    let parts = fields(header);
    if parts.len() != 3 {
        return Err(parse_err(path, 1, "header must be `stamp_start stamp_end count`"));
    }
    let v = numbers(path, 1, &parts[..2])?;
    let count: usize = parts[2].parse().map_err(|_| parse_err(path, 1, "bad point count"))?;
    let body = &bytes[nl + 1..];
    if body.len() != count * 32 {
        return Err(parse_err(
            path,
            1,
            format!("expected {} bytes of points, found {}", count * 32, body.len()),
        ));
    }
    let f = |k: usize| f64::from_le_bytes(body[8 * k..8 * k + 8].try_into().expect("8-byte slice"));
    let points = (0..count)
        .map(|i| ScanPoint {
            t_rel: f(4 * i),
            pos: Vector3::new(f(4 * i + 1), f(4 * i + 2), f(4 * i + 3)),
        })
        .collect();
    Ok(LidarScan {
        stamp_start: v[0],
        stamp_end: v[1],
        points,
    })
}

/// Flat `key = value` text, in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    pub entries: Vec<(String, String, usize)>,
}

impl KeyValues {
    pub fn parse(path: &Path, text: &str) -> Result<KeyValues> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let t = line.split('#').next().unwrap_or("").trim();
            if t.is_empty() {
                continue;
            }
            let (k, v) = t
                .split_once('=')
                .ok_or_else(|| parse_err(path, i + 1, format!("expected `key = value`, got `{t}`")))?;
            entries.push((k.trim().to_string(), v.trim().to_string(), i + 1));
        }
        Ok(KeyValues { entries })
    }

    pub fn get(&self, key: &str) -> Option<(&str, usize)> {
        self.entries
            .iter()
            .rev()
            .find(|(k, _, _)| k == key)
            .map(|(_, v, n)| (v.as_str(), *n))
    }
}

/// Typed access to a [`KeyValues`] set with line-numbered errors.
pub struct Fields<'a> {
    pub path: &'a Path,
    pub kv: &'a KeyValues,
}

impl Fields<'_> {
    fn required(&self, key: &str) -> Result<(&str, usize)> {
        self.kv
            .get(key)
            .ok_or_else(|| parse_err(self.path, 0, format!("missing key `{key}`")))
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        let (v, n) = self.required(key)?;
        v.parse().map_err(|_| parse_err(self.path, n, format!("`{key}`: not a number: {v}")))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        let (v, n) = self.required(key)?;
        v.parse()
            .map_err(|_| parse_err(self.path, n, format!("`{key}`: not a count: {v}")))
    }

    pub fn vec(&self, key: &str, len: usize) -> Result<Vec<f64>> {
        let (v, n) = self.required(key)?;
        let parts = fields(v);
        if parts.len() != len {
            return Err(parse_err(self.path, n, format!("`{key}`: expected {len} numbers")));
        }
        numbers(self.path, n, &parts)
    }

    pub fn pose(&self, key: &str) -> Result<Pose> {
        let (v, n) = self.required(key)?;
        v.parse::<Pose>()
            .map_err(|e| parse_err(self.path, n, format!("`{key}`: {e}")))
    }

    pub fn optional_pose(&self, key: &str) -> Result<Option<Pose>> {
        match self.kv.get(key) {
            Some(_) => self.pose(key).map(Some),
            None => Ok(None),
        }
    }
}

fn fmt_vec(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn write_meta(path: &Path, m: &DatasetMeta) -> Result<()> {
    let i = &m.intrinsics;
    let b = &m.board;
    let mut s = String::new();
    s += "# rig description\n";
    s += &format!("fx = {}\nfy = {}\ncx = {}\ncy = {}\n", i.fx, i.fy, i.cx, i.cy);
    s += &format!("width = {}\nheight = {}\n", i.width, i.height);
    s += &format!("distortion = {}\n", fmt_vec(&i.distortion));
    s += &format!("board_rows = {}\nboard_cols = {}\nboard_spacing = {}\n", b.rows, b.cols, b.spacing);
    s += &format!("board_width = {}\nboard_height = {}\nboard_pose = {}\n", b.width, b.height, b.pose);
    s += &format!("initial_pose = {}\n", m.initial_pose);
    s += &format!(
        "initial_velocity = {}\n",
        fmt_vec(m.initial_velocity.as_slice())
    );
    if let Some(p) = &m.truth_t_il {
        s += &format!("truth_t_il = {p}\n");
    }
    if let Some(p) = &m.truth_t_ic {
        s += &format!("truth_t_ic = {p}\n");
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_meta(path: &Path) -> Result<DatasetMeta> {
    let text = fs::read_to_string(path)?;
    let kv = KeyValues::parse(path, &text)?;
    let f = Fields { path, kv: &kv };
    let d = f.vec("distortion", 4)?;
    let v = f.vec("initial_velocity", 3)?;
    let intrinsics = CameraIntrinsics {
        fx: f.f64("fx")?,
        fy: f.f64("fy")?,
        cx: f.f64("cx")?,
        cy: f.f64("cy")?,
        width: f.usize("width")? as u32,
        height: f.usize("height")? as u32,
        distortion: [d[0], d[1], d[2], d[3]],
    };
    intrinsics.validate()?;
    Ok(DatasetMeta {
        intrinsics,
        board: BoardGeometry {
            rows: f.usize("board_rows")?,
            cols: f.usize("board_cols")?,
            spacing: f.f64("board_spacing")?,
            width: f.f64("board_width")?,
            height: f.f64("board_height")?,
            pose: f.pose("board_pose")?,
        },
        initial_pose: f.pose("initial_pose")?,
        initial_velocity: Vector3::new(v[0], v[1], v[2]),
        truth_t_il: f.optional_pose("truth_t_il")?,
        truth_t_ic: f.optional_pose("truth_t_ic")?,
    })
}

fn scan_path(dir: &Path, k: usize) -> PathBuf {
    dir.join("scans").join(format!("{k:05}.bin"))
}

pub fn write_dataset(dir: &Path, ds: &CalibDataset) -> Result<()> {
    fs::create_dir_all(dir.join("scans"))?;
    write_meta(&dir.join("rig.cfg"), &ds.meta)?;
    write_imu(&dir.join("imu.csv"), &ds.imu)?;
    write_corners(&dir.join("corners.csv"), &ds.frames)?;
    for (k, s) in ds.scans.iter().enumerate() {
        write_scan(&scan_path(dir, k), s)?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<CalibDataset> {
    if !dir.is_dir() {
        return Err(CalibError::InvalidArgument(format!("{} is not a dataset directory", dir.display())));
    }
    let meta = read_meta(&dir.join("rig.cfg"))?;
    let imu = read_imu(&dir.join("imu.csv"))?;
    let corners = dir.join("corners.csv");
    let frames = if corners.exists() { read_corners(&corners)? } else { Vec::new() };
    let mut scans = Vec::new();
    let scan_dir = dir.join("scans");
    if scan_dir.is_dir() {
        let mut names: Vec<PathBuf> = fs::read_dir(&scan_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "bin"))
            .collect();
        names.sort();
        for p in names {
            scans.push(read_scan(&p)?);
        }
    }
    let ds = CalibDataset {
        meta,
        imu,
        frames,
        scans,
    };
    ds.validate()?;
    Ok(ds)
}
