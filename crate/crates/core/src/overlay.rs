//! LiDAR points drawn over the camera image, and the board alignment metric.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{Vector2, Vector3};

use crate::camera::{homography, BoardGeometry, CameraIntrinsics, CornerObservationSet};
use crate::config::Config;
use crate::error::{CalibError, Result};
use crate::geometry::Pose;
use crate::propagation::TrajectoryBuffer;
use crate::scan::{fit_plane_ransac, range_gate, LidarScan};

/// How board points are picked out of a scan.
#[derive(Clone, Debug, PartialEq)]
pub struct BoardExtraction {
    pub range_min: f64,
    pub range_max: f64,
    pub ransac_iterations: usize,
    pub ransac_tol: f64,
    pub seed: u64,
}

impl BoardExtraction {
    pub fn from_config(cfg: &Config) -> Self {
        BoardExtraction {
            range_min: cfg.range_min,
            range_max: cfg.range_max,
            ransac_iterations: cfg.ransac_iterations,
            ransac_tol: cfg.ransac_tol,
            seed: cfg.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Overlay {
    /// `(pixel, depth)` of every point landing in the image, distorted pixels.
    pub points: Vec<(Vector2<f64>, f64)>,
    /// Board quadrilateral in undistorted pixels.
    pub quad: [Vector2<f64>; 4],
    pub board_points: usize,
    /// Mean distance in pixels from projected board points to the quadrilateral.
    pub alignment: Option<f64>,
    pub warning: Option<String>,
}

/// Files written by [`emit_overlay`].
#[derive(Clone, Debug)]
pub struct OverlayFiles {
    pub points: PathBuf,
    pub raster: PathBuf,
}

/// Board outline in undistorted pixel coordinates, through the homography
/// fitted to the detected corners.
pub fn board_quad(
    frame: &CornerObservationSet,
    board: &BoardGeometry,
    intr: &CameraIntrinsics,
) -> Result<[Vector2<f64>; 4]> {
    if frame.corners.len() < 4 {
        return Err(CalibError::InsufficientObservations {
            got: frame.corners.len(),
            need: 4,
        });
    }
    let local: Vec<Vector2<f64>> = frame
        .corners
        .iter()
        .map(|(i, _)| board.local_corner(*i).xy())
        .collect();
    let image: Vec<Vector2<f64>> = frame.corners.iter().map(|(_, px)| intr.undistort(px)).collect();
    let h = homography(&local, &image)?;
    let mut quad = [Vector2::zeros(); 4];
    for (q, corner) in quad.iter_mut().zip(board.outline()) {
        let p = h * Vector3::new(corner.x, corner.y, 1.0);
        if !(p.z.abs() > 0.0) {
            return Err(CalibError::DegenerateGeometry("board outline at infinity".into()));
        }
        *q = Vector2::new(intr.fx * p.x / p.z + intr.cx, intr.fy * p.y / p.z + intr.cy);
    }
    Ok(quad)
}

/// Points of the dominant plane within range, taken as the board.
pub fn board_points(points: &[Vector3<f64>], params: &BoardExtraction) -> Vec<Vector3<f64>> {
    let near = range_gate(points, params.range_min, params.range_max);
    let Ok(plane) = fit_plane_ransac(&near, params.ransac_iterations, params.ransac_tol, params.seed) else {
        return Vec::new();
    };
    near.into_iter()
        .filter(|p| (plane.normal.dot(p) + plane.offset).abs() <= params.ransac_tol)
        .collect()
}

fn cross(a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    a.x * b.y - a.y * b.x
}

fn segment_distance(p: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    let ab = b - a;
    let t = ((p - a).dot(&ab) / ab.norm_squared().max(f64::MIN_POSITIVE)).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

/// Zero inside the convex quadrilateral, distance to its boundary outside.
pub fn quad_distance(p: &Vector2<f64>, quad: &[Vector2<f64>; 4]) -> f64 {
    let sides: Vec<f64> = (0..4)
        .map(|k| cross(&(quad[(k + 1) % 4] - quad[k]), &(p - quad[k])))
        .collect();
    if sides.iter().all(|s| *s >= 0.0) || sides.iter().all(|s| *s <= 0.0) {
        return 0.0;
    }
    (0..4)
        .map(|k| segment_distance(p, &quad[k], &quad[(k + 1) % 4]))
        .fold(f64::INFINITY, f64::min)
}

/// Mean quadrilateral distance of LiDAR-frame points mapped through `T^C_L`
/// with the ideal pinhole. `None` when nothing lands in front of the camera.
pub fn alignment_metric(
    points: &[Vector3<f64>],
    t_cl: &Pose,
    intr: &CameraIntrinsics,
    quad: &[Vector2<f64>; 4],
) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for p in points {
        if let Ok(px) = intr.project_ideal(&t_cl.transform_point(p)) {
            sum += quad_distance(&px, quad);
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Moves an undistorted scan (LiDAR frame at `stamp_end`) into the LiDAR
/// frame at `stamp`.
pub fn retime_scan(scan: &LidarScan, trajectory: &TrajectoryBuffer, t_il: &Pose, stamp: f64) -> Result<LidarScan> {
    let at_end = trajectory.interpolate(scan.stamp_end)?.compose(t_il);
    let at_stamp = trajectory.interpolate(stamp)?.compose(t_il);
    let map = at_stamp.inverse().compose(&at_end);
    let mut out = scan.clone();
    for p in &mut out.points {
        p.pos = map.transform_point(&p.pos);
    }
    Ok(out)
}

/// Projects an undistorted scan into a frame and scores board alignment.
pub fn compute_overlay(
    scan: &LidarScan,
    frame: &CornerObservationSet,
    intr: &CameraIntrinsics,
    board: &BoardGeometry,
    t_cl: &Pose,
    params: &BoardExtraction,
) -> Result<Overlay> {
    let quad = board_quad(frame, board, intr)?;
    let positions = scan.positions();
    let mut points = Vec::new();
    for p in &positions {
        let xc = t_cl.transform_point(p);
        if let Ok(px) = intr.project(&xc) {
            if intr.contains(&px) {
                points.push((px, xc.z));
            }
        }
    }
    let board_pts = board_points(&positions, params);
    let alignment = alignment_metric(&board_pts, t_cl, intr, &quad);
    let warning = points
        .is_empty()
        .then(|| "empty overlay: no LiDAR points project into the image".to_string());
    Ok(Overlay {
        points,
        quad,
        board_points: board_pts.len(),
        alignment,
        warning,
    })
}

fn depth_color(depth: f64) -> [u8; 3] {
    let t = ((depth - 0.5) / 10.0).clamp(0.0, 1.0);
    [(255.0 * (1.0 - t)) as u8, (80.0 + 100.0 * (1.0 - t)) as u8, (255.0 * t) as u8]
}

/// Binary PPM of the overlay: corner markers in green, points colored by depth.
pub fn render_ppm(overlay: &Overlay, frame: &CornerObservationSet, intr: &CameraIntrinsics) -> Vec<u8> {
    let (w, h) = (intr.width as usize, intr.height as usize);
    let mut img = vec![24u8; w * h * 3];
    let mut put = |x: i64, y: i64, c: [u8; 3]| {
        if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
            let k = 3 * (y as usize * w + x as usize);
            img[k..k + 3].copy_from_slice(&c);
        }
    };
    for (_, px) in &frame.corners {
        let (x, y) = (px.x.round() as i64, px.y.round() as i64);
        for d in -3..=3 {
            put(x + d, y, [0, 220, 0]);
            put(x, y + d, [0, 220, 0]);
        }
    }
    for (px, depth) in &overlay.points {
        put(px.x.round() as i64, px.y.round() as i64, depth_color(*depth));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&img);
    out
}

/// Writes `overlay.txt` (`u v depth` per line) and `overlay.ppm` into `out_dir`.
pub fn emit_overlay(
    scan: &LidarScan,
    frame: &CornerObservationSet,
    intr: &CameraIntrinsics,
    board: &BoardGeometry,
    t_cl: &Pose,
    params: &BoardExtraction,
    out_dir: &Path,
) -> Result<(Overlay, OverlayFiles)> {
    let overlay = compute_overlay(scan, frame, intr, board, t_cl, params)?;
    fs::create_dir_all(out_dir)?;
    let files = OverlayFiles {
        points: out_dir.join("overlay.txt"),
        raster: out_dir.join("overlay.ppm"),
    };
    let mut text = Vec::new();
    for (px, depth) in &overlay.points {
        writeln!(text, "{:.3} {:.3} {:.4}", px.x, px.y, depth).expect("write to memory");
    }
    fs::write(&files.points, text)?;
    fs::write(&files.raster, render_ppm(&overlay, frame, intr))?;
    Ok((overlay, files))
}
