//! Spinning-LiDAR scans: motion undistortion and target plane extraction.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CalibError, Result};
use crate::geometry::Pose;
use crate::planar::{PlaneObservation, PlaneSource};
use crate::propagation::TrajectoryBuffer;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScanPoint {
    /// Position in the sensor frame at the acquisition instant.
    pub pos: Vector3<f64>,
    /// Seconds after `stamp_start`.
    pub t_rel: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LidarScan {
    pub stamp_start: f64,
    pub stamp_end: f64,
    /// Ordered by non-decreasing `t_rel`.
    pub points: Vec<ScanPoint>,
}

impl LidarScan {
    pub fn duration(&self) -> f64 {
        self.stamp_end - self.stamp_start
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.points.iter().map(|p| p.pos).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.duration();
        if !(d >= 0.0) {
            return Err(CalibError::InvalidArgument(format!("scan duration {d}")));
        }
        let mut prev = 0.0;
        for p in &self.points {
            if !(p.t_rel >= prev && p.t_rel <= d + 1e-9) {
                return Err(CalibError::InvalidArgument(format!("point offset {} out of order", p.t_rel)));
            }
            prev = p.t_rel;
        }
        Ok(())
    }
}

/// Re-expresses every point in the LiDAR frame at `stamp_end`, using the IMU
/// trajectory and the LiDAR extrinsic.
pub fn undistort_scan(scan: &LidarScan, trajectory: &TrajectoryBuffer, t_il: &Pose) -> Result<LidarScan> {
    let reference = trajectory.interpolate(scan.stamp_end)?.compose(t_il).inverse();
    let duration = scan.duration();
    let mut points = Vec::with_capacity(scan.points.len());
    let mut cached: Option<(f64, Pose)> = None;
    for p in &scan.points {
        let map = match cached {
            Some((t, m)) if t == p.t_rel => m,
            _ => {
                let m = reference.compose(&trajectory.interpolate(scan.stamp_start + p.t_rel)?.compose(t_il));
                cached = Some((p.t_rel, m));
                m
            }
        };
        points.push(ScanPoint {
            pos: map.transform_point(&p.pos),
            t_rel: duration,
        });
    }
    Ok(LidarScan {
        stamp_start: scan.stamp_start,
        stamp_end: scan.stamp_end,
        points,
    })
}

/// Points whose range lies in `[min, max]`.
pub fn range_gate(points: &[Vector3<f64>], min: f64, max: f64) -> Vec<Vector3<f64>> {
    points
        .iter()
        .filter(|p| {
            let r = p.norm();
            r >= min && r <= max
        })
        .copied()
        .collect()
}

/// Total-least-squares plane through `points`: `(normal, offset, rms)` with
/// `offset > 0` unless the plane passes through the origin.
pub fn fit_plane_tls(points: &[Vector3<f64>]) -> Result<(Vector3<f64>, f64, f64)> {
    if points.len() < 3 {
        return Err(CalibError::DegenerateGeometry(format!("{} points", points.len())));
    }
    let n = points.len() as f64;
    let c = points.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let scatter = points
        .iter()
        .fold(Matrix3::zeros(), |a, p| a + (p - c) * (p - c).transpose());
    let eig = SymmetricEigen::new(scatter);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (small, mid, large) = (
        eig.eigenvalues[order[0]],
        eig.eigenvalues[order[1]],
        eig.eigenvalues[order[2]],
    );
    if !(mid > 1e-12 * large) || large <= 0.0 {
        return Err(CalibError::DegenerateGeometry("points are collinear".into()));
    }
    let mut normal = eig.eigenvectors.column(order[0]).normalize();
    let mut offset = -normal.dot(&c);
    if offset < 0.0 {
        normal = -normal;
        offset = -offset;
    }
    Ok((normal, offset, (small.max(0.0) / n).sqrt()))
}

/// RANSAC plane detection with total-least-squares refinement over the
/// inliers of the best hypothesis.
pub fn fit_plane_ransac(
    points: &[Vector3<f64>],
    iterations: usize,
    inlier_tol: f64,
    seed: u64,
) -> Result<PlaneObservation> {
    if points.len() < 3 {
        return Err(CalibError::DegenerateGeometry(format!("{} points", points.len())));
    }
    let extent = points.iter().map(|p| p.norm()).fold(0.0, f64::max).max(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, Vector3<f64>, f64)> = None;
    for _ in 0..iterations.max(1) {
        let a = rng.gen_range(0..points.len());
        let b = rng.gen_range(0..points.len());
        let c = rng.gen_range(0..points.len());
        if a == b || b == c || a == c {
            continue;
        }
        let n = (points[b] - points[a]).cross(&(points[c] - points[a]));
        let norm = n.norm();
        if !(norm > 1e-10 * extent * extent) {
            continue;
        }
        let n = n / norm;
        let d = -n.dot(&points[a]);
        let count = points.iter().filter(|p| (n.dot(p) + d).abs() <= inlier_tol).count();
        if best.is_none_or(|(k, _, _)| count > k) {
            best = Some((count, n, d));
        }
    }
    let Some((_, n, d)) = best else {
        return Err(CalibError::DegenerateGeometry("no valid plane hypothesis".into()));
    };
    let inliers: Vec<Vector3<f64>> = points
        .iter()
        .filter(|p| (n.dot(p) + d).abs() <= inlier_tol)
        .copied()
        .collect();
    let (mut normal, mut offset, _) = fit_plane_tls(&inliers)?;
    // One re-selection with the refined plane.
    let refined: Vec<Vector3<f64>> = points
        .iter()
        .filter(|p| (normal.dot(p) + offset).abs() <= inlier_tol)
        .copied()
        .collect();
    let mut count = inliers.len();
    if refined.len() >= 3 {
        if let Ok((n2, d2, _)) = fit_plane_tls(&refined) {
            normal = n2;
            offset = d2;
            count = refined.len();
        }
    }
    Ok(PlaneObservation {
        stamp: 0.0,
        normal,
        offset,
        source: PlaneSource::Lidar,
        inlier_count: count,
    })
}
