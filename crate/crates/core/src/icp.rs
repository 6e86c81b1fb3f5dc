//! Point-to-plane scan matching against a target scan with grid-hashed
//! neighbor search.

use std::collections::HashMap;
use std::hash::{BuildHasherDefault, Hasher};

use nalgebra::{Matrix3, SMatrix, SymmetricEigen, Vector3, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CalibError, Result};
use crate::geometry::{hat, Pose, Twist};
use crate::lidar::LidarPoseMeasurement;
use crate::scan::LidarScan;

/// Added to the fitness of a match that did not converge.
pub const NONCONVERGENCE_PENALTY: f64 = 1.0;

type Cell = (i32, i32, i32);

/// Multiplicative hash for integer cell keys.
#[derive(Default)]
struct CellHasher(u64);

impl Hasher for CellHasher {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.write_u64(*b as u64);
        }
    }

    fn write_i32(&mut self, v: i32) {
        self.write_u64(v as u32 as u64);
    }

    fn write_u64(&mut self, v: u64) {
        self.0 = (self.0.rotate_left(5) ^ v).wrapping_mul(0x51_7c_c1_b7_27_22_0a_95);
    }
}

type CellMap = HashMap<Cell, Vec<u32>, BuildHasherDefault<CellHasher>>;

/// Uniform grid over a point set.
#[derive(Clone, Debug)]
pub struct PointGrid {
    cell: f64,
    cells: CellMap,
    points: Vec<Vector3<f64>>,
}

impl PointGrid {
    pub fn new(points: Vec<Vector3<f64>>, cell: f64) -> Self {
        let mut cells = CellMap::default();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(cell, p)).or_default().push(i as u32);
        }
        PointGrid { cell, cells, points }
    }

    fn key(cell: f64, p: &Vector3<f64>) -> Cell {
        (
            (p.x / cell).floor() as i32,
            (p.y / cell).floor() as i32,
            (p.z / cell).floor() as i32,
        )
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    /// Visits every point in the cube shell at Chebyshev distance `s` from
    /// the cell `c`.
    fn visit_shell(&self, c: Cell, s: i32, mut f: impl FnMut(usize)) {
        for dx in -s..=s {
            for dy in -s..=s {
                let edge = dx.abs() == s || dy.abs() == s;
                let step = if edge || s == 0 { 1 } else { 2 * s };
                let mut dz = -s;
                while dz <= s {
                    if let Some(v) = self.cells.get(&(c.0 + dx, c.1 + dy, c.2 + dz)) {
                        for &i in v {
                            f(i as usize);
                        }
                    }
                    dz += step.max(1);
                }
            }
        }
    }

    fn max_shell(&self, radius: f64) -> i32 {
        (radius / self.cell).ceil() as i32 + 1
    }

    /// Nearest point within `radius`, as `(index, distance)`.
    pub fn nearest(&self, q: &Vector3<f64>, radius: f64) -> Option<(usize, f64)> {
        let c = Self::key(self.cell, q);
        let mut best: Option<(usize, f64)> = None;
        let r2 = radius * radius;
        for s in 0..=self.max_shell(radius) {
            self.visit_shell(c, s, |i| {
                let d2 = (self.points[i] - q).norm_squared();
                if d2 <= r2 && best.is_none_or(|(_, b)| d2 < b) {
                    best = Some((i, d2));
                }
            });
            // Everything beyond this shell is at least `s * cell` away.
            if let Some((_, b)) = best {
                let bound = s as f64 * self.cell;
                if b <= bound * bound {
                    break;
                }
            }
        }
        best.map(|(i, d2)| (i, d2.sqrt()))
    }

    /// Up to `k` nearest points within `radius`, closest first.
    pub fn k_nearest(&self, q: &Vector3<f64>, k: usize, radius: f64) -> Vec<(usize, f64)> {
        let c = Self::key(self.cell, q);
        let r2 = radius * radius;
        let mut found: Vec<(usize, f64)> = Vec::new();
        for s in 0..=self.max_shell(radius) {
            self.visit_shell(c, s, |i| {
                let d2 = (self.points[i] - q).norm_squared();
                if d2 <= r2 {
                    found.push((i, d2));
                }
            });
            if found.len() >= k {
                found.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
                let bound = s as f64 * self.cell;
                if found[k - 1].1 <= bound * bound {
                    break;
                }
            }
        }
        found.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        found.truncate(k);
        found.into_iter().map(|(i, d2)| (i, d2.sqrt())).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcpParams {
    pub max_iter: usize,
    /// Stop once the update norm falls below this.
    pub tol: f64,
    /// Correspondence search radius, meters.
    pub max_corr_dist: f64,
    pub min_correspondences: usize,
    /// Neighbors used for target normals.
    pub normal_neighbors: usize,
    pub normal_radius: f64,
    /// Smallest-to-total eigenvalue ratio above which a neighborhood is not
    /// treated as planar.
    pub max_curvature: f64,
    pub huber: f64,
    /// Residuals below this count toward the fitness.
    pub inlier_dist: f64,
    pub max_source_points: usize,
    pub grid_cell: f64,
}

impl Default for IcpParams {
    fn default() -> Self {
        IcpParams {
            max_iter: 30,
            tol: 1e-7,
            max_corr_dist: 0.5,
            min_correspondences: 50,
            normal_neighbors: 10,
            normal_radius: 2.0,
            max_curvature: 0.02,
            huber: 0.05,
            inlier_dist: 0.1,
            max_source_points: 2000,
            grid_cell: 0.5,
        }
    }
}

/// Normal and centroid of the neighborhood of `p`, or `None` when it is
/// curved or line-like.
fn local_plane(grid: &PointGrid, p: &Vector3<f64>, params: &IcpParams) -> Option<(Vector3<f64>, Vector3<f64>)> {
    let nn = grid.k_nearest(p, params.normal_neighbors, params.normal_radius);
    if nn.len() < params.normal_neighbors.clamp(3, 5) {
        return None;
    }
    let n = nn.len() as f64;
    let c = nn.iter().fold(Vector3::zeros(), |a, (i, _)| a + grid.points()[*i]) / n;
    let scatter = nn.iter().fold(Matrix3::zeros(), |a, (i, _)| {
        let d = grid.points()[*i] - c;
        a + d * d.transpose()
    });
    let eig = SymmetricEigen::new(scatter);
    let total = eig.eigenvalues.sum();
    let imin = eig.eigenvalues.imin();
    let mut sorted = [eig.eigenvalues[0], eig.eigenvalues[1], eig.eigenvalues[2]];
    sorted.sort_by(f64::total_cmp);
    if !(total > 0.0) || sorted[0] > params.max_curvature * total || sorted[1] < 0.05 * total {
        return None;
    }
    Some((eig.eigenvectors.column(imin).normalize(), c))
}

/// Target scan with per-point local planes (`None` where the neighborhood is
/// not planar). Residuals are taken against the neighborhood centroid, which
/// averages out range noise in the target.
#[derive(Clone, Debug)]
pub struct TargetMap {
    grid: PointGrid,
    normals: Vec<Option<(Vector3<f64>, Vector3<f64>)>>,
}

impl TargetMap {
    pub fn build(points: Vec<Vector3<f64>>, params: &IcpParams) -> Self {
        let grid = PointGrid::new(points, params.grid_cell);
        let normals = grid.points().iter().map(|p| local_plane(&grid, p, params)).collect();
        TargetMap { grid, normals }
    }

    pub fn len(&self) -> usize {
        self.normals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normals.is_empty()
    }

    pub fn planar_count(&self) -> usize {
        self.normals.iter().filter(|n| n.is_some()).count()
    }
}

/// A source point paired with the nearest target point and its normal.
struct Correspondence {
    src: usize,
    target: Vector3<f64>,
    normal: Vector3<f64>,
}

struct Association {
    pairs: Vec<Correspondence>,
    /// Source points with any target point inside the search radius.
    in_range: usize,
    /// Robust point-to-plane cost over `pairs`.
    cost: f64,
}

fn huber_cost(r: f64, k: f64) -> f64 {
    let a = r.abs();
    if a <= k {
        0.5 * r * r
    } else {
        k * (a - 0.5 * k)
    }
}

/// Robust per-point cost, truncated at `inlier_dist`.
fn point_cost(r: f64, params: &IcpParams) -> f64 {
    huber_cost(r.abs().min(params.inlier_dist), params.huber)
}

/// Source points in the subsample with their local normals.
struct Source {
    points: Vec<Vector3<f64>>,
    normals: Vec<Option<Vector3<f64>>>,
}

impl Source {
    fn new(scan: &LidarScan, params: &IcpParams) -> Source {
        let all = scan.positions();
        let idx = subsample_indices(all.len(), params.max_source_points);
        let points: Vec<Vector3<f64>> = idx.iter().map(|i| all[*i]).collect();
        let grid = PointGrid::new(all, params.grid_cell);
        let normals = points.iter().map(|p| local_plane(&grid, p, params).map(|(n, _)| n)).collect();
        Source { points, normals }
    }
}

/// Minimum cosine between matched source and target normals.
const NORMAL_AGREEMENT: f64 = 0.9;

fn associate(pose: &Pose, source: &Source, target: &TargetMap, params: &IcpParams) -> Association {
    let rot = pose.rot.matrix();
    let mut a = Association {
        pairs: Vec::with_capacity(source.points.len()),
        in_range: 0,
        cost: 0.0,
    };
    for (k, s) in source.points.iter().enumerate() {
        let x = rot * s + pose.trans;
        let Some((idx, _)) = target.grid.nearest(&x, params.max_corr_dist) else {
            continue;
        };
        a.in_range += 1;
        let (Some((n, q)), Some(ns)) = (target.normals[idx], source.normals[k]) else {
            continue;
        };
        if (rot * ns).dot(&n).abs() < NORMAL_AGREEMENT {
            continue;
        }
        a.cost += point_cost(n.dot(&(x - q)), params);
        a.pairs.push(Correspondence {
            src: k,
            target: q,
            normal: n,
        });
    }
    a
}

/// Cost of fixed correspondences at `pose`, with the normal equations.
fn fixed_cost(
    pose: &Pose,
    pairs: &[Correspondence],
    source: &Source,
    params: &IcpParams,
) -> (f64, SMatrix<f64, 6, 6>, Vector6<f64>) {
    let rot = pose.rot.matrix();
    let mut cost = 0.0;
    let mut jtj = SMatrix::<f64, 6, 6>::zeros();
    let mut jtr = Vector6::zeros();
    for c in pairs {
        let s = &source.points[c.src];
        let r = c.normal.dot(&(rot * s + pose.trans - c.target));
        cost += point_cost(r, params);
        if r.abs() >= params.inlier_dist {
            continue;
        }
        let w = if r.abs() <= params.huber { 1.0 } else { params.huber / r.abs() };
        let nr = rot.transpose() * c.normal;
        let mut j = Vector6::zeros();
        j.fixed_rows_mut::<3>(0).copy_from(&nr);
        j.fixed_rows_mut::<3>(3).copy_from(&(-hat(s).transpose() * nr));
        jtj += j * j.transpose() * w;
        jtr += j * (w * r);
    }
    (cost, jtj, jtr)
}

fn subsample_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut idx = rand::seq::index::sample(&mut rng, len, max).into_vec();
    idx.sort_unstable();
    idx
}

/// Pose of the source frame in the target frame, minimizing robust
/// point-to-plane distances. Each round fixes nearest-neighbor
/// correspondences and runs Gauss-Newton on them; rounds repeat until the
/// pose stops moving.
pub fn icp_against_map(
    source: &LidarScan,
    target: &TargetMap,
    init: &Pose,
    params: &IcpParams,
) -> Result<LidarPoseMeasurement> {
    icp_traced(source, target, init, params, &mut |_, _| {})
}

/// [`icp_against_map`], reporting `(round, cost)` after every accepted
/// Gauss-Newton step; the cost within a round never increases.
pub fn icp_traced(
    source: &LidarScan,
    target: &TargetMap,
    init: &Pose,
    params: &IcpParams,
    trace: &mut dyn FnMut(usize, f64),
) -> Result<LidarPoseMeasurement> {
    let src = Source::new(source, params);
    let mut pose = *init;
    let mut assoc = associate(&pose, &src, target, params);
    if assoc.in_range < params.min_correspondences {
        return Err(CalibError::InsufficientOverlap(assoc.in_range));
    }
    let mut converged = false;
    let mut iterations = 0;
    let mut round = 0;
    while iterations < params.max_iter {
        if assoc.pairs.len() < 6 {
            return Err(CalibError::DegenerateGeometry("too few compatible correspondences".into()));
        }
        let start = pose;
        let (mut cost, mut jtj, mut jtr) = fixed_cost(&pose, &assoc.pairs, &src, params);
        trace(round, cost);
        while iterations < params.max_iter {
            iterations += 1;
            let Some(chol) = jtj.cholesky() else {
                return Err(CalibError::DegenerateGeometry("scan match is unconstrained".into()));
            };
            let step = -chol.solve(&jtr);
            let mut scale = 1.0;
            let mut taken = None;
            for _ in 0..8 {
                let candidate = pose.boxplus(&Twist::from_vector(&(step * scale)));
                let next = fixed_cost(&candidate, &assoc.pairs, &src, params);
                if next.0 <= cost {
                    taken = Some((candidate, next));
                    break;
                }
                scale *= 0.5;
            }
            let Some((candidate, next)) = taken else {
                break;
            };
            debug_assert!(next.0 <= cost);
            pose = candidate;
            (cost, jtj, jtr) = next;
            trace(round, cost);
            if (step * scale).norm() < params.tol {
                break;
            }
        }
        assoc = associate(&pose, &src, target, params);
        if assoc.in_range < params.min_correspondences {
            return Err(CalibError::InsufficientOverlap(assoc.in_range));
        }
        round += 1;
        if pose.boxminus(&start).norm() < params.tol {
            converged = true;
            break;
        }
    }
    let mut sq = 0.0;
    let mut inliers = 0;
    let rot = pose.rot.matrix();
    for c in &assoc.pairs {
        let r = c.normal.dot(&(rot * src.points[c.src] + pose.trans - c.target));
        if r.abs() < params.inlier_dist {
            sq += r * r;
            inliers += 1;
        }
    }
    let mut fitness = if inliers > 0 {
        (sq / inliers as f64).sqrt()
    } else {
        params.inlier_dist
    };
    if !converged {
        fitness += NONCONVERGENCE_PENALTY;
    }
    Ok(LidarPoseMeasurement {
        stamp: source.stamp_end,
        pose,
        fitness,
    })
}

/// Scan-to-scan point-to-plane ICP.
pub fn icp_point_to_plane(
    source: &LidarScan,
    target: &LidarScan,
    init: &Pose,
    max_iter: usize,
    tol: f64,
) -> Result<LidarPoseMeasurement> {
    let params = IcpParams {
        max_iter,
        tol,
        ..IcpParams::default()
    };
    let map = TargetMap::build(target.positions(), &params);
    icp_against_map(source, &map, init, &params)
}

/// Objective value at `pose` (correspondences searched at that pose),
/// exposed for monotonicity checks.
pub fn icp_objective(source: &LidarScan, target: &TargetMap, pose: &Pose, params: &IcpParams) -> f64 {
    associate(pose, &Source::new(source, params), target, params).cost
}
