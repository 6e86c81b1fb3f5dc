//! Checkerboard reprojection model for the camera-IMU update, and the camera
//! side of the plane observations used by the joint update.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix2x3, Matrix3, SMatrix, SymmetricEigen, Vector2, Vector3};

use crate::error::{CalibError, Result};
use crate::filter::{FilterState, LinearizedMeasurement, CAM_POS, CAM_ROT, IMU_POS, IMU_ROT, STATE_DIM};
use crate::geometry::{hat, Pose, Rotation, Twist};
use crate::planar::{PlaneObservation, PlaneSource};

/// Corners closer than this to the camera plane are treated as behind it.
pub const MIN_DEPTH: f64 = 1e-6;
/// Minimum corners for a camera-IMU update or a board pose solve.
pub const MIN_CORNERS: usize = 6;

/// Pinhole intrinsics with radial-tangential distortion `(k1, k2, p1, p2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub distortion: [f64; 4],
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        CameraIntrinsics {
            fx: 1000.0,
            fy: 1000.0,
            cx: 800.0,
            cy: 600.0,
            width: 1600,
            height: 1200,
            distortion: [-0.05, 0.01, 5e-4, -3e-4],
        }
    }
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64
            && self.distortion.iter().all(|d| d.is_finite());
        if ok {
            Ok(())
        } else {
            Err(CalibError::InvalidArgument(format!("invalid intrinsics {self:?}")))
        }
    }

    /// Distorted normalized coordinates and their Jacobian w.r.t. the ideal
    /// ones.
    pub fn distort(&self, xy: &Vector2<f64>) -> (Vector2<f64>, Matrix2<f64>) {
        let [k1, k2, p1, p2] = self.distortion;
        let (x, y) = (xy.x, xy.y);
        let r2 = x * x + y * y;
        let radial = 1.0 + k1 * r2 + k2 * r2 * r2;
        let xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x);
        let yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y;
        let drad = 2.0 * (k1 + 2.0 * k2 * r2);
        let j = Matrix2::new(
            radial + x * x * drad + 2.0 * p1 * y + 6.0 * p2 * x,
            x * y * drad + 2.0 * p1 * x + 2.0 * p2 * y,
            x * y * drad + 2.0 * p1 * x + 2.0 * p2 * y,
            radial + y * y * drad + 6.0 * p1 * y + 2.0 * p2 * x,
        );
        (Vector2::new(xd, yd), j)
    }

    /// Inverts the distortion with five fixed-point iterations.
    pub fn undistort(&self, pixel: &Vector2<f64>) -> Vector2<f64> {
        let [k1, k2, p1, p2] = self.distortion;
        let xd = (pixel.x - self.cx) / self.fx;
        let yd = (pixel.y - self.cy) / self.fy;
        let (mut x, mut y) = (xd, yd);
        for _ in 0..5 {
            let r2 = x * x + y * y;
            let radial = 1.0 + k1 * r2 + k2 * r2 * r2;
            let dx = 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x);
            let dy = p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y;
            x = (xd - dx) / radial;
            y = (yd - dy) / radial;
        }
        Vector2::new(x, y)
    }

    /// Projects a camera-frame point, returning the pixel and `d pixel / d X_C`.
    pub fn project_with_jacobian(&self, xc: &Vector3<f64>) -> Result<(Vector2<f64>, Matrix2x3<f64>)> {
        if !(xc.z > MIN_DEPTH) {
            return Err(CalibError::BehindCamera(xc.z));
        }
        let iz = 1.0 / xc.z;
        let xy = Vector2::new(xc.x * iz, xc.y * iz);
        let (d, jd) = self.distort(&xy);
        let pixel = Vector2::new(self.fx * d.x + self.cx, self.fy * d.y + self.cy);
        let jn = Matrix2x3::new(iz, 0.0, -xc.x * iz * iz, 0.0, iz, -xc.y * iz * iz);
        let f = Matrix2::new(self.fx, 0.0, 0.0, self.fy);
        Ok((pixel, f * jd * jn))
    }

    pub fn project(&self, xc: &Vector3<f64>) -> Result<Vector2<f64>> {
        Ok(self.project_with_jacobian(xc)?.0)
    }

    /// Pinhole projection without distortion.
    pub fn project_ideal(&self, xc: &Vector3<f64>) -> Result<Vector2<f64>> {
        if !(xc.z > MIN_DEPTH) {
            return Err(CalibError::BehindCamera(xc.z));
        }
        let iz = 1.0 / xc.z;
        Ok(Vector2::new(self.fx * (xc.x * iz) + self.cx, self.fy * (xc.y * iz) + self.cy))
    }

    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0 && pixel.y >= 0.0 && pixel.x < self.width as f64 && pixel.y < self.height as f64
    }
}

/// Detected checkerboard corners of one camera frame.
#[derive(Clone, Debug, PartialEq)]
pub struct CornerObservationSet {
    pub stamp: f64,
    pub board_id: u32,
    /// `(board_index, pixel)`, indices unique within the set.
    pub corners: Vec<(usize, Vector2<f64>)>,
}

impl CornerObservationSet {
    pub fn is_empty(&self) -> bool {
        self.corners.is_empty()
    }
}

/// Checkerboard layout. Interior corners form a `rows x cols` grid centered
/// on the board origin; the board itself is `width x height` meters. The board
/// frame has x along columns, y along rows and z along the plane normal.
#[derive(Clone, Debug, PartialEq)]
pub struct BoardGeometry {
    pub rows: usize,
    pub cols: usize,
    pub spacing: f64,
    pub width: f64,
    pub height: f64,
    /// `T^G_B`
    pub pose: Pose,
}

impl Default for BoardGeometry {
    /// 1 m x 0.8 m board, 2 m ahead of the origin along +x, facing -x.
    fn default() -> Self {
        let rot = Rotation::from_matrix(&Matrix3::new(0.0, 0.0, -1.0, 1.0, 0.0, 0.0, 0.0, -1.0, 0.0));
        BoardGeometry {
            rows: 7,
            cols: 9,
            spacing: 0.09,
            width: 1.0,
            height: 0.8,
            pose: Pose::new(rot, Vector3::new(2.0, 0.0, 0.0)),
        }
    }
}

impl BoardGeometry {
    pub fn corner_count(&self) -> usize {
        self.rows * self.cols
    }

    /// Corner position in the board frame.
    pub fn local_corner(&self, index: usize) -> Vector3<f64> {
        let r = (index / self.cols) as f64;
        let c = (index % self.cols) as f64;
        Vector3::new(
            (c - 0.5 * (self.cols as f64 - 1.0)) * self.spacing,
            (r - 0.5 * (self.rows as f64 - 1.0)) * self.spacing,
            0.0,
        )
    }

    /// `X_G` for every corner, in index order.
    pub fn corner_positions(&self) -> Vec<Vector3<f64>> {
        (0..self.corner_count())
            .map(|i| self.pose.transform_point(&self.local_corner(i)))
            .collect()
    }

    /// Board outline corners in the board frame (counter-clockwise).
    pub fn outline(&self) -> [Vector3<f64>; 4] {
        let (w, h) = (0.5 * self.width, 0.5 * self.height);
        [
            Vector3::new(-w, -h, 0.0),
            Vector3::new(w, -h, 0.0),
            Vector3::new(w, h, 0.0),
            Vector3::new(-w, h, 0.0),
        ]
    }

    /// Whether a board-frame point lies within the physical board.
    pub fn contains_local(&self, p: &Vector3<f64>) -> bool {
        p.x.abs() <= 0.5 * self.width && p.y.abs() <= 0.5 * self.height
    }
}

/// The reprojection model `h(T^G_I, T^I_C, X_G)`.
pub fn project_corner(
    t_gi: &Pose,
    t_ic: &Pose,
    x_g: &Vector3<f64>,
    intr: &CameraIntrinsics,
) -> Result<Vector2<f64>> {
    let xc = t_gi.compose(t_ic).inverse_transform_point(x_g);
    intr.project(&xc)
}

/// Stacked corner residuals `z - h` with their Jacobian.
///
/// Corners that fall behind the camera are dropped from the stack.
pub fn camera_imu_residual(
    obs: &CornerObservationSet,
    state: &FilterState,
    board: &BoardGeometry,
    intr: &CameraIntrinsics,
    sigma_px: f64,
) -> Result<LinearizedMeasurement> {
    let t_gi = &state.imu_pose;
    let t_ic = &state.extr_cam;
    let rc_t = t_ic.rot.matrix().transpose();
    let mut rows: Vec<(Vector2<f64>, SMatrix<f64, 2, 12>)> = Vec::with_capacity(obs.corners.len());
    for (idx, pixel) in &obs.corners {
        if *idx >= board.corner_count() {
            return Err(CalibError::InvalidArgument(format!("corner index {idx} outside board")));
        }
        let x_g = board.pose.transform_point(&board.local_corner(*idx));
        let x_i = t_gi.inverse_transform_point(&x_g);
        let x_c = t_ic.inverse_transform_point(&x_i);
        let Ok((pred, jp)) = intr.project_with_jacobian(&x_c) else {
            continue;
        };
        let mut j = SMatrix::<f64, 2, 12>::zeros();
        j.fixed_view_mut::<2, 3>(0, 0).copy_from(&(jp * rc_t * hat(&x_i)));
        j.fixed_view_mut::<2, 3>(0, 3).copy_from(&(-jp * rc_t));
        j.fixed_view_mut::<2, 3>(0, 6).copy_from(&(jp * hat(&x_c)));
        j.fixed_view_mut::<2, 3>(0, 9).copy_from(&(-jp));
        rows.push((pixel - pred, j));
    }
    if rows.len() < MIN_CORNERS {
        return Err(CalibError::InsufficientObservations {
            got: rows.len(),
            need: MIN_CORNERS,
        });
    }
    let m = 2 * rows.len();
    let mut residual = DVector::zeros(m);
    let mut jacobian = DMatrix::zeros(m, STATE_DIM);
    for (k, (r, j)) in rows.iter().enumerate() {
        residual.fixed_rows_mut::<2>(2 * k).copy_from(r);
        for (col, block) in [(IMU_ROT, 0), (IMU_POS, 3), (CAM_ROT, 6), (CAM_POS, 9)] {
            jacobian
                .fixed_view_mut::<2, 3>(2 * k, col)
                .copy_from(&j.fixed_view::<2, 3>(0, block));
        }
    }
    Ok(LinearizedMeasurement {
        residual,
        jacobian,
        noise_cov: DMatrix::identity(m, m) * sigma_px * sigma_px,
    })
}

/// Board plane in the camera frame from the board pose `T^C_B`, normal
/// pointing toward the camera (`offset > 0`).
pub fn camera_plane_params(board_in_camera: &Pose, stamp: f64) -> PlaneObservation {
    let n = board_in_camera.rot.rotate(&Vector3::z());
    let d = -n.dot(&board_in_camera.trans);
    let (normal, offset) = if d < 0.0 { (-n, -d) } else { (n, d) };
    PlaneObservation {
        stamp,
        normal,
        offset,
        source: PlaneSource::Camera,
        inlier_count: 0,
    }
}

/// Planar homography `H` with `[x y 1]' ~ H [X Y 1]'` by normalized DLT.
pub(crate) fn homography(board: &[Vector2<f64>], image: &[Vector2<f64>]) -> Result<Matrix3<f64>> {
    fn normalizer(pts: &[Vector2<f64>]) -> Matrix3<f64> {
        let n = pts.len() as f64;
        let c = pts.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
        let d = pts.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
        let s = if d > 0.0 { std::f64::consts::SQRT_2 / d } else { 1.0 };
        Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
    }
    let tb = normalizer(board);
    let ti = normalizer(image);
    let mut ata = SMatrix::<f64, 9, 9>::zeros();
    for (b, i) in board.iter().zip(image) {
        let b = tb * Vector3::new(b.x, b.y, 1.0);
        let i = ti * Vector3::new(i.x, i.y, 1.0);
        let r1 = SMatrix::<f64, 1, 9>::from_row_slice(&[
            -b.x, -b.y, -1.0, 0.0, 0.0, 0.0, i.x * b.x, i.x * b.y, i.x,
        ]);
        let r2 = SMatrix::<f64, 1, 9>::from_row_slice(&[
            0.0, 0.0, 0.0, -b.x, -b.y, -1.0, i.y * b.x, i.y * b.y, i.y,
        ]);
        ata += r1.transpose() * r1 + r2.transpose() * r2;
    }
    let eig = SymmetricEigen::new(ata);
    let imin = eig.eigenvalues.imin();
    let h = eig.eigenvectors.column(imin);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let ti_inv = ti
        .try_inverse()
        .ok_or_else(|| CalibError::DegenerateGeometry("image points coincide".into()))?;
    Ok(ti_inv * hn * tb)
}

/// Pose of the board in the camera frame, `T^C_B`, from detected corners:
/// homography initialization followed by Gauss-Newton on reprojection error.
pub fn solve_board_pose(
    obs: &CornerObservationSet,
    board: &BoardGeometry,
    intr: &CameraIntrinsics,
) -> Result<Pose> {
    if obs.corners.len() < MIN_CORNERS {
        return Err(CalibError::InsufficientObservations {
            got: obs.corners.len(),
            need: MIN_CORNERS,
        });
    }
    let local: Vec<Vector3<f64>> = obs.corners.iter().map(|(i, _)| board.local_corner(*i)).collect();
    let plane: Vec<Vector2<f64>> = local.iter().map(|p| p.xy()).collect();
    let norm: Vec<Vector2<f64>> = obs.corners.iter().map(|(_, px)| intr.undistort(px)).collect();
    let h = homography(&plane, &norm)?;

    let (h1, h2, h3) = (h.column(0), h.column(1), h.column(2));
    let mut lambda = 2.0 / (h1.norm() + h2.norm());
    if (h3 * lambda).z < 0.0 {
        lambda = -lambda;
    }
    let r1 = h1 * lambda;
    let r2 = h2 * lambda;
    let approx = Matrix3::from_columns(&[r1, r2, r1.cross(&r2)]);
    let svd = approx.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut rot = u * vt;
    if rot.determinant() < 0.0 {
        rot = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0)) * vt;
    }
    let mut pose = Pose::new(Rotation::from_matrix(&rot), h3 * lambda);

    let cost = |pose: &Pose| -> Option<f64> {
        let mut c = 0.0;
        for ((_, px), xb) in obs.corners.iter().zip(&local) {
            let pred = intr.project(&pose.transform_point(xb)).ok()?;
            c += (px - pred).norm_squared();
        }
        Some(c)
    };
    let mut current = cost(&pose).ok_or_else(|| CalibError::DegenerateGeometry("board behind camera".into()))?;
    let mut damping = 1e-6;
    for _ in 0..50 {
        let mut jtj = SMatrix::<f64, 6, 6>::zeros();
        let mut jtr = SMatrix::<f64, 6, 1>::zeros();
        let r = pose.rot.matrix();
        for ((_, px), xb) in obs.corners.iter().zip(&local) {
            let (pred, jp) = intr.project_with_jacobian(&pose.transform_point(xb))?;
            let mut j = SMatrix::<f64, 2, 6>::zeros();
            j.fixed_view_mut::<2, 3>(0, 0).copy_from(&(jp * r));
            j.fixed_view_mut::<2, 3>(0, 3).copy_from(&(-jp * r * hat(xb)));
            jtj += j.transpose() * j;
            jtr += j.transpose() * (px - pred);
        }
        let mut improved = false;
        for _ in 0..10 {
            let mut a = jtj;
            for i in 0..6 {
                a[(i, i)] += damping * jtj[(i, i)].max(1e-12);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&jtr)) else {
                damping *= 10.0;
                continue;
            };
            let candidate = pose.boxplus(&Twist::from_vector(&step));
            match cost(&candidate) {
                Some(c) if c <= current => {
                    let done = step.norm() < 1e-12 || current - c <= 1e-15 * current.max(1e-300);
                    pose = candidate;
                    current = c;
                    damping = (damping * 0.1).max(1e-12);
                    improved = !done;
                    break;
                }
                _ => damping *= 10.0,
            }
        }
        if !improved {
            break;
        }
    }
    Ok(pose)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::{inject_error, ErrorVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pinhole() -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 800.0,
            fy: 800.0,
            cx: 600.0,
            cy: 450.0,
            width: 1200,
            height: 900,
            distortion: [0.0; 4],
        }
    }

    fn facing_state() -> FilterState {
        // Camera looking along IMU +x, board 2 m ahead.
        let t_ic = Pose::new(
            Rotation::from_rpy_degrees(-90.0, 0.0, -90.0),
            Vector3::new(0.05, 0.1, -0.02),
        );
        FilterState::new(Pose::identity(), Vector3::zeros(), Pose::identity(), t_ic, 0.0)
    }

    fn synth(state: &FilterState, board: &BoardGeometry, intr: &CameraIntrinsics) -> CornerObservationSet {
        let corners = (0..board.corner_count())
            .filter_map(|i| {
                let x = board.pose.transform_point(&board.local_corner(i));
                project_corner(&state.imu_pose, &state.extr_cam, &x, intr).ok().map(|p| (i, p))
            })
            .collect();
        CornerObservationSet {
            stamp: 0.0,
            board_id: 0,
            corners,
        }
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let intr = CameraIntrinsics::default();
        let p = intr.project(&Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(p, Vector2::new(intr.cx, intr.cy));
    }

    #[test]
    fn hand_pinhole_arithmetic() {
        let p = pinhole().project(&Vector3::new(0.1, 0.0, 1.0)).unwrap();
        assert!((p.x - 680.0).abs() < 1e-12);
        assert!((p.y - 450.0).abs() < 1e-12);
        assert!(matches!(
            pinhole().project(&Vector3::new(0.0, 0.0, -1.0)),
            Err(CalibError::BehindCamera(_))
        ));
    }

    #[test]
    fn zero_distortion_is_ideal_pinhole() {
        let intr = pinhole();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let x = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.5..4.0));
            assert_eq!(intr.project(&x).unwrap(), intr.project_ideal(&x).unwrap());
        }
    }

    #[test]
    fn undistort_inverts_distort() {
        let intr = CameraIntrinsics::default();
        for (x, y) in [(0.1, -0.2), (0.3, 0.25), (-0.35, 0.1)] {
            let xy = Vector2::new(x, y);
            let (d, _) = intr.distort(&xy);
            let px = Vector2::new(intr.fx * d.x + intr.cx, intr.fy * d.y + intr.cy);
            assert!((intr.undistort(&px) - xy).norm() < 1e-5);
        }
    }

    #[test]
    fn residual_zero_at_truth() {
        let state = facing_state();
        let board = BoardGeometry::default();
        let intr = CameraIntrinsics::default();
        let obs = synth(&state, &board, &intr);
        assert_eq!(obs.corners.len(), board.corner_count());
        let m = camera_imu_residual(&obs, &state, &board, &intr, 0.5).unwrap();
        assert!(m.residual.amax() < 1e-9);
        assert_eq!(m.dim(), 2 * board.corner_count());
    }

    #[test]
    fn first_order_response_to_extrinsic_rotation() {
        let state = facing_state();
        let board = BoardGeometry::default();
        let intr = CameraIntrinsics::default();
        let mut d = ErrorVector::zeros();
        d[CAM_ROT + 2] = 1e-4;
        let truth = inject_error(&state, &d);
        let obs = synth(&truth, &board, &intr);
        let m = camera_imu_residual(&obs, &state, &board, &intr, 0.5).unwrap();
        let dd = DVector::from_column_slice(d.as_slice());
        let pred = &m.jacobian * dd;
        assert!((&m.residual - pred).amax() < 1e-3);
        // Only IMU pose and camera extrinsic columns are populated.
        for c in 6..CAM_ROT {
            assert!(m.jacobian.column(c).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn all_corners_behind_is_insufficient() {
        let mut state = facing_state();
        state.imu_pose = Pose::from_rotation(Rotation::from_rpy_degrees(0.0, 0.0, 180.0));
        let board = BoardGeometry::default();
        let obs = synth(&facing_state(), &board, &CameraIntrinsics::default());
        assert!(matches!(
            camera_imu_residual(&obs, &state, &board, &CameraIntrinsics::default(), 0.5),
            Err(CalibError::InsufficientObservations { got: 0, .. })
        ));
    }

    #[test]
    fn plane_of_board_facing_camera() {
        let board_in_cam = Pose::new(
            Rotation::from_rpy_degrees(180.0, 0.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
        );
        let p = camera_plane_params(&board_in_cam, 0.0);
        assert!((p.normal - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-15);
        assert!((p.offset - 1.0).abs() < 1e-15);
    }

    #[test]
    fn plane_contains_board_and_matches_fit() {
        let board = BoardGeometry::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let pose = Pose::new(
                Rotation::exp(&Vector3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-3.0..3.0))),
                Vector3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(1.0..3.0)),
            );
            let plane = camera_plane_params(&pose, 0.0);
            let pts: Vec<_> = (0..board.corner_count())
                .map(|i| pose.transform_point(&board.local_corner(i)))
                .collect();
            for x in &pts {
                assert!((plane.normal.dot(x) + plane.offset).abs() < 1e-10);
            }
            // Least-squares plane of the transformed corners.
            let c = pts.iter().fold(Vector3::zeros(), |a, p| a + p) / pts.len() as f64;
            let scatter = pts.iter().fold(Matrix3::zeros(), |a, p| a + (p - c) * (p - c).transpose());
            let eig = SymmetricEigen::new(scatter);
            let mut n = eig.eigenvectors.column(eig.eigenvalues.imin()).into_owned();
            if n.dot(&c) > 0.0 {
                n = -n;
            }
            assert!((n - plane.normal).norm() < 1e-10);
            assert!((-n.dot(&c) - plane.offset).abs() < 1e-10);
            assert!(plane.offset > 0.0);
        }
    }

    #[test]
    fn board_pose_recovered_from_corners() {
        let board = BoardGeometry::default();
        let intr = CameraIntrinsics::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let mut state = facing_state();
            state.imu_pose = Pose::new(
                Rotation::exp(&Vector3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3))),
                Vector3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)),
            );
            let obs = synth(&state, &board, &intr);
            let truth = state.imu_pose.compose(&state.extr_cam).inverse().compose(&board.pose);
            let est = solve_board_pose(&obs, &board, &intr).unwrap();
            let (ang, tr) = est.distance(&truth);
            assert!(ang < 1e-10 && tr < 1e-10, "{ang} {tr}");
        }
    }
}
