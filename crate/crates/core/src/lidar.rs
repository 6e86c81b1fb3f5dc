//! LiDAR-IMU measurement model: the scan-matched LiDAR pose relative to the
//! anchor scan, predicted by conjugating the IMU motion with `T^I_L`.

use nalgebra::{DMatrix, DVector, Matrix3};

use crate::error::{CalibError, Result};
use crate::filter::{FilterState, LinearizedMeasurement, IMU_POS, IMU_ROT, LIDAR_POS, LIDAR_ROT, STATE_DIM};
use crate::geometry::{hat, left_jacobian_inv, Pose};

/// Scan-match result for one scan.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LidarPoseMeasurement {
    /// Scan end time.
    pub stamp: f64,
    /// LiDAR frame at this scan relative to the LiDAR frame at the anchor scan.
    pub pose: Pose,
    /// Inlier RMS point-to-plane distance of the match, meters.
    pub fitness: f64,
}

/// Noise and quality settings for scan-match measurements.
#[derive(Clone, Debug, PartialEq)]
pub struct LidarNoise {
    /// Rotation standard deviation, radians.
    pub sigma_rot: f64,
    /// Translation standard deviation, meters.
    pub sigma_trans: f64,
    /// Fitness at which the standard deviations double.
    pub fitness_scale: f64,
    /// Matches with worse fitness are rejected.
    pub max_fitness: f64,
}

impl Default for LidarNoise {
    fn default() -> Self {
        LidarNoise {
            sigma_rot: 0.2f64.to_radians(),
            sigma_trans: 0.01,
            fitness_scale: 0.05,
            max_fitness: 0.05,
        }
    }
}

/// `T_IL^-1 * anchor^-1 * T_GIk * T_IL`
pub fn predict_lidar_pose(anchor: &Pose, t_gik: &Pose, t_il: &Pose) -> Pose {
    t_il.inverse().compose(&anchor.inverse()).compose(t_gik).compose(t_il)
}

/// Residual `z ⊖ h(x)` with its Jacobian on the IMU pose and LiDAR extrinsic
/// blocks. The anchor pose is held fixed.
pub fn lidar_imu_residual(
    z: &LidarPoseMeasurement,
    state: &FilterState,
    noise: &LidarNoise,
) -> Result<LinearizedMeasurement> {
    let anchor = state.anchor_pose.ok_or(CalibError::AnchorUnset)?;
    if !(z.fitness >= 0.0) || z.fitness > noise.max_fitness {
        return Err(CalibError::MeasurementQuality {
            fitness: z.fitness,
            threshold: noise.max_fitness,
        });
    }
    let e = &state.extr_lidar;
    let b = anchor.inverse().compose(&state.imu_pose);
    let h = e.inverse().compose(&b).compose(e);
    let r = z.pose.boxminus(&h);

    let re_t = e.rot.matrix().transpose();
    let rb = b.rot.matrix();
    let rh_t = h.rot.matrix().transpose();
    let i3 = Matrix3::identity();

    // Derivatives of the prediction's own chart coordinates (rho, phi).
    let dphi_dthe = i3 - rh_t;
    let dphi_dthk = re_t;
    let drho_dthk = -rh_t * re_t * rb * hat(&e.trans);
    let drho_dpk = rh_t * re_t * rb;
    let drho_dthe = rh_t * hat(&h.trans);
    let drho_dpe = rh_t * re_t * (rb - i3) * e.rot.matrix();

    let rho0 = hat(&r.rho);
    let jl = left_jacobian_inv(&r.phi);
    let zero = Matrix3::zeros();
    let mut jacobian = DMatrix::zeros(6, STATE_DIM);
    for (col, drho, dphi) in [
        (IMU_ROT, drho_dthk, dphi_dthk),
        (IMU_POS, drho_dpk, zero),
        (LIDAR_ROT, drho_dthe, dphi_dthe),
        (LIDAR_POS, drho_dpe, zero),
    ] {
        jacobian.fixed_view_mut::<3, 3>(0, col).copy_from(&(drho - rho0 * dphi));
        jacobian.fixed_view_mut::<3, 3>(3, col).copy_from(&(jl * dphi));
    }

    let inflate = 1.0 + z.fitness / noise.fitness_scale;
    let (st, sr) = (noise.sigma_trans * inflate, noise.sigma_rot * inflate);
    let noise_cov = DMatrix::from_diagonal(&DVector::from_column_slice(&[
        st * st,
        st * st,
        st * st,
        sr * sr,
        sr * sr,
        sr * sr,
    ]));
    Ok(LinearizedMeasurement {
        residual: DVector::from_column_slice(r.to_vector().as_slice()),
        jacobian,
        noise_cov,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::{inject_error, ErrorVector};
    use crate::geometry::{Rotation, Twist};
    use nalgebra::{Vector3, Vector6};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng, rot: f64, trans: f64) -> Pose {
        Pose::new(
            Rotation::exp(&Vector3::from_fn(|_, _| rng.gen_range(-rot..rot))),
            Vector3::from_fn(|_, _| rng.gen_range(-trans..trans)),
        )
    }

    fn state(rng: &mut ChaCha8Rng) -> FilterState {
        let mut s = FilterState::new(
            random_pose(rng, 1.0, 1.0),
            Vector3::zeros(),
            random_pose(rng, 3.0, 0.3),
            random_pose(rng, 3.0, 0.3),
            0.0,
        );
        s.anchor_pose = Some(random_pose(rng, 1.0, 1.0));
        s
    }

    #[test]
    fn prediction_at_anchor_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_pose(&mut rng, 2.0, 1.0);
        let e = random_pose(&mut rng, 2.0, 1.0);
        let (ang, tr) = predict_lidar_pose(&a, &a, &e).distance(&Pose::identity());
        assert!(ang < 1e-12 && tr < 1e-12);
    }

    #[test]
    fn identity_extrinsic_collapses_conjugation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_pose(&mut rng, 2.0, 1.0);
        let k = random_pose(&mut rng, 2.0, 1.0);
        let (ang, tr) = predict_lidar_pose(&a, &k, &Pose::identity()).distance(&a.inverse().compose(&k));
        assert!(ang < 1e-12 && tr < 1e-12);
    }

    #[test]
    fn prediction_matches_matrix_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let a = random_pose(&mut rng, 3.0, 2.0);
            let k = random_pose(&mut rng, 3.0, 2.0);
            let e = random_pose(&mut rng, 3.0, 2.0);
            let m = e.matrix().try_inverse().unwrap() * a.matrix().try_inverse().unwrap() * k.matrix() * e.matrix();
            assert!((predict_lidar_pose(&a, &k, &e).matrix() - m).amax() < 1e-12);
        }
    }

    #[test]
    fn pure_translation_is_seen_unrotated() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e = Pose::from_translation(Vector3::new(0.1, -0.2, 0.3));
        let a = Pose::from_translation(Vector3::new(1.0, 2.0, 3.0));
        let step = Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        let k = Pose::from_translation(a.trans + step);
        let h = predict_lidar_pose(&a, &k, &e);
        assert!((h.trans - step).norm() < 1e-12);
        assert!(h.rot.angle() < 1e-12);
    }

    #[test]
    fn residual_zero_when_measurement_equals_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = state(&mut rng);
        let z = LidarPoseMeasurement {
            stamp: 0.0,
            pose: predict_lidar_pose(s.anchor_pose.as_ref().unwrap(), &s.imu_pose, &s.extr_lidar),
            fitness: 0.0,
        };
        let m = lidar_imu_residual(&z, &s, &LidarNoise::default()).unwrap();
        assert!(m.residual.amax() < 1e-14);
    }

    #[test]
    fn first_order_in_extrinsic_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = state(&mut rng);
        let mut d = ErrorVector::zeros();
        d[LIDAR_POS] = 1e-4;
        let truth = inject_error(&s, &d);
        let z = LidarPoseMeasurement {
            stamp: 0.0,
            pose: predict_lidar_pose(truth.anchor_pose.as_ref().unwrap(), &truth.imu_pose, &truth.extr_lidar),
            fitness: 0.0,
        };
        let m = lidar_imu_residual(&z, &s, &LidarNoise::default()).unwrap();
        let pred = &m.jacobian * DVector::from_column_slice(d.as_slice());
        assert!((&m.residual - pred).amax() < 1e-7);
    }

    #[test]
    fn jacobian_with_nonzero_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = state(&mut rng);
        let h = predict_lidar_pose(s.anchor_pose.as_ref().unwrap(), &s.imu_pose, &s.extr_lidar);
        let off = Twist::from_vector(&Vector6::new(0.05, -0.02, 0.03, 0.2, -0.1, 0.3));
        let z = LidarPoseMeasurement {
            stamp: 0.0,
            pose: h.boxplus(&off),
            fitness: 0.0,
        };
        let m = lidar_imu_residual(&z, &s, &LidarNoise::default()).unwrap();
        let eps = 1e-6;
        for c in 0..STATE_DIM {
            let mut d = ErrorVector::zeros();
            d[c] = eps;
            let rp = lidar_imu_residual(&z, &inject_error(&s, &d), &LidarNoise::default()).unwrap();
            d[c] = -eps;
            let rm = lidar_imu_residual(&z, &inject_error(&s, &d), &LidarNoise::default()).unwrap();
            let fd = -(rp.residual - rm.residual) / (2.0 * eps);
            assert!((fd - m.jacobian.column(c)).amax() < 1e-7, "column {c}");
        }
    }

    #[test]
    fn quality_and_ordering_faults() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut s = state(&mut rng);
        let z = LidarPoseMeasurement {
            stamp: 0.0,
            pose: Pose::identity(),
            fitness: 0.2,
        };
        assert!(matches!(
            lidar_imu_residual(&z, &s, &LidarNoise::default()),
            Err(CalibError::MeasurementQuality { .. })
        ));
        s.anchor_pose = None;
        let z = LidarPoseMeasurement { fitness: 0.0, ..z };
        assert!(matches!(
            lidar_imu_residual(&z, &s, &LidarNoise::default()),
            Err(CalibError::AnchorUnset)
        ));
    }

    #[test]
    fn fitness_inflates_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = state(&mut rng);
        let noise = LidarNoise::default();
        let z = |fitness| LidarPoseMeasurement {
            stamp: 0.0,
            pose: Pose::identity(),
            fitness,
        };
        let a = lidar_imu_residual(&z(0.0), &s, &noise).unwrap();
        let b = lidar_imu_residual(&z(0.05), &s, &noise).unwrap();
        assert!((b.noise_cov[(0, 0)] / a.noise_cov[(0, 0)] - 4.0).abs() < 1e-12);
    }
}
