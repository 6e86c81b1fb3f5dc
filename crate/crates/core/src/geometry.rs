//! SO(3)/SE(3) primitives.
//!
//! Conventions used throughout the crate:
//!
//! - Quaternions are Hamilton, scalar-first, with a non-negative scalar part.
//! - `Pose` maps points from its child frame into its parent frame, so
//!   `T_GI.transform_point(p_I)` is `p_G`.
//! - Perturbations are applied on the right (body frame). `boxplus` and
//!   `boxminus` use a split chart: the rotation moves along `Exp(phi)` and the
//!   translation moves by `R * rho`, where `R` is the rotation of the pose being
//!   perturbed.

use std::fmt;
use std::ops::Mul;
use std::str::FromStr;

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3, Vector6};

use crate::error::{CalibError, Result};

/// Below this angle the exp/log coefficients switch to Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-8;

// The Jacobian coefficients lose precision to cancellation well before the
// exp/log ones do.
const JACOBIAN_TAYLOR: f64 = 1e-4;

/// Skew-symmetric cross-product matrix, `hat(a) * b == a.cross(&b)`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Unit-quaternion rotation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(UnitQuaternion<f64>);

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation(UnitQuaternion::identity())
    }

    /// Builds a rotation from raw quaternion components, normalizing and
    /// flipping to the canonical non-negative scalar hemisphere.
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Self {
        let q = Quaternion::new(w, x, y, z);
        if (q.norm_squared() - 1.0).abs() <= 4.0 * f64::EPSILON {
            // Already unit: keep the bits so text round trips are exact.
            let q = if q.w < 0.0 { -q } else { q };
            return Rotation(UnitQuaternion::new_unchecked(q));
        }
        Self::canonical(q)
    }

    fn canonical(q: Quaternion<f64>) -> Self {
        let q = if q.w < 0.0 { -q } else { q };
        Rotation(UnitQuaternion::new_normalize(q))
    }

    /// `[w, x, y, z]`.
    pub fn quaternion(&self) -> [f64; 4] {
        let q = self.0.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn as_unit_quaternion(&self) -> &UnitQuaternion<f64> {
        &self.0
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        self.0.to_rotation_matrix().into_inner()
    }

    /// Shepperd's method: picks the largest of the trace and the diagonal
    /// entries as pivot so the extraction stays well conditioned for every
    /// angle, including half turns.
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let trace = m.trace();
        let diag = [m[(0, 0)], m[(1, 1)], m[(2, 2)]];
        let (imax, dmax) = diag
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::MIN), |acc, (i, d)| if d > acc.1 { (i, d) } else { acc });
        let q = if trace >= dmax {
            let s = 2.0 * (1.0 + trace).sqrt();
            Quaternion::new(
                0.25 * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            )
        } else {
            let (i, j, k) = match imax {
                0 => (0, 1, 2),
                1 => (1, 2, 0),
                _ => (2, 0, 1),
            };
            let s = 2.0 * (1.0 + m[(i, i)] - m[(j, j)] - m[(k, k)]).sqrt();
            let mut v = [0.0; 3];
            v[i] = 0.25 * s;
            v[j] = (m[(j, i)] + m[(i, j)]) / s;
            v[k] = (m[(k, i)] + m[(i, k)]) / s;
            let w = (m[(k, j)] - m[(j, k)]) / s;
            Quaternion::new(w, v[0], v[1], v[2])
        };
        Self::canonical(q)
    }

    /// Exponential map without the finiteness check.
    pub fn exp(omega: &Vector3<f64>) -> Self {
        let theta2 = omega.norm_squared();
        let theta = theta2.sqrt();
        let (w, k) = if theta < SMALL_ANGLE {
            (1.0 - theta2 / 8.0, 0.5 - theta2 / 48.0)
        } else {
            let half = 0.5 * theta;
            (half.cos(), half.sin() / theta)
        };
        Self::canonical(Quaternion::new(w, k * omega.x, k * omega.y, k * omega.z))
    }

    /// Logarithm map, returning the axis-angle vector with angle in `[0, pi]`.
    pub fn log(&self) -> Vector3<f64> {
        let q = self.0.quaternion();
        let v = Vector3::new(q.i, q.j, q.k);
        let s = v.norm();
        // Canonical form keeps w >= 0, so the angle never exceeds pi.
        if s < SMALL_ANGLE {
            v * (2.0 / q.w) * (1.0 - s * s / (3.0 * q.w * q.w))
        } else {
            let theta = 2.0 * s.atan2(q.w);
            v * (theta / s)
        }
    }

    pub fn angle(&self) -> f64 {
        self.log().norm()
    }

    pub fn inverse(&self) -> Self {
        Self::canonical(self.0.inverse().into_inner())
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0.transform_vector(v)
    }

    pub fn inverse_rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0.inverse_transform_vector(v)
    }

    /// Builds `Rz(yaw) * Ry(pitch) * Rx(roll)` from degrees.
    pub fn from_rpy_degrees(roll: f64, pitch: f64, yaw: f64) -> Self {
        let rx = Self::exp(&Vector3::new(roll.to_radians(), 0.0, 0.0));
        let ry = Self::exp(&Vector3::new(0.0, pitch.to_radians(), 0.0));
        let rz = Self::exp(&Vector3::new(0.0, 0.0, yaw.to_radians()));
        rz * ry * rx
    }

    /// Intrinsic Z-Y-X factorization in degrees, see [`Rpy`].
    pub fn to_rpy_degrees(&self) -> Rpy {
        rotation_to_rpy_degrees(self)
    }
}

impl Mul for Rotation {
    type Output = Rotation;

    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation::canonical(self.0.into_inner() * rhs.0.into_inner())
    }
}

/// SO(3) exponential map (Rodrigues). Rejects non-finite input.
pub fn so3_exp(omega: &Vector3<f64>) -> Result<Rotation> {
    if !omega.iter().all(|x| x.is_finite()) {
        return Err(CalibError::InvalidArgument(format!(
            "non-finite rotation vector {:?}",
            omega.as_slice()
        )));
    }
    Ok(Rotation::exp(omega))
}

pub fn so3_log(r: &Rotation) -> Vector3<f64> {
    r.log()
}

/// Right Jacobian of SO(3): `Exp(phi + d) ~= Exp(phi) Exp(Jr(phi) d)`.
pub fn right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let k = hat(phi);
    if theta2 < JACOBIAN_TAYLOR * JACOBIAN_TAYLOR {
        return Matrix3::identity() - 0.5 * k + k * k / 6.0;
    }
    let theta = theta2.sqrt();
    Matrix3::identity() - (1.0 - theta.cos()) / theta2 * k
        + (theta - theta.sin()) / (theta2 * theta) * k * k
}

pub fn right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let k = hat(phi);
    if theta2 < JACOBIAN_TAYLOR * JACOBIAN_TAYLOR {
        return Matrix3::identity() + 0.5 * k + (1.0 / 12.0 + theta2 / 720.0) * k * k;
    }
    let theta = theta2.sqrt();
    let c = 1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Matrix3::identity() + 0.5 * k + c * k * k
}

/// Inverse left Jacobian, `Jl^-1(phi) = Jr^-1(-phi)`.
pub fn left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    right_jacobian_inv(&(-phi))
}

/// Roll/pitch/yaw in degrees for reporting.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rpy {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
    /// Pitch within 1e-9 degrees of +-90; yaw is then reported as zero.
    pub gimbal_lock: bool,
}

/// Factorizes `R = Rz(yaw) Ry(pitch) Rx(roll)` with pitch in `[-90, 90]`.
pub fn rotation_to_rpy_degrees(r: &Rotation) -> Rpy {
    let m = r.matrix();
    let sp = (-m[(2, 0)]).clamp(-1.0, 1.0);
    let pitch = sp.asin();
    if (pitch.abs().to_degrees() - 90.0).abs() < 1e-9 {
        // Only roll -/+ yaw is determined; put it all in roll.
        let roll = if sp > 0.0 {
            m[(0, 1)].atan2(m[(1, 1)])
        } else {
            (-m[(0, 1)]).atan2(m[(1, 1)])
        };
        return Rpy {
            roll: roll.to_degrees(),
            pitch: pitch.to_degrees(),
            yaw: 0.0,
            gimbal_lock: true,
        };
    }
    let roll = m[(2, 1)].atan2(m[(2, 2)]);
    let yaw = m[(1, 0)].atan2(m[(0, 0)]);
    Rpy {
        roll: roll.to_degrees(),
        pitch: pitch.to_degrees(),
        yaw: yaw.to_degrees(),
        gimbal_lock: false,
    }
}

/// Local tangent vector `[rho; phi]` used by the split SE(3) chart.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Twist {
    pub rho: Vector3<f64>,
    pub phi: Vector3<f64>,
}

impl Twist {
    pub fn new(rho: Vector3<f64>, phi: Vector3<f64>) -> Self {
        Twist { rho, phi }
    }

    pub fn zero() -> Self {
        Twist::default()
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Twist {
            rho: v.fixed_rows::<3>(0).into_owned(),
            phi: v.fixed_rows::<3>(3).into_owned(),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.rho);
        v.fixed_rows_mut::<3>(3).copy_from(&self.phi);
        v
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }
}

/// Rigid transform in SE(3).
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Pose {
    pub rot: Rotation,
    pub trans: Vector3<f64>,
}

impl Pose {
    pub fn new(rot: Rotation, trans: Vector3<f64>) -> Self {
        Pose { rot, trans }
    }

    pub fn identity() -> Self {
        Pose::default()
    }

    pub fn from_translation(trans: Vector3<f64>) -> Self {
        Pose::new(Rotation::identity(), trans)
    }

    pub fn from_rotation(rot: Rotation) -> Self {
        Pose::new(rot, Vector3::zeros())
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rot: self.rot * other.rot,
            trans: self.rot.rotate(&other.trans) + self.trans,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rot = self.rot.inverse();
        Pose {
            rot,
            trans: -rot.rotate(&self.trans),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rot.rotate(p) + self.trans
    }

    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rot.inverse_rotate(&(p - self.trans))
    }

    /// Right retraction: `rot * Exp(phi)`, `trans + rot * rho`.
    pub fn boxplus(&self, delta: &Twist) -> Pose {
        Pose {
            rot: self.rot * Rotation::exp(&delta.phi),
            trans: self.trans + self.rot.rotate(&delta.rho),
        }
    }

    /// Local difference `self (-) base`, the inverse of [`Pose::boxplus`].
    pub fn boxminus(&self, base: &Pose) -> Twist {
        Twist {
            rho: base.rot.inverse_rotate(&(self.trans - base.trans)),
            phi: (base.rot.inverse() * self.rot).log(),
        }
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rot.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.trans);
        m
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Pose {
        Pose {
            rot: Rotation::from_matrix(&m.fixed_view::<3, 3>(0, 0).into_owned()),
            trans: m.fixed_view::<3, 1>(0, 3).into_owned(),
        }
    }

    /// Rotation angle (rad) and translation norm (m) of `self^-1 * other`.
    pub fn distance(&self, other: &Pose) -> (f64, f64) {
        let rel = self.inverse().compose(other);
        (rel.rot.angle(), rel.trans.norm())
    }
}

impl Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

pub fn pose_compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

pub fn pose_inverse(a: &Pose) -> Pose {
    a.inverse()
}

pub fn pose_boxplus(a: &Pose, delta: &Twist) -> Pose {
    a.boxplus(delta)
}

pub fn pose_boxminus(a: &Pose, b: &Pose) -> Twist {
    a.boxminus(b)
}

/// `qw qx qy qz tx ty tz`
impl fmt::Display for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [w, x, y, z] = self.rot.quaternion();
        write!(
            f,
            "{} {} {} {} {} {} {}",
            w, x, y, z, self.trans.x, self.trans.y, self.trans.z
        )
    }
}

impl FromStr for Pose {
    type Err = CalibError;

    fn from_str(s: &str) -> Result<Pose> {
        let vals = s
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| CalibError::InvalidArgument(format!("bad pose field {t:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != 7 {
            return Err(CalibError::InvalidArgument(format!(
                "pose needs 7 numbers, got {}",
                vals.len()
            )));
        }
        let qn = (vals[0] * vals[0] + vals[1] * vals[1] + vals[2] * vals[2] + vals[3] * vals[3]).sqrt();
        if !(qn > 0.0 && qn.is_finite()) || vals.iter().any(|v| !v.is_finite()) {
            return Err(CalibError::InvalidArgument(format!("degenerate pose {s:?}")));
        }
        Ok(Pose::new(
            Rotation::from_quaternion(vals[0], vals[1], vals[2], vals[3]),
            Vector3::new(vals[4], vals[5], vals[6]),
        ))
    }
}
