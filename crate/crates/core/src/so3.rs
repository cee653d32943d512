//! Rotation-group and manifold helpers shared by the registration, the filter and the
//! simulator.
//!
//! Rotations are plain `Matrix3<f64>` values. Tangent vectors follow the rotation-first
//! `(theta, p)` stacking used everywhere in this crate.

use nalgebra::{Matrix3, UnitQuaternion, Vector3, Vector6};
use thiserror::Error;

/// Rotation vector (axis times angle, radians).
pub type RotationVector = Vector3<f64>;

/// Six-vector `(theta, p)`, rotation first.
pub type Twist = Vector6<f64>;

/// Below this angle `exp`/`log` switch to Taylor expansions.
const SMALL_ANGLE: f64 = 1e-6;

/// Orthonormality tolerance accepted by [`log_so3`].
pub const ROTATION_TOLERANCE: f64 = 1e-6;

/// Unit-norm tolerance accepted by [`s2_oplus`].
pub const UNIT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("matrix is not a rotation (orthonormality error {orthonormality:.3e}, det {det:.6})")]
    InvalidRotation { orthonormality: f64, det: f64 },
    #[error("vector is not unit-norm (norm {0:.12})")]
    InvalidNormal(f64),
}

/// Cross-product matrix: `skew(a) * b == a.cross(&b)`.
#[inline]
pub fn skew(a: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0)
}

/// Inverse of [`skew`] applied to the antisymmetric part of `m`.
#[inline]
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]) * 0.5
}

/// Exponential map `Exp(theta) = exp(skew(theta))` (Rodrigues).
pub fn exp_so3(theta: &RotationVector) -> Matrix3<f64> {
    let angle2 = theta.norm_squared();
    let angle = angle2.sqrt();
    let k = skew(theta);
    let k2 = k * k;
    if angle < SMALL_ANGLE {
        // sin(a)/a ~ 1 - a²/6, (1 - cos a)/a² ~ 1/2 - a²/24
        return Matrix3::identity() + k * (1.0 - angle2 / 6.0) + k2 * (0.5 - angle2 / 24.0);
    }
    let a = angle.sin() / angle;
    let b = (1.0 - angle.cos()) / angle2;
    Matrix3::identity() + k * a + k2 * b
}

/// Logarithm map, inverse of [`exp_so3`] for angles below pi.
pub fn log_so3(r: &Matrix3<f64>) -> Result<RotationVector, GeometryError> {
    check_rotation(r)?;
    let v = vee(r);
    let sin_angle = v.norm();
    let cos_angle = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let angle = sin_angle.atan2(cos_angle);

    if angle < SMALL_ANGLE {
        // theta ~ (1 + angle²/6) * vee(R)
        return Ok(v * (1.0 + angle * angle / 6.0));
    }
    if cos_angle > -0.5 {
        return Ok(v * (angle / sin_angle));
    }

    // Near pi, sin(angle) carries little precision. Recover the axis from the symmetric
    // part, (R + Rᵀ)/2 - cos(angle) I = (1 - cos(angle)) axis axisᵀ, and take its sign
    // from the antisymmetric part.
    let sym = (r + r.transpose()) * 0.5 - Matrix3::identity() * cos_angle;
    let mut best = 0;
    for i in 1..3 {
        if sym[(i, i)] > sym[(best, best)] {
            best = i;
        }
    }
    let mut axis: Vector3<f64> = sym.column(best).into_owned();
    axis /= axis.norm();
    if axis.dot(&v) < 0.0 {
        axis = -axis;
    }
    Ok(axis * angle)
}

/// Fails unless `RᵀR = I` and `det R = +1` within [`ROTATION_TOLERANCE`].
pub fn check_rotation(r: &Matrix3<f64>) -> Result<(), GeometryError> {
    let orthonormality = (r.transpose() * r - Matrix3::identity()).amax();
    let det = r.determinant();
    if !orthonormality.is_finite()
        || orthonormality > ROTATION_TOLERANCE
        || (det - 1.0).abs() > ROTATION_TOLERANCE
    {
        return Err(GeometryError::InvalidRotation {
            orthonormality,
            det,
        });
    }
    Ok(())
}

/// Projects a nearly orthonormal matrix back onto SO(3).
pub fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut out = u * v_t;
    if out.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        out = u * v_t;
    }
    out
}

/// Perturbation of a unit vector on the sphere: `normalize(n + (I - n nᵀ) delta)`.
///
/// The component of `delta` along `n` is discarded, so to first order the result is
/// `n + (I - n nᵀ) delta`.
pub fn s2_oplus(n: &Vector3<f64>, delta: &Vector3<f64>) -> Result<Vector3<f64>, GeometryError> {
    let norm = n.norm();
    if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOLERANCE {
        return Err(GeometryError::InvalidNormal(norm));
    }
    let tangent = delta - n * n.dot(delta);
    Ok((n + tangent).normalize())
}

/// Rigid transform `x -> R x + p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_twist(tau: &Twist) -> Self {
        Self {
            rotation: exp_so3(&tau.fixed_rows::<3>(0).into_owned()),
            translation: tau.fixed_rows::<3>(3).into_owned(),
        }
    }

    /// Quaternion in `(x, y, z, w)` order, as used by the TUM trajectory format.
    pub fn quaternion_xyzw(&self) -> [f64; 4] {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(self.rotation);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        let q = if q.w < 0.0 { -q.into_inner() } else { q.into_inner() };
        [q.i, q.j, q.k, q.w]
    }

    pub fn from_quaternion_xyzw(translation: Vector3<f64>, q: [f64; 4]) -> Self {
        let quat = nalgebra::Quaternion::new(q[3], q[0], q[1], q[2]);
        let unit = UnitQuaternion::from_quaternion(quat);
        Self {
            rotation: unit.to_rotation_matrix().into_inner(),
            translation,
        }
    }

    #[inline]
    pub fn transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.iter().all(|v| v.is_finite()) && self.translation.iter().all(|v| v.is_finite())
    }

    /// Rotation angle of `selfᵀ other` in radians.
    pub fn angle_to(&self, other: &Pose) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        let c = ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        vee(&rel).norm().atan2(c)
    }
}
