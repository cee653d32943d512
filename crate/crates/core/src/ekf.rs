//! Error-state EKF over the pose of the reference body (IMU).
//!
//! The error state is `(δθ, δp)`, rotation first, with `R = R̂ Exp(δθ)` and `p = p̂ + δp`.
//! Propagation consumes relative odometry increments; the correction step consumes the
//! camera pose produced by registration together with its covariance.

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::icp::symmetrize;
use crate::so3::{exp_so3, log_so3, orthonormalize, skew, GeometryError, Pose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EkfError {
    #[error("innovation covariance is not invertible")]
    SingularInnovation,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid filter parameter: {0}")]
    InvalidConfig(String),
}

/// Filter state: reference-body pose and 6×6 error covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EkfState {
    pub rotation: Matrix3<f64>,
    pub position: Vector3<f64>,
    pub covariance: Matrix6<f64>,
}

impl EkfState {
    pub fn new(pose: Pose, covariance: Matrix6<f64>) -> Self {
        Self {
            rotation: pose.rotation,
            position: pose.translation,
            covariance,
        }
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.rotation, self.position)
    }
}

/// Camera pose relative to the reference body.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extrinsics {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Extrinsics {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn as_pose(&self) -> Pose {
        Pose::new(self.rotation, self.translation)
    }
}

/// Relative motion of the body over `dt`, expressed in the body frame at the start of the
/// interval. `noise` is the covariance of `(rotation, translation)` increment errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdometryIncrement {
    pub dt: f64,
    pub delta_rotation: Matrix3<f64>,
    pub delta_translation: Vector3<f64>,
    pub noise: Matrix6<f64>,
}

impl OdometryIncrement {
    pub fn identity(dt: f64) -> Self {
        Self {
            dt,
            delta_rotation: Matrix3::identity(),
            delta_translation: Vector3::zeros(),
            noise: Matrix6::zeros(),
        }
    }
}

/// Registered camera pose and `Var(ν)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpMeasurement {
    pub camera_pose: Pose,
    pub covariance: Matrix6<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EkfConfig {
    /// Probability of the χ²(6) innovation gate; updates above it are skipped.
    pub gate_probability: f64,
    /// Initial standard deviation of the rotation error, radians.
    pub initial_rotation_std: f64,
    /// Initial standard deviation of the position error, meters.
    pub initial_position_std: f64,
}

impl Default for EkfConfig {
    fn default() -> Self {
        Self {
            gate_probability: 0.999,
            initial_rotation_std: 1e-3,
            initial_position_std: 1e-3,
        }
    }
}

impl EkfConfig {
    /// χ²(6) quantile at `gate_probability`.
    pub fn gate_threshold(&self) -> Result<f64, EkfError> {
        if !(self.gate_probability > 0.0 && self.gate_probability < 1.0) {
            return Err(EkfError::InvalidConfig(format!(
                "gate_probability = {}",
                self.gate_probability
            )));
        }
        Ok(ChiSquared::new(6.0).unwrap().inverse_cdf(self.gate_probability))
    }

    pub fn initial_covariance(&self) -> Matrix6<f64> {
        let r = self.initial_rotation_std * self.initial_rotation_std;
        let p = self.initial_position_std * self.initial_position_std;
        Matrix6::from_diagonal(&Vector6::new(r, r, r, p, p, p))
    }
}

/// Propagates the state through one odometry increment.
///
/// `R ← R ΔR`, `p ← p + R Δp`, `P ← F P Fᵀ + G Q Gᵀ` with
/// `F = [[ΔRᵀ, 0], [-R skew(Δp), I]]` and `G = diag(I, R)`, `R` being the rotation before
/// the step.
pub fn predict(state: &EkfState, inc: &OdometryIncrement) -> EkfState {
    let r = state.rotation;
    let mut f = Matrix6::identity();
    f.fixed_view_mut::<3, 3>(0, 0).copy_from(&inc.delta_rotation.transpose());
    f.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-r * skew(&inc.delta_translation)));
    let mut g = Matrix6::identity();
    g.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
    let covariance = symmetrize(&(f * state.covariance * f.transpose() + g * inc.noise * g.transpose()));
    EkfState {
        rotation: orthonormalize(&(r * inc.delta_rotation)),
        position: state.position + r * inc.delta_translation,
        covariance,
    }
}

/// Camera pose in the world frame: `(R R_IC, p + R p_IC)`.
pub fn camera_pose_from_state(state: &EkfState, ext: &Extrinsics) -> Pose {
    Pose::new(
        state.rotation * ext.rotation,
        state.position + state.rotation * ext.translation,
    )
}

/// Maps the registration covariance over `(theta, p)` to the covariance of the camera
/// pose measurement: `M Var(τ) Mᵀ` with `M = [[R̂_Cᵀ, 0], [-skew(p̂_C), I]]`.
pub fn icp_measurement_covariance(var_tau: &Matrix6<f64>, icp_camera_pose: &Pose) -> Matrix6<f64> {
    let mut m = Matrix6::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&icp_camera_pose.rotation.transpose());
    m.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-skew(&icp_camera_pose.translation)));
    symmetrize(&(m * var_tau * m.transpose()))
}

/// Linearized measurement matrix `[[R_ICᵀ, 0], [-R̂ skew(p_IC), I]]`.
pub fn measurement_jacobian(state: &EkfState, ext: &Extrinsics) -> Matrix6<f64> {
    let mut h = Matrix6::identity();
    h.fixed_view_mut::<3, 3>(0, 0).copy_from(&ext.rotation.transpose());
    h.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-state.rotation * skew(&ext.translation)));
    h
}

/// Innovation of a measured camera pose against the one predicted from `state`:
/// `(log(R̂_predᵀ R_meas), p_meas - p̂_pred)`.
pub fn innovation(state: &EkfState, ext: &Extrinsics, measured: &Pose) -> Result<Vector6<f64>, EkfError> {
    let predicted = camera_pose_from_state(state, ext);
    let dtheta = log_so3(&(predicted.rotation.transpose() * measured.rotation))?;
    let dp = measured.translation - predicted.translation;
    Ok(Vector6::new(dtheta.x, dtheta.y, dtheta.z, dp.x, dp.y, dp.z))
}

/// Result of [`update_with_icp`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateOutcome {
    pub state: EkfState,
    /// Normalized innovation squared.
    pub nis: f64,
    /// `false` when the innovation gate rejected the measurement (state unchanged).
    pub accepted: bool,
    pub innovation: Vector6<f64>,
}

/// EKF correction with a registered camera pose; Joseph-form covariance update.
pub fn update_with_icp(
    state: &EkfState,
    ext: &Extrinsics,
    meas: &IcpMeasurement,
    gate_threshold: f64,
) -> Result<UpdateOutcome, EkfError> {
    let z = innovation(state, ext, &meas.camera_pose)?;
    let h = measurement_jacobian(state, ext);
    let p = state.covariance;
    let s = symmetrize(&(h * p * h.transpose() + meas.covariance));
    let s_inv = s
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| s.try_inverse())
        .ok_or(EkfError::SingularInnovation)?;
    let nis = (z.transpose() * s_inv * z)[(0, 0)];
    if !nis.is_finite() {
        return Err(EkfError::SingularInnovation);
    }
    if nis > gate_threshold {
        return Ok(UpdateOutcome {
            state: *state,
            nis,
            accepted: false,
            innovation: z,
        });
    }
    let k = p * h.transpose() * s_inv;
    let dx = k * z;
    let i_kh = Matrix6::identity() - k * h;
    let covariance = symmetrize(&(i_kh * p * i_kh.transpose() + k * meas.covariance * k.transpose()));
    let dtheta = dx.fixed_rows::<3>(0).into_owned();
    let dp = dx.fixed_rows::<3>(3).into_owned();
    Ok(UpdateOutcome {
        state: EkfState {
            rotation: orthonormalize(&(state.rotation * exp_so3(&dtheta))),
            position: state.position + dp,
            covariance,
        },
        nis,
        accepted: true,
        innovation: z,
    })
}
