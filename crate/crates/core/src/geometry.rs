//! SO(3)/SE(3) primitives and the robot state.
//!
//! Conventions used throughout the crate: world frame `W`, body frame `B`
//! coincident with the IMU; x forward, y left, z up. Rotations are stored as
//! 3x3 matrices; rotation residuals are minimal 3-vectors via [`log_so3`].
//! During optimization, rotations are updated by a left-multiplied
//! `exp_so3(delta)` so state increments live in a local tangent space.

use nalgebra::{Matrix3, SVector, Vector3};

/// Gravity in the world frame, m/s^2.
pub const GRAVITY: Vector3<f64> = Vector3::new(0.0, 0.0, -9.81);

/// Element of SO(3), stored as an orthonormal 3x3 matrix with det +1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Wraps a matrix assumed to already be orthonormal.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Rotation {
        Rotation(self.0.transpose())
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Rotates by the inverse, i.e. `R^T v`.
    pub fn unrotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0.transpose() * v
    }

    /// Maximum absolute entry of `R^T R - I`; 0 for a perfectly orthonormal matrix.
    pub fn orthonormality_error(&self) -> f64 {
        let e = self.0.transpose() * self.0 - Matrix3::identity();
        e.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
    }

    /// Projects back onto SO(3) via SVD. Products of rotations drift only at
    /// machine-epsilon scale, so this is needed rarely (long integration chains).
    pub fn renormalize(&self) -> Rotation {
        let svd = self.0.svd(true, true);
        let u = svd.u.unwrap();
        let vt = svd.v_t.unwrap();
        let d = (u * vt).determinant();
        let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d.signum()));
        Rotation(u * fix * vt)
    }

    /// Rotation about z by `yaw` radians.
    pub fn from_yaw(yaw: f64) -> Rotation {
        exp_so3(&Vector3::new(0.0, 0.0, yaw))
    }

    /// ZYX Euler composition: `Rz(yaw) * Ry(pitch) * Rx(roll)`.
    pub fn from_euler_zyx(roll: f64, pitch: f64, yaw: f64) -> Rotation {
        let rz = exp_so3(&Vector3::new(0.0, 0.0, yaw));
        let ry = exp_so3(&Vector3::new(0.0, pitch, 0.0));
        let rx = exp_so3(&Vector3::new(roll, 0.0, 0.0));
        rz * ry * rx
    }

    /// Unit quaternion (x, y, z, w), w >= 0. Used by the TUM trajectory format.
    pub fn to_quaternion_xyzw(&self) -> [f64; 4] {
        let m = &self.0;
        let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let (x, y, z, w);
        if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            w = 0.25 * s;
            x = (m[(2, 1)] - m[(1, 2)]) / s;
            y = (m[(0, 2)] - m[(2, 0)]) / s;
            z = (m[(1, 0)] - m[(0, 1)]) / s;
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            w = (m[(2, 1)] - m[(1, 2)]) / s;
            x = 0.25 * s;
            y = (m[(0, 1)] + m[(1, 0)]) / s;
            z = (m[(0, 2)] + m[(2, 0)]) / s;
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            w = (m[(0, 2)] - m[(2, 0)]) / s;
            x = (m[(0, 1)] + m[(1, 0)]) / s;
            y = 0.25 * s;
            z = (m[(1, 2)] + m[(2, 1)]) / s;
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            w = (m[(1, 0)] - m[(0, 1)]) / s;
            x = (m[(0, 2)] + m[(2, 0)]) / s;
            y = (m[(1, 2)] + m[(2, 1)]) / s;
            z = 0.25 * s;
        }
        if w < 0.0 {
            [-x, -y, -z, -w]
        } else {
            [x, y, z, w]
        }
    }

    pub fn from_quaternion_xyzw(q: [f64; 4]) -> Rotation {
        let [x, y, z, w] = q;
        let n = (x * x + y * y + z * z + w * w).sqrt();
        let (x, y, z, w) = (x / n, y / n, z / n, w / n);
        let m = Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        );
        Rotation(m)
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl std::ops::Mul<&Rotation> for &Rotation {
    type Output = Rotation;
    fn mul(self, rhs: &Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

/// Skew-symmetric (hat) matrix: `skew(w) * v == w x v`.
pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Rodrigues exponential map from a rotation vector to SO(3).
pub fn exp_so3(omega: &Vector3<f64>) -> Rotation {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let w = skew(omega);
    let m = if theta < 1e-6 {
        // Taylor: sin(t)/t ~ 1 - t^2/6, (1-cos t)/t^2 ~ 1/2 - t^2/24
        Matrix3::identity() + w * (1.0 - theta2 / 6.0) + w * w * (0.5 - theta2 / 24.0)
    } else {
        Matrix3::identity() + w * (theta.sin() / theta) + w * w * ((1.0 - theta.cos()) / theta2)
    };
    Rotation(m)
}

/// Logarithm map: minimal axis-angle vector with norm <= pi.
pub fn log_so3(r: &Rotation) -> Vector3<f64> {
    let m = r.matrix();
    let trace = (m[(0, 0)] + m[(1, 1)] + m[(2, 2)]).clamp(-1.0, 3.0);
    let cos_theta = ((trace - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    let axis_unnormalized = Vector3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    );
    if theta < 1e-6 {
        // theta/(2 sin theta) ~ 1/2 + theta^2/12
        return axis_unnormalized * (0.5 + theta * theta / 12.0);
    }
    if std::f64::consts::PI - theta < 1e-4 {
        // Near pi the off-diagonal differences vanish; recover the axis from
        // the diagonal of R = I + 2 sin^2(theta/2) (aa^T - I) ~ 2 aa^T - I.
        let diag = Vector3::new(m[(0, 0)], m[(1, 1)], m[(2, 2)]);
        let mut axis = Vector3::new(
            ((diag.x + 1.0) / 2.0).max(0.0).sqrt(),
            ((diag.y + 1.0) / 2.0).max(0.0).sqrt(),
            ((diag.z + 1.0) / 2.0).max(0.0).sqrt(),
        );
        // Fix signs using the largest component as reference.
        let k = axis.imax();
        let sign_of = |v: f64| if v >= 0.0 { 1.0 } else { -1.0 };
        match k {
            0 => {
                axis.y *= sign_of(m[(0, 1)] + m[(1, 0)]);
                axis.z *= sign_of(m[(0, 2)] + m[(2, 0)]);
            }
            1 => {
                axis.x *= sign_of(m[(0, 1)] + m[(1, 0)]);
                axis.z *= sign_of(m[(1, 2)] + m[(2, 1)]);
            }
            _ => {
                axis.x *= sign_of(m[(0, 2)] + m[(2, 0)]);
                axis.y *= sign_of(m[(1, 2)] + m[(2, 1)]);
            }
        }
        axis.normalize_mut();
        // Disambiguate theta slightly below pi via the unnormalized axis when
        // it still carries signal, otherwise accept pi.
        let sin_theta = theta.sin();
        if sin_theta > 1e-9 && axis_unnormalized.norm() > 1e-9 {
            let scaled = axis_unnormalized / (2.0 * sin_theta);
            if scaled.dot(&axis) < 0.0 {
                return -axis * theta;
            }
        }
        return axis * theta;
    }
    axis_unnormalized * (theta / (2.0 * theta.sin()))
}

/// Right Jacobian of SO(3): `exp(w + dw) ~ exp(w) exp(Jr(w) dw)`.
pub fn right_jacobian_so3(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let w = skew(omega);
    if theta < 1e-6 {
        Matrix3::identity() - w * 0.5 + w * w * (1.0 / 6.0 - theta2 / 120.0)
    } else {
        Matrix3::identity() - w * ((1.0 - theta.cos()) / theta2)
            + w * w * ((theta - theta.sin()) / (theta2 * theta))
    }
}

/// Inverse of the right Jacobian.
pub fn right_jacobian_inv_so3(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let w = skew(omega);
    if theta < 1e-6 {
        Matrix3::identity() + w * 0.5 + w * w * (1.0 / 12.0 + theta2 / 720.0)
    } else {
        let cot_half = 1.0 / (theta / 2.0).tan();
        Matrix3::identity() + w * 0.5 + w * w * ((1.0 / theta2) * (1.0 - theta * cot_half / 2.0))
    }
}

/// Inverse of the left Jacobian, `Jl^{-1}(w) = Jr^{-1}(-w)`.
pub fn left_jacobian_inv_so3(omega: &Vector3<f64>) -> Matrix3<f64> {
    right_jacobian_inv_so3(&(-omega))
}

/// Rigid transform in SE(3): rotation then translation.
#[derive(Clone, Copy, Debug)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Rotation::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation.rotate(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -rt.rotate(&self.translation),
        }
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    /// Relative pose taking this frame to `other`: `self^{-1} * other`.
    /// Applies a 6-vector tangent increment `[delta_theta, delta_t]` with the
    /// same left-multiplied rotation convention as [`State::retract`].
    pub fn retract(&self, delta: &SVector<f64, 6>) -> Pose {
        Pose {
            rotation: exp_so3(&delta.fixed_rows::<3>(0).into()) * self.rotation,
            translation: self.translation + delta.fixed_rows::<3>(3),
        }
    }

    pub fn relative_to(&self, other: &Pose) -> Pose {
        self.inverse().compose(other)
    }
}

/// Per-keyframe robot state: orientation, position, velocity and IMU biases.
#[derive(Clone, Copy, Debug)]
pub struct State {
    pub rotation: Rotation,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub bias_accel: Vector3<f64>,
    pub bias_gyro: Vector3<f64>,
    pub timestamp: f64,
}

/// Tangent dimension of a [`State`]: rotation, position, velocity and the two
/// bias vectors, three components each.
pub const STATE_DOF: usize = 15;

/// Offsets of the tangent blocks inside a 15-vector. Every module that
/// linearizes around a state uses this layout.
pub const TAN_ROT: usize = 0;
pub const TAN_POS: usize = 3;
pub const TAN_VEL: usize = 6;
pub const TAN_BA: usize = 9;
pub const TAN_BG: usize = 12;

impl State {
    pub fn at_rest(timestamp: f64) -> Self {
        State {
            rotation: Rotation::identity(),
            position: Vector3::zeros(),
            velocity: Vector3::zeros(),
            bias_accel: Vector3::zeros(),
            bias_gyro: Vector3::zeros(),
            timestamp,
        }
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.rotation, self.position)
    }

    /// Applies a tangent increment. Rotation is perturbed on the left,
    /// `R <- exp(delta_theta) * R`; all other blocks are additive.
    pub fn retract(&self, delta: &SVector<f64, STATE_DOF>) -> State {
        State {
            rotation: exp_so3(&delta.fixed_rows::<3>(TAN_ROT).into()) * self.rotation,
            position: self.position + delta.fixed_rows::<3>(TAN_POS),
            velocity: self.velocity + delta.fixed_rows::<3>(TAN_VEL),
            bias_accel: self.bias_accel + delta.fixed_rows::<3>(TAN_BA),
            bias_gyro: self.bias_gyro + delta.fixed_rows::<3>(TAN_BG),
            timestamp: self.timestamp,
        }
    }
}
