//! IMU preintegration between consecutive keyframes.
//!
//! Samples are accumulated with a midpoint rule into relative motion terms
//! (delta rotation, velocity, position) expressed in the body frame of the
//! earlier keyframe. First-order Jacobians with respect to the accelerometer
//! and gyroscope biases allow cheap correction when the bias estimate moves,
//! and a 9x9 covariance over (delta theta, delta v, delta p) feeds the
//! whitening of the inertial residual.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use thiserror::Error;

use crate::geometry::{
    exp_so3, left_jacobian_inv_so3, log_so3, right_jacobian_inv_so3, right_jacobian_so3, skew,
    Rotation, State, STATE_DOF, TAN_BA, TAN_BG, TAN_POS, TAN_ROT, TAN_VEL,
};
use crate::sim::ImuSample;

/// Residual block offsets inside the 15-vector returned by
/// [`PreintegratedImu::residual`]: velocity, position, rotation, then the two
/// bias random-walk blocks.
pub const RES_V: usize = 0;
pub const RES_P: usize = 3;
pub const RES_R: usize = 6;
pub const RES_BA: usize = 9;
pub const RES_BG: usize = 12;

/// Bias shift above which a first-order correction is considered unreliable
/// and the owning pipeline should re-integrate from raw samples.
pub const BIAS_RELIN_THRESHOLD: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ImuError {
    #[error("non-finite IMU sample at t={timestamp}")]
    NonFiniteSample { timestamp: f64 },
    #[error("invalid sample interval dt={0}")]
    InvalidDt(f64),
}

/// Continuous-time noise densities of the IMU. Sample variance over a step of
/// length dt is density^2 / dt; bias random-walk variance is density^2 * dt.
#[derive(Clone, Copy, Debug)]
pub struct ImuNoise {
    pub gyro_density: f64,
    pub accel_density: f64,
    pub gyro_walk_density: f64,
    pub accel_walk_density: f64,
}

impl Default for ImuNoise {
    fn default() -> Self {
        ImuNoise {
            gyro_density: 1e-4,
            accel_density: 1e-3,
            gyro_walk_density: 1e-6,
            accel_walk_density: 1e-5,
        }
    }
}

impl ImuNoise {
    pub fn from_params(p: &crate::sim::NoiseParams) -> Self {
        ImuNoise {
            gyro_density: p.gyro_noise,
            accel_density: p.accel_noise,
            gyro_walk_density: p.gyro_bias_walk,
            accel_walk_density: p.accel_bias_walk,
        }
    }
}

/// Accumulated relative motion between two keyframes.
///
/// All deltas are expressed in the body frame at the start of the interval
/// and are independent of the absolute state, so a value can be reused when
/// the keyframe estimates move during optimization.
#[derive(Clone, Debug)]
pub struct PreintegratedImu {
    pub dt_total: f64,
    pub delta_rotation: Rotation,
    pub delta_velocity: Vector3<f64>,
    pub delta_position: Vector3<f64>,
    /// Bias values subtracted from the raw measurements during accumulation.
    pub bias_accel_lin: Vector3<f64>,
    pub bias_gyro_lin: Vector3<f64>,
    /// d(delta_rotation)/d(bias_gyro), as a right tangent perturbation.
    pub d_rot_d_bg: Matrix3<f64>,
    pub d_vel_d_ba: Matrix3<f64>,
    pub d_vel_d_bg: Matrix3<f64>,
    pub d_pos_d_ba: Matrix3<f64>,
    pub d_pos_d_bg: Matrix3<f64>,
    /// Covariance of (delta theta, delta v, delta p).
    pub covariance: SMatrix<f64, 9, 9>,
    pub noise: ImuNoise,
}

impl PreintegratedImu {
    pub fn new(bias_accel: Vector3<f64>, bias_gyro: Vector3<f64>, noise: ImuNoise) -> Self {
        PreintegratedImu {
            dt_total: 0.0,
            delta_rotation: Rotation::identity(),
            delta_velocity: Vector3::zeros(),
            delta_position: Vector3::zeros(),
            bias_accel_lin: bias_accel,
            bias_gyro_lin: bias_gyro,
            d_rot_d_bg: Matrix3::zeros(),
            d_vel_d_ba: Matrix3::zeros(),
            d_vel_d_bg: Matrix3::zeros(),
            d_pos_d_ba: Matrix3::zeros(),
            d_pos_d_bg: Matrix3::zeros(),
            covariance: SMatrix::zeros(),
            noise,
        }
    }

    /// Folds one sample into the accumulator with a midpoint rule: rotation
    /// advances by exp(u dt), translation terms use the orientation at the
    /// half step.
    pub fn integrate(&mut self, sample: &ImuSample, dt: f64) -> Result<(), ImuError> {
        if !dt.is_finite() || dt <= 0.0 {
            return Err(ImuError::InvalidDt(dt));
        }
        if !(sample.gyro.iter().all(|x| x.is_finite())
            && sample.accel.iter().all(|x| x.is_finite()))
        {
            return Err(ImuError::NonFiniteSample {
                timestamp: sample.timestamp,
            });
        }
        let u = sample.gyro - self.bias_gyro_lin;
        let s = sample.accel - self.bias_accel_lin;

        let full = exp_so3(&(u * dt));
        let half = exp_so3(&(u * (dt / 2.0)));
        let mid = self.delta_rotation * half;
        let mid_m = *mid.matrix();
        let ms = mid.rotate(&s);

        // Bias Jacobian of the midpoint orientation, right-perturbation form.
        let jr_half = right_jacobian_so3(&(u * (dt / 2.0)));
        let d_mid_d_bg = half.matrix().transpose() * self.d_rot_d_bg - jr_half * (dt / 2.0);
        let m_skew_s = mid_m * skew(&s);

        // Position and velocity Jacobians read the pre-step values, so they
        // update before the delta terms and before d_rot_d_bg.
        self.d_pos_d_ba += self.d_vel_d_ba * dt - mid_m * (0.5 * dt * dt);
        self.d_pos_d_bg += self.d_vel_d_bg * dt - m_skew_s * d_mid_d_bg * (0.5 * dt * dt);
        self.d_vel_d_ba -= mid_m * dt;
        self.d_vel_d_bg -= m_skew_s * d_mid_d_bg * dt;

        let jr_full = right_jacobian_so3(&(u * dt));
        self.d_rot_d_bg = full.matrix().transpose() * self.d_rot_d_bg - jr_full * dt;

        // Error-state transition for (delta theta, delta v, delta p).
        let mut f = SMatrix::<f64, 9, 9>::identity();
        f.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&full.matrix().transpose());
        let f_vt = -m_skew_s * half.matrix().transpose() * dt;
        f.fixed_view_mut::<3, 3>(3, 0).copy_from(&f_vt);
        f.fixed_view_mut::<3, 3>(6, 0).copy_from(&(f_vt * (dt / 2.0)));
        f.fixed_view_mut::<3, 3>(6, 3)
            .copy_from(&(Matrix3::identity() * dt));

        let mut g = SMatrix::<f64, 9, 6>::zeros();
        g.fixed_view_mut::<3, 3>(0, 0).copy_from(&(jr_full * dt));
        let g_vg = m_skew_s * jr_half * (0.5 * dt * dt);
        g.fixed_view_mut::<3, 3>(3, 0).copy_from(&g_vg);
        g.fixed_view_mut::<3, 3>(6, 0).copy_from(&(g_vg * (dt / 2.0)));
        g.fixed_view_mut::<3, 3>(3, 3).copy_from(&(mid_m * dt));
        g.fixed_view_mut::<3, 3>(6, 3)
            .copy_from(&(mid_m * (0.5 * dt * dt)));

        let qg = self.noise.gyro_density * self.noise.gyro_density / dt;
        let qa = self.noise.accel_density * self.noise.accel_density / dt;
        let mut q = SMatrix::<f64, 6, 6>::zeros();
        for i in 0..3 {
            q[(i, i)] = qg;
            q[(i + 3, i + 3)] = qa;
        }
        self.covariance = f * self.covariance * f.transpose() + g * q * g.transpose();
        self.covariance = (self.covariance + self.covariance.transpose()) * 0.5;

        self.delta_position += self.delta_velocity * dt + ms * (0.5 * dt * dt);
        self.delta_velocity += ms * dt;
        self.delta_rotation = (self.delta_rotation * full).renormalize();
        self.dt_total += dt;
        Ok(())
    }

    pub fn integrate_stream(&mut self, samples: &[ImuSample], dt: f64) -> Result<(), ImuError> {
        for s in samples {
            self.integrate(s, dt)?;
        }
        Ok(())
    }

    /// Deltas evaluated at a bias estimate that moved by (d_ba, d_bg) from
    /// the linearization point, using the stored first-order Jacobians.
    fn corrected_deltas(
        &self,
        d_ba: &Vector3<f64>,
        d_bg: &Vector3<f64>,
    ) -> (Rotation, Vector3<f64>, Vector3<f64>) {
        let rot = self.delta_rotation * exp_so3(&(self.d_rot_d_bg * d_bg));
        let vel = self.delta_velocity + self.d_vel_d_ba * d_ba + self.d_vel_d_bg * d_bg;
        let pos = self.delta_position + self.d_pos_d_ba * d_ba + self.d_pos_d_bg * d_bg;
        (rot, vel, pos)
    }

    /// First-order shift of the deltas to a new bias estimate. No samples are
    /// replayed; callers should re-integrate instead once
    /// [`needs_relinearization`](Self::needs_relinearization) fires.
    pub fn correct_for_bias(&self, bias_accel: Vector3<f64>, bias_gyro: Vector3<f64>) -> Self {
        let d_ba = bias_accel - self.bias_accel_lin;
        let d_bg = bias_gyro - self.bias_gyro_lin;
        let shift = (d_ba.norm_squared() + d_bg.norm_squared()).sqrt();
        if shift > BIAS_RELIN_THRESHOLD {
            log::warn!(
                "first-order bias correction over a shift of {shift:.3}; deltas will be inaccurate"
            );
        }
        let (rot, vel, pos) = self.corrected_deltas(&d_ba, &d_bg);
        PreintegratedImu {
            delta_rotation: rot,
            delta_velocity: vel,
            delta_position: pos,
            bias_accel_lin: bias_accel,
            bias_gyro_lin: bias_gyro,
            ..self.clone()
        }
    }

    pub fn needs_relinearization(&self, bias_accel: &Vector3<f64>, bias_gyro: &Vector3<f64>) -> bool {
        let d_ba = bias_accel - self.bias_accel_lin;
        let d_bg = bias_gyro - self.bias_gyro_lin;
        (d_ba.norm_squared() + d_bg.norm_squared()).sqrt() > BIAS_RELIN_THRESHOLD
    }

    /// Chains two consecutive accumulators (`self` covers the earlier span).
    pub fn compose(&self, later: &Self) -> Self {
        let t2 = later.dt_total;
        let r1 = *self.delta_rotation.matrix();

        let rot = self.delta_rotation * later.delta_rotation;
        let vel = self.delta_velocity + self.delta_rotation.rotate(&later.delta_velocity);
        let pos = self.delta_position
            + self.delta_velocity * t2
            + self.delta_rotation.rotate(&later.delta_position);

        let r2t = later.delta_rotation.matrix().transpose();
        let d_rot_d_bg = r2t * self.d_rot_d_bg + later.d_rot_d_bg;
        let d_vel_d_ba = self.d_vel_d_ba + r1 * later.d_vel_d_ba;
        let d_vel_d_bg = self.d_vel_d_bg - r1 * skew(&later.delta_velocity) * self.d_rot_d_bg
            + r1 * later.d_vel_d_bg;
        let d_pos_d_ba = self.d_pos_d_ba + self.d_vel_d_ba * t2 + r1 * later.d_pos_d_ba;
        let d_pos_d_bg = self.d_pos_d_bg + self.d_vel_d_bg * t2
            - r1 * skew(&later.delta_position) * self.d_rot_d_bg
            + r1 * later.d_pos_d_bg;

        // First-order transport of both covariances into the composed frame.
        let mut a = SMatrix::<f64, 9, 9>::identity();
        a.fixed_view_mut::<3, 3>(0, 0).copy_from(&r2t);
        a.fixed_view_mut::<3, 3>(3, 0)
            .copy_from(&(-r1 * skew(&later.delta_velocity)));
        a.fixed_view_mut::<3, 3>(6, 0)
            .copy_from(&(-r1 * skew(&later.delta_position)));
        a.fixed_view_mut::<3, 3>(6, 3)
            .copy_from(&(Matrix3::identity() * t2));
        let mut b = SMatrix::<f64, 9, 9>::identity();
        b.fixed_view_mut::<3, 3>(3, 3).copy_from(&r1);
        b.fixed_view_mut::<3, 3>(6, 6).copy_from(&r1);
        let covariance = a * self.covariance * a.transpose() + b * later.covariance * b.transpose();

        PreintegratedImu {
            dt_total: self.dt_total + t2,
            delta_rotation: rot,
            delta_velocity: vel,
            delta_position: pos,
            bias_accel_lin: self.bias_accel_lin,
            bias_gyro_lin: self.bias_gyro_lin,
            d_rot_d_bg,
            d_vel_d_ba,
            d_vel_d_bg,
            d_pos_d_ba,
            d_pos_d_bg,
            covariance,
            noise: self.noise,
        }
    }

    /// Five-block inertial residual stacked as
    /// `[r_v, r_p, r_R, r_ba, r_bg]`. The deltas are first shifted to the
    /// previous state's bias estimate via the stored Jacobians.
    pub fn residual(
        &self,
        prev: &State,
        curr: &State,
        gravity: &Vector3<f64>,
    ) -> SVector<f64, STATE_DOF> {
        let dt = self.dt_total;
        let d_ba = prev.bias_accel - self.bias_accel_lin;
        let d_bg = prev.bias_gyro - self.bias_gyro_lin;
        let (rot_c, vel_c, pos_c) = self.corrected_deltas(&d_ba, &d_bg);

        let r_prev_t = prev.rotation.transpose();
        let r_v = r_prev_t.rotate(&(curr.velocity - prev.velocity - gravity * dt)) - vel_c;
        let r_p = r_prev_t.rotate(
            &(curr.position - prev.position - prev.velocity * dt - gravity * (0.5 * dt * dt)),
        ) - pos_c;
        let r_r = log_so3(&(r_prev_t * curr.rotation * rot_c.transpose()));

        let mut r = SVector::<f64, STATE_DOF>::zeros();
        r.fixed_rows_mut::<3>(RES_V).copy_from(&r_v);
        r.fixed_rows_mut::<3>(RES_P).copy_from(&r_p);
        r.fixed_rows_mut::<3>(RES_R).copy_from(&r_r);
        r.fixed_rows_mut::<3>(RES_BA)
            .copy_from(&(curr.bias_accel - prev.bias_accel));
        r.fixed_rows_mut::<3>(RES_BG)
            .copy_from(&(curr.bias_gyro - prev.bias_gyro));
        r
    }

    /// Analytic Jacobians of [`residual`](Self::residual) with respect to the
    /// tangent perturbations of the previous and current states.
    pub fn residual_jacobians(
        &self,
        prev: &State,
        curr: &State,
        gravity: &Vector3<f64>,
    ) -> (
        SMatrix<f64, STATE_DOF, STATE_DOF>,
        SMatrix<f64, STATE_DOF, STATE_DOF>,
    ) {
        let dt = self.dt_total;
        let d_bg = prev.bias_gyro - self.bias_gyro_lin;
        let d_ba = prev.bias_accel - self.bias_accel_lin;
        let (rot_c, _, _) = self.corrected_deltas(&d_ba, &d_bg);

        let r_prev_t = prev.rotation.matrix().transpose();
        let alpha = curr.velocity - prev.velocity - gravity * dt;
        let beta =
            curr.position - prev.position - prev.velocity * dt - gravity * (0.5 * dt * dt);
        let phi = log_so3(&(prev.rotation.transpose() * curr.rotation * rot_c.transpose()));
        let jl_inv = left_jacobian_inv_so3(&phi);
        let jr_inv = right_jacobian_inv_so3(&phi);

        let mut j_prev = SMatrix::<f64, STATE_DOF, STATE_DOF>::zeros();
        let mut j_curr = SMatrix::<f64, STATE_DOF, STATE_DOF>::zeros();
        let eye = Matrix3::identity();

        // r_v rows.
        j_prev
            .fixed_view_mut::<3, 3>(RES_V, TAN_ROT)
            .copy_from(&(r_prev_t * skew(&alpha)));
        j_prev
            .fixed_view_mut::<3, 3>(RES_V, TAN_VEL)
            .copy_from(&(-r_prev_t));
        j_prev
            .fixed_view_mut::<3, 3>(RES_V, TAN_BA)
            .copy_from(&(-self.d_vel_d_ba));
        j_prev
            .fixed_view_mut::<3, 3>(RES_V, TAN_BG)
            .copy_from(&(-self.d_vel_d_bg));
        j_curr
            .fixed_view_mut::<3, 3>(RES_V, TAN_VEL)
            .copy_from(&r_prev_t);

        // r_p rows.
        j_prev
            .fixed_view_mut::<3, 3>(RES_P, TAN_ROT)
            .copy_from(&(r_prev_t * skew(&beta)));
        j_prev
            .fixed_view_mut::<3, 3>(RES_P, TAN_POS)
            .copy_from(&(-r_prev_t));
        j_prev
            .fixed_view_mut::<3, 3>(RES_P, TAN_VEL)
            .copy_from(&(-r_prev_t * dt));
        j_prev
            .fixed_view_mut::<3, 3>(RES_P, TAN_BA)
            .copy_from(&(-self.d_pos_d_ba));
        j_prev
            .fixed_view_mut::<3, 3>(RES_P, TAN_BG)
            .copy_from(&(-self.d_pos_d_bg));
        j_curr
            .fixed_view_mut::<3, 3>(RES_P, TAN_POS)
            .copy_from(&r_prev_t);

        // r_R rows. The bias-gyro column chains the log map derivative
        // through the corrected delta rotation.
        j_prev
            .fixed_view_mut::<3, 3>(RES_R, TAN_ROT)
            .copy_from(&(-jl_inv * r_prev_t));
        let jr_corr = right_jacobian_so3(&(self.d_rot_d_bg * d_bg));
        j_prev
            .fixed_view_mut::<3, 3>(RES_R, TAN_BG)
            .copy_from(&(-jr_inv * rot_c.matrix() * jr_corr * self.d_rot_d_bg));
        j_curr
            .fixed_view_mut::<3, 3>(RES_R, TAN_ROT)
            .copy_from(&(jl_inv * r_prev_t));

        // Bias random-walk rows.
        j_prev
            .fixed_view_mut::<3, 3>(RES_BA, TAN_BA)
            .copy_from(&(-eye));
        j_prev
            .fixed_view_mut::<3, 3>(RES_BG, TAN_BG)
            .copy_from(&(-eye));
        j_curr.fixed_view_mut::<3, 3>(RES_BA, TAN_BA).copy_from(&eye);
        j_curr.fixed_view_mut::<3, 3>(RES_BG, TAN_BG).copy_from(&eye);

        (j_prev, j_curr)
    }

    /// Covariance of the full 15-block residual, in residual row order. The
    /// motion blocks permute the integrated (theta, v, p) covariance; the
    /// bias blocks use the random-walk growth over the interval.
    pub fn residual_covariance(&self) -> SMatrix<f64, STATE_DOF, STATE_DOF> {
        let mut cov = SMatrix::<f64, STATE_DOF, STATE_DOF>::zeros();
        // Integrated order is (theta, v, p); residual order is (v, p, theta).
        let map = [RES_R, RES_V, RES_P];
        for (bi, &ri) in map.iter().enumerate() {
            for (bj, &rj) in map.iter().enumerate() {
                let block = self.covariance.fixed_view::<3, 3>(3 * bi, 3 * bj).into_owned();
                cov.fixed_view_mut::<3, 3>(ri, rj).copy_from(&block);
            }
        }
        let wa = self.noise.accel_walk_density.powi(2) * self.dt_total;
        let wg = self.noise.gyro_walk_density.powi(2) * self.dt_total;
        for i in 0..3 {
            cov[(RES_BA + i, RES_BA + i)] = wa;
            cov[(RES_BG + i, RES_BG + i)] = wg;
        }
        cov
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GRAVITY;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    const DT: f64 = 0.005;

    fn sample(t: f64, gyro: Vector3<f64>, accel: Vector3<f64>) -> ImuSample {
        ImuSample {
            timestamp: t,
            gyro,
            accel,
        }
    }

    fn random_stream(rng: &mut ChaCha20Rng, n: usize, gyro_amp: f64, accel_amp: f64) -> Vec<ImuSample> {
        let mut draw = |amp: f64| {
            if amp > 0.0 {
                Vector3::from_fn(|_, _| rng.gen_range(-amp..amp))
            } else {
                Vector3::zeros()
            }
        };
        (0..n)
            .map(|k| {
                let g = draw(gyro_amp);
                let a = draw(accel_amp);
                sample(k as f64 * DT, g, a)
            })
            .collect()
    }

    #[test]
    fn fresh_accumulator_is_identity() {
        let pre = PreintegratedImu::new(Vector3::zeros(), Vector3::zeros(), ImuNoise::default());
        assert_eq!(pre.dt_total, 0.0);
        assert_eq!(pre.delta_velocity, Vector3::zeros());
        assert_eq!(pre.delta_position, Vector3::zeros());
        assert_relative_eq!(pre.delta_rotation.matrix(), &Matrix3::identity());
        assert_eq!(pre.covariance, SMatrix::<f64, 9, 9>::zeros());
    }

    #[test]
    fn constant_accel_gives_kinematic_deltas() {
        let mut pre =
            PreintegratedImu::new(Vector3::zeros(), Vector3::zeros(), ImuNoise::default());
        for k in 0..400 {
            pre.integrate(&sample(k as f64 * DT, Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0)), DT)
                .unwrap();
        }
        assert_relative_eq!(pre.dt_total, 2.0, epsilon = 1e-12);
        assert_relative_eq!(pre.delta_velocity, Vector3::new(2.0, 0.0, 0.0), epsilon = 1e-12);
        assert_relative_eq!(pre.delta_position, Vector3::new(2.0, 0.0, 0.0), epsilon = 1e-12);
        assert_relative_eq!(pre.delta_rotation.matrix(), &Matrix3::identity(), epsilon = 1e-12);
    }

    #[test]
    fn constant_gyro_matches_exponential() {
        let mut pre =
            PreintegratedImu::new(Vector3::zeros(), Vector3::zeros(), ImuNoise::default());
        let w = Vector3::new(0.0, 0.0, 0.5);
        for k in 0..200 {
            pre.integrate(&sample(k as f64 * DT, w, Vector3::zeros()), DT).unwrap();
        }
        let expected = exp_so3(&w);
        assert_relative_eq!(pre.delta_rotation.matrix(), expected.matrix(), epsilon = 1e-12);
    }

    #[test]
    fn random_stream_matches_dense_euler_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let samples = random_stream(&mut rng, 200, 0.5, 2.0);
        let mut pre =
            PreintegratedImu::new(Vector3::zeros(), Vector3::zeros(), ImuNoise::default());
        pre.integrate_stream(&samples, DT).unwrap();

        // Dense Euler reference: each sample held constant over 100 substeps.
        let h = DT / 100.0;
        let mut r = Rotation::identity();
        let mut v = Vector3::zeros();
        let mut p = Vector3::zeros();
        for s in &samples {
            for _ in 0..100 {
                p += v * h;
                v += r.rotate(&s.accel) * h;
                r = r * exp_so3(&(s.gyro * h));
            }
        }
        assert!(log_so3(&(pre.delta_rotation.transpose() * r)).norm() < 1e-4);
        assert!((pre.delta_velocity - v).norm() < 1e-4, "dv {}", (pre.delta_velocity - v).norm());
        assert!((pre.delta_position - p).norm() < 1e-4, "dp {}", (pre.delta_position - p).norm());
    }

    #[test]
    fn bias_correction_at_linearization_is_identity() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let samples = random_stream(&mut rng, 50, 0.4, 1.5);
        let ba = Vector3::new(0.01, -0.02, 0.005);
        let bg = Vector3::new(-0.002, 0.001, 0.003);
        let mut pre = PreintegratedImu::new(ba, bg, ImuNoise::default());
        pre.integrate_stream(&samples, DT).unwrap();
        let same = pre.correct_for_bias(ba, bg);
        assert_eq!(same.delta_velocity, pre.delta_velocity);
        assert_eq!(same.delta_position, pre.delta_position);
        assert_eq!(same.delta_rotation.matrix(), pre.delta_rotation.matrix());
    }

    #[test]
    fn gyro_bias_correction_matches_reintegration() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let samples: Vec<ImuSample> = random_stream(&mut rng, 200, 0.6, 0.0);
        let mut pre = PreintegratedImu::new(Vector3::zeros(), Vector3::zeros(), ImuNoise::default());
        pre.integrate_stream(&samples, DT).unwrap();

        let d_bg = Vector3::new(1.0, -1.0, 0.5).normalize() * 1e-3;
        let corrected = pre.correct_for_bias(Vector3::zeros(), d_bg);

        let mut exact = PreintegratedImu::new(Vector3::zeros(), d_bg, ImuNoise::default());
        exact.integrate_stream(&samples, DT).unwrap();

        let gap = log_so3(&(corrected.delta_rotation.transpose() * exact.delta_rotation)).norm();
        assert!(gap < 1e-5, "rotation gap {gap}");
    }

    #[test]
    fn accel_bias_correction_matches_reintegration() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let samples = random_stream(&mut rng, 200, 0.0, 2.0);
        let mut pre = PreintegratedImu::new(Vector3::zeros(), Vector3::zeros(), ImuNoise::default());
        pre.integrate_stream(&samples, DT).unwrap();

        let d_ba = Vector3::new(0.5, 0.2, -0.4) * 1e-3;
        let corrected = pre.correct_for_bias(d_ba, Vector3::zeros());

        let mut exact = PreintegratedImu::new(d_ba, Vector3::zeros(), ImuNoise::default());
        exact.integrate_stream(&samples, DT).unwrap();

        // With zero rotation the velocity delta is linear in the accel bias.
        assert!((corrected.delta_velocity - exact.delta_velocity).norm() < 1e-6);
        assert!((corrected.delta_position - exact.delta_position).norm() < 1e-6);
    }

    #[test]
    fn stationary_gravity_cancels_residual() {
        let mut pre =
            PreintegratedImu::new(Vector3::zeros(), Vector3::zeros(), ImuNoise::default());
        for k in 0..100 {
            pre.integrate(
                &sample(k as f64 * DT, Vector3::zeros(), Vector3::new(0.0, 0.0, 9.81)),
                DT,
            )
            .unwrap();
        }
        let prev = State::at_rest(0.0);
        let curr = State::at_rest(0.5);
        let r = pre.residual(&prev, &curr, &GRAVITY);
        assert!(r.norm() < 1e-10, "residual {}", r.norm());
    }

    #[test]
    fn velocity_perturbation_appears_in_first_block() {
        let mut pre =
            PreintegratedImu::new(Vector3::zeros(), Vector3::zeros(), ImuNoise::default());
        for k in 0..100 {
            pre.integrate(
                &sample(k as f64 * DT, Vector3::zeros(), Vector3::new(0.0, 0.0, 9.81)),
                DT,
            )
            .unwrap();
        }
        let prev = State::at_rest(0.0);
        let mut curr = State::at_rest(0.5);
        curr.velocity = Vector3::new(0.1, 0.0, 0.0);
        let r = pre.residual(&prev, &curr, &GRAVITY);
        assert_relative_eq!(
            Vector3::from(r.fixed_rows::<3>(RES_V)),
            Vector3::new(0.1, 0.0, 0.0),
            epsilon = 1e-12
        );
        assert!(r.fixed_rows::<12>(RES_P).norm() < 1e-12);
    }

    /// World-frame midpoint rollout of the same sample stream; the residual
    /// identities invert it exactly, so the residual must vanish at these
    /// states to machine precision.
    fn rollout(start: &State, samples: &[ImuSample], dt: f64) -> State {
        let mut st = *start;
        for s in samples {
            let u = s.gyro - st.bias_gyro;
            let body_accel = s.accel - st.bias_accel;
            let mid = st.rotation * exp_so3(&(u * (dt / 2.0)));
            let a_world = mid.rotate(&body_accel) + GRAVITY;
            st.position += st.velocity * dt + a_world * (0.5 * dt * dt);
            st.velocity += a_world * dt;
            st.rotation = st.rotation * exp_so3(&(u * dt));
            st.timestamp += dt;
        }
        st
    }

    #[test]
    fn residual_vanishes_on_consistent_states() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let samples = random_stream(&mut rng, 120, 0.8, 3.0);
        let bg = Vector3::new(0.01, -0.005, 0.002);
        let ba = Vector3::new(-0.03, 0.02, 0.01);

        let mut prev = State::at_rest(0.0);
        prev.rotation = exp_so3(&Vector3::new(0.2, -0.1, 0.7));
        prev.position = Vector3::new(4.0, -2.0, 1.0);
        prev.velocity = Vector3::new(1.0, 0.5, -0.2);
        prev.bias_accel = ba;
        prev.bias_gyro = bg;

        let curr = rollout(&prev, &samples, DT);
        let mut pre = PreintegratedImu::new(ba, bg, ImuNoise::default());
        pre.integrate_stream(&samples, DT).unwrap();
        let r = pre.residual(&prev, &curr, &GRAVITY);
        assert!(r.norm() < 1e-9, "residual at truth {}", r.norm());
    }

    #[test]
    fn bias_block_jacobians_are_signed_identities() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let samples = random_stream(&mut rng, 60, 0.5, 2.0);
        let mut pre = PreintegratedImu::new(Vector3::zeros(), Vector3::zeros(), ImuNoise::default());
        pre.integrate_stream(&samples, DT).unwrap();
        let prev = State::at_rest(0.0);
        let curr = State::at_rest(0.3);
        let (jp, jc) = pre.residual_jacobians(&prev, &curr, &GRAVITY);
        let eye = Matrix3::identity();
        assert_eq!(jp.fixed_view::<3, 3>(RES_BA, TAN_BA).into_owned(), -eye);
        assert_eq!(jp.fixed_view::<3, 3>(RES_BG, TAN_BG).into_owned(), -eye);
        assert_eq!(jc.fixed_view::<3, 3>(RES_BA, TAN_BA).into_owned(), eye);
        assert_eq!(jc.fixed_view::<3, 3>(RES_BG, TAN_BG).into_owned(), eye);
        // Untouched pairings stay zero: current-state biases never move the
        // motion blocks, previous-state position never moves r_v.
        assert_eq!(jc.fixed_view::<9, 3>(0, TAN_BA).norm(), 0.0);
        assert_eq!(jc.fixed_view::<9, 3>(0, TAN_BG).norm(), 0.0);
        assert_eq!(jp.fixed_view::<3, 3>(RES_V, TAN_POS).norm(), 0.0);
    }

    fn random_state(rng: &mut ChaCha20Rng, t: f64) -> State {
        let axis = Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        State {
            rotation: exp_so3(&axis),
            position: Vector3::from_fn(|_, _| rng.gen_range(-5.0..5.0)),
            velocity: Vector3::from_fn(|_, _| rng.gen_range(-2.0..2.0)),
            bias_accel: Vector3::from_fn(|_, _| rng.gen_range(-0.05..0.05)),
            bias_gyro: Vector3::from_fn(|_, _| rng.gen_range(-0.02..0.02)),
            timestamp: t,
        }
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let h = 1e-6;
        for _ in 0..100 {
            let n = rng.gen_range(10..40);
            let samples = random_stream(&mut rng, n, 0.6, 2.0);
            let ba = Vector3::from_fn(|_, _| rng.gen_range(-0.05..0.05));
            let bg = Vector3::from_fn(|_, _| rng.gen_range(-0.02..0.02));
            let mut pre = PreintegratedImu::new(ba, bg, ImuNoise::default());
            pre.integrate_stream(&samples, DT).unwrap();

            let prev = random_state(&mut rng, 0.0);
            let curr = random_state(&mut rng, n as f64 * DT);
            let (jp, jc) = pre.residual_jacobians(&prev, &curr, &GRAVITY);

            for d in 0..STATE_DOF {
                let mut step = SVector::<f64, STATE_DOF>::zeros();
                step[d] = h;
                let rp_hi = pre.residual(&prev.retract(&step), &curr, &GRAVITY);
                step[d] = -h;
                let rp_lo = pre.residual(&prev.retract(&step), &curr, &GRAVITY);
                let fd_prev = (rp_hi - rp_lo) / (2.0 * h);

                step[d] = h;
                let rc_hi = pre.residual(&prev, &curr.retract(&step), &GRAVITY);
                step[d] = -h;
                let rc_lo = pre.residual(&prev, &curr.retract(&step), &GRAVITY);
                let fd_curr = (rc_hi - rc_lo) / (2.0 * h);

                for row in 0..STATE_DOF {
                    let tol = |a: f64| 1e-4 * a.abs().max(1e-3);
                    let ap = jp[(row, d)];
                    assert!(
                        (fd_prev[row] - ap).abs() <= tol(ap),
                        "prev jacobian row {row} col {d}: fd {} analytic {}",
                        fd_prev[row],
                        ap
                    );
                    let ac = jc[(row, d)];
                    assert!(
                        (fd_curr[row] - ac).abs() <= tol(ac),
                        "curr jacobian row {row} col {d}: fd {} analytic {}",
                        fd_curr[row],
                        ac
                    );
                }
            }
        }
    }

    #[test]
    fn split_composition_matches_single_block() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let samples = random_stream(&mut rng, 100, 0.7, 2.5);
        let ba = Vector3::new(0.01, 0.0, -0.02);
        let bg = Vector3::new(0.0, 0.004, -0.001);

        let mut whole = PreintegratedImu::new(ba, bg, ImuNoise::default());
        whole.integrate_stream(&samples, DT).unwrap();

        let mut head = PreintegratedImu::new(ba, bg, ImuNoise::default());
        head.integrate_stream(&samples[..37], DT).unwrap();
        let mut tail = PreintegratedImu::new(ba, bg, ImuNoise::default());
        tail.integrate_stream(&samples[37..], DT).unwrap();
        let joined = head.compose(&tail);

        assert!((joined.delta_velocity - whole.delta_velocity).norm() < 1e-6);
        assert!((joined.delta_position - whole.delta_position).norm() < 1e-6);
        assert!(
            log_so3(&(joined.delta_rotation.transpose() * whole.delta_rotation)).norm() < 1e-6
        );
        assert_relative_eq!(joined.dt_total, whole.dt_total, epsilon = 1e-12);
        assert!((joined.d_rot_d_bg - whole.d_rot_d_bg).norm() < 1e-6);
        assert!((joined.d_vel_d_bg - whole.d_vel_d_bg).norm() < 1e-6);
        assert!((joined.d_pos_d_bg - whole.d_pos_d_bg).norm() < 1e-6);
        assert!((joined.covariance - whole.covariance).norm() < 1e-9 * whole.covariance.norm());
    }

    #[test]
    fn covariance_trace_is_monotone_and_symmetric() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let samples = random_stream(&mut rng, 150, 0.8, 3.0);
        let mut pre = PreintegratedImu::new(Vector3::zeros(), Vector3::zeros(), ImuNoise::default());
        let mut prev_trace = 0.0;
        for s in &samples {
            pre.integrate(s, DT).unwrap();
            let tr = pre.covariance.trace();
            assert!(tr >= prev_trace - 1e-18, "trace shrank: {prev_trace} -> {tr}");
            prev_trace = tr;
            let asym = (pre.covariance - pre.covariance.transpose()).norm();
            assert!(asym < 1e-15);
        }
        let eig = pre.covariance.symmetric_eigenvalues();
        assert!(eig.iter().all(|&l| l > -1e-15), "eigenvalues {eig:?}");
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let mut pre =
            PreintegratedImu::new(Vector3::zeros(), Vector3::zeros(), ImuNoise::default());
        let bad = sample(0.0, Vector3::new(f64::NAN, 0.0, 0.0), Vector3::zeros());
        assert!(matches!(
            pre.integrate(&bad, DT),
            Err(ImuError::NonFiniteSample { .. })
        ));
        let ok = sample(0.0, Vector3::zeros(), Vector3::zeros());
        assert!(matches!(pre.integrate(&ok, 0.0), Err(ImuError::InvalidDt(_))));
        assert!(matches!(pre.integrate(&ok, -0.1), Err(ImuError::InvalidDt(_))));
    }

    #[test]
    fn residual_covariance_permutes_blocks_and_adds_walk() {
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        let samples = random_stream(&mut rng, 80, 0.5, 2.0);
        let mut pre = PreintegratedImu::new(Vector3::zeros(), Vector3::zeros(), ImuNoise::default());
        pre.integrate_stream(&samples, DT).unwrap();
        let rc = pre.residual_covariance();
        // theta block lands on the rotation rows, v on the velocity rows.
        let theta = pre.covariance.fixed_view::<3, 3>(0, 0).into_owned();
        let vel = pre.covariance.fixed_view::<3, 3>(3, 3).into_owned();
        assert_eq!(rc.fixed_view::<3, 3>(RES_R, RES_R).into_owned(), theta);
        assert_eq!(rc.fixed_view::<3, 3>(RES_V, RES_V).into_owned(), vel);
        let t = pre.dt_total;
        assert_relative_eq!(rc[(RES_BA, RES_BA)], 1e-10 * t, epsilon = 1e-20);
        assert_relative_eq!(rc[(RES_BG, RES_BG)], 1e-12 * t, epsilon = 1e-22);
    }
}
