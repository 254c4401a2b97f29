//! Closed-form trajectory: a chain of holds, spins, straights and
//! constant-yaw-rate arcs in the z=0 plane, traversed at constant speed.
//!
//! Every kinematic quantity is evaluated analytically at arbitrary time, so
//! ground truth carries no integration error and closed paths close exactly.
//! Within a straight or an arc the body-frame angular rate and specific force
//! are constant, which keeps zero-order-hold IMU integration exact as long as
//! segment transitions land on the sample grid.

use crate::geometry::{Rotation, GRAVITY};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::SimError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentSpec {
    /// Park in place.
    Hold { duration: f64 },
    /// Rotate in place at a constant yaw rate (rad/s, positive left).
    Spin { yaw_rate: f64, duration: f64 },
    /// Drive straight ahead.
    Straight { length: f64 },
    /// Constant-radius turn through `angle` radians (positive left).
    Arc { radius: f64, angle: f64 },
}

/// Sinusoidal roll/pitch tilt layered on the planar path. The body still
/// follows the same positions; only its orientation is excited, giving the
/// IMU out-of-plane signal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TiltExcitation {
    pub roll_amplitude: f64,
    pub pitch_amplitude: f64,
    pub frequency_hz: f64,
}

/// One straight stretch of the path, in W.
#[derive(Clone, Copy, Debug)]
pub struct StraightRun {
    pub start: Vector3<f64>,
    pub end: Vector3<f64>,
}

/// Full analytic state of the body at one instant.
#[derive(Clone, Copy, Debug)]
pub struct TruthPoint {
    pub rotation: Rotation,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub accel_world: Vector3<f64>,
    pub omega_body: Vector3<f64>,
}

impl TruthPoint {
    /// Ideal accelerometer reading: specific force in the body frame.
    pub fn specific_force(&self) -> Vector3<f64> {
        self.rotation.unrotate(&(self.accel_world - GRAVITY))
    }
}

#[derive(Clone, Copy, Debug)]
enum SegKind {
    Hold,
    Spin { rate: f64 },
    Straight { speed: f64 },
    Arc {
        center: Vector3<f64>,
        radius: f64,
        rate: f64,
        side: f64,
    },
}

#[derive(Clone, Copy, Debug)]
struct SegEntry {
    t0: f64,
    duration: f64,
    p0: Vector3<f64>,
    yaw0: f64,
    kind: SegKind,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    entries: Vec<SegEntry>,
    total_time: f64,
    path_length: f64,
    excitation: Option<TiltExcitation>,
}

fn heading(yaw: f64) -> Vector3<f64> {
    Vector3::new(yaw.cos(), yaw.sin(), 0.0)
}

fn left_normal(yaw: f64) -> Vector3<f64> {
    Vector3::new(-yaw.sin(), yaw.cos(), 0.0)
}

impl Trajectory {
    pub fn build(
        segments: &[SegmentSpec],
        speed: f64,
        excitation: Option<TiltExcitation>,
    ) -> Result<Trajectory, SimError> {
        if segments.is_empty() {
            return Err(SimError::InvalidSegment("empty segment list".into()));
        }
        let needs_speed = segments
            .iter()
            .any(|s| matches!(s, SegmentSpec::Straight { .. } | SegmentSpec::Arc { .. }));
        if needs_speed && speed <= 0.0 {
            return Err(SimError::InvalidSegment(format!(
                "speed must be positive, got {speed}"
            )));
        }
        let mut entries = Vec::with_capacity(segments.len());
        let mut t = 0.0;
        let mut p = Vector3::zeros();
        let mut yaw = 0.0f64;
        let mut path_length = 0.0;
        for (i, seg) in segments.iter().enumerate() {
            let bad = |msg: String| Err(SimError::InvalidSegment(format!("segment {i}: {msg}")));
            let (kind, duration, p_end, yaw_end) = match *seg {
                SegmentSpec::Hold { duration } => {
                    if duration <= 0.0 {
                        return bad(format!("hold duration must be positive, got {duration}"));
                    }
                    (SegKind::Hold, duration, p, yaw)
                }
                SegmentSpec::Spin { yaw_rate, duration } => {
                    if duration <= 0.0 || yaw_rate == 0.0 {
                        return bad("spin needs positive duration and nonzero rate".into());
                    }
                    (
                        SegKind::Spin { rate: yaw_rate },
                        duration,
                        p,
                        yaw + yaw_rate * duration,
                    )
                }
                SegmentSpec::Straight { length } => {
                    if length <= 0.0 {
                        return bad(format!("straight length must be positive, got {length}"));
                    }
                    path_length += length;
                    (
                        SegKind::Straight { speed },
                        length / speed,
                        p + heading(yaw) * length,
                        yaw,
                    )
                }
                SegmentSpec::Arc { radius, angle } => {
                    if radius <= 0.0 {
                        return bad(format!("arc radius must be positive, got {radius}"));
                    }
                    if angle == 0.0 {
                        return bad("arc angle must be nonzero".into());
                    }
                    let side = angle.signum();
                    let rate = side * speed / radius;
                    let center = p + left_normal(yaw) * (radius * side);
                    let yaw_end = yaw + angle;
                    let p_end = center - left_normal(yaw_end) * (radius * side);
                    path_length += radius * angle.abs();
                    (
                        SegKind::Arc {
                            center,
                            radius,
                            rate,
                            side,
                        },
                        angle.abs() * radius / speed,
                        p_end,
                        yaw_end,
                    )
                }
            };
            entries.push(SegEntry {
                t0: t,
                duration,
                p0: p,
                yaw0: yaw,
                kind,
            });
            t += duration;
            p = p_end;
            yaw = yaw_end;
        }
        Ok(Trajectory {
            entries,
            total_time: t,
            path_length,
            excitation,
        })
    }

    pub fn total_time(&self) -> f64 {
        self.total_time
    }

    pub fn path_length(&self) -> f64 {
        self.path_length
    }

    /// Endpoints of every straight segment, for corridor geometry placement.
    pub fn straight_runs(&self) -> Vec<StraightRun> {
        self.entries
            .iter()
            .filter_map(|e| match e.kind {
                SegKind::Straight { speed } => Some(StraightRun {
                    start: e.p0,
                    end: e.p0 + heading(e.yaw0) * (speed * e.duration),
                }),
                _ => None,
            })
            .collect()
    }

    /// Analytic state at time `t` (clamped to the trajectory's time span).
    pub fn truth_at(&self, t: f64) -> TruthPoint {
        let t = t.clamp(0.0, self.total_time);
        // Segments are few; linear scan from a binary-searched start is fine.
        let idx = match self
            .entries
            .binary_search_by(|e| e.t0.partial_cmp(&t).unwrap())
        {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        };
        let e = &self.entries[idx];
        let dt = (t - e.t0).min(e.duration);

        let (position, velocity, accel_world, yaw, yaw_rate) = match e.kind {
            SegKind::Hold => (e.p0, Vector3::zeros(), Vector3::zeros(), e.yaw0, 0.0),
            SegKind::Spin { rate } => (
                e.p0,
                Vector3::zeros(),
                Vector3::zeros(),
                e.yaw0 + rate * dt,
                rate,
            ),
            SegKind::Straight { speed } => (
                e.p0 + heading(e.yaw0) * (speed * dt),
                heading(e.yaw0) * speed,
                Vector3::zeros(),
                e.yaw0,
                0.0,
            ),
            SegKind::Arc {
                center,
                radius,
                rate,
                side,
            } => {
                let yaw = e.yaw0 + rate * dt;
                let speed = rate.abs() * radius;
                let position = center - left_normal(yaw) * (radius * side);
                let velocity = heading(yaw) * speed;
                // Centripetal acceleration, toward the arc center.
                let accel = left_normal(yaw) * (speed * rate);
                (position, velocity, accel, yaw, rate)
            }
        };

        let (rotation, omega_body) = match self.excitation {
            None => (
                Rotation::from_yaw(yaw),
                Vector3::new(0.0, 0.0, yaw_rate),
            ),
            Some(ex) => {
                let w = 2.0 * std::f64::consts::PI * ex.frequency_hz;
                let roll = ex.roll_amplitude * (w * t).sin();
                let pitch = ex.pitch_amplitude * (w * t + 1.0).sin();
                let roll_rate = ex.roll_amplitude * w * (w * t).cos();
                let pitch_rate = ex.pitch_amplitude * w * (w * t + 1.0).cos();
                let rotation = Rotation::from_euler_zyx(roll, pitch, yaw);
                // Body rate from ZYX Euler-angle kinematics.
                let (sr, cr) = (roll.sin(), roll.cos());
                let (sp, cp) = (pitch.sin(), pitch.cos());
                let omega = Vector3::new(
                    roll_rate - yaw_rate * sp,
                    pitch_rate * cr + yaw_rate * cp * sr,
                    yaw_rate * cp * cr - pitch_rate * sr,
                );
                (rotation, omega)
            }
        };

        TruthPoint {
            rotation,
            position,
            velocity,
            accel_world,
            omega_body,
        }
    }
}
