//! Residual factors of the sliding-window and global objectives.
//!
//! The estimator minimizes a weighted sum over three measurement families,
//! inertial, visual and lidar, with an optional Huber robustifier on the
//! visual and lidar terms; inertial terms are never robustified. GPS and
//! loop-closure residuals live here too so the pose graph can reuse them.
//!
//! Huber knees are expressed on raw squared norms (px^2 for visual, m^2 for
//! lidar); measurement sigmas then scale the robustified value into the
//! objective, so the knee stays in physical units while the cost is
//! comparable across families.

use nalgebra::{DMatrix, DVector, Matrix2x3, SMatrix, SVector, Vector2, Vector3};
use thiserror::Error;

use crate::camera::{body_from_camera, CameraIntrinsics, MIN_DEPTH};
use crate::geometry::{
    log_so3, right_jacobian_inv_so3, skew, Pose, State, STATE_DOF, TAN_POS, TAN_ROT,
};
use crate::imu::PreintegratedImu;

/// Default Huber knee for visual terms: 1 px on the residual norm.
pub const VISUAL_HUBER_DELTA: f64 = 1.0;
/// Default Huber knee for lidar terms: 0.5 m on the point-to-plane distance.
pub const LIDAR_HUBER_DELTA: f64 = 0.5;
/// Pixel measurement sigma used to scale visual costs.
pub const SIGMA_PIXEL: f64 = 1.0;
/// Range measurement sigma used to scale lidar costs, m.
pub const SIGMA_LIDAR: f64 = 0.05;

#[derive(Debug, Error)]
pub enum FactorError {
    #[error("plane triple is collinear (cross norm {0:.3e})")]
    CollinearTriple(f64),
    #[error("factor references state {0} but only {1} exist")]
    BadStateId(usize, usize),
    #[error("factor references landmark {0} but only {1} exist")]
    BadLandmarkId(usize, usize),
    #[error("factor weight {0} is not finite and nonnegative")]
    BadWeight(f64),
    #[error("huber delta {0} must be positive")]
    BadHuberDelta(f64),
}

/// Index of a keyframe state inside a window problem.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StateId(pub usize);

/// Index of a landmark position inside a window problem.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LandmarkId(pub usize);

#[derive(Clone, Copy, Debug)]
pub struct HuberParams {
    /// Residual-norm threshold; the knee on the squared norm is delta^2.
    pub delta: f64,
}

impl HuberParams {
    pub fn new(delta: f64) -> Result<Self, FactorError> {
        if delta > 0.0 && delta.is_finite() {
            Ok(HuberParams { delta })
        } else {
            Err(FactorError::BadHuberDelta(delta))
        }
    }
}

/// Robust loss on a squared residual norm `s`, returning `(rho(s), drho/ds)`.
/// Quadratic below the knee, linear in the norm above it; the derivative is
/// continuous at `s = delta^2`.
pub fn huber(s: f64, params: &HuberParams) -> (f64, f64) {
    debug_assert!(s >= 0.0);
    let d2 = params.delta * params.delta;
    if s <= d2 {
        (s, 1.0)
    } else {
        let norm = s.sqrt();
        (2.0 * params.delta * norm - d2, params.delta / norm)
    }
}

/// Reprojection residual in pixels: observed minus predicted through the
/// left camera. `None` when the point sits at or behind the minimum depth,
/// which deactivates the factor for the current iteration.
pub fn visual_residual(
    body: &Pose,
    landmark: &Vector3<f64>,
    pixel: &Vector2<f64>,
    intrinsics: &CameraIntrinsics,
) -> Option<Vector2<f64>> {
    let p_body = body.inverse().transform(landmark);
    let p_cam = body_from_camera().unrotate(&p_body);
    let predicted = intrinsics.project(&p_cam)?;
    Some(pixel - predicted)
}

/// Jacobians of the visual residual with respect to the body-state tangent
/// (2x15, only the rotation and position columns are nonzero) and the
/// landmark position (2x3). `None` when the factor is deactivated.
pub fn visual_jacobians(
    body: &Pose,
    landmark: &Vector3<f64>,
    intrinsics: &CameraIntrinsics,
) -> Option<(SMatrix<f64, 2, STATE_DOF>, Matrix2x3<f64>)> {
    let r_cb = body_from_camera().matrix().transpose();
    let r_wb_t = body.rotation.matrix().transpose();
    let p_body = r_wb_t * (landmark - body.translation);
    let p_cam = r_cb * p_body;
    if p_cam.z < MIN_DEPTH {
        return None;
    }
    let j_pi = intrinsics.projection_jacobian(&p_cam);
    let d_cam_d_theta = r_cb * r_wb_t * skew(&(landmark - body.translation));
    let d_cam_d_pos = -(r_cb * r_wb_t);
    let d_cam_d_lm = r_cb * r_wb_t;

    let mut j_state = SMatrix::<f64, 2, STATE_DOF>::zeros();
    j_state
        .fixed_view_mut::<2, 3>(0, TAN_ROT)
        .copy_from(&(-j_pi * d_cam_d_theta));
    j_state
        .fixed_view_mut::<2, 3>(0, TAN_POS)
        .copy_from(&(-j_pi * d_cam_d_pos));
    let j_landmark = -j_pi * d_cam_d_lm;
    Some((j_state, j_landmark))
}

/// Unit normal of the plane through a non-collinear triple.
pub fn plane_normal(triple: &[Vector3<f64>; 3]) -> Result<Vector3<f64>, FactorError> {
    let cross = (triple[0] - triple[1]).cross(&(triple[0] - triple[2]));
    let n = cross.norm();
    if n <= 1e-9 {
        return Err(FactorError::CollinearTriple(n));
    }
    Ok(cross / n)
}

/// Signed distance from a world point to the plane spanned by the triple.
/// The sign is an internal detail that keeps the Jacobian smooth; squared
/// costs are identical either way.
pub fn lidar_residual_signed(
    point_world: &Vector3<f64>,
    triple: &[Vector3<f64>; 3],
) -> Result<f64, FactorError> {
    let n = plane_normal(triple)?;
    Ok(n.dot(&(point_world - triple[0])))
}

/// Unsigned point-to-plane distance, m.
pub fn lidar_residual(
    point_world: &Vector3<f64>,
    triple: &[Vector3<f64>; 3],
) -> Result<f64, FactorError> {
    lidar_residual_signed(point_world, triple).map(f64::abs)
}

/// Position residual against a GPS fix, whitened by the isotropic sigma.
pub fn gps_residual(position: &Vector3<f64>, fix: &Vector3<f64>, sigma: f64) -> Vector3<f64> {
    (position - fix) / sigma
}

/// Relative-pose error `[log(R_err), t_err]` of the transform taking the
/// measurement to the current estimate: `measured^-1 * (pose_i^-1 * pose_j)`.
pub fn loop_residual(pose_i: &Pose, pose_j: &Pose, measured: &Pose) -> SVector<f64, 6> {
    let err = measured.inverse().compose(&pose_i.inverse().compose(pose_j));
    let mut r = SVector::<f64, 6>::zeros();
    r.fixed_rows_mut::<3>(0).copy_from(&log_so3(&err.rotation));
    r.fixed_rows_mut::<3>(3).copy_from(&err.translation);
    r
}

/// Jacobians of [`loop_residual`] with respect to the 6-DOF tangents of
/// `pose_i` and `pose_j`.
pub fn loop_jacobians(
    pose_i: &Pose,
    pose_j: &Pose,
    measured: &Pose,
) -> (SMatrix<f64, 6, 6>, SMatrix<f64, 6, 6>) {
    let err = measured.inverse().compose(&pose_i.inverse().compose(pose_j));
    let phi = log_so3(&err.rotation);
    let jr_inv = right_jacobian_inv_so3(&phi);
    let rj_t = pose_j.rotation.matrix().transpose();
    // A maps world-frame increments into the error frame.
    let a = measured.rotation.matrix().transpose() * pose_i.rotation.matrix().transpose();
    let d = pose_j.translation - pose_i.translation;

    let mut j_i = SMatrix::<f64, 6, 6>::zeros();
    let mut j_j = SMatrix::<f64, 6, 6>::zeros();
    j_i.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-jr_inv * rj_t));
    j_i.fixed_view_mut::<3, 3>(3, 0).copy_from(&(a * skew(&d)));
    j_i.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-a));
    j_j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(jr_inv * rj_t));
    j_j.fixed_view_mut::<3, 3>(3, 3).copy_from(&a);
    (j_i, j_j)
}

/// Category tag for the two lidar feature families.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LidarKind {
    Ground,
    Surface,
}

/// One term of the objective. Connected variables are indices into the
/// owning problem's state and landmark arrays. Inertial factors carry no
/// robustifier by construction.
#[derive(Clone, Debug)]
pub enum Factor {
    Visual {
        state: StateId,
        landmark: LandmarkId,
        pixel: Vector2<f64>,
        intrinsics: CameraIntrinsics,
        weight: f64,
        huber: Option<HuberParams>,
        sigma: f64,
    },
    Inertial {
        prev: StateId,
        curr: StateId,
        pre: Box<PreintegratedImu>,
        gravity: Vector3<f64>,
        weight: f64,
    },
    Lidar {
        kind: LidarKind,
        state: StateId,
        point_body: Vector3<f64>,
        triple: [Vector3<f64>; 3],
        weight: f64,
        huber: Option<HuberParams>,
        sigma: f64,
    },
    Gps {
        state: StateId,
        position: Vector3<f64>,
        sigma: f64,
        weight: f64,
    },
    Loop {
        from: StateId,
        to: StateId,
        measured: Pose,
        weight: f64,
    },
}

/// Variable slot a Jacobian block attaches to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VarRef {
    State(StateId),
    Landmark(LandmarkId),
}

/// One factor linearized at the current variables. Residual and Jacobians
/// are whitened by the measurement sigma; the robust loss is reported via
/// `cost` (already weighted) and `irls_weight` (weight times the loss slope,
/// to scale the normal equations).
#[derive(Clone, Debug)]
pub struct FactorEval {
    pub residual: DVector<f64>,
    pub jacobians: Vec<(VarRef, DMatrix<f64>)>,
    pub cost: f64,
    pub irls_weight: f64,
}

fn check_weight(w: f64) -> Result<(), FactorError> {
    if w.is_finite() && w >= 0.0 {
        Ok(())
    } else {
        Err(FactorError::BadWeight(w))
    }
}

impl Factor {
    pub fn visual(
        state: StateId,
        landmark: LandmarkId,
        pixel: Vector2<f64>,
        intrinsics: CameraIntrinsics,
        weight: f64,
    ) -> Result<Self, FactorError> {
        check_weight(weight)?;
        Ok(Factor::Visual {
            state,
            landmark,
            pixel,
            intrinsics,
            weight,
            huber: Some(HuberParams::new(VISUAL_HUBER_DELTA)?),
            sigma: SIGMA_PIXEL,
        })
    }

    pub fn inertial(
        prev: StateId,
        curr: StateId,
        pre: PreintegratedImu,
        gravity: Vector3<f64>,
        weight: f64,
    ) -> Result<Self, FactorError> {
        check_weight(weight)?;
        Ok(Factor::Inertial {
            prev,
            curr,
            pre: Box::new(pre),
            gravity,
            weight,
        })
    }

    pub fn lidar(
        kind: LidarKind,
        state: StateId,
        point_body: Vector3<f64>,
        triple: [Vector3<f64>; 3],
        weight: f64,
    ) -> Result<Self, FactorError> {
        check_weight(weight)?;
        plane_normal(&triple)?;
        Ok(Factor::Lidar {
            kind,
            state,
            point_body,
            triple,
            weight,
            huber: Some(HuberParams::new(LIDAR_HUBER_DELTA)?),
            sigma: SIGMA_LIDAR,
        })
    }

    pub fn gps(
        state: StateId,
        position: Vector3<f64>,
        sigma: f64,
        weight: f64,
    ) -> Result<Self, FactorError> {
        check_weight(weight)?;
        Ok(Factor::Gps {
            state,
            position,
            sigma,
            weight,
        })
    }

    pub fn loop_closure(
        from: StateId,
        to: StateId,
        measured: Pose,
        weight: f64,
    ) -> Result<Self, FactorError> {
        check_weight(weight)?;
        Ok(Factor::Loop {
            from,
            to,
            measured,
            weight,
        })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Factor::Visual { .. } => "visual",
            Factor::Inertial { .. } => "inertial",
            Factor::Lidar {
                kind: LidarKind::Ground,
                ..
            } => "lidar_ground",
            Factor::Lidar {
                kind: LidarKind::Surface,
                ..
            } => "lidar_surface",
            Factor::Gps { .. } => "gps",
            Factor::Loop { .. } => "loop",
        }
    }

    pub fn weight(&self) -> f64 {
        match self {
            Factor::Visual { weight, .. }
            | Factor::Inertial { weight, .. }
            | Factor::Lidar { weight, .. }
            | Factor::Gps { weight, .. }
            | Factor::Loop { weight, .. } => *weight,
        }
    }

    pub fn set_weight(&mut self, w: f64) -> Result<(), FactorError> {
        check_weight(w)?;
        match self {
            Factor::Visual { weight, .. }
            | Factor::Inertial { weight, .. }
            | Factor::Lidar { weight, .. }
            | Factor::Gps { weight, .. }
            | Factor::Loop { weight, .. } => *weight = w,
        }
        Ok(())
    }

    pub fn connected_landmark(&self) -> Option<LandmarkId> {
        match self {
            Factor::Visual { landmark, .. } => Some(*landmark),
            _ => None,
        }
    }

    pub fn connected_states(&self) -> Vec<StateId> {
        match self {
            Factor::Visual { state, .. } | Factor::Lidar { state, .. } | Factor::Gps { state, .. } => {
                vec![*state]
            }
            Factor::Inertial { prev, curr, .. } => vec![*prev, *curr],
            Factor::Loop { from, to, .. } => vec![*from, *to],
        }
    }

    /// Evaluates residual, Jacobians, cost and IRLS weight at the given
    /// variables. `Ok(None)` means the factor is deactivated this iteration
    /// (visual point at or behind the minimum depth).
    pub fn linearize(
        &self,
        states: &[State],
        landmarks: &[Vector3<f64>],
    ) -> Result<Option<FactorEval>, FactorError> {
        let state = |id: StateId| -> Result<&State, FactorError> {
            states
                .get(id.0)
                .ok_or(FactorError::BadStateId(id.0, states.len()))
        };
        match self {
            Factor::Visual {
                state: sid,
                landmark,
                pixel,
                intrinsics,
                weight,
                huber: hub,
                sigma,
            } => {
                let st = state(*sid)?;
                let lm = landmarks
                    .get(landmark.0)
                    .ok_or(FactorError::BadLandmarkId(landmark.0, landmarks.len()))?;
                let pose = st.pose();
                let Some(r) = visual_residual(&pose, lm, pixel, intrinsics) else {
                    return Ok(None);
                };
                let Some((j_state, j_lm)) = visual_jacobians(&pose, lm, intrinsics) else {
                    return Ok(None);
                };
                let s = r.norm_squared();
                let (rho, slope) = match hub {
                    Some(h) => huber(s, h),
                    None => (s, 1.0),
                };
                let inv_sigma = 1.0 / sigma;
                let eval = FactorEval {
                    residual: DVector::from_column_slice(&[r.x * inv_sigma, r.y * inv_sigma]),
                    jacobians: vec![
                        (
                            VarRef::State(*sid),
                            DMatrix::from_iterator(
                                2,
                                STATE_DOF,
                                (j_state * inv_sigma).iter().copied(),
                            ),
                        ),
                        (
                            VarRef::Landmark(*landmark),
                            DMatrix::from_iterator(2, 3, (j_lm * inv_sigma).iter().copied()),
                        ),
                    ],
                    cost: weight * rho * inv_sigma * inv_sigma,
                    irls_weight: weight * slope,
                };
                Ok(Some(eval))
            }
            Factor::Inertial {
                prev,
                curr,
                pre,
                gravity,
                weight,
            } => {
                let sp = state(*prev)?;
                let sc = state(*curr)?;
                let r = pre.residual(sp, sc, gravity);
                let (jp, jc) = pre.residual_jacobians(sp, sc, gravity);
                // Whiten with the inverse Cholesky factor of the residual
                // covariance so the cost is the weighted Mahalanobis norm.
                let cov = pre.residual_covariance();
                let chol = cov
                    .cholesky()
                    .expect("preintegrated covariance must be positive definite");
                let l_inv = chol
                    .l()
                    .solve_lower_triangular(&SMatrix::<f64, STATE_DOF, STATE_DOF>::identity())
                    .expect("triangular solve");
                let rw = l_inv * r;
                let jpw = l_inv * jp;
                let jcw = l_inv * jc;
                let eval = FactorEval {
                    residual: DVector::from_column_slice(rw.as_slice()),
                    jacobians: vec![
                        (
                            VarRef::State(*prev),
                            DMatrix::from_iterator(STATE_DOF, STATE_DOF, jpw.iter().copied()),
                        ),
                        (
                            VarRef::State(*curr),
                            DMatrix::from_iterator(STATE_DOF, STATE_DOF, jcw.iter().copied()),
                        ),
                    ],
                    cost: weight * rw.norm_squared(),
                    irls_weight: *weight,
                };
                Ok(Some(eval))
            }
            Factor::Lidar {
                state: sid,
                point_body,
                triple,
                weight,
                huber: hub,
                sigma,
                ..
            } => {
                let st = state(*sid)?;
                let n = plane_normal(triple)?;
                let rotated = st.rotation.rotate(point_body);
                let p_world = rotated + st.position;
                let d = n.dot(&(p_world - triple[0]));
                let s = d * d;
                let (rho, slope) = match hub {
                    Some(h) => huber(s, h),
                    None => (s, 1.0),
                };
                let inv_sigma = 1.0 / sigma;
                let mut j = DMatrix::<f64, >::zeros(1, STATE_DOF);
                let d_theta = -(n.transpose() * skew(&rotated)) * inv_sigma;
                let d_pos = n.transpose() * inv_sigma;
                for c in 0..3 {
                    j[(0, TAN_ROT + c)] = d_theta[c];
                    j[(0, TAN_POS + c)] = d_pos[c];
                }
                let eval = FactorEval {
                    residual: DVector::from_column_slice(&[d * inv_sigma]),
                    jacobians: vec![(VarRef::State(*sid), j)],
                    cost: weight * rho * inv_sigma * inv_sigma,
                    irls_weight: weight * slope,
                };
                Ok(Some(eval))
            }
            Factor::Gps {
                state: sid,
                position,
                sigma,
                weight,
            } => {
                let st = state(*sid)?;
                let r = gps_residual(&st.position, position, *sigma);
                let mut j = DMatrix::<f64>::zeros(3, STATE_DOF);
                for c in 0..3 {
                    j[(c, TAN_POS + c)] = 1.0 / sigma;
                }
                let eval = FactorEval {
                    residual: DVector::from_column_slice(r.as_slice()),
                    jacobians: vec![(VarRef::State(*sid), j)],
                    cost: weight * r.norm_squared(),
                    irls_weight: *weight,
                };
                Ok(Some(eval))
            }
            Factor::Loop {
                from,
                to,
                measured,
                weight,
            } => {
                let si = state(*from)?;
                let sj = state(*to)?;
                let r = loop_residual(&si.pose(), &sj.pose(), measured);
                let (ji6, jj6) = loop_jacobians(&si.pose(), &sj.pose(), measured);
                let expand = |j6: &SMatrix<f64, 6, 6>| {
                    let mut j = DMatrix::<f64>::zeros(6, STATE_DOF);
                    j.view_mut((0, TAN_ROT), (6, 3))
                        .copy_from(&j6.fixed_view::<6, 3>(0, 0).into_owned());
                    j.view_mut((0, TAN_POS), (6, 3))
                        .copy_from(&j6.fixed_view::<6, 3>(0, 3).into_owned());
                    j
                };
                let eval = FactorEval {
                    residual: DVector::from_column_slice(r.as_slice()),
                    jacobians: vec![
                        (VarRef::State(*from), expand(&ji6)),
                        (VarRef::State(*to), expand(&jj6)),
                    ],
                    cost: weight * r.norm_squared(),
                    irls_weight: *weight,
                };
                Ok(Some(eval))
            }
        }
    }
}

/// Total objective value: weighted, robustified, sigma-scaled sum over all
/// active factors.
pub fn weighted_cost(
    factors: &[Factor],
    states: &[State],
    landmarks: &[Vector3<f64>],
) -> Result<f64, FactorError> {
    let mut total = 0.0;
    for f in factors {
        if let Some(eval) = f.linearize(states, landmarks)? {
            total += eval.cost;
        }
    }
    Ok(total)
}

/// Per-family base weights of the objective; the adaptive agent overrides
/// the visual and lidar entries per keyframe while inertial stays constant.
#[derive(Clone, Copy, Debug)]
pub struct FamilyWeights {
    pub inertial: f64,
    pub visual: f64,
    pub lidar: f64,
}

impl Default for FamilyWeights {
    fn default() -> Self {
        FamilyWeights {
            inertial: 1.0,
            visual: 1.0,
            lidar: 1.0,
        }
    }
}

/// Text dump of a factor graph for debugging: one factor per line with kind,
/// connected ids, weight and current residual norm.
pub fn dump_factors(
    factors: &[Factor],
    states: &[State],
    landmarks: &[Vector3<f64>],
) -> Result<String, FactorError> {
    use std::fmt::Write;
    let mut out = String::new();
    for f in factors {
        let ids: Vec<String> = f.connected_states().iter().map(|s| s.0.to_string()).collect();
        match f.linearize(states, landmarks)? {
            Some(eval) => writeln!(
                out,
                "kind={} states=[{}] weight={:.6} |r|={:.6}",
                f.kind(),
                ids.join(","),
                f.weight(),
                eval.residual.norm()
            )
            .unwrap(),
            None => writeln!(
                out,
                "kind={} states=[{}] weight={:.6} deactivated",
                f.kind(),
                ids.join(","),
                f.weight()
            )
            .unwrap(),
        }
    }
    Ok(out)
}
