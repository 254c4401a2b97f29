//! Segmented global pose-graph optimization.
//!
//! The keyframe trajectory is split at turns, then corrected in two stages:
//! stage 1 treats each segment as a rigid unit and moves whole segments to
//! satisfy GPS and loop-closure constraints; stage 2 refines the keyframes
//! inside each segment with anisotropic priors so turning parts mainly adjust
//! rotation and straight parts mainly stretch along the direction of travel.
//! A simple innovation gate keeps GPS spikes out of the graph.

use std::collections::HashSet;
use std::io::{self, Write};

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector, Vector3};
use thiserror::Error;

use crate::factors::{loop_jacobians, loop_residual};
use crate::geometry::{left_jacobian_inv_so3, log_so3, skew, Pose};

#[derive(Debug, Error)]
pub enum PoseGraphError {
    #[error("need at least 2 keyframes, got {0}")]
    TooFewKeyframes(usize),
    #[error("graph is disconnected: {0}")]
    Disconnected(String),
    #[error("constraint references keyframe {0} of {1}")]
    BadKeyframe(usize, usize),
}

/// Pose-level view of a keyframe, all the global stage needs.
#[derive(Clone, Copy, Debug)]
pub struct GraphKeyframe {
    pub id: usize,
    pub timestamp: f64,
    pub pose: Pose,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegmentKind {
    Straight,
    Turning,
}

impl SegmentKind {
    pub fn label(&self) -> &'static str {
        match self {
            SegmentKind::Straight => "straight",
            SegmentKind::Turning => "turning",
        }
    }
}

/// Maximal run of keyframes sharing a steering label. Segments partition the
/// keyframe sequence; the keyframe after `last` is the next segment's first
/// and acts as the shared anchor between them.
#[derive(Clone, Copy, Debug)]
pub struct Segment {
    pub id: usize,
    /// First keyframe index, inclusive.
    pub first: usize,
    /// Last keyframe index, inclusive.
    pub last: usize,
    pub kind: SegmentKind,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.last - self.first + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, kf: usize) -> bool {
        (self.first..=self.last).contains(&kf)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SegmentationParams {
    /// Sliding window length in keyframes for the yaw-change test.
    pub yaw_window: usize,
    /// Accumulated yaw change that makes a keyframe "turning", rad.
    pub turn_thresh: f64,
}

impl Default for SegmentationParams {
    fn default() -> Self {
        SegmentationParams {
            yaw_window: 5,
            turn_thresh: 0.175,
        }
    }
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let w = (a + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    if w <= -std::f64::consts::PI {
        w + two_pi
    } else {
        w
    }
}

fn yaw_of(pose: &Pose) -> f64 {
    let m = pose.rotation.matrix();
    m[(1, 0)].atan2(m[(0, 0)])
}

/// Splits the keyframe sequence into straight and turning segments by the
/// accumulated yaw change over a centered sliding window. Singleton runs are
/// merged into their neighbor so every segment spans at least two keyframes
/// whenever the trajectory does.
pub fn segment_trajectory(
    keyframes: &[GraphKeyframe],
    params: &SegmentationParams,
) -> Result<Vec<Segment>, PoseGraphError> {
    let n = keyframes.len();
    if n < 2 {
        return Err(PoseGraphError::TooFewKeyframes(n));
    }
    let yaws: Vec<f64> = keyframes.iter().map(|k| yaw_of(&k.pose)).collect();
    let half = (params.yaw_window.max(1)) / 2;
    let turning: Vec<bool> = (0..n)
        .map(|k| {
            let lo = k.saturating_sub(half);
            let hi = (k + half).min(n - 1);
            wrap_angle(yaws[hi] - yaws[lo]).abs() > params.turn_thresh
        })
        .collect();

    // maximal runs of one label
    let mut runs: Vec<(SegmentKind, usize)> = Vec::new();
    for &t in &turning {
        let kind = if t { SegmentKind::Turning } else { SegmentKind::Straight };
        match runs.last_mut() {
            Some((k, len)) if *k == kind => *len += 1,
            _ => runs.push((kind, 1)),
        }
    }
    // absorb singleton runs, then re-coalesce equal neighbors
    loop {
        let Some(idx) = (runs.len() > 1)
            .then(|| runs.iter().position(|(_, len)| *len == 1))
            .flatten()
        else {
            break;
        };
        let (_, len) = runs.remove(idx);
        let into = if idx > 0 { idx - 1 } else { 0 };
        runs[into].1 += len;
        let mut merged = Vec::with_capacity(runs.len());
        for (kind, len) in runs {
            match merged.last_mut() {
                Some((k, l)) if *k == kind => *l += len,
                _ => merged.push((kind, len)),
            }
        }
        runs = merged;
    }

    let mut segments = Vec::with_capacity(runs.len());
    let mut first = 0;
    for (id, (kind, len)) in runs.into_iter().enumerate() {
        segments.push(Segment {
            id,
            first,
            last: first + len - 1,
            kind,
        });
        first += len;
    }
    Ok(segments)
}

#[derive(Clone, Copy, Debug)]
pub struct LoopParams {
    /// Maximum spatial distance between paired keyframes, m.
    pub radius: f64,
    /// Minimum index separation between paired keyframes.
    pub min_gap: usize,
    /// After a candidate is emitted, this many subsequent keyframes are
    /// skipped so one revisit does not flood the graph.
    pub min_spacing: usize,
}

impl Default for LoopParams {
    fn default() -> Self {
        LoopParams {
            radius: 5.0,
            min_gap: 50,
            min_spacing: 10,
        }
    }
}

/// A verified loop closure: relative pose of keyframe `to` in `from`'s frame.
#[derive(Clone, Copy, Debug)]
pub struct LoopCandidate {
    pub from: usize,
    pub to: usize,
    pub measured: Pose,
    /// Rotation standard deviation, rad.
    pub rot_sigma: f64,
    /// Translation standard deviation, m.
    pub trans_sigma: f64,
}

/// Finds revisits by position proximity plus temporal gap and measures their
/// relative pose through `measure(from, to)`, which typically runs a
/// scan-to-map alignment between the two keyframes' lidar features and
/// returns `None` when the alignment fails (candidate dropped).
pub fn detect_loops(
    keyframes: &[GraphKeyframe],
    params: &LoopParams,
    mut measure: impl FnMut(usize, usize) -> Option<Pose>,
) -> Vec<LoopCandidate> {
    let mut out: Vec<LoopCandidate> = Vec::new();
    let mut last_emitted: Option<usize> = None;
    for j in 0..keyframes.len() {
        if let Some(prev) = last_emitted {
            if j - prev < params.min_spacing {
                continue;
            }
        }
        let mut best: Option<(f64, usize)> = None;
        for i in 0..j {
            if j - i <= params.min_gap {
                break;
            }
            let d = (keyframes[i].pose.translation - keyframes[j].pose.translation).norm();
            if d < params.radius && best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, i));
            }
        }
        let Some((_, i)) = best else { continue };
        let Some(measured) = measure(i, j) else { continue };
        out.push(LoopCandidate {
            from: i,
            to: j,
            measured,
            rot_sigma: 0.01,
            trans_sigma: 0.05,
        });
        last_emitted = Some(j);
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub struct GpsGateParams {
    /// Normalized innovation distance beyond which a fix is rejected.
    pub gate_sigma: f64,
    /// Fixes buffered before the offset estimate exists.
    pub init_count: usize,
    /// Exponential smoothing factor for the offset update.
    pub ema_alpha: f64,
    /// Lower bound on the uncertainty used for normalization, m.
    pub sigma_floor: f64,
}

impl Default for GpsGateParams {
    fn default() -> Self {
        GpsGateParams {
            gate_sigma: 5.0,
            init_count: 3,
            ema_alpha: 0.1,
            sigma_floor: 0.05,
        }
    }
}

/// Innovation gate between GPS fixes and odometry-predicted positions.
///
/// The systematic offset between the two (odometry drift) is tracked with an
/// exponential moving average initialized from the component-wise median of
/// the first few innovations, so an early spike cannot poison the estimate.
/// A fix is accepted when its innovation minus the tracked offset, normalized
/// by the caller's uncertainty estimate, stays inside the gate. The very
/// first fix has nothing to be judged against and is always accepted; later
/// fixes are gated even during initialization, against the partial median.
#[derive(Clone, Debug)]
pub struct GpsGate {
    params: GpsGateParams,
    offset: Option<Vector3<f64>>,
    init: Vec<Vector3<f64>>,
}

impl GpsGate {
    pub fn new(params: GpsGateParams) -> Self {
        GpsGate {
            params,
            offset: None,
            init: Vec::new(),
        }
    }

    fn median(values: &mut [f64]) -> f64 {
        values.sort_by(f64::total_cmp);
        values[values.len() / 2]
    }

    fn init_offset(innovations: &[Vector3<f64>]) -> Vector3<f64> {
        Vector3::from_fn(|axis, _| {
            let mut v: Vec<f64> = innovations.iter().map(|inn| inn[axis]).collect();
            Self::median(&mut v)
        })
    }

    /// Judges one fix against the prediction; `sigma` is the combined
    /// odometry-plus-receiver uncertainty for this fix.
    pub fn assess(&mut self, fix: &Vector3<f64>, predicted: &Vector3<f64>, sigma: f64) -> bool {
        let innovation = fix - predicted;
        let sigma = sigma.max(self.params.sigma_floor);
        let reference = match self.offset {
            Some(offset) => offset,
            None if self.init.is_empty() => innovation,
            None => Self::init_offset(&self.init),
        };
        let accept = (innovation - reference).norm() / sigma <= self.params.gate_sigma;
        match self.offset {
            Some(offset) if accept => {
                let a = self.params.ema_alpha;
                self.offset = Some(offset * (1.0 - a) + innovation * a);
            }
            Some(_) => {}
            None => {
                self.init.push(innovation);
                if self.init.len() >= self.params.init_count {
                    self.offset = Some(Self::init_offset(&self.init));
                    self.init.clear();
                }
            }
        }
        accept
    }
}

/// Absolute position measurement for one keyframe, already gated.
#[derive(Clone, Copy, Debug)]
pub struct GpsConstraint {
    pub keyframe: usize,
    pub position: Vector3<f64>,
    pub sigma: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct GlobalParams {
    /// Odometry rotation standard deviation between keyframes, rad.
    pub odometry_rot_sigma: f64,
    /// Odometry translation standard deviation between keyframes, m.
    pub odometry_trans_sigma: f64,
    /// Information ratio of the stage-2 soft-freeze priors over odometry.
    pub prior_ratio: f64,
    pub max_iterations: usize,
    pub rel_tol: f64,
}

impl Default for GlobalParams {
    fn default() -> Self {
        GlobalParams {
            odometry_rot_sigma: 0.02,
            odometry_trans_sigma: 0.2,
            prior_ratio: 10.0,
            max_iterations: 30,
            rel_tol: 1e-9,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GlobalResult {
    /// Corrected keyframe poses after both stages.
    pub poses: Vec<Pose>,
    /// Poses after the rigid-segment stage only.
    pub stage1_poses: Vec<Pose>,
    /// No global constraints were supplied; poses returned unchanged.
    pub no_op: bool,
    /// Summed GPS and loop cost before optimization.
    pub initial_constraint_cost: f64,
    /// Summed GPS and loop cost after both stages.
    pub final_constraint_cost: f64,
}

/// One residual block of the 6-DOF pose graph. Variables are poses with the
/// left-perturbation tangent `[rot, trans]`; `offset` composes a constant
/// body-frame pose onto the variable, which is how stage 1 expresses factors
/// on member keyframes of a rigid segment.
enum PgFactor {
    Relative {
        i: usize,
        j: usize,
        offset_i: Pose,
        offset_j: Pose,
        measured: Pose,
        rot_w: f64,
        trans_w: f64,
    },
    Position {
        i: usize,
        offset_t: Vector3<f64>,
        measured: Vector3<f64>,
        w: f64,
    },
    Prior {
        i: usize,
        pose0: Pose,
        rot_scale: Matrix3<f64>,
        trans_scale: Matrix3<f64>,
    },
}

/// Tangent-to-tangent map from a variable pose onto the composed pose
/// `var * offset` under left perturbations.
fn composition_map(var: &Pose, offset: &Pose) -> SMatrix<f64, 6, 6> {
    let mut m = SMatrix::<f64, 6, 6>::identity();
    m.fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&(-skew(&var.rotation.rotate(&offset.translation))));
    m
}

impl PgFactor {
    fn linearize(&self, poses: &[Pose]) -> (DVector<f64>, Vec<(usize, DMatrix<f64>)>) {
        match self {
            PgFactor::Relative {
                i,
                j,
                offset_i,
                offset_j,
                measured,
                rot_w,
                trans_w,
            } => {
                let pi = poses[*i].compose(offset_i);
                let pj = poses[*j].compose(offset_j);
                let mut r = loop_residual(&pi, &pj, measured);
                let (ji, jj) = loop_jacobians(&pi, &pj, measured);
                let mut ji = ji * composition_map(&poses[*i], offset_i);
                let mut jj = jj * composition_map(&poses[*j], offset_j);
                for row in 0..3 {
                    r[row] *= rot_w;
                    r[row + 3] *= trans_w;
                    for c in 0..6 {
                        ji[(row, c)] *= rot_w;
                        ji[(row + 3, c)] *= trans_w;
                        jj[(row, c)] *= rot_w;
                        jj[(row + 3, c)] *= trans_w;
                    }
                }
                let blocks = vec![
                    (*i, DMatrix::from_iterator(6, 6, ji.iter().copied())),
                    (*j, DMatrix::from_iterator(6, 6, jj.iter().copied())),
                ];
                (DVector::from_iterator(6, r.iter().copied()), blocks)
            }
            PgFactor::Position {
                i,
                offset_t,
                measured,
                w,
            } => {
                let arm = poses[*i].rotation.rotate(offset_t);
                let r = (poses[*i].translation + arm - measured) * *w;
                let mut j = DMatrix::zeros(3, 6);
                j.view_mut((0, 0), (3, 3)).copy_from(&(-skew(&arm) * *w));
                j.view_mut((0, 3), (3, 3))
                    .copy_from(&(Matrix3::identity() * *w));
                (DVector::from_iterator(3, r.iter().copied()), vec![(*i, j)])
            }
            PgFactor::Prior {
                i,
                pose0,
                rot_scale,
                trans_scale,
            } => {
                let phi = log_so3(&(poses[*i].rotation * pose0.rotation.transpose()));
                let dt = poses[*i].translation - pose0.translation;
                let mut r = SVector::<f64, 6>::zeros();
                r.fixed_rows_mut::<3>(0).copy_from(&(rot_scale * phi));
                r.fixed_rows_mut::<3>(3).copy_from(&(trans_scale * dt));
                let mut j = DMatrix::zeros(6, 6);
                j.view_mut((0, 0), (3, 3))
                    .copy_from(&(rot_scale * left_jacobian_inv_so3(&phi)));
                j.view_mut((3, 3), (3, 3)).copy_from(trans_scale);
                (DVector::from_iterator(6, r.iter().copied()), vec![(*i, j)])
            }
        }
    }
}

/// Levenberg-Marquardt over a set of pose variables. Frozen variables and
/// poses no factor touches keep their value and contribute no columns.
fn solve_pose_graph(
    poses: &mut [Pose],
    factors: &[PgFactor],
    frozen: &HashSet<usize>,
    params: &GlobalParams,
) {
    let mut referenced = HashSet::new();
    for f in factors {
        let (_, blocks) = f.linearize(poses);
        for (var, _) in blocks {
            referenced.insert(var);
        }
    }
    let cols: Vec<Option<usize>> = {
        let mut next = 0;
        (0..poses.len())
            .map(|i| {
                if frozen.contains(&i) || !referenced.contains(&i) {
                    None
                } else {
                    let c = next;
                    next += 1;
                    Some(c)
                }
            })
            .collect()
    };
    let n_cols = 6 * cols.iter().flatten().count();
    if n_cols == 0 {
        return;
    }
    let total_cost = |p: &[Pose]| -> f64 {
        factors.iter().map(|f| f.linearize(p).0.norm_squared()).sum()
    };
    let mut cost = total_cost(poses);
    let mut lambda = 1e-6;
    for _ in 0..params.max_iterations {
        let mut h = DMatrix::<f64>::zeros(n_cols, n_cols);
        let mut g = DVector::<f64>::zeros(n_cols);
        for f in factors {
            let (r, blocks) = f.linearize(poses);
            let active: Vec<(usize, &DMatrix<f64>)> = blocks
                .iter()
                .filter_map(|(var, j)| cols[*var].map(|c| (6 * c, j)))
                .collect();
            for (ci, ji) in &active {
                let jtr = ji.transpose() * &r;
                for row in 0..6 {
                    g[ci + row] -= jtr[row];
                }
                for (cj, jj) in &active {
                    let block = ji.transpose() * *jj;
                    for row in 0..6 {
                        for col in 0..6 {
                            h[(ci + row, cj + col)] += block[(row, col)];
                        }
                    }
                }
            }
        }
        if g.amax() < 1e-12 {
            break;
        }
        let max_diag = (0..n_cols).map(|i| h[(i, i)]).fold(0.0_f64, f64::max);
        let floor = 1e-6 * max_diag.max(1.0);
        let mut improved = false;
        while lambda <= 1e10 {
            let mut damped = h.clone();
            for i in 0..n_cols {
                damped[(i, i)] += lambda * damped[(i, i)].max(floor);
            }
            let step = match damped.clone().cholesky() {
                Some(ch) => ch.solve(&g),
                None => {
                    lambda *= 10.0;
                    continue;
                }
            };
            let mut trial: Vec<Pose> = poses.to_vec();
            for (var, col) in cols.iter().enumerate() {
                let Some(c) = col else { continue };
                let delta = SVector::<f64, 6>::from_iterator(
                    step.rows(6 * c, 6).iter().copied(),
                );
                trial[var] = trial[var].retract(&delta);
            }
            let new_cost = total_cost(&trial);
            if new_cost < cost {
                let rel = (cost - new_cost) / cost.max(1e-300);
                poses.copy_from_slice(&trial);
                cost = new_cost;
                lambda = (lambda / 3.0).max(1e-12);
                improved = true;
                if rel < params.rel_tol {
                    return;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
}

fn validate_partition(
    keyframes: &[GraphKeyframe],
    segments: &[Segment],
) -> Result<(), PoseGraphError> {
    let n = keyframes.len();
    let mut expected = 0;
    for s in segments {
        if s.first != expected || s.last < s.first || s.last >= n {
            return Err(PoseGraphError::Disconnected(format!(
                "segment {} spans keyframes {}..={} but the previous one ended at {}",
                s.id,
                s.first,
                s.last,
                expected as i64 - 1
            )));
        }
        expected = s.last + 1;
    }
    if expected != n {
        return Err(PoseGraphError::Disconnected(format!(
            "keyframes {}..={} belong to no segment",
            expected,
            n - 1
        )));
    }
    Ok(())
}

/// Two-stage global correction of the keyframe poses.
///
/// Stage 1 assigns one pose variable per segment and moves segments rigidly:
/// inter-segment odometry links plus GPS and loop factors mapped through each
/// member's fixed offset inside its segment. Stage 2 then refines the members
/// of every segment in turn, with odometry links to the (already corrected)
/// neighbor segments and soft anisotropic priors that free rotation in
/// turning parts and the along-track direction in straight parts.
pub fn optimize_global(
    keyframes: &[GraphKeyframe],
    segments: &[Segment],
    gps: &[GpsConstraint],
    loops: &[LoopCandidate],
    params: &GlobalParams,
) -> Result<GlobalResult, PoseGraphError> {
    let n = keyframes.len();
    if n < 2 {
        return Err(PoseGraphError::TooFewKeyframes(n));
    }
    validate_partition(keyframes, segments)?;
    for c in gps {
        if c.keyframe >= n {
            return Err(PoseGraphError::BadKeyframe(c.keyframe, n));
        }
    }
    for l in loops {
        if l.from >= n || l.to >= n {
            return Err(PoseGraphError::BadKeyframe(l.from.max(l.to), n));
        }
    }
    let input: Vec<Pose> = keyframes.iter().map(|k| k.pose).collect();
    if gps.is_empty() && loops.is_empty() {
        return Ok(GlobalResult {
            poses: input.clone(),
            stage1_poses: input,
            no_op: true,
            initial_constraint_cost: 0.0,
            final_constraint_cost: 0.0,
        });
    }

    let seg_of = |kf: usize| segments.iter().position(|s| s.contains(kf)).unwrap();
    let rot_w = 1.0 / params.odometry_rot_sigma;
    let trans_w = 1.0 / params.odometry_trans_sigma;

    // summed GPS+loop cost, the quantity optimization must never increase
    let gps_cost = |poses: &[Pose]| -> f64 {
        gps.iter()
            .map(|c| ((poses[c.keyframe].translation - c.position) / c.sigma).norm_squared())
            .sum()
    };
    let loop_cost = |poses: &[Pose]| -> f64 {
        loops
            .iter()
            .map(|l| {
                let mut r = loop_residual(&poses[l.from], &poses[l.to], &l.measured);
                for row in 0..3 {
                    r[row] /= l.rot_sigma;
                    r[row + 3] /= l.trans_sigma;
                }
                r.norm_squared()
            })
            .sum()
    };
    let initial_constraint_cost = gps_cost(&input) + loop_cost(&input);

    // stage 1: one variable per segment, members ride along rigidly
    let mut seg_poses: Vec<Pose> = segments.iter().map(|s| input[s.first]).collect();
    let offsets: Vec<Vec<Pose>> = segments
        .iter()
        .map(|s| {
            let base_inv = input[s.first].inverse();
            (s.first..=s.last).map(|k| base_inv.compose(&input[k])).collect()
        })
        .collect();
    let mut stage1 = Vec::new();
    for w in segments.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        stage1.push(PgFactor::Relative {
            i: a.id,
            j: b.id,
            offset_i: Pose::identity(),
            offset_j: Pose::identity(),
            measured: input[a.first].inverse().compose(&input[b.first]),
            rot_w,
            trans_w,
        });
    }
    for c in gps {
        let s = seg_of(c.keyframe);
        stage1.push(PgFactor::Position {
            i: s,
            offset_t: offsets[s][c.keyframe - segments[s].first].translation,
            measured: c.position,
            w: 1.0 / c.sigma,
        });
    }
    for l in loops {
        let (sa, sb) = (seg_of(l.from), seg_of(l.to));
        if sa == sb {
            continue;
        }
        stage1.push(PgFactor::Relative {
            i: sa,
            j: sb,
            offset_i: offsets[sa][l.from - segments[sa].first],
            offset_j: offsets[sb][l.to - segments[sb].first],
            measured: l.measured,
            rot_w: 1.0 / l.rot_sigma,
            trans_w: 1.0 / l.trans_sigma,
        });
    }
    // without absolute constraints the graph has a gauge freedom
    let mut frozen = HashSet::new();
    if gps.is_empty() {
        frozen.insert(0);
    }
    solve_pose_graph(&mut seg_poses, &stage1, &frozen, params);
    let mut corrected: Vec<Pose> = input.clone();
    for (s, seg) in segments.iter().enumerate() {
        for (m, k) in (seg.first..=seg.last).enumerate() {
            corrected[k] = seg_poses[s].compose(&offsets[s][m]);
        }
    }
    let stage1_poses = corrected.clone();

    // stage 2: refine members segment by segment
    for seg in segments {
        let members: Vec<usize> = (seg.first..=seg.last).collect();
        let mut factors = Vec::new();
        let mut frozen = HashSet::new();
        // odometry inside the segment and to the neighbor boundary keyframes
        let link = |factors: &mut Vec<PgFactor>, a: usize, b: usize| {
            factors.push(PgFactor::Relative {
                i: a,
                j: b,
                offset_i: Pose::identity(),
                offset_j: Pose::identity(),
                measured: input[a].inverse().compose(&input[b]),
                rot_w,
                trans_w,
            });
        };
        for pair in members.windows(2) {
            link(&mut factors, pair[0], pair[1]);
        }
        if seg.first > 0 {
            link(&mut factors, seg.first - 1, seg.first);
            frozen.insert(seg.first - 1);
        }
        if seg.last + 1 < n {
            link(&mut factors, seg.last, seg.last + 1);
            frozen.insert(seg.last + 1);
        }
        for c in gps {
            if seg.contains(c.keyframe) {
                factors.push(PgFactor::Position {
                    i: c.keyframe,
                    offset_t: Vector3::zeros(),
                    measured: c.position,
                    w: 1.0 / c.sigma,
                });
            }
        }
        for l in loops {
            let from_in = seg.contains(l.from);
            let to_in = seg.contains(l.to);
            if !from_in && !to_in {
                continue;
            }
            factors.push(PgFactor::Relative {
                i: l.from,
                j: l.to,
                offset_i: Pose::identity(),
                offset_j: Pose::identity(),
                measured: l.measured,
                rot_w: 1.0 / l.rot_sigma,
                trans_w: 1.0 / l.trans_sigma,
            });
            if !from_in {
                frozen.insert(l.from);
            }
            if !to_in {
                frozen.insert(l.to);
            }
        }
        // soft freezes: what this segment kind should not change much
        let prior_scale = params.prior_ratio.sqrt();
        let along = {
            let d = corrected[seg.last].translation - corrected[seg.first].translation;
            let norm = d.norm();
            (norm > 1e-9).then(|| d / norm)
        };
        for &k in &members {
            let (rot_scale, trans_scale) = match (seg.kind, along) {
                (SegmentKind::Turning, _) => (
                    Matrix3::zeros(),
                    Matrix3::identity() * (prior_scale * trans_w),
                ),
                (SegmentKind::Straight, Some(a)) => (
                    Matrix3::identity() * (prior_scale * rot_w),
                    (Matrix3::identity() - a * a.transpose()) * (prior_scale * trans_w),
                ),
                (SegmentKind::Straight, None) => (
                    Matrix3::identity() * (prior_scale * rot_w),
                    Matrix3::identity() * (prior_scale * trans_w),
                ),
            };
            factors.push(PgFactor::Prior {
                i: k,
                pose0: corrected[k],
                rot_scale,
                trans_scale,
            });
        }
        // without absolute constraints, keyframe 0 carries the gauge
        if gps.is_empty() {
            frozen.insert(0);
        }
        solve_pose_graph(&mut corrected, &factors, &frozen, params);
    }

    let final_constraint_cost = gps_cost(&corrected) + loop_cost(&corrected);
    Ok(GlobalResult {
        poses: corrected,
        stage1_poses,
        no_op: false,
        initial_constraint_cost,
        final_constraint_cost,
    })
}

/// Writes the trajectory in TUM format: `time tx ty tz qx qy qz qw`.
pub fn write_tum<W: Write>(keyframes: &[GraphKeyframe], out: &mut W) -> io::Result<()> {
    for kf in keyframes {
        let t = kf.pose.translation;
        let q = kf.pose.rotation.to_quaternion_xyzw();
        writeln!(
            out,
            "{:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
            kf.timestamp, t.x, t.y, t.z, q[0], q[1], q[2], q[3]
        )?;
    }
    Ok(())
}

/// Segment annotations, one line per keyframe: `keyframe_id segment_id kind`.
pub fn write_segments<W: Write>(
    keyframes: &[GraphKeyframe],
    segments: &[Segment],
    out: &mut W,
) -> io::Result<()> {
    for s in segments {
        for k in s.first..=s.last {
            writeln!(out, "{} {} {}", keyframes[k].id, s.id, s.kind.label())?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rotation;
    use crate::sim::derived_rng;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn kf(id: usize, pose: Pose) -> GraphKeyframe {
        GraphKeyframe {
            id,
            timestamp: id as f64,
            pose,
        }
    }

    fn straight_kfs(n: usize, step: f64, yaw: f64) -> Vec<GraphKeyframe> {
        let dir = Vector3::new(yaw.cos(), yaw.sin(), 0.0);
        (0..n)
            .map(|k| kf(k, Pose::new(Rotation::from_yaw(yaw), dir * (k as f64 * step))))
            .collect()
    }

    /// Square loop: four straights of `per_side` keyframes joined by corner
    /// arcs of `per_corner` keyframes turning 90 degrees total.
    fn square_kfs(per_side: usize, per_corner: usize, step: f64) -> Vec<GraphKeyframe> {
        let mut out = Vec::new();
        let mut pose = Pose::identity();
        let corner_yaw = std::f64::consts::FRAC_PI_2 / per_corner as f64;
        let push = |pose: &Pose, out: &mut Vec<GraphKeyframe>| {
            out.push(kf(out.len(), *pose));
        };
        push(&pose, &mut out);
        for _ in 0..4 {
            for _ in 0..per_side {
                let fwd = pose.rotation.rotate(&Vector3::new(step, 0.0, 0.0));
                pose = Pose::new(pose.rotation, pose.translation + fwd);
                push(&pose, &mut out);
            }
            for _ in 0..per_corner {
                let fwd = pose.rotation.rotate(&Vector3::new(step, 0.0, 0.0));
                pose = Pose::new(
                    Rotation::from_yaw(corner_yaw) * pose.rotation,
                    pose.translation + fwd,
                );
                push(&pose, &mut out);
            }
        }
        out
    }

    #[test]
    fn straight_line_is_one_straight_segment() {
        let kfs = straight_kfs(40, 2.0, 0.3);
        let segs = segment_trajectory(&kfs, &SegmentationParams::default()).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].kind, SegmentKind::Straight);
        assert_eq!((segs[0].first, segs[0].last), (0, 39));
    }

    #[test]
    fn all_spin_is_one_turning_segment() {
        let kfs: Vec<GraphKeyframe> = (0..30)
            .map(|k| kf(k, Pose::new(Rotation::from_yaw(0.15 * k as f64), Vector3::zeros())))
            .collect();
        let segs = segment_trajectory(&kfs, &SegmentationParams::default()).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].kind, SegmentKind::Turning);
    }

    #[test]
    fn square_loop_alternates_eight_segments() {
        let kfs = square_kfs(30, 6, 3.0);
        let segs = segment_trajectory(&kfs, &SegmentationParams::default()).unwrap();
        assert_eq!(segs.len(), 8, "{segs:?}");
        for (i, s) in segs.iter().enumerate() {
            let expect = if i % 2 == 0 {
                SegmentKind::Straight
            } else {
                SegmentKind::Turning
            };
            assert_eq!(s.kind, expect, "segment {i}");
        }
    }

    #[test]
    fn segments_partition_the_sequence() {
        let kfs = square_kfs(13, 4, 2.0);
        let segs = segment_trajectory(&kfs, &SegmentationParams::default()).unwrap();
        let mut expected = 0;
        for (i, s) in segs.iter().enumerate() {
            assert_eq!(s.first, expected, "gap before segment {i}");
            assert!(s.len() >= 2, "singleton segment {i}");
            if i > 0 {
                assert_ne!(segs[i - 1].kind, s.kind, "unmerged neighbors at {i}");
            }
            expected = s.last + 1;
        }
        assert_eq!(expected, kfs.len());
        assert!(segment_trajectory(&kfs[..1], &SegmentationParams::default()).is_err());
    }

    #[test]
    fn revisit_produces_a_loop_candidate() {
        let kfs = square_kfs(30, 6, 3.0);
        let truth = |i: usize, j: usize| -> Option<Pose> {
            Some(kfs[i].pose.inverse().compose(&kfs[j].pose))
        };
        let loops = detect_loops(&kfs, &LoopParams::default(), truth);
        assert!(!loops.is_empty(), "no loop candidates on a closed square");
        for l in &loops {
            assert!(l.to - l.from > 50);
            let d = (kfs[l.from].pose.translation - kfs[l.to].pose.translation).norm();
            assert!(d < 5.0);
            let r = loop_residual(&kfs[l.from].pose, &kfs[l.to].pose, &l.measured);
            assert!(r.norm() < 1e-12);
        }
    }

    #[test]
    fn straight_path_has_no_loops() {
        let kfs = straight_kfs(120, 2.0, 0.0);
        let loops = detect_loops(&kfs, &LoopParams::default(), |_, _| Some(Pose::identity()));
        assert!(loops.is_empty());
    }

    #[test]
    fn min_gap_rejects_nearby_indices() {
        // out and straight back: revisits everywhere, but only 20 apart
        let mut kfs = straight_kfs(10, 3.0, 0.0);
        for k in (0..10).rev() {
            let pose = Pose::new(
                Rotation::from_yaw(std::f64::consts::PI),
                Vector3::new(k as f64 * 3.0, 0.5, 0.0),
            );
            kfs.push(kf(kfs.len(), pose));
        }
        let loops = detect_loops(&kfs, &LoopParams::default(), |_, _| Some(Pose::identity()));
        assert!(loops.is_empty(), "min_gap failed: {loops:?}");
    }

    #[test]
    fn dropped_measurement_drops_the_candidate() {
        let kfs = square_kfs(30, 6, 3.0);
        let loops = detect_loops(&kfs, &LoopParams::default(), |_, _| None);
        assert!(loops.is_empty());
    }

    #[test]
    fn gate_accepts_prediction_and_rejects_spike() {
        let mut gate = GpsGate::new(GpsGateParams::default());
        let p = Vector3::new(4.0, -2.0, 0.5);
        assert!(gate.assess(&p, &p, 1.0), "first fix must pass");
        // even before full initialization a spike is caught
        assert!(!gate.assess(&(p + Vector3::new(50.0, 0.0, 0.0)), &p, 1.0));
        // fully initialized gate
        let mut gate = GpsGate::new(GpsGateParams::default());
        for _ in 0..3 {
            assert!(gate.assess(&p, &p, 1.0));
        }
        assert!(!gate.assess(&(p + Vector3::new(50.0, 0.0, 0.0)), &p, 1.0));
        assert!(gate.assess(&(p + Vector3::new(0.5, -0.3, 0.1)), &p, 1.0));
    }

    #[test]
    fn injected_spikes_are_rejected_clean_fixes_kept() {
        let mut rng = derived_rng(11, 99);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut gate = GpsGate::new(GpsGateParams::default());
        let sigma = 1.0;
        let mut spikes = 0;
        let mut spikes_rejected = 0;
        let mut clean = 0;
        let mut clean_rejected = 0;
        for k in 0..2000 {
            let truth = Vector3::new(k as f64 * 0.5, 0.0, 0.0);
            // odometry drifts away slowly; the EMA offset must absorb this
            let predicted = truth + Vector3::new(0.0, k as f64 * 0.002, 0.0);
            let mut fix = truth
                + Vector3::new(
                    noise.sample(&mut rng),
                    noise.sample(&mut rng),
                    noise.sample(&mut rng),
                ) * 0.3;
            let spike = rng.gen::<f64>() < 0.05;
            if spike {
                let dir = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                fix += Vector3::new(30.0 * dir, -20.0 * dir, 10.0);
            }
            let accepted = gate.assess(&fix, &predicted, sigma);
            if spike {
                spikes += 1;
                if !accepted {
                    spikes_rejected += 1;
                }
            } else {
                clean += 1;
                if !accepted {
                    clean_rejected += 1;
                }
            }
        }
        assert!(spikes > 50);
        assert!(
            spikes_rejected as f64 >= 0.95 * spikes as f64,
            "{spikes_rejected}/{spikes} spikes rejected"
        );
        assert!(
            clean_rejected as f64 <= 0.01 * clean as f64,
            "{clean_rejected}/{clean} clean fixes rejected"
        );
    }

    /// Odometry with a constant yaw-rate error composed step by step.
    fn drift_square(
        truth: &[GraphKeyframe],
        yaw_err_per_step: f64,
    ) -> Vec<GraphKeyframe> {
        let mut out = vec![truth[0]];
        for k in 1..truth.len() {
            let rel = truth[k - 1].pose.inverse().compose(&truth[k].pose);
            let bent = Pose::new(
                Rotation::from_yaw(yaw_err_per_step) * rel.rotation,
                rel.translation,
            );
            let pose = out[k - 1].pose.compose(&bent);
            out.push(GraphKeyframe {
                pose,
                ..truth[k]
            });
        }
        out
    }

    fn ate(a: &[GraphKeyframe], b: &[GraphKeyframe]) -> f64 {
        let n = a.len() as f64;
        (a.iter()
            .zip(b)
            .map(|(x, y)| (x.pose.translation - y.pose.translation).norm_squared())
            .sum::<f64>()
            / n)
            .sqrt()
    }

    #[test]
    fn drifted_square_snaps_back_to_gps() {
        let truth = square_kfs(30, 6, 3.0);
        let drifted = drift_square(&truth, 5e-4);
        assert!(ate(&drifted, &truth) > 2.0, "drift fixture too mild");
        let segments =
            segment_trajectory(&drifted, &SegmentationParams::default()).unwrap();
        let gps: Vec<GpsConstraint> = truth
            .iter()
            .enumerate()
            .step_by(3)
            .map(|(k, t)| GpsConstraint {
                keyframe: k,
                position: t.pose.translation,
                sigma: 0.05,
            })
            .collect();
        let result =
            optimize_global(&drifted, &segments, &gps, &[], &GlobalParams::default()).unwrap();
        assert!(!result.no_op);
        let corrected: Vec<GraphKeyframe> = truth
            .iter()
            .zip(&result.poses)
            .map(|(t, p)| GraphKeyframe { pose: *p, ..*t })
            .collect();
        let post = ate(&corrected, &truth);
        assert!(post < 0.1, "post-optimization error {post} m");
        assert!(result.final_constraint_cost <= result.initial_constraint_cost + 1e-12);
    }

    #[test]
    fn stage_one_is_rigid_per_segment() {
        let truth = square_kfs(30, 6, 3.0);
        let drifted = drift_square(&truth, 3e-4);
        let segments =
            segment_trajectory(&drifted, &SegmentationParams::default()).unwrap();
        let gps: Vec<GpsConstraint> = truth
            .iter()
            .enumerate()
            .step_by(5)
            .map(|(k, t)| GpsConstraint {
                keyframe: k,
                position: t.pose.translation,
                sigma: 0.5,
            })
            .collect();
        let result =
            optimize_global(&drifted, &segments, &gps, &[], &GlobalParams::default()).unwrap();
        for s in &segments {
            for k in s.first..s.last {
                let before = drifted[k].pose.inverse().compose(&drifted[k + 1].pose);
                let after =
                    result.stage1_poses[k].inverse().compose(&result.stage1_poses[k + 1]);
                let dr = log_so3(&(before.rotation * after.rotation.transpose()));
                let dt = before.translation - after.translation;
                assert!(dr.norm() < 1e-9, "rotation broke rigidity at {k}");
                assert!(dt.norm() < 1e-9, "translation broke rigidity at {k}");
            }
        }
    }

    #[test]
    fn consistent_gps_leaves_poses_alone() {
        let truth = square_kfs(20, 5, 3.0);
        let segments = segment_trajectory(&truth, &SegmentationParams::default()).unwrap();
        let gps: Vec<GpsConstraint> = truth
            .iter()
            .enumerate()
            .map(|(k, t)| GpsConstraint {
                keyframe: k,
                position: t.pose.translation,
                sigma: 1.0,
            })
            .collect();
        let result =
            optimize_global(&truth, &segments, &gps, &[], &GlobalParams::default()).unwrap();
        for (p, t) in result.poses.iter().zip(&truth) {
            assert!((p.translation - t.pose.translation).norm() < 1e-6);
            let dr = log_so3(&(p.rotation * t.pose.rotation.transpose()));
            assert!(dr.norm() < 1e-6);
        }
    }

    #[test]
    fn loop_closure_pulls_the_drifted_end_home() {
        let truth = square_kfs(30, 6, 3.0);
        let drifted = drift_square(&truth, 1e-3);
        let segments =
            segment_trajectory(&drifted, &SegmentationParams::default()).unwrap();
        let last = truth.len() - 1;
        let loops = vec![LoopCandidate {
            from: 0,
            to: last,
            measured: truth[0].pose.inverse().compose(&truth[last].pose),
            rot_sigma: 0.005,
            trans_sigma: 0.02,
        }];
        let pre = loop_residual(&drifted[0].pose, &drifted[last].pose, &loops[0].measured)
            .norm();
        let result =
            optimize_global(&drifted, &segments, &[], &loops, &GlobalParams::default())
                .unwrap();
        let post = loop_residual(
            &result.poses[0],
            &result.poses[last],
            &loops[0].measured,
        )
        .norm();
        assert!(post < 0.1 * pre, "loop error {pre} -> {post}");
        assert!(result.final_constraint_cost <= result.initial_constraint_cost + 1e-12);
        // gauge: the frozen first keyframe stayed put
        assert!((result.poses[0].translation - drifted[0].pose.translation).norm() < 1e-12);
    }

    #[test]
    fn missing_constraints_is_a_flagged_noop() {
        let kfs = straight_kfs(30, 2.0, 0.0);
        let segments = segment_trajectory(&kfs, &SegmentationParams::default()).unwrap();
        let result =
            optimize_global(&kfs, &segments, &[], &[], &GlobalParams::default()).unwrap();
        assert!(result.no_op);
        for (p, k) in result.poses.iter().zip(&kfs) {
            assert_eq!(p.translation, k.pose.translation);
        }
    }

    #[test]
    fn broken_partition_is_reported() {
        let kfs = straight_kfs(10, 2.0, 0.0);
        let segments = vec![Segment {
            id: 0,
            first: 0,
            last: 5,
            kind: SegmentKind::Straight,
        }];
        let err = optimize_global(&kfs, &segments, &[], &[], &GlobalParams::default());
        match err {
            Err(PoseGraphError::Disconnected(msg)) => {
                assert!(msg.contains("6"), "gap not named: {msg}")
            }
            other => panic!("expected disconnected error, got {other:?}"),
        }
        let bad_gps = vec![GpsConstraint {
            keyframe: 99,
            position: Vector3::zeros(),
            sigma: 1.0,
        }];
        let segments = segment_trajectory(&kfs, &SegmentationParams::default()).unwrap();
        assert!(matches!(
            optimize_global(&kfs, &segments, &bad_gps, &[], &GlobalParams::default()),
            Err(PoseGraphError::BadKeyframe(99, 10))
        ));
    }

    #[test]
    fn tum_and_sidecar_formats() {
        let kfs = square_kfs(5, 3, 2.0);
        let segments = segment_trajectory(&kfs, &SegmentationParams::default()).unwrap();
        let mut tum = Vec::new();
        write_tum(&kfs, &mut tum).unwrap();
        let tum = String::from_utf8(tum).unwrap();
        assert_eq!(tum.lines().count(), kfs.len());
        for line in tum.lines() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            assert_eq!(fields.len(), 8);
            for f in fields {
                f.parse::<f64>().unwrap();
            }
        }
        let mut sidecar = Vec::new();
        write_segments(&kfs, &segments, &mut sidecar).unwrap();
        let sidecar = String::from_utf8(sidecar).unwrap();
        assert_eq!(sidecar.lines().count(), kfs.len());
        let first = sidecar.lines().next().unwrap();
        assert_eq!(first, "0 0 straight");
    }
}
