//! End-to-end estimation runtime.
//!
//! Ties the per-module machinery into one deterministic flow: a frontend that
//! turns raw sensor streams into self-contained keyframe bundles, a
//! sliding-window estimator that fuses them, the pose-graph refinement on top,
//! and an episodic environment for training the factor-weight policy. All
//! randomness (provider dropout, fault injection, ground consensus, agent
//! exploration) derives from the one run seed.

use std::collections::{HashMap, HashSet, VecDeque};
use std::ops::Range;

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::adaptive::{
    self, build_observation, run_episode, ActorSnapshot, EnvStep, EpisodeEnv, FeatureMotion,
    GridShape, ObservationMatrix, ReplayBuffer, Td3Agent, Td3Params, WeightAction,
};
use crate::camera::StereoRig;
use crate::config::{CorruptionConfig, OdometryConfig, RunConfig, Sensors};
use crate::factors::{Factor, FactorError, LandmarkId, LidarKind, StateId};
use crate::geometry::{exp_so3, Pose, Rotation, State, GRAVITY};
use crate::imu::{ImuNoise, PreintegratedImu};
use crate::lidar::{
    extract_planar, segment_ground, two_step_alignment, AlignmentParams, ExtractionParams,
    GroundParams, LidarLocalMap, PlanarFeatureSet,
};
use crate::optimizer::{
    lidar_pass, solve, vio_pass, OptimizerError, Problem, SolveOptions, SolverReport,
};
use crate::pose_graph::{
    detect_loops, optimize_global, segment_trajectory, GlobalParams, GlobalResult, GpsConstraint,
    GpsGate, GpsGateParams, GraphKeyframe, LoopParams, PoseGraphError, Segment, SegmentationParams,
};
use crate::sim::{derived_rng, streams, Dataset, GpsFix, ImuSample};
use crate::visual::{
    decide_keyframe, triangulate, Correspondence, CorrespondenceProvider, Keyframe,
    KeyframeObservation, LocalMap, SimProvider, Tracker,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("camera and imu streams are required")]
    MinimumSensors,
    #[error("{0} stream is enabled but the dataset has no samples for it")]
    MissingStream(&'static str),
    #[error("no keyframes were produced; check dropout and feature threshold")]
    NoKeyframes,
    #[error(transparent)]
    Factor(#[from] FactorError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    PoseGraph(#[from] PoseGraphError),
    #[error("checkpoint serialization failed: {0}")]
    Checkpoint(String),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error("dataset yields {have} episode segments; need at least {need}")]
    NotEnoughSegments { have: usize, need: usize },
}

// ---------------------------------------------------------------------------
// Frontend: sensor streams -> keyframe bundles

/// Everything the backend needs to fold one keyframe into the window. Bundles
/// are self-contained so the frontend, weight policy and estimator can live on
/// separate threads connected by ordered channels.
#[derive(Clone, Debug)]
pub struct KeyframeBundle {
    pub keyframe_id: usize,
    pub frame_index: usize,
    pub timestamp: f64,
    pub observations: Vec<KeyframeObservation>,
    /// Pixel flow from the previous keyframe; input to the weight policy.
    pub motions: Vec<FeatureMotion>,
    /// Live tracks extended by this frame, before fresh detections.
    pub tracked: usize,
    /// None at the first keyframe and across IMU holes.
    pub preint: Option<PreintegratedImu>,
    pub lidar: Option<PlanarFeatureSet>,
    pub gps: Option<GpsFix>,
    /// Simulator ground truth at this timestamp, for rewards and audits.
    pub truth: Option<State>,
    /// Mean specific force before motion; present only on the first bundle.
    pub boot_accel: Option<Vector3<f64>>,
}

/// Walks the camera timeline, decides keyframes, and attaches the matching
/// IMU, lidar and GPS slices to each one.
pub struct Frontend<'a> {
    data: &'a Dataset,
    config: RunConfig,
}

impl<'a> Frontend<'a> {
    pub fn new(data: &'a Dataset, config: &RunConfig) -> Result<Self, PipelineError> {
        if !(config.sensors.camera && config.sensors.imu) {
            return Err(PipelineError::MinimumSensors);
        }
        if data.stereo.is_empty() {
            return Err(PipelineError::MissingStream("camera"));
        }
        if data.imu.is_empty() {
            return Err(PipelineError::MissingStream("imu"));
        }
        if config.sensors.lidar && data.lidar.is_empty() {
            return Err(PipelineError::MissingStream("lidar"));
        }
        if config.sensors.gps && data.gps.is_empty() {
            return Err(PipelineError::MissingStream("gps"));
        }
        Ok(Frontend {
            data,
            config: config.clone(),
        })
    }

    pub fn run(&self) -> Result<Vec<KeyframeBundle>, PipelineError> {
        let data = self.data;
        let cfg = &self.config;
        let gaps = &cfg.frontend.imu_gaps;
        // Fault injection: samples inside a configured window never reach the
        // estimator, exactly as a dead sensor would present.
        let imu: Vec<ImuSample> = data
            .imu
            .iter()
            .filter(|s| !gaps.iter().any(|w| s.timestamp >= w[0] && s.timestamp <= w[1]))
            .copied()
            .collect();
        if imu.is_empty() {
            return Err(PipelineError::MissingStream("imu"));
        }
        let imu_dt = data.world.config.rates.imu_dt();
        let boot_n = imu.len().min(40);
        let boot_accel =
            imu[..boot_n].iter().map(|s| s.accel).sum::<Vector3<f64>>() / boot_n as f64;

        let mut provider = SimProvider::new(
            data.stereo.clone(),
            cfg.frontend.dropout,
            cfg.frontend.false_match_rate,
            derived_rng(cfg.seed, streams::PROVIDER),
        );
        let mut corrupt_rng = derived_rng(cfg.seed, streams::CORRUPTION);
        let mut sac_rng = derived_rng(cfg.seed, streams::SAC);
        let mut tracker = Tracker::new();
        let noise = floored_noise(&data.world.config.noise);
        // A fix only belongs to a keyframe when their timestamps coincide on
        // the sample grid; attaching a neighbor would bake real motion
        // between the two instants into the position constraint.
        let gps_tol = 0.25 * imu_dt;
        let lidar_half = 0.5 / data.world.config.rates.lidar_hz as f64;

        let mut bundles: Vec<KeyframeBundle> = Vec::new();
        let mut prev_kf_pixels: HashMap<u32, Vector2<f64>> = HashMap::new();
        let mut prev_kf_time = 0.0;
        let mut imu_cursor = 0usize;
        let mut lidar_cursor = 0usize;
        let mut gps_cursor = 0usize;

        for (frame_index, frame) in data.stereo.iter().enumerate() {
            let t = frame.timestamp;
            let mut matches = provider.frame_matches(frame_index);
            if let Some(m) = matches.as_mut() {
                corrupt_matches(m, &cfg.corruption, t, &mut corrupt_rng);
            }
            let outcome = tracker.track_frame(matches.as_deref(), None, frame_index, t);
            let is_first = bundles.is_empty();
            // Time cap bounds every preintegration interval even while
            // tracking stays strong; the tolerance absorbs grid rounding.
            let interval_due =
                !is_first && t - prev_kf_time >= cfg.frontend.max_keyframe_interval - 0.25 * imu_dt;
            let is_kf = match &matches {
                Some(_) => {
                    is_first
                        || interval_due
                        || decide_keyframe(outcome.tracked, cfg.frontend.feature_threshold)
                }
                None => false,
            };
            if !is_kf {
                continue;
            }
            let matches = matches.unwrap();
            let motions: Vec<FeatureMotion> = matches
                .iter()
                .filter_map(|c| {
                    prev_kf_pixels.get(&c.landmark_id).map(|p| FeatureMotion {
                        position: c.left,
                        displacement: c.left - p,
                    })
                })
                .collect();
            tracker.adopt_detections(&matches, frame_index, t);
            tracker.prune_dead();
            let observations: Vec<KeyframeObservation> = matches
                .iter()
                .map(|c| KeyframeObservation {
                    landmark_id: c.landmark_id,
                    left: c.left,
                    right: c.right,
                    false_match: c.false_match,
                })
                .collect();
            prev_kf_pixels = matches.iter().map(|c| (c.landmark_id, c.left)).collect();

            let preint = if is_first {
                None
            } else {
                integrate_interval(&imu, &mut imu_cursor, prev_kf_time, t, imu_dt, noise)
            };
            if !is_first && preint.is_none() {
                log::warn!("IMU hole over [{prev_kf_time:.3}, {t:.3}]; bundle carries no preintegration");
            }
            let lidar = if cfg.sensors.lidar {
                attach_lidar(data, &mut lidar_cursor, t, lidar_half, &cfg.corruption, &mut sac_rng, &mut corrupt_rng)
            } else {
                None
            };
            let gps = if cfg.sensors.gps {
                attach_gps(&data.gps, &mut gps_cursor, t, gps_tol)
            } else {
                None
            };
            bundles.push(KeyframeBundle {
                keyframe_id: bundles.len(),
                frame_index,
                timestamp: t,
                observations,
                motions,
                tracked: outcome.tracked,
                preint,
                lidar,
                gps,
                truth: Some(data.world.truth_at_time(t)),
                boot_accel: is_first.then_some(boot_accel),
            });
            prev_kf_time = t;
        }
        if bundles.is_empty() {
            return Err(PipelineError::NoKeyframes);
        }
        Ok(bundles)
    }
}

/// Noise densities for preintegration, floored so the residual covariance
/// stays positive definite even on an ideal dataset with zero sensor noise.
fn floored_noise(params: &crate::sim::NoiseParams) -> ImuNoise {
    let mut n = ImuNoise::from_params(params);
    n.gyro_density = n.gyro_density.max(1e-8);
    n.accel_density = n.accel_density.max(1e-7);
    n.gyro_walk_density = n.gyro_walk_density.max(1e-10);
    n.accel_walk_density = n.accel_walk_density.max(1e-9);
    n
}

/// Preintegrates the samples covering [t0, t1). Samples sit on a fixed grid
/// where the reading at ts covers [ts, ts+dt), so the exact number expected
/// over the interval is known; any shortfall means a hole and yields None.
fn integrate_interval(
    samples: &[ImuSample],
    cursor: &mut usize,
    t0: f64,
    t1: f64,
    dt: f64,
    noise: ImuNoise,
) -> Option<PreintegratedImu> {
    let eps = 0.25 * dt;
    let expected = ((t1 - t0) / dt).round() as usize;
    if expected == 0 {
        return None;
    }
    let mut pre = PreintegratedImu::new(Vector3::zeros(), Vector3::zeros(), noise);
    let mut count = 0usize;
    while *cursor < samples.len() && samples[*cursor].timestamp < t1 - eps {
        let s = samples[*cursor];
        *cursor += 1;
        if s.timestamp < t0 - eps {
            continue;
        }
        if pre.integrate(&s, dt).is_err() {
            return None;
        }
        count += 1;
    }
    (count == expected).then_some(pre)
}

fn attach_lidar(
    data: &Dataset,
    cursor: &mut usize,
    t: f64,
    half: f64,
    corruption: &CorruptionConfig,
    sac_rng: &mut ChaCha20Rng,
    corrupt_rng: &mut ChaCha20Rng,
) -> Option<PlanarFeatureSet> {
    let scans = &data.lidar;
    while *cursor < scans.len() && scans[*cursor].timestamp < t - half {
        *cursor += 1;
    }
    if *cursor >= scans.len() || scans[*cursor].timestamp > t + half {
        return None;
    }
    let scan = &scans[*cursor];
    *cursor += 1;
    let candidates = extract_planar(scan, &ExtractionParams::default());
    let mut features = match segment_ground(
        &candidates,
        scan.timestamp,
        data.world.config.scanner_height,
        &GroundParams::default(),
        sac_rng,
    ) {
        Ok(f) => f,
        Err(e) => {
            log::warn!("lidar features unavailable at t={t:.2}: {e}");
            return None;
        }
    };
    corrupt_lidar(&mut features, corruption, t, corrupt_rng);
    Some(features)
}

fn attach_gps(fixes: &[GpsFix], cursor: &mut usize, t: f64, tol: f64) -> Option<GpsFix> {
    while *cursor < fixes.len() {
        let f = fixes[*cursor];
        if f.timestamp < t - tol {
            *cursor += 1;
            continue;
        }
        if f.timestamp <= t + tol {
            *cursor += 1;
            if f.valid {
                return Some(f);
            }
            continue;
        }
        return None;
    }
    None
}

// ---------------------------------------------------------------------------
// Scheduled degradation for training scenes

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    VisualBurst,
    LidarSparse,
}

/// The schedule alternates a noisy-camera phase with a starved-lidar phase so
/// no constant weighting is optimal across a whole run.
fn corruption_phase(c: &CorruptionConfig, t: f64) -> Option<Phase> {
    if !c.enabled || c.period <= 0.0 {
        return None;
    }
    if (t / c.period).rem_euclid(1.0) < 0.5 {
        Some(Phase::VisualBurst)
    } else {
        Some(Phase::LidarSparse)
    }
}

fn corrupt_matches(
    matches: &mut Vec<Correspondence>,
    c: &CorruptionConfig,
    t: f64,
    rng: &mut ChaCha20Rng,
) {
    if corruption_phase(c, t) != Some(Phase::VisualBurst) {
        return;
    }
    let jitter = Normal::new(0.0, c.pixel_sigma.max(0.0)).unwrap();
    matches.retain(|_| rng.gen::<f64>() >= c.match_dropout);
    for m in matches.iter_mut() {
        m.left.x += jitter.sample(rng);
        m.left.y += jitter.sample(rng);
        m.right.x += jitter.sample(rng);
        m.right.y += jitter.sample(rng);
    }
}

fn corrupt_lidar(f: &mut PlanarFeatureSet, c: &CorruptionConfig, t: f64, rng: &mut ChaCha20Rng) {
    if corruption_phase(c, t) != Some(Phase::LidarSparse) {
        return;
    }
    let noise = Normal::new(0.0, c.lidar_range_sigma.max(0.0)).unwrap();
    for pts in [&mut f.ground_points, &mut f.surface_points] {
        pts.retain(|_| rng.gen::<f64>() >= c.lidar_drop);
        for p in pts.iter_mut() {
            let n = p.norm();
            if n > 1e-9 {
                *p += (*p / n) * noise.sample(rng);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// State propagation helpers

/// First state of a run. Roll and pitch come from the gravity support
/// direction the accelerometer reports before motion; yaw is unobservable and
/// starts at zero. Episodic training resets mid-trajectory where no such
/// reading exists, so those boots fall back to the simulator truth.
fn boot_state(bundle: &KeyframeBundle) -> State {
    let mut s = State::at_rest(bundle.timestamp);
    if let Some(accel) = bundle.boot_accel {
        s.rotation = gravity_alignment(&accel);
    } else if let Some(truth) = bundle.truth {
        s = truth;
        s.timestamp = bundle.timestamp;
    }
    s
}

/// Rotation mapping the measured support direction onto world up.
fn gravity_alignment(accel: &Vector3<f64>) -> Rotation {
    let norm = accel.norm();
    if norm < 1e-9 {
        return Rotation::identity();
    }
    let a = accel / norm;
    let z = Vector3::z();
    let axis = a.cross(&z);
    let s = axis.norm();
    let c = a.dot(&z);
    if s < 1e-12 {
        return if c > 0.0 {
            Rotation::identity()
        } else {
            exp_so3(&(Vector3::x() * std::f64::consts::PI))
        };
    }
    exp_so3(&(axis / s * s.atan2(c)))
}

/// Propagates the previous keyframe state through a preintegrated interval.
fn predict_state(prev: &State, pre: &PreintegratedImu, timestamp: f64) -> State {
    let shifted = pre.correct_for_bias(prev.bias_accel, prev.bias_gyro);
    let dt = shifted.dt_total;
    let mut next = *prev;
    next.rotation = prev.rotation * shifted.delta_rotation;
    next.velocity = prev.velocity + GRAVITY * dt + prev.rotation.rotate(&shifted.delta_velocity);
    next.position = prev.position
        + prev.velocity * dt
        + GRAVITY * (0.5 * dt * dt)
        + prev.rotation.rotate(&shifted.delta_position);
    next.timestamp = timestamp;
    next
}

/// Constant-velocity fallback across an IMU hole.
fn coast(prev: &State, timestamp: f64) -> State {
    let dt = timestamp - prev.timestamp;
    let mut next = *prev;
    next.position += prev.velocity * dt;
    next.timestamp = timestamp;
    next
}

// ---------------------------------------------------------------------------
// Sliding-window estimator

#[derive(Clone, Debug)]
pub struct EstimatorOptions {
    pub sensors: Sensors,
    pub odometry: OdometryConfig,
    pub rig: StereoRig,
}

impl EstimatorOptions {
    pub fn from_run(config: &RunConfig, data: &Dataset) -> Self {
        EstimatorOptions {
            sensors: config.sensors.clone(),
            odometry: config.odometry.clone(),
            rig: data.world.config.camera,
        }
    }
}

/// Outcome of folding one bundle into the window.
#[derive(Clone, Debug)]
pub struct StepSummary {
    pub keyframe_id: usize,
    pub timestamp: f64,
    /// Post-solve state of this keyframe.
    pub state: State,
    pub vio: Option<SolverReport>,
    pub lidar: Option<SolverReport>,
    pub lidar_factors: usize,
    /// The interval to the previous keyframe had no usable IMU data.
    pub imu_gap: bool,
    /// The velocity/bias refresh ran after this keyframe.
    pub reinitialized: bool,
}

/// Sliding-window odometry over keyframe bundles: IMU prediction, stereo
/// triangulation, a camera+inertial pass, then a lidar alignment and joint
/// pass, with a delayed velocity/bias refresh after boots and IMU holes.
pub struct WindowEstimator {
    opts: EstimatorOptions,
    map: LocalMap,
    /// Retained scans for the lidar local map, oldest first. The map itself
    /// is reassembled from these every step at the poses the window
    /// currently believes, so its planes follow later corrections instead of
    /// fossilizing the estimate each scan was pushed at.
    lidar_scans: VecDeque<(usize, PlanarFeatureSet)>,
    /// Preintegrated interval keyed by the id of its later keyframe.
    preints: HashMap<usize, PreintegratedImu>,
    /// Keyframes evicted from the window, in eviction order.
    finished: Vec<Keyframe>,
    /// Keyframes until the inertial refresh runs; 0 means settled.
    init_left: usize,
    log: Vec<String>,
}

impl WindowEstimator {
    pub fn new(opts: EstimatorOptions) -> Self {
        let window = opts.odometry.window.max(2);
        WindowEstimator {
            opts,
            map: LocalMap::new(window),
            lidar_scans: VecDeque::new(),
            preints: HashMap::new(),
            finished: Vec::new(),
            init_left: 0,
            log: Vec::new(),
        }
    }

    pub fn step(
        &mut self,
        bundle: &KeyframeBundle,
        weights: WeightAction,
    ) -> Result<StepSummary, PipelineError> {
        let imu_gap = !self.map.is_empty() && bundle.preint.is_none();
        let mut state = if self.map.is_empty() {
            self.init_left = self.opts.odometry.init_keyframes.max(1);
            boot_state(bundle)
        } else {
            let prev = self
                .map
                .keyframes()
                .last()
                .expect("non-empty window has a latest keyframe")
                .state;
            match &bundle.preint {
                Some(pre) => predict_state(&prev, pre, bundle.timestamp),
                None => {
                    log::warn!(
                        "keyframe {} arrives over an IMU hole; coasting and scheduling a re-initialization",
                        bundle.keyframe_id
                    );
                    self.init_left = self.opts.odometry.init_keyframes.max(1);
                    coast(&prev, bundle.timestamp)
                }
            }
        };

        // The very first interval fixes the boot velocity: the second pose is
        // observable from landmarks triangulated at the first, and the
        // preintegrated position delta then pins what the velocity must have
        // been for the IMU to agree.
        if self.map.len() == 1 {
            if let Some(pre) = &bundle.preint {
                if let Some(refined) = self.refine_pose_against_map(&state, &bundle.observations) {
                    let dt = pre.dt_total;
                    let prev = self
                        .map
                        .keyframes()
                        .last()
                        .expect("window holds the boot keyframe")
                        .state;
                    let v0 = (refined.translation
                        - prev.position
                        - GRAVITY * (0.5 * dt * dt)
                        - prev.rotation.rotate(&pre.delta_position))
                        / dt;
                    if let Some(boot) = self.map.keyframes_mut().last() {
                        boot.state.velocity = v0;
                    }
                    let prev = self
                        .map
                        .keyframes()
                        .last()
                        .expect("window holds the boot keyframe")
                        .state;
                    state = predict_state(&prev, pre, bundle.timestamp);
                    state.rotation = refined.rotation;
                    state.position = refined.translation;
                }
            }
        }

        // Unseen landmarks enter the map by stereo triangulation at the
        // predicted pose; failures (low disparity) are retried at the next
        // sighting.
        for obs in &bundle.observations {
            if self.map.landmark(obs.landmark_id).is_none() {
                if let Ok(p) = triangulate(
                    &obs.left,
                    &obs.right,
                    &self.opts.rig.intrinsics,
                    self.opts.rig.baseline,
                    &state.pose(),
                ) {
                    self.map.upsert_landmark(obs.landmark_id, p);
                }
            }
        }

        if let Some(pre) = &bundle.preint {
            self.preints.insert(bundle.keyframe_id, pre.clone());
        }
        let kf = Keyframe {
            id: bundle.keyframe_id,
            frame_index: bundle.frame_index,
            timestamp: bundle.timestamp,
            state,
            observations: bundle.observations.clone(),
        };
        let pinned: HashSet<usize> = self.lidar_scans.iter().map(|(id, _)| *id).collect();
        let evicted = self.map.insert_keyframe(kf, &pinned);
        if !evicted.is_empty() {
            for e in &evicted {
                self.preints.remove(&e.id);
            }
            self.finished.extend(evicted);
            let live: HashSet<u32> = self
                .map
                .keyframes()
                .flat_map(|k| k.observations.iter().map(|o| o.landmark_id))
                .collect();
            self.map.prune_landmarks(&live);
        }

        let mut summary = StepSummary {
            keyframe_id: bundle.keyframe_id,
            timestamp: bundle.timestamp,
            state,
            vio: None,
            lidar: None,
            lidar_factors: 0,
            imu_gap,
            reinitialized: false,
        };

        if self.map.len() >= 2 {
            let (mut problem, lm_ids, kf_ids) = self.build_problem(weights)?;
            let opts = SolveOptions {
                max_iter: self.opts.odometry.max_iterations,
                label: format!("kf{:04}", bundle.keyframe_id),
                ..SolveOptions::default()
            };
            let report = vio_pass(&mut problem, &opts)?;
            self.log.push(report.log_line());
            summary.vio = Some(report);

            if self.opts.sensors.lidar {
                if let Some(features) = &bundle.lidar {
                    let lidar_map = self.assemble_lidar_map(&problem, &kf_ids);
                    summary.lidar_factors = self.lidar_stage(
                        &mut problem,
                        features,
                        &lidar_map,
                        weights,
                        &opts,
                        &mut summary,
                    )?;
                }
            }
            self.write_back(&problem, &lm_ids, &kf_ids);
        }

        if self.opts.sensors.lidar {
            if let Some(features) = &bundle.lidar {
                self.lidar_scans.push_back((bundle.keyframe_id, features.clone()));
                while self.lidar_scans.len() > self.opts.odometry.lidar_map_scans.max(1) {
                    self.lidar_scans.pop_front();
                }
            }
        }

        if self.init_left > 0 {
            self.init_left -= 1;
            if self.init_left == 0 {
                summary.reinitialized = self.refresh_inertial_state(weights)?;
            }
        }

        summary.state = self
            .map
            .keyframes()
            .last()
            .expect("window holds the keyframe just inserted")
            .state;
        Ok(summary)
    }

    /// Aligns the scan against the rolling plane map and appends point-to-
    /// plane factors for the newest state; returns how many were built.
    /// Fresh local map from the retained scans, each placed at the pose the
    /// window currently assigns its keyframe. Scans whose keyframe already
    /// left the window are dropped rather than anchored to a stale estimate.
    fn assemble_lidar_map(&self, problem: &Problem, kf_ids: &[usize]) -> LidarLocalMap {
        let mut map = LidarLocalMap::new(
            self.opts.odometry.lidar_map_scans.max(1),
            self.opts.odometry.lidar_cell,
        );
        for (id, features) in &self.lidar_scans {
            let Some(idx) = kf_ids.iter().position(|k| k == id) else {
                continue;
            };
            map.push_scan(*id, features, &problem.states[idx].pose());
        }
        map
    }

    fn lidar_stage(
        &mut self,
        problem: &mut Problem,
        features: &PlanarFeatureSet,
        lidar_map: &LidarLocalMap,
        weights: WeightAction,
        opts: &SolveOptions,
        summary: &mut StepSummary,
    ) -> Result<usize, PipelineError> {
        if lidar_map.is_empty() {
            return Ok(0);
        }
        let cur = problem.states.len() - 1;
        let align = AlignmentParams {
            max_iterations: 10,
            search_radius: self.opts.odometry.lidar_search_radius,
            min_correspondences: self.opts.odometry.lidar_min_correspondences,
            ..AlignmentParams::default()
        };
        let outcome = two_step_alignment(features, lidar_map, &problem.states[cur].pose(), &align);
        // The aligned pose only seeds data association; the state itself is
        // decided by the joint solve, where visual and inertial factors keep
        // the directions a corridor scan cannot observe.
        let pose = if outcome.ground_skipped && outcome.surface_skipped {
            problem.states[cur].pose()
        } else {
            outcome.pose
        };
        let sid = StateId(cur);
        let mut built = 0usize;
        let budget = (self.opts.odometry.max_lidar_factors / 2).max(1);
        for (kind, pts) in [
            (LidarKind::Ground, &features.ground_points),
            (LidarKind::Surface, &features.surface_points),
        ] {
            if pts.is_empty() {
                continue;
            }
            let stride = pts.len().div_ceil(budget).max(1);
            for p in pts.iter().step_by(stride) {
                let world = pose.transform(p);
                let Some(plane) =
                    lidar_map.associate_plane(&world, kind, self.opts.odometry.lidar_search_radius)
                else {
                    continue;
                };
                problem
                    .factors
                    .push(Factor::lidar(kind, sid, *p, plane, weights.lidar)?);
                built += 1;
            }
        }
        if built > 0 {
            let report = lidar_pass(problem, opts)?;
            self.log.push(report.log_line());
            summary.lidar = Some(report);
        }
        Ok(built)
    }

    /// Window problem over the current keyframes: one visual factor per
    /// observation with a mapped landmark, one inertial factor per interval
    /// with preintegration. Landmark columns are densely indexed in first-
    /// encounter order so the result never depends on hash iteration.
    fn build_problem(
        &self,
        weights: WeightAction,
    ) -> Result<(Problem, Vec<u32>, Vec<usize>), PipelineError> {
        let kfs: Vec<&Keyframe> = self.map.keyframes().collect();
        let states: Vec<State> = kfs.iter().map(|k| k.state).collect();
        let kf_ids: Vec<usize> = kfs.iter().map(|k| k.id).collect();
        let mut lm_index: HashMap<u32, usize> = HashMap::new();
        let mut lm_ids: Vec<u32> = Vec::new();
        let mut landmarks: Vec<Vector3<f64>> = Vec::new();
        let mut factors: Vec<Factor> = Vec::new();
        for (si, kf) in kfs.iter().enumerate() {
            for obs in &kf.observations {
                let Some(p) = self.map.landmark(obs.landmark_id).copied() else {
                    continue;
                };
                let li = *lm_index.entry(obs.landmark_id).or_insert_with(|| {
                    lm_ids.push(obs.landmark_id);
                    landmarks.push(p);
                    landmarks.len() - 1
                });
                factors.push(Factor::visual(
                    StateId(si),
                    LandmarkId(li),
                    obs.left,
                    self.opts.rig.intrinsics,
                    weights.visual,
                )?);
            }
            if si > 0 {
                if let Some(pre) = self.preints.get(&kf.id) {
                    factors.push(Factor::inertial(
                        StateId(si - 1),
                        StateId(si),
                        pre.clone(),
                        GRAVITY,
                        self.opts.odometry.inertial_weight,
                    )?);
                }
            }
        }
        let mut problem = Problem::new(states, landmarks, factors)?;
        problem.freeze_state(0);
        Ok((problem, lm_ids, kf_ids))
    }

    fn write_back(&mut self, problem: &Problem, lm_ids: &[u32], kf_ids: &[usize]) {
        let by_id: HashMap<usize, State> = kf_ids
            .iter()
            .zip(&problem.states)
            .map(|(id, s)| (*id, *s))
            .collect();
        for kf in self.map.keyframes_mut() {
            if let Some(s) = by_id.get(&kf.id) {
                kf.state = *s;
            }
        }
        for (li, id) in lm_ids.iter().enumerate() {
            self.map.upsert_landmark(*id, problem.landmarks[li]);
        }
    }

    /// Pose-only visual refinement of a predicted state against landmarks
    /// already in the map; used to make the boot velocity observable.
    fn refine_pose_against_map(
        &self,
        state: &State,
        observations: &[KeyframeObservation],
    ) -> Option<Pose> {
        let mut landmarks: Vec<Vector3<f64>> = Vec::new();
        let mut factors: Vec<Factor> = Vec::new();
        for obs in observations {
            let Some(p) = self.map.landmark(obs.landmark_id).copied() else {
                continue;
            };
            factors.push(
                Factor::visual(
                    StateId(0),
                    LandmarkId(landmarks.len()),
                    obs.left,
                    self.opts.rig.intrinsics,
                    1.0,
                )
                .ok()?,
            );
            landmarks.push(p);
        }
        if landmarks.len() < 6 {
            return None;
        }
        let count = landmarks.len();
        let mut problem = Problem::new(vec![*state], landmarks, factors).ok()?;
        for i in 0..count {
            problem.freeze_landmark(i);
        }
        let opts = SolveOptions {
            max_iter: 15,
            label: "boot_pose".to_string(),
            ..SolveOptions::default()
        };
        solve(&mut problem, &opts).ok()?;
        Some(problem.states[0].pose())
    }

    /// Velocity/bias refresh: an inertial-only solve with every position held
    /// by a tight pseudo-prior, followed by a full window pass. Runs a fixed
    /// number of keyframes after a boot or an IMU hole.
    fn refresh_inertial_state(&mut self, weights: WeightAction) -> Result<bool, PipelineError> {
        let kfs: Vec<(usize, State)> = self.map.keyframes().map(|k| (k.id, k.state)).collect();
        if kfs.len() < 2 {
            return Ok(false);
        }
        let mut factors: Vec<Factor> = Vec::new();
        let mut have_inertial = false;
        for (i, (id, _)) in kfs.iter().enumerate().skip(1) {
            if let Some(pre) = self.preints.get(id) {
                factors.push(Factor::inertial(
                    StateId(i - 1),
                    StateId(i),
                    pre.clone(),
                    GRAVITY,
                    self.opts.odometry.inertial_weight,
                )?);
                have_inertial = true;
            }
        }
        if !have_inertial {
            return Ok(false);
        }
        for (i, (_, s)) in kfs.iter().enumerate() {
            factors.push(Factor::gps(StateId(i), s.position, 1e-3, 1.0)?);
        }
        let states: Vec<State> = kfs.iter().map(|(_, s)| *s).collect();
        let mut problem = Problem::new(states, Vec::new(), factors)?;
        let opts = SolveOptions {
            label: "init_vb".to_string(),
            ..SolveOptions::default()
        };
        let report = solve(&mut problem, &opts)?;
        self.log.push(report.log_line());
        let index_of: HashMap<usize, usize> = kfs
            .iter()
            .enumerate()
            .map(|(i, (id, _))| (*id, i))
            .collect();
        for kf in self.map.keyframes_mut() {
            if let Some(&i) = index_of.get(&kf.id) {
                kf.state.velocity = problem.states[i].velocity;
                kf.state.bias_accel = problem.states[i].bias_accel;
                kf.state.bias_gyro = problem.states[i].bias_gyro;
            }
        }

        let (mut problem, lm_ids, kf_ids) = self.build_problem(weights)?;
        let opts = SolveOptions {
            max_iter: self.opts.odometry.max_iterations,
            label: "init_window".to_string(),
            ..SolveOptions::default()
        };
        let report = vio_pass(&mut problem, &opts)?;
        self.log.push(report.log_line());
        self.write_back(&problem, &lm_ids, &kf_ids);
        Ok(true)
    }

    /// Estimated pose of a keyframe, in the window or already evicted.
    pub fn pose_of(&self, keyframe_id: usize) -> Option<Pose> {
        if let Some(kf) = self.map.keyframes().find(|k| k.id == keyframe_id) {
            return Some(kf.state.pose());
        }
        self.finished
            .iter()
            .rev()
            .find(|k| k.id == keyframe_id)
            .map(|k| k.state.pose())
    }

    /// Full trajectory so far: evicted keyframes then the live window.
    pub fn trajectory(&self) -> Vec<GraphKeyframe> {
        let mut out: Vec<GraphKeyframe> = self
            .finished
            .iter()
            .map(|k| GraphKeyframe {
                id: k.id,
                timestamp: k.timestamp,
                pose: k.state.pose(),
            })
            .collect();
        out.extend(self.map.keyframes().map(|k| GraphKeyframe {
            id: k.id,
            timestamp: k.timestamp,
            pose: k.state.pose(),
        }));
        out
    }

    pub fn take_log(&mut self) -> Vec<String> {
        std::mem::take(&mut self.log)
    }
}

// ---------------------------------------------------------------------------
// GPS gating

/// Folds per-keyframe gate decisions into pose-graph constraints.
pub struct GpsCollector {
    gate: GpsGate,
    sigma: f64,
    pub constraints: Vec<GpsConstraint>,
    pub accepted: Vec<f64>,
    pub rejected: Vec<f64>,
}

impl GpsCollector {
    pub fn new(config: &RunConfig, data: &Dataset) -> Self {
        let sigma = if config.pose_graph.gps_sigma > 0.0 {
            config.pose_graph.gps_sigma
        } else {
            data.world.config.noise.gps.max(0.05)
        };
        GpsCollector {
            gate: GpsGate::new(GpsGateParams {
                gate_sigma: config.pose_graph.gate_sigma,
                ..GpsGateParams::default()
            }),
            sigma,
            constraints: Vec::new(),
            accepted: Vec::new(),
            rejected: Vec::new(),
        }
    }

    pub fn offer(&mut self, bundle: &KeyframeBundle, summary: &StepSummary) {
        let Some(fix) = &bundle.gps else { return };
        if self
            .gate
            .assess(&fix.position, &summary.state.position, self.sigma)
        {
            self.constraints.push(GpsConstraint {
                keyframe: summary.keyframe_id,
                position: fix.position,
                sigma: self.sigma,
            });
            self.accepted.push(fix.timestamp);
        } else {
            self.rejected.push(fix.timestamp);
        }
    }
}

// ---------------------------------------------------------------------------
// Full-run driver

#[derive(Clone, Debug)]
pub struct RunOutput {
    /// Window-odometry trajectory, one pose per keyframe.
    pub local: Vec<GraphKeyframe>,
    /// Trajectory after the segmented pose-graph refinement.
    pub global: Vec<GraphKeyframe>,
    pub segments: Vec<Segment>,
    pub global_result: Option<GlobalResult>,
    pub loops: usize,
    pub gps_used: usize,
    pub constraints: Vec<GpsConstraint>,
    pub gps_accepted: Vec<f64>,
    pub gps_rejected: Vec<f64>,
    pub summaries: Vec<StepSummary>,
    pub log: Vec<String>,
}

pub fn constant_weights(config: &RunConfig) -> WeightAction {
    WeightAction {
        visual: config.odometry.visual_weight,
        lidar: config.odometry.lidar_weight,
    }
}

pub fn run_pipeline(
    data: &Dataset,
    config: &RunConfig,
    actor: Option<&ActorSnapshot>,
) -> Result<RunOutput, PipelineError> {
    let bundles = Frontend::new(data, config)?.run()?;
    run_bundles(data, config, &bundles, actor)
}

pub fn run_bundles(
    data: &Dataset,
    config: &RunConfig,
    bundles: &[KeyframeBundle],
    actor: Option<&ActorSnapshot>,
) -> Result<RunOutput, PipelineError> {
    let mut estimator = WindowEstimator::new(EstimatorOptions::from_run(config, data));
    let grid = GridShape {
        rows: config.agent.grid_rows,
        cols: config.agent.grid_cols,
    };
    let intr = &data.world.config.camera.intrinsics;
    let image = (intr.width as f64, intr.height as f64);
    let constant = constant_weights(config);
    let mut gps = GpsCollector::new(config, data);
    let mut summaries = Vec::with_capacity(bundles.len());
    for bundle in bundles {
        let weights = match actor {
            Some(a) => a.act(&build_observation(&bundle.motions, image, grid)),
            None => constant,
        };
        let summary = estimator.step(bundle, weights)?;
        if config.sensors.gps {
            gps.offer(bundle, &summary);
        }
        summaries.push(summary);
    }
    let local = estimator.trajectory();
    let mut log = estimator.take_log();

    let mut sets: HashMap<usize, PlanarFeatureSet> = HashMap::new();
    for b in bundles {
        if let Some(f) = &b.lidar {
            sets.insert(b.keyframe_id, f.clone());
        }
    }
    let (global, segments, loops, global_result) = if local.len() >= 2 {
        let stage = global_stage(&local, &sets, &gps.constraints, config)?;
        if stage.result.no_op {
            log.push("global stage: no gps or loop constraints; poses unchanged".to_string());
        }
        (
            stage.global,
            stage.segments,
            stage.loops,
            Some(stage.result),
        )
    } else {
        (local.clone(), Vec::new(), 0, None)
    };

    Ok(RunOutput {
        local,
        global,
        segments,
        global_result,
        loops,
        gps_used: gps.constraints.len(),
        constraints: gps.constraints,
        gps_accepted: gps.accepted,
        gps_rejected: gps.rejected,
        summaries,
        log,
    })
}

pub struct GlobalStage {
    pub global: Vec<GraphKeyframe>,
    pub segments: Vec<Segment>,
    pub loops: usize,
    pub result: GlobalResult,
}

/// Segments the trajectory, closes loops by re-aligning stored lidar
/// features, and runs the two-stage graph optimization.
pub fn global_stage(
    local: &[GraphKeyframe],
    feature_sets: &HashMap<usize, PlanarFeatureSet>,
    constraints: &[GpsConstraint],
    config: &RunConfig,
) -> Result<GlobalStage, PipelineError> {
    let pg = &config.pose_graph;
    let segments = segment_trajectory(
        local,
        &SegmentationParams {
            yaw_window: pg.yaw_window,
            turn_thresh: pg.turn_thresh,
        },
    )?;
    let loop_params = LoopParams {
        radius: pg.loop_radius,
        min_gap: pg.loop_min_gap,
        min_spacing: pg.loop_min_spacing,
    };
    let loops = if config.sensors.lidar && !feature_sets.is_empty() {
        let odo = config.odometry.clone();
        detect_loops(local, &loop_params, |i, j| {
            measure_loop(local, feature_sets, i, j, &odo)
        })
    } else {
        Vec::new()
    };
    let params = GlobalParams {
        odometry_rot_sigma: pg.odometry_rot_sigma,
        odometry_trans_sigma: pg.odometry_trans_sigma,
        prior_ratio: pg.prior_ratio,
        ..GlobalParams::default()
    };
    let result = optimize_global(local, &segments, constraints, &loops, &params)?;
    let global = local
        .iter()
        .zip(&result.poses)
        .map(|(k, p)| GraphKeyframe {
            id: k.id,
            timestamp: k.timestamp,
            pose: *p,
        })
        .collect();
    Ok(GlobalStage {
        global,
        segments,
        loops: loops.len(),
        result,
    })
}

/// Measures a loop candidate by aligning the revisit scan against the stored
/// scan of the earlier keyframe. Both alignment steps must find enough
/// correspondences or the candidate is dropped.
fn measure_loop(
    kfs: &[GraphKeyframe],
    sets: &HashMap<usize, PlanarFeatureSet>,
    i: usize,
    j: usize,
    odo: &OdometryConfig,
) -> Option<Pose> {
    let fi = sets.get(&kfs[i].id)?;
    let fj = sets.get(&kfs[j].id)?;
    let mut map = LidarLocalMap::new(1, odo.lidar_cell);
    map.push_scan(kfs[i].id, fi, &kfs[i].pose);
    let params = AlignmentParams {
        max_iterations: 30,
        search_radius: odo.lidar_search_radius.max(2.0),
        min_correspondences: odo.lidar_min_correspondences,
        ..AlignmentParams::default()
    };
    let outcome = two_step_alignment(fj, &map, &kfs[j].pose, &params);
    if outcome.ground_skipped || outcome.surface_skipped {
        return None;
    }
    Some(kfs[i].pose.inverse().compose(&outcome.pose))
}

// ---------------------------------------------------------------------------
// Episodic training

/// Short fixed-length episodes over consecutive keyframe bundles. Each reset
/// rebuilds the estimator on the next slice so episodes are independent; the
/// reward follows how well the newest relative pose matches the simulator
/// truth.
pub struct SegmentEnv<'a> {
    bundles: &'a [KeyframeBundle],
    slices: Vec<Range<usize>>,
    next_slice: usize,
    opts: EstimatorOptions,
    constant: WeightAction,
    grid: GridShape,
    image: (f64, f64),
    estimator: Option<WindowEstimator>,
    cursor: usize,
    end: usize,
}

impl<'a> SegmentEnv<'a> {
    pub fn new(
        bundles: &'a [KeyframeBundle],
        slices: Vec<Range<usize>>,
        opts: EstimatorOptions,
        constant: WeightAction,
        grid: GridShape,
    ) -> Self {
        assert!(!slices.is_empty(), "environment needs at least one slice");
        let intr = &opts.rig.intrinsics;
        let image = (intr.width as f64, intr.height as f64);
        SegmentEnv {
            bundles,
            slices,
            next_slice: 0,
            opts,
            constant,
            grid,
            image,
            estimator: None,
            cursor: 0,
            end: 0,
        }
    }

    pub fn slice_count(&self) -> usize {
        self.slices.len()
    }
}

impl EpisodeEnv for SegmentEnv<'_> {
    fn reset(&mut self) -> ObservationMatrix {
        let slice = self.slices[self.next_slice % self.slices.len()].clone();
        self.next_slice += 1;
        let mut estimator = WindowEstimator::new(self.opts.clone());
        estimator
            .step(&self.bundles[slice.start], self.constant)
            .expect("the first keyframe folds in without a solve");
        self.estimator = Some(estimator);
        self.cursor = slice.start + 1;
        self.end = slice.end;
        build_observation(&self.bundles[self.cursor].motions, self.image, self.grid)
    }

    fn step(&mut self, action: &WeightAction) -> Option<EnvStep> {
        let estimator = self.estimator.as_mut()?;
        if self.cursor >= self.end {
            return None;
        }
        let bundle = &self.bundles[self.cursor];
        let prev = &self.bundles[self.cursor - 1];
        let summary = estimator.step(bundle, *action).ok()?;
        let truth_i = prev.truth?;
        let truth_j = bundle.truth?;
        let est_i = estimator.pose_of(prev.keyframe_id)?;
        let est_j = summary.state.pose();
        let reward = adaptive::reward(&est_i, &est_j, &truth_i.pose(), &truth_j.pose());
        self.cursor += 1;
        let done = self.cursor >= self.end;
        let obs = if done {
            ObservationMatrix::zeros(self.grid)
        } else {
            build_observation(&self.bundles[self.cursor].motions, self.image, self.grid)
        };
        Some(EnvStep { obs, reward, done })
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// (epoch, mean held-out episode reward) per epoch, in order.
    pub rows: Vec<(usize, f64)>,
    pub best_epoch: usize,
    pub best_reward: f64,
    /// Mean held-out reward of the constant-weight policy.
    pub baseline_reward: f64,
    /// Serialized agent at the best epoch.
    pub checkpoint: Vec<u8>,
    pub train_episodes: usize,
}

pub fn train_agent(
    data: &Dataset,
    config: &RunConfig,
    resume: Option<&[u8]>,
    epoch_offset: usize,
) -> Result<TrainReport, PipelineError> {
    let bundles = Frontend::new(data, config)?.run()?;
    train_on_bundles(data, config, &bundles, resume, epoch_offset)
}

/// Episodic training loop: even slices train, odd slices are held out. The
/// checkpoint snapshots the agent at the epoch with the best held-out reward.
pub fn train_on_bundles(
    data: &Dataset,
    config: &RunConfig,
    bundles: &[KeyframeBundle],
    resume: Option<&[u8]>,
    epoch_offset: usize,
) -> Result<TrainReport, PipelineError> {
    let a = &config.agent;
    let span = a.episode_keyframes + 1;
    let count = bundles.len() / span;
    if count < 2 {
        return Err(PipelineError::NotEnoughSegments {
            have: count,
            need: 2,
        });
    }
    let slices: Vec<Range<usize>> = (0..count).map(|k| k * span..(k + 1) * span).collect();
    let train_slices: Vec<Range<usize>> = slices.iter().cloned().step_by(2).collect();
    let test_slices: Vec<Range<usize>> = slices.iter().cloned().skip(1).step_by(2).collect();

    let opts = EstimatorOptions::from_run(config, data);
    let grid = GridShape {
        rows: a.grid_rows,
        cols: a.grid_cols,
    };
    let constant = constant_weights(config);
    let mut train_env = SegmentEnv::new(bundles, train_slices, opts.clone(), constant, grid);
    let mut test_env = SegmentEnv::new(bundles, test_slices, opts, constant, grid);

    let mut baseline_sum = 0.0;
    let mut baseline_n = 0usize;
    for _ in 0..test_env.slice_count() {
        if let Some(total) = constant_episode(&mut test_env, constant) {
            baseline_sum += total;
            baseline_n += 1;
        }
    }
    let baseline_reward = baseline_sum / baseline_n.max(1) as f64;

    let mut agent = Td3Agent::new(grid, td3_params(config), config.seed);
    if let Some(bytes) = resume {
        agent
            .load_checkpoint(&mut &bytes[..])
            .map_err(|e| PipelineError::Checkpoint(e.to_string()))?;
    }
    let mut buffer = ReplayBuffer::new(a.replay_capacity);
    let mut rows: Vec<(usize, f64)> = Vec::new();
    let mut best_reward = f64::NEG_INFINITY;
    let mut best_epoch = epoch_offset;
    let mut checkpoint: Vec<u8> = Vec::new();
    let mut train_episodes = 0usize;

    for e in 0..a.epochs {
        let epoch = epoch_offset + e;
        for _ in 0..train_env.slice_count() {
            let Some(episode) = run_episode(&mut agent, &mut train_env, true) else {
                log::warn!("training episode aborted by a solver failure; skipping");
                continue;
            };
            train_episodes += 1;
            for t in episode.transitions {
                buffer.push(t);
            }
            for _ in 0..a.train_steps_per_episode {
                if let Some(losses) = agent.train_step(&buffer) {
                    let actor_bad = losses.actor.map_or(false, |x| !x.is_finite());
                    if !losses.critic.is_finite() || actor_bad {
                        return Err(PipelineError::Diverged {
                            epoch,
                            detail: format!(
                                "critic loss {:.3e}, actor loss {:?}",
                                losses.critic, losses.actor
                            ),
                        });
                    }
                }
            }
        }
        let mut sum = 0.0;
        let mut n = 0usize;
        for _ in 0..test_env.slice_count() {
            if let Some(episode) = run_episode(&mut agent, &mut test_env, false) {
                sum += episode.total_reward;
                n += 1;
            }
        }
        let mean = sum / n.max(1) as f64;
        rows.push((epoch, mean));
        if mean > best_reward {
            best_reward = mean;
            best_epoch = epoch;
            checkpoint = checkpoint_bytes(&agent)?;
        }
    }
    if checkpoint.is_empty() {
        checkpoint = checkpoint_bytes(&agent)?;
    }
    Ok(TrainReport {
        rows,
        best_epoch,
        best_reward,
        baseline_reward,
        checkpoint,
        train_episodes,
    })
}

fn constant_episode(env: &mut SegmentEnv, weights: WeightAction) -> Option<f64> {
    let _ = env.reset();
    let mut total = 0.0;
    loop {
        let step = env.step(&weights)?;
        total += step.reward;
        if step.done {
            return Some(total);
        }
    }
}

fn td3_params(config: &RunConfig) -> Td3Params {
    let a = &config.agent;
    Td3Params {
        hidden: a.hidden,
        discount: a.discount,
        tau: a.tau,
        policy_delay: a.policy_delay,
        batch: a.batch,
        lr: a.lr,
        w_min: a.weight_min,
        w_max: a.weight_max,
        explore_noise: a.explore_noise,
        target_noise: a.target_noise,
        noise_clip: a.noise_clip,
    }
}

fn checkpoint_bytes(agent: &Td3Agent) -> Result<Vec<u8>, PipelineError> {
    let mut bytes = Vec::new();
    agent
        .save_checkpoint(&mut bytes)
        .map_err(|e| PipelineError::Checkpoint(e.to_string()))?;
    Ok(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{synthesize_dataset, NoiseParams, SegmentSpec, SpikeSpec, WorldConfig};

    fn straight_world(length: f64, noisy: bool, landmarks: usize) -> WorldConfig {
        let mut c = WorldConfig::default();
        c.segments = vec![SegmentSpec::Straight { length }];
        c.landmark_count = landmarks;
        if !noisy {
            c.noise = NoiseParams::zero();
        }
        c
    }

    fn pose_bits(p: &Pose) -> Vec<u64> {
        let mut bits: Vec<u64> = p.translation.iter().map(|x| x.to_bits()).collect();
        bits.extend(p.rotation.matrix().iter().map(|x| x.to_bits()));
        bits
    }

    #[test]
    fn frontend_bundles_are_deterministic() {
        let data = synthesize_dataset(&straight_world(20.0, true, 120)).unwrap();
        let rc = RunConfig::default();
        let a = Frontend::new(&data, &rc).unwrap().run().unwrap();
        let b = Frontend::new(&data, &rc).unwrap().run().unwrap();
        assert!(a.len() >= 2);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.keyframe_id, y.keyframe_id);
            assert_eq!(x.frame_index, y.frame_index);
            assert_eq!(x.timestamp.to_bits(), y.timestamp.to_bits());
            assert_eq!(x.observations.len(), y.observations.len());
            assert_eq!(x.motions.len(), y.motions.len());
            assert_eq!(
                x.preint.as_ref().map(|p| p.dt_total.to_bits()),
                y.preint.as_ref().map(|p| p.dt_total.to_bits())
            );
        }
        assert!(a[0].boot_accel.is_some());
        assert!(a[1].boot_accel.is_none());
        assert!(a[0].preint.is_none());
        assert!(a[1].preint.is_some());
    }

    #[test]
    fn keyframes_fire_on_track_loss_or_time_cap() {
        let data = synthesize_dataset(&straight_world(20.0, true, 150)).unwrap();
        let rc = RunConfig::default();
        let bundles = Frontend::new(&data, &rc).unwrap().run().unwrap();
        let dt = data.world.config.rates.imu_dt();
        for pair in bundles.windows(2) {
            let b = &pair[1];
            let interval = b.timestamp - pair[0].timestamp;
            let time_capped = interval >= rc.frontend.max_keyframe_interval - 0.25 * dt;
            assert!(
                time_capped || b.tracked < rc.frontend.feature_threshold,
                "keyframe {} fired at interval {:.2}s with {} tracks",
                b.keyframe_id,
                interval,
                b.tracked
            );
            assert!(
                interval <= rc.frontend.max_keyframe_interval + 0.25 * dt,
                "interval {interval:.2}s exceeds the cap"
            );
        }
    }

    #[test]
    fn zero_noise_run_stays_on_truth() {
        let data = synthesize_dataset(&straight_world(20.0, false, 120)).unwrap();
        let rc = RunConfig::default();
        let out = run_pipeline(&data, &rc, None).unwrap();
        assert!(out.local.len() >= 3);
        let mut worst = 0.0f64;
        for kf in &out.local {
            let truth = data.world.truth_at_time(kf.timestamp);
            worst = worst.max((kf.pose.translation - truth.position).norm());
        }
        assert!(worst < 1e-3, "local trajectory off truth by {worst:.2e} m");
        let mut worst_global = 0.0f64;
        for kf in &out.global {
            let truth = data.world.truth_at_time(kf.timestamp);
            worst_global = worst_global.max((kf.pose.translation - truth.position).norm());
        }
        assert!(
            worst_global < 2e-3,
            "global trajectory off truth by {worst_global:.2e} m"
        );
        let last = out.summaries.last().unwrap();
        let truth = data.world.truth_at_time(last.timestamp);
        assert!(
            (last.state.velocity - truth.velocity).norm() < 1e-2,
            "final velocity off by {:.2e}",
            (last.state.velocity - truth.velocity).norm()
        );
    }

    #[test]
    fn lidar_factors_engage_on_planar_world() {
        let data = synthesize_dataset(&straight_world(14.0, false, 120)).unwrap();
        let rc = RunConfig::default();
        let out = run_pipeline(&data, &rc, None).unwrap();
        assert!(
            out.summaries
                .iter()
                .any(|s| s.lidar_factors > 0 && s.lidar.is_some()),
            "no keyframe ever built lidar factors"
        );
    }

    #[test]
    fn imu_hole_coasts_then_reinitializes() {
        let data = synthesize_dataset(&straight_world(24.0, false, 120)).unwrap();
        let mut rc = RunConfig::default();
        rc.frontend.imu_gaps = vec![[3.0, 4.0]];
        rc.odometry.init_keyframes = 3;
        let out = run_pipeline(&data, &rc, None).unwrap();
        let gap_at = out
            .summaries
            .iter()
            .position(|s| s.imu_gap)
            .expect("a keyframe interval covers the injected hole");
        assert!(
            out.summaries[gap_at..].iter().any(|s| s.reinitialized),
            "no re-initialization after the hole"
        );
        let last = out.local.last().unwrap();
        let truth = data.world.truth_at_time(last.timestamp);
        assert!(
            (last.pose.translation - truth.position).norm() < 0.5,
            "trajectory lost after the hole: {:.3} m",
            (last.pose.translation - truth.position).norm()
        );
    }

    #[test]
    fn debug_scratch() {
        for (label, lidar, landmarks) in [
            ("default-150", true, 150usize),
            ("no-lidar-150", false, 150),
            ("default-400", true, 400),
            ("no-lidar-400", false, 400),
        ] {
            let config = straight_world(60.0, true, landmarks);
            let data = synthesize_dataset(&config).unwrap();
            let mut rc = RunConfig::default();
            rc.sensors.lidar = lidar;
            rc.sensors.gps = false;
            let out = run_pipeline(&data, &rc, None).unwrap();
            let mut worst = 0.0f64;
            let mut at = 0.0;
            for kf in &out.local {
                let truth = data.world.truth_at_time(kf.timestamp);
                let e = (kf.pose.translation - truth.position).norm();
                if e > worst {
                    worst = e;
                    at = kf.timestamp;
                }
            }
            let last = out.local.last().unwrap();
            let truth = data.world.truth_at_time(last.timestamp);
            let ev = last.pose.translation - truth.position;
            let mean_lf: f64 = out.summaries.iter().map(|s| s.lidar_factors as f64).sum::<f64>()
                / out.summaries.len() as f64;
            let mut curve = String::new();
            for kf in out.local.iter().step_by(out.local.len() / 6 + 1) {
                let t = data.world.truth_at_time(kf.timestamp);
                curve.push_str(&format!(
                    " t={:.0}:{:.2}",
                    kf.timestamp,
                    (kf.pose.translation - t.position).norm()
                ));
            }
            eprintln!(
                "{label}: kfs={} worst={:.3} at t={:.1} final=[{:+.2} {:+.2} {:+.2}] lf={:.0}{}",
                out.local.len(),
                worst,
                at,
                ev.x,
                ev.y,
                ev.z,
                mean_lf,
                curve
            );
        }
    }

    #[test]
    fn gps_spikes_are_rejected_once_warm() {
        let mut config = straight_world(60.0, true, 150);
        config.gps_spikes = Some(SpikeSpec {
            fraction: 0.25,
            magnitude: 50.0,
        });
        let data = synthesize_dataset(&config).unwrap();
        let rc = RunConfig::default();
        let out = run_pipeline(&data, &rc, None).unwrap();
        assert!(!out.gps_rejected.is_empty(), "gate never rejected a fix");
        let spikes: HashSet<u64> = data.gps_spike_times.iter().map(|t| t.to_bits()).collect();
        for t in &out.gps_rejected {
            assert!(
                spikes.contains(&t.to_bits()),
                "clean fix at t={t:.2} was rejected"
            );
        }
        for (k, t) in out.gps_accepted.iter().enumerate() {
            if k >= 3 {
                assert!(
                    !spikes.contains(&t.to_bits()),
                    "spiked fix at t={t:.2} accepted after warmup"
                );
            }
        }
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let data = synthesize_dataset(&straight_world(16.0, true, 120)).unwrap();
        let mut rc = RunConfig::default();
        rc.corruption.enabled = true;
        let a = run_pipeline(&data, &rc, None).unwrap();
        let b = run_pipeline(&data, &rc, None).unwrap();
        assert_eq!(a.local.len(), b.local.len());
        for (x, y) in a.local.iter().zip(&b.local) {
            assert_eq!(pose_bits(&x.pose), pose_bits(&y.pose));
        }
        for (x, y) in a.global.iter().zip(&b.global) {
            assert_eq!(pose_bits(&x.pose), pose_bits(&y.pose));
        }
        assert_eq!(a.gps_accepted, b.gps_accepted);
        assert_eq!(a.gps_rejected, b.gps_rejected);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn disabled_sensors_degrade_gracefully() {
        let data = synthesize_dataset(&straight_world(16.0, false, 120)).unwrap();
        let mut rc = RunConfig::default();
        rc.sensors.lidar = false;
        rc.sensors.gps = false;
        let out = run_pipeline(&data, &rc, None).unwrap();
        assert_eq!(out.gps_used, 0);
        assert!(out.summaries.iter().all(|s| s.lidar_factors == 0));
        assert!(out.summaries.iter().all(|s| s.lidar.is_none()));
        let result = out.global_result.expect("global stage still runs");
        assert!(result.no_op, "no constraints should flag a no-op");
        for (x, y) in out.local.iter().zip(&out.global) {
            assert_eq!(pose_bits(&x.pose), pose_bits(&y.pose));
        }
    }

    #[test]
    fn corruption_schedule_changes_the_data() {
        let data = synthesize_dataset(&straight_world(16.0, true, 120)).unwrap();
        let mut rc = RunConfig::default();
        rc.frontend.feature_threshold = 10_000;
        let clean = Frontend::new(&data, &rc).unwrap().run().unwrap();
        rc.corruption.enabled = true;
        let dirty = Frontend::new(&data, &rc).unwrap().run().unwrap();
        let clean_obs: usize = clean.iter().map(|b| b.observations.len()).sum();
        let dirty_obs: usize = dirty.iter().map(|b| b.observations.len()).sum();
        assert!(
            dirty_obs < clean_obs,
            "visual burst did not drop any matches"
        );
        let clean_pts: usize = clean
            .iter()
            .filter_map(|b| b.lidar.as_ref())
            .map(|f| f.ground_points.len() + f.surface_points.len())
            .sum();
        let dirty_pts: usize = dirty
            .iter()
            .filter_map(|b| b.lidar.as_ref())
            .map(|f| f.ground_points.len() + f.surface_points.len())
            .sum();
        assert!(
            dirty_pts < clean_pts,
            "sparse phase did not thin the lidar features"
        );
    }

    #[test]
    fn segment_env_runs_fixed_length_episodes() {
        let data = synthesize_dataset(&straight_world(12.0, false, 80)).unwrap();
        let mut rc = RunConfig::default();
        rc.frontend.feature_threshold = 10_000;
        rc.odometry.window = 4;
        rc.odometry.max_iterations = 8;
        let bundles = Frontend::new(&data, &rc).unwrap().run().unwrap();
        let episode_keyframes = 3usize;
        let span = episode_keyframes + 1;
        assert!(bundles.len() >= 2 * span);
        let slices = vec![0..span, span..2 * span];
        let opts = EstimatorOptions::from_run(&rc, &data);
        let grid = GridShape { rows: 4, cols: 6 };
        let constant = constant_weights(&rc);
        let run = |env: &mut SegmentEnv| -> Vec<f64> {
            let obs = env.reset();
            assert_eq!(obs.flatten().len(), grid.dim());
            let mut rewards = Vec::new();
            loop {
                let step = env.step(&constant).expect("episode should not abort");
                assert!(step.reward.is_finite() && step.reward >= 0.0);
                rewards.push(step.reward);
                if step.done {
                    break;
                }
            }
            rewards
        };
        let mut env_a = SegmentEnv::new(&bundles, slices.clone(), opts.clone(), constant, grid);
        let mut env_b = SegmentEnv::new(&bundles, slices, opts, constant, grid);
        let ra = run(&mut env_a);
        let rb = run(&mut env_b);
        assert_eq!(ra.len(), episode_keyframes);
        let bits_a: Vec<u64> = ra.iter().map(|r| r.to_bits()).collect();
        let bits_b: Vec<u64> = rb.iter().map(|r| r.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }

    #[test]
    fn training_produces_checkpoint_and_resume_continues_epochs() {
        let data = synthesize_dataset(&straight_world(12.0, true, 80)).unwrap();
        let mut rc = RunConfig::default();
        rc.frontend.feature_threshold = 10_000;
        rc.odometry.window = 4;
        rc.odometry.max_iterations = 6;
        rc.agent.epochs = 1;
        rc.agent.episode_keyframes = 3;
        rc.agent.hidden = 8;
        rc.agent.batch = 8;
        rc.agent.train_steps_per_episode = 2;
        rc.agent.replay_capacity = 256;
        let report = train_agent(&data, &rc, None, 0).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.rows[0].0, 0);
        assert!(report.rows[0].1.is_finite());
        assert!(report.baseline_reward.is_finite());
        assert!(!report.checkpoint.is_empty());
        assert!(report.train_episodes > 0);

        let resumed = train_agent(&data, &rc, Some(&report.checkpoint), 1).unwrap();
        assert_eq!(resumed.rows[0].0, 1, "epoch numbering should continue");
    }
}
