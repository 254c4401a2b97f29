//! Visual frontend: correspondence tracking, keyframe selection, stereo
//! triangulation and the sliding-window local map.
//!
//! Real image processing is abstracted behind [`CorrespondenceProvider`], so
//! the estimator consumes (landmark id, left pixel, right pixel) triples
//! regardless of whether they come from an optical-flow tracker or, as here,
//! from the simulator with configurable dropout and false-match injection.

use std::collections::{HashMap, HashSet, VecDeque};

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::camera::{body_from_camera, CameraIntrinsics};
use crate::geometry::{Pose, State};
use crate::sim::StereoObservation;

/// A frame becomes a keyframe when fewer features than this survive tracking.
pub const FEATURE_THRESHOLD: usize = 50;
/// Sliding-window length in keyframes.
pub const WINDOW_KEYFRAMES: usize = 10;
/// Stereo pairs with less horizontal disparity than this are too far away to
/// triangulate stably, px.
pub const MIN_DISPARITY: f64 = 1.0;

#[derive(Debug, Error)]
pub enum VisualError {
    #[error("stereo disparity {0:.3} px is below the minimum")]
    DisparityTooSmall(f64),
}

/// One provider match: a landmark seen in both cameras of the current frame.
/// `false_match` marks injected descriptor confusions so robustness tests can
/// audit them; the estimator itself never reads the flag.
#[derive(Clone, Copy, Debug)]
pub struct Correspondence {
    pub landmark_id: u32,
    pub left: Vector2<f64>,
    pub right: Vector2<f64>,
    pub false_match: bool,
}

/// Source of per-frame feature matches.
pub trait CorrespondenceProvider {
    /// Matches for the given camera frame, `None` when the frame is missing.
    fn frame_matches(&mut self, frame_index: usize) -> Option<Vec<Correspondence>>;
    fn frame_count(&self) -> usize;
}

/// Simulator-backed provider: ground-truth associations thinned by a dropout
/// rate, with a configurable fraction of identities swapped to a wrong
/// landmark (flagged) to emulate descriptor mismatches.
pub struct SimProvider {
    frames: Vec<StereoObservation>,
    dropout: f64,
    false_match_rate: f64,
    rng: ChaCha20Rng,
}

impl SimProvider {
    pub fn new(
        frames: Vec<StereoObservation>,
        dropout: f64,
        false_match_rate: f64,
        rng: ChaCha20Rng,
    ) -> Self {
        SimProvider {
            frames,
            dropout,
            false_match_rate,
            rng,
        }
    }

    pub fn exact(frames: Vec<StereoObservation>, rng: ChaCha20Rng) -> Self {
        SimProvider::new(frames, 0.0, 0.0, rng)
    }
}

impl CorrespondenceProvider for SimProvider {
    fn frame_matches(&mut self, frame_index: usize) -> Option<Vec<Correspondence>> {
        let frame = self.frames.get(frame_index)?;
        let ids: Vec<u32> = frame.points.iter().map(|p| p.landmark_id).collect();
        let mut out = Vec::with_capacity(frame.points.len());
        for p in &frame.points {
            if self.dropout > 0.0 && self.rng.gen::<f64>() < self.dropout {
                continue;
            }
            let mut c = Correspondence {
                landmark_id: p.landmark_id,
                left: p.left,
                right: p.right,
                false_match: false,
            };
            if self.false_match_rate > 0.0
                && ids.len() > 1
                && self.rng.gen::<f64>() < self.false_match_rate
            {
                // assign the pixels to some other landmark seen this frame
                let mut swap = p.landmark_id;
                while swap == p.landmark_id {
                    swap = ids[self.rng.gen_range(0..ids.len())];
                }
                c.landmark_id = swap;
                c.false_match = true;
            }
            out.push(c);
        }
        Some(out)
    }

    fn frame_count(&self) -> usize {
        self.frames.len()
    }
}

/// Pixel history of one landmark across frames.
#[derive(Clone, Debug)]
pub struct FeatureTrack {
    pub landmark_id: u32,
    pub observations: Vec<TrackObservation>,
    pub alive: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct TrackObservation {
    pub frame_index: usize,
    pub timestamp: f64,
    pub left: Vector2<f64>,
    pub right: Vector2<f64>,
}

/// Landmark pixels recorded by one keyframe.
#[derive(Clone, Copy, Debug)]
pub struct KeyframeObservation {
    pub landmark_id: u32,
    pub left: Vector2<f64>,
    pub right: Vector2<f64>,
    pub false_match: bool,
}

#[derive(Clone, Debug)]
pub struct Keyframe {
    pub id: usize,
    pub frame_index: usize,
    pub timestamp: f64,
    pub state: State,
    pub observations: Vec<KeyframeObservation>,
}

/// Outcome of folding one frame into the tracker.
#[derive(Clone, Debug)]
pub struct TrackOutcome {
    /// Live tracks extended by this frame.
    pub tracked: usize,
    /// Frame had no provider data and was skipped.
    pub skipped: bool,
}

/// Frame-to-frame feature tracker. Between keyframes only existing tracks are
/// continued; fresh detections are adopted when a keyframe is declared.
#[derive(Default)]
pub struct Tracker {
    tracks: HashMap<u32, FeatureTrack>,
}

impl Tracker {
    pub fn new() -> Self {
        Tracker::default()
    }

    /// Extends live tracks with this frame's matches and kills the ones that
    /// were not re-observed. The IMU-predicted pose only gates the search
    /// window in a real tracker; with id-based association it changes
    /// nothing, and the tests assert that.
    pub fn track_frame(
        &mut self,
        matches: Option<&[Correspondence]>,
        _predicted: Option<&Pose>,
        frame_index: usize,
        timestamp: f64,
    ) -> TrackOutcome {
        let Some(matches) = matches else {
            log::warn!("no correspondences for frame {frame_index}; skipping");
            return TrackOutcome {
                tracked: self.live_count(),
                skipped: true,
            };
        };
        let seen: HashMap<u32, &Correspondence> =
            matches.iter().map(|c| (c.landmark_id, c)).collect();
        let mut tracked = 0;
        for track in self.tracks.values_mut() {
            if !track.alive {
                continue;
            }
            match seen.get(&track.landmark_id) {
                Some(c) => {
                    track.observations.push(TrackObservation {
                        frame_index,
                        timestamp,
                        left: c.left,
                        right: c.right,
                    });
                    tracked += 1;
                }
                None => track.alive = false,
            }
        }
        TrackOutcome {
            tracked,
            skipped: false,
        }
    }

    /// Adopts every match of a keyframe as a live track (fresh detection).
    pub fn adopt_detections(
        &mut self,
        matches: &[Correspondence],
        frame_index: usize,
        timestamp: f64,
    ) {
        for c in matches {
            let obs = TrackObservation {
                frame_index,
                timestamp,
                left: c.left,
                right: c.right,
            };
            self.tracks
                .entry(c.landmark_id)
                .and_modify(|t| {
                    if !t.alive {
                        t.alive = true;
                        t.observations.push(obs);
                    }
                })
                .or_insert_with(|| FeatureTrack {
                    landmark_id: c.landmark_id,
                    observations: vec![obs],
                    alive: true,
                });
        }
    }

    pub fn live_count(&self) -> usize {
        self.tracks.values().filter(|t| t.alive).count()
    }

    pub fn live_ids(&self) -> HashSet<u32> {
        self.tracks
            .values()
            .filter(|t| t.alive)
            .map(|t| t.landmark_id)
            .collect()
    }

    pub fn tracks(&self) -> &HashMap<u32, FeatureTrack> {
        &self.tracks
    }

    pub fn prune_dead(&mut self) {
        self.tracks.retain(|_, t| t.alive);
    }
}

/// Keyframe trigger: strictly fewer tracked features than the threshold.
pub fn decide_keyframe(tracked_count: usize, threshold: usize) -> bool {
    debug_assert!(threshold > 0);
    tracked_count < threshold
}

/// Rectified stereo triangulation. Returns the landmark position in W.
pub fn triangulate(
    left: &Vector2<f64>,
    right: &Vector2<f64>,
    intrinsics: &CameraIntrinsics,
    baseline: f64,
    keyframe_pose: &Pose,
) -> Result<Vector3<f64>, VisualError> {
    triangulate_with_min_disparity(left, right, intrinsics, baseline, keyframe_pose, MIN_DISPARITY)
}

pub fn triangulate_with_min_disparity(
    left: &Vector2<f64>,
    right: &Vector2<f64>,
    intrinsics: &CameraIntrinsics,
    baseline: f64,
    keyframe_pose: &Pose,
    min_disparity: f64,
) -> Result<Vector3<f64>, VisualError> {
    let disparity = left.x - right.x;
    if disparity <= min_disparity {
        return Err(VisualError::DisparityTooSmall(disparity));
    }
    let depth = intrinsics.fx * baseline / disparity;
    // rectified rows should agree; average them against pixel noise
    let row = 0.5 * (left.y + right.y);
    let p_cam = Vector3::new(
        (left.x - intrinsics.cx) * depth / intrinsics.fx,
        (row - intrinsics.cy) * depth / intrinsics.fy,
        depth,
    );
    let p_body = body_from_camera().rotate(&p_cam);
    Ok(keyframe_pose.transform(&p_body))
}

/// Sliding window of recent keyframes plus the landmark positions their
/// tracks reference.
#[derive(Clone, Debug)]
pub struct LocalMap {
    window: usize,
    keyframes: VecDeque<Keyframe>,
    landmarks: HashMap<u32, Vector3<f64>>,
}

impl LocalMap {
    pub fn new(window: usize) -> Self {
        LocalMap {
            window,
            keyframes: VecDeque::new(),
            landmarks: HashMap::new(),
        }
    }

    /// Appends a keyframe and evicts from the front down to the window size.
    /// Keyframes whose ids appear in `pinned` (for example, scans still held
    /// by the lidar local map) survive eviction; returns what was removed.
    pub fn insert_keyframe(&mut self, kf: Keyframe, pinned: &HashSet<usize>) -> Vec<Keyframe> {
        self.keyframes.push_back(kf);
        let mut evicted = Vec::new();
        while self.keyframes.len() > self.window {
            match self.keyframes.front() {
                Some(front) if !pinned.contains(&front.id) => {
                    evicted.push(self.keyframes.pop_front().unwrap());
                }
                _ => break,
            }
        }
        evicted
    }

    pub fn upsert_landmark(&mut self, id: u32, position: Vector3<f64>) {
        self.landmarks.insert(id, position);
    }

    pub fn landmark(&self, id: u32) -> Option<&Vector3<f64>> {
        self.landmarks.get(&id)
    }

    pub fn landmarks(&self) -> &HashMap<u32, Vector3<f64>> {
        &self.landmarks
    }

    pub fn keyframes(&self) -> impl Iterator<Item = &Keyframe> {
        self.keyframes.iter()
    }

    pub fn keyframes_mut(&mut self) -> impl Iterator<Item = &mut Keyframe> {
        self.keyframes.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    /// Drops landmarks no remaining keyframe observes and no live track
    /// references.
    pub fn prune_landmarks(&mut self, live_track_ids: &HashSet<u32>) {
        let mut referenced: HashSet<u32> = live_track_ids.clone();
        for kf in &self.keyframes {
            referenced.extend(kf.observations.iter().map(|o| o.landmark_id));
        }
        self.landmarks.retain(|id, _| referenced.contains(id));
    }
}

/// Correspondences of a fresh keyframe whose landmarks already exist in the
/// local map but are not currently tracked: re-associations of old points
/// coming back into view.
pub fn match_local_map(
    features: &[Correspondence],
    map: &LocalMap,
    live_track_ids: &HashSet<u32>,
) -> Vec<Correspondence> {
    features
        .iter()
        .filter(|c| map.landmark(c.landmark_id).is_some() && !live_track_ids.contains(&c.landmark_id))
        .copied()
        .collect()
}
