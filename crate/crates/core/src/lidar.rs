//! Lidar planar features: range-normalized curvature extraction, ground
//! segmentation with a seeded sample-consensus plane fit, a three-scan local
//! map, and the two-step scan-to-map alignment that refines the window pose.
//!
//! Only plane features are used; edge features are deliberately omitted
//! because they are unstable on sparse rings. Scans are treated as
//! instantaneous, so no de-skewing happens here.

use std::collections::{HashMap, HashSet, VecDeque};
use std::io::{self, Write};

use nalgebra::{Matrix3, SVector, Vector3};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::factors::LidarKind;
use crate::geometry::{skew, Pose};
use crate::sim::{LidarPoint, LidarScan};

/// Minimum sine of the corner angle for an association triple; anything
/// flatter gives an ill-conditioned plane normal.
const MIN_TRIPLE_SIN: f64 = 0.05;
/// Candidates above this fraction of the scanner height (measured downward)
/// cannot be ground returns.
const BELOW_HORIZON_FRAC: f64 = 0.2;

#[derive(Debug, Error)]
pub enum LidarError {
    #[error("curvature window needs {expected} ranges, got {got}")]
    WindowLength { expected: usize, got: usize },
    #[error("range {0} is not positive and finite")]
    InvalidRange(f64),
    #[error("{0}")]
    BadParams(&'static str),
}

/// Tuning surface of the curvature classifier.
#[derive(Clone, Copy, Debug)]
pub struct CurvatureParams {
    /// Dimensionless scale applied to the normalized residual sum.
    pub a: f64,
    /// Half-window size in points; the window spans 2n+1 returns.
    pub n: usize,
    /// Returns with curvature at or below this are planar candidates.
    pub plane_threshold: f64,
}

impl Default for CurvatureParams {
    fn default() -> Self {
        CurvatureParams {
            a: 1.0,
            n: 5,
            plane_threshold: 0.01,
        }
    }
}

impl CurvatureParams {
    pub fn validate(&self) -> Result<(), LidarError> {
        if self.n < 1 {
            return Err(LidarError::BadParams("curvature half-window must be >= 1"));
        }
        if !(self.a > 0.0) {
            return Err(LidarError::BadParams("curvature scale must be positive"));
        }
        if !(self.plane_threshold > 0.0) {
            return Err(LidarError::BadParams("plane threshold must be positive"));
        }
        Ok(())
    }
}

/// Range-normalized curvature of a 2n+1 window of ring ranges.
///
/// The endpoint slope delta_r captures any linear ramp across the window, so
/// the residual sum is exactly zero on linear range profiles and the value is
/// invariant to the obliqueness of a flat surface; dividing by the center
/// range removes the growth a raw second-difference picks up with distance.
pub fn curvature(ranges: &[f64], params: &CurvatureParams) -> Result<f64, LidarError> {
    params.validate()?;
    let n = params.n;
    let len = 2 * n + 1;
    if ranges.len() != len {
        return Err(LidarError::WindowLength {
            expected: len,
            got: ranges.len(),
        });
    }
    for &r in ranges {
        if !(r > 0.0 && r.is_finite()) {
            return Err(LidarError::InvalidRange(r));
        }
    }
    let delta_r = (ranges[2 * n] - ranges[0]) / (2.0 * n as f64);
    let mut sum = 0.0;
    for k in 1..2 * n {
        let dev = ranges[k] - ranges[0] - k as f64 * delta_r;
        sum += dev * dev;
    }
    Ok(params.a * sum / ((2 * n - 1) as f64 * ranges[n]))
}

/// Classic squared sum of neighbor range differences, kept as a recall
/// baseline for the normalized formula above.
pub fn curvature_unnormalized(ranges: &[f64], n: usize) -> Result<f64, LidarError> {
    let len = 2 * n + 1;
    if ranges.len() != len {
        return Err(LidarError::WindowLength {
            expected: len,
            got: ranges.len(),
        });
    }
    let center = ranges[n];
    let sum: f64 = ranges
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != n)
        .map(|(_, r)| r - center)
        .sum();
    Ok(sum * sum)
}

/// A classified return: low-curvature point still carrying its ring context.
#[derive(Clone, Copy, Debug)]
pub struct PlanarCandidate {
    pub ring: usize,
    pub azimuth: f64,
    /// Return position in B.
    pub point: Vector3<f64>,
    pub curvature: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct ExtractionParams {
    pub curvature: CurvatureParams,
    /// Azimuth sectors per ring for density limiting.
    pub sectors: usize,
    /// Uniform subsampling cap per ring sector.
    pub max_per_sector: usize,
}

impl Default for ExtractionParams {
    fn default() -> Self {
        ExtractionParams {
            curvature: CurvatureParams::default(),
            sectors: 8,
            max_per_sector: 100,
        }
    }
}

/// Curvature for every interior ring point with a gap-free window.
///
/// Rays that miss leave azimuth gaps; a window is only classifiable when its
/// consecutive azimuth steps stay near the ring's nominal spacing, otherwise
/// the ranges straddle different surfaces.
pub fn ring_curvatures(
    points: &[LidarPoint],
    params: &CurvatureParams,
) -> Vec<(usize, f64)> {
    let n = params.n;
    let len = 2 * n + 1;
    if points.len() < len {
        return Vec::new();
    }
    let mut nominal = f64::INFINITY;
    for pair in points.windows(2) {
        let d = pair[1].azimuth - pair[0].azimuth;
        if d > 1e-12 && d < nominal {
            nominal = d;
        }
    }
    if !nominal.is_finite() {
        return Vec::new();
    }
    let max_step = 1.5 * nominal;
    let mut out = Vec::new();
    let mut window = Vec::with_capacity(len);
    'center: for i in n..points.len() - n {
        window.clear();
        for k in 0..len {
            let idx = i - n + k;
            if k > 0 && points[idx].azimuth - points[idx - 1].azimuth > max_step {
                continue 'center;
            }
            window.push(points[idx].range);
        }
        if let Ok(c) = curvature(&window, params) {
            out.push((i, c));
        }
    }
    out
}

/// Planar candidates of a whole scan: curvature classification per ring, then
/// per-sector uniform subsampling to limit density.
pub fn extract_planar(scan: &LidarScan, params: &ExtractionParams) -> Vec<PlanarCandidate> {
    let sectors = params.sectors.max(1);
    let sector_width = 2.0 * std::f64::consts::PI / sectors as f64;
    let mut out = Vec::new();
    for (ring, points) in scan.rings.iter().enumerate() {
        let mut by_sector: Vec<Vec<PlanarCandidate>> = vec![Vec::new(); sectors];
        for (idx, c) in ring_curvatures(points, &params.curvature) {
            if c > params.curvature.plane_threshold {
                continue;
            }
            let p = &points[idx];
            let sector = (((p.azimuth + std::f64::consts::PI) / sector_width) as usize)
                .min(sectors - 1);
            by_sector[sector].push(PlanarCandidate {
                ring,
                azimuth: p.azimuth,
                point: p.point,
                curvature: c,
            });
        }
        for sector in by_sector {
            if sector.len() <= params.max_per_sector {
                out.extend(sector);
            } else {
                let stride = sector.len().div_ceil(params.max_per_sector);
                out.extend(sector.into_iter().step_by(stride));
            }
        }
    }
    out
}

/// Planar features of one scan split into ground and surface sets, in B.
#[derive(Clone, Debug, Default)]
pub struct PlanarFeatureSet {
    pub timestamp: f64,
    pub ground_points: Vec<Vector3<f64>>,
    pub surface_points: Vec<Vector3<f64>>,
}

#[derive(Clone, Copy, Debug)]
pub struct GroundParams {
    /// Inlier distance for the sample-consensus ground plane, m.
    pub sac_tol: f64,
    pub sac_iterations: usize,
    /// Maximum inter-ring elevation angle for a ground pair, rad.
    pub max_ground_angle: f64,
    /// Azimuth bins used to pair returns across rings.
    pub azimuth_bins: usize,
}

impl Default for GroundParams {
    fn default() -> Self {
        GroundParams {
            sac_tol: 0.05,
            sac_iterations: 64,
            max_ground_angle: 0.175,
            azimuth_bins: 360,
        }
    }
}

/// Splits planar candidates into ground and surface.
///
/// Below-horizon candidates are gated by the elevation angle between
/// consecutive-ring returns in the same azimuth bin (near-horizontal pairs
/// lie on the ground), a seeded sample-consensus fit estimates the ground
/// plane from the gated set, and every candidate within `sac_tol` of that
/// plane becomes ground; the remainder is surface. Fewer than 3 gated
/// candidates means no ground is visible and everything is surface.
pub fn segment_ground(
    candidates: &[PlanarCandidate],
    timestamp: f64,
    scanner_height: f64,
    params: &GroundParams,
    rng: &mut ChaCha20Rng,
) -> Result<PlanarFeatureSet, LidarError> {
    if !(scanner_height > 0.0) {
        return Err(LidarError::BadParams("scanner height must be positive"));
    }
    if params.azimuth_bins == 0 || params.sac_iterations == 0 {
        return Err(LidarError::BadParams("ground params must be positive"));
    }
    let horizon_z = -BELOW_HORIZON_FRAC * scanner_height;
    let bin_width = 2.0 * std::f64::consts::PI / params.azimuth_bins as f64;
    let mut bins: HashMap<usize, Vec<usize>> = HashMap::new();
    for (idx, c) in candidates.iter().enumerate() {
        if c.point.z < horizon_z {
            let bin = (((c.azimuth + std::f64::consts::PI) / bin_width) as usize)
                .min(params.azimuth_bins - 1);
            bins.entry(bin).or_default().push(idx);
        }
    }
    let mut gated = HashSet::new();
    for idxs in bins.values_mut() {
        idxs.sort_by_key(|&i| candidates[i].ring);
        for pair in idxs.windows(2) {
            let (a, b) = (&candidates[pair[0]], &candidates[pair[1]]);
            if a.ring == b.ring {
                continue;
            }
            let d = b.point - a.point;
            let dxy = d.xy().norm();
            if d.z.abs().atan2(dxy) < params.max_ground_angle {
                gated.insert(pair[0]);
                gated.insert(pair[1]);
            }
        }
    }

    let mut set = PlanarFeatureSet {
        timestamp,
        ..Default::default()
    };
    let gated: Vec<usize> = {
        let mut v: Vec<usize> = gated.into_iter().collect();
        v.sort_unstable();
        v
    };
    let plane = if gated.len() >= 3 {
        fit_plane_sac(candidates, &gated, params, rng)
    } else {
        None
    };
    match plane {
        Some((anchor, normal)) => {
            for c in candidates {
                if (c.point - anchor).dot(&normal).abs() < params.sac_tol {
                    set.ground_points.push(c.point);
                } else {
                    set.surface_points.push(c.point);
                }
            }
        }
        None => {
            set.surface_points = candidates.iter().map(|c| c.point).collect();
        }
    }
    Ok(set)
}

/// Best-consensus plane over the gated indices, refined once by a principal
/// component fit of its inliers. Returns (anchor, unit normal).
fn fit_plane_sac(
    candidates: &[PlanarCandidate],
    gated: &[usize],
    params: &GroundParams,
    rng: &mut ChaCha20Rng,
) -> Option<(Vector3<f64>, Vector3<f64>)> {
    let mut best: Option<(usize, Vector3<f64>, Vector3<f64>)> = None;
    for _ in 0..params.sac_iterations {
        let i = gated[rng.gen_range(0..gated.len())];
        let j = gated[rng.gen_range(0..gated.len())];
        let k = gated[rng.gen_range(0..gated.len())];
        if i == j || j == k || i == k {
            continue;
        }
        let (a, b, c) = (
            candidates[i].point,
            candidates[j].point,
            candidates[k].point,
        );
        let cross = (b - a).cross(&(c - a));
        if cross.norm() <= 1e-9 {
            continue;
        }
        let normal = cross.normalize();
        let inliers = gated
            .iter()
            .filter(|&&g| (candidates[g].point - a).dot(&normal).abs() < params.sac_tol)
            .count();
        if best.as_ref().map_or(true, |(n, _, _)| inliers > *n) {
            best = Some((inliers, a, normal));
        }
    }
    let (_, anchor, normal) = best?;
    // principal-component refinement over the consensus inliers
    let inliers: Vec<Vector3<f64>> = gated
        .iter()
        .map(|&g| candidates[g].point)
        .filter(|p| (p - anchor).dot(&normal).abs() < params.sac_tol)
        .collect();
    if inliers.len() < 3 {
        return Some((anchor, normal));
    }
    let centroid = inliers.iter().sum::<Vector3<f64>>() / inliers.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in &inliers {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    let eigen = cov.symmetric_eigen();
    let mut min_idx = 0;
    for i in 1..3 {
        if eigen.eigenvalues[i] < eigen.eigenvalues[min_idx] {
            min_idx = i;
        }
    }
    let refined = eigen.eigenvectors.column(min_idx).into_owned();
    if refined.norm() <= 1e-9 {
        return Some((anchor, normal));
    }
    Some((centroid, refined.normalize()))
}

/// Writes one line per feature point: `g x y z` or `s x y z`.
pub fn write_features<W: Write>(set: &PlanarFeatureSet, out: &mut W) -> io::Result<()> {
    for p in &set.ground_points {
        writeln!(out, "g {:.6} {:.6} {:.6}", p.x, p.y, p.z)?;
    }
    for p in &set.surface_points {
        writeln!(out, "s {:.6} {:.6} {:.6}", p.x, p.y, p.z)?;
    }
    Ok(())
}

/// Uniform-grid nearest-neighbor index over a point set.
#[derive(Clone, Debug, Default)]
struct GridIndex {
    cell: f64,
    points: Vec<Vector3<f64>>,
    cells: HashMap<(i64, i64, i64), Vec<u32>>,
}

impl GridIndex {
    fn build(cell: f64, points: Vec<Vector3<f64>>) -> Self {
        let mut cells: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(cell, p)).or_default().push(i as u32);
        }
        GridIndex { cell, points, cells }
    }

    fn key(cell: f64, p: &Vector3<f64>) -> (i64, i64, i64) {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    /// Points within `radius` of the query, sorted by distance.
    fn neighbors(&self, q: &Vector3<f64>, radius: f64) -> Vec<(f64, u32)> {
        if self.points.is_empty() {
            return Vec::new();
        }
        let reach = (radius / self.cell).ceil() as i64;
        let center = Self::key(self.cell, q);
        let r2 = radius * radius;
        let mut found = Vec::new();
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    let key = (center.0 + dx, center.1 + dy, center.2 + dz);
                    if let Some(idxs) = self.cells.get(&key) {
                        for &i in idxs {
                            let d2 = (self.points[i as usize] - q).norm_squared();
                            if d2 <= r2 {
                                found.push((d2, i));
                            }
                        }
                    }
                }
            }
        }
        found.sort_by(|a, b| a.0.total_cmp(&b.0));
        found
    }
}

struct MapScan {
    keyframe_id: usize,
    ground: Vec<Vector3<f64>>,
    surface: Vec<Vector3<f64>>,
}

/// Rolling local map of the latest feature scans transformed into W, with a
/// spatial index per feature kind. Holds at most `capacity` scans (3 in the
/// full system).
pub struct LidarLocalMap {
    capacity: usize,
    cell: f64,
    scans: VecDeque<MapScan>,
    ground_index: GridIndex,
    surface_index: GridIndex,
}

impl LidarLocalMap {
    pub fn new(capacity: usize, cell: f64) -> Self {
        LidarLocalMap {
            capacity: capacity.max(1),
            cell: if cell > 0.0 { cell } else { 1.0 },
            scans: VecDeque::new(),
            ground_index: GridIndex::default(),
            surface_index: GridIndex::default(),
        }
    }

    /// Transforms a feature set by the keyframe pose and appends it, evicting
    /// the oldest scan beyond capacity.
    pub fn push_scan(&mut self, keyframe_id: usize, features: &PlanarFeatureSet, pose: &Pose) {
        let ground = features.ground_points.iter().map(|p| pose.transform(p)).collect();
        let surface = features
            .surface_points
            .iter()
            .map(|p| pose.transform(p))
            .collect();
        self.scans.push_back(MapScan {
            keyframe_id,
            ground,
            surface,
        });
        while self.scans.len() > self.capacity {
            self.scans.pop_front();
        }
        self.rebuild();
    }

    fn rebuild(&mut self) {
        let ground: Vec<Vector3<f64>> = self
            .scans
            .iter()
            .flat_map(|s| s.ground.iter().copied())
            .collect();
        let surface: Vec<Vector3<f64>> = self
            .scans
            .iter()
            .flat_map(|s| s.surface.iter().copied())
            .collect();
        self.ground_index = GridIndex::build(self.cell, ground);
        self.surface_index = GridIndex::build(self.cell, surface);
    }

    pub fn scan_count(&self) -> usize {
        self.scans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scans.is_empty()
    }

    /// Keyframe ids whose scans the map still holds.
    pub fn pinned_ids(&self) -> HashSet<usize> {
        self.scans.iter().map(|s| s.keyframe_id).collect()
    }

    pub fn ground_len(&self) -> usize {
        self.ground_index.points.len()
    }

    pub fn surface_len(&self) -> usize {
        self.surface_index.points.len()
    }

    /// Three nearest non-collinear map points of the matching kind within
    /// `radius` of the query. When the nearest three are collinear the next
    /// candidates substitute; `None` when no valid triple exists.
    pub fn associate_plane(
        &self,
        query: &Vector3<f64>,
        kind: LidarKind,
        radius: f64,
    ) -> Option<[Vector3<f64>; 3]> {
        let index = match kind {
            LidarKind::Ground => &self.ground_index,
            LidarKind::Surface => &self.surface_index,
        };
        let near = index.neighbors(query, radius);
        if near.len() < 3 {
            return None;
        }
        let p_u = index.points[near[0].1 as usize];
        let mut p_v = None;
        let mut rest_start = 0;
        for (pos, &(_, i)) in near.iter().enumerate().skip(1) {
            let p = index.points[i as usize];
            if (p - p_u).norm() > 1e-9 {
                p_v = Some(p);
                rest_start = pos + 1;
                break;
            }
        }
        let p_v = p_v?;
        let base = p_v - p_u;
        let base_len = base.norm();
        for &(_, i) in &near[rest_start..] {
            let p_w = index.points[i as usize];
            let edge = p_w - p_u;
            let edge_len = edge.norm();
            if edge_len <= 1e-9 {
                continue;
            }
            if base.cross(&edge).norm() / (base_len * edge_len) >= MIN_TRIPLE_SIN {
                return Some([p_u, p_v, p_w]);
            }
        }
        None
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AlignmentParams {
    pub max_iterations: usize,
    /// Step-size convergence threshold per alignment step.
    pub tol: f64,
    /// Association search radius, m.
    pub search_radius: f64,
    /// Fewer correspondences than this skips the step.
    pub min_correspondences: usize,
}

impl Default for AlignmentParams {
    fn default() -> Self {
        AlignmentParams {
            max_iterations: 10,
            tol: 1e-5,
            search_radius: 1.0,
            min_correspondences: 10,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AlignmentOutcome {
    pub pose: Pose,
    /// Ground step skipped for lack of correspondences.
    pub ground_skipped: bool,
    /// Surface step skipped for lack of correspondences.
    pub surface_skipped: bool,
    pub ground_iterations: usize,
    pub surface_iterations: usize,
    pub ground_correspondences: usize,
    pub surface_correspondences: usize,
}

/// Scan-to-map pose refinement in two restricted steps: ground
/// correspondences constrain (z, roll, pitch), then surface correspondences
/// constrain (x, y, yaw). Each step re-associates against the map every
/// iteration and runs Gauss-Newton on signed point-to-plane distances.
pub fn two_step_alignment(
    features: &PlanarFeatureSet,
    map: &LidarLocalMap,
    initial: &Pose,
    params: &AlignmentParams,
) -> AlignmentOutcome {
    // tangent layout [rot; trans]: ground step moves roll, pitch, z
    let (pose, g_iters, g_count, g_ran) = refine_axes(
        *initial,
        &features.ground_points,
        LidarKind::Ground,
        map,
        [0, 1, 5],
        params,
    );
    let (pose, s_iters, s_count, s_ran) = refine_axes(
        pose,
        &features.surface_points,
        LidarKind::Surface,
        map,
        [2, 3, 4],
        params,
    );
    AlignmentOutcome {
        pose,
        ground_skipped: !g_ran,
        surface_skipped: !s_ran,
        ground_iterations: g_iters,
        surface_iterations: s_iters,
        ground_correspondences: g_count,
        surface_correspondences: s_count,
    }
}

/// One restricted alignment step over the tangent components in `axes`.
fn refine_axes(
    mut pose: Pose,
    points: &[Vector3<f64>],
    kind: LidarKind,
    map: &LidarLocalMap,
    axes: [usize; 3],
    params: &AlignmentParams,
) -> (Pose, usize, usize, bool) {
    let mut iterations = 0;
    let mut matched = 0;
    for _ in 0..params.max_iterations {
        let mut h = Matrix3::<f64>::zeros();
        let mut g = Vector3::<f64>::zeros();
        matched = 0;
        for p_body in points {
            let p_world = pose.transform(p_body);
            let Some([p_u, p_v, p_w]) = map.associate_plane(&p_world, kind, params.search_radius)
            else {
                continue;
            };
            let normal = (p_v - p_u).cross(&(p_w - p_u)).normalize();
            let d = normal.dot(&(p_world - p_u));
            let j_rot = -(normal.transpose() * skew(&pose.rotation.rotate(p_body))).transpose();
            let mut row = Vector3::zeros();
            for (c, &axis) in axes.iter().enumerate() {
                row[c] = if axis < 3 { j_rot[axis] } else { normal[axis - 3] };
            }
            h += row * row.transpose();
            g += row * d;
            matched += 1;
        }
        if matched < params.min_correspondences {
            return (pose, iterations, matched, iterations > 0);
        }
        // Tikhonov floor keeps unobservable directions in place
        let floor = 1e-8 * h.diagonal().amax().max(1.0);
        h += Matrix3::identity() * floor;
        let Some(step) = h.try_inverse().map(|inv| inv * -g) else {
            return (pose, iterations, matched, iterations > 0);
        };
        let mut delta = SVector::<f64, 6>::zeros();
        for (c, &axis) in axes.iter().enumerate() {
            delta[axis] = step[c];
        }
        pose = pose.retract(&delta);
        iterations += 1;
        if step.norm() < params.tol {
            break;
        }
    }
    (pose, iterations, matched, iterations > 0)
}
