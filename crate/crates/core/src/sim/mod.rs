//! Deterministic synthetic world and sensor synthesis.
//!
//! A [`WorldConfig`] fully determines the trajectory, the landmark and plane
//! geometry, and every measurement stream: all randomness is drawn from
//! ChaCha20 streams derived from the root seed, one stream per sensor, so a
//! fixed config yields a bit-identical dataset and editing one sensor's noise
//! never perturbs the others.

mod io;
mod sensors;
mod trajectory;

pub use io::{read_dataset, write_dataset, DatasetError};
pub use sensors::{
    synthesize_gps, synthesize_imu, synthesize_lidar, synthesize_stereo, GpsStream, ImuStream,
};
pub use trajectory::{SegmentSpec, TiltExcitation, Trajectory, TruthPoint};

use crate::camera::StereoRig;
use crate::geometry::State;
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid trajectory segment: {0}")]
    InvalidSegment(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// RNG stream ids carved out of the root seed. Streams used elsewhere in the
/// pipeline live here too so no two consumers collide.
pub mod streams {
    pub const IMU: u64 = 1;
    pub const STEREO: u64 = 2;
    pub const LIDAR: u64 = 3;
    pub const GPS: u64 = 4;
    pub const LANDMARKS: u64 = 5;
    pub const PROVIDER: u64 = 6;
    pub const SAC: u64 = 7;
    pub const AGENT_INIT: u64 = 8;
    pub const AGENT_TRAIN: u64 = 9;
    pub const CORRUPTION: u64 = 10;
}

/// ChaCha20 generator for one named stream of the root seed.
pub fn derived_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub imu_hz: u32,
    pub camera_hz: u32,
    pub lidar_hz: u32,
    pub gps_hz: u32,
}

impl Default for Rates {
    fn default() -> Self {
        Rates {
            imu_hz: 200,
            camera_hz: 10,
            lidar_hz: 10,
            gps_hz: 5,
        }
    }
}

impl Rates {
    pub fn imu_dt(&self) -> f64 {
        1.0 / self.imu_hz as f64
    }
}

/// Continuous-time noise densities and bias parameters. Sample-level standard
/// deviations are density / sqrt(dt).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    /// rad/s per sqrt(Hz)
    pub gyro_noise: f64,
    /// m/s^2 per sqrt(Hz)
    pub accel_noise: f64,
    /// rad/s random-walk density of the gyro bias
    pub gyro_bias_walk: f64,
    /// m/s^2 random-walk density of the accel bias
    pub accel_bias_walk: f64,
    pub init_gyro_bias: [f64; 3],
    pub init_accel_bias: [f64; 3],
    /// px, per pixel coordinate
    pub pixel: f64,
    /// m, isotropic
    pub gps: f64,
    /// m, per lidar return
    pub lidar_range: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        NoiseParams {
            gyro_noise: 1e-4,
            accel_noise: 1e-3,
            gyro_bias_walk: 1e-6,
            accel_bias_walk: 1e-5,
            init_gyro_bias: [0.0; 3],
            init_accel_bias: [0.0; 3],
            pixel: 1.0,
            gps: 0.5,
            lidar_range: 0.02,
        }
    }
}

impl NoiseParams {
    pub fn zero() -> Self {
        NoiseParams {
            gyro_noise: 0.0,
            accel_noise: 0.0,
            gyro_bias_walk: 0.0,
            accel_bias_walk: 0.0,
            init_gyro_bias: [0.0; 3],
            init_accel_bias: [0.0; 3],
            pixel: 0.0,
            gps: 0.0,
            lidar_range: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidarGeometry {
    pub rings: u32,
    pub azimuth_steps: u32,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub min_range: f64,
    pub max_range: f64,
}

impl Default for LidarGeometry {
    fn default() -> Self {
        LidarGeometry {
            rings: 16,
            azimuth_steps: 360,
            elevation_min_deg: -15.0,
            elevation_max_deg: 15.0,
            min_range: 0.5,
            max_range: 80.0,
        }
    }
}

impl LidarGeometry {
    pub fn elevation_rad(&self, ring: u32) -> f64 {
        let steps = (self.rings - 1).max(1) as f64;
        let frac = ring as f64 / steps;
        (self.elevation_min_deg + frac * (self.elevation_max_deg - self.elevation_min_deg))
            .to_radians()
    }

    pub fn azimuth_rad(&self, step: u32) -> f64 {
        -std::f64::consts::PI
            + 2.0 * std::f64::consts::PI * step as f64 / self.azimuth_steps as f64
    }
}

/// GPS outliers: each fix independently becomes a spike of the given
/// magnitude with the given probability.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpikeSpec {
    pub fraction: f64,
    pub magnitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlaneSpecConfig {
    Infinite {
        point: [f64; 3],
        normal: [f64; 3],
    },
    Rect {
        center: [f64; 3],
        normal: [f64; 3],
        u_axis: [f64; 3],
        half_u: f64,
        half_v: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub seed: u64,
    pub speed: f64,
    pub segments: Vec<SegmentSpec>,
    pub excitation: Option<TiltExcitation>,
    pub landmark_count: usize,
    /// Landmarks are scattered in a corridor around the path.
    pub landmark_lateral: [f64; 2],
    pub landmark_height: [f64; 2],
    /// Height of the body/lidar origin above the ground plane, m.
    pub scanner_height: f64,
    pub ground_plane: bool,
    /// Lateral distance of the auto-generated corridor walls; 0 disables them.
    pub wall_offset: f64,
    pub wall_height: f64,
    pub plane_specs: Vec<PlaneSpecConfig>,
    pub rates: Rates,
    pub noise: NoiseParams,
    pub camera: StereoRig,
    pub lidar: LidarGeometry,
    pub gps_dropouts: Vec<[f64; 2]>,
    pub gps_spikes: Option<SpikeSpec>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 42,
            speed: 2.0,
            segments: vec![SegmentSpec::Straight { length: 100.0 }],
            excitation: None,
            landmark_count: 600,
            landmark_lateral: [3.0, 12.0],
            landmark_height: [-1.0, 4.0],
            scanner_height: 1.5,
            ground_plane: true,
            wall_offset: 10.0,
            wall_height: 4.0,
            plane_specs: Vec::new(),
            rates: Rates::default(),
            noise: NoiseParams::default(),
            camera: StereoRig::default(),
            lidar: LidarGeometry::default(),
            gps_dropouts: Vec::new(),
            gps_spikes: None,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let r = &self.rates;
        if r.imu_hz == 0 || r.camera_hz == 0 || r.lidar_hz == 0 || r.gps_hz == 0 {
            return Err(SimError::InvalidConfig("all rates must be positive".into()));
        }
        if r.imu_hz < r.camera_hz {
            return Err(SimError::InvalidConfig(
                "imu rate must be at least the camera rate".into(),
            ));
        }
        for (name, hz) in [("camera", r.camera_hz), ("lidar", r.lidar_hz), ("gps", r.gps_hz)] {
            if r.imu_hz % hz != 0 {
                return Err(SimError::InvalidConfig(format!(
                    "imu rate {} must be a multiple of the {name} rate {hz}",
                    r.imu_hz
                )));
            }
        }
        if self.scanner_height <= 0.0 {
            return Err(SimError::InvalidConfig(
                "scanner height must be positive".into(),
            ));
        }
        if self.lidar.rings == 0 || self.lidar.azimuth_steps == 0 {
            return Err(SimError::InvalidConfig(
                "lidar needs at least one ring and azimuth step".into(),
            ));
        }
        Ok(())
    }
}

/// A bounded or infinite plane in W; the world's lidar-visible geometry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Plane {
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub rect: Option<RectExtent>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RectExtent {
    pub u_axis: Vector3<f64>,
    pub v_axis: Vector3<f64>,
    pub half_u: f64,
    pub half_v: f64,
}

impl Plane {
    pub fn infinite(point: Vector3<f64>, normal: Vector3<f64>) -> Plane {
        Plane {
            point,
            normal: normal.normalize(),
            rect: None,
        }
    }

    pub fn rect(
        center: Vector3<f64>,
        normal: Vector3<f64>,
        u_axis: Vector3<f64>,
        half_u: f64,
        half_v: f64,
    ) -> Plane {
        let normal = normal.normalize();
        let u_axis = (u_axis - normal * u_axis.dot(&normal)).normalize();
        let v_axis = normal.cross(&u_axis);
        Plane {
            point: center,
            normal,
            rect: Some(RectExtent {
                u_axis,
                v_axis,
                half_u,
                half_v,
            }),
        }
    }

    /// Signed distance from a point to the (infinite extension of the) plane.
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        (p - self.point).dot(&self.normal)
    }

    /// Ray-cast range, if the ray hits within the plane's extent.
    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let denom = dir.dot(&self.normal);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = (self.point - origin).dot(&self.normal) / denom;
        if t <= 0.0 {
            return None;
        }
        if let Some(r) = &self.rect {
            let q = origin + dir * t - self.point;
            if q.dot(&r.u_axis).abs() > r.half_u || q.dot(&r.v_axis).abs() > r.half_v {
                return None;
            }
        }
        Some(t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Landmark {
    pub id: u32,
    pub position: Vector3<f64>,
}

/// Ground-truth world: trajectory, dense truth states, and static geometry.
#[derive(Clone, Debug)]
pub struct World {
    pub config: WorldConfig,
    pub trajectory: Trajectory,
    /// States at IMU rate, inclusive of both endpoints; biases are zero (the
    /// realized sensor bias walk lives in [`ImuStream::bias_truth`]).
    pub truth: Vec<State>,
    pub landmarks: Vec<Landmark>,
    pub planes: Vec<Plane>,
}

impl World {
    /// Truth pose interpolation is never needed: all sensor timestamps lie on
    /// the IMU grid. This resolves a grid timestamp to its truth state.
    pub fn truth_at_time(&self, t: f64) -> State {
        let dt = self.config.rates.imu_dt();
        let k = (t / dt).round() as usize;
        self.truth[k.min(self.truth.len() - 1)]
    }
}

pub fn generate_world(config: &WorldConfig) -> Result<World, SimError> {
    config.validate()?;
    let trajectory = Trajectory::build(&config.segments, config.speed, config.excitation)?;
    let dt = config.rates.imu_dt();
    let steps = (trajectory.total_time() / dt).round() as usize;
    let mut truth = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let t = k as f64 * dt;
        let tp = trajectory.truth_at(t);
        truth.push(State {
            rotation: tp.rotation,
            position: tp.position,
            velocity: tp.velocity,
            bias_accel: Vector3::zeros(),
            bias_gyro: Vector3::zeros(),
            timestamp: t,
        });
    }
    let landmarks = sensors::place_landmarks(config, &trajectory);
    let planes = sensors::build_planes(config, &trajectory);
    Ok(World {
        config: config.clone(),
        trajectory,
        truth,
        landmarks,
        planes,
    })
}

/// One IMU reading: gyro rad/s, accel m/s^2, both in B.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuSample {
    pub timestamp: f64,
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

/// Realized sensor biases at one IMU tick.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BiasTruth {
    pub timestamp: f64,
    pub bias_accel: Vector3<f64>,
    pub bias_gyro: Vector3<f64>,
}

/// All stereo matches of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct StereoObservation {
    pub timestamp: f64,
    pub points: Vec<StereoPoint>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StereoPoint {
    pub landmark_id: u32,
    pub left: nalgebra::Vector2<f64>,
    pub right: nalgebra::Vector2<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LidarPoint {
    pub azimuth: f64,
    pub range: f64,
    /// Cartesian return in B.
    pub point: Vector3<f64>,
}

/// One scan: per-ring points ordered by azimuth. Rays that miss all geometry
/// leave gaps, so ring lengths vary.
#[derive(Clone, Debug, PartialEq)]
pub struct LidarScan {
    pub timestamp: f64,
    pub rings: Vec<Vec<LidarPoint>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GpsFix {
    pub timestamp: f64,
    pub position: Vector3<f64>,
    pub valid: bool,
}

/// A complete synthetic dataset: the world plus every measurement stream.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub world: World,
    pub imu: Vec<ImuSample>,
    pub imu_bias_truth: Vec<BiasTruth>,
    pub stereo: Vec<StereoObservation>,
    pub lidar: Vec<LidarScan>,
    pub gps: Vec<GpsFix>,
    /// Timestamps of the injected GPS outliers, for audits.
    pub gps_spike_times: Vec<f64>,
}

pub fn synthesize_dataset(config: &WorldConfig) -> Result<Dataset, SimError> {
    let world = generate_world(config)?;
    let imu_stream = synthesize_imu(&world, &mut derived_rng(config.seed, streams::IMU));
    let stereo = synthesize_stereo(&world, &mut derived_rng(config.seed, streams::STEREO));
    let lidar = synthesize_lidar(&world, &mut derived_rng(config.seed, streams::LIDAR));
    let gps_stream = synthesize_gps(&world, &mut derived_rng(config.seed, streams::GPS));
    Ok(Dataset {
        world,
        imu: imu_stream.samples,
        imu_bias_truth: imu_stream.bias_truth,
        stereo,
        lidar,
        gps: gps_stream.fixes,
        gps_spike_times: gps_stream.spike_times,
    })
}
