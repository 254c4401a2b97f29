//! Measurement synthesis for each sensor stream.

use super::{
    BiasTruth, GpsFix, ImuSample, Landmark, LidarPoint, LidarScan, Plane, PlaneSpecConfig,
    StereoObservation, StereoPoint, World, WorldConfig,
};
use crate::sim::trajectory::Trajectory;
use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal, UnitSphere};

fn normal3(rng: &mut ChaCha20Rng, sigma: f64) -> Vector3<f64> {
    if sigma == 0.0 {
        return Vector3::zeros();
    }
    let n = Normal::new(0.0, sigma).expect("sigma checked nonnegative");
    Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng))
}

pub(super) fn place_landmarks(config: &WorldConfig, traj: &Trajectory) -> Vec<Landmark> {
    let mut rng = super::derived_rng(config.seed, super::streams::LANDMARKS);
    let [lat_min, lat_max] = config.landmark_lateral;
    let [h_min, h_max] = config.landmark_height;
    let floor = -config.scanner_height + 0.3;
    let mut landmarks = Vec::with_capacity(config.landmark_count);
    for id in 0..config.landmark_count {
        let t = rng.gen_range(0.0..traj.total_time());
        let tp = traj.truth_at(t);
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let lateral = side * rng.gen_range(lat_min..lat_max);
        let along = rng.gen_range(-2.0..2.0);
        let height = rng.gen_range(h_min..h_max).max(floor);
        let forward = tp.rotation.rotate(&Vector3::x());
        let left = tp.rotation.rotate(&Vector3::y());
        let position =
            tp.position + forward * along + left * lateral + Vector3::new(0.0, 0.0, height);
        landmarks.push(Landmark {
            id: id as u32,
            position,
        });
    }
    landmarks
}

pub(super) fn build_planes(config: &WorldConfig, traj: &Trajectory) -> Vec<Plane> {
    let mut planes = Vec::new();
    let ground_z = -config.scanner_height;
    if config.ground_plane {
        planes.push(Plane::infinite(
            Vector3::new(0.0, 0.0, ground_z),
            Vector3::z(),
        ));
    }
    if config.wall_offset > 0.0 {
        for run in traj.straight_runs() {
            let mid = (run.start + run.end) * 0.5;
            let len = (run.end - run.start).norm();
            let dir = (run.end - run.start) / len;
            let left = Vector3::z().cross(&dir);
            let center_z = ground_z + config.wall_height * 0.5;
            for side in [1.0, -1.0] {
                let center = Vector3::new(mid.x, mid.y, center_z) + left * (side * config.wall_offset);
                planes.push(Plane::rect(
                    center,
                    left * -side,
                    dir,
                    len * 0.5 + 2.0,
                    config.wall_height * 0.5,
                ));
            }
        }
    }
    for spec in &config.plane_specs {
        planes.push(match *spec {
            PlaneSpecConfig::Infinite { point, normal } => {
                Plane::infinite(Vector3::from(point), Vector3::from(normal))
            }
            PlaneSpecConfig::Rect {
                center,
                normal,
                u_axis,
                half_u,
                half_v,
            } => Plane::rect(
                Vector3::from(center),
                Vector3::from(normal),
                Vector3::from(u_axis),
                half_u,
                half_v,
            ),
        });
    }
    planes
}

pub struct ImuStream {
    pub samples: Vec<ImuSample>,
    pub bias_truth: Vec<BiasTruth>,
}

/// Gyro = body rate + bias + noise; accel = specific force + bias + noise;
/// biases follow a random walk from their configured initial values.
pub fn synthesize_imu(world: &World, rng: &mut ChaCha20Rng) -> ImuStream {
    let dt = world.config.rates.imu_dt();
    let noise = &world.config.noise;
    let sample_sigma_g = noise.gyro_noise / dt.sqrt();
    let sample_sigma_a = noise.accel_noise / dt.sqrt();
    let walk_sigma_g = noise.gyro_bias_walk * dt.sqrt();
    let walk_sigma_a = noise.accel_bias_walk * dt.sqrt();

    let mut bias_gyro = Vector3::from(noise.init_gyro_bias);
    let mut bias_accel = Vector3::from(noise.init_accel_bias);
    let n = world.truth.len() - 1;
    let mut samples = Vec::with_capacity(n);
    let mut bias_truth = Vec::with_capacity(n);
    for state in &world.truth[..n] {
        let tp = world.trajectory.truth_at(state.timestamp);
        samples.push(ImuSample {
            timestamp: state.timestamp,
            gyro: tp.omega_body + bias_gyro + normal3(rng, sample_sigma_g),
            accel: tp.specific_force() + bias_accel + normal3(rng, sample_sigma_a),
        });
        bias_truth.push(BiasTruth {
            timestamp: state.timestamp,
            bias_accel,
            bias_gyro,
        });
        bias_gyro += normal3(rng, walk_sigma_g);
        bias_accel += normal3(rng, walk_sigma_a);
    }
    ImuStream {
        samples,
        bias_truth,
    }
}

/// Projects every landmark visible in both cameras, with Gaussian pixel noise.
/// Observations pushed outside the image by noise are dropped so emitted
/// pixels always lie in bounds.
pub fn synthesize_stereo(world: &World, rng: &mut ChaCha20Rng) -> Vec<StereoObservation> {
    let rates = &world.config.rates;
    let ratio = (rates.imu_hz / rates.camera_hz) as usize;
    let rig = &world.config.camera;
    let sigma = world.config.noise.pixel;
    let mut frames = Vec::new();
    for state in world.truth.iter().step_by(ratio) {
        let pose = state.pose();
        let mut points = Vec::new();
        for lm in &world.landmarks {
            let Some((left, right)) = rig.project_stereo(&pose, &lm.position) else {
                continue;
            };
            let mut left = left;
            let mut right = right;
            if sigma > 0.0 {
                let n = Normal::new(0.0, sigma).expect("pixel sigma nonnegative");
                left.x += n.sample(rng);
                left.y += n.sample(rng);
                right.x += n.sample(rng);
                right.y += n.sample(rng);
                if !rig.intrinsics.in_bounds(&left) || !rig.intrinsics.in_bounds(&right) {
                    continue;
                }
            }
            points.push(StereoPoint {
                landmark_id: lm.id,
                left,
                right,
            });
        }
        frames.push(StereoObservation {
            timestamp: state.timestamp,
            points,
        });
    }
    frames
}

/// Casts the ring/azimuth ray pattern against the world's planes at each scan
/// time. Points are emitted in the body frame with range noise applied along
/// the ray.
pub fn synthesize_lidar(world: &World, rng: &mut ChaCha20Rng) -> Vec<LidarScan> {
    let rates = &world.config.rates;
    let ratio = (rates.imu_hz / rates.lidar_hz) as usize;
    let geom = &world.config.lidar;
    let sigma = world.config.noise.lidar_range;
    let normal = (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("sigma nonnegative"));
    let mut scans = Vec::new();
    for state in world.truth.iter().step_by(ratio) {
        let mut rings = Vec::with_capacity(geom.rings as usize);
        for ring in 0..geom.rings {
            let elevation = geom.elevation_rad(ring);
            let (se, ce) = (elevation.sin(), elevation.cos());
            let mut points = Vec::new();
            for step in 0..geom.azimuth_steps {
                let azimuth = geom.azimuth_rad(step);
                let dir_body = Vector3::new(ce * azimuth.cos(), ce * azimuth.sin(), se);
                let dir_world = state.rotation.rotate(&dir_body);
                let mut best = f64::INFINITY;
                for plane in &world.planes {
                    if let Some(t) = plane.cast(&state.position, &dir_world) {
                        if t < best {
                            best = t;
                        }
                    }
                }
                if best < geom.min_range || best > geom.max_range {
                    continue;
                }
                let range = match &normal {
                    Some(n) => best + n.sample(rng),
                    None => best,
                };
                if range <= 0.0 {
                    continue;
                }
                points.push(LidarPoint {
                    azimuth,
                    range,
                    point: dir_body * range,
                });
            }
            rings.push(points);
        }
        scans.push(LidarScan {
            timestamp: state.timestamp,
            rings,
        });
    }
    scans
}

pub struct GpsStream {
    pub fixes: Vec<GpsFix>,
    pub spike_times: Vec<f64>,
}

/// Position fixes with isotropic noise; invalid inside dropout windows;
/// optional outlier spikes in a uniformly random direction.
pub fn synthesize_gps(world: &World, rng: &mut ChaCha20Rng) -> GpsStream {
    let rates = &world.config.rates;
    let ratio = (rates.imu_hz / rates.gps_hz) as usize;
    let sigma = world.config.noise.gps;
    let mut fixes = Vec::new();
    let mut spike_times = Vec::new();
    for state in world.truth.iter().step_by(ratio) {
        let t = state.timestamp;
        let mut position = state.position + normal3(rng, sigma);
        if let Some(spec) = &world.config.gps_spikes {
            if rng.gen_bool(spec.fraction) {
                let dir: [f64; 3] = UnitSphere.sample(rng);
                position += Vector3::from(dir) * spec.magnitude;
                spike_times.push(t);
            }
        }
        let valid = !world
            .config
            .gps_dropouts
            .iter()
            .any(|w| t >= w[0] && t <= w[1]);
        fixes.push(GpsFix {
            timestamp: t,
            position,
            valid,
        });
    }
    GpsStream { fixes, spike_times }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GRAVITY;
    use crate::sim::{
        derived_rng, generate_world, streams, NoiseParams, SegmentSpec, SpikeSpec,
    };
    use approx::assert_relative_eq;

    fn world_with(mut f: impl FnMut(&mut WorldConfig)) -> World {
        let mut config = WorldConfig {
            noise: NoiseParams::zero(),
            landmark_count: 40,
            ..WorldConfig::default()
        };
        f(&mut config);
        generate_world(&config).unwrap()
    }

    #[test]
    fn stationary_imu_reads_gravity_support() {
        let world = world_with(|c| {
            c.segments = vec![SegmentSpec::Hold { duration: 1.0 }];
        });
        let stream = synthesize_imu(&world, &mut derived_rng(0, streams::IMU));
        for s in &stream.samples {
            assert_relative_eq!(s.accel, Vector3::new(0.0, 0.0, 9.81), epsilon = 1e-12);
            assert_relative_eq!(s.gyro, Vector3::zeros(), epsilon = 1e-12);
        }
        assert_eq!(stream.samples.len(), 200);
    }

    #[test]
    fn constant_spin_reads_constant_gyro() {
        let world = world_with(|c| {
            c.segments = vec![SegmentSpec::Spin {
                yaw_rate: 0.5,
                duration: 2.0,
            }];
        });
        let stream = synthesize_imu(&world, &mut derived_rng(0, streams::IMU));
        for s in &stream.samples {
            assert_relative_eq!(s.gyro, Vector3::new(0.0, 0.0, 0.5), epsilon = 1e-12);
        }
    }

    #[test]
    fn stationary_noise_mean_matches_bias() {
        // 10^4 samples: the sample mean of (accel - truth) estimates the bias
        // within 3 sigma / sqrt(n) = 3 sigma / 100.
        let world = world_with(|c| {
            c.segments = vec![SegmentSpec::Hold { duration: 50.0 }];
            c.noise = NoiseParams {
                accel_noise: 1e-2,
                init_accel_bias: [0.02, -0.01, 0.03],
                ..NoiseParams::zero()
            };
        });
        let stream = synthesize_imu(&world, &mut derived_rng(1, streams::IMU));
        assert_eq!(stream.samples.len(), 10_000);
        let sigma_sample = 1e-2 / world.config.rates.imu_dt().sqrt();
        let mut mean = Vector3::zeros();
        for s in &stream.samples {
            mean += s.accel - Vector3::new(0.0, 0.0, 9.81);
        }
        mean /= stream.samples.len() as f64;
        let err = mean - Vector3::new(0.02, -0.01, 0.03);
        for axis in 0..3 {
            assert!(
                err[axis].abs() < 3.0 * sigma_sample / 100.0,
                "axis {axis} mean bias error {}",
                err[axis]
            );
        }
    }

    #[test]
    fn euler_reintegration_tracks_truth() {
        // Noise-free samples, integrated forward naively, must reproduce the
        // analytic truth closely over 10 s of gentle driving.
        let world = world_with(|c| {
            c.segments = vec![
                SegmentSpec::Straight { length: 8.0 },
                SegmentSpec::Arc {
                    radius: 40.0,
                    angle: 0.6,
                },
            ];
        });
        let stream = synthesize_imu(&world, &mut derived_rng(0, streams::IMU));
        let dt = world.config.rates.imu_dt();
        let mut r = world.truth[0].rotation;
        let mut v = world.truth[0].velocity;
        let mut p = world.truth[0].position;
        for s in &stream.samples {
            let a = r.rotate(&s.accel) + GRAVITY;
            p += v * dt + a * (0.5 * dt * dt);
            v += a * dt;
            r = r * crate::geometry::exp_so3(&(s.gyro * dt));
        }
        let end = world.truth.last().unwrap();
        assert!((v - end.velocity).norm() < 1e-3, "{}", (v - end.velocity).norm());
        assert!((p - end.position).norm() < 1e-3, "{}", (p - end.position).norm());
    }

    #[test]
    fn stereo_zero_noise_is_exact_reprojection() {
        let world = world_with(|c| {
            c.segments = vec![SegmentSpec::Straight { length: 10.0 }];
            c.landmark_count = 120;
        });
        let frames = synthesize_stereo(&world, &mut derived_rng(0, streams::STEREO));
        assert_eq!(frames.len(), world.truth.len().div_ceil(20));
        let mut checked = 0;
        for frame in &frames {
            let pose = world.truth_at_time(frame.timestamp).pose();
            for pt in &frame.points {
                let lm = &world.landmarks[pt.landmark_id as usize];
                let (l, r) = world.config.camera.project_stereo(&pose, &lm.position).unwrap();
                assert_relative_eq!(l, pt.left, epsilon = 1e-9);
                assert_relative_eq!(r, pt.right, epsilon = 1e-9);
                // Rectified rig: rows match, disparity positive.
                assert_relative_eq!(pt.left.y, pt.right.y, epsilon = 1e-9);
                assert!(pt.left.x > pt.right.x);
                checked += 1;
            }
        }
        assert!(checked > 100, "too few observations: {checked}");
    }

    #[test]
    fn lidar_nadir_ring_reads_scanner_height() {
        let world = world_with(|c| {
            c.segments = vec![SegmentSpec::Hold { duration: 1.0 }];
            c.lidar.rings = 1;
            c.lidar.elevation_min_deg = -90.0;
            c.lidar.elevation_max_deg = -90.0;
            c.lidar.azimuth_steps = 4;
            c.lidar.min_range = 0.1;
        });
        let scans = synthesize_lidar(&world, &mut derived_rng(0, streams::LIDAR));
        for scan in &scans {
            for pt in &scan.rings[0] {
                assert_relative_eq!(pt.range, world.config.scanner_height, epsilon = 1e-9);
            }
            assert_eq!(scan.rings[0].len(), 4);
        }
    }

    #[test]
    fn rays_missing_all_geometry_emit_nothing() {
        let world = world_with(|c| {
            c.segments = vec![SegmentSpec::Hold { duration: 1.0 }];
            c.ground_plane = false;
            c.wall_offset = 0.0;
        });
        let scans = synthesize_lidar(&world, &mut derived_rng(0, streams::LIDAR));
        for scan in &scans {
            assert!(scan.rings.iter().all(|r| r.is_empty()));
        }
    }

    #[test]
    fn lidar_points_lie_on_their_planes() {
        let world = world_with(|c| {
            c.segments = vec![SegmentSpec::Straight { length: 6.0 }];
        });
        let scans = synthesize_lidar(&world, &mut derived_rng(0, streams::LIDAR));
        let mut n = 0;
        for scan in &scans {
            let pose = world.truth_at_time(scan.timestamp).pose();
            for ring in &scan.rings {
                for pt in ring {
                    let p_world = pose.transform(&pt.point);
                    let closest = world
                        .planes
                        .iter()
                        .map(|pl| pl.distance(&p_world).abs())
                        .fold(f64::INFINITY, f64::min);
                    assert!(closest < 1e-9, "off-plane point: {closest}");
                    n += 1;
                }
            }
        }
        assert!(n > 1000, "too few lidar returns: {n}");
    }

    #[test]
    fn gps_respects_dropouts_and_spikes() {
        let world = world_with(|c| {
            c.segments = vec![SegmentSpec::Straight { length: 40.0 }];
            c.gps_dropouts = vec![[5.0, 10.0]];
            c.gps_spikes = Some(SpikeSpec {
                fraction: 0.1,
                magnitude: 50.0,
            });
        });
        let stream = synthesize_gps(&world, &mut derived_rng(3, streams::GPS));
        for fix in &stream.fixes {
            let in_dropout = fix.timestamp >= 5.0 && fix.timestamp <= 10.0;
            assert_eq!(fix.valid, !in_dropout);
            let truth = world.truth_at_time(fix.timestamp).position;
            let err = (fix.position - truth).norm();
            if stream.spike_times.contains(&fix.timestamp) {
                assert_relative_eq!(err, 50.0, epsilon = 1e-9);
            } else {
                assert!(err < 1e-9);
            }
        }
        assert!(!stream.spike_times.is_empty());
    }
}
