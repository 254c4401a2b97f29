//! Trajectory metrics: timestamp association, rigid alignment, ATE and RPE,
//! plus TUM-format trajectory I/O.
//!
//! ATE aligns the estimate to the reference with a closed-form rigid SE(3)
//! fit (no scale: every sensor here is metric) and reports per-pose
//! translational errors. RPE compares relative motions over a fixed step and
//! needs no alignment.

use crate::geometry::{Pose, Rotation};
use nalgebra::{Matrix3, Vector3};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("trajectory is empty")]
    Empty,
    #[error("duplicate timestamp {0}")]
    DuplicateTimestamp(f64),
    #[error("no timestamp pairs within tolerance")]
    NoPairs,
    #[error("need at least {needed} pairs, got {got}")]
    TooFewPairs { needed: usize, got: usize },
    #[error("degenerate geometry: poses are collinear")]
    Degenerate,
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Time-ordered pose samples.
#[derive(Clone, Debug)]
pub struct Trajectory {
    samples: Vec<(f64, Pose)>,
}

impl Trajectory {
    /// Sorts by timestamp; rejects empties and duplicate stamps.
    pub fn new(mut samples: Vec<(f64, Pose)>) -> Result<Trajectory, EvalError> {
        if samples.is_empty() {
            return Err(EvalError::Empty);
        }
        samples.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in samples.windows(2) {
            if w[0].0 >= w[1].0 {
                return Err(EvalError::DuplicateTimestamp(w[1].0));
            }
        }
        Ok(Trajectory { samples })
    }

    pub fn samples(&self) -> &[(f64, Pose)] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Applies a rigid transform to every pose (left multiplication).
    pub fn transformed(&self, t: &Pose) -> Trajectory {
        Trajectory {
            samples: self
                .samples
                .iter()
                .map(|(ts, p)| (*ts, t.compose(p)))
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MetricReport {
    pub mean: f64,
    pub rmse: f64,
    pub max: f64,
    pub errors: Vec<f64>,
}

impl MetricReport {
    fn from_errors(errors: Vec<f64>) -> MetricReport {
        let n = errors.len() as f64;
        let mean = errors.iter().sum::<f64>() / n;
        let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
        let max = errors.iter().fold(0.0f64, |a, &b| a.max(b));
        MetricReport {
            mean,
            rmse,
            max,
            errors,
        }
    }
}

/// Nearest-timestamp pairing within `max_dt`; unpaired samples are dropped.
pub fn associate(
    est: &Trajectory,
    reference: &Trajectory,
    max_dt: f64,
) -> Result<Vec<(Pose, Pose)>, EvalError> {
    let mut pairs = Vec::new();
    let refs = reference.samples();
    let mut j = 0;
    for &(t, est_pose) in est.samples() {
        while j + 1 < refs.len() && (refs[j + 1].0 - t).abs() <= (refs[j].0 - t).abs() {
            j += 1;
        }
        if (refs[j].0 - t).abs() <= max_dt {
            pairs.push((est_pose, refs[j].1));
            // A reference sample pairs at most once.
            j = (j + 1).min(refs.len() - 1);
        }
    }
    if pairs.is_empty() {
        return Err(EvalError::NoPairs);
    }
    Ok(pairs)
}

/// Closed-form least-squares rigid transform T minimizing sum ||T*est - ref||^2.
pub fn align(pairs: &[(Pose, Pose)]) -> Result<Pose, EvalError> {
    if pairs.len() < 3 {
        return Err(EvalError::TooFewPairs {
            needed: 3,
            got: pairs.len(),
        });
    }
    let n = pairs.len() as f64;
    let mut mu_e = Vector3::zeros();
    let mut mu_r = Vector3::zeros();
    for (e, r) in pairs {
        mu_e += e.translation;
        mu_r += r.translation;
    }
    mu_e /= n;
    mu_r /= n;
    let mut h = Matrix3::zeros();
    for (e, r) in pairs {
        h += (e.translation - mu_e) * (r.translation - mu_r).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.ok_or(EvalError::Degenerate)?;
    let v_t = svd.v_t.ok_or(EvalError::Degenerate)?;
    // Collinear points leave the rotation about their axis unconstrained.
    if svd.singular_values[1] < 1e-9 * svd.singular_values[0].max(1e-300) {
        return Err(EvalError::Degenerate);
    }
    let d = (v_t.transpose() * u.transpose()).determinant();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d.signum()));
    let r = Rotation::from_matrix_unchecked(v_t.transpose() * fix * u.transpose());
    let t = mu_r - r.rotate(&mu_e);
    Ok(Pose::new(r, t))
}

/// Absolute trajectory error: per-pose translational error after alignment.
pub fn ate(est: &Trajectory, reference: &Trajectory, max_dt: f64) -> Result<MetricReport, EvalError> {
    let pairs = associate(est, reference, max_dt)?;
    let t = align(&pairs)?;
    let errors = pairs
        .iter()
        .map(|(e, r)| (t.transform(&e.translation) - r.translation).norm())
        .collect();
    Ok(MetricReport::from_errors(errors))
}

/// Relative pose error over `delta` association steps: magnitude of the
/// difference between estimated and reference relative translations.
pub fn rpe(
    est: &Trajectory,
    reference: &Trajectory,
    delta: usize,
    max_dt: f64,
) -> Result<MetricReport, EvalError> {
    let pairs = associate(est, reference, max_dt)?;
    if pairs.len() < delta + 1 {
        return Err(EvalError::TooFewPairs {
            needed: delta + 1,
            got: pairs.len(),
        });
    }
    let errors = (0..pairs.len() - delta)
        .map(|i| {
            let (e0, r0) = &pairs[i];
            let (e1, r1) = &pairs[i + delta];
            let rel_e = e0.relative_to(e1).translation;
            let rel_r = r0.relative_to(r1).translation;
            (rel_e - rel_r).norm()
        })
        .collect();
    Ok(MetricReport::from_errors(errors))
}

/// Rotational counterpart of [`rpe`]: per-step relative rotation error angle,
/// radians. Reported alongside translational RPE but never fed to training.
pub fn rpe_rotation(
    est: &Trajectory,
    reference: &Trajectory,
    delta: usize,
    max_dt: f64,
) -> Result<MetricReport, EvalError> {
    let pairs = associate(est, reference, max_dt)?;
    if pairs.len() < delta + 1 {
        return Err(EvalError::TooFewPairs {
            needed: delta + 1,
            got: pairs.len(),
        });
    }
    let errors = (0..pairs.len() - delta)
        .map(|i| {
            let (e0, r0) = &pairs[i];
            let (e1, r1) = &pairs[i + delta];
            let rel_e = e0.relative_to(e1).rotation;
            let rel_r = r0.relative_to(r1).rotation;
            crate::geometry::log_so3(&(rel_r.transpose() * rel_e)).norm()
        })
        .collect();
    Ok(MetricReport::from_errors(errors))
}

/// Reads a TUM trajectory: `timestamp tx ty tz qx qy qz qw`, '#' comments and
/// blank lines ignored.
pub fn read_tum(path: &Path) -> Result<Trajectory, EvalError> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut samples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        let parse_err = |msg: String| EvalError::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            msg,
        };
        if fields.len() != 8 {
            return Err(parse_err(format!("expected 8 fields, got {}", fields.len())));
        }
        let mut values = [0.0f64; 8];
        for (v, f) in values.iter_mut().zip(&fields) {
            *v = f
                .parse()
                .map_err(|e| parse_err(format!("bad number {f:?}: {e}")))?;
        }
        let rotation =
            Rotation::from_quaternion_xyzw([values[4], values[5], values[6], values[7]]);
        let translation = Vector3::new(values[1], values[2], values[3]);
        samples.push((values[0], Pose::new(rotation, translation)));
    }
    Trajectory::new(samples)
}

pub fn write_tum(path: &Path, trajectory: &Trajectory) -> std::io::Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "# timestamp tx ty tz qx qy qz qw")?;
    for (t, pose) in trajectory.samples() {
        let p = pose.translation;
        let [qx, qy, qz, qw] = pose.rotation.to_quaternion_xyzw();
        writeln!(
            w,
            "{:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
            t, p.x, p.y, p.z, qx, qy, qz, qw
        )?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::exp_so3;
    use approx::assert_relative_eq;

    fn simple_traj(positions: &[(f64, Vector3<f64>)]) -> Trajectory {
        Trajectory::new(
            positions
                .iter()
                .map(|(t, p)| (*t, Pose::new(Rotation::identity(), *p)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn identical_trajectories_have_zero_metrics() {
        let traj = simple_traj(&[
            (0.0, Vector3::new(0.0, 0.0, 0.0)),
            (1.0, Vector3::new(1.0, 0.5, 0.0)),
            (2.0, Vector3::new(2.0, 0.0, 0.3)),
        ]);
        let report = ate(&traj, &traj, 0.02).unwrap();
        assert!(report.rmse < 1e-12);
        let report = rpe(&traj, &traj, 1, 0.02).unwrap();
        assert!(report.rmse < 1e-12);
    }

    #[test]
    fn constant_offset_vanishes_after_alignment() {
        let reference = simple_traj(&[
            (0.0, Vector3::new(0.0, 0.0, 0.0)),
            (1.0, Vector3::new(1.0, 0.0, 0.0)),
            (2.0, Vector3::new(1.0, 1.0, 0.0)),
            (3.0, Vector3::new(0.0, 1.0, 1.0)),
        ]);
        let shift = Pose::new(Rotation::identity(), Vector3::new(1.0, 2.0, 3.0));
        let est = reference.transformed(&shift);
        let report = ate(&est, &reference, 0.02).unwrap();
        assert!(report.max < 1e-12);
    }

    #[test]
    fn align_recovers_rotation_and_translation() {
        let reference = simple_traj(&[
            (0.0, Vector3::new(0.0, 0.0, 0.0)),
            (1.0, Vector3::new(2.0, 0.0, 0.0)),
            (2.0, Vector3::new(2.0, 3.0, 0.0)),
            (3.0, Vector3::new(0.0, 3.0, 2.0)),
        ]);
        let t = Pose::new(
            exp_so3(&Vector3::new(0.0, 0.0, 30f64.to_radians())),
            Vector3::new(-1.0, 0.5, 2.0),
        );
        // est = T^-1 ref, so aligning est onto ref must recover T.
        let est = reference.transformed(&t.inverse());
        let pairs = associate(&est, &reference, 0.02).unwrap();
        let recovered = align(&pairs).unwrap();
        assert_relative_eq!(
            recovered.rotation.matrix(),
            t.rotation.matrix(),
            epsilon = 1e-9
        );
        assert_relative_eq!(recovered.translation, t.translation, epsilon = 1e-9);
    }

    #[test]
    fn ate_matches_hand_oracle_on_radial_errors() {
        // Reference centered at the origin; estimate errors are radial
        // (est = (1+lambda) * d), so the optimal alignment is the identity and
        // each error is exactly lambda * |d_i|.
        let lambda = 0.25;
        let ds = [
            Vector3::new(2.0, 0.0, 0.0),
            Vector3::new(-1.0, 1.0, 0.0),
            Vector3::new(-1.0, -1.0, 0.0),
        ];
        let reference = simple_traj(&[(0.0, ds[0]), (1.0, ds[1]), (2.0, ds[2])]);
        let est = simple_traj(&[
            (0.0, ds[0] * (1.0 + lambda)),
            (1.0, ds[1] * (1.0 + lambda)),
            (2.0, ds[2] * (1.0 + lambda)),
        ]);
        let report = ate(&est, &reference, 0.02).unwrap();
        let expected = [2.0 * lambda, 2f64.sqrt() * lambda, 2f64.sqrt() * lambda];
        for (e, x) in report.errors.iter().zip(expected) {
            assert!((e - x).abs() < 1e-12, "{e} vs {x}");
        }
        let mean = expected.iter().sum::<f64>() / 3.0;
        let rmse = (expected.iter().map(|e| e * e).sum::<f64>() / 3.0).sqrt();
        assert!((report.mean - mean).abs() < 1e-12);
        assert!((report.rmse - rmse).abs() < 1e-12);
        assert!((report.max - 2.0 * lambda).abs() < 1e-12);
    }

    #[test]
    fn rpe_sees_uniform_drift() {
        let reference = simple_traj(&[
            (0.0, Vector3::new(0.0, 0.0, 0.0)),
            (1.0, Vector3::new(1.0, 0.0, 0.0)),
            (2.0, Vector3::new(2.0, 0.0, 0.0)),
            (3.0, Vector3::new(3.0, 0.0, 0.0)),
        ]);
        // 0.1 m extra along-track per step.
        let est = simple_traj(&[
            (0.0, Vector3::new(0.0, 0.0, 0.0)),
            (1.0, Vector3::new(1.1, 0.0, 0.0)),
            (2.0, Vector3::new(2.2, 0.0, 0.0)),
            (3.0, Vector3::new(3.3, 0.0, 0.0)),
        ]);
        let report = rpe(&est, &reference, 1, 0.02).unwrap();
        assert_relative_eq!(report.mean, 0.1, epsilon = 1e-12);
        assert_relative_eq!(report.max, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn rpe_matches_hand_oracle() {
        let reference = simple_traj(&[
            (0.0, Vector3::new(0.0, 0.0, 0.0)),
            (1.0, Vector3::new(1.0, 1.0, 0.0)),
            (2.0, Vector3::new(3.0, 1.0, 1.0)),
        ]);
        let est = simple_traj(&[
            (0.0, Vector3::new(0.0, 0.0, 0.0)),
            (1.0, Vector3::new(1.2, 1.0, 0.0)),
            (2.0, Vector3::new(3.2, 0.7, 1.0)),
        ]);
        // Identity rotations: relative translations subtract directly.
        let e1: f64 = (Vector3::new(1.2, 1.0, 0.0) - Vector3::new(1.0, 1.0, 0.0)).norm();
        let e2: f64 = ((Vector3::new(3.2, 0.7, 1.0) - Vector3::new(1.2, 1.0, 0.0))
            - (Vector3::new(3.0, 1.0, 1.0) - Vector3::new(1.0, 1.0, 0.0)))
        .norm();
        let report = rpe(&est, &reference, 1, 0.02).unwrap();
        assert!((report.errors[0] - e1).abs() < 1e-12);
        assert!((report.errors[1] - e2).abs() < 1e-12);
    }

    #[test]
    fn rigid_transform_invariance() {
        let reference = simple_traj(&[
            (0.0, Vector3::new(0.0, 0.0, 0.0)),
            (1.0, Vector3::new(1.0, 0.2, 0.0)),
            (2.0, Vector3::new(2.0, 0.1, 0.4)),
            (3.0, Vector3::new(2.5, 1.0, 0.2)),
        ]);
        let est = simple_traj(&[
            (0.0, Vector3::new(0.05, 0.0, 0.0)),
            (1.0, Vector3::new(1.0, 0.25, 0.0)),
            (2.0, Vector3::new(1.95, 0.1, 0.42)),
            (3.0, Vector3::new(2.5, 1.02, 0.2)),
        ]);
        let base_ate = ate(&est, &reference, 0.02).unwrap();
        let base_rpe = rpe(&est, &reference, 1, 0.02).unwrap();
        let t = Pose::new(
            exp_so3(&Vector3::new(0.3, -0.5, 1.1)),
            Vector3::new(10.0, -4.0, 2.0),
        );
        let moved = est.transformed(&t);
        let moved_ate = ate(&moved, &reference, 0.02).unwrap();
        let moved_rpe = rpe(&moved, &reference, 1, 0.02).unwrap();
        assert!((base_ate.rmse - moved_ate.rmse).abs() < 1e-9);
        assert!((base_rpe.rmse - moved_rpe.rmse).abs() < 1e-9);
    }

    #[test]
    fn association_rejects_offset_and_accepts_jitter() {
        let reference = simple_traj(&[
            (0.0, Vector3::zeros()),
            (1.0, Vector3::x()),
            (2.0, Vector3::y()),
        ]);
        let offset = simple_traj(&[
            (0.5, Vector3::zeros()),
            (1.5, Vector3::x()),
            (2.5, Vector3::y()),
        ]);
        assert!(matches!(
            associate(&offset, &reference, 0.02),
            Err(EvalError::NoPairs)
        ));
        let jittered = simple_traj(&[
            (0.004, Vector3::zeros()),
            (0.997, Vector3::x()),
            (2.005, Vector3::y()),
        ]);
        assert_eq!(associate(&jittered, &reference, 0.02).unwrap().len(), 3);
    }

    #[test]
    fn collinear_alignment_is_degenerate() {
        let reference = simple_traj(&[
            (0.0, Vector3::new(0.0, 0.0, 0.0)),
            (1.0, Vector3::new(1.0, 0.0, 0.0)),
            (2.0, Vector3::new(2.0, 0.0, 0.0)),
        ]);
        let pairs = associate(&reference, &reference, 0.02).unwrap();
        assert!(matches!(align(&pairs), Err(EvalError::Degenerate)));
    }

    #[test]
    fn tum_round_trip_with_comments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.txt");
        let traj = Trajectory::new(vec![
            (
                0.0,
                Pose::new(exp_so3(&Vector3::new(0.1, 0.2, 0.3)), Vector3::new(1.0, 2.0, 3.0)),
            ),
            (
                0.5,
                Pose::new(exp_so3(&Vector3::new(-0.4, 0.0, 1.2)), Vector3::new(4.0, 5.0, 6.0)),
            ),
        ])
        .unwrap();
        write_tum(&path, &traj).unwrap();
        // Splice in noise a reader must tolerate.
        let mut content = std::fs::read_to_string(&path).unwrap();
        content.push_str("\n# trailing comment\n\n");
        std::fs::write(&path, content).unwrap();
        let back = read_tum(&path).unwrap();
        assert_eq!(back.len(), 2);
        for ((t0, p0), (t1, p1)) in traj.samples().iter().zip(back.samples()) {
            assert!((t0 - t1).abs() < 1e-9);
            assert!((p0.translation - p1.translation).norm() < 1e-8);
            assert!((p0.rotation.matrix() - p1.rotation.matrix()).norm() < 1e-8);
        }
    }

    #[test]
    fn malformed_tum_row_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, "# header\n0.0 1 2 3 0 0 0 1\n0.1 oops 2 3 0 0 0 1\n").unwrap();
        match read_tum(&path) {
            Err(EvalError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn row_permutation_is_sorted_away() {
        let a = simple_traj(&[
            (2.0, Vector3::y()),
            (0.0, Vector3::zeros()),
            (1.0, Vector3::x()),
        ]);
        assert!(a.samples().windows(2).all(|w| w[0].0 < w[1].0));
    }
}
