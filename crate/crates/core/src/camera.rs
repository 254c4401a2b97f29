//! Pinhole stereo camera model shared by measurement synthesis, triangulation
//! and the visual factor.
//!
//! Camera frame: z forward, x right, y down. Body frame: x forward, y left,
//! z up. The left camera sits at the body origin; the right camera is offset
//! by `baseline` meters to the right (body -y), which in left-camera
//! coordinates is +x, so the rig is rectified and disparity = fx * b / depth.

use crate::geometry::{Pose, Rotation};
use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

/// Points closer than this to the camera plane are rejected as degenerate.
pub const MIN_DEPTH: f64 = 0.2;

/// Fixed body-from-camera rotation: camera z -> body x, camera x -> body -y,
/// camera y -> body -z.
pub fn body_from_camera() -> Rotation {
    Rotation::from_matrix_unchecked(Matrix3::new(
        0.0, 0.0, 1.0, //
        -1.0, 0.0, 0.0, //
        0.0, -1.0, 0.0,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        CameraIntrinsics {
            fx: 400.0,
            fy: 400.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
        }
    }
}

impl CameraIntrinsics {
    /// Perspective projection of a camera-frame point. `None` behind the camera.
    pub fn project(&self, p_cam: &Vector3<f64>) -> Option<Vector2<f64>> {
        if p_cam.z < MIN_DEPTH {
            return None;
        }
        Some(Vector2::new(
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        ))
    }

    pub fn in_bounds(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.x < self.width as f64 && px.y >= 0.0 && px.y < self.height as f64
    }

    /// Ray through a pixel, unit z, in camera coordinates.
    pub fn unproject(&self, px: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy, 1.0)
    }

    /// d(pixel)/d(camera point) at `p_cam`.
    pub fn projection_jacobian(&self, p_cam: &Vector3<f64>) -> Matrix2x3<f64> {
        let (x, y, z) = (p_cam.x, p_cam.y, p_cam.z);
        let iz = 1.0 / z;
        let iz2 = iz * iz;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * y * iz2,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StereoRig {
    pub intrinsics: CameraIntrinsics,
    /// Distance between the optical centers, m.
    pub baseline: f64,
    /// Landmarks farther than this from the left camera are not observed.
    pub max_range: f64,
}

impl Default for StereoRig {
    fn default() -> Self {
        StereoRig {
            intrinsics: CameraIntrinsics::default(),
            baseline: 0.5,
            max_range: 60.0,
        }
    }
}

impl StereoRig {
    /// World point expressed in left-camera coordinates given the body pose.
    pub fn camera_from_world(&self, body: &Pose, p_world: &Vector3<f64>) -> Vector3<f64> {
        let p_body = body.inverse().transform(p_world);
        body_from_camera().unrotate(&p_body)
    }

    /// Left/right pixels of a world point, `None` unless visible in both images.
    pub fn project_stereo(
        &self,
        body: &Pose,
        p_world: &Vector3<f64>,
    ) -> Option<(Vector2<f64>, Vector2<f64>)> {
        let p_left = self.camera_from_world(body, p_world);
        if p_left.norm() > self.max_range {
            return None;
        }
        let p_right = p_left - Vector3::new(self.baseline, 0.0, 0.0);
        let left = self.intrinsics.project(&p_left)?;
        let right = self.intrinsics.project(&p_right)?;
        if self.intrinsics.in_bounds(&left) && self.intrinsics.in_bounds(&right) {
            Some((left, right))
        } else {
            None
        }
    }
}
