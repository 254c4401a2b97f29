//! Tightly coupled multi-sensor state estimation.
//!
//! The crate fuses stereo camera tracks, IMU pre-integration and lidar planar
//! constraints in a sliding-window factor graph, refines the trajectory with a
//! segmented pose-graph pass driven by GPS and loop closures, and can modulate
//! per-keyframe factor weights with a small learned policy. A deterministic
//! synthetic sensor simulator provides ground-truthed datasets for testing.

pub mod camera;
pub mod geometry;

pub mod adaptive;
pub mod config;
pub mod eval;
pub mod factors;
pub mod imu;
pub mod lidar;
pub mod optimizer;
pub mod pipeline;
pub mod pose_graph;
pub mod sim;
pub mod visual;
