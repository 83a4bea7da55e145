//! Ego-camera simulation from Gaussian-splat scenes.
//!
//! The crate renders first-person views from a splat scene, answers
//! camera-versus-scene collision queries against an octree forest built
//! from a point cloud, and wraps both in navigation MDPs with a small PPO
//! trainer and evaluation tools.

pub mod env;
pub mod geometry;
pub mod occupancy;
pub mod ply;
pub mod render;
pub mod rl;
pub mod scene;
pub mod synthetic;

pub use geometry::{Aabb, CameraIntrinsics, CameraPose, Vec3};
pub use render::{render, RenderedImage};
pub use scene::{Gaussian, PointCloud, SplatScene};
