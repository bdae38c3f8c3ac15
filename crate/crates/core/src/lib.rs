//! Core numerics for 3D extended object tracking with sparse radar point
//! clouds and pixel keypoints.
//!
//! The crate is `no_std` (it needs `alloc`) and contains everything that is
//! pure computation:
//!
//! - [`rotkit`]: quaternion / rotation-vector algebra, the left Jacobian and
//!   the cross-product splicing operators used by the variational update.
//! - [`motion`]: the quaternion CTRV reference-state prediction, the closed
//!   form error-state transition and the elastic-skeleton spring-damper
//!   transition.
//! - [`sensors`]: the spherical-Gaussian weighted radar mixture weights, the
//!   pinhole keypoint models and the pseudo-measurement constraints, all
//!   linearized in the shared 12-dimensional error-state ordering.
//! - [`vbtracker`]: the recursive filter (time update plus mean-field
//!   variational measurement update).
//! - [`metrics`]: plane-projected IOU and velocity RMSE.
//!
//! IO, scenario generation and the command-line tool live in the `eot` crate.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

mod error;
mod fmath;
pub mod measurements;
pub mod metrics;
pub mod motion;
pub mod rotkit;
pub mod sensors;
pub mod vbtracker;

pub use error::{Error, Result};
pub use measurements::{FrameMeasurements, Keypoint, KeypointKind};
pub use motion::KinematicState;
pub use sensors::{CameraIntrinsics, GroundPlane, SkeletonTemplate};
pub use vbtracker::{Hyperparams, KinematicBelief, MotionModel, SkeletonBelief, Tracker};

/// 2-vector of `f64`.
pub type Vec2 = nalgebra::Vector2<f64>;
/// 3-vector of `f64`.
pub type Vec3 = nalgebra::Vector3<f64>;
/// 3x3 matrix of `f64`.
pub type Mat3 = nalgebra::Matrix3<f64>;
