//! Per-frame sensor data.

use crate::{Vec2, Vec3};
use alloc::vec::Vec;

/// What a pixel keypoint refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum KeypointKind {
    /// Skeleton knot; `id` is the 0-based knot index.
    Knot,
    /// Bottom corner; `id` is in `1..=4`.
    Corner,
}

/// A labeled pixel detection.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Keypoint {
    pub kind: KeypointKind,
    pub id: usize,
    pub pixel: Vec2,
}

impl Keypoint {
    pub fn knot(id: usize, pixel: Vec2) -> Self {
        Self { kind: KeypointKind::Knot, id, pixel }
    }

    pub fn corner(id: usize, pixel: Vec2) -> Self {
        Self { kind: KeypointKind::Corner, id, pixel }
    }
}

/// Radar points (sensor frame, meters) and pixel keypoints of one frame.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FrameMeasurements {
    /// Timestamp, seconds.
    pub t: f64,
    pub radar: Vec<Vec3>,
    pub keypoints: Vec<Keypoint>,
}

impl FrameMeasurements {
    pub fn knots(&self) -> impl Iterator<Item = &Keypoint> {
        self.keypoints.iter().filter(|k| k.kind == KeypointKind::Knot)
    }

    pub fn corners(&self) -> impl Iterator<Item = &Keypoint> {
        self.keypoints.iter().filter(|k| k.kind == KeypointKind::Corner)
    }
}
