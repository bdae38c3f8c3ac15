//! Shape and velocity metrics: plane-projected IOU of convex hulls and the
//! velocity RMSE.

use crate::fmath::sqrt;
use crate::motion::KinematicState;
use crate::sensors::{corner_vcs, rigid_transform};
use crate::{Error, Result, Vec2, Vec3};
use alloc::vec::Vec;

/// Coordinate plane of the vehicle frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Plane {
    Xy,
    Yz,
    Zx,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Xy, Plane::Yz, Plane::Zx];

    pub fn project(self, p: &Vec3) -> Vec2 {
        match self {
            Plane::Xy => Vec2::new(p.x, p.y),
            Plane::Yz => Vec2::new(p.y, p.z),
            Plane::Zx => Vec2::new(p.z, p.x),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Plane::Xy => "xy",
            Plane::Yz => "yz",
            Plane::Zx => "zx",
        }
    }
}

fn cross(o: &Vec2, a: &Vec2, b: &Vec2) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Counter-clockwise convex hull (monotone chain), collinear points dropped.
pub fn convex_hull(points: &[Vec2]) -> Vec<Vec2> {
    let mut pts: Vec<Vec2> = points.iter().copied().filter(|p| p.x.is_finite() && p.y.is_finite()).collect();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Vec2> = Vec::with_capacity(2 * pts.len());
    for p in &pts {
        while hull.len() >= 2 && cross(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(*p);
    }
    let lower = hull.len() + 1;
    for p in pts.iter().rev().skip(1) {
        while hull.len() >= lower && cross(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(*p);
    }
    hull.pop();
    hull
}

/// Shoelace area (positive for counter-clockwise vertices).
pub fn polygon_area(poly: &[Vec2]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    0.5 * (0..n).map(|i| {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        a.x * b.y - b.x * a.y
    })
    .sum::<f64>()
}

/// Intersection of a polygon with a convex counter-clockwise polygon.
pub fn clip_convex(subject: &[Vec2], clip: &[Vec2]) -> Vec<Vec2> {
    let mut out: Vec<Vec2> = subject.to_vec();
    let m = clip.len();
    for i in 0..m {
        if out.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % m];
        let input = core::mem::take(&mut out);
        let inside = |p: &Vec2| cross(&a, &b, p) >= 0.0;
        let meet = |p: &Vec2, q: &Vec2| {
            let dp = cross(&a, &b, p);
            let dq = cross(&a, &b, q);
            p + (q - p) * (dp / (dp - dq))
        };
        for k in 0..input.len() {
            let cur = input[k];
            let prev = input[(k + input.len() - 1) % input.len()];
            match (inside(&prev), inside(&cur)) {
                (true, true) => out.push(cur),
                (true, false) => out.push(meet(&prev, &cur)),
                (false, true) => {
                    out.push(meet(&prev, &cur));
                    out.push(cur);
                }
                (false, false) => {}
            }
        }
    }
    out
}

fn hull_of(points: &[Vec3], plane: Plane) -> Result<Vec<Vec2>> {
    let proj: Vec<Vec2> = points.iter().map(|p| plane.project(p)).collect();
    let hull = convex_hull(&proj);
    if hull.len() < 3 || polygon_area(&hull) <= 1e-12 {
        return Err(Error::DegenerateShape);
    }
    Ok(hull)
}

/// IOU of the convex hulls of two point sets projected on `plane`.
/// Fails with [`Error::DegenerateShape`] when either hull has no area.
pub fn try_iou_plane(a: &[Vec3], b: &[Vec3], plane: Plane) -> Result<f64> {
    let ha = hull_of(a, plane)?;
    let hb = hull_of(b, plane)?;
    let inter = polygon_area(&clip_convex(&ha, &hb)).max(0.0);
    let union = polygon_area(&ha) + polygon_area(&hb) - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// [`try_iou_plane`] with degenerate shapes scored 0.
pub fn iou_plane(a: &[Vec3], b: &[Vec3], plane: Plane) -> f64 {
    try_iou_plane(a, b, plane).unwrap_or(0.0)
}

/// Knots plus the four bottom corners, in the vehicle frame.
pub fn vehicle_shape(knots: &[Vec3], xi: &crate::Vec2) -> Vec<Vec3> {
    let mut out = knots.to_vec();
    out.extend((1..=4).filter_map(|id| corner_vcs(id, xi).ok()));
    out
}

/// Moves a shape given in the frame of `from` into the frame of `to`.
pub fn shape_in_frame(shape: &[Vec3], from: &KinematicState, to: &KinematicState) -> Vec<Vec3> {
    let rt = to.rot().transpose();
    shape.iter().map(|k| rt * (rigid_transform(from, k) - to.p)).collect()
}

/// `sqrt(mean((v_i - v̂_i)²))`.
pub fn rmse_velocity(truth: &[f64], est: &[f64]) -> Result<f64> {
    if truth.len() != est.len() {
        return Err(Error::LengthMismatch { expected: truth.len(), found: est.len() });
    }
    if truth.is_empty() {
        return Err(Error::Invalid("no frames to score"));
    }
    let ss: f64 = truth.iter().zip(est).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sqrt(ss / truth.len() as f64))
}
