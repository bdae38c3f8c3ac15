//! Measurement models: SGW mixture weights, pinhole keypoints and the
//! pseudo-measurement constraints, each linearized in the error-state
//! ordering of [`crate::motion`].

use crate::fmath::exp;
use crate::motion::{KinematicState, ERR_DIM, IOM, IP, ITH, IXI};
use crate::rotkit::{left_jacobian, skew};
use crate::{Error, Mat3, Result, Vec2, Vec3};
use alloc::vec::Vec;
use nalgebra::{SMatrix, SVector};

/// Points closer to the image plane than this are rejected.
pub const Z_MIN: f64 = 0.1;

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub u0: f64,
    pub v0: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, u0: f64, v0: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::Invalid("focal lengths must be positive"));
        }
        Ok(Self { fx, fy, u0, v0 })
    }
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self { fx: 1200.0, fy: 1200.0, u0: 960.0, v0: 540.0 }
    }
}

/// Plane `nᵀβ + d = 0` with unit normal.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GroundPlane {
    pub n: Vec3,
    pub d: f64,
}

impl GroundPlane {
    pub fn new(n: Vec3, d: f64) -> Result<Self> {
        if (n.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid("ground normal must be a unit vector"));
        }
        Ok(Self { n, d })
    }

    /// Signed distance of a point along the normal.
    pub fn residual(&self, b: &Vec3) -> f64 {
        self.n.dot(b) + self.d
    }

    /// Orthogonal projection of a point onto the plane.
    pub fn project(&self, b: &Vec3) -> Vec3 {
        b - self.n * self.residual(b)
    }
}

/// Residual, Jacobians and noise of one linearized measurement.
///
/// `z ≈ h(x_ref) + H_x δx + H_aux (ϖ - φ) + w`, `residual = z - h(x_ref)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedMeasurement<const M: usize> {
    pub residual: SVector<f64, M>,
    pub h_x: SMatrix<f64, M, ERR_DIM>,
    /// Jacobian with respect to the knot position, when one is involved.
    pub h_aux: Option<SMatrix<f64, M, 3>>,
    pub noise: SMatrix<f64, M, M>,
}

/// Default 24-knot car outline as fractions of (length, width, height),
/// listed for the left side; each is mirrored to the right.
const CAR_KNOTS: [[f64; 3]; 12] = [
    [0.50, 0.45, 0.25],
    [0.48, 0.45, 0.55],
    [-0.50, 0.45, 0.25],
    [-0.48, 0.45, 0.55],
    [0.32, 0.50, 0.15],
    [-0.32, 0.50, 0.15],
    [0.22, 0.42, 0.58],
    [0.05, 0.38, 1.00],
    [-0.30, 0.38, 1.00],
    [-0.42, 0.42, 0.60],
    [0.20, 0.52, 0.62],
    [0.00, 0.50, 0.30],
];

/// Skeleton knots in the vehicle frame and their left-right pairing.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SkeletonTemplate {
    pub knots: Vec<Vec3>,
    pub sym: Vec<usize>,
    /// Bottom length and width the knots were laid out for.
    pub base: Vec2,
}

impl SkeletonTemplate {
    pub fn new(knots: Vec<Vec3>, sym: Vec<usize>) -> Result<Self> {
        if knots.len() != sym.len() {
            return Err(Error::LengthMismatch { expected: knots.len(), found: sym.len() });
        }
        for (t, &s) in sym.iter().enumerate() {
            if s >= sym.len() || sym[s] != t {
                return Err(Error::UnpairedKnot(t));
            }
        }
        let mut out = Self { knots, sym, base: Vec2::zeros() };
        let (l, w) = out.footprint();
        out.base = Vec2::new(l, w);
        Ok(out)
    }

    /// Box-with-cabin car outline, origin at the center of the bottom.
    pub fn car(length: f64, width: f64, height: f64) -> Self {
        Self::outline(&CAR_KNOTS, length, width, height)
    }

    /// Mirrored outline from left-side knots given as fractions of
    /// (length, width, height); knot `2k` is the left one, `2k + 1` its mirror.
    pub fn outline(left: &[[f64; 3]], length: f64, width: f64, height: f64) -> Self {
        let mut knots = Vec::with_capacity(2 * left.len());
        let mut sym = Vec::with_capacity(2 * left.len());
        for (k, f) in left.iter().enumerate() {
            let left = Vec3::new(f[0] * length, f[1] * width, f[2] * height);
            knots.push(left);
            knots.push(Vec3::new(left.x, -left.y, left.z));
            sym.push(2 * k + 1);
            sym.push(2 * k);
        }
        Self { knots, sym, base: Vec2::new(length, width) }
    }

    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    /// Rescales the knots to a bottom of size `ξ = (l, w)`, keeping the
    /// height.
    pub fn scaled_to(&self, xi: &Vec2) -> Self {
        let sx = if self.base.x > 0.0 { xi.x / self.base.x } else { 1.0 };
        let sy = if self.base.y > 0.0 { xi.y / self.base.y } else { 1.0 };
        Self {
            knots: self.knots.iter().map(|k| Vec3::new(k.x * sx, k.y * sy, k.z)).collect(),
            sym: self.sym.clone(),
            base: *xi,
        }
    }

    /// Extent of the knots along x and y.
    pub fn footprint(&self) -> (f64, f64) {
        let span = |f: fn(&Vec3) -> f64| {
            let lo = self.knots.iter().map(f).fold(f64::INFINITY, f64::min);
            let hi = self.knots.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
            hi - lo
        };
        (span(|k| k.x), span(|k| k.y))
    }
}

impl Default for SkeletonTemplate {
    fn default() -> Self {
        Self::car(4.5, 1.8, 1.5)
    }
}

/// Left-right mirror `diag(1, -1, 1)`.
pub fn mirror() -> Mat3 {
    Mat3::from_diagonal(&Vec3::new(1.0, -1.0, 1.0))
}

/// Corner offsets `G_i` (3×2) with sign order (+,+), (+,-), (-,-), (-,+).
pub fn corner_matrix(id: usize) -> Result<SMatrix<f64, 3, 2>> {
    let (sx, sy) = match id {
        1 => (0.5, 0.5),
        2 => (0.5, -0.5),
        3 => (-0.5, -0.5),
        4 => (-0.5, 0.5),
        _ => return Err(Error::InvalidCorner(id)),
    };
    Ok(SMatrix::<f64, 3, 2>::new(sx, 0.0, 0.0, sy, 0.0, 0.0))
}

/// Corner position in the vehicle frame.
pub fn corner_vcs(id: usize, xi: &Vec2) -> Result<Vec3> {
    Ok(corner_matrix(id)? * xi)
}

/// VCS point expressed in the sensor frame.
pub fn rigid_transform(x: &KinematicState, point_vcs: &Vec3) -> Vec3 {
    x.p + x.rot() * point_vcs
}

/// Spherical-Gaussian mixture weights from the reference state.
///
/// Reflectors with near-zero norm have no direction; they receive the mean
/// unnormalized weight of the others.
pub fn sgw_weights(x: &KinematicState, reflectors: &[Vec3], lambda: f64) -> Result<Vec<f64>> {
    let pn = x.p.norm();
    if pn == 0.0 {
        return Err(Error::ZeroPosition);
    }
    if reflectors.is_empty() {
        return Ok(Vec::new());
    }
    let r = x.rot();
    let mut w: Vec<Option<f64>> = reflectors
        .iter()
        .map(|u| {
            let un = u.norm();
            (un >= 1e-6).then(|| exp(lambda * (-x.p.dot(&(r * u)) / (pn * un) - 1.0)))
        })
        .collect();
    let known: Vec<f64> = w.iter().flatten().copied().collect();
    let fill = if known.is_empty() { 1.0 } else { known.iter().sum::<f64>() / known.len() as f64 };
    for v in w.iter_mut() {
        v.get_or_insert(fill);
    }
    let total: f64 = w.iter().flatten().sum();
    Ok(w.into_iter().map(|v| v.unwrap_or(fill) / total).collect())
}

/// Pinhole projection of a sensor-frame point.
pub fn project_point(k: &CameraIntrinsics, p: &Vec3) -> Result<Vec2> {
    if p.z <= Z_MIN {
        return Err(Error::BehindCamera { z: p.z });
    }
    Ok(Vec2::new(k.fx * p.x / p.z + k.u0, k.fy * p.y / p.z + k.v0))
}

/// `∂pixel/∂p` at a sensor-frame point.
pub fn pixel_jacobian(k: &CameraIntrinsics, p: &Vec3) -> Result<SMatrix<f64, 2, 3>> {
    if p.z <= Z_MIN {
        return Err(Error::BehindCamera { z: p.z });
    }
    let iz = 1.0 / p.z;
    Ok(SMatrix::<f64, 2, 3>::new(
        k.fx * iz,
        0.0,
        -k.fx * p.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * p.y * iz * iz,
    ))
}

// Jacobian of p + R a with respect to [δp, δθ] placed in a 3×12 block.
fn point_jacobian(x: &KinematicState, a_vcs: &Vec3) -> SMatrix<f64, 3, ERR_DIM> {
    let mut h = SMatrix::<f64, 3, ERR_DIM>::zeros();
    h.fixed_view_mut::<3, 3>(0, IP).copy_from(&Mat3::identity());
    let ra = x.rot() * a_vcs;
    h.fixed_view_mut::<3, 3>(0, ITH).copy_from(&(-skew(&ra) * left_jacobian(&x.theta)));
    h
}

/// Linearized knot keypoint `z = h(x, ϖ) + w`, expanded at `(x_ref, φ)`.
pub fn knot_measurement(
    x: &KinematicState,
    phi: &Vec3,
    z: &Vec2,
    k: &CameraIntrinsics,
    noise: &SMatrix<f64, 2, 2>,
) -> Result<LinearizedMeasurement<2>> {
    let ps = rigid_transform(x, phi);
    let jp = pixel_jacobian(k, &ps)?;
    Ok(LinearizedMeasurement {
        residual: z - project_point(k, &ps)?,
        h_x: jp * point_jacobian(x, phi),
        h_aux: Some(jp * x.rot()),
        noise: *noise,
    })
}

/// Linearized bottom-corner keypoint.
pub fn corner_measurement(
    x: &KinematicState,
    id: usize,
    z: &Vec2,
    k: &CameraIntrinsics,
    noise: &SMatrix<f64, 2, 2>,
) -> Result<LinearizedMeasurement<2>> {
    let g = corner_matrix(id)?;
    let c = g * x.xi;
    let ps = rigid_transform(x, &c);
    let jp = pixel_jacobian(k, &ps)?;
    let mut hs = point_jacobian(x, &c);
    hs.fixed_view_mut::<3, 2>(0, IXI).copy_from(&(x.rot() * g));
    Ok(LinearizedMeasurement {
        residual: z - project_point(k, &ps)?,
        h_x: jp * hs,
        h_aux: None,
        noise: *noise,
    })
}

/// Zero roll-rate pseudo-measurement `0 = (R u^d)ᵀ ω + w`.
pub fn angular_velocity_constraint(x: &KinematicState, q_rot: f64) -> LinearizedMeasurement<1> {
    let h = x.heading();
    let mut hx = SMatrix::<f64, 1, ERR_DIM>::zeros();
    hx.fixed_view_mut::<1, 3>(0, IOM).copy_from(&h.transpose());
    hx.fixed_view_mut::<1, 3>(0, ITH)
        .copy_from(&(-x.omega.transpose() * skew(&h) * left_jacobian(&x.theta)));
    LinearizedMeasurement {
        residual: SVector::<f64, 1>::new(-h.dot(&x.omega)),
        h_x: hx,
        h_aux: None,
        noise: SMatrix::<f64, 1, 1>::new(q_rot),
    }
}

/// Corner-on-ground pseudo-measurement `0 = nᵀ(p + R G_i ξ) + d + w`.
pub fn ground_constraint(
    x: &KinematicState,
    plane: &GroundPlane,
    id: usize,
    q_grnd: f64,
) -> Result<LinearizedMeasurement<1>> {
    let g = corner_matrix(id)?;
    let c = g * x.xi;
    let mut hs = point_jacobian(x, &c);
    hs.fixed_view_mut::<3, 2>(0, IXI).copy_from(&(x.rot() * g));
    Ok(LinearizedMeasurement {
        residual: SVector::<f64, 1>::new(-plane.residual(&rigid_transform(x, &c))),
        h_x: plane.n.transpose() * hs,
        h_aux: None,
        noise: SMatrix::<f64, 1, 1>::new(q_grnd),
    })
}

/// Symmetric partner of knot `t` and the mirror `D`; the pseudo-measurement
/// is `ϖ_sym(t) = D ϖ_t + w`.
pub fn symmetry_constraint(template: &SkeletonTemplate, t: usize) -> Result<(usize, Mat3)> {
    let s = *template.sym.get(t).ok_or(Error::UnpairedKnot(t))?;
    if template.sym.get(s) != Some(&t) {
        return Err(Error::UnpairedKnot(t));
    }
    Ok((s, mirror()))
}
