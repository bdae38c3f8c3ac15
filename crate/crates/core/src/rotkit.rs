//! Rotation algebra: Hamilton quaternions, rotation vectors, the left
//! Jacobian of SO(3), and the cross-product splicing operators.
//!
//! Conventions: quaternions are stored `[w, v]`, the product is Hamilton,
//! and `R{q}` rotates VCS vectors into the sensor frame. Rotation
//! perturbations are applied on the left, `R ≈ exp([δ]×) R_ref`.

use crate::fmath::{atan2, cos, sin, sqrt};
use crate::{Error, Mat3, Result, Vec3};
use alloc::vec::Vec;
use core::ops::Mul;
use nalgebra::{DMatrix, DVector, Matrix3xX};

/// Rotation vector (axis times angle, radians).
pub type RotVec = Vec3;

/// Below this magnitude the trigonometric ratios use their Taylor series.
///
/// The series are summed to x²²; at x = 1 the truncation error is below
/// 1e-20, and above 1 the closed forms have no significant cancellation.
pub const SERIES_THRESHOLD: f64 = 1.0;

// Σₖ (-1)ᵏ x²ᵏ / (2k + a)!
fn alt_series(x: f64, a: u32) -> f64 {
    let x2 = x * x;
    let mut fact = 1.0;
    for i in 2..=a {
        fact *= i as f64;
    }
    let mut term = 1.0 / fact;
    let mut sum = term;
    for k in 0..11u32 {
        let m = (2 * k + a) as f64;
        term *= -x2 / ((m + 1.0) * (m + 2.0));
        sum += term;
    }
    sum
}

/// `sin(x)/x`.
pub fn sinc(x: f64) -> f64 {
    if x.abs() < SERIES_THRESHOLD {
        alt_series(x, 1)
    } else {
        sin(x) / x
    }
}

/// `(1 - cos x)/x²`.
pub fn one_minus_cos_ratio(x: f64) -> f64 {
    if x.abs() < SERIES_THRESHOLD {
        alt_series(x, 2)
    } else {
        (1.0 - cos(x)) / (x * x)
    }
}

/// `(x - sin x)/x³`.
pub fn x_minus_sin_ratio(x: f64) -> f64 {
    if x.abs() < SERIES_THRESHOLD {
        alt_series(x, 3)
    } else {
        (x - sin(x)) / (x * x * x)
    }
}

/// `(x²/2 - 1 + cos x)/x⁴`.
pub fn cos_quartic_ratio(x: f64) -> f64 {
    if x.abs() < SERIES_THRESHOLD {
        alt_series(x, 4)
    } else {
        let x2 = x * x;
        (0.5 * x2 - 1.0 + cos(x)) / (x2 * x2)
    }
}

/// Cross-product matrix: `skew(v) * t == v × t`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation matrix of a rotation vector (Rodrigues).
pub fn rot_from_rotvec(theta: &RotVec) -> Mat3 {
    let x = theta.norm();
    let k = skew(theta);
    Mat3::identity() + k * sinc(x) + k * k * one_minus_cos_ratio(x)
}

/// Left Jacobian of SO(3): `I + (1-cos x)/x² [θ]× + (x - sin x)/x³ [θ]×²`.
///
/// `R{θ + δ} ≈ exp([J_l(θ) δ]×) R{θ}`.
pub fn left_jacobian(theta: &RotVec) -> Mat3 {
    let x = theta.norm();
    let k = skew(theta);
    Mat3::identity() + k * one_minus_cos_ratio(x) + k * k * x_minus_sin_ratio(x)
}

/// Inverse of [`left_jacobian`], valid for `‖θ‖ < 2π`.
pub fn left_jacobian_inv(theta: &RotVec) -> Mat3 {
    let x = theta.norm();
    let k = skew(theta);
    // (1/x² - (1 + cos x)/(2 x sin x))
    let c = if x < 0.1 {
        let x2 = x * x;
        1.0 / 12.0 + x2 / 720.0 + x2 * x2 / 30240.0 + x2 * x2 * x2 / 1_209_600.0
    } else {
        1.0 / (x * x) - (1.0 + cos(x)) / (2.0 * x * sin(x))
    };
    Mat3::identity() - k * 0.5 + k * k * c
}

/// Hamilton quaternion `w + v`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Quat {
    pub w: f64,
    pub v: Vec3,
}

impl Quat {
    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, v: Vec3::new(x, y, z) }
    }

    pub const fn identity() -> Self {
        Self::new(1.0, 0.0, 0.0, 0.0)
    }

    /// Pure quaternion embedding of a vector.
    pub fn pure(v: Vec3) -> Self {
        Self { w: 0.0, v }
    }

    pub fn conj(&self) -> Self {
        Self { w: self.w, v: -self.v }
    }

    pub fn norm(&self) -> f64 {
        sqrt(self.w * self.w + self.v.norm_squared())
    }

    pub fn normalized(&self) -> Self {
        let n = self.norm();
        Self { w: self.w / n, v: self.v / n }
    }

    /// Same rotation with a non-negative real part.
    pub fn canonical(&self) -> Self {
        if self.w < 0.0 {
            Self { w: -self.w, v: -self.v }
        } else {
            *self
        }
    }

    /// `R{q} = (w² - vᵀv) I + 2 v vᵀ + 2 w [v]×`.
    pub fn to_rot(&self) -> Mat3 {
        let (w, v) = (self.w, self.v);
        Mat3::identity() * (w * w - v.dot(&v)) + v * v.transpose() * 2.0 + skew(&v) * (2.0 * w)
    }

    /// Rotates a vector by `R{q}`.
    pub fn rotate(&self, t: &Vec3) -> Vec3 {
        self.to_rot() * t
    }

    /// `Exp(θ) = [cos(‖θ‖/2), sin(‖θ‖/2) θ/‖θ‖]`.
    pub fn exp(theta: &RotVec) -> Self {
        let x = theta.norm();
        Self { w: cos(0.5 * x), v: theta * (0.5 * sinc(0.5 * x)) }
    }

    /// Inverse of [`Quat::exp`] after canonicalizing to `w ≥ 0`; the result
    /// has norm in `[0, π]`.
    pub fn log(&self) -> RotVec {
        let q = self.canonical();
        let s = q.v.norm();
        if s < 1e-300 {
            return Vec3::zeros();
        }
        let angle = 2.0 * atan2(s, q.w);
        if angle < SERIES_THRESHOLD {
            // s = sin(angle/2), so angle/s = 1/(sinc(angle/2)/2)
            q.v * (1.0 / (0.5 * sinc(0.5 * angle)))
        } else {
            q.v * (angle / s)
        }
    }

    /// Quaternion of a rotation matrix (Shepperd's method).
    pub fn from_rot(r: &Mat3) -> Self {
        let tr = r.trace();
        let q = if tr > r[(0, 0)].max(r[(1, 1)]).max(r[(2, 2)]) {
            let s = 2.0 * sqrt(1.0 + tr);
            Self::new(
                0.25 * s,
                (r[(2, 1)] - r[(1, 2)]) / s,
                (r[(0, 2)] - r[(2, 0)]) / s,
                (r[(1, 0)] - r[(0, 1)]) / s,
            )
        } else if r[(0, 0)] >= r[(1, 1)] && r[(0, 0)] >= r[(2, 2)] {
            let s = 2.0 * sqrt(1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]);
            Self::new(
                (r[(2, 1)] - r[(1, 2)]) / s,
                0.25 * s,
                (r[(0, 1)] + r[(1, 0)]) / s,
                (r[(0, 2)] + r[(2, 0)]) / s,
            )
        } else if r[(1, 1)] >= r[(2, 2)] {
            let s = 2.0 * sqrt(1.0 - r[(0, 0)] + r[(1, 1)] - r[(2, 2)]);
            Self::new(
                (r[(0, 2)] - r[(2, 0)]) / s,
                (r[(0, 1)] + r[(1, 0)]) / s,
                0.25 * s,
                (r[(1, 2)] + r[(2, 1)]) / s,
            )
        } else {
            let s = 2.0 * sqrt(1.0 - r[(0, 0)] - r[(1, 1)] + r[(2, 2)]);
            Self::new(
                (r[(1, 0)] - r[(0, 1)]) / s,
                (r[(0, 2)] + r[(2, 0)]) / s,
                (r[(1, 2)] + r[(2, 1)]) / s,
                0.25 * s,
            )
        };
        q.normalized().canonical()
    }
}

impl Mul for Quat {
    type Output = Quat;

    /// Hamilton product `p ⊙ q`.
    fn mul(self, q: Quat) -> Quat {
        Quat {
            w: self.w * q.w - self.v.dot(&q.v),
            v: q.v * self.w + self.v * q.w + self.v.cross(&q.v),
        }
    }
}

/// Wraps a rotation vector to the canonical branch `‖θ‖ ≤ π`.
pub fn wrap_rotvec(theta: &RotVec) -> RotVec {
    Quat::exp(theta).log()
}

/// `[M]* = [[m₁]×, …, [mₙ]×]`, a 3×3n block row.
pub fn mat_star(m: &Matrix3xX<f64>) -> DMatrix<f64> {
    let n = m.ncols();
    let mut out = DMatrix::zeros(3, 3 * n);
    for j in 0..n {
        let c: Vec3 = m.column(j).into_owned();
        out.view_mut((0, 3 * j), (3, 3)).copy_from(&skew(&c));
    }
    out
}

/// `[X]⋆`: stacks the columns of a 3×n matrix into a 3n-vector.
///
/// This is the stacking under which `[v]× M t = -[M]* [v tᵀ]⋆` holds.
pub fn star_vec(x: &Matrix3xX<f64>) -> DVector<f64> {
    DVector::from_column_slice(x.as_slice())
}

/// Block-diagonal matrix with `n` copies of `x` on the diagonal.
pub fn diag_rep(x: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let (r, c) = x.shape();
    let mut out = DMatrix::zeros(r * n, c * n);
    for i in 0..n {
        out.view_mut((r * i, c * i), (r, c)).copy_from(x);
    }
    out
}

/// Right side of `[v]× M [t]×ᵀ = [L]* diag₃(v tᵀ) [L]*ᵀ` for SPD `M = L Lᵀ`.
pub fn cross_sandwich_via_cholesky(m: &Mat3, v: &Vec3, t: &Vec3) -> Result<Mat3> {
    let l = m.cholesky().ok_or(Error::NotPositiveDefinite("M"))?.l();
    let ls = mat_star(&Matrix3xX::from_columns(&[
        l.column(0).into_owned(),
        l.column(1).into_owned(),
        l.column(2).into_owned(),
    ]));
    let vt = DMatrix::from_column_slice(3, 3, (v * t.transpose()).as_slice());
    let out = &ls * diag_rep(&vt, 3) * ls.transpose();
    Ok(Mat3::from_column_slice(out.as_slice()))
}

/// `K_N(S) = Σᵢₖ Nᵢₖ [eᵢ]× S [eₖ]×ᵀ`, so that for every `w`
/// `tr(N [w]× S [w]×ᵀ) = wᵀ K_N(S) w`.
///
/// With `N = L Lᵀ` this equals `[L]* diag₃(S) [L]*ᵀ`; the expansion over the
/// entries of `N` avoids the factorization and accepts indefinite `N`.
pub fn cross_quadratic(n: &Mat3, s: &Mat3) -> Mat3 {
    let e = [Vec3::x(), Vec3::y(), Vec3::z()];
    let ex: [Mat3; 3] = [skew(&e[0]), skew(&e[1]), skew(&e[2])];
    let mut out = Mat3::zeros();
    for i in 0..3 {
        let left = ex[i] * s;
        for k in 0..3 {
            if n[(i, k)] != 0.0 {
                out += left * ex[k].transpose() * n[(i, k)];
            }
        }
    }
    out
}

/// `[N]* [S]⋆ = Σⱼ nⱼ × sⱼ` over matching columns of `N` and `S`.
pub fn star_contract(n: &Mat3, s: &Mat3) -> Vec3 {
    let mut out = Vec3::zeros();
    for j in 0..3 {
        let nj: Vec3 = n.column(j).into_owned();
        let sj: Vec3 = s.column(j).into_owned();
        out += nj.cross(&sj);
    }
    out
}

/// Symmetric part `(A + Aᵀ)/2` of a square matrix.
pub fn symmetrize<const D: usize>(
    a: &nalgebra::SMatrix<f64, D, D>,
) -> nalgebra::SMatrix<f64, D, D> {
    (a + a.transpose()) * 0.5
}

/// Columns of a 3×3 matrix as a dynamic 3×n matrix.
pub fn mat3_columns(m: &Mat3) -> Matrix3xX<f64> {
    let cols: Vec<Vec3> = (0..3).map(|j| m.column(j).into_owned()).collect();
    Matrix3xX::from_columns(&cols)
}
