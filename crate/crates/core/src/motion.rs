//! Time update: quaternion CTRV reference prediction, the closed-form
//! error-state transition, and the elastic-skeleton spring-damper.

use crate::fmath::{cos, cosh, exp, sin, sinh, sqrt};
use crate::rotkit::{
    cos_quartic_ratio, one_minus_cos_ratio, rot_from_rotvec, sinc, skew, x_minus_sin_ratio, Quat,
    RotVec,
};
use crate::{Error, Mat3, Result, Vec2, Vec3};
use nalgebra::{SMatrix, SVector};

/// Error-state dimension `[δp, δv, δθ, δω, δξ]`.
pub const ERR_DIM: usize = 12;
/// Offset of `δp` in the error state.
pub const IP: usize = 0;
/// Offset of `δv`.
pub const IV: usize = 3;
/// Offset of `δθ`.
pub const ITH: usize = 4;
/// Offset of `δω`.
pub const IOM: usize = 7;
/// Offset of `δξ`.
pub const IXI: usize = 10;

/// Skeleton component dimension `[u, ϖ, v]`.
pub const SKEL_DIM: usize = 9;

pub type ErrVec = SVector<f64, ERR_DIM>;
pub type ErrMat = SMatrix<f64, ERR_DIM, ERR_DIM>;
pub type SkelVec = SVector<f64, SKEL_DIM>;
pub type SkelMat = SMatrix<f64, SKEL_DIM, SKEL_DIM>;

/// Forward axis of the vehicle frame.
pub const FORWARD: Vec3 = Vec3::new(1.0, 0.0, 0.0);

/// Vehicle kinematic state in the sensor frame.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KinematicState {
    /// Center of the vehicle's bottom, meters.
    pub p: Vec3,
    /// Speed along the forward axis, m/s.
    pub v: f64,
    /// Pose as a rotation vector (VCS to SCS).
    pub theta: RotVec,
    /// Angular velocity in the sensor frame, rad/s.
    pub omega: Vec3,
    /// Bottom length and width, meters.
    pub xi: Vec2,
}

impl KinematicState {
    pub fn rot(&self) -> Mat3 {
        rot_from_rotvec(&self.theta)
    }

    pub fn quat(&self) -> Quat {
        Quat::exp(&self.theta)
    }

    /// `R u^d`, the heading direction in the sensor frame.
    pub fn heading(&self) -> Vec3 {
        self.rot() * FORWARD
    }

    /// Velocity vector `v R u^d`.
    pub fn velocity(&self) -> Vec3 {
        self.heading() * self.v
    }

    /// `x ⊕ δx` in the additive chart (the rotation vector included).
    pub fn plus(&self, dx: &ErrVec) -> Self {
        Self {
            p: self.p + dx.fixed_rows::<3>(IP),
            v: self.v + dx[IV],
            theta: self.theta + dx.fixed_rows::<3>(ITH),
            omega: self.omega + dx.fixed_rows::<3>(IOM),
            xi: self.xi + dx.fixed_rows::<2>(IXI),
        }
    }

    /// Same state with zero angular velocity.
    pub fn without_rotation(&self) -> Self {
        Self { omega: Vec3::zeros(), ..*self }
    }
}

/// Integrals of `exp([ω]× s)`: `Σ₀ = exp([ω]×Δt)`, `Σ₁ = ∫₀^Δt Σ₀(s) ds`,
/// `Σ₂ = ∫₀^Δt Σ₁(s) ds`.
pub fn sigma_blocks(omega: &Vec3, dt: f64) -> (Mat3, Mat3, Mat3) {
    let x = omega.norm() * dt;
    let m = skew(omega);
    let m2 = m * m;
    let (dt2, dt3, dt4) = (dt * dt, dt * dt * dt, dt * dt * dt * dt);
    let i = Mat3::identity();
    let s0 = i + m * (dt * sinc(x)) + m2 * (dt2 * one_minus_cos_ratio(x));
    let s1 = i * dt + m * (dt2 * one_minus_cos_ratio(x)) + m2 * (dt3 * x_minus_sin_ratio(x));
    let s2 = i * (0.5 * dt2) + m * (dt3 * x_minus_sin_ratio(x)) + m2 * (dt4 * cos_quartic_ratio(x));
    (s0, s1, s2)
}

/// Reference-state time update over `dt`.
pub fn predict_reference(x: &KinematicState, dt: f64) -> KinematicState {
    if dt == 0.0 {
        return *x;
    }
    let (_, s1, _) = sigma_blocks(&x.omega, dt);
    let p = x.p + s1 * x.heading() * x.v;
    let q = (Quat::exp(&(x.omega * dt)) * x.quat()).normalized();
    KinematicState { p, theta: q.log(), ..*x }
}

/// Continuous error-state dynamics matrix `F`.
pub fn error_dynamics(x: &KinematicState) -> ErrMat {
    let head = x.heading();
    let mut f = ErrMat::zeros();
    f.fixed_view_mut::<3, 1>(IP, IV).copy_from(&head);
    f.fixed_view_mut::<3, 3>(IP, ITH).copy_from(&(-skew(&head) * x.v));
    f.fixed_view_mut::<3, 3>(ITH, ITH).copy_from(&skew(&x.omega));
    f.fixed_view_mut::<3, 3>(ITH, IOM).copy_from(&Mat3::identity());
    f
}

/// Discrete error-state transition and its building blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorTransition {
    pub phi: ErrMat,
    pub m0: Vec3,
    pub m1: Mat3,
    pub m2: Mat3,
    pub sigma0: Mat3,
    pub sigma1: Mat3,
    pub sigma2: Mat3,
}

/// Closed-form `Φ = exp(F Δt)` around the reference `x`.
pub fn error_transition(x: &KinematicState, dt: f64) -> ErrorTransition {
    let m0 = x.heading();
    let m1 = -skew(&m0) * x.v;
    let m2 = skew(&x.omega);
    let (s0, s1, s2) = sigma_blocks(&x.omega, dt);
    let mut phi = ErrMat::identity();
    phi.fixed_view_mut::<3, 1>(IP, IV).copy_from(&(m0 * dt));
    phi.fixed_view_mut::<3, 3>(IP, ITH).copy_from(&(m1 * s1));
    phi.fixed_view_mut::<3, 3>(IP, IOM).copy_from(&(m1 * s2));
    phi.fixed_view_mut::<3, 3>(ITH, ITH).copy_from(&s0);
    phi.fixed_view_mut::<3, 3>(ITH, IOM).copy_from(&s1);
    ErrorTransition { phi, m0, m1, m2, sigma0: s0, sigma1: s1, sigma2: s2 }
}

/// `Φ P Φᵀ + W Δt`, symmetrized. Rejects a `P` that fails Cholesky.
pub fn propagate<const D: usize>(
    p: &SMatrix<f64, D, D>,
    phi: &SMatrix<f64, D, D>,
    w: &SMatrix<f64, D, D>,
    dt: f64,
    what: &'static str,
) -> Result<SMatrix<f64, D, D>> {
    if p.cholesky().is_none() {
        return Err(Error::NotPositiveDefinite(what));
    }
    let out = phi * p * phi.transpose() + w * dt;
    Ok((out + out.transpose()) * 0.5)
}

/// Error-state covariance time update.
pub fn predict_covariance(p: &ErrMat, tr: &ErrorTransition, w: &ErrMat, dt: f64) -> Result<ErrMat> {
    propagate(p, &tr.phi, w, dt, "error-state covariance")
}

/// Continuous skeleton dynamics: `u̇ = 0`, `ϖ̇ = v`, `v̇ = ε(u - ϖ) - ρ v`.
pub fn skeleton_dynamics(epsilon: f64, rho: f64) -> SkelMat {
    let i = Mat3::identity();
    let mut f = SkelMat::zeros();
    f.fixed_view_mut::<3, 3>(3, 6).copy_from(&i);
    f.fixed_view_mut::<3, 3>(6, 0).copy_from(&(i * epsilon));
    f.fixed_view_mut::<3, 3>(6, 3).copy_from(&(-i * epsilon));
    f.fixed_view_mut::<3, 3>(6, 6).copy_from(&(-i * rho));
    f
}

/// Discrete spring-damper transition.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonTransition {
    pub phi: SkelMat,
    /// Scalar multiplier of the `M₃ = m3 I` block.
    pub m3: f64,
    /// Scalar multiplier of the `M₄ = m4 I` block.
    pub m4: f64,
    pub epsilon: f64,
    pub rho: f64,
}

// cosh(√D h) and sinh(√D h)/√D for any sign of D, continuous through D = 0.
fn cosh_sinhc(d: f64, h: f64) -> (f64, f64) {
    let z = d * h * h;
    if z.abs() < 1.0 {
        let (mut c, mut g) = (1.0, 1.0);
        let (mut tc, mut tg) = (1.0, 1.0);
        for k in 1..14 {
            let k = k as f64;
            tc *= z / ((2.0 * k - 1.0) * (2.0 * k));
            tg *= z / ((2.0 * k) * (2.0 * k + 1.0));
            c += tc;
            g += tg;
        }
        (c, g * h)
    } else if d > 0.0 {
        let r = sqrt(d);
        (cosh(r * h), sinh(r * h) / r)
    } else {
        let r = sqrt(-d);
        (cos(r * h), sin(r * h) / r)
    }
}

/// Exact `exp(F_ϑ Δt)`.
///
/// Every coordinate obeys the same scalar system in `y = ϖ - u`:
/// `ẏ = v`, `v̇ = -ε y - ρ v`, whose 2×2 exponential is
/// `e^{-sh} (cosh(√D h) I + sinh(√D h)/√D (A + s I))` with `s = ρ/2`,
/// `D = s² - ε`. The hyperbolic ratios switch to series near `D = 0`, which
/// makes the result continuous across critical damping.
pub fn skeleton_transition(epsilon: f64, rho: f64, dt: f64) -> SkeletonTransition {
    let s = 0.5 * rho;
    let d = s * s - epsilon;
    let (c, g) = cosh_sinhc(d, dt);
    let e = exp(-s * dt);
    let alpha = e * (c + s * g);
    let beta = e * g;
    let m3 = alpha - 1.0;
    let m4 = beta;
    let i = Mat3::identity();
    let mut phi = SkelMat::identity();
    phi.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-i * m3));
    phi.fixed_view_mut::<3, 3>(3, 3).copy_from(&(i * (1.0 + m3)));
    phi.fixed_view_mut::<3, 3>(3, 6).copy_from(&(i * m4));
    phi.fixed_view_mut::<3, 3>(6, 0).copy_from(&(i * (epsilon * m4)));
    phi.fixed_view_mut::<3, 3>(6, 3).copy_from(&(-i * (epsilon * m4)));
    phi.fixed_view_mut::<3, 3>(6, 6).copy_from(&(i * (1.0 + m3 - rho * m4)));
    SkeletonTransition { phi, m3, m4, epsilon, rho }
}

/// Gaussian propagation of one skeleton component.
pub fn predict_skeleton(
    mu: &SkelVec,
    sigma: &SkelMat,
    tr: &SkeletonTransition,
    w: &SkelMat,
    dt: f64,
) -> Result<(SkelVec, SkelMat)> {
    let s = propagate(sigma, &tr.phi, w, dt, "skeleton covariance")?;
    Ok((tr.phi * mu, s))
}
