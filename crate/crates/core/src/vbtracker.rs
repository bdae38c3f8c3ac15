//! Recursive filter: Gaussian beliefs over the kinematic error state and the
//! skeleton components, the time update, and the mean-field variational
//! measurement update.
//!
//! The pose error `δθ` lives in the additive rotation-vector chart
//! (`θ = θ_ref + δθ`), which is the chart the measurement Jacobians use.
//! The transition `Φ` acts on left-multiplicative errors, so [`predict`]
//! maps the covariance through `J_l(θ)` before and `J_l(θ')⁻¹` after it.

use crate::fmath::ln;
use crate::measurements::{FrameMeasurements, KeypointKind};
use crate::motion::{
    error_transition, predict_reference, propagate, skeleton_transition, ErrMat, ErrVec,
    KinematicState, SkelMat, SkelVec, ERR_DIM, IP, ITH, IV, IXI,
};
use crate::rotkit::{cross_quadratic, left_jacobian, left_jacobian_inv, skew, star_contract, wrap_rotvec};
use crate::sensors::{
    angular_velocity_constraint, corner_matrix, corner_measurement, ground_constraint,
    knot_measurement, mirror, rigid_transform, sgw_weights, CameraIntrinsics, GroundPlane,
    LinearizedMeasurement, SkeletonTemplate,
};
use crate::{Error, Mat3, Result, Vec2, Vec3};
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{Matrix2, SMatrix, SVector};

/// Reference-state prediction model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum MotionModel {
    /// Constant turn rate and velocity.
    #[default]
    Ctrv,
    /// Constant velocity: the angular velocity is ignored when predicting.
    Cv,
}

/// Switches for the pseudo-measurements.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Constraints {
    pub rotation: bool,
    pub ground: bool,
    pub symmetry: bool,
}

impl Default for Constraints {
    fn default() -> Self {
        Self { rotation: true, ground: true, symmetry: true }
    }
}

/// Initial uncertainty and fallbacks for [`init_track`].
#[derive(Debug, Clone, PartialEq)]
pub struct InitConfig {
    /// Diagonal of the initial error covariance.
    pub p_diag: ErrVec,
    /// Standard deviations of reflector, knot and knot-velocity components.
    pub sigma_u: f64,
    pub sigma_knot: f64,
    pub sigma_vel: f64,
    /// Initial speed, m/s.
    pub speed: f64,
    /// Heading in the sensor frame when corner keypoints cannot provide one.
    pub heading: Option<Vec3>,
    /// Bottom size when corner keypoints cannot provide one.
    pub xi: Vec2,
}

impl Default for InitConfig {
    fn default() -> Self {
        let mut p = ErrVec::zeros();
        p.fixed_rows_mut::<3>(IP).fill(1.0);
        p[IV] = 25.0;
        p.fixed_rows_mut::<3>(ITH).fill(0.05);
        p.fixed_rows_mut::<3>(7).fill(0.01);
        p.fixed_rows_mut::<2>(IXI).fill(0.25);
        Self { p_diag: p, sigma_u: 0.7, sigma_knot: 0.3, sigma_vel: 0.3, speed: 0.0, heading: None, xi: Vec2::new(4.5, 1.8) }
    }
}

/// Every tunable of the filter.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    /// Radar noise.
    pub q: Mat3,
    /// Knot keypoint noise.
    pub q_cb: Matrix2<f64>,
    /// Corner keypoint noise.
    pub q_cg: Matrix2<f64>,
    pub q_rot: f64,
    pub q_grnd: f64,
    pub q_sym: Mat3,
    /// SGW lobe sharpness.
    pub lambda: f64,
    /// Spring constant, 1/s².
    pub epsilon: f64,
    /// Damping, 1/s.
    pub rho: f64,
    pub n_vb: usize,
    pub w: ErrMat,
    pub w_theta: SkelMat,
    pub camera: CameraIntrinsics,
    pub ground: GroundPlane,
    /// Radar components with less responsibility mass are skipped.
    pub n_min: f64,
    /// Ridge added to every information matrix before inversion.
    pub reg: f64,
    pub motion: MotionModel,
    pub es_fusion: bool,
    pub constraints: Constraints,
    pub init: InitConfig,
}

impl Default for Hyperparams {
    fn default() -> Self {
        let w = ErrVec::from_column_slice(&[0.0, 0.0, 0.0, 0.01, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.1, 0.1]);
        Self {
            q: Mat3::identity() * 0.5,
            q_cb: Matrix2::identity() * 5.0,
            q_cg: Matrix2::identity() * 5.0,
            q_rot: 0.1,
            q_grnd: 1e-4,
            q_sym: Mat3::identity() * 0.05,
            lambda: 1.0,
            epsilon: 100.0,
            rho: 20.0,
            n_vb: 3,
            w: ErrMat::from_diagonal(&w),
            w_theta: SkelMat::identity(),
            camera: CameraIntrinsics::default(),
            ground: GroundPlane { n: Vec3::new(0.0, -1.0, 0.0), d: 1.5 },
            n_min: 1e-6,
            reg: 1e-9,
            motion: MotionModel::Ctrv,
            es_fusion: true,
            constraints: Constraints::default(),
            init: InitConfig::default(),
        }
    }
}

/// `x = x_ref ⊕ δx` with `δx ~ N(δx̂, P)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KinematicBelief {
    pub x_ref: KinematicState,
    pub dx: ErrVec,
    pub p: ErrMat,
}

impl KinematicBelief {
    /// Posterior mean of the state.
    pub fn mean(&self) -> KinematicState {
        self.x_ref.plus(&self.dx)
    }
}

/// Independent Gaussians over `ϑ_t = [u_t, ϖ_t, v_t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonBelief {
    pub mu: Vec<SkelVec>,
    pub sigma: Vec<SkelMat>,
    /// Left-right partner of every component.
    pub sym: Vec<usize>,
}

impl SkeletonBelief {
    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    /// Mean reflector position (VCS).
    pub fn reflector(&self, t: usize) -> Vec3 {
        self.mu[t].fixed_rows::<3>(0).into_owned()
    }

    /// Mean knot position (VCS).
    pub fn knot(&self, t: usize) -> Vec3 {
        self.mu[t].fixed_rows::<3>(3).into_owned()
    }

    pub fn reflector_cov(&self, t: usize) -> Mat3 {
        self.sigma[t].fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn knot_cov(&self, t: usize) -> Mat3 {
        self.sigma[t].fixed_view::<3, 3>(3, 3).into_owned()
    }

    pub fn reflectors(&self) -> Vec<Vec3> {
        (0..self.len()).map(|t| self.reflector(t)).collect()
    }

    pub fn knots(&self) -> Vec<Vec3> {
        (0..self.len()).map(|t| self.knot(t)).collect()
    }
}

/// Association posteriors and the radar sufficient statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    /// `υ[i][t]`, rows sum to one.
    pub upsilon: Vec<Vec<f64>>,
    pub n: Vec<f64>,
    pub zbar: Vec<Vec3>,
    pub scatter: Vec<Mat3>,
    pub active: Vec<bool>,
}

// Moments of a radar return generated by component t under the current
// beliefs: mean and covariance of ζ_t.
#[derive(Debug, Clone)]
struct ReturnMoments {
    mean: Vec<Vec3>,
    cov: Vec<Mat3>,
}

// Frequently used pieces of the kinematic belief.
struct KinParts {
    r: Mat3,
    /// (I + [J δθ̂]×) R
    b: Mat3,
    /// p_ref + δp̂
    p_mean: Vec3,
    ppp: Mat3,
    /// J Pθθ Jᵀ
    cw: Mat3,
    /// J Pθp
    cwp: Mat3,
}

impl KinParts {
    fn new(kb: &KinematicBelief) -> Self {
        let r = kb.x_ref.rot();
        let j = left_jacobian(&kb.x_ref.theta);
        let w = j * kb.dx.fixed_rows::<3>(ITH);
        let pth = kb.p.fixed_view::<3, 3>(ITH, ITH).into_owned();
        let pthp = kb.p.fixed_view::<3, 3>(ITH, IP).into_owned();
        Self {
            r,
            b: (Mat3::identity() + skew(&w)) * r,
            p_mean: kb.x_ref.p + kb.dx.fixed_rows::<3>(IP),
            ppp: kb.p.fixed_view::<3, 3>(IP, IP).into_owned(),
            cw: j * pth * j.transpose(),
            cwp: j * pthp,
        }
    }
}

fn return_moments(kb: &KinematicBelief, sb: &SkeletonBelief) -> ReturnMoments {
    let k = KinParts::new(kb);
    let mut mean = Vec::with_capacity(sb.len());
    let mut cov = Vec::with_capacity(sb.len());
    for t in 0..sb.len() {
        let ubar = sb.reflector(t);
        let c = sb.reflector_cov(t);
        let s = k.r * c * k.r.transpose();
        let y = skew(&(k.r * ubar));
        let ycwp = y * k.cwp;
        let cv = k.ppp - ycwp - ycwp.transpose()
            + y * k.cw * y.transpose()
            + k.b * c * k.b.transpose()
            + cross_quadratic(&k.cw, &s);
        mean.push(k.p_mean + k.b * ubar);
        cov.push((cv + cv.transpose()) * 0.5);
    }
    ReturnMoments { mean, cov }
}

fn inverse3(m: &Mat3, what: &'static str) -> Result<Mat3> {
    m.cholesky().map(|c| c.inverse()).ok_or(Error::NotPositiveDefinite(what))
}

// Solves Λ y = η with Λ ← Λ + reg I, escalating the ridge if Cholesky fails.
fn solve_info<const D: usize>(
    lambda: &SMatrix<f64, D, D>,
    eta: &SVector<f64, D>,
    reg: f64,
    escalations: &mut u32,
    what: &'static str,
) -> Result<(SVector<f64, D>, SMatrix<f64, D, D>)> {
    let sym = (lambda + lambda.transpose()) * 0.5;
    let scale = sym.diagonal().amax().max(1.0);
    let mut r = reg;
    for attempt in 0..8 {
        let m = sym + SMatrix::<f64, D, D>::identity() * r;
        if let Some(ch) = m.cholesky() {
            let cov = ch.inverse();
            return Ok((ch.solve(eta), (cov + cov.transpose()) * 0.5));
        }
        if attempt == 0 {
            *escalations += 1;
        }
        r = if r > 0.0 { r * 100.0 } else { 1e-12 * scale };
    }
    Err(Error::NotPositiveDefinite(what))
}

/// Central direction of a pixel in the sensor frame (unnormalized, z = 1).
pub fn back_project(k: &CameraIntrinsics, px: &Vec2) -> Vec3 {
    Vec3::new((px.x - k.u0) / k.fx, (px.y - k.v0) / k.fy, 1.0)
}

/// Intersection of the pixel ray with the ground plane, if in front.
pub fn ground_point(k: &CameraIntrinsics, plane: &GroundPlane, px: &Vec2) -> Option<Vec3> {
    let d = back_project(k, px);
    let nd = plane.n.dot(&d);
    if nd.abs() < 1e-12 {
        return None;
    }
    let s = -plane.d / nd;
    (s > 0.0).then(|| d * s)
}

/// Rotation vector of the frame with forward `f` and up `n`.
pub fn pose_from_heading(f: &Vec3, n: &Vec3) -> Result<Vec3> {
    let fp = f - n * n.dot(f);
    let fnorm = fp.norm();
    if fnorm < 1e-9 {
        return Err(Error::Invalid("heading is parallel to the ground normal"));
    }
    let x = fp / fnorm;
    let y = n.cross(&x);
    let r = Mat3::from_columns(&[x, y, *n]);
    Ok(crate::rotkit::Quat::from_rot(&r).log())
}

/// Initial beliefs from a single frame.
///
/// Position is the radar centroid dropped onto the ground plane. When corner
/// keypoints are present they are back-projected onto the plane: opposite
/// corners give the heading and bottom size, and the corner set gives the
/// center, which then replaces the radar estimate.
pub fn init_track(
    frame: &FrameMeasurements,
    template: &SkeletonTemplate,
    hp: &Hyperparams,
) -> Result<(KinematicBelief, SkeletonBelief)> {
    if frame.radar.is_empty() {
        return Err(Error::InsufficientMeasurements { radar: frame.radar.len(), keypoints: frame.keypoints.len() });
    }
    let plane = &hp.ground;
    let centroid = frame.radar.iter().fold(Vec3::zeros(), |a, z| a + z) / frame.radar.len() as f64;
    let mut p0 = plane.project(&centroid);

    let mut corners: [Option<Vec3>; 5] = [None; 5];
    for kp in frame.corners() {
        if (1..=4).contains(&kp.id) && corners[kp.id].is_none() {
            corners[kp.id] = ground_point(&hp.camera, plane, &kp.pixel);
        }
    }
    let diff = |a: usize, b: usize| match (corners[a], corners[b]) {
        (Some(x), Some(y)) => Some(x - y),
        _ => None,
    };
    // forward: front minus rear on each side; left: left minus right at each end
    let fwd: Vec<Vec3> = [diff(1, 4), diff(2, 3)].into_iter().flatten().collect();
    let left: Vec<Vec3> = [diff(1, 2), diff(4, 3)].into_iter().flatten().collect();
    let mut xi = hp.init.xi;
    let heading = if !fwd.is_empty() {
        let f = fwd.iter().fold(Vec3::zeros(), |a, v| a + v);
        xi.x = fwd.iter().map(|v| v.norm()).sum::<f64>() / fwd.len() as f64;
        Some(f)
    } else if !left.is_empty() {
        let l = left.iter().fold(Vec3::zeros(), |a, v| a + v);
        Some(l.cross(&plane.n))
    } else {
        None
    };
    if !left.is_empty() {
        xi.y = left.iter().map(|v| v.norm()).sum::<f64>() / left.len() as f64;
    }
    let heading = heading
        .or(hp.init.heading)
        .unwrap_or_else(|| Vec3::z() - plane.n * plane.n.z);
    let theta = pose_from_heading(&heading, &plane.n)?;
    let r = crate::rotkit::rot_from_rotvec(&theta);

    let known: Vec<(usize, Vec3)> = (1..=4).filter_map(|i| corners[i].map(|c| (i, c))).collect();
    if known.len() >= 3 {
        let mut c = Vec3::zeros();
        for (i, pt) in &known {
            c += pt - r * (corner_matrix(*i)? * xi);
        }
        p0 = plane.project(&(c / known.len() as f64));
    }

    let x_ref = KinematicState { p: p0, v: hp.init.speed, theta, omega: Vec3::zeros(), xi };
    let kb = KinematicBelief { x_ref, dx: ErrVec::zeros(), p: ErrMat::from_diagonal(&hp.init.p_diag) };

    let shaped = template.scaled_to(&xi);
    let mut diag = SkelVec::zeros();
    diag.fixed_rows_mut::<3>(0).fill(hp.init.sigma_u * hp.init.sigma_u);
    diag.fixed_rows_mut::<3>(3).fill(hp.init.sigma_knot * hp.init.sigma_knot);
    diag.fixed_rows_mut::<3>(6).fill(hp.init.sigma_vel * hp.init.sigma_vel);
    let mu = shaped
        .knots
        .iter()
        .map(|k| {
            let mut m = SkelVec::zeros();
            m.fixed_rows_mut::<3>(0).copy_from(k);
            m.fixed_rows_mut::<3>(3).copy_from(k);
            m
        })
        .collect();
    let sb = SkeletonBelief { mu, sigma: vec![SkelMat::from_diagonal(&diag); template.len()], sym: template.sym.clone() };
    Ok((kb, sb))
}

// blockdiag(I₃, 1, J_l(θ), I₃, I₂): additive-chart error to left error.
fn chart_to_left(theta: &Vec3) -> ErrMat {
    let mut t = ErrMat::identity();
    t.fixed_view_mut::<3, 3>(ITH, ITH).copy_from(&left_jacobian(theta));
    t
}

fn chart_from_left(theta: &Vec3) -> ErrMat {
    let mut t = ErrMat::identity();
    t.fixed_view_mut::<3, 3>(ITH, ITH).copy_from(&left_jacobian_inv(theta));
    t
}

/// Time update of both beliefs.
pub fn predict(
    kb: &KinematicBelief,
    sb: &SkeletonBelief,
    dt: f64,
    hp: &Hyperparams,
) -> Result<(KinematicBelief, SkeletonBelief)> {
    if dt == 0.0 {
        return Ok((kb.clone(), sb.clone()));
    }
    let xm = match hp.motion {
        MotionModel::Ctrv => kb.x_ref,
        MotionModel::Cv => kb.x_ref.without_rotation(),
    };
    let mut x_new = predict_reference(&xm, dt);
    x_new.omega = kb.x_ref.omega;
    let tr = error_transition(&xm, dt);
    let t0 = chart_to_left(&kb.x_ref.theta);
    let t1 = chart_from_left(&x_new.theta);
    let p_left = t0 * kb.p * t0.transpose();
    let p_left = propagate(&((p_left + p_left.transpose()) * 0.5), &tr.phi, &hp.w, dt, "error-state covariance")?;
    let p = t1 * p_left * t1.transpose();
    let kb_new = KinematicBelief { x_ref: x_new, dx: t1 * tr.phi * t0 * kb.dx, p: (p + p.transpose()) * 0.5 };

    let eps = if hp.es_fusion { hp.epsilon } else { 0.0 };
    let st = skeleton_transition(eps, hp.rho, dt);
    let mut out = sb.clone();
    for t in 0..sb.len() {
        let (m, s) = crate::motion::predict_skeleton(&sb.mu[t], &sb.sigma[t], &st, &hp.w_theta, dt)?;
        out.mu[t] = m;
        out.sigma[t] = s;
    }
    Ok((kb_new, out))
}

/// Mixture weights from the reference state and the current reflector means.
pub fn mixture_weights(kb: &KinematicBelief, sb: &SkeletonBelief, hp: &Hyperparams) -> Result<Vec<f64>> {
    sgw_weights(&kb.x_ref, &sb.reflectors(), hp.lambda)
}

/// Association posteriors `υ_it ∝ π_t exp(-½ E‖z_i - ζ_t‖²_{Q⁻¹})`, with
/// the expectation taken exactly under the current beliefs.
pub fn compute_responsibilities(
    kb: &KinematicBelief,
    sb: &SkeletonBelief,
    radar: &[Vec3],
    pi: &[f64],
    hp: &Hyperparams,
) -> Result<Responsibilities> {
    let t_n = sb.len();
    if pi.len() != t_n {
        return Err(Error::LengthMismatch { expected: t_n, found: pi.len() });
    }
    let qi = inverse3(&hp.q, "Q")?;
    let mom = return_moments(kb, sb);
    let tr: Vec<f64> = mom.cov.iter().map(|c| (qi * c).trace()).collect();
    let upsilon = radar
        .iter()
        .map(|z| {
            let logs: Vec<f64> = (0..t_n)
                .map(|t| {
                    let d = z - mom.mean[t];
                    ln(pi[t]) - 0.5 * (d.dot(&(qi * d)) + tr[t])
                })
                .collect();
            let mx = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = logs.iter().map(|l| crate::fmath::exp(l - mx)).collect();
            let s: f64 = ex.iter().sum();
            ex.into_iter().map(|e| e / s).collect()
        })
        .collect();
    Ok(Responsibilities {
        upsilon,
        n: vec![0.0; t_n],
        zbar: vec![Vec3::zeros(); t_n],
        scatter: vec![Mat3::zeros(); t_n],
        active: vec![false; t_n],
    })
}

/// Fills `n_t`, `z̄_t`, `Z̄_t` and the activity flags from `υ`.
pub fn radar_sufficient_stats(resp: &mut Responsibilities, radar: &[Vec3], n_min: f64) {
    let t_n = resp.n.len();
    for t in 0..t_n {
        let n: f64 = resp.upsilon.iter().map(|row| row[t]).sum();
        resp.n[t] = n;
        resp.active[t] = n >= n_min;
        if n <= 0.0 {
            resp.zbar[t] = Vec3::zeros();
            resp.scatter[t] = Mat3::zeros();
            continue;
        }
        let zbar = resp.upsilon.iter().zip(radar).fold(Vec3::zeros(), |a, (row, z)| a + z * row[t]) / n;
        let scatter = resp.upsilon.iter().zip(radar).fold(Mat3::zeros(), |a, (row, z)| {
            let d = z - zbar;
            a + d * d.transpose() * row[t]
        });
        resp.zbar[t] = zbar;
        resp.scatter[t] = scatter;
    }
}

/// Per-frame linearized keypoint and constraint terms on `δx`.
struct KinematicTerms {
    rows2: Vec<LinearizedMeasurement<2>>,
    rows1: Vec<LinearizedMeasurement<1>>,
}

fn kinematic_terms(
    x: &KinematicState,
    sb: &SkeletonBelief,
    frame: &FrameMeasurements,
    hp: &Hyperparams,
) -> Result<KinematicTerms> {
    let mut rows2 = Vec::new();
    for kp in &frame.keypoints {
        let m = match kp.kind {
            KeypointKind::Knot if kp.id < sb.len() => {
                knot_measurement(x, &sb.knot(kp.id), &kp.pixel, &hp.camera, &hp.q_cb)
            }
            KeypointKind::Corner => corner_measurement(x, kp.id, &kp.pixel, &hp.camera, &hp.q_cg),
            KeypointKind::Knot => continue,
        };
        match m {
            Ok(m) => rows2.push(m),
            Err(Error::BehindCamera { .. }) | Err(Error::InvalidCorner(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    let mut rows1 = Vec::new();
    if hp.constraints.rotation {
        rows1.push(angular_velocity_constraint(x, hp.q_rot));
    }
    if hp.constraints.ground {
        for id in 1..=4 {
            rows1.push(ground_constraint(x, &hp.ground, id, hp.q_grnd)?);
        }
    }
    Ok(KinematicTerms { rows2, rows1 })
}

fn add_rows<const M: usize>(lam: &mut ErrMat, eta: &mut ErrVec, m: &LinearizedMeasurement<M>) -> Result<()> {
    let ni = m
        .noise
        .cholesky()
        .map(|c| c.inverse())
        .ok_or(Error::NotPositiveDefinite("measurement noise"))?;
    let ht = m.h_x.transpose();
    *lam += ht * ni * m.h_x;
    *eta += ht * ni * m.residual;
    Ok(())
}

/// Kinematic factor update. `prior` is the predicted belief (zero error
/// mean); `sb` and `stats` are the current skeleton and association factors.
pub fn update_kinematic(
    prior: &KinematicBelief,
    sb: &SkeletonBelief,
    stats: &Responsibilities,
    frame: &FrameMeasurements,
    hp: &Hyperparams,
) -> Result<KinematicBelief> {
    let mut esc = 0;
    update_kinematic_counted(prior, sb, stats, frame, hp, &mut esc)
}

fn update_kinematic_counted(
    prior: &KinematicBelief,
    sb: &SkeletonBelief,
    stats: &Responsibilities,
    frame: &FrameMeasurements,
    hp: &Hyperparams,
    esc: &mut u32,
) -> Result<KinematicBelief> {
    let x = &prior.x_ref;
    let p_inv = prior
        .p
        .cholesky()
        .map(|c| c.inverse())
        .ok_or(Error::NotPositiveDefinite("prior error-state covariance"))?;
    let mut lam = p_inv;
    let mut eta = p_inv * prior.dx;

    let qi = inverse3(&hp.q, "Q")?;
    let r = x.rot();
    let j = left_jacobian(&x.theta);
    for t in 0..sb.len() {
        if !stats.active[t] {
            continue;
        }
        let n = qi * stats.n[t];
        let ru = r * sb.reflector(t);
        let s = r * sb.reflector_cov(t) * r.transpose();
        let mut h1 = SMatrix::<f64, 3, ERR_DIM>::zeros();
        h1.fixed_view_mut::<3, 3>(0, IP).copy_from(&Mat3::identity());
        h1.fixed_view_mut::<3, 3>(0, ITH).copy_from(&(-skew(&ru) * j));
        let res = stats.zbar[t] - ru - x.p;
        lam += h1.transpose() * n * h1;
        eta += h1.transpose() * n * res;
        let k = j.transpose() * cross_quadratic(&n, &s) * j;
        let mut blk = lam.fixed_view_mut::<3, 3>(ITH, ITH);
        blk += k;
        let mut e = eta.fixed_rows_mut::<3>(ITH);
        e += j.transpose() * star_contract(&n, &s);
    }

    let terms = kinematic_terms(x, sb, frame, hp)?;
    for m in &terms.rows2 {
        add_rows(&mut lam, &mut eta, m)?;
    }
    for m in &terms.rows1 {
        add_rows(&mut lam, &mut eta, m)?;
    }
    let (dx, p) = solve_info(&lam, &eta, hp.reg, esc, "kinematic information matrix")?;
    Ok(KinematicBelief { x_ref: prior.x_ref, dx, p })
}

/// Skeleton factor update, one component at a time in index order. Partner
/// knots for the symmetry term are taken from the already-updated entries.
pub fn update_skeleton(
    prior: &SkeletonBelief,
    current: &SkeletonBelief,
    kb: &KinematicBelief,
    stats: &Responsibilities,
    frame: &FrameMeasurements,
    hp: &Hyperparams,
) -> Result<SkeletonBelief> {
    let mut esc = 0;
    update_skeleton_counted(prior, current, kb, stats, frame, hp, &mut esc)
}

fn update_skeleton_counted(
    prior: &SkeletonBelief,
    current: &SkeletonBelief,
    kb: &KinematicBelief,
    stats: &Responsibilities,
    frame: &FrameMeasurements,
    hp: &Hyperparams,
    esc: &mut u32,
) -> Result<SkeletonBelief> {
    let qi = inverse3(&hp.q, "Q")?;
    let qsi = inverse3(&hp.q_sym, "Q_sym")?;
    let qcbi = hp.q_cb.cholesky().map(|c| c.inverse()).ok_or(Error::NotPositiveDefinite("Q_cb"))?;
    let d = mirror();
    let k = KinParts::new(kb);
    let x = &kb.x_ref;
    let h = k.p_mean;

    let mut out = current.clone();
    for t in 0..prior.len() {
        let s_inv = prior.sigma[t]
            .cholesky()
            .map(|c| c.inverse())
            .ok_or(Error::NotPositiveDefinite("prior skeleton covariance"))?;
        let mut lam = s_inv;
        let mut eta = s_inv * prior.mu[t];

        if stats.active[t] {
            let n = qi * stats.n[t];
            let quad = k.b.transpose() * n * k.b + k.r.transpose() * cross_quadratic(&n, &k.cw) * k.r;
            let lin = k.b.transpose() * n * (stats.zbar[t] - h) - k.r.transpose() * star_contract(&n, &k.cwp);
            let mut blk = lam.fixed_view_mut::<3, 3>(0, 0);
            blk += quad;
            let mut e = eta.fixed_rows_mut::<3>(0);
            e += lin;
        }

        if hp.constraints.symmetry {
            let s = current.sym[t];
            let (quad, lin) = if s == t {
                let a = Mat3::identity() - d;
                (a.transpose() * qsi * a, Vec3::zeros())
            } else {
                let wgt = qsi + d * qsi * d;
                (wgt, wgt * d * out.knot(s))
            };
            let mut blk = lam.fixed_view_mut::<3, 3>(3, 3);
            blk += quad;
            let mut e = eta.fixed_rows_mut::<3>(3);
            e += lin;
        }

        let phi = current.knot(t);
        for kp in frame.knots().filter(|kp| kp.id == t) {
            let m = match knot_measurement(x, &phi, &kp.pixel, &hp.camera, &hp.q_cb) {
                Ok(m) => m,
                Err(Error::BehindCamera { .. }) => continue,
                Err(e) => return Err(e),
            };
            let hw = m.h_aux.unwrap_or_default();
            let target = m.residual - m.h_x * kb.dx + hw * phi;
            let mut blk = lam.fixed_view_mut::<3, 3>(3, 3);
            blk += hw.transpose() * qcbi * hw;
            let mut e = eta.fixed_rows_mut::<3>(3);
            e += hw.transpose() * qcbi * target;
        }

        let (mu, sigma) = solve_info(&lam, &eta, hp.reg, esc, "skeleton information matrix")?;
        out.mu[t] = mu;
        out.sigma[t] = sigma;
    }
    Ok(out)
}

/// Folds the error mean into the reference: additive for every block, then
/// the rotation vector is wrapped back to `‖θ‖ ≤ π`. When the wrap changes
/// `θ`, the pose block of `P` is mapped to the new chart.
pub fn rebase(kb: &KinematicBelief) -> KinematicBelief {
    let moved = kb.x_ref.plus(&kb.dx);
    let wrapped = wrap_rotvec(&moved.theta);
    let mut p = kb.p;
    if (wrapped - moved.theta).amax() > 1e-12 {
        let mut t = ErrMat::identity();
        t.fixed_view_mut::<3, 3>(ITH, ITH)
            .copy_from(&(left_jacobian_inv(&wrapped) * left_jacobian(&moved.theta)));
        p = t * p * t.transpose();
        p = (p + p.transpose()) * 0.5;
    }
    KinematicBelief { x_ref: KinematicState { theta: wrapped, ..moved }, dx: ErrVec::zeros(), p }
}

/// Variational free energy (negative evidence lower bound, up to constants
/// that do not depend on the beliefs) of the current factors.
///
/// `lin` holds the knot linearization points used by the keypoint terms.
#[allow(clippy::too_many_arguments)]
pub fn free_energy(
    kb_prior: &KinematicBelief,
    sb_prior: &SkeletonBelief,
    kb: &KinematicBelief,
    sb: &SkeletonBelief,
    pi: &[f64],
    resp: &Responsibilities,
    lin: &[Vec3],
    frame: &FrameMeasurements,
    hp: &Hyperparams,
) -> Result<f64> {
    let logdet = |m: &ErrMat| -> Result<f64> {
        let c = m.cholesky().ok_or(Error::NotPositiveDefinite("posterior covariance"))?;
        Ok(2.0 * c.l().diagonal().iter().map(|v| ln(*v)).sum::<f64>())
    };
    let logdet9 = |m: &SkelMat| -> Result<f64> {
        let c = m.cholesky().ok_or(Error::NotPositiveDefinite("posterior covariance"))?;
        Ok(2.0 * c.l().diagonal().iter().map(|v| ln(*v)).sum::<f64>())
    };
    let mut f = 0.0;

    let p0i = kb_prior.p.cholesky().ok_or(Error::NotPositiveDefinite("prior"))?.inverse();
    let dm = kb.dx - kb_prior.dx;
    f += 0.5 * (dm.dot(&(p0i * dm)) + (p0i * kb.p).trace() - logdet(&kb.p)?);
    f += 0.5 * hp.reg * (kb.dx.norm_squared() + kb.p.trace());

    for t in 0..sb.len() {
        let s0i = sb_prior.sigma[t].cholesky().ok_or(Error::NotPositiveDefinite("prior"))?.inverse();
        let dm = sb.mu[t] - sb_prior.mu[t];
        f += 0.5 * (dm.dot(&(s0i * dm)) + (s0i * sb.sigma[t]).trace() - logdet9(&sb.sigma[t])?);
        f += 0.5 * hp.reg * (sb.mu[t].norm_squared() + sb.sigma[t].trace());
    }

    let qi = inverse3(&hp.q, "Q")?;
    let mom = return_moments(kb, sb);
    for (z, row) in frame.radar.iter().zip(&resp.upsilon) {
        for t in 0..sb.len() {
            let u = row[t];
            if u <= 0.0 {
                continue;
            }
            let d = z - mom.mean[t];
            let e = d.dot(&(qi * d)) + (qi * mom.cov[t]).trace();
            f += u * (ln(u) - ln(pi[t])) + 0.5 * u * e;
        }
    }

    let x = &kb.x_ref;
    let qcbi = hp.q_cb.cholesky().ok_or(Error::NotPositiveDefinite("Q_cb"))?.inverse();
    let qcgi = hp.q_cg.cholesky().ok_or(Error::NotPositiveDefinite("Q_cg"))?.inverse();
    for kp in &frame.keypoints {
        match kp.kind {
            KeypointKind::Knot if kp.id < sb.len() => {
                let Ok(m) = knot_measurement(x, &lin[kp.id], &kp.pixel, &hp.camera, &hp.q_cb) else { continue };
                let hw = m.h_aux.unwrap_or_default();
                let r = m.residual - m.h_x * kb.dx - hw * (sb.knot(kp.id) - lin[kp.id]);
                f += 0.5
                    * (r.dot(&(qcbi * r))
                        + (m.h_x.transpose() * qcbi * m.h_x * kb.p).trace()
                        + (hw.transpose() * qcbi * hw * sb.knot_cov(kp.id)).trace());
            }
            KeypointKind::Corner => {
                let Ok(m) = corner_measurement(x, kp.id, &kp.pixel, &hp.camera, &hp.q_cg) else { continue };
                let r = m.residual - m.h_x * kb.dx;
                f += 0.5 * (r.dot(&(qcgi * r)) + (m.h_x.transpose() * qcgi * m.h_x * kb.p).trace());
            }
            KeypointKind::Knot => {}
        }
    }
    let mut scalar = |m: &LinearizedMeasurement<1>| {
        let r = m.residual[0] - (m.h_x * kb.dx)[0];
        let hph = (m.h_x * kb.p * m.h_x.transpose())[0];
        f += 0.5 * (r * r + hph) / m.noise[0];
    };
    if hp.constraints.rotation {
        scalar(&angular_velocity_constraint(x, hp.q_rot));
    }
    if hp.constraints.ground {
        for id in 1..=4 {
            scalar(&ground_constraint(x, &hp.ground, id, hp.q_grnd)?);
        }
    }
    if hp.constraints.symmetry {
        let qsi = inverse3(&hp.q_sym, "Q_sym")?;
        let d = mirror();
        for t in 0..sb.len() {
            let s = sb.sym[t];
            let (r, c) = if s == t {
                let a = Mat3::identity() - d;
                (a * sb.knot(t), a * sb.knot_cov(t) * a.transpose())
            } else {
                (sb.knot(s) - d * sb.knot(t), sb.knot_cov(s) + d * sb.knot_cov(t) * d)
            };
            f += 0.5 * (r.dot(&(qsi * r)) + (qsi * c).trace());
        }
    }
    Ok(f)
}

/// Diagnostics of one variational update.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VbReport {
    /// Largest `|Σ_t υ_it - 1|` over all iterations.
    pub row_sum_error: f64,
    /// Largest `|Σ_t π_t - 1|` over all iterations.
    pub weight_sum_error: f64,
    /// Number of information solves that needed a larger ridge.
    pub regularized: u32,
    /// Free energy after each iteration, when requested.
    pub free_energy: Vec<f64>,
    /// Final responsibilities, if any iteration ran.
    pub responsibilities: Option<Responsibilities>,
}

/// `N_vb` rounds of coordinate ascent followed by [`rebase`].
pub fn vb_update(
    kb: &KinematicBelief,
    sb: &SkeletonBelief,
    frame: &FrameMeasurements,
    hp: &Hyperparams,
) -> Result<(KinematicBelief, SkeletonBelief, VbReport)> {
    vb_update_traced(kb, sb, frame, hp, false)
}

/// [`vb_update`], optionally recording the free energy after every round.
pub fn vb_update_traced(
    kb0: &KinematicBelief,
    sb0: &SkeletonBelief,
    frame: &FrameMeasurements,
    hp: &Hyperparams,
    trace: bool,
) -> Result<(KinematicBelief, SkeletonBelief, VbReport)> {
    let mut report = VbReport::default();
    let mut kb = kb0.clone();
    let mut sb = sb0.clone();
    for _ in 0..hp.n_vb {
        let pi = if sb.is_empty() || frame.radar.is_empty() {
            vec![1.0; sb.len()]
        } else {
            mixture_weights(&kb, &sb, hp)?
        };
        if !frame.radar.is_empty() {
            report.weight_sum_error = report.weight_sum_error.max((pi.iter().sum::<f64>() - 1.0).abs());
        }
        let mut resp = compute_responsibilities(&kb, &sb, &frame.radar, &pi, hp)?;
        radar_sufficient_stats(&mut resp, &frame.radar, hp.n_min);
        for row in &resp.upsilon {
            report.row_sum_error = report.row_sum_error.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        let lin = sb.knots();
        kb = update_kinematic_counted(kb0, &sb, &resp, frame, hp, &mut report.regularized)?;
        sb = update_skeleton_counted(sb0, &sb, &kb, &resp, frame, hp, &mut report.regularized)?;
        if trace {
            report.free_energy.push(free_energy(kb0, sb0, &kb, &sb, &pi, &resp, &lin, frame, hp)?);
        }
        report.responsibilities = Some(resp);
    }
    Ok((rebase(&kb), sb, report))
}

/// Whether a symmetric matrix admits a Cholesky factorization.
pub fn is_spd<const D: usize>(m: &SMatrix<f64, D, D>) -> bool {
    (m - m.transpose()).amax() <= 1e-9 * m.amax().max(1.0) && m.cholesky().is_some()
}

/// Per-frame diagnostics of the [`Tracker`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameReport {
    pub vb: VbReport,
    /// Every posterior covariance passed the SPD check.
    pub covariances_spd: bool,
    /// Largest corner distance to the ground plane after the update.
    pub ground_residual: f64,
}

/// Single-object tracker driving predict and update over a frame sequence.
#[derive(Debug, Clone)]
pub struct Tracker {
    pub hp: Hyperparams,
    pub template: SkeletonTemplate,
    state: Option<(KinematicBelief, SkeletonBelief)>,
    last_t: f64,
}

impl Tracker {
    pub fn new(hp: Hyperparams, template: SkeletonTemplate) -> Self {
        Self { hp, template, state: None, last_t: 0.0 }
    }

    pub fn kinematic(&self) -> Option<&KinematicBelief> {
        self.state.as_ref().map(|s| &s.0)
    }

    pub fn skeleton(&self) -> Option<&SkeletonBelief> {
        self.state.as_ref().map(|s| &s.1)
    }

    /// Current knot means in the sensor frame.
    pub fn knots_scs(&self) -> Option<Vec<Vec3>> {
        let (kb, sb) = self.state.as_ref()?;
        let x = kb.mean();
        Some(sb.knots().iter().map(|k| rigid_transform(&x, k)).collect())
    }

    /// Processes one frame: initialize on the first call, otherwise predict
    /// to the frame time; then run the variational update.
    pub fn step(&mut self, frame: &FrameMeasurements) -> Result<FrameReport> {
        self.step_traced(frame, false)
    }

    pub fn step_traced(&mut self, frame: &FrameMeasurements, trace: bool) -> Result<FrameReport> {
        let (kb, sb) = match self.state.take() {
            None => init_track(frame, &self.template, &self.hp)?,
            Some((kb, sb)) => {
                let dt = frame.t - self.last_t;
                if dt < 0.0 {
                    return Err(Error::Invalid("frames are not in time order"));
                }
                predict(&kb, &sb, dt, &self.hp)?
            }
        };
        let (kb, sb, vb) = vb_update_traced(&kb, &sb, frame, &self.hp, trace)?;
        let covariances_spd = is_spd(&kb.p) && sb.sigma.iter().all(is_spd);
        let x = kb.x_ref;
        let mut ground_residual: f64 = 0.0;
        for id in 1..=4 {
            let c = rigid_transform(&x, &(corner_matrix(id)? * x.xi));
            ground_residual = ground_residual.max(self.hp.ground.residual(&c).abs());
        }
        self.last_t = frame.t;
        self.state = Some((kb, sb));
        Ok(FrameReport { vb, covariances_spd, ground_residual })
    }
}

#[cfg(test)]
mod tests;
