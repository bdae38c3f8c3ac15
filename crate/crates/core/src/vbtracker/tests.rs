use super::*;
use crate::measurements::Keypoint;
use crate::rotkit::{rot_from_rotvec, Quat};
use crate::sensors::{corner_vcs, project_point};
use nalgebra::{DMatrix, DVector, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::vec::Vec as StdVec;

fn rn(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn rvec3(rng: &mut ChaCha8Rng, s: f64) -> Vec3 {
    Vec3::new(rn(rng), rn(rng), rn(rng)) * s
}

fn spd<const D: usize>(rng: &mut ChaCha8Rng, scale: f64) -> SMatrix<f64, D, D> {
    let a = SMatrix::<f64, D, D>::from_fn(|_, _| rn(rng));
    (a * a.transpose() / D as f64 + SMatrix::<f64, D, D>::identity() * 0.2) * scale
}

fn up() -> Vec3 {
    Vec3::new(0.0, -1.0, 0.0)
}

fn hp_scene() -> Hyperparams {
    Hyperparams::default()
}

// Vehicle on the ground ~20 m ahead, small random attitude noise.
fn scene_state(rng: &mut ChaCha8Rng) -> KinematicState {
    let yaw: f64 = rng.random_range(-1.0..1.0);
    let theta = pose_from_heading(&Vec3::new(libm::cos(yaw), 0.0, libm::sin(yaw)), &up()).unwrap();
    let theta = Quat::exp(&rvec3(rng, 0.02)).mul_rotvec(&theta);
    KinematicState {
        p: Vec3::new(rng.random_range(-3.0..3.0), 1.5, rng.random_range(15.0..25.0)),
        v: rng.random_range(2.0..8.0),
        theta,
        omega: rvec3(rng, 0.2),
        xi: Vector2::new(4.5, 1.8) + Vector2::new(rn(rng), rn(rng)) * 0.1,
    }
}

trait MulRotvec {
    fn mul_rotvec(&self, theta: &Vec3) -> Vec3;
}

impl MulRotvec for Quat {
    fn mul_rotvec(&self, theta: &Vec3) -> Vec3 {
        (*self * Quat::exp(theta)).log()
    }
}

fn scene_skeleton(rng: &mut ChaCha8Rng, x: &KinematicState) -> SkeletonBelief {
    let tpl = SkeletonTemplate::car(4.5, 1.8, 1.5).scaled_to(&x.xi);
    let n = 6;
    let mut sym: StdVec<usize> = (0..n).map(|t| t ^ 1).collect();
    sym[5] = 5;
    sym[4] = 4;
    let mu = (0..n)
        .map(|t| {
            let mut m = SkelVec::zeros();
            m.fixed_rows_mut::<3>(0).copy_from(&(tpl.knots[t] + rvec3(rng, 0.1)));
            m.fixed_rows_mut::<3>(3).copy_from(&(tpl.knots[t] + rvec3(rng, 0.1)));
            m.fixed_rows_mut::<3>(6).copy_from(&rvec3(rng, 0.1));
            m
        })
        .collect();
    let sigma = (0..n).map(|_| spd::<9>(rng, 0.05)).collect();
    SkeletonBelief { mu, sigma, sym }
}

fn scene_belief(rng: &mut ChaCha8Rng) -> KinematicBelief {
    let x = scene_state(rng);
    let mut dx = ErrVec::zeros();
    for i in 0..ERR_DIM {
        dx[i] = rn(rng) * 0.05;
    }
    KinematicBelief { x_ref: x, dx, p: spd::<12>(rng, 0.05) }
}

fn scene_frame(rng: &mut ChaCha8Rng, x: &KinematicState, sb: &SkeletonBelief, hp: &Hyperparams) -> FrameMeasurements {
    let radar = (0..8)
        .map(|_| {
            let t = rng.random_range(0..sb.len());
            rigid_transform(x, &sb.reflector(t)) + rvec3(rng, 0.5)
        })
        .collect();
    let mut keypoints = StdVec::new();
    for t in 0..sb.len() {
        let px = project_point(&hp.camera, &rigid_transform(x, &(sb.knot(t) + rvec3(rng, 0.05)))).unwrap();
        keypoints.push(Keypoint::knot(t, px));
    }
    for id in 1..=4 {
        let c = corner_vcs(id, &x.xi).unwrap() + rvec3(rng, 0.03);
        keypoints.push(Keypoint::corner(id, project_point(&hp.camera, &rigid_transform(x, &c)).unwrap()));
    }
    FrameMeasurements { t: 0.0, radar, keypoints }
}

fn random_stats(rng: &mut ChaCha8Rng, t_n: usize, radar: &[Vec3]) -> Responsibilities {
    let upsilon = radar
        .iter()
        .map(|_| {
            let w: StdVec<f64> = (0..t_n).map(|t| if t == 2 { 0.0 } else { rng.random_range(0.01..1.0) }).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|v| v / s).collect()
        })
        .collect();
    let mut r = Responsibilities {
        upsilon,
        n: vec![0.0; t_n],
        zbar: vec![Vec3::zeros(); t_n],
        scatter: vec![Mat3::zeros(); t_n],
        active: vec![false; t_n],
    };
    radar_sufficient_stats(&mut r, radar, 1e-6);
    r
}

// Whitened least-squares system `min ‖A y - b‖²`, solved by QR.
struct Stack {
    rows: StdVec<StdVec<f64>>,
    rhs: StdVec<f64>,
    dim: usize,
}

impl Stack {
    fn new(dim: usize) -> Self {
        Self { rows: StdVec::new(), rhs: StdVec::new(), dim }
    }

    // Adds ‖H y - r‖²_{Σ⁻¹} as whitened rows.
    fn add(&mut self, h: &DMatrix<f64>, r: &DVector<f64>, info: &DMatrix<f64>) {
        let l = info.clone().cholesky().expect("info SPD").l();
        let a = l.transpose() * h;
        let b = l.transpose() * r;
        for i in 0..a.nrows() {
            self.rows.push(a.row(i).iter().copied().collect());
            self.rhs.push(b[i]);
        }
    }

    fn solve(&self) -> (DVector<f64>, DMatrix<f64>) {
        let a = DMatrix::from_fn(self.rows.len(), self.dim, |i, j| self.rows[i][j]);
        let b = DVector::from_vec(self.rhs.clone());
        let qr = a.qr();
        let r = qr.r();
        let qtb = qr.q().transpose() * b;
        let y = r.clone().solve_upper_triangular(&qtb).unwrap();
        let rinv = r.solve_upper_triangular(&DMatrix::identity(self.dim, self.dim)).unwrap();
        (y, &rinv * rinv.transpose())
    }
}

fn dm<const R: usize, const C: usize>(m: &SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_column_slice(R, C, m.as_slice())
}

fn dv<const R: usize>(v: &SVector<f64, R>) -> DVector<f64> {
    DVector::from_column_slice(v.as_slice())
}

fn chol_cols(m: &Mat3) -> [Vec3; 3] {
    let l = m.cholesky().unwrap().l();
    [l.column(0).into_owned(), l.column(1).into_owned(), l.column(2).into_owned()]
}

fn kinematic_oracle(
    prior: &KinematicBelief,
    sb: &SkeletonBelief,
    stats: &Responsibilities,
    frame: &FrameMeasurements,
    hp: &Hyperparams,
) -> (DVector<f64>, DMatrix<f64>) {
    let x = &prior.x_ref;
    let mut st = Stack::new(ERR_DIM);
    let p_inv = dm(&prior.p).try_inverse().unwrap();
    st.add(&DMatrix::identity(12, 12), &dv(&prior.dx), &p_inv);
    let r = x.rot();
    let j = left_jacobian(&x.theta);
    let qi = hp.q.try_inverse().unwrap();
    for t in 0..sb.len() {
        if !stats.active[t] {
            continue;
        }
        let n = qi * stats.n[t];
        let ru = r * sb.reflector(t);
        let mut h = SMatrix::<f64, 3, 12>::zeros();
        h.fixed_view_mut::<3, 3>(0, IP).copy_from(&Mat3::identity());
        h.fixed_view_mut::<3, 3>(0, ITH).copy_from(&(-skew(&ru) * j));
        st.add(&dm(&h), &dv(&(stats.zbar[t] - x.p - ru)), &dm(&n));
        let s = r * sb.reflector_cov(t) * r.transpose();
        for c in chol_cols(&s) {
            let mut a = SMatrix::<f64, 3, 12>::zeros();
            a.fixed_view_mut::<3, 3>(0, ITH).copy_from(&(skew(&c) * j));
            st.add(&dm(&a), &dv(&c), &dm(&n));
        }
    }
    for kp in &frame.keypoints {
        let m = match kp.kind {
            KeypointKind::Knot => knot_measurement(x, &sb.knot(kp.id), &kp.pixel, &hp.camera, &hp.q_cb).unwrap(),
            KeypointKind::Corner => corner_measurement(x, kp.id, &kp.pixel, &hp.camera, &hp.q_cg).unwrap(),
        };
        st.add(&dm(&m.h_x), &dv(&m.residual), &dm(&m.noise.try_inverse().unwrap()));
    }
    let mut scalars = StdVec::new();
    if hp.constraints.rotation {
        scalars.push(angular_velocity_constraint(x, hp.q_rot));
    }
    if hp.constraints.ground {
        for id in 1..=4 {
            scalars.push(ground_constraint(x, &hp.ground, id, hp.q_grnd).unwrap());
        }
    }
    for m in &scalars {
        st.add(&dm(&m.h_x), &dv(&m.residual), &DMatrix::from_element(1, 1, 1.0 / m.noise[0]));
    }
    if hp.reg > 0.0 {
        st.add(&DMatrix::identity(12, 12), &DVector::zeros(12), &(DMatrix::identity(12, 12) * hp.reg));
    }
    st.solve()
}

#[test]
fn kinematic_update_matches_stacked_least_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let mut hp = hp_scene();
        hp.reg = 1e-6;
        let prior = scene_belief(&mut rng);
        let sb = scene_skeleton(&mut rng, &prior.x_ref);
        let frame = scene_frame(&mut rng, &prior.x_ref, &sb, &hp);
        let stats = random_stats(&mut rng, sb.len(), &frame.radar);
        let got = update_kinematic(&prior, &sb, &stats, &frame, &hp).unwrap();
        let (y, p) = kinematic_oracle(&prior, &sb, &stats, &frame, &hp);
        let dy = (dv(&got.dx) - &y).amax();
        let dp = (dm(&got.p) - &p).amax();
        assert!(dy < 1e-8 * (1.0 + y.amax()), "mean {dy}");
        assert!(dp < 1e-8 * (1.0 + p.amax()), "cov {dp}");
    }
}

fn skeleton_oracle(
    prior: &SkeletonBelief,
    current: &SkeletonBelief,
    kb: &KinematicBelief,
    stats: &Responsibilities,
    frame: &FrameMeasurements,
    hp: &Hyperparams,
) -> SkeletonBelief {
    let x = &kb.x_ref;
    let r = x.rot();
    let j = left_jacobian(&x.theta);
    let qi = hp.q.try_inverse().unwrap();
    let qsi = hp.q_sym.try_inverse().unwrap();
    let d = mirror();
    // joint covariance of (δp, J δθ)
    let mut t6 = SMatrix::<f64, 6, 12>::zeros();
    t6.fixed_view_mut::<3, 3>(0, IP).copy_from(&Mat3::identity());
    t6.fixed_view_mut::<3, 3>(3, ITH).copy_from(&j);
    let c6 = t6 * kb.p * t6.transpose();
    let l6 = c6.cholesky().unwrap().l();
    let w = j * kb.dx.fixed_rows::<3>(ITH);
    let b = (Mat3::identity() + skew(&w)) * r;
    let pm = x.p + kb.dx.fixed_rows::<3>(IP);

    let sel = |off: usize| {
        let mut s = DMatrix::zeros(3, 9);
        for i in 0..3 {
            s[(i, off + i)] = 1.0;
        }
        s
    };
    let mut out = current.clone();
    for t in 0..prior.len() {
        let mut st = Stack::new(9);
        st.add(&DMatrix::identity(9, 9), &dv(&prior.mu[t]), &dm(&prior.sigma[t].try_inverse().unwrap()));
        if stats.active[t] {
            let n = dm(&(qi * stats.n[t]));
            st.add(&(dm(&b) * sel(0)), &dv(&(stats.zbar[t] - pm)), &n);
            for k in 0..6 {
                let col = l6.column(k);
                let a = Vec3::new(col[0], col[1], col[2]);
                let bb = Vec3::new(col[3], col[4], col[5]);
                st.add(&(dm(&(skew(&bb) * r)) * sel(0)), &dv(&(-a)), &n);
            }
        }
        if hp.constraints.symmetry {
            let s = prior.sym[t];
            if s == t {
                st.add(&(dm(&(Mat3::identity() - d)) * sel(3)), &DVector::zeros(3), &dm(&qsi));
            } else {
                let partner = out.knot(s);
                st.add(&(dm(&d) * sel(3)), &dv(&partner), &dm(&qsi));
                st.add(&sel(3), &dv(&(d * partner)), &dm(&qsi));
            }
        }
        let phi = current.knot(t);
        for kp in frame.knots().filter(|k| k.id == t) {
            let m = knot_measurement(x, &phi, &kp.pixel, &hp.camera, &hp.q_cb).unwrap();
            let hw = m.h_aux.unwrap();
            let target = m.residual - m.h_x * kb.dx + hw * phi;
            st.add(&(dm(&hw) * sel(3)), &dv(&target), &dm(&hp.q_cb.try_inverse().unwrap()));
        }
        st.add(&DMatrix::identity(9, 9), &DVector::zeros(9), &(DMatrix::identity(9, 9) * hp.reg));
        let (y, p) = st.solve();
        out.mu[t] = SkelVec::from_column_slice(y.as_slice());
        out.sigma[t] = SkelMat::from_column_slice(p.as_slice());
    }
    out
}

#[test]
fn skeleton_update_matches_stacked_least_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let mut hp = hp_scene();
        hp.reg = 1e-6;
        let kb = scene_belief(&mut rng);
        let prior = scene_skeleton(&mut rng, &kb.x_ref);
        let mut current = prior.clone();
        for m in current.mu.iter_mut() {
            let mut k = m.fixed_rows_mut::<3>(3);
            k += rvec3(&mut rng, 0.05);
        }
        let frame = scene_frame(&mut rng, &kb.x_ref, &prior, &hp);
        let stats = random_stats(&mut rng, prior.len(), &frame.radar);
        let got = update_skeleton(&prior, &current, &kb, &stats, &frame, &hp).unwrap();
        let want = skeleton_oracle(&prior, &current, &kb, &stats, &frame, &hp);
        for t in 0..prior.len() {
            let dy = (got.mu[t] - want.mu[t]).amax();
            let dp = (got.sigma[t] - want.sigma[t]).amax();
            assert!(dy < 1e-8 * (1.0 + want.mu[t].amax()), "mean {t}: {dy}");
            assert!(dp < 1e-8 * (1.0 + want.sigma[t].amax()), "cov {t}: {dp}");
        }
    }
}

#[test]
fn single_component_radar_update_is_a_kalman_update() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..50 {
        let mut hp = hp_scene();
        hp.reg = 0.0;
        hp.constraints = Constraints { rotation: false, ground: false, symmetry: false };
        let mut prior = scene_belief(&mut rng);
        prior.dx = ErrVec::zeros();
        let u = rvec3(&mut rng, 1.0);
        let mut mu = SkelVec::zeros();
        mu.fixed_rows_mut::<3>(0).copy_from(&u);
        let sb = SkeletonBelief { mu: vec![mu], sigma: vec![SkelMat::zeros()], sym: vec![0] };
        let z = rigid_transform(&prior.x_ref, &u) + rvec3(&mut rng, 0.7);
        let frame = FrameMeasurements { t: 0.0, radar: vec![z], keypoints: vec![] };
        let mut stats = compute_responsibilities(&prior, &sb, &frame.radar, &[1.0], &hp).unwrap();
        radar_sufficient_stats(&mut stats, &frame.radar, hp.n_min);
        assert_eq!(stats.upsilon[0][0], 1.0);
        let got = update_kinematic(&prior, &sb, &stats, &frame, &hp).unwrap();

        let x = &prior.x_ref;
        let ru = x.rot() * u;
        let mut h = SMatrix::<f64, 3, 12>::zeros();
        h.fixed_view_mut::<3, 3>(0, IP).copy_from(&Mat3::identity());
        h.fixed_view_mut::<3, 3>(0, ITH).copy_from(&(-skew(&ru) * left_jacobian(&x.theta)));
        let innov = z - x.p - ru;
        let s = h * prior.p * h.transpose() + hp.q;
        let k = prior.p * h.transpose() * s.try_inverse().unwrap();
        let dx = k * innov;
        let p = (ErrMat::identity() - k * h) * prior.p;
        assert!((got.dx - dx).amax() < 1e-8 * (1.0 + dx.amax()));
        assert!((got.p - p).amax() < 1e-8 * (1.0 + p.amax()));
    }
}

#[test]
fn responsibilities_match_monte_carlo_expectation() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let hp = hp_scene();
    let kb = scene_belief(&mut rng);
    let mut sb = scene_skeleton(&mut rng, &kb.x_ref);
    sb.mu.truncate(3);
    sb.sigma.truncate(3);
    sb.sym = vec![0, 1, 2];
    let radar: StdVec<Vec3> = (0..4)
        .map(|i| rigid_transform(&kb.x_ref, &sb.reflector(i % 3)) + rvec3(&mut rng, 0.8))
        .collect();
    let pi = [0.2, 0.5, 0.3];
    let got = compute_responsibilities(&kb, &sb, &radar, &pi, &hp).unwrap();

    let x = &kb.x_ref;
    let r = x.rot();
    let j = left_jacobian(&x.theta);
    let lp = kb.p.cholesky().unwrap().l();
    let ls: StdVec<Mat3> = (0..3).map(|t| sb.reflector_cov(t).cholesky().unwrap().l()).collect();
    let qi = hp.q.try_inverse().unwrap();
    let draws = 400_000;
    let mut acc = vec![[0.0; 3]; radar.len()];
    for _ in 0..draws {
        let e = ErrVec::from_fn(|_, _| rn(&mut rng));
        let dx = kb.dx + lp * e;
        let p = x.p + dx.fixed_rows::<3>(IP);
        let w = j * dx.fixed_rows::<3>(ITH);
        for t in 0..3 {
            let u = sb.reflector(t) + ls[t] * rvec3(&mut rng, 1.0);
            let zeta = p + (Mat3::identity() + skew(&w)) * r * u;
            for (i, z) in radar.iter().enumerate() {
                let d = z - zeta;
                acc[i][t] += d.dot(&(qi * d));
            }
        }
    }
    for (i, row) in acc.iter().enumerate() {
        let logs: StdVec<f64> = (0..3).map(|t| libm::log(pi[t]) - 0.5 * row[t] / draws as f64).collect();
        let mx = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = logs.iter().map(|l| libm::exp(l - mx)).sum();
        for (t, l) in logs.iter().enumerate() {
            let want = libm::exp(l - mx) / s;
            assert!((got.upsilon[i][t] - want).abs() < 1e-2, "{i},{t}: {} vs {want}", got.upsilon[i][t]);
        }
        assert!((got.upsilon[i].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn responsibilities_are_stable_for_distant_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let hp = hp_scene();
    let kb = scene_belief(&mut rng);
    let sb = scene_skeleton(&mut rng, &kb.x_ref);
    let radar = vec![Vec3::new(1e4, -3e3, 5e4)];
    let pi = vec![1.0 / sb.len() as f64; sb.len()];
    let r = compute_responsibilities(&kb, &sb, &radar, &pi, &hp).unwrap();
    assert!(r.upsilon[0].iter().all(|v| v.is_finite()));
    assert!((r.upsilon[0].iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn inactive_components_are_skipped() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let hp = hp_scene();
    let prior = scene_belief(&mut rng);
    let sb = scene_skeleton(&mut rng, &prior.x_ref);
    let frame = scene_frame(&mut rng, &prior.x_ref, &sb, &hp);
    let mut stats = random_stats(&mut rng, sb.len(), &frame.radar);
    assert!(!stats.active[2]);
    let a = update_kinematic(&prior, &sb, &stats, &frame, &hp).unwrap();
    // moving an inactive reflector changes nothing
    let mut sb2 = sb.clone();
    sb2.mu[2][0] += 3.0;
    let b = update_kinematic(&prior, &sb2, &stats, &frame, &hp).unwrap();
    assert_eq!(a, b);
    stats.n[2] = 0.0;
    radar_sufficient_stats(&mut stats, &frame.radar, hp.n_min);
    assert_eq!(stats.zbar[2], Vec3::zeros());
}

#[test]
fn skeleton_fixed_point_survives_prediction() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let hp = hp_scene();
    let kb = scene_belief(&mut rng);
    let mut sb = scene_skeleton(&mut rng, &kb.x_ref);
    for m in sb.mu.iter_mut() {
        let u = m.fixed_rows::<3>(0).into_owned();
        m.fixed_rows_mut::<3>(3).copy_from(&u);
        m.fixed_rows_mut::<3>(6).fill(0.0);
    }
    for dt in [0.01, 0.1, 1.0] {
        let (_, out) = predict(&kb, &sb, dt, &hp).unwrap();
        for t in 0..sb.len() {
            assert!((out.mu[t] - sb.mu[t]).amax() < 1e-12);
        }
    }
}

#[test]
fn predict_composes_the_module_operations() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for model in [MotionModel::Ctrv, MotionModel::Cv] {
        let hp = Hyperparams { motion: model, ..hp_scene() };
        let mut kb = scene_belief(&mut rng);
        kb.dx = ErrVec::zeros();
        let sb = scene_skeleton(&mut rng, &kb.x_ref);
        let dt = 0.1;
        let (kn, sn) = predict(&kb, &sb, dt, &hp).unwrap();

        let xm = if model == MotionModel::Cv { kb.x_ref.without_rotation() } else { kb.x_ref };
        let xr = predict_reference(&xm, dt);
        assert!((kn.x_ref.p - xr.p).amax() < 1e-15);
        assert!((kn.x_ref.theta - xr.theta).amax() < 1e-15);
        assert_eq!(kn.x_ref.omega, kb.x_ref.omega);
        let tr = error_transition(&xm, dt);
        let mut a = ErrMat::identity();
        a.fixed_view_mut::<3, 3>(ITH, ITH).copy_from(&left_jacobian(&kb.x_ref.theta));
        let mut b = ErrMat::identity();
        b.fixed_view_mut::<3, 3>(ITH, ITH).copy_from(&left_jacobian(&xr.theta).try_inverse().unwrap());
        let pl = a * kb.p * a.transpose();
        let want = b * (tr.phi * pl * tr.phi.transpose() + hp.w * dt) * b.transpose();
        assert!((kn.p - want).amax() < 1e-12);
        assert!(is_spd(&kn.p));
        let st = skeleton_transition(hp.epsilon, hp.rho, dt);
        for t in 0..sb.len() {
            assert!((sn.mu[t] - st.phi * sb.mu[t]).amax() < 1e-14);
        }
    }
}

#[test]
fn predict_with_zero_step_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let hp = hp_scene();
    let kb = scene_belief(&mut rng);
    let sb = scene_skeleton(&mut rng, &kb.x_ref);
    let (a, b) = predict(&kb, &sb, 0.0, &hp).unwrap();
    assert_eq!(a, kb);
    assert_eq!(b, sb);
}

#[test]
fn rebase_moves_the_mean_into_the_reference() {
    let x = KinematicState {
        p: Vec3::new(1.0, 2.0, 3.0),
        v: 5.0,
        theta: Vec3::new(0.0, 0.0, 0.5),
        omega: Vec3::zeros(),
        xi: Vector2::new(4.0, 2.0),
    };
    let mut dx = ErrVec::zeros();
    dx[ITH + 2] = 0.1;
    dx[IP] = 0.3;
    let p = ErrMat::identity() * 0.2;
    let out = rebase(&KinematicBelief { x_ref: x, dx, p });
    let want = (Quat::exp(&Vec3::new(0.0, 0.0, 0.1)) * Quat::exp(&x.theta)).log();
    assert!((out.x_ref.theta - want).amax() < 1e-14);
    assert!((out.x_ref.p.x - 1.3).abs() < 1e-15);
    assert_eq!(out.dx, ErrVec::zeros());
    assert_eq!(out.p, p);
}

#[test]
fn rebase_across_the_branch_cut_keeps_the_chart_consistent() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let x = KinematicState { theta: Vec3::new(0.3, -0.2, 3.0), ..scene_state(&mut rng) };
    let mut dx = ErrVec::zeros();
    dx.fixed_rows_mut::<3>(ITH).copy_from(&Vec3::new(0.05, 0.1, 0.3));
    let kb = KinematicBelief { x_ref: x, dx, p: spd::<12>(&mut rng, 0.01) };
    let out = rebase(&kb);
    let moved = x.theta + dx.fixed_rows::<3>(ITH);
    assert!(out.x_ref.theta.norm() <= core::f64::consts::PI);
    assert!((rot_from_rotvec(&out.x_ref.theta) - rot_from_rotvec(&moved)).amax() < 1e-12);
    // a small perturbation expressed in either chart gives the same rotation
    let a = left_jacobian_inv(&out.x_ref.theta) * left_jacobian(&moved);
    let d = Vec3::new(1e-6, -2e-6, 1.5e-6);
    let lhs = rot_from_rotvec(&(moved + d));
    let rhs = rot_from_rotvec(&(out.x_ref.theta + a * d));
    assert!((lhs - rhs).amax() < 1e-11);
    assert!(is_spd(&out.p));
}

#[test]
fn init_track_recovers_pose_from_exact_corners() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let hp = hp_scene();
    for _ in 0..20 {
        let mut x = scene_state(&mut rng);
        x.theta = pose_from_heading(&x.heading(), &up()).unwrap();
        let tpl = SkeletonTemplate::default();
        let sb = scene_skeleton(&mut rng, &x);
        let mut frame = scene_frame(&mut rng, &x, &sb, &hp);
        frame.keypoints.retain(|k| k.kind == KeypointKind::Corner);
        for kp in frame.keypoints.iter_mut() {
            kp.pixel = project_point(&hp.camera, &rigid_transform(&x, &corner_vcs(kp.id, &x.xi).unwrap())).unwrap();
        }
        let (kb, out) = init_track(&frame, &tpl, &hp).unwrap();
        assert!((kb.x_ref.p - x.p).amax() < 1e-9);
        assert!((kb.x_ref.rot() - x.rot()).amax() < 1e-9);
        assert!((kb.x_ref.xi - x.xi).amax() < 1e-9);
        assert_eq!(out.len(), tpl.len());
        assert!(out.sigma.iter().all(is_spd));
    }
}

#[test]
fn init_track_needs_radar_and_keypoints() {
    let hp = hp_scene();
    let f = FrameMeasurements { t: 0.0, radar: vec![], keypoints: vec![] };
    assert!(matches!(
        init_track(&f, &SkeletonTemplate::default(), &hp),
        Err(Error::InsufficientMeasurements { .. })
    ));
}

#[test]
fn vb_update_outputs_are_well_formed() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..20 {
        let hp = hp_scene();
        let mut kb = scene_belief(&mut rng);
        kb.dx = ErrVec::zeros();
        let sb = scene_skeleton(&mut rng, &kb.x_ref);
        let frame = scene_frame(&mut rng, &kb.x_ref, &sb, &hp);
        let (k, s, rep) = vb_update_traced(&kb, &sb, &frame, &hp, true).unwrap();
        assert_eq!(k.dx, ErrVec::zeros());
        assert!(is_spd(&k.p));
        assert!(s.sigma.iter().all(is_spd));
        assert!(rep.row_sum_error < 1e-12);
        assert!(rep.weight_sum_error < 1e-12);
        assert_eq!(rep.free_energy.len(), hp.n_vb);
        assert!(rep.free_energy.iter().all(|f| f.is_finite()));
    }
}

#[test]
fn free_energy_is_minimized_by_each_exact_factor_update() {
    // With π and the knot linearization point held fixed, each factor update
    // is an exact minimizer of the free energy over that factor.
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut hp = hp_scene();
    hp.constraints.symmetry = false;
    for _ in 0..10 {
        let kb0 = KinematicBelief { dx: ErrVec::zeros(), ..scene_belief(&mut rng) };
        let sb0 = scene_skeleton(&mut rng, &kb0.x_ref);
        let frame = scene_frame(&mut rng, &kb0.x_ref, &sb0, &hp);
        let pi = mixture_weights(&kb0, &sb0, &hp).unwrap();
        let mut resp = compute_responsibilities(&kb0, &sb0, &frame.radar, &pi, &hp).unwrap();
        radar_sufficient_stats(&mut resp, &frame.radar, hp.n_min);
        let lin = sb0.knots();
        let kb = update_kinematic(&kb0, &sb0, &resp, &frame, &hp).unwrap();
        let f = |k: &KinematicBelief| free_energy(&kb0, &sb0, k, &sb0, &pi, &resp, &lin, &frame, &hp).unwrap();
        let best = f(&kb);
        assert!(best <= f(&kb0) + 1e-9);
        for _ in 0..20 {
            let mut k = kb.clone();
            k.dx += ErrVec::from_fn(|_, _| rn(&mut rng) * 1e-3);
            assert!(f(&k) >= best - 1e-9);
            let mut k = kb.clone();
            k.p *= rng.random_range(0.9..1.1);
            assert!(f(&k) >= best - 1e-9);
        }
    }
}

fn pitched_hp(height: f64, pitch: f64) -> Hyperparams {
    let n = Vec3::new(0.0, -libm::cos(pitch), -libm::sin(pitch));
    Hyperparams { ground: GroundPlane::new(n, height).unwrap(), ..hp_scene() }
}

#[test]
fn tracker_follows_a_noise_free_straight_drive() {
    let hp = pitched_hp(6.0, 0.15);
    let n = hp.ground.n;
    let tpl = SkeletonTemplate::default();
    let mut tracker = Tracker::new(hp.clone(), tpl.clone());
    let theta = pose_from_heading(&Vec3::new(0.2, 0.0, 1.0), &n).unwrap();
    let p0 = hp.ground.project(&Vec3::new(-2.0, 0.0, 15.0));
    let mut truth = KinematicState { p: p0, v: 6.0, theta, omega: Vec3::zeros(), xi: tpl.base };
    let dt = 0.1;
    for k in 0..40 {
        if k > 0 {
            truth = predict_reference(&truth, dt);
        }
        let radar = (0..tpl.len()).step_by(3).map(|t| rigid_transform(&truth, &tpl.knots[t])).collect();
        let mut keypoints: StdVec<Keypoint> = (1..=4)
            .map(|id| {
                let c = rigid_transform(&truth, &corner_vcs(id, &truth.xi).unwrap());
                Keypoint::corner(id, project_point(&hp.camera, &c).unwrap())
            })
            .collect();
        for t in 0..tpl.len() {
            let px = project_point(&hp.camera, &rigid_transform(&truth, &tpl.knots[t])).unwrap();
            keypoints.push(Keypoint::knot(t, px));
        }
        let frame = FrameMeasurements { t: k as f64 * dt, radar, keypoints };
        let rep = tracker.step(&frame).unwrap();
        assert!(rep.covariances_spd);
        assert!(rep.ground_residual < 0.05);
    }
    let est = tracker.kinematic().unwrap().mean();
    assert!((est.p - truth.p).norm() < 0.2, "{:?} vs {:?}", est.p, truth.p);
    assert!((est.v - 6.0).abs() < 0.3, "speed {}", est.v);
    assert!((est.rot() - truth.rot()).amax() < 0.03);
}

#[test]
fn frames_out_of_order_are_rejected() {
    let hp = hp_scene();
    let tpl = SkeletonTemplate::default();
    let mut tr = Tracker::new(hp.clone(), tpl.clone());
    let x = KinematicState {
        p: Vec3::new(0.0, 1.5, 15.0),
        v: 0.0,
        theta: pose_from_heading(&Vec3::z(), &up()).unwrap(),
        omega: Vec3::zeros(),
        xi: tpl.base,
    };
    let frame = |t: f64| FrameMeasurements {
        t,
        radar: vec![rigid_transform(&x, &tpl.knots[0])],
        keypoints: (1..=4)
            .map(|id| {
                Keypoint::corner(id, project_point(&hp.camera, &rigid_transform(&x, &corner_vcs(id, &x.xi).unwrap())).unwrap())
            })
            .collect(),
    };
    tr.step(&frame(1.0)).unwrap();
    assert!(matches!(tr.step(&frame(0.5)), Err(Error::Invalid(_))));
}
