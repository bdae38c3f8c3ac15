//! Synthetic ground truth and measurements.
//!
//! World frame: X along the road, Y to the left, Z up. The sensor sits at
//! `(0, 0, height)` looking along +X, pitched down. Everything written to
//! scenario files is expressed in the sensor frame (x right, y down,
//! z forward).

use eot_core::metrics::vehicle_shape;
use eot_core::motion::predict_reference;
use eot_core::rotkit::{rot_from_rotvec, Quat};
use eot_core::sensors::{corner_vcs, project_point, rigid_transform, sgw_weights};
use eot_core::{CameraIntrinsics, FrameMeasurements, GroundPlane, Keypoint, KinematicState, SkeletonTemplate};
use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

type Vec3 = Vector3<f64>;
type Vec2 = Vector2<f64>;
type Mat3 = Matrix3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    LaneChange,
    UTurn,
}

impl ScenarioKind {
    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::LaneChange => "lane-change",
            ScenarioKind::UTurn => "u-turn",
        }
    }
}

/// Constant yaw-rate piece of a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub duration: f64,
    pub yaw_rate: f64,
}

/// Mounting of the sensor above the road.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorRig {
    pub height: f64,
    /// Downward pitch, rad.
    pub pitch: f64,
    pub camera: CameraIntrinsics,
}

impl SensorRig {
    /// Rotation taking world vectors to sensor vectors.
    pub fn world_to_sensor(&self) -> Mat3 {
        let (s, c) = self.pitch.sin_cos();
        Mat3::new(0.0, -1.0, 0.0, -s, 0.0, -c, c, 0.0, -s)
    }

    pub fn to_sensor(&self, world: &Vec3) -> Vec3 {
        self.world_to_sensor() * (world - Vec3::new(0.0, 0.0, self.height))
    }

    pub fn ground(&self) -> GroundPlane {
        let (s, c) = self.pitch.sin_cos();
        GroundPlane { n: Vec3::new(0.0, -c, -s), d: self.height }
    }
}

impl Default for SensorRig {
    fn default() -> Self {
        Self { height: 6.0, pitch: 9f64.to_radians(), camera: CameraIntrinsics::default() }
    }
}

// Left-side knots as fractions of (length, width, height), same knot
// numbering as the generic car outline.
const BUS_KNOTS: [[f64; 3]; 12] = [
    [0.50, 0.46, 0.12],
    [0.50, 0.46, 0.40],
    [-0.50, 0.46, 0.12],
    [-0.50, 0.46, 0.45],
    [0.36, 0.50, 0.15],
    [-0.28, 0.50, 0.15],
    [0.50, 0.44, 0.70],
    [0.48, 0.42, 1.00],
    [-0.48, 0.42, 1.00],
    [-0.50, 0.44, 0.80],
    [0.49, 0.52, 0.75],
    [0.00, 0.50, 0.50],
];

const SEDAN_KNOTS: [[f64; 3]; 12] = [
    [0.50, 0.44, 0.30],
    [0.46, 0.45, 0.50],
    [-0.50, 0.44, 0.32],
    [-0.47, 0.45, 0.58],
    [0.30, 0.50, 0.16],
    [-0.31, 0.50, 0.16],
    [0.15, 0.43, 0.62],
    [-0.02, 0.38, 1.00],
    [-0.25, 0.38, 0.98],
    [-0.36, 0.43, 0.64],
    [0.12, 0.52, 0.66],
    [0.00, 0.50, 0.35],
];

/// 11 m city bus.
pub fn bus() -> SkeletonTemplate {
    SkeletonTemplate::outline(&BUS_KNOTS, 11.0, 2.5, 3.2)
}

/// Sedan with a lower, longer cabin than the generic outline.
pub fn sedan() -> SkeletonTemplate {
    SkeletonTemplate::outline(&SEDAN_KNOTS, 4.8, 1.85, 1.45)
}

/// Everything needed to synthesize one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioParams {
    pub kind: ScenarioKind,
    pub dt: f64,
    pub duration: f64,
    pub speed: f64,
    /// World start position on the ground.
    pub start: Vec2,
    /// World yaw at the start.
    pub yaw: f64,
    pub segments: Vec<Segment>,
    pub rig: SensorRig,
    /// True vehicle geometry.
    pub vehicle: SkeletonTemplate,
    /// Generic outline handed to the tracker through the file header.
    pub prior: SkeletonTemplate,
    /// Poisson rate of radar returns.
    pub alpha: f64,
    pub q_sim: Mat3,
    pub sigma_px: f64,
    pub detection_prob: f64,
    pub lambda: f64,
}

impl ScenarioParams {
    fn base(kind: ScenarioKind, alpha: f64) -> Self {
        Self {
            kind,
            dt: 0.1,
            duration: 0.0,
            speed: 0.0,
            start: Vec2::zeros(),
            yaw: 0.0,
            segments: Vec::new(),
            rig: SensorRig::default(),
            vehicle: SkeletonTemplate::default(),
            prior: SkeletonTemplate::default(),
            alpha,
            q_sim: Mat3::identity() * 0.5,
            sigma_px: 2.0,
            detection_prob: 0.95,
            lambda: 1.0,
        }
    }

    /// Bus driving away from the sensor and moving one lane (3.5 m) to the
    /// left half way.
    pub fn lane_change(alpha: f64) -> Self {
        let speed = 5.0;
        let tau = 2.0;
        let r = 3.5 / (speed * tau * tau);
        Self {
            duration: 24.0,
            speed,
            start: Vec2::new(20.0, -1.75),
            segments: vec![
                Segment { duration: 10.0, yaw_rate: 0.0 },
                Segment { duration: tau, yaw_rate: r },
                Segment { duration: tau, yaw_rate: -r },
            ],
            vehicle: bus(),
            ..Self::base(ScenarioKind::LaneChange, alpha)
        }
    }

    /// Sedan driving away, turning around on a 6 m radius and coming back
    /// in the opposite lane.
    pub fn u_turn(alpha: f64) -> Self {
        let speed = 5.0;
        let radius = 6.0;
        let w = speed / radius;
        Self {
            duration: 16.0,
            speed,
            start: Vec2::new(25.0, -6.0),
            segments: vec![
                Segment { duration: 4.0, yaw_rate: 0.0 },
                Segment { duration: std::f64::consts::PI / w, yaw_rate: w },
            ],
            vehicle: sedan(),
            ..Self::base(ScenarioKind::UTurn, alpha)
        }
    }

    pub fn preset(kind: ScenarioKind, alpha: f64) -> Self {
        match kind {
            ScenarioKind::LaneChange => Self::lane_change(alpha),
            ScenarioKind::UTurn => Self::u_turn(alpha),
        }
    }

    pub fn frame_count(&self) -> usize {
        (self.duration / self.dt + 1e-9).floor() as usize + 1
    }

    fn yaw_rate_at(&self, t: f64) -> (f64, f64) {
        // (rate, end of the piece containing t)
        let mut start = 0.0;
        for s in &self.segments {
            let end = start + s.duration;
            if t < end - 1e-12 {
                return (s.yaw_rate, end);
            }
            start = end;
        }
        (0.0, f64::INFINITY)
    }
}

/// True vehicle state and skeleton at one instant (sensor frame).
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthFrame {
    pub t: f64,
    pub p: Vec3,
    /// Attitude; stored as the quaternion so files roundtrip exactly.
    pub q: Quat,
    pub v: f64,
    pub omega: Vec3,
    pub xi: Vec2,
    /// Knots in the vehicle frame.
    pub knots: Vec<Vec3>,
}

impl GroundTruthFrame {
    pub fn state(&self) -> KinematicState {
        KinematicState { p: self.p, v: self.v, theta: self.q.log(), omega: self.omega, xi: self.xi }
    }

    pub fn knots_scs(&self) -> Vec<Vec3> {
        let x = self.state();
        self.knots.iter().map(|k| rigid_transform(&x, k)).collect()
    }

    /// Knots plus bottom corners in the vehicle frame.
    pub fn shape(&self) -> Vec<Vec3> {
        vehicle_shape(&self.knots, &self.xi)
    }
}

/// Piecewise constant-turn-rate trajectory stepped with the reference
/// prediction; pieces boundaries are honored exactly.
pub fn gen_trajectory(params: &ScenarioParams) -> Vec<GroundTruthFrame> {
    let rig = &params.rig;
    let plane = rig.ground();
    let up = plane.n;
    let r_ws = rig.world_to_sensor();
    let (sy, cy) = params.yaw.sin_cos();
    let r_vw = Mat3::new(cy, -sy, 0.0, sy, cy, 0.0, 0.0, 0.0, 1.0);
    let theta = Quat::from_rot(&(r_ws * r_vw)).log();
    let p = rig.to_sensor(&Vec3::new(params.start.x, params.start.y, 0.0));
    let xi = params.vehicle.base;
    let mut x = KinematicState { p: plane.project(&p), v: params.speed, theta, omega: Vec3::zeros(), xi };

    let n = params.frame_count();
    let mut out = Vec::with_capacity(n);
    let mut t = 0.0;
    for k in 0..n {
        let target = k as f64 * params.dt;
        while t < target - 1e-12 {
            let (rate, end) = params.yaw_rate_at(t);
            let h = (target - t).min(end - t);
            x.omega = up * rate;
            x = predict_reference(&x, h);
            x.p = plane.project(&x.p);
            t += h;
        }
        t = target;
        x.omega = up * params.yaw_rate_at(t).0;
        out.push(GroundTruthFrame {
            t,
            p: x.p,
            q: x.quat(),
            v: x.v,
            omega: x.omega,
            xi: x.xi,
            knots: params.vehicle.knots.clone(),
        });
    }
    out
}

/// Knots whose outward direction faces the sensor: `(k - c)·(k - o) < 0`
/// with `c` the knot centroid, all in the sensor frame.
pub fn visibility(gt: &GroundTruthFrame, sensor_origin: &Vec3) -> Vec<usize> {
    let ks = gt.knots_scs();
    if ks.is_empty() {
        return Vec::new();
    }
    let c = ks.iter().fold(Vec3::zeros(), |a, k| a + k) / ks.len() as f64;
    ks.iter()
        .enumerate()
        .filter(|(_, k)| (*k - c).dot(&(*k - sensor_origin)) < 0.0)
        .map(|(i, _)| i)
        .collect()
}

/// Deterministic generator for one frame and purpose.
pub fn frame_rng(seed: u64, frame: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame as u64 * 4 + purpose);
    rng
}

fn gaussian3<R: Rng>(rng: &mut R, chol: &Mat3) -> Vec3 {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    chol * Vec3::new(n.sample(rng), n.sample(rng), n.sample(rng))
}

/// `max(1, Poisson(α))` returns, each a visible knot picked by the SGW
/// weights plus `N(0, Q_sim)` noise.
pub fn sample_radar<R: Rng>(gt: &GroundTruthFrame, alpha: f64, q_sim: &Mat3, lambda: f64, rng: &mut R) -> Vec<Vec3> {
    let x = gt.state();
    let mut vis = visibility(gt, &Vec3::zeros());
    if vis.is_empty() {
        vis = (0..gt.knots.len()).collect();
    }
    let refl: Vec<Vec3> = vis.iter().map(|&i| gt.knots[i]).collect();
    let weights = sgw_weights(&x, &refl, lambda).unwrap_or_else(|_| vec![1.0 / refl.len() as f64; refl.len()]);
    let count = match Poisson::new(alpha) {
        Ok(p) => (p.sample(rng) as usize).max(1),
        Err(_) => 1,
    };
    let chol = if q_sim.iter().all(|v| *v == 0.0) {
        Mat3::zeros()
    } else {
        q_sim.cholesky().map(|c| c.l()).unwrap_or_else(Mat3::zeros)
    };
    (0..count)
        .map(|_| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = refl.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            rigid_transform(&x, &refl[pick]) + gaussian3(rng, &chol)
        })
        .collect()
}

/// Visible knots and the four bottom corners projected to pixels, with
/// `N(0, σ²I)` noise, each kept with probability `detection_prob`.
/// Points behind the camera or outside the image are dropped.
pub fn sample_keypoints<R: Rng>(
    gt: &GroundTruthFrame,
    k: &CameraIntrinsics,
    sigma_px: f64,
    detection_prob: f64,
    rng: &mut R,
) -> Vec<Keypoint> {
    let x = gt.state();
    let noise = Normal::new(0.0, sigma_px.max(0.0)).expect("finite sigma");
    let mut draw = |p_scs: Vec3, make: &dyn Fn(Vec2) -> Keypoint, out: &mut Vec<Keypoint>| {
        let px = project_point(k, &p_scs);
        let e = Vec2::new(noise.sample(rng), noise.sample(rng));
        let keep = rng.random::<f64>() < detection_prob;
        if let (Ok(px), true) = (px, keep) {
            let z = px + e;
            if (0.0..=2.0 * k.u0).contains(&z.x) && (0.0..=2.0 * k.v0).contains(&z.y) {
                out.push(make(z));
            }
        }
    };
    let mut out = Vec::new();
    for i in visibility(gt, &Vec3::zeros()) {
        draw(rigid_transform(&x, &gt.knots[i]), &|z| Keypoint::knot(i, z), &mut out);
    }
    for id in 1..=4 {
        let c = corner_vcs(id, &gt.xi).expect("corner id in range");
        draw(rigid_transform(&x, &c), &|z| Keypoint::corner(id, z), &mut out);
    }
    out
}

/// Header of a scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMeta {
    pub schema: String,
    pub kind: Option<ScenarioKind>,
    pub alpha: Option<f64>,
    pub seed: Option<u64>,
    pub dt: f64,
    pub camera: CameraIntrinsics,
    pub ground: GroundPlane,
    /// Tracker prior outline (not the true vehicle).
    pub template: SkeletonTemplate,
}

pub const SCENARIO_SCHEMA: &str = "eot-scenario/1";

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioFrame {
    pub truth: Option<GroundTruthFrame>,
    pub meas: FrameMeasurements,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scenario {
    pub meta: Option<ScenarioMeta>,
    pub frames: Vec<ScenarioFrame>,
}

/// Truth plus measurements for every frame; fully determined by
/// `(params, seed)`.
pub fn generate(params: &ScenarioParams, seed: u64) -> Scenario {
    let frames = gen_trajectory(params)
        .into_iter()
        .enumerate()
        .map(|(k, gt)| {
            let radar = sample_radar(&gt, params.alpha, &params.q_sim, params.lambda, &mut frame_rng(seed, k, 0));
            let keypoints = sample_keypoints(
                &gt,
                &params.rig.camera,
                params.sigma_px,
                params.detection_prob,
                &mut frame_rng(seed, k, 1),
            );
            ScenarioFrame { meas: FrameMeasurements { t: gt.t, radar, keypoints }, truth: Some(gt) }
        })
        .collect();
    Scenario {
        meta: Some(ScenarioMeta {
            schema: SCENARIO_SCHEMA.to_string(),
            kind: Some(params.kind),
            alpha: Some(params.alpha),
            seed: Some(seed),
            dt: params.dt,
            camera: params.rig.camera,
            ground: params.rig.ground(),
            template: params.prior.clone(),
        }),
        frames,
    }
}

/// Expected value of `max(1, Poisson(α))`.
pub fn truncated_poisson_mean(alpha: f64) -> f64 {
    alpha + (-alpha).exp()
}

/// Unit heading of the vehicle in the world frame.
pub fn world_heading(rig: &SensorRig, gt: &GroundTruthFrame) -> Vec3 {
    rig.world_to_sensor().transpose() * (rot_from_rotvec(&gt.q.log()) * Vec3::x())
}

#[cfg(test)]
mod tests {
    use super::*;
    use eot_core::KeypointKind;

    #[test]
    fn truth_stays_on_the_ground() {
        for kind in [ScenarioKind::LaneChange, ScenarioKind::UTurn] {
            let p = ScenarioParams::preset(kind, 10.0);
            let plane = p.rig.ground();
            for gt in gen_trajectory(&p) {
                let x = gt.state();
                for id in 1..=4 {
                    let c = rigid_transform(&x, &corner_vcs(id, &x.xi).unwrap());
                    assert!(plane.residual(&c).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn straight_segment_is_uniform_motion() {
        let mut p = ScenarioParams::lane_change(10.0);
        p.segments.clear();
        let tr = gen_trajectory(&p);
        let step = tr[1].p - tr[0].p;
        assert!((step.norm() - p.speed * p.dt).abs() < 1e-12);
        for w in tr.windows(2) {
            assert!((w[1].p - w[0].p - step).amax() < 1e-9);
        }
    }

    #[test]
    fn u_turn_reverses_heading() {
        let p = ScenarioParams::u_turn(10.0);
        let tr = gen_trajectory(&p);
        let h0 = world_heading(&p.rig, &tr[0]);
        let h1 = world_heading(&p.rig, tr.last().unwrap());
        assert!((h0 + h1).norm() < 1e-6, "{h0:?} {h1:?}");
    }

    #[test]
    fn lane_change_ends_one_lane_over() {
        let p = ScenarioParams::lane_change(10.0);
        let tr = gen_trajectory(&p);
        let w2s = p.rig.world_to_sensor().transpose();
        let y0 = (w2s * tr[0].p).y;
        let y1 = (w2s * tr.last().unwrap().p).y;
        assert!(((y1 - y0) - 3.5).abs() < 0.05, "{}", y1 - y0);
        let h1 = world_heading(&p.rig, tr.last().unwrap());
        assert!((h1 - Vec3::x()).norm() < 1e-9);
    }

    #[test]
    fn trajectory_matches_stepwise_reference_prediction() {
        let p = ScenarioParams::u_turn(10.0);
        let tr = gen_trajectory(&p);
        // skip the step that straddles the end of the turn
        for k in 0..tr.len() - 1 {
            let t = tr[k].t;
            let (rate, end) = p.yaw_rate_at(t);
            if end < t + p.dt - 1e-9 {
                continue;
            }
            let mut x = tr[k].state();
            x.omega = p.rig.ground().n * rate;
            let next = predict_reference(&x, p.dt);
            assert!((next.p - tr[k + 1].p).amax() < 1e-9);
            assert!((rot_from_rotvec(&next.theta) - tr[k + 1].state().rot()).amax() < 1e-9);
        }
    }

    #[test]
    fn facing_knots_are_visible() {
        let p = ScenarioParams::lane_change(10.0);
        let gt = &gen_trajectory(&p)[0];
        let vis = visibility(gt, &Vec3::zeros());
        // driving away: rear knots (x < 0) face the sensor, front ones do not
        let front = gt.knots.iter().enumerate().filter(|(_, k)| k.x > 2.0).map(|(i, _)| i);
        let rear: Vec<usize> = gt.knots.iter().enumerate().filter(|(_, k)| k.x < -2.0).map(|(i, _)| i).collect();
        for i in front {
            assert!(!vis.contains(&i));
        }
        for i in &rear {
            assert!(vis.contains(i), "{i}");
        }
    }

    #[test]
    fn turning_around_swaps_front_and_back() {
        let mut p = ScenarioParams::lane_change(10.0);
        // front/back symmetric so the turned knots land on the old ones
        let box_knots = [[0.5, 0.5, 0.2], [-0.5, 0.5, 0.2], [0.5, 0.5, 0.9], [-0.5, 0.5, 0.9], [0.3, 0.45, 1.0], [-0.3, 0.45, 1.0]];
        p.vehicle = SkeletonTemplate::outline(&box_knots, 5.0, 2.0, 1.6);
        let gt = gen_trajectory(&p)[0].clone();
        let x = gt.state();
        // rotate by π about the up axis, keeping the same centroid
        let spin = Quat::exp(&(p.rig.ground().n * std::f64::consts::PI));
        let c_vcs = gt.knots.iter().fold(Vec3::zeros(), |a, k| a + k) / gt.knots.len() as f64;
        let c = rigid_transform(&x, &c_vcs);
        let q2 = spin * gt.q;
        let p2 = c - q2.rotate(&c_vcs);
        let turned = GroundTruthFrame { q: q2, p: p2, ..gt.clone() };
        let a = visibility(&gt, &Vec3::zeros());
        let b = visibility(&turned, &Vec3::zeros());
        let mirror_front = |i: usize| gt.knots.iter().position(|k| (k.x + gt.knots[i].x).abs() < 1e-12 && (k.y + gt.knots[i].y).abs() < 1e-12 && (k.z - gt.knots[i].z).abs() < 1e-12);
        for i in a {
            if let Some(j) = mirror_front(i) {
                assert!(b.contains(&j));
            }
        }
    }

    #[test]
    fn radar_without_noise_hits_visible_knots() {
        let p = ScenarioParams::lane_change(10.0);
        let gt = &gen_trajectory(&p)[30];
        let vis: Vec<Vec3> = visibility(gt, &Vec3::zeros()).iter().map(|&i| gt.knots_scs()[i]).collect();
        let pts = sample_radar(gt, 10.0, &Mat3::zeros(), 1.0, &mut frame_rng(1, 0, 0));
        assert!(!pts.is_empty());
        for z in pts {
            assert!(vis.iter().any(|k| (k - z).norm() < 1e-12));
        }
    }

    #[test]
    fn radar_count_follows_truncated_poisson() {
        let p = ScenarioParams::lane_change(10.0);
        let gt = &gen_trajectory(&p)[0];
        let n = 10_000;
        let total: usize = (0..n).map(|k| sample_radar(gt, 10.0, &p.q_sim, 1.0, &mut frame_rng(5, k, 0)).len()).sum();
        let mean = total as f64 / n as f64;
        let want = truncated_poisson_mean(10.0);
        assert!((mean / want - 1.0).abs() < 0.02, "{mean} vs {want}");
        let total: usize = (0..n).map(|k| sample_radar(gt, 0.5, &p.q_sim, 1.0, &mut frame_rng(6, k, 0)).len()).sum();
        let mean = total as f64 / n as f64;
        // E[max(1, N)] = α + P(N = 0)
        assert!((mean / truncated_poisson_mean(0.5) - 1.0).abs() < 0.02);
    }

    #[test]
    fn keypoint_noise_has_the_requested_spread() {
        let p = ScenarioParams::lane_change(10.0);
        let gt = &gen_trajectory(&p)[0];
        let k = p.rig.camera;
        let x = gt.state();
        let exact: Vec<Vec2> = (1..=4).map(|id| project_point(&k, &rigid_transform(&x, &corner_vcs(id, &x.xi).unwrap())).unwrap()).collect();
        let mut ss = 0.0;
        let mut cnt = 0usize;
        let mut frame = 0;
        while cnt < 200_000 {
            for kp in sample_keypoints(gt, &k, 2.0, 1.0, &mut frame_rng(9, frame, 1)) {
                if kp.kind == KeypointKind::Corner {
                    let e = kp.pixel - exact[kp.id - 1];
                    ss += e.norm_squared();
                    cnt += 2;
                }
            }
            frame += 1;
        }
        let sd = (ss / cnt as f64).sqrt();
        assert!((sd / 2.0 - 1.0).abs() < 0.03, "{sd}");
    }

    #[test]
    fn keypoints_without_noise_are_exact_and_detection_zero_is_empty() {
        let p = ScenarioParams::u_turn(10.0);
        let gt = &gen_trajectory(&p)[10];
        let x = gt.state();
        for kp in sample_keypoints(gt, &p.rig.camera, 0.0, 1.0, &mut frame_rng(1, 0, 1)) {
            let pt = match kp.kind {
                KeypointKind::Knot => gt.knots[kp.id],
                KeypointKind::Corner => corner_vcs(kp.id, &x.xi).unwrap(),
            };
            let want = project_point(&p.rig.camera, &rigid_transform(&x, &pt)).unwrap();
            assert!((kp.pixel - want).amax() < 1e-9);
        }
        assert!(sample_keypoints(gt, &p.rig.camera, 2.0, 0.0, &mut frame_rng(1, 0, 1)).is_empty());
    }

    #[test]
    fn generation_is_deterministic() {
        let p = ScenarioParams::lane_change(5.0);
        assert_eq!(generate(&p, 3), generate(&p, 3));
        assert_ne!(generate(&p, 3), generate(&p, 4));
    }

    #[test]
    fn extent_matches_knot_extremes() {
        let p = ScenarioParams::lane_change(10.0);
        let gt = &gen_trajectory(&p)[0];
        let lx = gt.knots.iter().map(|k| k.x).fold(f64::MIN, f64::max) - gt.knots.iter().map(|k| k.x).fold(f64::MAX, f64::min);
        let ly = gt.knots.iter().map(|k| k.y).fold(f64::MIN, f64::max) - gt.knots.iter().map(|k| k.y).fold(f64::MAX, f64::min);
        assert!((lx / gt.xi.x - 1.0).abs() <= 0.05);
        assert!((ly / gt.xi.y - 1.0).abs() <= 0.05);
    }
}
