//! Tracking runs, scoring against truth, and the seed loop.

use crate::config::ConfigFile;
use crate::error::{EotError, Result};
use crate::io::{TraceMeta, TraceRecord, TRACE_SCHEMA};
use crate::scenario::{generate, GroundTruthFrame, Scenario, ScenarioMeta, ScenarioParams};
use eot_core::metrics::{rmse_velocity, shape_in_frame, try_iou_plane, vehicle_shape, Plane};
use eot_core::{Hyperparams, MotionModel, SkeletonTemplate, Tracker};
use nalgebra::SMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

/// One arm of the motion-model / skeleton-fusion ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Method {
    pub motion: MotionModel,
    pub es_fusion: bool,
}

impl Method {
    pub const CTRV_ES: Method = Method { motion: MotionModel::Ctrv, es_fusion: true };
    pub const CTRV: Method = Method { motion: MotionModel::Ctrv, es_fusion: false };
    pub const CV_ES: Method = Method { motion: MotionModel::Cv, es_fusion: true };
    pub const CV: Method = Method { motion: MotionModel::Cv, es_fusion: false };
    pub const ALL: [Method; 4] = [Method::CTRV_ES, Method::CTRV, Method::CV_ES, Method::CV];

    pub fn apply(self, hp: &mut Hyperparams) {
        hp.motion = self.motion;
        hp.es_fusion = self.es_fusion;
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = match self.motion {
            MotionModel::Ctrv => "CTRV",
            MotionModel::Cv => "CV",
        };
        if self.es_fusion {
            write!(f, "{m}+ES")
        } else {
            f.write_str(m)
        }
    }
}

impl FromStr for Method {
    type Err = EotError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| EotError::Config(format!("unknown method `{s}`")))
    }
}

/// Tracker settings for a scenario: defaults, then the scenario header
/// (camera, ground, template), then the config file.
pub fn tracker_setup(meta: Option<&ScenarioMeta>, config: &ConfigFile) -> Result<(Hyperparams, SkeletonTemplate)> {
    let mut base = Hyperparams::default();
    let mut template = SkeletonTemplate::default();
    if let Some(m) = meta {
        base.camera = m.camera;
        base.ground = m.ground;
        template = m.template.clone();
    }
    if config.camera.is_none() && config.ground.is_none() && meta.is_none() {
        log::warn!("no camera or ground in scenario or config; using defaults");
    }
    let hp = config.apply(&base)?;
    if let Some(t) = &config.template {
        template = t.clone();
    }
    Ok((hp, template))
}

fn cond<const D: usize>(m: &SMatrix<f64, D, D>) -> f64 {
    let ev = nalgebra::DMatrix::from_column_slice(D, D, m.as_slice()).symmetric_eigenvalues();
    let (lo, hi) = (ev.min(), ev.max());
    if lo > 0.0 {
        hi / lo
    } else {
        f64::MAX
    }
}

fn arr3(v: &nalgebra::Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

/// Runs the tracker over every frame. IOUs are filled in when the frame
/// carries truth.
pub fn track(scenario: &Scenario, hp: &Hyperparams, template: &SkeletonTemplate) -> Result<Vec<TraceRecord>> {
    let mut tracker = Tracker::new(hp.clone(), template.clone());
    let mut out = Vec::with_capacity(scenario.frames.len());
    for (k, frame) in scenario.frames.iter().enumerate() {
        let rep = tracker.step(&frame.meas).map_err(|e| {
            log::error!("frame {k} (t = {}): {e}", frame.meas.t);
            e
        })?;
        let kb = tracker.kinematic().expect("tracker state after a step");
        let sb = tracker.skeleton().expect("tracker state after a step");
        let x = kb.mean();
        let q = x.quat();
        let cond_skeleton = sb.sigma.iter().map(cond).fold(0.0, f64::max);
        let mut rec = TraceRecord {
            t: frame.meas.t,
            p: arr3(&x.p),
            q: [q.w, q.v.x, q.v.y, q.v.z],
            v: x.v,
            omega: arr3(&x.omega),
            xi: [x.xi.x, x.xi.y],
            knots: sb.knots().iter().map(arr3).collect(),
            reflectors: sb.reflectors().iter().map(arr3).collect(),
            p_diag: kb.p.diagonal().iter().copied().collect(),
            cond_p: cond(&kb.p),
            cond_skeleton,
            spd: rep.covariances_spd,
            row_sum_error: rep.vb.row_sum_error,
            weight_sum_error: rep.vb.weight_sum_error,
            ground_residual: rep.ground_residual,
            iou: None,
        };
        if let Some(gt) = &frame.truth {
            let (iou, _) = frame_iou(gt, &rec);
            rec.iou = Some(iou);
        }
        out.push(rec);
    }
    Ok(out)
}

/// IOU on the three planes of the true vehicle frame, and whether any
/// plane was degenerate.
pub fn frame_iou(gt: &GroundTruthFrame, rec: &TraceRecord) -> ([f64; 3], bool) {
    let est = rec.state();
    let shape = vehicle_shape(&rec.knots_vcs(), &est.xi);
    let est_in_truth = shape_in_frame(&shape, &est, &gt.state());
    let truth = gt.shape();
    let mut out = [0.0; 3];
    let mut degenerate = false;
    for (o, plane) in out.iter_mut().zip(Plane::ALL) {
        match try_iou_plane(&truth, &est_in_truth, plane) {
            Ok(v) => *o = v,
            Err(e) => {
                log::debug!("t = {}: {} IOU: {e}", gt.t, plane.name());
                degenerate = true;
            }
        }
    }
    (out, degenerate)
}

/// Per-frame checks that must never fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Violations {
    pub not_spd: usize,
    pub row_sum: usize,
    pub weight_sum: usize,
    pub ground: usize,
}

impl Violations {
    pub const ROW_SUM_TOL: f64 = 1e-12;
    pub const WEIGHT_SUM_TOL: f64 = 1e-12;
    pub const GROUND_TOL: f64 = 0.05;

    pub fn total(&self) -> usize {
        self.not_spd + self.row_sum + self.weight_sum + self.ground
    }

    pub fn check(rec: &TraceRecord) -> Self {
        Self {
            not_spd: usize::from(!rec.spd),
            row_sum: usize::from(rec.row_sum_error.is_nan() || rec.row_sum_error > Self::ROW_SUM_TOL),
            weight_sum: usize::from(rec.weight_sum_error.is_nan() || rec.weight_sum_error > Self::WEIGHT_SUM_TOL),
            ground: usize::from(rec.ground_residual.is_nan() || rec.ground_residual >= Self::GROUND_TOL),
        }
    }

    fn add(&mut self, o: Self) {
        self.not_spd += o.not_spd;
        self.row_sum += o.row_sum;
        self.weight_sum += o.weight_sum;
        self.ground += o.ground;
    }
}

/// Scores of one run. Serialized as the metrics JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub scenario: Option<String>,
    pub method: String,
    pub alpha: Option<f64>,
    pub seed: Option<u64>,
    pub frames: usize,
    pub iou_xy: Vec<f64>,
    pub iou_yz: Vec<f64>,
    pub iou_zx: Vec<f64>,
    pub mean_iou_xy: f64,
    pub mean_iou_yz: f64,
    pub mean_iou_zx: f64,
    pub rmse_v: f64,
    pub degenerate_iou: usize,
    pub violations: Violations,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Compares a trace with the truth of the scenario it was run on.
pub fn evaluate(scenario: &Scenario, trace: &[TraceRecord], method: &str) -> Result<RunMetrics> {
    let truth: Vec<&GroundTruthFrame> = scenario.frames.iter().filter_map(|f| f.truth.as_ref()).collect();
    if truth.len() != scenario.frames.len() {
        return Err(EotError::Config("scenario has frames without truth".into()));
    }
    if truth.len() != trace.len() {
        return Err(eot_core::Error::LengthMismatch { expected: truth.len(), found: trace.len() }.into());
    }
    if let Some((gt, _)) = truth.iter().zip(trace).find(|(gt, r)| (gt.t - r.t).abs() > 1e-6) {
        return Err(EotError::Config(format!("trace has no record for t = {}", gt.t)));
    }
    let mut iou = [Vec::new(), Vec::new(), Vec::new()];
    let mut degenerate_iou = 0;
    let mut violations = Violations::default();
    for (gt, rec) in truth.iter().zip(trace) {
        let (v, deg) = frame_iou(gt, rec);
        for (s, x) in iou.iter_mut().zip(v) {
            s.push(x);
        }
        degenerate_iou += usize::from(deg);
        violations.add(Violations::check(rec));
    }
    let v_true: Vec<f64> = truth.iter().map(|g| g.v).collect();
    let v_est: Vec<f64> = trace.iter().map(|r| r.v).collect();
    let rmse_v = rmse_velocity(&v_true, &v_est)?;
    let meta = scenario.meta.as_ref();
    let [iou_xy, iou_yz, iou_zx] = iou;
    Ok(RunMetrics {
        scenario: meta.and_then(|m| m.kind).map(|k| k.name().to_string()),
        method: method.to_string(),
        alpha: meta.and_then(|m| m.alpha),
        seed: meta.and_then(|m| m.seed),
        frames: trace.len(),
        mean_iou_xy: mean(&iou_xy),
        mean_iou_yz: mean(&iou_yz),
        mean_iou_zx: mean(&iou_zx),
        iou_xy,
        iou_yz,
        iou_zx,
        rmse_v,
        degenerate_iou,
        violations,
    })
}

/// Where the scenarios of a run come from.
#[derive(Debug, Clone)]
pub enum ScenarioSource {
    /// Synthesized once per seed.
    Generated(Box<ScenarioParams>),
    /// A scenario file; the seed list only labels the result.
    File(PathBuf),
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub method: Method,
    pub config: ConfigFile,
    pub source: ScenarioSource,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: RunMetrics,
    pub trace_meta: TraceMeta,
    pub trace: Vec<TraceRecord>,
}

/// Track and score one scenario.
pub fn run_scenario(scenario: &Scenario, config: &ConfigFile, method: Method) -> Result<RunOutput> {
    let (mut hp, template) = tracker_setup(scenario.meta.as_ref(), config)?;
    method.apply(&mut hp);
    let trace = track(scenario, &hp, &template)?;
    let metrics = evaluate(scenario, &trace, &method.to_string())?;
    let trace_meta = TraceMeta { schema: TRACE_SCHEMA.to_string(), method: method.to_string() };
    Ok(RunOutput { metrics, trace_meta, trace })
}

/// All seeds, in parallel; results are in seed order.
pub fn run_experiment(cfg: &RunConfig) -> Result<Vec<RunOutput>> {
    match &cfg.source {
        ScenarioSource::Generated(params) => cfg
            .seeds
            .par_iter()
            .map(|&seed| run_scenario(&generate(params, seed), &cfg.config, cfg.method))
            .collect(),
        ScenarioSource::File(path) => {
            let sc = crate::io::load_scenario(path)?;
            let run = run_scenario(&sc, &cfg.config, cfg.method)?;
            Ok(vec![run])
        }
    }
}
