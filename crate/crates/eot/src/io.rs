//! Scenario and trace files (JSON Lines).
//!
//! Scenario: an optional `{"meta": {...}}` first line, then one object per
//! frame with `t`, `truth{p,q,v,omega,xi,knots}`, `radar` and
//! `keypoints[{kind,id,u,v}]`. Frame numbers are written in plain decimal
//! notation with 9 significant digits.

use crate::error::{io_at, EotError, Result};
use crate::scenario::{GroundTruthFrame, Scenario, ScenarioFrame, ScenarioMeta};
use eot_core::rotkit::Quat;
use eot_core::{FrameMeasurements, Keypoint, KeypointKind};
use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// Plain decimal with 9 significant digits, trailing zeros removed.
pub fn fmt_num(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        // non-finite values never reach the writers; keep the output valid JSON
        return "0".to_string();
    }
    let e = x.abs().log10().floor() as i32;
    let decimals = (8 - e).max(0) as usize;
    let mut s = format!("{x:.decimals$}");
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    if s == "-0" {
        s = "0".to_string();
    }
    s
}

fn push_arr(out: &mut String, xs: &[f64]) {
    out.push('[');
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&fmt_num(*x));
    }
    out.push(']');
}

fn push_vec_list(out: &mut String, xs: &[Vector3<f64>]) {
    out.push('[');
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        push_arr(out, x.as_slice());
    }
    out.push(']');
}

/// One frame as a JSON object on a single line.
pub fn frame_line(f: &ScenarioFrame) -> String {
    let mut s = String::with_capacity(1024);
    s.push_str("{\"t\":");
    s.push_str(&fmt_num(f.meas.t));
    if let Some(gt) = &f.truth {
        s.push_str(",\"truth\":{\"p\":");
        push_arr(&mut s, gt.p.as_slice());
        s.push_str(",\"q\":");
        push_arr(&mut s, &[gt.q.w, gt.q.v.x, gt.q.v.y, gt.q.v.z]);
        s.push_str(",\"v\":");
        s.push_str(&fmt_num(gt.v));
        s.push_str(",\"omega\":");
        push_arr(&mut s, gt.omega.as_slice());
        s.push_str(",\"xi\":");
        push_arr(&mut s, gt.xi.as_slice());
        s.push_str(",\"knots\":");
        push_vec_list(&mut s, &gt.knots);
        s.push('}');
    }
    s.push_str(",\"radar\":");
    push_vec_list(&mut s, &f.meas.radar);
    s.push_str(",\"keypoints\":[");
    for (i, k) in f.meas.keypoints.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let kind = match k.kind {
            KeypointKind::Knot => "knot",
            KeypointKind::Corner => "corner",
        };
        let _ = write!(s, "{{\"kind\":\"{kind}\",\"id\":{},\"u\":{},\"v\":{}}}", k.id, fmt_num(k.pixel.x), fmt_num(k.pixel.y));
    }
    s.push_str("]}");
    s
}

#[derive(Serialize, Deserialize)]
struct MetaLine {
    meta: ScenarioMeta,
}

pub fn write_scenario<W: Write>(mut w: W, sc: &Scenario) -> Result<()> {
    if let Some(meta) = &sc.meta {
        serde_json::to_writer(&mut w, &MetaLine { meta: meta.clone() })?;
        w.write_all(b"\n")?;
    }
    for f in &sc.frames {
        w.write_all(frame_line(f).as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_scenario(path: &Path, sc: &Scenario) -> Result<()> {
    let f = File::create(path).map_err(io_at(path))?;
    write_scenario(BufWriter::new(f), sc)
}

#[derive(Deserialize)]
struct TruthRecord {
    p: [f64; 3],
    q: [f64; 4],
    v: f64,
    omega: [f64; 3],
    xi: [f64; 2],
    knots: Vec<[f64; 3]>,
}

#[derive(Deserialize)]
struct KeypointRecord {
    kind: KeypointKind,
    id: usize,
    u: f64,
    v: f64,
}

#[derive(Deserialize)]
struct FrameRecord {
    t: f64,
    #[serde(default)]
    truth: Option<TruthRecord>,
    #[serde(default)]
    radar: Vec<[f64; 3]>,
    #[serde(default)]
    keypoints: Vec<KeypointRecord>,
}

const FRAME_KEYS: [&str; 4] = ["t", "truth", "radar", "keypoints"];
const TRUTH_KEYS: [&str; 6] = ["p", "q", "v", "omega", "xi", "knots"];

fn warn_unknown(v: &serde_json::Value, known: &[&str], line: usize, what: &str) {
    if let Some(obj) = v.as_object() {
        for k in obj.keys().filter(|k| !known.contains(&k.as_str())) {
            log::warn!("line {line}: ignoring unknown {what} field `{k}`");
        }
    }
}

fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

fn parse_frame(v: serde_json::Value, line: usize) -> Result<ScenarioFrame> {
    warn_unknown(&v, &FRAME_KEYS, line, "frame");
    if let Some(t) = v.get("truth") {
        warn_unknown(t, &TRUTH_KEYS, line, "truth");
    }
    let rec: FrameRecord = serde_json::from_value(v).map_err(|e| EotError::Parse { line, msg: e.to_string() })?;
    let truth = rec.truth.map(|t| GroundTruthFrame {
        t: rec.t,
        p: v3(t.p),
        q: Quat::new(t.q[0], t.q[1], t.q[2], t.q[3]),
        v: t.v,
        omega: v3(t.omega),
        xi: Vector2::new(t.xi[0], t.xi[1]),
        knots: t.knots.into_iter().map(v3).collect(),
    });
    let keypoints = rec
        .keypoints
        .into_iter()
        .map(|k| Keypoint { kind: k.kind, id: k.id, pixel: Vector2::new(k.u, k.v) })
        .collect();
    Ok(ScenarioFrame {
        truth,
        meas: FrameMeasurements { t: rec.t, radar: rec.radar.into_iter().map(v3).collect(), keypoints },
    })
}

pub fn read_scenario<R: BufRead>(r: R) -> Result<Scenario> {
    let mut sc = Scenario::default();
    for (i, line) in r.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| EotError::Parse { line: line_no, msg: e.to_string() })?;
        if let Some(meta) = v.get("meta") {
            if sc.meta.is_some() || !sc.frames.is_empty() {
                return Err(EotError::Parse { line: line_no, msg: "meta must be the first line".into() });
            }
            let meta: ScenarioMeta = serde_json::from_value(meta.clone())
                .map_err(|e| EotError::Parse { line: line_no, msg: e.to_string() })?;
            sc.meta = Some(meta);
            continue;
        }
        sc.frames.push(parse_frame(v, line_no)?);
    }
    Ok(sc)
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let f = File::open(path).map_err(io_at(path))?;
    read_scenario(BufReader::new(f)).map_err(|e| match e {
        EotError::Parse { line, msg } => EotError::Parse { line, msg: format!("{}: {msg}", path.display()) },
        other => other,
    })
}

pub const TRACE_SCHEMA: &str = "eot-trace/1";

/// Posterior of one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: f64,
    pub p: [f64; 3],
    pub q: [f64; 4],
    pub v: f64,
    pub omega: [f64; 3],
    pub xi: [f64; 2],
    /// Knot means, vehicle frame.
    pub knots: Vec<[f64; 3]>,
    /// Reflector means, vehicle frame.
    pub reflectors: Vec<[f64; 3]>,
    /// Diagonal of the error-state covariance.
    pub p_diag: Vec<f64>,
    /// Spectral condition number of the error-state covariance.
    pub cond_p: f64,
    /// Largest condition number among the skeleton covariances.
    pub cond_skeleton: f64,
    pub spd: bool,
    pub row_sum_error: f64,
    pub weight_sum_error: f64,
    pub ground_residual: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iou: Option<[f64; 3]>,
}

impl TraceRecord {
    pub fn state(&self) -> eot_core::KinematicState {
        eot_core::KinematicState {
            p: v3(self.p),
            v: self.v,
            theta: Quat::new(self.q[0], self.q[1], self.q[2], self.q[3]).log(),
            omega: v3(self.omega),
            xi: Vector2::new(self.xi[0], self.xi[1]),
        }
    }

    pub fn knots_vcs(&self) -> Vec<Vector3<f64>> {
        self.knots.iter().map(|k| v3(*k)).collect()
    }
}

/// Header of a trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub schema: String,
    pub method: String,
}

#[derive(Serialize, Deserialize)]
struct TraceMetaLine {
    meta: TraceMeta,
}

pub fn save_trace(path: &Path, meta: &TraceMeta, records: &[TraceRecord]) -> Result<()> {
    let f = File::create(path).map_err(io_at(path))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer(&mut w, &TraceMetaLine { meta: meta.clone() })?;
    w.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_trace(path: &Path) -> Result<(Option<TraceMeta>, Vec<TraceRecord>)> {
    let f = File::open(path).map_err(io_at(path))?;
    let mut meta = None;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| EotError::Parse { line: i + 1, msg: format!("{}: {e}", path.display()) };
        let v: serde_json::Value = serde_json::from_str(&line).map_err(parse_err)?;
        if v.get("meta").is_some() {
            meta = Some(serde_json::from_value::<TraceMetaLine>(v).map_err(parse_err)?.meta);
            continue;
        }
        out.push(serde_json::from_value(v).map_err(parse_err)?);
    }
    Ok((meta, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{generate, ScenarioParams};

    #[test]
    fn numbers_use_nine_significant_digits() {
        assert_eq!(fmt_num(0.0), "0");
        assert_eq!(fmt_num(-0.0), "0");
        assert_eq!(fmt_num(1.5), "1.5");
        assert_eq!(fmt_num(123456789.4), "123456789");
        assert_eq!(fmt_num(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_num(-2.0e-7), "-0.0000002");
        assert_eq!(fmt_num(1.23456789012e-12), "0.00000000000123456789");
        assert_eq!(fmt_num(9.9999999999), "10");
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let sc = generate(&ScenarioParams::u_turn(5.0), 7);
        let mut a = Vec::new();
        write_scenario(&mut a, &sc).unwrap();
        let back = read_scenario(&a[..]).unwrap();
        let mut b = Vec::new();
        write_scenario(&mut b, &back).unwrap();
        assert_eq!(a, b);
        assert_eq!(back.frames.len(), sc.frames.len());
        assert_eq!(back.meta, sc.meta);
        for (x, y) in sc.frames.iter().zip(&back.frames) {
            let (tx, ty) = (x.truth.as_ref().unwrap(), y.truth.as_ref().unwrap());
            assert!((tx.p - ty.p).amax() <= 1e-8 * tx.p.amax());
            assert_eq!(x.meas.radar.len(), y.meas.radar.len());
            assert_eq!(x.meas.keypoints.len(), y.meas.keypoints.len());
        }
    }

    #[test]
    fn empty_input_is_an_empty_scenario() {
        let sc = read_scenario(&b""[..]).unwrap();
        assert!(sc.frames.is_empty());
        assert!(sc.meta.is_none());
    }

    #[test]
    fn malformed_lines_report_their_number() {
        let text = "{\"t\":0,\"radar\":[],\"keypoints\":[]}\n{\"t\":oops}\n";
        match read_scenario(text.as_bytes()) {
            Err(EotError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let text = "{\"t\":0,\"radar\":[[1,2]],\"keypoints\":[]}\n";
        assert!(matches!(read_scenario(text.as_bytes()), Err(EotError::Parse { line: 1, .. })));
    }

    #[test]
    fn unknown_fields_are_ignored() {
        let text = "{\"t\":0.1,\"radar\":[[1,2,3]],\"keypoints\":[{\"kind\":\"corner\",\"id\":2,\"u\":5,\"v\":6,\"score\":0.9}],\"extra\":1}\n";
        let sc = read_scenario(text.as_bytes()).unwrap();
        assert_eq!(sc.frames.len(), 1);
        assert_eq!(sc.frames[0].meas.keypoints[0], Keypoint::corner(2, Vector2::new(5.0, 6.0)));
        assert!(sc.frames[0].truth.is_none());
    }
}
