//! JSON configuration of the tracker.
//!
//! Every key is optional; missing keys keep [`Hyperparams::default`].
//! Matrices accept a scalar (times identity), a diagonal list, or a full
//! list of rows.
//!
//! ```json
//! { "q": 0.5, "q_cb": [5, 5], "lambda": 1.0, "epsilon": 100, "rho": 20,
//!   "n_vb": 3, "camera": {"fx": 1200, "fy": 1200, "u0": 960, "v0": 540},
//!   "ground": {"n": [0, -1, 0], "d": 6.0} }
//! ```

use crate::error::{io_at, EotError, Result};
use eot_core::vbtracker::{Constraints, InitConfig};
use eot_core::{CameraIntrinsics, GroundPlane, Hyperparams, MotionModel, SkeletonTemplate};
use nalgebra::{DMatrix, SMatrix, Vector2, Vector3};
use serde::Deserialize;
use std::path::Path;

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum MatSpec {
    Scalar(f64),
    Diag(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl MatSpec {
    pub fn to_fixed<const D: usize>(&self, key: &str) -> Result<SMatrix<f64, D, D>> {
        let m = match self {
            MatSpec::Scalar(s) => DMatrix::identity(D, D) * *s,
            MatSpec::Diag(d) if d.len() == D => DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(d)),
            MatSpec::Full(rows) if rows.len() == D && rows.iter().all(|r| r.len() == D) => {
                DMatrix::from_fn(D, D, |i, j| rows[i][j])
            }
            _ => return Err(EotError::Config(format!("`{key}` must be a scalar, {D} diagonal entries or {D}x{D} rows"))),
        };
        let m = SMatrix::<f64, D, D>::from_iterator(m.iter().copied());
        if (m - m.transpose()).amax() > 1e-12 {
            return Err(EotError::Config(format!("`{key}` is not symmetric")));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
pub struct ConstraintsFile {
    pub rotation: Option<bool>,
    pub ground: Option<bool>,
    pub symmetry: Option<bool>,
}

#[derive(Debug, Clone, Deserialize, Default)]
pub struct InitFile {
    pub p_diag: Option<Vec<f64>>,
    pub sigma_u: Option<f64>,
    pub sigma_knot: Option<f64>,
    pub sigma_vel: Option<f64>,
    pub speed: Option<f64>,
    pub heading: Option<[f64; 3]>,
    pub xi: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct GroundFile {
    pub n: [f64; 3],
    pub d: f64,
}

/// Raw configuration file.
#[derive(Debug, Clone, Deserialize, Default)]
pub struct ConfigFile {
    pub q: Option<MatSpec>,
    pub q_cb: Option<MatSpec>,
    pub q_cg: Option<MatSpec>,
    pub q_rot: Option<f64>,
    pub q_grnd: Option<f64>,
    pub q_sym: Option<MatSpec>,
    pub lambda: Option<f64>,
    pub epsilon: Option<f64>,
    pub rho: Option<f64>,
    pub n_vb: Option<usize>,
    pub w: Option<MatSpec>,
    pub w_theta: Option<MatSpec>,
    pub camera: Option<CameraIntrinsics>,
    pub ground: Option<GroundFile>,
    pub n_min: Option<f64>,
    pub reg: Option<f64>,
    pub motion: Option<MotionModel>,
    pub es_fusion: Option<bool>,
    pub constraints: Option<ConstraintsFile>,
    pub init: Option<InitFile>,
    pub template: Option<SkeletonTemplate>,
}

const KNOWN_KEYS: [&str; 21] = [
    "q", "q_cb", "q_cg", "q_rot", "q_grnd", "q_sym", "lambda", "epsilon", "rho", "n_vb", "w", "w_theta",
    "camera", "ground", "n_min", "reg", "motion", "es_fusion", "constraints", "init", "template",
];

fn positive(key: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(EotError::Config(format!("`{key}` must be positive")))
    }
}

fn spd<const D: usize>(key: &str, m: SMatrix<f64, D, D>) -> Result<SMatrix<f64, D, D>> {
    if m.cholesky().is_none() {
        return Err(EotError::Config(format!("`{key}` must be positive definite")));
    }
    Ok(m)
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text).map_err(|e| EotError::Config(e.to_string()))?;
        if let Some(obj) = v.as_object() {
            for k in obj.keys().filter(|k| !KNOWN_KEYS.contains(&k.as_str())) {
                log::warn!("config: ignoring unknown key `{k}`");
            }
        }
        serde_json::from_value(v).map_err(|e| EotError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_at(path))?;
        Self::parse(&text)
    }

    /// Applies the file on top of `base`.
    pub fn apply(&self, base: &Hyperparams) -> Result<Hyperparams> {
        let mut hp = base.clone();
        if let Some(m) = &self.q {
            hp.q = spd("q", m.to_fixed::<3>("q")?)?;
        }
        if let Some(m) = &self.q_cb {
            hp.q_cb = spd("q_cb", m.to_fixed::<2>("q_cb")?)?;
        }
        if let Some(m) = &self.q_cg {
            hp.q_cg = spd("q_cg", m.to_fixed::<2>("q_cg")?)?;
        }
        if let Some(m) = &self.q_sym {
            hp.q_sym = spd("q_sym", m.to_fixed::<3>("q_sym")?)?;
        }
        if let Some(v) = self.q_rot {
            hp.q_rot = positive("q_rot", v)?;
        }
        if let Some(v) = self.q_grnd {
            hp.q_grnd = positive("q_grnd", v)?;
        }
        if let Some(v) = self.lambda {
            hp.lambda = positive("lambda", v)?;
        }
        if let Some(v) = self.epsilon {
            if v < 0.0 {
                return Err(EotError::Config("`epsilon` must be non-negative".into()));
            }
            hp.epsilon = v;
        }
        if let Some(v) = self.rho {
            if v < 0.0 {
                return Err(EotError::Config("`rho` must be non-negative".into()));
            }
            hp.rho = v;
        }
        if let Some(v) = self.n_vb {
            hp.n_vb = v;
        }
        if let Some(m) = &self.w {
            hp.w = m.to_fixed::<12>("w")?;
        }
        if let Some(m) = &self.w_theta {
            hp.w_theta = m.to_fixed::<9>("w_theta")?;
        }
        if let Some(c) = &self.camera {
            hp.camera = CameraIntrinsics::new(c.fx, c.fy, c.u0, c.v0)?;
        }
        if let Some(g) = &self.ground {
            hp.ground = GroundPlane::new(Vector3::from(g.n), g.d)?;
        }
        if let Some(v) = self.n_min {
            hp.n_min = v;
        }
        if let Some(v) = self.reg {
            hp.reg = v;
        }
        if let Some(v) = self.motion {
            hp.motion = v;
        }
        if let Some(v) = self.es_fusion {
            hp.es_fusion = v;
        }
        if let Some(c) = &self.constraints {
            let d = hp.constraints;
            hp.constraints = Constraints {
                rotation: c.rotation.unwrap_or(d.rotation),
                ground: c.ground.unwrap_or(d.ground),
                symmetry: c.symmetry.unwrap_or(d.symmetry),
            };
        }
        if let Some(i) = &self.init {
            let d = &hp.init;
            let p_diag = match &i.p_diag {
                Some(v) if v.len() == 12 => eot_core::motion::ErrVec::from_column_slice(v),
                Some(_) => return Err(EotError::Config("`init.p_diag` needs 12 entries".into())),
                None => d.p_diag,
            };
            hp.init = InitConfig {
                p_diag,
                sigma_u: i.sigma_u.unwrap_or(d.sigma_u),
                sigma_knot: i.sigma_knot.unwrap_or(d.sigma_knot),
                sigma_vel: i.sigma_vel.unwrap_or(d.sigma_vel),
                speed: i.speed.unwrap_or(d.speed),
                heading: i.heading.map(Vector3::from).or(d.heading),
                xi: i.xi.map(Vector2::from).unwrap_or(d.xi),
            };
        }
        check_psd::<12>("w", &hp.w)?;
        check_psd::<9>("w_theta", &hp.w_theta)?;
        Ok(hp)
    }
}

fn check_psd<const D: usize>(key: &str, m: &SMatrix<f64, D, D>) -> Result<()> {
    let ev = nalgebra::DMatrix::from_column_slice(D, D, m.as_slice()).symmetric_eigenvalues();
    if ev.min() < -1e-12 {
        return Err(EotError::Config(format!("`{key}` must be positive semidefinite")));
    }
    Ok(())
}
