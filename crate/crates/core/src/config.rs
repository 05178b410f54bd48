//! JSON configuration: one document with dynamics, constraints, recovery
//! regions, MPC, detector, reasoner and scenario sections.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::ScoreKind;
use crate::dynamics::{DynamicsError, LinearDynamics, Polytope, RecoveryRegion};
use crate::embedding::{CacheBudget, HazardClass};
use crate::mpc::{MpcConfig, MpcError};
use crate::qp::{QpMethod, SolverSettings};
use crate::reasoner::{LatencyDist, MockConfig, ScriptedChoice};

pub const SCHEMA_VERSION: u32 = 1;

/// The default quadrotor configuration.
pub const SHIPPED_CONFIG: &str = include_str!("../configs/quadrotor.json");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed config: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported schema_version {0} (expected {SCHEMA_VERSION})")]
    Version(u32),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Mpc(#[from] MpcError),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DynamicsSpec {
    DoubleIntegrator { dt: f64, axes: usize },
    Linear { dt: f64, a: Vec<Vec<f64>>, b: Vec<Vec<f64>> },
}

/// A box (`null` bounds are unbounded) or explicit halfspaces `Hx ≤ b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SetSpec {
    Box { lower: Vec<Option<f64>>, upper: Vec<Option<f64>> },
    Halfspaces { h: Vec<Vec<f64>>, b: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintsSpec {
    pub state: SetSpec,
    pub input: SetSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSpec {
    pub label: String,
    pub set: SetSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    #[serde(default)]
    pub method: QpMethod,
    #[serde(default = "default_eps")]
    pub eps_abs: f64,
    #[serde(default = "default_eps")]
    pub eps_rel: f64,
    #[serde(default = "default_eps_inf")]
    pub eps_prim_inf: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

fn default_eps_inf() -> f64 {
    1e-8
}

fn default_eps() -> f64 {
    1e-6
}

fn default_max_iter() -> usize {
    20_000
}

impl Default for SolverSpec {
    fn default() -> Self {
        Self {
            method: QpMethod::default(),
            eps_abs: default_eps(),
            eps_rel: default_eps(),
            eps_prim_inf: default_eps_inf(),
            max_iter: default_max_iter(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcSpec {
    pub horizon: usize,
    pub consensus: usize,
    pub q_diag: Vec<f64>,
    pub r_diag: Vec<f64>,
    pub goal: Vec<f64>,
    pub min_combo: usize,
    pub slack_weight: f64,
    #[serde(default)]
    pub solver: SolverSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorMode {
    /// The flag fires exactly at the scripted anomaly tick.
    Oracle,
    /// Synthetic embeddings scored against a calibrated cache.
    Embedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSpec {
    pub mode: DetectorMode,
    pub score_fn: ScoreKind,
    #[serde(default = "one")]
    pub k: usize,
    pub alpha: f64,
    pub dim: usize,
    pub seed: u64,
    pub max_combo: usize,
    #[serde(default)]
    pub budget: Option<CacheBudget>,
    pub vocabulary: Vec<String>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReasonerSpec {
    pub latency: LatencyDist,
    pub k_max: u64,
    #[serde(default)]
    pub script: BTreeMap<String, ScriptedChoice>,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
}

fn default_max_tokens() -> usize {
    512
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HazardMix {
    #[serde(default)]
    pub none: f64,
    #[serde(default)]
    pub inconsequential: f64,
    #[serde(default)]
    pub consequential: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedScenario {
    pub x0: Vec<f64>,
    #[serde(default)]
    pub anomaly_tick: Option<u64>,
    #[serde(default)]
    pub hazard: HazardClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub episode_ticks: u64,
    pub x0_center: Vec<f64>,
    pub x0_half_width: Vec<f64>,
    pub anomaly_tick_min: u64,
    pub anomaly_tick_max: u64,
    /// Ticks during which the anomaly concept stays in view.
    pub anomaly_duration: u64,
    pub mix: HazardMix,
    /// Elementwise tolerance of the goal box around the goal state.
    pub goal_tolerance: Vec<f64>,
    /// Concepts seen in nominal flight; one to three per tick.
    pub scene_concepts: Vec<String>,
    pub inconsequential_concepts: Vec<String>,
    pub consequential_concepts: Vec<String>,
    #[serde(default)]
    pub named: BTreeMap<String, NamedScenario>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub schema_version: u32,
    pub dynamics: DynamicsSpec,
    pub constraints: ConstraintsSpec,
    pub recovery_regions: Vec<RegionSpec>,
    pub mpc: MpcSpec,
    pub detector: DetectorSpec,
    pub reasoner: ReasonerSpec,
    pub scenarios: ScenarioSpec,
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, ConfigError> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return invalid(format!("{what} must be a nonempty rectangular matrix"));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

impl SetSpec {
    pub fn to_polytope(&self, dim: usize, what: &str) -> Result<Polytope, ConfigError> {
        let p = match self {
            SetSpec::Box { lower, upper } => {
                if lower.len() != dim || upper.len() != dim {
                    return invalid(format!("{what}: box bounds must have length {dim}"));
                }
                let lo: Vec<f64> = lower.iter().map(|v| v.unwrap_or(f64::NEG_INFINITY)).collect();
                let hi: Vec<f64> = upper.iter().map(|v| v.unwrap_or(f64::INFINITY)).collect();
                Polytope::from_box(&lo, &hi)?
            }
            SetSpec::Halfspaces { h, b } => {
                let hm = matrix(h, what)?;
                if hm.ncols() != dim {
                    return invalid(format!("{what}: halfspaces must have {dim} columns"));
                }
                Polytope::new(hm, DVector::from_column_slice(b))?
            }
        };
        Ok(p)
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        // check the version before the full parse so old documents get a
        // version error rather than a field error
        let raw: serde_json::Value = serde_json::from_str(text)?;
        match raw.get("schema_version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(SCHEMA_VERSION) => {}
            Some(v) => return Err(ConfigError::Version(v as u32)),
            None => return invalid("missing schema_version"),
        }
        let cfg: Config = serde_json::from_value(raw)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn shipped() -> Self {
        Self::from_json(SHIPPED_CONFIG).expect("shipped config is valid")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn dynamics(&self) -> Result<LinearDynamics, ConfigError> {
        Ok(match &self.dynamics {
            DynamicsSpec::DoubleIntegrator { dt, axes } => LinearDynamics::double_integrator(*dt, *axes)?,
            DynamicsSpec::Linear { dt, a, b } => LinearDynamics::new(matrix(a, "a")?, matrix(b, "b")?, *dt)?,
        })
    }

    pub fn regions(&self) -> Result<Vec<RecoveryRegion>, ConfigError> {
        let n = self.dynamics()?.state_dim();
        self.recovery_regions
            .iter()
            .enumerate()
            .map(|(i, r)| {
                Ok(RecoveryRegion {
                    id: i + 1,
                    set: r.set.to_polytope(n, &format!("recovery region {}", i + 1))?,
                    label: r.label.clone(),
                })
            })
            .collect()
    }

    pub fn mpc_config(&self) -> Result<MpcConfig, ConfigError> {
        let dynamics = self.dynamics()?;
        let (n, m) = (dynamics.state_dim(), dynamics.input_dim());
        let s = &self.mpc;
        if s.q_diag.len() != n || s.r_diag.len() != m || s.goal.len() != n {
            return invalid(format!("mpc: q_diag and goal need length {n}, r_diag length {m}"));
        }
        let solver = SolverSettings {
            method: s.solver.method,
            eps_abs: s.solver.eps_abs,
            eps_rel: s.solver.eps_rel,
            eps_prim_inf: s.solver.eps_prim_inf,
            max_iter: s.solver.max_iter,
            ..SolverSettings::default()
        };
        let cfg = MpcConfig {
            state_set: self.constraints.state.to_polytope(n, "state constraints")?,
            input_set: self.constraints.input.to_polytope(m, "input constraints")?,
            recovery: self.regions()?,
            horizon: s.horizon,
            consensus: s.consensus,
            q: DMatrix::from_diagonal(&DVector::from_column_slice(&s.q_diag)),
            r: DMatrix::from_diagonal(&DVector::from_column_slice(&s.r_diag)),
            goal: DVector::from_column_slice(&s.goal),
            min_combo: s.min_combo,
            slack_weight: s.slack_weight,
            solver,
            dynamics,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn mock_config(&self) -> MockConfig {
        MockConfig {
            script: self.reasoner.script.clone(),
            latency: self.reasoner.latency,
            k_max: self.reasoner.k_max,
        }
    }

    pub fn cache_budget(&self) -> Option<CacheBudget> {
        self.detector.budget
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::Version(self.schema_version));
        }
        let mpc = self.mpc_config()?;
        let n = mpc.dynamics.state_dim();
        let d = mpc.num_regions();
        let det = &self.detector;
        if !(det.alpha > 0.0 && det.alpha < 1.0) {
            return invalid(format!("detector.alpha {} outside (0, 1)", det.alpha));
        }
        if det.vocabulary.is_empty() || det.max_combo == 0 || det.dim < crate::embedding::MIN_DIM {
            return invalid("detector needs a vocabulary, max_combo >= 1 and dim >= 8");
        }
        if det.score_fn == ScoreKind::TopK && det.k == 0 {
            return invalid("detector.k must be >= 1");
        }
        let r = &self.reasoner;
        if r.k_max == 0 {
            return invalid("reasoner.k_max must be >= 1");
        }
        crate::reasoner::MockReasoner::new(self.mock_config(), d, 0)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let sc = &self.scenarios;
        if sc.x0_center.len() != n || sc.x0_half_width.len() != n || sc.goal_tolerance.len() != n {
            return invalid(format!("scenarios: x0_center, x0_half_width and goal_tolerance need length {n}"));
        }
        if sc.x0_half_width.iter().chain(&sc.goal_tolerance).any(|v| !(*v >= 0.0)) {
            return invalid("scenarios: widths and tolerances must be nonnegative");
        }
        if sc.anomaly_tick_min > sc.anomaly_tick_max || sc.anomaly_tick_max >= sc.episode_ticks {
            return invalid("scenarios: anomaly ticks must satisfy min <= max < episode_ticks");
        }
        let mix = &sc.mix;
        let weights = [mix.none, mix.inconsequential, mix.consequential];
        if weights.iter().any(|w| !(*w >= 0.0)) || weights.iter().sum::<f64>() <= 0.0 {
            return invalid("scenarios.mix weights must be nonnegative and not all zero");
        }
        if sc.scene_concepts.is_empty() || sc.inconsequential_concepts.is_empty() || sc.consequential_concepts.is_empty() {
            return invalid("scenarios: concept lists must be nonempty");
        }
        for (name, s) in &sc.named {
            if s.x0.len() != n {
                return invalid(format!("scenario '{name}': x0 needs length {n}"));
            }
            if let HazardClass::Consequential { target } = s.hazard {
                if target == 0 || target > d {
                    return invalid(format!("scenario '{name}': target {target} outside 1..={d}"));
                }
            }
            if matches!(s.anomaly_tick, Some(t) if t >= sc.episode_ticks) {
                return invalid(format!("scenario '{name}': anomaly tick beyond the episode"));
            }
        }
        Ok(())
    }
}
