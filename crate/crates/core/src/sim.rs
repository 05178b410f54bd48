//! Closed-loop simulation: the monitor-driven contingency controller, the
//! naive and K = 0 fallback baselines, scenario generation, traces and
//! metrics.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use nalgebra::DVector;
use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Config, ConfigError, DetectorMode};
use crate::detector::{Classification, Detector, DetectorError, ScoreFn};
use crate::dynamics::DynamicsError;
use crate::embedding::{build_nominal_cache, concept_embed, EmbeddingError, HazardClass, Observation};
use crate::mpc::{MpcConfig, MpcError, PlanTree, Planner};
use crate::reasoner::{MockReasoner, ReasonerError, ReasonerHandle, ReasonerPoll, SlowReasoner};

/// Membership tolerance for closed-loop constraint checks.
pub const SIM_TOL: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error(transparent)]
    Mpc(#[from] MpcError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Reasoner(#[from] ReasonerError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("invalid scenario: {0}")]
    Scenario(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Aesop,
    Naive,
    Fsmpc,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Aesop, Method::Naive, Method::Fsmpc];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Aesop => "aesop",
            Method::Naive => "naive",
            Method::Fsmpc => "fsmpc",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "aesop" => Ok(Method::Aesop),
            "naive" => Ok(Method::Naive),
            "fsmpc" => Ok(Method::Fsmpc),
            _ => Err(format!("unknown method '{s}' (expected aesop, naive or fsmpc)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Nominal,
    Awaiting,
    Recovering,
    Done,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Nominal => "nominal",
            Mode::Awaiting => "awaiting",
            Mode::Recovering => "recovering",
            Mode::Done => "done",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub name: Option<String>,
    pub seed: u64,
    pub x0: Vec<f64>,
    pub anomaly_tick: Option<u64>,
    pub hazard: HazardClass,
    /// Concept shown while the anomaly is in view.
    #[serde(default)]
    pub anomaly_concept: Option<String>,
}

impl Scenario {
    pub fn validate(&self, cfg: &Config, d: usize) -> Result<(), SimError> {
        let n = cfg.scenarios.x0_center.len();
        if self.x0.len() != n || self.x0.iter().any(|v| !v.is_finite()) {
            return Err(SimError::Scenario(format!("x0 must be {n} finite values")));
        }
        if matches!(self.anomaly_tick, Some(t) if t >= cfg.scenarios.episode_ticks) {
            return Err(SimError::Scenario("anomaly tick beyond the episode".into()));
        }
        if let HazardClass::Consequential { target } = self.hazard {
            if target == 0 || target > d {
                return Err(SimError::Scenario(format!("target {target} outside 1..={d}")));
            }
        }
        Ok(())
    }

    fn anomaly_in_view(&self, t: u64, duration: u64) -> bool {
        match self.anomaly_tick {
            Some(a) => self.hazard != HazardClass::None && t >= a && t < a + duration.max(1),
            None => false,
        }
    }

    /// The observation at tick `t`. Nominal ticks show one to `max_combo`
    /// scene concepts; while an anomaly is in view the scene is its concept
    /// alone.
    pub fn observation(&self, cfg: &Config, t: u64) -> Observation {
        let sc = &cfg.scenarios;
        if self.anomaly_in_view(t, sc.anomaly_duration) {
            let concept = self.anomaly_concept.clone().unwrap_or_else(|| match self.hazard {
                HazardClass::Inconsequential => sc.inconsequential_concepts[0].clone(),
                _ => sc.consequential_concepts[0].clone(),
            });
            return Observation::new([concept], t).with_hazard(self.hazard);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ t.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let max = cfg.detector.max_combo.min(3).min(sc.scene_concepts.len()).max(1);
        let count = rng.gen_range(1..=max);
        let picks = rand::seq::index::sample(&mut rng, sc.scene_concepts.len(), count);
        Observation::new(picks.iter().map(|i| sc.scene_concepts[i].clone()), t)
    }
}

/// Seeded scenario list: uniform `x0` in the configured box with the
/// configured velocities, uniform anomaly tick, hazard class by the mix
/// weights and a uniform consequential target.
pub fn generate_scenarios(n: usize, cfg: &Config, seed: u64) -> Result<Vec<Scenario>, SimError> {
    if n == 0 {
        return Err(SimError::Scenario("n must be at least 1".into()));
    }
    let sc = &cfg.scenarios;
    let d = cfg.recovery_regions.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mix = WeightedIndex::new([sc.mix.none, sc.mix.inconsequential, sc.mix.consequential])
        .map_err(|e| SimError::Scenario(e.to_string()))?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let scenario_seed: u64 = rng.gen();
        let x0 = sc
            .x0_center
            .iter()
            .zip(&sc.x0_half_width)
            .map(|(&c, &w)| if w > 0.0 { rng.gen_range(c - w..=c + w) } else { c })
            .collect();
        let tick = rng.gen_range(sc.anomaly_tick_min..=sc.anomaly_tick_max);
        let (hazard, concept) = match mix.sample(&mut rng) {
            0 => (HazardClass::None, None),
            1 => (HazardClass::Inconsequential, sc.inconsequential_concepts.choose(&mut rng).cloned()),
            _ => {
                let target = rng.gen_range(1..=d);
                (HazardClass::Consequential { target }, sc.consequential_concepts.choose(&mut rng).cloned())
            }
        };
        out.push(Scenario {
            name: None,
            seed: scenario_seed,
            x0,
            anomaly_tick: (hazard != HazardClass::None).then_some(tick),
            hazard,
            anomaly_concept: concept,
        });
    }
    Ok(out)
}

/// A named scenario from the config.
pub fn named_scenario(cfg: &Config, name: &str, seed: u64) -> Option<Scenario> {
    let s = cfg.scenarios.named.get(name)?;
    let sc = &cfg.scenarios;
    let concept = match s.hazard {
        HazardClass::None => None,
        HazardClass::Inconsequential => sc.inconsequential_concepts.first().cloned(),
        HazardClass::Consequential { .. } => sc.consequential_concepts.first().cloned(),
    };
    Some(Scenario {
        name: Some(name.to_string()),
        seed,
        x0: s.x0.clone(),
        anomaly_tick: if s.hazard == HazardClass::None { None } else { s.anomaly_tick },
        hazard: s.hazard,
        anomaly_concept: concept,
    })
}

/// The fast anomaly monitor used in closed loop.
#[derive(Debug, Clone)]
pub enum Monitor {
    /// Fires exactly at the scenario's anomaly tick.
    Oracle,
    Embedding { detector: Detector, dim: usize, seed: u64 },
}

impl Monitor {
    pub fn from_config(cfg: &Config) -> Result<Self, SimError> {
        let det = &cfg.detector;
        Ok(match det.mode {
            DetectorMode::Oracle => Monitor::Oracle,
            DetectorMode::Embedding => {
                let cache = build_nominal_cache(&det.vocabulary, det.max_combo, det.dim, det.seed, det.budget)?;
                let f = ScoreFn::from_parts(det.score_fn, det.k)?;
                Monitor::Embedding {
                    detector: Detector::calibrate(cache, f, det.alpha)?,
                    dim: det.dim,
                    seed: det.seed,
                }
            }
        })
    }

    /// Score (embedding mode only) and anomaly flag at tick `t`.
    pub fn check(&self, obs: &Observation, scenario: &Scenario, t: u64) -> Result<(Option<f64>, bool), SimError> {
        match self {
            Monitor::Oracle => Ok((None, scenario.anomaly_tick == Some(t))),
            Monitor::Embedding { detector, dim, seed } => {
                let e = concept_embed(obs, *dim, *seed)?;
                let (s, c) = detector.classify(&e)?;
                Ok((Some(s), c == Classification::Anomaly))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub t: u64,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub mode: Mode,
    pub score: Option<f64>,
    pub flag: bool,
    /// Recovery sets constraining the plan applied at this tick.
    pub y_set: Vec<usize>,
    /// Reasoner decision once available.
    pub decision: Option<usize>,
    pub k_rem: Option<usize>,
    pub t_rem: Option<usize>,
    /// Total slack of a relaxed solve, zero for hard solves.
    pub slack: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Outcome {
    ReachedGoal,
    Recovered { region: usize },
    Violated,
    UndecidedTimeout,
    /// The episode ended without reaching the goal and without a recovery
    /// decision.
    Incomplete,
}

impl Outcome {
    pub fn name(&self) -> &'static str {
        match self {
            Outcome::ReachedGoal => "reached_goal",
            Outcome::Recovered { .. } => "recovered",
            Outcome::Violated => "violated",
            Outcome::UndecidedTimeout => "undecided_timeout",
            Outcome::Incomplete => "incomplete",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub method: Method,
    pub scenario: Scenario,
    pub records: Vec<TickRecord>,
    /// State after the last applied input.
    pub final_state: Vec<f64>,
    pub t_anom: Option<u64>,
    /// Recovery sets offered to the reasoner.
    pub options: Vec<usize>,
    pub decision: Option<usize>,
    pub decision_tick: Option<u64>,
    pub outcome: Outcome,
    pub warnings: Vec<String>,
}

impl Trace {
    /// All visited states, including the final one.
    pub fn states(&self) -> impl Iterator<Item = &[f64]> {
        self.records.iter().map(|r| r.x.as_slice()).chain(std::iter::once(self.final_state.as_slice()))
    }
}

/// A trace together with its wall-clock solve times, kept apart so traces
/// stay reproducible.
#[derive(Debug, Clone)]
pub struct Run {
    pub trace: Trace,
    pub solve_ms: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
enum Phase {
    Nominal,
    Awaiting { t_anom: u64, handle: ReasonerHandle },
    Recovering { y: usize, start: u64 },
    Stopped,
}

struct Episode<'a> {
    sim: &'a Simulator,
    x: DVector<f64>,
    records: Vec<TickRecord>,
    warnings: Vec<String>,
    solve_ms: Vec<f64>,
    violations: usize,
    outcome: Option<Outcome>,
    t_anom: Option<u64>,
    options: Vec<usize>,
    decision: Option<usize>,
    decision_tick: Option<u64>,
    timed_out: bool,
}

impl<'a> Episode<'a> {
    fn new(sim: &'a Simulator, scenario: &Scenario) -> Self {
        Self {
            sim,
            x: DVector::from_column_slice(&scenario.x0),
            records: Vec::new(),
            warnings: Vec::new(),
            solve_ms: Vec::new(),
            violations: 0,
            outcome: None,
            t_anom: None,
            options: Vec::new(),
            decision: None,
            decision_tick: None,
            timed_out: false,
        }
    }

    fn timed<T>(&mut self, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.solve_ms.push(start.elapsed().as_secs_f64() * 1e3);
        out
    }

    fn apply(&mut self, mut rec: TickRecord, u: &DVector<f64>) -> Result<(), SimError> {
        let mpc = &self.sim.mpc;
        if !mpc.state_set.contains(&self.x, SIM_TOL)? || !mpc.input_set.contains(u, SIM_TOL)? {
            self.violations += 1;
        }
        rec.x = self.x.as_slice().to_vec();
        rec.u = u.as_slice().to_vec();
        rec.decision = self.decision;
        self.records.push(rec);
        self.x = mpc.dynamics.step(&self.x, u)?;
        Ok(())
    }

    fn in_region(&self, y: usize) -> Result<bool, SimError> {
        let region = self.sim.mpc.region(y).expect("checked");
        Ok(region.set.contains(&self.x, SIM_TOL)?)
    }

    fn finish(mut self, method: Method, scenario: &Scenario, pending: bool) -> Result<Run, SimError> {
        // the final state is checked like every other visited state
        if !self.sim.mpc.state_set.contains(&self.x, SIM_TOL)? {
            self.violations += 1;
        }
        let outcome = match self.outcome {
            Some(o) => o,
            None if self.violations > 0 => Outcome::Violated,
            None => match self.decision {
                Some(y) if y > 0 => {
                    if self.in_region(y)? {
                        Outcome::Recovered { region: y }
                    } else {
                        Outcome::Violated
                    }
                }
                _ if pending || self.timed_out => Outcome::UndecidedTimeout,
                _ => Outcome::Incomplete,
            },
        };
        let outcome = if self.violations > 0 && outcome != Outcome::Violated {
            Outcome::Violated
        } else {
            outcome
        };
        Ok(Run {
            trace: Trace {
                method,
                scenario: scenario.clone(),
                records: self.records,
                final_state: self.x.as_slice().to_vec(),
                t_anom: self.t_anom,
                options: self.options,
                decision: self.decision,
                decision_tick: self.decision_tick,
                outcome,
                warnings: self.warnings,
            },
            solve_ms: self.solve_ms,
        })
    }
}

fn record(t: u64, mode: Mode, score: Option<f64>, flag: bool) -> TickRecord {
    TickRecord {
        t,
        x: Vec::new(),
        u: Vec::new(),
        mode,
        score,
        flag,
        y_set: Vec::new(),
        decision: None,
        k_rem: None,
        t_rem: None,
        slack: 0.0,
    }
}

/// Owns the config, the planners and the monitor; reusable across
/// scenarios.
pub struct Simulator {
    cfg: Config,
    mpc: MpcConfig,
    planner: Planner,
    /// Same problem with no latency consensus.
    fs_planner: Planner,
    monitor: Monitor,
}

impl Simulator {
    pub fn new(cfg: Config) -> Result<Self, SimError> {
        let monitor = Monitor::from_config(&cfg)?;
        Self::with_monitor(cfg, monitor)
    }

    pub fn with_monitor(cfg: Config, monitor: Monitor) -> Result<Self, SimError> {
        cfg.validate()?;
        let mpc = cfg.mpc_config()?;
        let mut fs = mpc.clone();
        fs.consensus = 0;
        Ok(Self {
            planner: Planner::new(mpc.clone())?,
            fs_planner: Planner::new(fs)?,
            mpc,
            cfg,
            monitor,
        })
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn mpc(&self) -> &MpcConfig {
        &self.mpc
    }

    pub fn planner(&mut self) -> &mut Planner {
        &mut self.planner
    }

    pub fn monitor(&self) -> &Monitor {
        &self.monitor
    }

    pub fn mock_reasoner(&self, scenario: &Scenario) -> Result<MockReasoner, SimError> {
        Ok(MockReasoner::new(self.cfg.mock_config(), self.mpc.num_regions(), scenario.seed)?)
    }

    fn at_goal(&self, x: &DVector<f64>) -> bool {
        let tol = &self.cfg.scenarios.goal_tolerance;
        x.iter()
            .zip(self.mpc.goal.iter())
            .zip(tol)
            .all(|((v, g), t)| (v - g).abs() <= *t)
    }

    fn reset(&mut self) {
        self.planner.clear_warm_starts();
        self.fs_planner.clear_warm_starts();
    }

    pub fn run(&mut self, method: Method, scenario: &Scenario, reasoner: &mut dyn SlowReasoner) -> Result<Run, SimError> {
        match method {
            Method::Aesop => self.run_aesop(scenario, reasoner),
            Method::Naive => self.run_naive(scenario, reasoner),
            Method::Fsmpc => self.run_fsmpc(scenario, reasoner),
        }
    }

    /// Runs with a mock reasoner seeded from the scenario.
    pub fn run_mock(&mut self, method: Method, scenario: &Scenario) -> Result<Run, SimError> {
        let mut reasoner = self.mock_reasoner(scenario)?;
        self.run(method, scenario, &mut reasoner)
    }

    /// The closed loop with latency-aware consensus: per-tick recovery-set
    /// selection while nominal, the frozen set with shrinking horizons while
    /// awaiting, and the chosen branch once decided.
    pub fn run_aesop(&mut self, scenario: &Scenario, reasoner: &mut dyn SlowReasoner) -> Result<Run, SimError> {
        scenario.validate(&self.cfg, self.mpc.num_regions())?;
        self.reset();
        let x0 = DVector::from_column_slice(&scenario.x0);
        let (k_full, t_full) = (self.mpc.consensus, self.mpc.horizon);
        let ticks = self.cfg.scenarios.episode_ticks;
        let mut planner = std::mem::replace(&mut self.planner, Planner::new(self.mpc.clone())?);
        let result = (|| {
            // precondition: some recovery set is feasible at x0.
            if !self.mpc.state_set.contains(&x0, SIM_TOL)? {
                return Err(SimError::Precondition("x0 violates the state constraints".into()));
            }
            match planner.select_recovery_sets(&x0, None) {
                Ok(_) => {}
                Err(MpcError::NoFeasibleCandidate) => {
                    return Err(SimError::Precondition("no recovery set is feasible at x0".into()))
                }
                Err(e) => return Err(e.into()),
            }
            planner.clear_warm_starts();
            let sim = &*self;
            let mut ep = Episode::new(sim, scenario);
            let mut prev: Option<PlanTree> = None;
            let mut frozen: Vec<usize> = Vec::new();
            let mut phase = Phase::Nominal;
            for t in 0..ticks {
                let obs = scenario.observation(&sim.cfg, t);
                let (score, flag) = sim.monitor.check(&obs, scenario, t)?;
                loop {
                    match phase {
                        Phase::Stopped => break,
                        Phase::Nominal => {
                            if sim.at_goal(&ep.x) {
                                ep.outcome = Some(Outcome::ReachedGoal);
                                phase = Phase::Stopped;
                                break;
                            }
                            let x = ep.x.clone();
                            let sel = ep.timed(|| planner.select_recovery_sets(&x, prev.as_ref()));
                            let (ys, plan) = match sel {
                                Ok(v) => v,
                                Err(MpcError::NoFeasibleCandidate) => {
                                    ep.warnings.push(format!("t={t}: no feasible recovery set"));
                                    ep.outcome = Some(Outcome::Violated);
                                    phase = Phase::Stopped;
                                    break;
                                }
                                Err(e) => return Err(e.into()),
                            };
                            let mut rec = record(t, Mode::Nominal, score, flag);
                            rec.y_set = ys.clone();
                            rec.k_rem = Some(plan.consensus_len);
                            rec.t_rem = Some(plan.horizon);
                            if flag {
                                let handle = reasoner.start(&obs, &ys, t)?;
                                ep.t_anom = Some(t);
                                ep.options = ys.clone();
                                frozen = ys;
                                phase = Phase::Awaiting { t_anom: t, handle };
                            }
                            let u = plan.first_input().expect("horizon >= 1").clone();
                            ep.apply(rec, &u)?;
                            prev = Some(plan);
                            break;
                        }
                        Phase::Awaiting { t_anom, handle } => {
                            match reasoner.poll(&handle, t)? {
                                ReasonerPoll::Done(dec) => {
                                    ep.decision = Some(dec.y);
                                    ep.decision_tick = Some(t);
                                    phase = if dec.y == 0 {
                                        Phase::Nominal
                                    } else {
                                        Phase::Recovering { y: dec.y, start: t_anom }
                                    };
                                    continue;
                                }
                                ReasonerPoll::Failed(msg) => {
                                    ep.warnings.push(format!("t={t}: reasoner failed: {msg}"));
                                    ep.timed_out = true;
                                    phase = Phase::Stopped;
                                    break;
                                }
                                ReasonerPoll::Pending => {}
                            }
                            let k = (t - t_anom) as usize;
                            if k >= t_full {
                                ep.warnings.push(format!("t={t}: reasoner still pending at the horizon"));
                                ep.timed_out = true;
                                phase = Phase::Stopped;
                                break;
                            }
                            if k >= k_full && !ep.timed_out {
                                ep.warnings.push(format!("t={t}: reasoner exceeded the consensus horizon"));
                                ep.timed_out = true;
                            }
                            let (k_rem, t_rem) = (k_full.saturating_sub(k), t_full - k);
                            let x = ep.x.clone();
                            let ys = frozen.clone();
                            let solved = ep.timed(|| planner.solve(&x, &ys, k_rem, t_rem))?;
                            let plan = match solved {
                                Some(p) => p,
                                None => match prev.as_ref().and_then(PlanTree::advance) {
                                    Some(p) => {
                                        ep.warnings.push(format!("t={t}: awaiting solve failed, shifted previous plan"));
                                        p
                                    }
                                    None => {
                                        ep.outcome = Some(Outcome::Violated);
                                        phase = Phase::Stopped;
                                        break;
                                    }
                                },
                            };
                            let mut rec = record(t, Mode::Awaiting, score, flag);
                            rec.y_set = plan.recovery_set();
                            rec.k_rem = Some(plan.consensus_len);
                            rec.t_rem = Some(plan.horizon);
                            let u = plan.first_input().expect("horizon >= 1").clone();
                            ep.apply(rec, &u)?;
                            prev = Some(plan);
                            break;
                        }
                        Phase::Recovering { y, start } => {
                            let k = (t - start) as usize;
                            let t_rem = t_full.saturating_sub(k);
                            if t_rem == 0 {
                                if !ep.in_region(y)? {
                                    ep.outcome = Some(Outcome::Violated);
                                    phase = Phase::Stopped;
                                    break;
                                }
                                let x = ep.x.clone();
                                let hold = ep.timed(|| planner.hold_input(&x, y))?;
                                let Some(u) = hold else {
                                    ep.warnings.push(format!("t={t}: no input keeps the state in region {y}"));
                                    ep.outcome = Some(Outcome::Violated);
                                    phase = Phase::Stopped;
                                    break;
                                };
                                let mut rec = record(t, Mode::Done, score, flag);
                                rec.y_set = vec![y];
                                rec.k_rem = Some(0);
                                rec.t_rem = Some(0);
                                ep.apply(rec, &u)?;
                                break;
                            }
                            let x = ep.x.clone();
                            let solved = ep.timed(|| planner.solve(&x, &[y], 0, t_rem))?;
                            let plan = match solved {
                                Some(p) => p,
                                None => match prev.as_ref().and_then(PlanTree::advance).filter(|p| p.branches.contains_key(&y)) {
                                    Some(p) => {
                                        ep.warnings.push(format!("t={t}: recovery solve failed, shifted previous plan"));
                                        p
                                    }
                                    None => {
                                        ep.outcome = Some(Outcome::Violated);
                                        phase = Phase::Stopped;
                                        break;
                                    }
                                },
                            };
                            let mut rec = record(t, Mode::Recovering, score, flag);
                            rec.y_set = vec![y];
                            rec.k_rem = Some(0);
                            rec.t_rem = Some(t_rem);
                            let u = plan.branches[&y].inputs[0].clone();
                            ep.apply(rec, &u)?;
                            prev = Some(plan);
                            break;
                        }
                    }
                }
                if matches!(phase, Phase::Stopped) {
                    break;
                }
            }
            let pending = matches!(phase, Phase::Awaiting { .. });
            ep.finish(Method::Aesop, scenario, pending)
        })();
        self.planner = planner;
        result
    }

    /// Nominal-only planning until the decision, then a hard-then-relaxed
    /// recovery solve with a horizon shrinking from the decision tick.
    pub fn run_naive(&mut self, scenario: &Scenario, reasoner: &mut dyn SlowReasoner) -> Result<Run, SimError> {
        self.run_baseline(Method::Naive, scenario, reasoner)
    }

    /// Recovery branches with first-input consensus only; nominal operation
    /// continues while awaiting and the chosen set is engaged at the
    /// decision.
    pub fn run_fsmpc(&mut self, scenario: &Scenario, reasoner: &mut dyn SlowReasoner) -> Result<Run, SimError> {
        self.run_baseline(Method::Fsmpc, scenario, reasoner)
    }

    fn run_baseline(&mut self, method: Method, scenario: &Scenario, reasoner: &mut dyn SlowReasoner) -> Result<Run, SimError> {
        scenario.validate(&self.cfg, self.mpc.num_regions())?;
        self.reset();
        let mut fs = self.mpc.clone();
        fs.consensus = 0;
        let mut planner = std::mem::replace(&mut self.fs_planner, Planner::new(fs)?);
        let result = (|| {
            let sim = &*self;
            let d = sim.mpc.num_regions();
            let t_full = sim.mpc.horizon;
            let ticks = sim.cfg.scenarios.episode_ticks;
            let mut ep = Episode::new(sim, scenario);
            let mut prev: Option<PlanTree> = None;
            let mut phase = Phase::Nominal;
            for t in 0..ticks {
                let obs = scenario.observation(&sim.cfg, t);
                let (score, flag) = sim.monitor.check(&obs, scenario, t)?;
                loop {
                    let awaiting = match phase {
                        Phase::Stopped => break,
                        Phase::Recovering { y, start } => {
                            let k = (t - start) as usize;
                            let t_rem = t_full.saturating_sub(k);
                            if t_rem == 0 && !ep.in_region(y)? {
                                ep.outcome = Some(Outcome::Violated);
                                phase = Phase::Stopped;
                                break;
                            }
                            let x = ep.x.clone();
                            let (u, slack, mode) = if t_rem == 0 {
                                let hold = ep.timed(|| planner.hold_input(&x, y))?;
                                match hold {
                                    Some(u) => (u, 0.0, Mode::Done),
                                    None => {
                                        ep.outcome = Some(Outcome::Violated);
                                        phase = Phase::Stopped;
                                        break;
                                    }
                                }
                            } else {
                                let hard = ep.timed(|| planner.solve(&x, &[y], 0, t_rem))?;
                                match hard {
                                    Some(p) => (p.branches[&y].inputs[0].clone(), 0.0, Mode::Recovering),
                                    None => {
                                        let relaxed = ep.timed(|| planner.solve_relaxed(&x, &[y], 0, t_rem))?;
                                        let s = relaxed.total_slack();
                                        (relaxed.plan.branches[&y].inputs[0].clone(), s, Mode::Recovering)
                                    }
                                }
                            };
                            let mut rec = record(t, mode, score, flag);
                            rec.y_set = vec![y];
                            rec.k_rem = Some(0);
                            rec.t_rem = Some(t_rem);
                            rec.slack = slack;
                            ep.apply(rec, &u)?;
                            break;
                        }
                        Phase::Awaiting { t_anom, handle } => {
                            match reasoner.poll(&handle, t)? {
                                ReasonerPoll::Done(dec) => {
                                    ep.decision = Some(dec.y);
                                    ep.decision_tick = Some(t);
                                    phase = if dec.y == 0 {
                                        Phase::Nominal
                                    } else {
                                        Phase::Recovering { y: dec.y, start: t }
                                    };
                                    continue;
                                }
                                ReasonerPoll::Failed(msg) => {
                                    ep.warnings.push(format!("t={t}: reasoner failed: {msg}"));
                                    ep.timed_out = true;
                                    phase = Phase::Stopped;
                                    break;
                                }
                                ReasonerPoll::Pending => {}
                            }
                            let k = (t - t_anom) as usize;
                            if k >= t_full {
                                ep.warnings.push(format!("t={t}: reasoner still pending at the horizon"));
                                ep.timed_out = true;
                                phase = Phase::Stopped;
                                break;
                            }
                            true
                        }
                        Phase::Nominal => {
                            if sim.at_goal(&ep.x) {
                                ep.outcome = Some(Outcome::ReachedGoal);
                                phase = Phase::Stopped;
                                break;
                            }
                            false
                        }
                    };
                    // nominal operation, also while awaiting
                    let x = ep.x.clone();
                    let (ys, u, slack, k_rem, t_rem) = match method {
                        Method::Naive => {
                            let hard = ep.timed(|| planner.solve(&x, &[], 0, t_full))?;
                            match hard {
                                Some(p) => (Vec::new(), p.nominal.inputs[0].clone(), 0.0, 0, t_full),
                                None => {
                                    let r = ep.timed(|| planner.solve_relaxed(&x, &[], 0, t_full))?;
                                    (Vec::new(), r.plan.nominal.inputs[0].clone(), r.total_slack(), 0, t_full)
                                }
                            }
                        }
                        _ => {
                            let sel = ep.timed(|| planner.select_recovery_sets(&x, prev.as_ref()));
                            match sel {
                                Ok((ys, p)) => {
                                    let u = p.nominal.inputs[0].clone();
                                    let (k, h) = (p.consensus_len, p.horizon);
                                    prev = Some(p);
                                    (ys, u, 0.0, k, h)
                                }
                                Err(MpcError::NoFeasibleCandidate) => {
                                    // keep flying the nominal plan, slack-relaxed if needed
                                    prev = None;
                                    let r = ep.timed(|| planner.solve_relaxed(&x, &[], 0, t_full))?;
                                    (Vec::new(), r.plan.nominal.inputs[0].clone(), r.total_slack(), 0, t_full)
                                }
                                Err(e) => return Err(e.into()),
                            }
                        }
                    };
                    let mode = if awaiting { Mode::Awaiting } else { Mode::Nominal };
                    let mut rec = record(t, mode, score, flag);
                    rec.y_set = ys.clone();
                    rec.k_rem = Some(k_rem);
                    rec.t_rem = Some(t_rem);
                    rec.slack = slack;
                    if !awaiting && flag {
                        let options = if method == Method::Naive || ys.is_empty() {
                            (1..=d).collect()
                        } else {
                            ys
                        };
                        let handle = reasoner.start(&obs, &options, t)?;
                        ep.t_anom = Some(t);
                        ep.options = options;
                        phase = Phase::Awaiting { t_anom: t, handle };
                    }
                    ep.apply(rec, &u)?;
                    break;
                }
                if matches!(phase, Phase::Stopped) {
                    break;
                }
            }
            let pending = matches!(phase, Phase::Awaiting { .. });
            ep.finish(method, scenario, pending)
        })();
        self.fs_planner = planner;
        result
    }
}

/// Runs one method over a scenario list with a mock reasoner per scenario.
/// Up to `jobs` worker threads each own a simulator; results keep the input
/// order.
pub fn run_suite(cfg: &Config, scenarios: &[Scenario], method: Method, jobs: usize) -> Result<Vec<Run>, SimError> {
    let monitor = Monitor::from_config(cfg)?;
    let jobs = jobs.max(1).min(scenarios.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<Run, SimError>>>> = Mutex::new((0..scenarios.len()).map(|_| None).collect());
    std::thread::scope(|s| -> Result<(), SimError> {
        let mut handles = Vec::new();
        for _ in 0..jobs {
            let mut sim = Simulator::with_monitor(cfg.clone(), monitor.clone())?;
            let (next, slots) = (&next, &slots);
            handles.push(s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= scenarios.len() {
                    break;
                }
                let r = sim.run_mock(method, &scenarios[i]);
                slots.lock().expect("no panics while locked")[i] = Some(r);
            }));
        }
        for h in handles {
            h.join().expect("worker panicked");
        }
        Ok(())
    })?;
    slots
        .into_inner()
        .expect("no panics while locked")
        .into_iter()
        .map(|r| r.expect("every scenario ran"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub method: Method,
    pub n: usize,
    pub consequential: usize,
    pub recovered: usize,
    /// Fraction of consequential traces that ended in the chosen region;
    /// 1.0 when there are none.
    pub recovery_rate: f64,
    pub no_consequential: bool,
    /// Traces whose outcome is `violated`.
    pub violations: usize,
    /// Ticks with a state or input outside its set.
    pub constraint_violation_ticks: usize,
    pub outcomes: BTreeMap<String, usize>,
    pub mean_speed: f64,
    pub mean_solve_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub method: Method,
    pub n: usize,
    pub recovery_rate: f64,
    pub violations: usize,
    pub mean_solve_ms: f64,
}

impl Metrics {
    pub fn summary(&self) -> SuiteSummary {
        SuiteSummary {
            method: self.method,
            n: self.n,
            recovery_rate: self.recovery_rate,
            violations: self.violations,
            mean_solve_ms: self.mean_solve_ms,
        }
    }
}

/// Speed from the velocity coordinates of a per-axis `(p, v)` layout.
fn speed(x: &[f64]) -> f64 {
    x.iter().skip(1).step_by(2).map(|v| v * v).sum::<f64>().sqrt()
}

pub fn evaluate(runs: &[Run], mpc: &MpcConfig) -> Result<Metrics, SimError> {
    let first = runs.first().ok_or_else(|| SimError::Scenario("no traces to evaluate".into()))?;
    let mut consequential = 0;
    let mut recovered = 0;
    let mut violations = 0;
    let mut ticks_bad = 0;
    let mut outcomes = BTreeMap::new();
    let (mut speed_sum, mut speed_n) = (0.0, 0usize);
    let (mut solve_sum, mut solve_n) = (0.0, 0usize);
    for run in runs {
        let tr = &run.trace;
        *outcomes.entry(tr.outcome.name().to_string()).or_insert(0) += 1;
        if tr.outcome == Outcome::Violated {
            violations += 1;
        }
        if matches!(tr.scenario.hazard, HazardClass::Consequential { .. }) {
            consequential += 1;
            if let (Outcome::Recovered { region }, Some(y)) = (tr.outcome, tr.decision) {
                if region == y {
                    recovered += 1;
                }
            }
        }
        for r in &tr.records {
            let x = DVector::from_column_slice(&r.x);
            let u = DVector::from_column_slice(&r.u);
            if !mpc.state_set.contains(&x, SIM_TOL)? || !mpc.input_set.contains(&u, SIM_TOL)? {
                ticks_bad += 1;
            }
            speed_sum += speed(&r.x);
            speed_n += 1;
        }
        solve_sum += run.solve_ms.iter().sum::<f64>();
        solve_n += run.solve_ms.len();
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(Metrics {
        method: first.trace.method,
        n: runs.len(),
        consequential,
        recovered,
        recovery_rate: if consequential == 0 { 1.0 } else { recovered as f64 / consequential as f64 },
        no_consequential: consequential == 0,
        violations,
        constraint_violation_ticks: ticks_bad,
        outcomes,
        mean_speed: mean(speed_sum, speed_n),
        mean_solve_ms: mean(solve_sum, solve_n),
    })
}

fn join_ids(ids: &[usize]) -> String {
    ids.iter().map(usize::to_string).collect::<Vec<_>>().join(";")
}

/// Trace CSV header: `t, x0..x{n-1}, u0..u{m-1}, mode, score, flag, Y, y`.
pub fn trace_csv_header(n: usize, m: usize) -> String {
    let mut cols = vec!["t".to_string()];
    cols.extend((0..n).map(|i| format!("x{i}")));
    cols.extend((0..m).map(|i| format!("u{i}")));
    cols.extend(["mode", "score", "flag", "Y", "y"].map(String::from));
    cols.join(",")
}

/// One row per tick. `score` and `y` are empty when unavailable; `Y` lists
/// set ids separated by `;`.
pub fn trace_csv(trace: &Trace) -> String {
    let n = trace.final_state.len();
    let m = trace.records.first().map_or(0, |r| r.u.len());
    let mut out = trace_csv_header(n, m);
    out.push('\n');
    for r in &trace.records {
        let _ = write!(out, "{}", r.t);
        for v in r.x.iter().chain(&r.u) {
            let _ = write!(out, ",{v:?}");
        }
        let score = r.score.map(|s| format!("{s:?}")).unwrap_or_default();
        let y = r.decision.map(|y| y.to_string()).unwrap_or_default();
        let _ = writeln!(out, ",{},{score},{},{},{y}", r.mode.name(), u8::from(r.flag), join_ids(&r.y_set));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub method: Method,
    pub scenario: Scenario,
    pub ticks: usize,
    pub t_anom: Option<u64>,
    pub options: Vec<usize>,
    pub decision: Option<usize>,
    pub decision_tick: Option<u64>,
    pub outcome: Outcome,
    pub final_state: Vec<f64>,
    pub warnings: Vec<String>,
}

pub fn trace_summary(trace: &Trace) -> TraceSummary {
    TraceSummary {
        method: trace.method,
        scenario: trace.scenario.clone(),
        ticks: trace.records.len(),
        t_anom: trace.t_anom,
        options: trace.options.clone(),
        decision: trace.decision,
        decision_tick: trace.decision_tick,
        outcome: trace.outcome,
        final_state: trace.final_state.clone(),
        warnings: trace.warnings.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario(cfg: &Config, name: &str) -> Scenario {
        named_scenario(cfg, name, 3).unwrap()
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("mpc".parse::<Method>().is_err());
    }

    #[test]
    fn scenarios_are_reproducible_and_in_range() {
        let cfg = Config::shipped();
        let a = generate_scenarios(50, &cfg, 11).unwrap();
        assert_eq!(a, generate_scenarios(50, &cfg, 11).unwrap());
        let sc = &cfg.scenarios;
        for s in &a {
            let t = s.anomaly_tick.unwrap();
            assert!((sc.anomaly_tick_min..=sc.anomaly_tick_max).contains(&t));
            for i in 0..s.x0.len() {
                assert!((s.x0[i] - sc.x0_center[i]).abs() <= sc.x0_half_width[i]);
            }
            assert!(matches!(s.hazard, HazardClass::Consequential { target } if (1..=4).contains(&target)));
        }
        assert!(generate_scenarios(0, &cfg, 1).is_err());
    }

    #[test]
    fn quiet_flight_reaches_goal_without_queries() {
        let cfg = Config::shipped();
        let mut sim = Simulator::new(cfg.clone()).unwrap();
        let run = sim.run_mock(Method::Aesop, &scenario(&cfg, "quiet flight")).unwrap();
        let tr = &run.trace;
        assert_eq!(tr.outcome, Outcome::ReachedGoal);
        assert!(tr.t_anom.is_none());
        assert!(tr.records.iter().all(|r| r.mode == Mode::Nominal));
    }

    #[test]
    fn consequential_anomaly_recovers_to_choice() {
        let cfg = Config::shipped();
        let mut sim = Simulator::new(cfg.clone()).unwrap();
        let run = sim.run_mock(Method::Aesop, &scenario(&cfg, "fire ahead, land west")).unwrap();
        let tr = &run.trace;
        let y = tr.decision.unwrap();
        assert_eq!(tr.outcome, Outcome::Recovered { region: y });
        let t_anom = tr.t_anom.unwrap();
        assert_eq!(t_anom, 20);
        let region = &sim.mpc().region(y).unwrap().set;
        let horizon = sim.mpc().horizon as u64;
        for r in tr.records.iter().filter(|r| r.t > t_anom + horizon) {
            assert!(region.contains(&DVector::from_column_slice(&r.x), SIM_TOL).unwrap());
        }
    }

    #[test]
    fn inconsequential_anomaly_resumes() {
        let cfg = Config::shipped();
        let mut sim = Simulator::new(cfg.clone()).unwrap();
        let run = sim.run_mock(Method::Aesop, &scenario(&cfg, "bird passes")).unwrap();
        let tr = &run.trace;
        assert_eq!(tr.decision, Some(0));
        assert_eq!(tr.outcome, Outcome::ReachedGoal);
        let modes: Vec<Mode> = tr.records.iter().map(|r| r.mode).collect();
        let first_wait = modes.iter().position(|m| *m == Mode::Awaiting).unwrap();
        let resumed = modes[first_wait..].iter().position(|m| *m == Mode::Nominal).unwrap();
        assert!(modes[first_wait..first_wait + resumed].iter().all(|m| *m == Mode::Awaiting));
    }

    #[test]
    fn traces_are_deterministic() {
        let cfg = Config::shipped();
        let s = generate_scenarios(2, &cfg, 5).unwrap();
        let mut sim = Simulator::new(cfg.clone()).unwrap();
        let a = sim.run_mock(Method::Aesop, &s[1]).unwrap();
        let _ = sim.run_mock(Method::Fsmpc, &s[0]).unwrap();
        let mut fresh = Simulator::new(cfg).unwrap();
        let b = fresh.run_mock(Method::Aesop, &s[1]).unwrap();
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn csv_has_fixed_columns() {
        assert_eq!(trace_csv_header(2, 1), "t,x0,x1,u0,mode,score,flag,Y,y");
        let cfg = Config::shipped();
        let mut sim = Simulator::new(cfg.clone()).unwrap();
        let run = sim.run_mock(Method::Naive, &scenario(&cfg, "quiet flight")).unwrap();
        let csv = trace_csv(&run.trace);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), run.trace.records.len() + 1);
        assert!(lines.iter().all(|l| l.split(',').count() == 1 + 6 + 3 + 5));
    }

    #[test]
    fn nominal_suite_rate_is_vacuous() {
        let mut cfg = Config::shipped();
        cfg.scenarios.mix.none = 1.0;
        cfg.scenarios.mix.consequential = 0.0;
        let s = generate_scenarios(2, &cfg, 1).unwrap();
        let runs = run_suite(&cfg, &s, Method::Naive, 2).unwrap();
        let m = evaluate(&runs, &cfg.mpc_config().unwrap()).unwrap();
        assert_eq!(m.recovery_rate, 1.0);
        assert!(m.no_consequential);
    }
}
