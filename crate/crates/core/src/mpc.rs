//! Multi-contingency MPC with a shared consensus prefix, recovery-set
//! enumeration and slack-relaxed variants.
//!
//! The problem is condensed: decision variables are inputs only and states
//! are affine functions of the initial state. The nominal trajectory owns one
//! input per step. All branches share the nominal first input and one common
//! set of inputs for steps `1..K`; after that each branch owns its inputs.
//! Consensus therefore holds exactly, by construction.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::dynamics::{
    DynamicsError, LinearDynamics, OneStepFeasibility, Polytope, RecoveryRegion,
};
use crate::qp::{QpError, QpProblem, QpSolver, QpStatus, SolverSettings};

/// Tolerance used when verifying returned plans.
pub const PLAN_TOL: f64 = 1e-5;
const BRANCH_REG: f64 = 1e-8;
const TIE_REL_TOL: f64 = 1e-7;
const MAX_CACHED: usize = 512;

#[derive(Debug, Error)]
pub enum MpcError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid recovery set: {0}")]
    InvalidSet(String),
    #[error("no feasible recovery set and no previous plan")]
    NoFeasibleCandidate,
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Qp(#[from] QpError),
}

#[derive(Debug, Clone)]
pub struct MpcConfig {
    pub dynamics: LinearDynamics,
    pub state_set: Polytope,
    pub input_set: Polytope,
    pub recovery: Vec<RecoveryRegion>,
    pub horizon: usize,
    pub consensus: usize,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub goal: DVector<f64>,
    pub min_combo: usize,
    pub slack_weight: f64,
    pub solver: SolverSettings,
}

impl MpcConfig {
    pub fn validate(&self) -> Result<(), MpcError> {
        let n = self.dynamics.state_dim();
        let m = self.dynamics.input_dim();
        let err = |s: String| Err(MpcError::Config(s));
        if self.horizon == 0 || self.consensus >= self.horizon {
            return err(format!(
                "need 0 <= consensus < horizon, got K={} T={}",
                self.consensus, self.horizon
            ));
        }
        if self.recovery.is_empty() {
            return err("at least one recovery region is required".into());
        }
        for (i, r) in self.recovery.iter().enumerate() {
            if r.id != i + 1 {
                return err(format!("recovery region {} has id {}, expected {}", i, r.id, i + 1));
            }
            if r.set.dim() != n {
                return err(format!("recovery region {} has dimension {}", r.id, r.set.dim()));
            }
        }
        if self.state_set.dim() != n || self.input_set.dim() != m {
            return err("state or input set dimension mismatch".into());
        }
        if self.goal.len() != n {
            return err(format!("goal has length {}, expected {n}", self.goal.len()));
        }
        if self.min_combo == 0 {
            return err("min_combo must be >= 1".into());
        }
        if !(self.slack_weight > 0.0 && self.slack_weight.is_finite()) {
            return err("slack_weight must be positive".into());
        }
        check_psd("Q", &self.q, n)?;
        check_psd("R", &self.r, m)?;
        self.solver.validate()?;
        Ok(())
    }

    pub fn num_regions(&self) -> usize {
        self.recovery.len()
    }

    pub fn region(&self, id: usize) -> Option<&RecoveryRegion> {
        id.checked_sub(1).and_then(|i| self.recovery.get(i))
    }

    fn check_set(&self, y: &[usize]) -> Result<(), MpcError> {
        let d = self.num_regions();
        for (i, &id) in y.iter().enumerate() {
            if id == 0 || id > d {
                return Err(MpcError::InvalidSet(format!("index {id} outside 1..={d}")));
            }
            if i > 0 && y[i - 1] >= id {
                return Err(MpcError::InvalidSet("indices must be strictly increasing".into()));
            }
        }
        Ok(())
    }
}

fn check_psd(name: &str, w: &DMatrix<f64>, dim: usize) -> Result<(), MpcError> {
    if w.nrows() != dim || w.ncols() != dim {
        return Err(MpcError::Config(format!("{name} must be {dim}x{dim}")));
    }
    for i in 0..dim {
        for j in 0..i {
            if (w[(i, j)] - w[(j, i)]).abs() > 1e-12 * w.amax().max(1.0) {
                return Err(MpcError::Config(format!("{name} is not symmetric")));
            }
        }
    }
    let min_eig = w.clone().symmetric_eigen().eigenvalues.min();
    if min_eig < -1e-12 || w.iter().any(|v| !v.is_finite()) {
        return Err(MpcError::Config(format!("{name} is not positive semidefinite")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `horizon + 1` states starting at the current state.
    pub states: Vec<DVector<f64>>,
    /// `horizon` inputs.
    pub inputs: Vec<DVector<f64>>,
}

impl Trajectory {
    fn advanced(&self) -> Self {
        Self {
            states: self.states[1..].to_vec(),
            inputs: self.inputs[1..].to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanTree {
    pub nominal: Trajectory,
    pub branches: BTreeMap<usize, Trajectory>,
    pub consensus_len: usize,
    pub horizon: usize,
    pub cost: f64,
}

impl PlanTree {
    /// Input to apply now; `None` for a zero-length plan.
    pub fn first_input(&self) -> Option<&DVector<f64>> {
        self.nominal.inputs.first()
    }

    pub fn recovery_set(&self) -> Vec<usize> {
        self.branches.keys().copied().collect()
    }

    /// Largest `‖u^i_k − u^j_k‖∞` over branch pairs and `k < consensus_len`,
    /// including the nominal first input.
    pub fn consensus_gap(&self) -> f64 {
        let mut gap: f64 = 0.0;
        let branches: Vec<&Trajectory> = self.branches.values().collect();
        for b in &branches {
            if let (Some(u0), Some(b0)) = (self.nominal.inputs.first(), b.inputs.first()) {
                gap = gap.max((u0 - b0).amax());
            }
        }
        for k in 0..self.consensus_len.min(self.horizon) {
            for w in branches.windows(2) {
                gap = gap.max((&w[0].inputs[k] - &w[1].inputs[k]).amax());
            }
        }
        gap
    }

    /// Drops the first step. The result is a feasible point of the problem
    /// with one step less of horizon and consensus. If branches no longer
    /// share their next input, only the lowest-index branch is kept.
    pub fn advance(&self) -> Option<PlanTree> {
        if self.horizon == 0 {
            return None;
        }
        let mut branches: BTreeMap<usize, Trajectory> = self
            .branches
            .iter()
            .map(|(&i, t)| (i, t.advanced()))
            .collect();
        if self.consensus_len < 2 && branches.len() > 1 {
            let first = *branches.keys().next()?;
            branches.retain(|&i, _| i == first);
        }
        let nominal = match branches.values().next() {
            Some(t) => t.clone(),
            None => self.nominal.advanced(),
        };
        Some(PlanTree {
            nominal,
            branches,
            consensus_len: self.consensus_len.saturating_sub(1),
            horizon: self.horizon - 1,
            cost: f64::NAN,
        })
    }
}

/// Result of a slack-relaxed solve.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedPlan {
    pub plan: PlanTree,
    /// Total slack on rows each branch depends on (shared rows count for
    /// every branch).
    pub branch_slack: BTreeMap<usize, f64>,
    pub nominal_slack: f64,
}

impl RelaxedPlan {
    pub fn total_slack(&self) -> f64 {
        self.nominal_slack + self.branch_slack.values().sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RowTag {
    Nominal,
    Shared,
    Branch(usize),
    Input,
    SlackSign,
}

/// Variable layout of the condensed problem.
#[derive(Debug, Clone)]
struct Layout {
    m: usize,
    horizon: usize,
    consensus: usize,
    branches: Vec<usize>,
    shared_start: usize,
    branch_start: Vec<usize>,
    n_inputs: usize,
}

impl Layout {
    fn new(m: usize, branches: &[usize], consensus: usize, horizon: usize) -> Self {
        let nominal = horizon * m;
        let shared_steps = if branches.is_empty() { 0 } else { consensus.saturating_sub(1) };
        let own_steps = horizon.saturating_sub(consensus.max(1));
        let shared_start = nominal;
        let first_branch = shared_start + shared_steps * m;
        let branch_start = (0..branches.len()).map(|b| first_branch + b * own_steps * m).collect();
        Self {
            m,
            horizon,
            consensus,
            branches: branches.to_vec(),
            shared_start,
            branch_start,
            n_inputs: first_branch + branches.len() * own_steps * m,
        }
    }

    /// First variable index of the input at `step` of trajectory `traj`
    /// (`None` is the nominal).
    fn input_var(&self, traj: Option<usize>, step: usize) -> usize {
        match traj {
            None => step * self.m,
            Some(_) if step == 0 => 0,
            Some(_) if step < self.consensus => self.shared_start + (step - 1) * self.m,
            Some(b) => self.branch_start[b] + (step - self.consensus.max(1)) * self.m,
        }
    }

    fn is_nominal_var(&self, j: usize) -> bool {
        j < self.horizon * self.m
    }
}

struct Row {
    coef: DVector<f64>,
    shift: DVector<f64>,
    lo: f64,
    hi: f64,
    tag: RowTag,
    /// Rows of one set at one step share a slack when relaxed.
    group: usize,
}

/// The condensed QP for fixed `(Y, K_rem, T_rem)`; only `q`, `l`, `u` depend
/// on the current state.
struct Template {
    layout: Layout,
    relaxed: bool,
    n_vars: usize,
    p: DMatrix<f64>,
    a: DMatrix<f64>,
    lo: DVector<f64>,
    hi: DVector<f64>,
    /// Bounds are `lo − shift·x`, `hi − shift·x`.
    shift: DMatrix<f64>,
    q_x: DMatrix<f64>,
    q_goal: DMatrix<f64>,
    q_const: DVector<f64>,
    /// Relaxed problems: slack variable of each relaxed row.
    slack_of: Vec<(usize, RowTag)>,
}

impl Template {
    fn new(
        cfg: &MpcConfig,
        y: &[usize],
        consensus: usize,
        horizon: usize,
        relaxed: bool,
    ) -> Result<Self, MpcError> {
        let dynm = &cfg.dynamics;
        let (n, m) = (dynm.state_dim(), dynm.input_dim());
        let layout = Layout::new(m, y, consensus, horizon);
        let ni = layout.n_inputs;
        let state_rows = cfg.state_set.bounded_rows();
        let input_rows = cfg.input_set.bounded_rows();

        let mut p = DMatrix::zeros(ni, ni);
        let mut q_x = DMatrix::zeros(ni, n);
        let mut q_goal = DMatrix::zeros(ni, n);
        let mut rows: Vec<Row> = Vec::new();

        let mut group = 0usize;
        let mut push_set = |rows: &mut Vec<Row>,
                            g: &DMatrix<f64>,
                            lo: &DVector<f64>,
                            hi: &DVector<f64>,
                            s: &DMatrix<f64>,
                            phi: &DMatrix<f64>,
                            tag: RowTag| {
            let gs = g * s;
            let gphi = g * phi;
            group += 1;
            for i in 0..g.nrows() {
                rows.push(Row {
                    coef: gs.row(i).transpose(),
                    shift: gphi.row(i).transpose(),
                    lo: lo[i],
                    hi: hi[i],
                    tag,
                    group,
                });
            }
        };

        let mut trajs: Vec<Option<usize>> = vec![None];
        trajs.extend((0..y.len()).map(Some));
        for &traj in &trajs {
            let mut s = DMatrix::<f64>::zeros(n, ni);
            let mut phi = DMatrix::<f64>::identity(n, n);
            if horizon == 0 {
                if let Some(b) = traj {
                    let region = &cfg.region(y[b]).expect("checked set").set.bounded_rows();
                    push_set(&mut rows, &region.g, &region.lo, &region.hi, &s, &phi, RowTag::Branch(b));
                }
                continue;
            }
            for step in 0..horizon {
                let v = layout.input_var(traj, step);
                let mut next = dynm.a() * &s;
                for r in 0..n {
                    for c in 0..m {
                        next[(r, v + c)] += dynm.b()[(r, c)];
                    }
                }
                s = next;
                phi = dynm.a() * &phi;
                let k = step + 1;
                match traj {
                    None => {
                        push_set(&mut rows, &state_rows.g, &state_rows.lo, &state_rows.hi, &s, &phi, RowTag::Nominal);
                        let st_q = s.transpose() * &cfg.q;
                        p += &st_q * &s;
                        q_x += &st_q * &phi;
                        q_goal += &st_q;
                    }
                    Some(b) => {
                        if k >= 2 && k <= consensus.max(1) {
                            if b == 0 {
                                push_set(&mut rows, &state_rows.g, &state_rows.lo, &state_rows.hi, &s, &phi, RowTag::Shared);
                            }
                        } else if k >= 2 {
                            push_set(&mut rows, &state_rows.g, &state_rows.lo, &state_rows.hi, &s, &phi, RowTag::Branch(b));
                        }
                        if k == horizon {
                            let region = &cfg.region(y[b]).expect("checked set").set.bounded_rows();
                            push_set(&mut rows, &region.g, &region.lo, &region.hi, &s, &phi, RowTag::Branch(b));
                        }
                    }
                }
            }
        }
        for step in 0..horizon {
            let v = layout.input_var(None, step);
            for i in 0..m {
                for j in 0..m {
                    p[(v + i, v + j)] += cfg.r[(i, j)];
                }
            }
        }
        for j in 0..ni {
            if !layout.is_nominal_var(j) {
                p[(j, j)] += BRANCH_REG;
            }
        }
        // input constraints on every input variable block
        let zero_shift = DVector::zeros(n);
        for blk in 0..ni / m.max(1) {
            for i in 0..input_rows.g.nrows() {
                let mut coef = DVector::zeros(ni);
                for c in 0..m {
                    coef[blk * m + c] = input_rows.g[(i, c)];
                }
                rows.push(Row {
                    coef,
                    shift: zero_shift.clone(),
                    lo: input_rows.lo[i],
                    hi: input_rows.hi[i],
                    tag: RowTag::Input,
                    group: 0,
                });
            }
        }

        let mut slack_of = Vec::new();
        let (n_vars, final_rows) = if relaxed {
            let mut groups: Vec<usize> = rows.iter().filter(|r| r.tag != RowTag::Input).map(|r| r.group).collect();
            groups.dedup();
            let ns = groups.len();
            let nv = ni + ns;
            let slack_var = |g: usize| ni + groups.iter().position(|&x| x == g).expect("known group");
            let mut out: Vec<Row> = Vec::new();
            let widen = |r: &Row, nv: usize| {
                let mut coef = DVector::zeros(nv);
                coef.rows_mut(0, ni).copy_from(&r.coef);
                coef
            };
            for r in &rows {
                if r.tag == RowTag::Input {
                    out.push(Row { coef: widen(r, nv), shift: r.shift.clone(), ..*r });
                    continue;
                }
                let sv = slack_var(r.group);
                if r.lo.is_finite() {
                    let mut coef = widen(r, nv);
                    coef[sv] = 1.0;
                    out.push(Row { coef, shift: r.shift.clone(), hi: f64::INFINITY, ..*r });
                }
                if r.hi.is_finite() {
                    let mut coef = widen(r, nv);
                    coef[sv] = -1.0;
                    out.push(Row { coef, shift: r.shift.clone(), lo: f64::NEG_INFINITY, ..*r });
                }
            }
            for &g in &groups {
                let sv = slack_var(g);
                let tag = rows.iter().find(|r| r.group == g).expect("known group").tag;
                slack_of.push((sv, tag));
                let mut coef = DVector::zeros(nv);
                coef[sv] = 1.0;
                out.push(Row { coef, shift: zero_shift.clone(), lo: 0.0, hi: f64::INFINITY, tag: RowTag::SlackSign, group: 0 });
            }
            let mut pw = DMatrix::zeros(nv, nv);
            pw.view_mut((0, 0), (ni, ni)).copy_from(&p);
            for k in 0..ns {
                pw[(ni + k, ni + k)] = cfg.slack_weight;
            }
            p = pw;
            q_x = q_x.insert_rows(ni, ns, 0.0);
            q_goal = q_goal.insert_rows(ni, ns, 0.0);
            (nv, out)
        } else {
            (ni, rows)
        };

        let nr = final_rows.len();
        let mut a = DMatrix::zeros(nr, n_vars);
        let mut shift = DMatrix::zeros(nr, n);
        let mut lo = DVector::zeros(nr);
        let mut hi = DVector::zeros(nr);
        for (i, r) in final_rows.iter().enumerate() {
            a.row_mut(i).copy_from(&r.coef.transpose());
            shift.row_mut(i).copy_from(&r.shift.transpose());
            lo[i] = r.lo;
            hi[i] = r.hi;
        }
        let mut q_const = DVector::zeros(n_vars);
        for &(sv, _) in &slack_of {
            q_const[sv] = cfg.slack_weight;
        }
        // symmetrize away rounding from the accumulated products
        let p = (&p + p.transpose()) * 0.5;
        Ok(Self {
            layout,
            relaxed,
            n_vars,
            p,
            a,
            lo,
            hi,
            shift,
            q_x,
            q_goal,
            q_const,
            slack_of,
        })
    }

    fn vectors(&self, x: &DVector<f64>, goal: &DVector<f64>) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let q = &self.q_x * x - &self.q_goal * goal + &self.q_const;
        let s = &self.shift * x;
        let l = DVector::from_fn(self.lo.len(), |i, _| self.lo[i] - s[i]);
        let u = DVector::from_fn(self.hi.len(), |i, _| self.hi[i] - s[i]);
        (q, l, u)
    }

    fn problem(&self, x: &DVector<f64>, goal: &DVector<f64>) -> QpProblem {
        let (q, l, u) = self.vectors(x, goal);
        QpProblem {
            p: self.p.clone(),
            q,
            a: self.a.clone(),
            l,
            u,
        }
    }

    fn plan(&self, cfg: &MpcConfig, x0: &DVector<f64>, z: &DVector<f64>) -> Result<PlanTree, MpcError> {
        let lay = &self.layout;
        let m = lay.m;
        let build = |traj: Option<usize>| -> Result<Trajectory, MpcError> {
            let mut states = vec![x0.clone()];
            let mut inputs = Vec::with_capacity(lay.horizon);
            for step in 0..lay.horizon {
                let v = lay.input_var(traj, step);
                let u = z.rows(v, m).into_owned();
                let next = cfg.dynamics.step(states.last().expect("nonempty"), &u)?;
                states.push(next);
                inputs.push(u);
            }
            Ok(Trajectory { states, inputs })
        };
        let nominal = build(None)?;
        let mut branches = BTreeMap::new();
        for (b, &id) in lay.branches.iter().enumerate() {
            branches.insert(id, build(Some(b))?);
        }
        let cost = nominal_cost(cfg, &nominal);
        Ok(PlanTree {
            nominal,
            branches,
            consensus_len: lay.consensus,
            horizon: lay.horizon,
            cost,
        })
    }
}

/// `Σ_k ½(x_k − g)ᵀQ(x_k − g) + ½u_kᵀRu_k` over the trajectory.
pub fn nominal_cost(cfg: &MpcConfig, traj: &Trajectory) -> f64 {
    let mut c = 0.0;
    for x in traj.states.iter().skip(1) {
        let e = x - &cfg.goal;
        c += 0.5 * e.dot(&(&cfg.q * &e));
    }
    for u in &traj.inputs {
        c += 0.5 * u.dot(&(&cfg.r * u));
    }
    c
}

/// Checks state, input and terminal constraints of a plan.
pub fn verify_plan(cfg: &MpcConfig, plan: &PlanTree, tol: f64) -> Result<bool, MpcError> {
    let traj_ok = |t: &Trajectory| -> Result<bool, MpcError> {
        for x in t.states.iter().skip(1) {
            if !cfg.state_set.contains(x, tol)? {
                return Ok(false);
            }
        }
        for u in &t.inputs {
            if !cfg.input_set.contains(u, tol)? {
                return Ok(false);
            }
        }
        Ok(true)
    };
    if !traj_ok(&plan.nominal)? {
        return Ok(false);
    }
    for (&id, t) in &plan.branches {
        let region = cfg
            .region(id)
            .ok_or_else(|| MpcError::InvalidSet(format!("unknown region {id}")))?;
        if !traj_ok(t)? || !region.set.contains(t.states.last().expect("nonempty"), tol)? {
            return Ok(false);
        }
    }
    Ok(plan.consensus_gap() == 0.0)
}

type Key = (Vec<usize>, usize, usize, bool);

struct Compiled {
    template: Template,
    solver: QpSolver,
}

/// Stateful solver front end: caches compiled problems per
/// `(Y, K_rem, T_rem)` so repeated solves reuse factorizations and warm
/// starts.
pub struct Planner {
    cfg: MpcConfig,
    cache: HashMap<Key, Compiled>,
    hold: HashMap<usize, OneStepFeasibility>,
}

impl Planner {
    pub fn new(cfg: MpcConfig) -> Result<Self, MpcError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            cache: HashMap::new(),
            hold: HashMap::new(),
        })
    }

    pub fn config(&self) -> &MpcConfig {
        &self.cfg
    }

    /// Forgets all warm starts so the next solves depend only on their
    /// arguments.
    pub fn clear_warm_starts(&mut self) {
        self.cache.values_mut().for_each(|c| c.solver.clear_warm_start());
        self.hold.values_mut().for_each(OneStepFeasibility::clear_warm_start);
    }

    fn check_args(&self, y: &[usize], k_rem: usize, t_rem: usize) -> Result<(), MpcError> {
        self.cfg.check_set(y)?;
        if k_rem > self.cfg.consensus || t_rem > self.cfg.horizon || k_rem > t_rem {
            return Err(MpcError::Config(format!(
                "need K_rem <= K, T_rem <= T, K_rem <= T_rem; got K_rem={k_rem} T_rem={t_rem}"
            )));
        }
        Ok(())
    }

    fn compiled(&mut self, key: Key) -> Result<&mut Compiled, MpcError> {
        if !self.cache.contains_key(&key) {
            if self.cache.len() >= MAX_CACHED {
                self.cache.clear();
            }
            let template = Template::new(&self.cfg, &key.0, key.1, key.2, key.3)?;
            let solver = QpSolver::new(&template.p, &template.a, self.cfg.solver.clone())?;
            self.cache.insert(key.clone(), Compiled { template, solver });
        }
        Ok(self.cache.get_mut(&key).expect("inserted"))
    }

    /// The QP for `J(Y, K_rem, T_rem)` at state `x`.
    pub fn build_problem(
        &mut self,
        x: &DVector<f64>,
        y: &[usize],
        k_rem: usize,
        t_rem: usize,
    ) -> Result<QpProblem, MpcError> {
        self.check_args(y, k_rem, t_rem)?;
        self.check_state(x)?;
        let goal = self.cfg.goal.clone();
        let c = self.compiled((y.to_vec(), k_rem, t_rem, false))?;
        Ok(c.template.problem(x, &goal))
    }

    fn check_state(&self, x: &DVector<f64>) -> Result<(), MpcError> {
        if x.len() != self.cfg.dynamics.state_dim() {
            return Err(DynamicsError::Dimension(format!(
                "state has length {}, expected {}",
                x.len(),
                self.cfg.dynamics.state_dim()
            ))
            .into());
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(MpcError::Config("non-finite state".into()));
        }
        Ok(())
    }

    /// Solves `J(Y, K_rem, T_rem)`; `None` means infeasible.
    pub fn solve(
        &mut self,
        x: &DVector<f64>,
        y: &[usize],
        k_rem: usize,
        t_rem: usize,
    ) -> Result<Option<PlanTree>, MpcError> {
        self.check_args(y, k_rem, t_rem)?;
        self.check_state(x)?;
        let goal = self.cfg.goal.clone();
        let cfg = self.cfg.clone();
        let c = self.compiled((y.to_vec(), k_rem, t_rem, false))?;
        let (q, l, u) = c.template.vectors(x, &goal);
        let res = c.solver.solve(&q, &l, &u)?;
        match res.status {
            QpStatus::PrimalInfeasible => Ok(None),
            QpStatus::Solved => Ok(Some(c.template.plan(&cfg, x, &res.x)?)),
            QpStatus::MaxIterations => {
                let plan = c.template.plan(&cfg, x, &res.x)?;
                if verify_plan(&cfg, &plan, PLAN_TOL)? {
                    Ok(Some(plan))
                } else {
                    Ok(None)
                }
            }
        }
    }

    /// Slack-relaxed `J(Y, K_rem, T_rem)`: state and terminal constraints
    /// carry L1 penalties; input constraints stay hard.
    pub fn solve_relaxed(
        &mut self,
        x: &DVector<f64>,
        y: &[usize],
        k_rem: usize,
        t_rem: usize,
    ) -> Result<RelaxedPlan, MpcError> {
        self.check_args(y, k_rem, t_rem)?;
        self.check_state(x)?;
        let goal = self.cfg.goal.clone();
        let cfg = self.cfg.clone();
        let c = self.compiled((y.to_vec(), k_rem, t_rem, true))?;
        let (q, l, u) = c.template.vectors(x, &goal);
        let res = c.solver.solve(&q, &l, &u)?;
        if res.status == QpStatus::PrimalInfeasible {
            return Err(MpcError::Config("input set is empty".into()));
        }
        let plan = c.template.plan(&cfg, x, &res.x)?;
        let nb = y.len();
        let mut per = vec![0.0; nb];
        let mut nominal_slack = 0.0;
        for &(sv, tag) in &c.template.slack_of {
            let s = res.x[sv].max(0.0);
            match tag {
                RowTag::Nominal => nominal_slack += s,
                RowTag::Shared => per.iter_mut().for_each(|p| *p += s),
                RowTag::Branch(b) => per[b] += s,
                RowTag::Input | RowTag::SlackSign => {}
            }
        }
        debug_assert!(c.template.relaxed && c.template.n_vars == res.x.len());
        let branch_slack = y.iter().copied().zip(per).collect();
        Ok(RelaxedPlan {
            plan,
            branch_slack,
            nominal_slack,
        })
    }

    /// Enumerates recovery sets (sizes `d` down to `min_combo`, then
    /// singletons) and returns the chosen set with its plan.
    pub fn select_recovery_sets(
        &mut self,
        x: &DVector<f64>,
        prev: Option<&PlanTree>,
    ) -> Result<(Vec<usize>, PlanTree), MpcError> {
        let d = self.cfg.num_regions();
        let (k, t) = (self.cfg.consensus, self.cfg.horizon);
        let mut tiers: Vec<Vec<Vec<usize>>> = Vec::new();
        if self.cfg.min_combo <= d {
            let mut combos = Vec::new();
            for size in self.cfg.min_combo..=d {
                combos.extend(subsets(d, size));
            }
            tiers.push(combos);
        }
        if self.cfg.min_combo > 1 {
            tiers.push(subsets(d, 1));
        }
        for tier in tiers {
            // small sets first so infeasible ones prune their supersets
            let mut infeasible: Vec<Vec<usize>> = Vec::new();
            let mut found: Vec<(Vec<usize>, PlanTree)> = Vec::new();
            for y in tier {
                if infeasible.iter().any(|s| is_subset(s, &y)) {
                    continue;
                }
                let r = self.solve(x, &y, k, t)?;
                match r {
                    Some(plan) => found.push((y, plan)),
                    None => infeasible.push(y),
                }
            }
            if let Some(best) = pick_best(found) {
                return Ok(best);
            }
        }
        match prev.and_then(PlanTree::advance) {
            Some(plan) => Ok((plan.recovery_set(), plan)),
            None => Err(MpcError::NoFeasibleCandidate),
        }
    }

    /// Minimum-norm input keeping the next state in `X_R^id ∩ X`.
    pub fn hold_input(&mut self, x: &DVector<f64>, id: usize) -> Result<Option<DVector<f64>>, MpcError> {
        self.cfg.check_set(&[id])?;
        if !self.hold.contains_key(&id) {
            let region = &self.cfg.region(id).expect("checked").set;
            let both = intersect(region, &self.cfg.state_set)?;
            let f = OneStepFeasibility::new(&self.cfg.dynamics, &both, &self.cfg.input_set)?;
            self.hold.insert(id, f);
        }
        Ok(self.hold.get_mut(&id).expect("inserted").solve(x)?)
    }
}

fn intersect(a: &Polytope, b: &Polytope) -> Result<Polytope, DynamicsError> {
    let h = DMatrix::from_fn(a.num_rows() + b.num_rows(), a.dim(), |i, j| {
        if i < a.num_rows() {
            a.h()[(i, j)]
        } else {
            b.h()[(i - a.num_rows(), j)]
        }
    });
    let o = DVector::from_fn(a.num_rows() + b.num_rows(), |i, _| {
        if i < a.num_rows() {
            a.offsets()[i]
        } else {
            b.offsets()[i - a.num_rows()]
        }
    });
    Polytope::new(h, o)
}

/// Least cost; near-ties prefer larger sets, then lexicographic order.
fn pick_best(found: Vec<(Vec<usize>, PlanTree)>) -> Option<(Vec<usize>, PlanTree)> {
    let min = found.iter().map(|(_, p)| p.cost).fold(f64::INFINITY, f64::min);
    let tol = TIE_REL_TOL * min.abs().max(1.0);
    found
        .into_iter()
        .filter(|(_, p)| p.cost <= min + tol)
        .min_by(|(a, _), (b, _)| b.len().cmp(&a.len()).then_with(|| a.cmp(b)))
}

/// All `size`-subsets of `1..=d` in lexicographic order.
pub fn subsets(d: usize, size: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if size == 0 || size > d {
        return out;
    }
    let mut idx: Vec<usize> = (1..=size).collect();
    loop {
        out.push(idx.clone());
        let mut i = size;
        while i > 0 && idx[i - 1] == d - size + i {
            i -= 1;
        }
        if i == 0 {
            return out;
        }
        idx[i - 1] += 1;
        for j in i..size {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

fn is_subset(small: &[usize], big: &[usize]) -> bool {
    small.iter().all(|s| big.contains(s))
}

/// One-shot convenience wrappers around [`Planner`].
pub fn build_problem(
    cfg: &MpcConfig,
    x: &DVector<f64>,
    y: &[usize],
    k_rem: usize,
    t_rem: usize,
) -> Result<QpProblem, MpcError> {
    Planner::new(cfg.clone())?.build_problem(x, y, k_rem, t_rem)
}

pub fn solve_contingency(
    cfg: &MpcConfig,
    x: &DVector<f64>,
    y: &[usize],
    k_rem: usize,
    t_rem: usize,
) -> Result<Option<PlanTree>, MpcError> {
    Planner::new(cfg.clone())?.solve(x, y, k_rem, t_rem)
}

pub fn solve_relaxed(
    cfg: &MpcConfig,
    x: &DVector<f64>,
    y: &[usize],
    k_rem: usize,
    t_rem: usize,
) -> Result<RelaxedPlan, MpcError> {
    Planner::new(cfg.clone())?.solve_relaxed(x, y, k_rem, t_rem)
}

pub fn select_recovery_sets(
    cfg: &MpcConfig,
    x: &DVector<f64>,
    prev: Option<&PlanTree>,
) -> Result<(Vec<usize>, PlanTree), MpcError> {
    Planner::new(cfg.clone())?.select_recovery_sets(x, prev)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn region(id: usize, p: (f64, f64)) -> RecoveryRegion {
        RecoveryRegion {
            id,
            set: Polytope::from_box(&[p.0, -0.05], &[p.1, 0.05]).unwrap(),
            label: format!("r{id}"),
        }
    }

    fn toy(regions: Vec<RecoveryRegion>, horizon: usize, consensus: usize) -> MpcConfig {
        MpcConfig {
            dynamics: LinearDynamics::double_integrator(0.1, 1).unwrap(),
            state_set: Polytope::from_box(&[-20.0, -2.0], &[20.0, 2.0]).unwrap(),
            input_set: Polytope::from_box(&[-1.0], &[1.0]).unwrap(),
            recovery: regions,
            horizon,
            consensus,
            q: DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.1])),
            r: DMatrix::identity(1, 1) * 0.01,
            goal: DVector::from_vec(vec![5.0, 0.0]),
            min_combo: 2,
            slack_weight: 1e4,
            solver: SolverSettings::default(),
        }
    }

    fn x(p: f64, v: f64) -> DVector<f64> {
        DVector::from_vec(vec![p, v])
    }

    #[test]
    fn empty_set_is_plain_tracking() {
        let cfg = toy(vec![region(1, (0.0, 1.2))], 20, 5);
        let plan = solve_contingency(&cfg, &x(0.0, 0.0), &[], 0, 20).unwrap().unwrap();
        assert!(plan.branches.is_empty());
        assert!(plan.nominal.states.last().unwrap()[0] > 0.5);
    }

    #[test]
    fn variable_count() {
        let cfg = toy(vec![region(1, (0.0, 1.2)), region(2, (-1.2, 0.0))], 20, 5);
        let prob = build_problem(&cfg, &x(0.0, 0.0), &[1, 2], 5, 20).unwrap();
        // nominal + shared prefix (steps 1..K) + two suffixes
        assert_eq!(prob.num_vars(), 20 + 4 + 2 * 15);
        let prob = build_problem(&cfg, &x(0.0, 0.0), &[1, 2], 0, 20).unwrap();
        assert_eq!(prob.num_vars(), 20 + 2 * 19);
    }

    #[test]
    fn resting_in_region_costs_nothing() {
        let mut cfg = toy(vec![region(1, (0.0, 1.2))], 20, 5);
        cfg.goal = x(0.6, 0.0);
        let plan = solve_contingency(&cfg, &x(0.6, 0.0), &[1], 5, 20).unwrap().unwrap();
        for u in plan.nominal.inputs.iter().chain(plan.branches[&1].inputs.iter()) {
            assert_abs_diff_eq!(u[0], 0.0, epsilon = 1e-6);
        }
        assert_abs_diff_eq!(plan.cost, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn reachable_and_unreachable_boxes() {
        let cfg = toy(vec![region(1, (0.0, 1.2)), region(2, (10.0, 11.0))], 20, 5);
        let plan = solve_contingency(&cfg, &x(0.0, 1.0), &[1], 5, 20).unwrap().unwrap();
        assert!(verify_plan(&cfg, &plan, PLAN_TOL).unwrap());
        assert!(solve_contingency(&cfg, &x(0.0, 1.0), &[2], 5, 20).unwrap().is_none());
    }

    #[test]
    fn consensus_is_exact() {
        let cfg = toy(vec![region(1, (1.0, 2.0)), region(2, (-2.0, -1.0))], 30, 8);
        let plan = solve_contingency(&cfg, &x(0.0, 0.3), &[1, 2], 8, 30).unwrap().unwrap();
        assert_eq!(plan.consensus_gap(), 0.0);
        for k in 0..8 {
            assert_eq!(plan.branches[&1].inputs[k], plan.branches[&2].inputs[k]);
        }
        assert_eq!(plan.nominal.inputs[0], plan.branches[&1].inputs[0]);
        assert!(verify_plan(&cfg, &plan, PLAN_TOL).unwrap());
    }

    #[test]
    fn zero_horizon_checks_membership() {
        let cfg = toy(vec![region(1, (0.0, 1.2))], 20, 5);
        let inside = solve_contingency(&cfg, &x(0.5, 0.0), &[1], 0, 0).unwrap().unwrap();
        assert!(inside.first_input().is_none());
        assert!(solve_contingency(&cfg, &x(3.0, 0.0), &[1], 0, 0).unwrap().is_none());
    }

    #[test]
    fn relaxed_matches_hard_when_feasible() {
        let cfg = toy(vec![region(1, (0.0, 1.2))], 20, 5);
        let hard = solve_contingency(&cfg, &x(0.0, 1.0), &[1], 5, 20).unwrap().unwrap();
        let soft = solve_relaxed(&cfg, &x(0.0, 1.0), &[1], 5, 20).unwrap();
        assert!(soft.total_slack() < 1e-6, "{:?} {}", soft.branch_slack, soft.nominal_slack);
        for (a, b) in hard.nominal.inputs.iter().zip(&soft.plan.nominal.inputs) {
            assert_abs_diff_eq!(a[0], b[0], epsilon = 1e-5);
        }
    }

    #[test]
    fn relaxed_reports_unreachable_violation() {
        let mut last = f64::INFINITY;
        for w in [1e2, 1e4, 1e6] {
            let mut cfg = toy(vec![region(1, (10.0, 11.0))], 20, 5);
            cfg.slack_weight = w;
            let soft = solve_relaxed(&cfg, &x(0.0, 1.0), &[1], 5, 20).unwrap();
            let s = soft.branch_slack[&1];
            assert!(s > 0.1, "slack {s}");
            assert!(s <= last + 1e-6);
            last = s;
        }
    }

    #[test]
    fn symmetric_regions_pick_the_pair() {
        let mut cfg = toy(vec![region(1, (1.0, 2.0)), region(2, (-2.0, -1.0))], 30, 5);
        cfg.goal = x(0.0, 0.0);
        let (y, plan) = select_recovery_sets(&cfg, &x(0.0, 0.0), None).unwrap();
        assert_eq!(y, vec![1, 2]);
        assert_eq!(plan.recovery_set(), y);
    }

    #[test]
    fn unreachable_region_falls_back_to_singleton() {
        let cfg = toy(vec![region(1, (0.0, 1.2)), region(2, (15.0, 16.0))], 20, 5);
        let (y, _) = select_recovery_sets(&cfg, &x(0.0, 0.0), None).unwrap();
        assert_eq!(y, vec![1]);
    }

    #[test]
    fn nothing_feasible() {
        let cfg = toy(vec![region(1, (15.0, 16.0)), region(2, (-16.0, -15.0))], 20, 5);
        assert!(matches!(
            select_recovery_sets(&cfg, &x(0.0, 0.0), None),
            Err(MpcError::NoFeasibleCandidate)
        ));
    }

    #[test]
    fn rejects_bad_sets() {
        let cfg = toy(vec![region(1, (0.0, 1.2))], 20, 5);
        assert!(matches!(
            solve_contingency(&cfg, &x(0.0, 0.0), &[2], 5, 20),
            Err(MpcError::InvalidSet(_))
        ));
        assert!(solve_contingency(&cfg, &x(0.0, 0.0), &[1], 6, 5).is_err());
    }

    #[test]
    fn subset_order() {
        assert_eq!(subsets(4, 2).len(), 6);
        assert_eq!(subsets(3, 2), vec![vec![1, 2], vec![1, 3], vec![2, 3]]);
        assert_eq!(subsets(3, 3), vec![vec![1, 2, 3]]);
    }

    #[test]
    fn advance_keeps_feasibility() {
        let cfg = toy(vec![region(1, (1.0, 2.0)), region(2, (-2.0, -1.0))], 30, 8);
        let x0 = x(0.0, 0.3);
        let plan = solve_contingency(&cfg, &x0, &[1, 2], 8, 30).unwrap().unwrap();
        let next = plan.advance().unwrap();
        assert_eq!(next.horizon, 29);
        assert_eq!(next.recovery_set(), vec![1, 2]);
        assert_eq!(next.consensus_gap(), 0.0);
        assert!(verify_plan(&cfg, &next, PLAN_TOL).unwrap());
    }
}
