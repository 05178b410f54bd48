//! Discrete-time linear dynamics, polytopic sets and control-invariance checks.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::qp::{QpError, QpSolver, QpStatus, SolverSettings};

/// Default tolerance for set membership tests.
pub const MEMBERSHIP_TOL: f64 = 1e-6;

/// Coordinates with no axis-aligned bound are sampled in `[-r, r]`.
const UNBOUNDED_SAMPLE_RANGE: f64 = 100.0;
const MAX_REJECTIONS: usize = 100_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid dynamics: {0}")]
    InvalidDynamics(String),
    #[error("invalid polytope: {0}")]
    InvalidPolytope(String),
    #[error("region is empty")]
    EmptyRegion,
    #[error(transparent)]
    Qp(#[from] QpError),
}

fn check_len(what: &str, got: usize, want: usize) -> Result<(), DynamicsError> {
    if got == want {
        Ok(())
    } else {
        Err(DynamicsError::Dimension(format!("{what} has length {got}, expected {want}")))
    }
}

/// `x_{t+1} = A x_t + B u_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDynamics {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    dt: f64,
}

impl LinearDynamics {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, dt: f64) -> Result<Self, DynamicsError> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n {
            return Err(DynamicsError::InvalidDynamics(format!(
                "state matrix must be square and nonempty, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != n || b.ncols() == 0 {
            return Err(DynamicsError::InvalidDynamics(format!(
                "input matrix must be {n}xm with m >= 1, got {}x{}",
                b.nrows(),
                b.ncols()
            )));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(DynamicsError::InvalidDynamics(format!("dt must be positive, got {dt}")));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(DynamicsError::InvalidDynamics("non-finite matrix entry".into()));
        }
        Ok(Self { a, b, dt })
    }

    /// Exact zero-order-hold discretization of `axes` decoupled double
    /// integrators. State layout per axis is `(position, velocity)`; the input
    /// is one acceleration per axis.
    pub fn double_integrator(dt: f64, axes: usize) -> Result<Self, DynamicsError> {
        if axes == 0 {
            return Err(DynamicsError::InvalidDynamics("axes must be >= 1".into()));
        }
        let n = 2 * axes;
        let mut a = DMatrix::zeros(n, n);
        let mut b = DMatrix::zeros(n, axes);
        for k in 0..axes {
            let (p, v) = (2 * k, 2 * k + 1);
            a[(p, p)] = 1.0;
            a[(p, v)] = dt;
            a[(v, v)] = 1.0;
            b[(p, k)] = 0.5 * dt * dt;
            b[(v, k)] = dt;
        }
        Self::new(a, b, dt)
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, DynamicsError> {
        check_len("state", x.len(), self.state_dim())?;
        check_len("input", u.len(), self.input_dim())?;
        Ok(&self.a * x + &self.b * u)
    }
}

/// `{x : Hx ≤ h}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Polytope {
    h: DMatrix<f64>,
    offsets: DVector<f64>,
}

/// Two-sided row form `lo ≤ Gx ≤ hi` of a polytope, with antiparallel
/// halfspace pairs merged into one row.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundedRows {
    pub g: DMatrix<f64>,
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

impl Polytope {
    pub fn new(h: DMatrix<f64>, offsets: DVector<f64>) -> Result<Self, DynamicsError> {
        if h.nrows() == 0 || h.ncols() == 0 {
            return Err(DynamicsError::InvalidPolytope("need at least one row and one column".into()));
        }
        if offsets.len() != h.nrows() {
            return Err(DynamicsError::InvalidPolytope(format!(
                "{} offsets for {} rows",
                offsets.len(),
                h.nrows()
            )));
        }
        if h.iter().chain(offsets.iter()).any(|v| !v.is_finite()) {
            return Err(DynamicsError::InvalidPolytope("non-finite entry".into()));
        }
        Ok(Self { h, offsets })
    }

    /// Axis-aligned box; infinite bounds produce no row. A box without any
    /// finite bound is the whole space.
    pub fn from_box(lower: &[f64], upper: &[f64]) -> Result<Self, DynamicsError> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(DynamicsError::InvalidPolytope(format!(
                "box bounds have lengths {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        let n = lower.len();
        let mut rows: Vec<(usize, f64, f64)> = Vec::new();
        for i in 0..n {
            if lower[i].is_nan() || upper[i].is_nan() || lower[i] > upper[i] {
                return Err(DynamicsError::InvalidPolytope(format!("bad bounds on coordinate {i}")));
            }
            if upper[i].is_finite() {
                rows.push((i, 1.0, upper[i]));
            }
            if lower[i].is_finite() {
                rows.push((i, -1.0, -lower[i]));
            }
        }
        if rows.is_empty() {
            return Ok(Self::whole_space(n));
        }
        let mut h = DMatrix::zeros(rows.len(), n);
        let mut offsets = DVector::zeros(rows.len());
        for (r, &(i, s, o)) in rows.iter().enumerate() {
            h[(r, i)] = s;
            offsets[r] = o;
        }
        Self::new(h, offsets)
    }

    /// `{x : 0ᵀx ≤ 1}`.
    pub fn whole_space(dim: usize) -> Self {
        Self {
            h: DMatrix::zeros(1, dim.max(1)),
            offsets: DVector::from_element(1, 1.0),
        }
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn offsets(&self) -> &DVector<f64> {
        &self.offsets
    }

    pub fn dim(&self) -> usize {
        self.h.ncols()
    }

    pub fn num_rows(&self) -> usize {
        self.h.nrows()
    }

    /// `Hx ≤ h + tol` elementwise.
    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> Result<bool, DynamicsError> {
        Ok(self.violation(x)? <= tol)
    }

    /// `max_i (Hx − h)_i`, clipped at zero.
    pub fn violation(&self, x: &DVector<f64>) -> Result<f64, DynamicsError> {
        check_len("point", x.len(), self.dim())?;
        let hx = &self.h * x;
        Ok((0..self.num_rows())
            .map(|i| hx[i] - self.offsets[i])
            .fold(0.0, f64::max))
    }

    pub fn bounded_rows(&self) -> BoundedRows {
        let r = self.num_rows();
        let n = self.dim();
        let mut used = vec![false; r];
        let mut rows: Vec<(DVector<f64>, f64, f64)> = Vec::new();
        for i in 0..r {
            if used[i] {
                continue;
            }
            used[i] = true;
            let hi_row = self.h.row(i).transpose();
            if hi_row.iter().all(|&v| v == 0.0) {
                // 0ᵀx ≤ h: satisfied everywhere or nowhere, keep as is
                rows.push((hi_row, f64::NEG_INFINITY, self.offsets[i]));
                continue;
            }
            let partner = (i + 1..r).find(|&j| {
                !used[j] && (0..n).all(|c| self.h[(j, c)] == -self.h[(i, c)])
            });
            match partner {
                Some(j) => {
                    used[j] = true;
                    rows.push((hi_row, -self.offsets[j], self.offsets[i]));
                }
                None => rows.push((hi_row, f64::NEG_INFINITY, self.offsets[i])),
            }
        }
        let k = rows.len();
        let mut g = DMatrix::zeros(k, n);
        let mut lo = DVector::zeros(k);
        let mut hi = DVector::zeros(k);
        for (idx, (row, l, u)) in rows.into_iter().enumerate() {
            g.row_mut(idx).copy_from(&row.transpose());
            lo[idx] = l;
            hi[idx] = u;
        }
        BoundedRows { g, lo, hi }
    }

    /// Axis-aligned bounding box implied by single-coordinate rows; `None`
    /// entries are unbounded in that direction.
    pub fn axis_bounds(&self) -> (Vec<Option<f64>>, Vec<Option<f64>>) {
        let n = self.dim();
        let mut lower = vec![None::<f64>; n];
        let mut upper = vec![None::<f64>; n];
        for i in 0..self.num_rows() {
            let nz: Vec<usize> = (0..n).filter(|&c| self.h[(i, c)] != 0.0).collect();
            if let [c] = nz[..] {
                let coef = self.h[(i, c)];
                let bound = self.offsets[i] / coef;
                if coef > 0.0 {
                    upper[c] = Some(upper[c].map_or(bound, |b: f64| b.min(bound)));
                } else {
                    lower[c] = Some(lower[c].map_or(bound, |b: f64| b.max(bound)));
                }
            }
        }
        (lower, upper)
    }

    /// Feasibility check via a small regularized QP.
    pub fn is_empty(&self) -> Result<bool, DynamicsError> {
        let n = self.dim();
        let rows = self.bounded_rows();
        if (0..rows.lo.len()).any(|i| rows.lo[i] > rows.hi[i]) {
            return Ok(true);
        }
        let p = DMatrix::identity(n, n) * 1e-6;
        let mut solver = QpSolver::new(&p, &rows.g, SolverSettings::default())?;
        let res = solver.solve(&DVector::zeros(n), &rows.lo, &rows.hi)?;
        Ok(res.status == QpStatus::PrimalInfeasible)
    }

    /// Seeded rejection sampling inside the axis bounding box.
    pub fn sample(&self, count: usize, seed: u64) -> Result<Vec<DVector<f64>>, DynamicsError> {
        let (lower, upper) = self.axis_bounds();
        let n = self.dim();
        let lo: Vec<f64> = (0..n)
            .map(|i| lower[i].unwrap_or(-UNBOUNDED_SAMPLE_RANGE).max(-UNBOUNDED_SAMPLE_RANGE))
            .collect();
        let hi: Vec<f64> = (0..n)
            .map(|i| upper[i].unwrap_or(UNBOUNDED_SAMPLE_RANGE).min(UNBOUNDED_SAMPLE_RANGE))
            .collect();
        if (0..n).any(|i| lo[i] > hi[i]) {
            return Err(DynamicsError::EmptyRegion);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(count);
        let mut rejections = 0;
        while out.len() < count {
            let x = DVector::from_fn(n, |i, _| {
                if lo[i] == hi[i] {
                    lo[i]
                } else {
                    rng.gen_range(lo[i]..=hi[i])
                }
            });
            if self.contains(&x, 0.0)? {
                out.push(x);
            } else {
                rejections += 1;
                if rejections > MAX_REJECTIONS {
                    return Err(DynamicsError::EmptyRegion);
                }
            }
        }
        Ok(out)
    }
}

/// A control-invariant target set for a safety intervention.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryRegion {
    pub id: usize,
    pub set: Polytope,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvarianceReport {
    pub samples: usize,
    pub feasible: usize,
    pub fraction: f64,
    /// Sample with the largest unavoidable one-step violation, if any.
    pub worst_sample: Option<DVector<f64>>,
    pub worst_violation: f64,
}

/// One-step feasibility QP: find `u ∈ U` with `Ax + Bu ∈ target`.
pub struct OneStepFeasibility {
    dynamics: LinearDynamics,
    target_rows: BoundedRows,
    input_rows: BoundedRows,
    solver: QpSolver,
}

impl OneStepFeasibility {
    pub fn new(
        dynamics: &LinearDynamics,
        target: &Polytope,
        inputs: &Polytope,
    ) -> Result<Self, DynamicsError> {
        let n = dynamics.state_dim();
        let m = dynamics.input_dim();
        check_len("target polytope", target.dim(), n)?;
        check_len("input polytope", inputs.dim(), m)?;
        let target_rows = target.bounded_rows();
        let input_rows = inputs.bounded_rows();
        let gb = &target_rows.g * dynamics.b();
        let rows = gb.nrows() + input_rows.g.nrows();
        let mut a = DMatrix::zeros(rows, m);
        a.view_mut((0, 0), (gb.nrows(), m)).copy_from(&gb);
        a.view_mut((gb.nrows(), 0), (input_rows.g.nrows(), m))
            .copy_from(&input_rows.g);
        let p = DMatrix::identity(m, m);
        let solver = QpSolver::new(&p, &a, SolverSettings::default())?;
        Ok(Self {
            dynamics: dynamics.clone(),
            target_rows,
            input_rows,
            solver,
        })
    }

    /// Minimum-norm admissible input keeping the successor in the target, or
    /// `None` when no such input exists.
    pub fn clear_warm_start(&mut self) {
        self.solver.clear_warm_start();
    }

    pub fn solve(&mut self, x: &DVector<f64>) -> Result<Option<DVector<f64>>, DynamicsError> {
        check_len("state", x.len(), self.dynamics.state_dim())?;
        let shift = &self.target_rows.g * (self.dynamics.a() * x);
        let k = self.target_rows.g.nrows();
        let r = self.input_rows.g.nrows();
        let mut l = DVector::zeros(k + r);
        let mut u = DVector::zeros(k + r);
        for i in 0..k {
            l[i] = self.target_rows.lo[i] - shift[i];
            u[i] = self.target_rows.hi[i] - shift[i];
        }
        for i in 0..r {
            l[k + i] = self.input_rows.lo[i];
            u[k + i] = self.input_rows.hi[i];
        }
        let m = self.dynamics.input_dim();
        let res = self.solver.solve(&DVector::zeros(m), &l, &u)?;
        Ok(match res.status {
            QpStatus::Solved => Some(res.x),
            _ => None,
        })
    }
}

/// Samples states in `region` and checks whether some admissible input keeps
/// each one inside the region after one step.
pub fn check_invariance_sampled(
    region: &Polytope,
    dynamics: &LinearDynamics,
    inputs: &Polytope,
    n_samples: usize,
    seed: u64,
) -> Result<InvarianceReport, DynamicsError> {
    check_len("region", region.dim(), dynamics.state_dim())?;
    if region.is_empty()? {
        return Err(DynamicsError::EmptyRegion);
    }
    let samples = region.sample(n_samples, seed)?;
    let mut oracle = OneStepFeasibility::new(dynamics, region, inputs)?;
    let mut feasible = 0;
    let mut worst_sample = None;
    let mut worst_violation = 0.0;
    for x in samples {
        match oracle.solve(&x)? {
            Some(u) => {
                let next = dynamics.step(&x, &u)?;
                if region.contains(&next, MEMBERSHIP_TOL)? {
                    feasible += 1;
                    continue;
                }
                let v = region.violation(&next)?;
                if v > worst_violation {
                    worst_violation = v;
                    worst_sample = Some(x);
                }
            }
            None => {
                let v = min_one_step_violation(dynamics, region, inputs, &x)?;
                if worst_sample.is_none() || v > worst_violation {
                    worst_violation = v;
                    worst_sample = Some(x);
                }
            }
        }
    }
    Ok(InvarianceReport {
        samples: n_samples,
        feasible,
        fraction: if n_samples == 0 { 1.0 } else { feasible as f64 / n_samples as f64 },
        worst_sample,
        worst_violation,
    })
}

/// `min_{u ∈ U} max_i (H(Ax + Bu) − h)_i` via a slack QP.
fn min_one_step_violation(
    dynamics: &LinearDynamics,
    region: &Polytope,
    inputs: &Polytope,
    x: &DVector<f64>,
) -> Result<f64, DynamicsError> {
    let m = dynamics.input_dim();
    let hb = region.h() * dynamics.b();
    let hax = region.h() * (dynamics.a() * x);
    let ir = inputs.bounded_rows();
    let k = region.num_rows();
    let r = ir.g.nrows();
    // variables (u, s): H B u − s ≤ h − H A x, s ≥ 0, u ∈ U
    let mut a = DMatrix::zeros(k + r + 1, m + 1);
    let mut l = DVector::zeros(k + r + 1);
    let mut u = DVector::zeros(k + r + 1);
    for i in 0..k {
        for j in 0..m {
            a[(i, j)] = hb[(i, j)];
        }
        a[(i, m)] = -1.0;
        l[i] = f64::NEG_INFINITY;
        u[i] = region.offsets()[i] - hax[i];
    }
    for i in 0..r {
        for j in 0..m {
            a[(k + i, j)] = ir.g[(i, j)];
        }
        l[k + i] = ir.lo[i];
        u[k + i] = ir.hi[i];
    }
    a[(k + r, m)] = 1.0;
    l[k + r] = 0.0;
    u[k + r] = f64::INFINITY;
    let mut p = DMatrix::identity(m + 1, m + 1) * 1e-6;
    p[(m, m)] = 1e-6;
    let mut q = DVector::zeros(m + 1);
    q[m] = 1.0;
    let mut solver = QpSolver::new(&p, &a, SolverSettings::default())?;
    let res = solver.solve(&q, &l, &u)?;
    Ok(res.x[m].max(0.0))
}
