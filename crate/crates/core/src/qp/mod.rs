//! Dense convex quadratic programming.
//!
//! Problems have the form
//!
//! ```text
//! minimize    ½ xᵀPx + qᵀx
//! subject to  l ≤ Ax ≤ u
//! ```
//!
//! and are solved with an operator-splitting (ADMM) iteration on a Ruiz-scaled
//! copy of the data, followed by an active-set polish step. Primal
//! infeasibility is reported together with a certificate `v` satisfying
//! `Aᵀv ≈ 0` and `uᵀmax(v, 0) + lᵀmin(v, 0) < 0`.
//!
//! Dual multipliers follow the sign convention `Px + q + Aᵀy = 0`, with
//! `y_i > 0` on an active upper bound and `y_i < 0` on an active lower bound.

mod admm;
mod dual;
pub mod reference;
mod solver;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub use solver::QpSolver;

/// Bounds with magnitude at or above this value are treated as infinite.
pub const INFINITY_BOUND: f64 = 1e20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
    #[error("cost matrix is not symmetric (max asymmetry {0:.3e})")]
    Asymmetric(f64),
    #[error("cost matrix is not positive semidefinite (min eigenvalue {0:.3e})")]
    NotConvex(f64),
    #[error("lower bound exceeds upper bound on row {0}")]
    InvalidBounds(usize),
    #[error("invalid solver settings: {0}")]
    InvalidSettings(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub a: DMatrix<f64>,
    pub l: DVector<f64>,
    pub u: DVector<f64>,
}

impl QpProblem {
    /// A problem without constraints.
    pub fn unconstrained(p: DMatrix<f64>, q: DVector<f64>) -> Self {
        let n = q.len();
        Self {
            p,
            q,
            a: DMatrix::zeros(0, n),
            l: DVector::zeros(0),
            u: DVector::zeros(0),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.q.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.l.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.p * x)) + self.q.dot(x)
    }

    /// Checks dimensions and finiteness. Bounds may be infinite but not NaN.
    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.q.len();
        if self.p.nrows() != n || self.p.ncols() != n {
            return Err(QpError::Dimension(format!(
                "P is {}x{}, expected {n}x{n}",
                self.p.nrows(),
                self.p.ncols()
            )));
        }
        let m = self.a.nrows();
        if self.a.ncols() != n {
            return Err(QpError::Dimension(format!(
                "A has {} columns, expected {n}",
                self.a.ncols()
            )));
        }
        if self.l.len() != m || self.u.len() != m {
            return Err(QpError::Dimension(format!(
                "bounds have lengths {} and {}, expected {m}",
                self.l.len(),
                self.u.len()
            )));
        }
        if self.p.iter().any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite("P"));
        }
        if self.q.iter().any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite("q"));
        }
        if self.a.iter().any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite("A"));
        }
        if self.l.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(QpError::NonFinite("l"));
        }
        if self.u.iter().any(|v| v.is_nan() || *v == f64::NEG_INFINITY) {
            return Err(QpError::NonFinite("u"));
        }
        if let Some(i) = (0..m).find(|&i| self.l[i] > self.u[i]) {
            return Err(QpError::InvalidBounds(i));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Solved,
    PrimalInfeasible,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpResult {
    pub status: QpStatus,
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// True when the returned point came from the active-set polish.
    pub polished: bool,
    /// Farkas-type certificate when `status` is `PrimalInfeasible`.
    pub certificate: Option<DVector<f64>>,
    /// Unscaled primal and dual residuals of the returned point.
    pub prim_res: f64,
    pub dual_res: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpMethod {
    /// Operator splitting with polish.
    #[default]
    Admm,
    /// Dual active-set iteration; used on blocks with positive definite `P`,
    /// ADMM elsewhere. Exact infeasibility detection.
    ActiveSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverSettings {
    pub method: QpMethod,
    pub eps_abs: f64,
    pub eps_rel: f64,
    /// Relative tolerance of the primal infeasibility certificate.
    pub eps_prim_inf: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub scaling_iters: usize,
    pub adaptive_rho: bool,
    pub check_interval: usize,
    pub polish: bool,
    /// ADMM iterations between polish attempts.
    pub polish_interval: usize,
    pub polish_delta: f64,
    pub polish_refine_iter: usize,
    /// Split the problem into independent blocks before solving.
    pub decompose: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            method: QpMethod::Admm,
            eps_abs: 1e-6,
            eps_rel: 1e-6,
            eps_prim_inf: 1e-8,
            max_iter: 20_000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            scaling_iters: 10,
            adaptive_rho: true,
            check_interval: 5,
            polish: true,
            polish_interval: 25,
            polish_delta: 1e-7,
            polish_refine_iter: 4,
            decompose: true,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<(), QpError> {
        if !(self.eps_abs > 0.0 && self.eps_rel >= 0.0 && self.eps_prim_inf > 0.0) {
            return Err(QpError::InvalidSettings("tolerances must be positive"));
        }
        if self.max_iter == 0 || self.check_interval == 0 || self.polish_interval == 0 {
            return Err(QpError::InvalidSettings("iteration counts must be positive"));
        }
        if !(self.rho > 0.0 && self.sigma > 0.0 && self.polish_delta > 0.0) {
            return Err(QpError::InvalidSettings("rho, sigma and delta must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha < 2.0) {
            return Err(QpError::InvalidSettings("alpha must lie in (0, 2)"));
        }
        Ok(())
    }
}

/// Solves a QP from scratch.
pub fn solve_qp(problem: &QpProblem, settings: &SolverSettings) -> Result<QpResult, QpError> {
    let mut solver = QpSolver::new(&problem.p, &problem.a, settings.clone())?;
    solver.solve(&problem.q, &problem.l, &problem.u)
}

/// Residuals used by [`check_kkt`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.complementarity)
    }
}

pub fn kkt_residuals(
    problem: &QpProblem,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<KktResiduals, QpError> {
    let n = problem.num_vars();
    let m = problem.num_constraints();
    if x.len() != n || y.len() != m {
        return Err(QpError::Dimension(format!(
            "x has length {}, y has length {}; expected {n} and {m}",
            x.len(),
            y.len()
        )));
    }
    let grad = &problem.p * x + &problem.q + problem.a.tr_mul(y);
    let stationarity = grad.amax();
    let ax = &problem.a * x;
    let mut primal: f64 = 0.0;
    let mut complementarity: f64 = 0.0;
    for i in 0..m {
        let (lo, hi) = (problem.l[i], problem.u[i]);
        primal = primal.max(lo - ax[i]).max(ax[i] - hi);
        complementarity = complementarity.max(bound_complementarity(ax[i], y[i], lo, hi));
    }
    Ok(KktResiduals {
        stationarity,
        primal: primal.max(0.0),
        complementarity,
    })
}

/// Complementarity residual of one row: a positive multiplier must sit on the
/// upper bound, a negative one on the lower bound.
pub(crate) fn bound_complementarity(z: f64, y: f64, lo: f64, hi: f64) -> f64 {
    if y > 0.0 {
        if hi >= INFINITY_BOUND {
            y
        } else {
            y * (hi - z).abs()
        }
    } else if y < 0.0 {
        if lo <= -INFINITY_BOUND {
            -y
        } else {
            -y * (z - lo).abs()
        }
    } else {
        0.0
    }
}

/// True iff `(x, y)` satisfies stationarity, primal feasibility and
/// complementarity to within `tol` (absolute, infinity norm).
pub fn check_kkt(
    problem: &QpProblem,
    x: &DVector<f64>,
    y: &DVector<f64>,
    tol: f64,
) -> Result<bool, QpError> {
    Ok(kkt_residuals(problem, x, y)?.max() <= tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn inf() -> f64 {
        f64::INFINITY
    }

    #[test]
    fn active_lower_bound() {
        let prob = QpProblem {
            p: DMatrix::from_element(1, 1, 1.0),
            q: DVector::zeros(1),
            a: DMatrix::from_element(1, 1, 1.0),
            l: DVector::from_element(1, 1.0),
            u: DVector::from_element(1, inf()),
        };
        let res = solve_qp(&prob, &SolverSettings::default()).unwrap();
        assert_eq!(res.status, QpStatus::Solved);
        assert_abs_diff_eq!(res.x[0], 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(res.objective, 0.5, epsilon = 1e-8);
        assert!(res.y[0] < 0.0);
    }

    #[test]
    fn unconstrained_minimum() {
        let prob = QpProblem::unconstrained(
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![-1.0, -2.0]),
        );
        let res = solve_qp(&prob, &SolverSettings::default()).unwrap();
        assert_eq!(res.status, QpStatus::Solved);
        assert_abs_diff_eq!(res.x[0], 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(res.x[1], 2.0, epsilon = 1e-8);
    }

    fn halfplane_problem() -> QpProblem {
        QpProblem {
            p: DMatrix::identity(2, 2),
            q: DVector::from_vec(vec![-1.0, -2.0]),
            a: DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            l: DVector::from_element(1, -inf()),
            u: DVector::from_element(1, 1.0),
        }
    }

    #[test]
    fn halfplane_matches_hand_kkt() {
        let prob = halfplane_problem();
        let res = solve_qp(&prob, &SolverSettings::default()).unwrap();
        assert_eq!(res.status, QpStatus::Solved);
        assert_abs_diff_eq!(res.x[0], 0.0, epsilon = 1e-8);
        assert_abs_diff_eq!(res.x[1], 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(res.y[0], 1.0, epsilon = 1e-8);
        assert!(check_kkt(&prob, &res.x, &res.y, 1e-6).unwrap());
    }

    #[test]
    fn kkt_check_cases() {
        let prob = halfplane_problem();
        let x = DVector::from_vec(vec![0.0, 1.0]);
        let y = DVector::from_element(1, 1.0);
        assert!(check_kkt(&prob, &x, &y, 1e-6).unwrap());
        let perturbed = DVector::from_vec(vec![1e-2, 1.0]);
        assert!(!check_kkt(&prob, &perturbed, &y, 1e-6).unwrap());

        let free = QpProblem::unconstrained(
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![-1.0, -2.0]),
        );
        let x = -free.q.clone();
        assert!(check_kkt(&free, &x, &DVector::zeros(0), 1e-12).unwrap());

        let bad = check_kkt(&prob, &DVector::zeros(3), &y, 1e-6);
        assert!(matches!(bad, Err(QpError::Dimension(_))));
    }

    #[test]
    fn disjoint_bounds_are_infeasible() {
        let prob = QpProblem {
            p: DMatrix::from_element(1, 1, 1.0),
            q: DVector::zeros(1),
            a: DMatrix::from_column_slice(2, 1, &[1.0, 1.0]),
            l: DVector::from_vec(vec![-inf(), 1.0]),
            u: DVector::from_vec(vec![0.0, inf()]),
        };
        let res = solve_qp(&prob, &SolverSettings::default()).unwrap();
        assert_eq!(res.status, QpStatus::PrimalInfeasible);
        let v = res.certificate.expect("certificate");
        let atv = prob.a.tr_mul(&v);
        assert!(atv.amax() <= 1e-6 * v.amax());
        let support: f64 = (0..2)
            .map(|i| {
                if v[i] > 0.0 {
                    prob.u[i] * v[i]
                } else if v[i] < 0.0 {
                    prob.l[i] * v[i]
                } else {
                    0.0
                }
            })
            .sum();
        assert!(support < 0.0);
    }

    #[test]
    fn rejects_bad_input() {
        let mut prob = halfplane_problem();
        prob.q = DVector::zeros(3);
        assert!(matches!(
            solve_qp(&prob, &SolverSettings::default()),
            Err(QpError::Dimension(_))
        ));
        let mut prob = halfplane_problem();
        prob.p[(0, 0)] = f64::NAN;
        assert!(matches!(
            solve_qp(&prob, &SolverSettings::default()),
            Err(QpError::NonFinite("P"))
        ));
        let mut prob = halfplane_problem();
        prob.a[(0, 1)] = f64::INFINITY;
        assert!(matches!(
            solve_qp(&prob, &SolverSettings::default()),
            Err(QpError::NonFinite("A"))
        ));
        let mut prob = halfplane_problem();
        prob.p[(0, 1)] = 0.5;
        assert!(matches!(
            solve_qp(&prob, &SolverSettings::default()),
            Err(QpError::Asymmetric(_))
        ));
        let mut prob = halfplane_problem();
        prob.p[(0, 0)] = -1.0;
        assert!(matches!(
            solve_qp(&prob, &SolverSettings::default()),
            Err(QpError::NotConvex(_))
        ));
        let settings = SolverSettings {
            eps_abs: 0.0,
            ..SolverSettings::default()
        };
        assert!(matches!(
            solve_qp(&halfplane_problem(), &settings),
            Err(QpError::InvalidSettings(_))
        ));
    }

    #[test]
    fn deterministic_bitwise() {
        let prob = halfplane_problem();
        let a = solve_qp(&prob, &SolverSettings::default()).unwrap();
        let b = solve_qp(&prob, &SolverSettings::default()).unwrap();
        assert_eq!(a, b);
    }
}
