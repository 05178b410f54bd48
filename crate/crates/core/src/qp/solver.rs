use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use super::admm::{Block, BlockOutcome};
use super::dual::DualBlock;
use super::{QpError, QpMethod, QpResult, QpStatus, SolverSettings, INFINITY_BOUND};

const SYMMETRY_TOL: f64 = 1e-9;
const PSD_TOL: f64 = 1e-9;

enum BlockSolver {
    Admm(Box<Block>),
    Dual(Box<DualBlock>),
}

impl BlockSolver {
    fn solve(&mut self, q: &DVector<f64>, l: &DVector<f64>, u: &DVector<f64>) -> BlockOutcome {
        match self {
            BlockSolver::Admm(b) => b.solve(q, l, u),
            BlockSolver::Dual(b) => b.solve(q, l, u),
        }
    }

    fn clear_warm_start(&mut self) {
        match self {
            BlockSolver::Admm(b) => b.clear_warm_start(),
            BlockSolver::Dual(b) => b.clear_warm_start(),
        }
    }
}

struct BlockSpec {
    vars: Vec<usize>,
    rows: Vec<usize>,
    solver: BlockSolver,
}

/// A QP solver prepared for fixed `P` and `A`.
///
/// Setup validates the matrices, splits the problem into independent blocks
/// (connected components of the variable coupling graph), scales and factors
/// each block. Repeated [`QpSolver::solve`] calls with new `q`, `l`, `u` reuse
/// the factorizations and warm start from the previous solution.
pub struct QpSolver {
    n: usize,
    m: usize,
    p: DMatrix<f64>,
    blocks: Vec<BlockSpec>,
    empty_rows: Vec<usize>,
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut i: usize) -> usize {
        while self.0[i] != i {
            self.0[i] = self.0[self.0[i]];
            i = self.0[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // keep the smaller index as root so block order is deterministic
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.0[hi] = lo;
        }
    }
}

impl QpSolver {
    pub fn new(p: &DMatrix<f64>, a: &DMatrix<f64>, settings: SolverSettings) -> Result<Self, QpError> {
        settings.validate()?;
        let n = p.nrows();
        if p.ncols() != n {
            return Err(QpError::Dimension(format!("P is {}x{}", p.nrows(), p.ncols())));
        }
        if a.ncols() != n {
            return Err(QpError::Dimension(format!(
                "A has {} columns, expected {n}",
                a.ncols()
            )));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite("P"));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite("A"));
        }
        let scale = p.amax().max(1.0);
        let mut asym: f64 = 0.0;
        for j in 0..n {
            for i in 0..j {
                asym = asym.max((p[(i, j)] - p[(j, i)]).abs());
            }
        }
        if asym > SYMMETRY_TOL * scale {
            return Err(QpError::Asymmetric(asym));
        }
        let p = (p + p.transpose()) * 0.5;
        let m = a.nrows();

        let mut uf = UnionFind((0..n).collect());
        if settings.decompose {
            for j in 0..n {
                for i in 0..j {
                    if p[(i, j)] != 0.0 {
                        uf.union(i, j);
                    }
                }
            }
        } else {
            for j in 1..n {
                uf.union(0, j);
            }
        }
        let mut empty_rows = Vec::new();
        let mut row_root = vec![usize::MAX; m];
        for i in 0..m {
            let mut first: Option<usize> = None;
            for j in 0..n {
                if a[(i, j)] != 0.0 {
                    match first {
                        None => first = Some(j),
                        Some(f) => uf.union(f, j),
                    }
                }
            }
            match first {
                Some(f) => row_root[i] = f,
                None => empty_rows.push(i),
            }
        }

        let mut roots: Vec<usize> = Vec::new();
        let mut block_of = vec![0usize; n];
        for j in 0..n {
            let r = uf.find(j);
            let idx = match roots.iter().position(|&x| x == r) {
                Some(idx) => idx,
                None => {
                    roots.push(r);
                    roots.len() - 1
                }
            };
            block_of[j] = idx;
        }
        let mut vars: Vec<Vec<usize>> = vec![Vec::new(); roots.len()];
        for j in 0..n {
            vars[block_of[j]].push(j);
        }
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); roots.len()];
        for i in 0..m {
            if row_root[i] != usize::MAX {
                let b = block_of[uf.find(row_root[i])];
                rows[b].push(i);
            }
        }

        let mut blocks = Vec::with_capacity(roots.len());
        for (vars, rows) in vars.into_iter().zip(rows) {
            let pb = DMatrix::from_fn(vars.len(), vars.len(), |i, j| p[(vars[i], vars[j])]);
            check_psd(&pb, scale)?;
            let ab = DMatrix::from_fn(rows.len(), vars.len(), |i, j| a[(rows[i], vars[j])]);
            // the active-set method needs P ≻ 0; other blocks use ADMM
            let dual = match settings.method {
                QpMethod::ActiveSet => DualBlock::new(&pb, &ab, settings.max_iter),
                QpMethod::Admm => None,
            };
            let solver = match dual {
                Some(d) => BlockSolver::Dual(Box::new(d)),
                None => BlockSolver::Admm(Box::new(Block::new(&pb, &ab, settings.clone()))),
            };
            blocks.push(BlockSpec { vars, rows, solver });
        }
        Ok(Self {
            n,
            m,
            p,
            blocks,
            empty_rows,
        })
    }

    pub fn num_vars(&self) -> usize {
        self.n
    }

    pub fn num_constraints(&self) -> usize {
        self.m
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Drops warm-start data so the next solve starts from zero.
    pub fn clear_warm_start(&mut self) {
        for b in &mut self.blocks {
            b.solver.clear_warm_start();
        }
    }

    pub fn solve(&mut self, q: &DVector<f64>, l: &DVector<f64>, u: &DVector<f64>) -> Result<QpResult, QpError> {
        let (n, m) = (self.n, self.m);
        if q.len() != n || l.len() != m || u.len() != m {
            return Err(QpError::Dimension(format!(
                "q, l, u have lengths {}, {}, {}; expected {n}, {m}, {m}",
                q.len(),
                l.len(),
                u.len()
            )));
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite("q"));
        }
        if l.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(QpError::NonFinite("l"));
        }
        if u.iter().any(|v| v.is_nan() || *v == f64::NEG_INFINITY) {
            return Err(QpError::NonFinite("u"));
        }
        if let Some(i) = (0..m).find(|&i| l[i] > u[i]) {
            return Err(QpError::InvalidBounds(i));
        }
        let l = l.map(|v| if v <= -INFINITY_BOUND { f64::NEG_INFINITY } else { v });
        let u = u.map(|v| if v >= INFINITY_BOUND { f64::INFINITY } else { v });

        let mut x = DVector::zeros(n);
        let mut y = DVector::zeros(m);
        let mut status = QpStatus::Solved;
        let mut iterations = 0;
        let mut polished = true;
        let mut certificate = None;
        let mut prim_res: f64 = 0.0;
        let mut dual_res: f64 = 0.0;

        for &i in &self.empty_rows {
            if l[i] > 0.0 || u[i] < 0.0 {
                let mut v = DVector::zeros(m);
                v[i] = if l[i] > 0.0 { -1.0 } else { 1.0 };
                return Ok(QpResult {
                    status: QpStatus::PrimalInfeasible,
                    x,
                    y,
                    objective: f64::NAN,
                    iterations: 0,
                    polished: false,
                    certificate: Some(v),
                    prim_res: l[i].max(-u[i]),
                    dual_res: f64::INFINITY,
                });
            }
        }

        for b in &mut self.blocks {
            let qb = DVector::from_iterator(b.vars.len(), b.vars.iter().map(|&j| q[j]));
            let lb = DVector::from_iterator(b.rows.len(), b.rows.iter().map(|&i| l[i]));
            let ub = DVector::from_iterator(b.rows.len(), b.rows.iter().map(|&i| u[i]));
            let out = b.solver.solve(&qb, &lb, &ub);
            for (k, &j) in b.vars.iter().enumerate() {
                x[j] = out.x[k];
            }
            for (k, &i) in b.rows.iter().enumerate() {
                y[i] = out.y[k];
            }
            iterations = iterations.max(out.iterations);
            polished &= out.polished;
            prim_res = prim_res.max(out.prim_res);
            dual_res = dual_res.max(out.dual_res);
            match out.status {
                QpStatus::Solved => {}
                QpStatus::MaxIterations => status = QpStatus::MaxIterations,
                QpStatus::PrimalInfeasible => {
                    let mut v = DVector::zeros(m);
                    if let Some(c) = out.certificate {
                        for (k, &i) in b.rows.iter().enumerate() {
                            v[i] = c[k];
                        }
                    }
                    certificate = Some(v);
                    status = QpStatus::PrimalInfeasible;
                    break;
                }
            }
        }
        let objective = if status == QpStatus::PrimalInfeasible {
            f64::NAN
        } else {
            0.5 * x.dot(&(&self.p * &x)) + q.dot(&x)
        };
        Ok(QpResult {
            status,
            x,
            y,
            objective,
            iterations,
            polished: polished && status == QpStatus::Solved,
            certificate,
            prim_res,
            dual_res,
        })
    }
}

fn check_psd(p: &DMatrix<f64>, scale: f64) -> Result<(), QpError> {
    let n = p.nrows();
    if n == 0 {
        return Ok(());
    }
    let mut shifted = p.clone();
    for i in 0..n {
        shifted[(i, i)] += PSD_TOL * scale;
    }
    if Cholesky::new(shifted).is_some() {
        return Ok(());
    }
    let min_eig = SymmetricEigen::new(p.clone())
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b));
    if min_eig >= -PSD_TOL {
        Ok(())
    } else {
        Err(QpError::NotConvex(min_eig))
    }
}
