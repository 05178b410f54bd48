//! Dual active-set method (Goldfarb–Idnani) for strictly convex blocks.
//!
//! Starts at the unconstrained minimum and adds the most violated
//! constraint until none is left, keeping the iterate dual feasible. The
//! active normals are tracked through `J = L⁻ᵀQ` and an upper triangular
//! `R` with `L⁻¹N = Q[R; 0]`, where `P = LLᵀ`. Infeasibility is exact: a
//! violated constraint whose normal lies in the span of the active normals
//! with no droppable multiplier yields a Farkas combination.

use nalgebra::{DMatrix, DVector};

use super::admm::BlockOutcome;
use super::QpStatus;

const FEAS_TOL: f64 = 1e-10;
const DEP_TOL: f64 = 1e-13;
const EQ_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    /// `aᵢᵀx ≥ lᵢ`
    Lower,
    /// `−aᵢᵀx ≥ −uᵢ`
    Upper,
    /// `aᵢᵀx = lᵢ`, never dropped.
    Equal,
}

#[derive(Debug, Clone, Copy)]
struct Active {
    row: usize,
    kind: Kind,
}

pub(super) struct DualBlock {
    n: usize,
    m: usize,
    p: DMatrix<f64>,
    /// Columns are the constraint rows of `A`.
    at: DMatrix<f64>,
    /// Nonzeros of each constraint row.
    sparse: Vec<Vec<(usize, f64)>>,
    row_norm: Vec<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    j0: DMatrix<f64>,
    max_iter: usize,
    certificate: Option<DVector<f64>>,
}

struct Work {
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    act: Vec<Active>,
    mult: Vec<f64>,
}

fn givens(a: f64, b: f64) -> (f64, f64, f64) {
    let h = a.hypot(b);
    if h == 0.0 {
        (1.0, 0.0, 0.0)
    } else {
        (a / h, b / h, h)
    }
}

/// `col_i ← c·col_i + s·col_k`, `col_k ← −s·col_i + c·col_k`.
fn rotate_cols(m: &mut DMatrix<f64>, i: usize, k: usize, c: f64, s: f64) {
    debug_assert!(i < k);
    let nr = m.nrows();
    let (head, tail) = m.as_mut_slice().split_at_mut(k * nr);
    let ci = &mut head[i * nr..(i + 1) * nr];
    let ck = &mut tail[..nr];
    for (a, b) in ci.iter_mut().zip(ck.iter_mut()) {
        let (x, y) = (*a, *b);
        *a = c * x + s * y;
        *b = -s * x + c * y;
    }
}

impl Work {
    fn nact(&self) -> usize {
        self.act.len()
    }

    /// Appends a constraint whose transformed normal is `d = Jᵀn`.
    fn add(&mut self, mut d: DVector<f64>, a: Active, mult: f64) {
        let q = self.nact();
        let n = d.len();
        for k in (q + 1..n).rev() {
            if d[k] == 0.0 {
                continue;
            }
            let (c, s, h) = givens(d[k - 1], d[k]);
            d[k - 1] = h;
            d[k] = 0.0;
            rotate_cols(&mut self.j, k - 1, k, c, s);
        }
        if d[q] < 0.0 {
            d[q] = -d[q];
            self.j.column_mut(q).neg_mut();
        }
        for i in 0..=q {
            self.r[(i, q)] = d[i];
        }
        self.act.push(a);
        self.mult.push(mult);
    }

    fn drop(&mut self, k: usize) {
        let q = self.nact();
        self.act.remove(k);
        self.mult.remove(k);
        for c in k..q - 1 {
            for i in 0..q {
                self.r[(i, c)] = self.r[(i, c + 1)];
            }
        }
        for i in 0..q {
            self.r[(i, q - 1)] = 0.0;
        }
        // restore the triangle on rows k..q-1
        for c in k..q - 1 {
            let (cs, sn, h) = givens(self.r[(c, c)], self.r[(c + 1, c)]);
            self.r[(c, c)] = h;
            self.r[(c + 1, c)] = 0.0;
            for cc in c + 1..q - 1 {
                let (a, b) = (self.r[(c, cc)], self.r[(c + 1, cc)]);
                self.r[(c, cc)] = cs * a + sn * b;
                self.r[(c + 1, cc)] = -sn * a + cs * b;
            }
            rotate_cols(&mut self.j, c, c + 1, cs, sn);
        }
    }

    /// `R⁻¹ d[..q]` for the active triangle.
    fn back_solve(&self, d: &DVector<f64>) -> Vec<f64> {
        let q = self.nact();
        let mut r = vec![0.0; q];
        for i in (0..q).rev() {
            let mut s = d[i];
            for k in i + 1..q {
                s -= self.r[(i, k)] * r[k];
            }
            r[i] = s / self.r[(i, i)];
        }
        r
    }
}

impl DualBlock {
    /// `None` when `P` is not positive definite.
    pub fn new(p: &DMatrix<f64>, a: &DMatrix<f64>, max_iter: usize) -> Option<Self> {
        let n = p.nrows();
        let chol = nalgebra::Cholesky::new(p.clone())?;
        let l_inv = chol.l().solve_lower_triangular(&DMatrix::identity(n, n))?;
        let j0 = l_inv.transpose();
        if j0.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let at = a.transpose();
        let row_norm = (0..a.nrows()).map(|i| at.column(i).norm()).collect();
        let sparse = (0..a.nrows())
            .map(|i| at.column(i).iter().copied().enumerate().filter(|&(_, v)| v != 0.0).collect())
            .collect();
        Some(Self {
            n,
            m: a.nrows(),
            p: p.clone(),
            at,
            sparse,
            row_norm,
            chol,
            j0,
            max_iter,
            certificate: None,
        })
    }

    pub fn clear_warm_start(&mut self) {
        self.certificate = None;
    }

    fn sign(a: Active) -> f64 {
        match a.kind {
            Kind::Upper => -1.0,
            _ => 1.0,
        }
    }

    /// `nᵀv` for the normal of `a`.
    fn normal_dot(&self, a: Active, v: &DVector<f64>) -> f64 {
        Self::sign(a) * self.sparse[a.row].iter().map(|&(c, x)| x * v[c]).sum::<f64>()
    }

    /// `Jᵀn` for the normal of `a`.
    fn transformed(&self, a: Active, j: &DMatrix<f64>) -> DVector<f64> {
        let row = &self.sparse[a.row];
        let sign = Self::sign(a);
        DVector::from_iterator(
            self.n,
            j.column_iter().map(|col| sign * row.iter().map(|&(c, x)| x * col[c]).sum::<f64>()),
        )
    }

    fn rhs(a: Active, l: &DVector<f64>, u: &DVector<f64>) -> f64 {
        match a.kind {
            Kind::Upper => -u[a.row],
            _ => l[a.row],
        }
    }

    fn certifies(&self, v: &DVector<f64>, l: &DVector<f64>, u: &DVector<f64>) -> bool {
        let norm = v.amax();
        if norm == 0.0 {
            return false;
        }
        let mut support = 0.0;
        for i in 0..self.m {
            if v[i] > 0.0 {
                if !u[i].is_finite() {
                    return false;
                }
                support += u[i] * v[i];
            } else if v[i] < 0.0 {
                if !l[i].is_finite() {
                    return false;
                }
                support += l[i] * v[i];
            }
        }
        let atv = &self.at * v;
        support < -1e-9 * norm && atv.amax() < 1e-9 * norm
    }

    fn infeasible(&self, v: DVector<f64>, iterations: usize) -> BlockOutcome {
        BlockOutcome {
            status: QpStatus::PrimalInfeasible,
            x: DVector::zeros(self.n),
            y: DVector::zeros(self.m),
            iterations,
            polished: false,
            certificate: Some(v),
            prim_res: f64::INFINITY,
            dual_res: f64::INFINITY,
        }
    }

    pub fn solve(&mut self, q: &DVector<f64>, l: &DVector<f64>, u: &DVector<f64>) -> BlockOutcome {
        let (n, m) = (self.n, self.m);
        if let Some(cert) = self.certificate.take() {
            if self.certifies(&cert, l, u) {
                self.certificate = Some(cert.clone());
                return self.infeasible(cert, 0);
            }
        }
        let mut x = -self.chol.solve(q);
        let mut w = Work {
            j: self.j0.clone(),
            r: DMatrix::zeros(n, n.max(1)),
            act: Vec::new(),
            mult: Vec::new(),
        };
        let mut is_active = vec![false; m];
        let mut iterations = 0;

        // equalities first
        let mut pending_eq: Vec<usize> = (0..m)
            .filter(|&i| l[i].is_finite() && u[i].is_finite() && u[i] - l[i] <= EQ_TOL * l[i].abs().max(1.0))
            .collect();
        pending_eq.reverse();

        loop {
            iterations += 1;
            if iterations > self.max_iter {
                return self.finish(QpStatus::MaxIterations, x, &w, q, l, u, iterations);
            }
            let next = match pending_eq.pop() {
                Some(i) => Some(Active { row: i, kind: Kind::Equal }),
                None => self.most_violated(&x, l, u, &is_active),
            };
            let Some(cp) = next else {
                return self.finish(QpStatus::Solved, x, &w, q, l, u, iterations);
            };
            let bp = Self::rhs(cp, l, u);
            let mut sp = self.normal_dot(cp, &x) - bp;
            // equalities violated from above are approached from the other side
            let sp_sign = if cp.kind == Kind::Equal && sp > 0.0 { -1.0 } else { 1.0 };
            sp *= sp_sign;
            let mut u_plus = 0.0;
            loop {
                iterations += 1;
                if iterations > self.max_iter {
                    return self.finish(QpStatus::MaxIterations, x, &w, q, l, u, iterations);
                }
                let d = self.transformed(cp, &w.j) * sp_sign;
                let qn = w.nact();
                let mut z = DVector::zeros(n);
                for k in qn..n {
                    z.axpy(d[k], &w.j.column(k), 1.0);
                }
                let r = w.back_solve(&d);
                let mut t1 = f64::INFINITY;
                let mut drop_k = None;
                for (k, a) in w.act.iter().enumerate() {
                    if a.kind != Kind::Equal && r[k] > 0.0 {
                        let ratio = w.mult[k] / r[k];
                        if ratio < t1 {
                            t1 = ratio;
                            drop_k = Some(k);
                        }
                    }
                }
                let d2: f64 = d.rows(qn, n - qn).norm_squared();
                let ztn = sp_sign * self.normal_dot(cp, &z);
                let t2 = if d2 > DEP_TOL * d.norm_squared() && ztn > 0.0 {
                    -sp / ztn
                } else {
                    f64::INFINITY
                };
                let t = t1.min(t2);
                if t.is_infinite() {
                    if cp.kind == Kind::Equal && sp.abs() <= FEAS_TOL * bp.abs().max(1.0) {
                        // dependent and consistent equality
                        break;
                    }
                    let v = self.farkas(cp, sp_sign, &w, &r);
                    self.certificate = Some(v.clone());
                    return self.infeasible(v, iterations);
                }
                for (k, mk) in w.mult.iter_mut().enumerate() {
                    *mk -= t * r[k];
                }
                u_plus += t;
                if t2.is_finite() {
                    x.axpy(t, &z, 1.0);
                    sp += t * ztn;
                }
                if t2 <= t1 {
                    // re-express a flipped equality normal with its original sign
                    let (dd, mult) = if sp_sign < 0.0 { (-d, -u_plus) } else { (d, u_plus) };
                    w.add(dd, cp, mult);
                    is_active[cp.row] = true;
                    break;
                }
                let k = drop_k.expect("partial step has an index");
                is_active[w.act[k].row] = false;
                w.drop(k);
            }
        }
    }

    fn most_violated(&self, x: &DVector<f64>, l: &DVector<f64>, u: &DVector<f64>, active: &[bool]) -> Option<Active> {
        let mut best: Option<(f64, Active)> = None;
        for i in 0..self.m {
            if active[i] || self.row_norm[i] == 0.0 {
                continue;
            }
            let si: f64 = self.sparse[i].iter().map(|&(c, v)| v * x[c]).sum();
            let (viol, kind) = if si < l[i] {
                (l[i] - si, Kind::Lower)
            } else if si > u[i] {
                (si - u[i], Kind::Upper)
            } else {
                continue;
            };
            let b = if kind == Kind::Lower { l[i] } else { u[i] };
            if viol <= FEAS_TOL * b.abs().max(1.0) {
                continue;
            }
            let score = viol / self.row_norm[i];
            if best.map_or(true, |(bs, _)| score > bs) {
                best = Some((score, Active { row: i, kind }));
            }
        }
        best.map(|(_, a)| a)
    }

    /// Row weights `v` with `Aᵀv = 0` and negative support from the blocked
    /// constraint and the current dual direction.
    fn farkas(&self, cp: Active, sign: f64, w: &Work, r: &[f64]) -> DVector<f64> {
        let mut v = DVector::zeros(self.m);
        let mut put = |a: Active, lam: f64| match a.kind {
            Kind::Upper => v[a.row] += lam,
            _ => v[a.row] -= lam,
        };
        put(cp, sign);
        for (k, &a) in w.act.iter().enumerate() {
            put(a, -r[k]);
        }
        let norm = v.amax();
        if norm > 0.0 {
            v /= norm;
        }
        v
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        &self,
        status: QpStatus,
        x: DVector<f64>,
        w: &Work,
        q: &DVector<f64>,
        l: &DVector<f64>,
        u: &DVector<f64>,
        iterations: usize,
    ) -> BlockOutcome {
        let mut y = DVector::zeros(self.m);
        for (a, &mu) in w.act.iter().zip(&w.mult) {
            match a.kind {
                Kind::Upper => y[a.row] += mu,
                _ => y[a.row] -= mu,
            }
        }
        let s = self.at.tr_mul(&x);
        let mut prim: f64 = 0.0;
        for i in 0..self.m {
            prim = prim.max(l[i] - s[i]).max(s[i] - u[i]);
        }
        let g = &self.p * &x + q + &self.at * &y;
        BlockOutcome {
            status,
            x,
            y,
            iterations,
            polished: status == QpStatus::Solved,
            certificate: None,
            prim_res: prim.max(0.0),
            dual_res: g.amax(),
        }
    }
}
