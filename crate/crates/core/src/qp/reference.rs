//! Reference problems and a brute-force solver used to check the QP solvers.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::QpProblem;

/// Strictly convex QP with a known feasible point; rows are one-sided or
/// two-sided (at most four two-sided rows to keep enumeration small).
pub fn random_strictly_convex_qp(rng: &mut impl Rng) -> QpProblem {
    let n = rng.gen_range(1..=8);
    let m = rng.gen_range(0..=12);
    let mfac = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let mut p = mfac.transpose() * &mfac;
    for i in 0..n {
        p[(i, i)] += 0.1;
    }
    let q = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
    let a = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
    let x0 = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    let ax0 = &a * &x0;
    let mut l = DVector::from_element(m, f64::NEG_INFINITY);
    let mut u = DVector::from_element(m, f64::INFINITY);
    let mut two_sided = 0;
    for i in 0..m {
        let kind = rng.gen_range(0..3);
        match kind {
            0 => u[i] = ax0[i] + rng.gen_range(0.0..0.5),
            1 => l[i] = ax0[i] - rng.gen_range(0.0..0.5),
            _ if two_sided < 4 => {
                two_sided += 1;
                l[i] = ax0[i] - rng.gen_range(0.0..0.5);
                u[i] = ax0[i] + rng.gen_range(0.0..0.5);
            }
            _ => u[i] = ax0[i] + rng.gen_range(0.0..0.5),
        }
    }
    QpProblem { p, q, a, l, u }
}

/// Independent oracle: enumerate active sets (each row inactive, at its lower
/// bound, or at its upper bound), solve the equality-constrained KKT system by
/// LU and return the first candidate satisfying all KKT conditions.
pub fn active_set_oracle(prob: &QpProblem) -> Option<(DVector<f64>, f64)> {
    let n = prob.q.len();
    let m = prob.l.len();
    let mut choices: Vec<Vec<i8>> = Vec::with_capacity(m);
    for i in 0..m {
        let mut c = vec![0i8];
        if prob.l[i].is_finite() {
            c.push(-1);
        }
        if prob.u[i].is_finite() {
            c.push(1);
        }
        choices.push(c);
    }
    let total: usize = choices.iter().map(|c| c.len()).product();
    let mut best: Option<(usize, DVector<f64>, f64)> = None;
    for code in 0..total {
        let mut rem = code;
        let mut state = vec![0i8; m];
        for i in 0..m {
            let k = choices[i].len();
            state[i] = choices[i][rem % k];
            rem /= k;
        }
        let active: Vec<usize> = (0..m).filter(|&i| state[i] != 0).collect();
        let k = active.len();
        if k > n {
            continue;
        }
        let dim = n + k;
        let mut kkt = DMatrix::zeros(dim, dim);
        let mut rhs = DVector::zeros(dim);
        kkt.view_mut((0, 0), (n, n)).copy_from(&prob.p);
        for j in 0..n {
            rhs[j] = -prob.q[j];
        }
        for (r, &i) in active.iter().enumerate() {
            for j in 0..n {
                kkt[(n + r, j)] = prob.a[(i, j)];
                kkt[(j, n + r)] = prob.a[(i, j)];
            }
            rhs[n + r] = if state[i] < 0 { prob.l[i] } else { prob.u[i] };
        }
        let Some(sol) = kkt.lu().solve(&rhs) else {
            continue;
        };
        let x = sol.rows(0, n).into_owned();
        let ax = &prob.a * &x;
        let feasible = (0..m).all(|i| ax[i] >= prob.l[i] - 1e-9 && ax[i] <= prob.u[i] + 1e-9);
        let signs_ok = active.iter().enumerate().all(|(r, &i)| {
            let y = sol[n + r];
            if state[i] < 0 {
                y <= 1e-9
            } else {
                y >= -1e-9
            }
        });
        if feasible && signs_ok {
            let f = 0.5 * x.dot(&(&prob.p * &x)) + prob.q.dot(&x);
            if best.as_ref().map_or(true, |b| k < b.0) {
                best = Some((k, x, f));
            }
        }
    }
    best.map(|(_, x, f)| (x, f))
}

/// Feasible random QP plus one extra row that is a copy of an existing
/// direction with a disjoint interval.
pub fn random_infeasible_qp(rng: &mut impl Rng) -> QpProblem {
    let mut prob = random_strictly_convex_qp(rng);
    let n = prob.q.len();
    let dir = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    let m = prob.l.len();
    let mut a = DMatrix::zeros(m + 2, n);
    a.view_mut((0, 0), (m, n)).copy_from(&prob.a);
    for j in 0..n {
        a[(m, j)] = dir[j];
        a[(m + 1, j)] = dir[j];
    }
    let lo = rng.gen_range(-1.0..1.0);
    let gap = rng.gen_range(0.05..1.0);
    let mut l = prob.l.clone().insert_rows(m, 2, 0.0);
    let mut u = prob.u.clone().insert_rows(m, 2, 0.0);
    l[m] = f64::NEG_INFINITY;
    u[m] = lo;
    l[m + 1] = lo + gap;
    u[m + 1] = f64::INFINITY;
    prob.a = a;
    prob.l = l;
    prob.u = u;
    prob
}
