use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::{bound_complementarity, QpStatus, SolverSettings, INFINITY_BOUND};

const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const RHO_EQ_SCALE: f64 = 1e3;
const RHO_EQ_TOL: f64 = 1e-4;
const SCALING_MIN: f64 = 1e-4;
const SCALING_MAX: f64 = 1e4;
const ADAPT_INTERVAL: usize = 50;
const ADAPT_FACTOR: f64 = 5.0;
const POLISH_ROUNDS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Lower,
    Upper,
}

/// Outcome of solving one independent block, in unscaled coordinates.
#[derive(Debug, Clone)]
pub(super) struct BlockOutcome {
    pub status: QpStatus,
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub iterations: usize,
    pub polished: bool,
    pub certificate: Option<DVector<f64>>,
    pub prim_res: f64,
    pub dual_res: f64,
}

struct Warm {
    x: DVector<f64>,
    z: DVector<f64>,
    y: DVector<f64>,
    active: Vec<(usize, Side)>,
}

struct Residuals {
    prim: f64,
    dual: f64,
    eps_prim: f64,
    eps_dual: f64,
    // scaled quantities for rho adaptation
    prim_scaled: f64,
    prim_norm_scaled: f64,
    dual_scaled: f64,
    dual_norm_scaled: f64,
}

/// ADMM solver for one block with fixed `P` and `A`; `q`, `l`, `u` vary per
/// call. Keeps its factorizations and the last solution as a warm start.
pub(super) struct Block {
    n: usize,
    m: usize,
    p: DMatrix<f64>,
    a: DMatrix<f64>,
    d: DVector<f64>,
    e: DVector<f64>,
    c: f64,
    settings: SolverSettings,
    rho: f64,
    rho_vec: DVector<f64>,
    kkt: Cholesky<f64, Dyn>,
    polish_l: Option<DMatrix<f64>>,
    polish_chol: Option<Cholesky<f64, Dyn>>,
    warm: Option<Warm>,
    certificate: Option<DVector<f64>>,
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

fn clamp_scaling(v: f64) -> f64 {
    if v < SCALING_MIN {
        1.0
    } else {
        (1.0 / v.sqrt()).clamp(SCALING_MIN, SCALING_MAX)
    }
}

impl Block {
    pub fn new(p: &DMatrix<f64>, a: &DMatrix<f64>, settings: SolverSettings) -> Self {
        let n = p.nrows();
        let m = a.nrows();
        let mut p = p.clone();
        let mut a = a.clone();
        let mut d = DVector::from_element(n, 1.0);
        let mut e = DVector::from_element(m, 1.0);

        // Ruiz equilibration of the KKT matrix [P Aᵀ; A 0].
        for _ in 0..settings.scaling_iters {
            let mut dd = DVector::zeros(n);
            for j in 0..n {
                let pn = p.column(j).amax();
                let an = if m > 0 { a.column(j).amax() } else { 0.0 };
                dd[j] = clamp_scaling(pn.max(an));
            }
            let mut ee = DVector::zeros(m);
            for i in 0..m {
                ee[i] = clamp_scaling(a.row(i).amax());
            }
            for j in 0..n {
                for i in 0..n {
                    p[(i, j)] *= dd[i] * dd[j];
                }
                for i in 0..m {
                    a[(i, j)] *= ee[i] * dd[j];
                }
            }
            d.component_mul_assign(&dd);
            e.component_mul_assign(&ee);
        }
        let mean_col = if n > 0 {
            (0..n).map(|j| p.column(j).amax()).sum::<f64>() / n as f64
        } else {
            0.0
        };
        let c = if mean_col < SCALING_MIN {
            1.0
        } else {
            (1.0 / mean_col).clamp(SCALING_MIN, SCALING_MAX)
        };
        p *= c;

        let rho = settings.rho;
        let rho_vec = DVector::from_element(m, rho);
        let kkt = factor_kkt(&p, &a, &rho_vec, settings.sigma);
        Self {
            n,
            m,
            p,
            a,
            d,
            e,
            c,
            settings,
            rho,
            rho_vec,
            kkt,
            polish_l: None,
            polish_chol: None,
            warm: None,
            certificate: None,
        }
    }

    pub fn clear_warm_start(&mut self) {
        self.warm = None;
        self.certificate = None;
        // rho_vec follows on the next solve
        self.rho = self.settings.rho;
    }

    fn row_rho(&self, lo: f64, hi: f64, rho: f64) -> f64 {
        if lo <= -INFINITY_BOUND && hi >= INFINITY_BOUND {
            RHO_MIN
        } else if hi - lo < RHO_EQ_TOL {
            (rho * RHO_EQ_SCALE).min(RHO_MAX)
        } else {
            rho
        }
    }

    fn update_rho(&mut self, rho: f64, l: &DVector<f64>, u: &DVector<f64>) {
        let mut changed = rho != self.rho;
        self.rho = rho;
        for i in 0..self.m {
            let r = self.row_rho(l[i], u[i], rho);
            if r != self.rho_vec[i] {
                self.rho_vec[i] = r;
                changed = true;
            }
        }
        if changed {
            self.kkt = factor_kkt(&self.p, &self.a, &self.rho_vec, self.settings.sigma);
        }
    }

    /// Solves with the given unscaled `q`, `l`, `u`. Bounds must already use
    /// exact infinities for absent sides.
    pub fn solve(&mut self, q: &DVector<f64>, l: &DVector<f64>, u: &DVector<f64>) -> BlockOutcome {
        let (n, m) = (self.n, self.m);
        let qs = self.d.component_mul(q) * self.c;
        let ls = self.e.component_mul(l);
        let us = self.e.component_mul(u);
        self.update_rho(self.rho, &ls, &us);

        if let Some(cert) = self.certificate.take() {
            if self.certifies(&cert, l, u) {
                self.certificate = Some(cert.clone());
                return BlockOutcome {
                    status: QpStatus::PrimalInfeasible,
                    x: DVector::zeros(n),
                    y: DVector::zeros(m),
                    iterations: 0,
                    polished: false,
                    certificate: Some(cert),
                    prim_res: f64::INFINITY,
                    dual_res: f64::INFINITY,
                };
            }
        }

        if self.settings.polish {
            let guess = self.warm.as_ref().map(|w| w.active.clone());
            let guess = match guess {
                Some(active) => Some(active),
                None if m == 0 => Some(Vec::new()),
                None => None,
            };
            if let Some(active) = guess {
                if let Some(out) = self.polish(&active, &qs, &ls, &us, 0) {
                    return out;
                }
            }
        }

        let (mut x, mut z, mut y) = match &self.warm {
            Some(w) => (w.x.clone(), w.z.clone(), w.y.clone()),
            None => (DVector::zeros(n), DVector::zeros(m), DVector::zeros(m)),
        };
        for i in 0..m {
            z[i] = z[i].clamp(ls[i], us[i]);
        }
        let alpha = self.settings.alpha;
        let sigma = self.settings.sigma;
        let mut rhs = DVector::zeros(n);
        let mut tmp = DVector::zeros(m);
        let mut zt = DVector::zeros(m);
        let mut y_prev = DVector::zeros(m);
        let mut last_res: Option<Residuals> = None;

        for k in 1..=self.settings.max_iter {
            let check = k % self.settings.check_interval == 0;
            // rhs = σx − q + Aᵀ(ρ∘z − y)
            for i in 0..m {
                tmp[i] = self.rho_vec[i] * z[i] - y[i];
            }
            rhs.gemv_tr(1.0, &self.a, &tmp, 0.0);
            rhs.axpy(sigma, &x, 1.0);
            rhs -= &qs;
            self.kkt.solve_mut(&mut rhs);
            zt.gemv(1.0, &self.a, &rhs, 0.0);
            x.axpy(alpha, &rhs, 1.0 - alpha);
            if check {
                y_prev.copy_from(&y);
            }
            for i in 0..m {
                let zh = alpha * zt[i] + (1.0 - alpha) * z[i];
                let zn = (zh + y[i] / self.rho_vec[i]).clamp(ls[i], us[i]);
                y[i] += self.rho_vec[i] * (zh - zn);
                z[i] = zn;
            }

            if !check {
                continue;
            }
            let res = self.residuals(&x, &z, &y, &qs);
            if res.prim <= res.eps_prim && res.dual <= res.eps_dual {
                if self.settings.polish {
                    let active = self.guess_active(&z, &y, &ls, &us);
                    if let Some(out) = self.polish(&active, &qs, &ls, &us, k) {
                        return out;
                    }
                }
                let active = self.guess_active(&z, &y, &ls, &us);
                let out = self.unscaled_outcome(QpStatus::Solved, &x, &y, k, false, &res);
                self.warm = Some(Warm { x, z, y, active });
                return out;
            }
            if let Some(cert) = self.infeasibility_certificate(&y, &y_prev, l, u) {
                self.warm = None;
                self.certificate = Some(cert.clone());
                let mut out = self.unscaled_outcome(QpStatus::PrimalInfeasible, &x, &y, k, false, &res);
                out.certificate = Some(cert);
                return out;
            }
            if self.settings.polish && k % self.settings.polish_interval == 0 {
                let active = self.guess_active(&z, &y, &ls, &us);
                if let Some(out) = self.polish(&active, &qs, &ls, &us, k) {
                    return out;
                }
            }
            if self.settings.adaptive_rho && k % ADAPT_INTERVAL == 0 {
                let num = res.prim_scaled / res.prim_norm_scaled.max(1e-30);
                let den = res.dual_scaled / res.dual_norm_scaled.max(1e-30);
                let new_rho = (self.rho * (num / den.max(1e-30)).sqrt()).clamp(RHO_MIN, RHO_MAX);
                if new_rho > self.rho * ADAPT_FACTOR || new_rho < self.rho / ADAPT_FACTOR {
                    self.update_rho(new_rho, &ls, &us);
                }
            }
            last_res = Some(res);
        }
        let res = last_res.unwrap_or_else(|| self.residuals(&x, &z, &y, &qs));
        self.warm = None;
        self.unscaled_outcome(QpStatus::MaxIterations, &x, &y, self.settings.max_iter, false, &res)
    }

    fn residuals(&self, x: &DVector<f64>, z: &DVector<f64>, y: &DVector<f64>, qs: &DVector<f64>) -> Residuals {
        let ax = &self.a * x;
        let px = &self.p * x;
        let aty = self.a.tr_mul(y);
        let mut prim: f64 = 0.0;
        let mut ax_norm: f64 = 0.0;
        let mut z_norm: f64 = 0.0;
        let mut prim_scaled: f64 = 0.0;
        let mut prim_norm_scaled: f64 = 0.0;
        for i in 0..self.m {
            let ei = 1.0 / self.e[i];
            prim = prim.max(((ax[i] - z[i]) * ei).abs());
            ax_norm = ax_norm.max((ax[i] * ei).abs());
            z_norm = z_norm.max((z[i] * ei).abs());
            prim_scaled = prim_scaled.max((ax[i] - z[i]).abs());
            prim_norm_scaled = prim_norm_scaled.max(ax[i].abs()).max(z[i].abs());
        }
        let cinv = 1.0 / self.c;
        let mut dual: f64 = 0.0;
        let mut px_norm: f64 = 0.0;
        let mut aty_norm: f64 = 0.0;
        let mut q_norm: f64 = 0.0;
        let mut dual_scaled: f64 = 0.0;
        let mut dual_norm_scaled: f64 = 0.0;
        for j in 0..self.n {
            let s = cinv / self.d[j];
            let g = px[j] + qs[j] + aty[j];
            dual = dual.max((g * s).abs());
            px_norm = px_norm.max((px[j] * s).abs());
            aty_norm = aty_norm.max((aty[j] * s).abs());
            q_norm = q_norm.max((qs[j] * s).abs());
            dual_scaled = dual_scaled.max(g.abs());
            dual_norm_scaled = dual_norm_scaled
                .max(px[j].abs())
                .max(aty[j].abs())
                .max(qs[j].abs());
        }
        let s = &self.settings;
        Residuals {
            prim,
            dual,
            eps_prim: s.eps_abs + s.eps_rel * ax_norm.max(z_norm),
            eps_dual: s.eps_abs + s.eps_rel * px_norm.max(aty_norm).max(q_norm),
            prim_scaled,
            prim_norm_scaled,
            dual_scaled,
            dual_norm_scaled,
        }
    }

    fn unscaled_outcome(
        &self,
        status: QpStatus,
        x: &DVector<f64>,
        y: &DVector<f64>,
        iterations: usize,
        polished: bool,
        res: &Residuals,
    ) -> BlockOutcome {
        BlockOutcome {
            status,
            x: self.d.component_mul(x),
            y: self.e.component_mul(y) / self.c,
            iterations,
            polished,
            certificate: None,
            prim_res: res.prim,
            dual_res: res.dual,
        }
    }

    fn guess_active(&self, z: &DVector<f64>, y: &DVector<f64>, ls: &DVector<f64>, us: &DVector<f64>) -> Vec<(usize, Side)> {
        let mut active = Vec::new();
        for i in 0..self.m {
            if ls[i] > -INFINITY_BOUND && z[i] - ls[i] < -y[i] {
                active.push((i, Side::Lower));
            } else if us[i] < INFINITY_BOUND && us[i] - z[i] < y[i] {
                active.push((i, Side::Upper));
            }
        }
        active
    }

    /// Unscaled Farkas direction from the last dual step, if it certifies
    /// primal infeasibility.
    fn infeasibility_certificate(
        &self,
        y: &DVector<f64>,
        y_prev: &DVector<f64>,
        l: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Option<DVector<f64>> {
        if self.m == 0 {
            return None;
        }
        let mut v = DVector::zeros(self.m);
        for i in 0..self.m {
            let mut vi = self.e[i] * (y[i] - y_prev[i]) / self.c;
            if u[i] >= INFINITY_BOUND {
                vi = vi.min(0.0);
            }
            if l[i] <= -INFINITY_BOUND {
                vi = vi.max(0.0);
            }
            v[i] = vi;
        }
        let norm = inf_norm(&v);
        if norm < 1e-30 {
            return None;
        }
        v /= norm;
        if self.certifies(&v, l, u) {
            Some(v)
        } else {
            None
        }
    }

    fn certifies(&self, v: &DVector<f64>, l: &DVector<f64>, u: &DVector<f64>) -> bool {
        let eps = self.settings.eps_prim_inf;
        let norm = inf_norm(v);
        if norm == 0.0 {
            return false;
        }
        let mut support = 0.0;
        for i in 0..self.m {
            if v[i] > 0.0 {
                if u[i] >= INFINITY_BOUND {
                    return false;
                }
                support += u[i] * v[i];
            } else if v[i] < 0.0 {
                if l[i] <= -INFINITY_BOUND {
                    return false;
                }
                support += l[i] * v[i];
            }
        }
        if support >= -eps * norm {
            return false;
        }
        // Aᵀv = D⁻¹ Āᵀ E⁻¹ v
        let ev = v.component_div(&self.e);
        let atv = self.a.tr_mul(&ev).component_div(&self.d);
        inf_norm(&atv) < eps * norm
    }

    fn ensure_polish_factor(&mut self) -> bool {
        if self.polish_chol.is_some() {
            return true;
        }
        let mut h = self.p.clone();
        for i in 0..self.n {
            h[(i, i)] += self.settings.polish_delta;
        }
        match Cholesky::new(h) {
            Some(ch) => {
                self.polish_l = Some(ch.l());
                self.polish_chol = Some(ch);
                true
            }
            None => false,
        }
    }

    /// Solves the equality-constrained problem on the guessed active set and
    /// accepts the result only if it satisfies the KKT conditions at the
    /// termination tolerances.
    ///
    /// A rejected guess is corrected a few times by dropping rows whose
    /// multiplier has the wrong sign and adding violated rows.
    fn polish(
        &mut self,
        active: &[(usize, Side)],
        qs: &DVector<f64>,
        ls: &DVector<f64>,
        us: &DVector<f64>,
        iterations: usize,
    ) -> Option<BlockOutcome> {
        if !self.ensure_polish_factor() {
            return None;
        }
        let mut active = active.to_vec();
        for _ in 0..POLISH_ROUNDS {
            match self.polish_once(&active, qs, ls, us, iterations)? {
                Ok(out) => return Some(out),
                Err(next) => {
                    if next == active {
                        return None;
                    }
                    active = next;
                }
            }
        }
        None
    }

    /// `Ok` if the candidate is accepted, otherwise the corrected active set.
    fn polish_once(
        &mut self,
        active: &[(usize, Side)],
        qs: &DVector<f64>,
        ls: &DVector<f64>,
        us: &DVector<f64>,
        iterations: usize,
    ) -> Option<Result<BlockOutcome, Vec<(usize, Side)>>> {
        let (n, m) = (self.n, self.m);
        let delta = self.settings.polish_delta;
        let k = active.len();
        let mut aa = DMatrix::zeros(k, n);
        let mut b = DVector::zeros(k);
        for (r, &(i, side)) in active.iter().enumerate() {
            let bound = match side {
                Side::Lower => ls[i],
                Side::Upper => us[i],
            };
            if !bound.is_finite() {
                return None;
            }
            aa.row_mut(r).copy_from(&self.a.row(i));
            b[r] = bound;
        }
        let chol = self.polish_chol.as_ref()?;
        let schur = if k > 0 {
            let lmat = self.polish_l.as_ref()?;
            let w = lmat.solve_lower_triangular(&aa.transpose())?;
            let mut s = w.tr_mul(&w);
            for r in 0..k {
                s[(r, r)] += delta;
            }
            Some(Cholesky::new(s)?)
        } else {
            None
        };

        let solve_reg = |r1: &DVector<f64>, r2: &DVector<f64>| -> (DVector<f64>, DVector<f64>) {
            let t = chol.solve(r1);
            match &schur {
                Some(s) => {
                    let rhs = &aa * &t - r2;
                    let ya = s.solve(&rhs);
                    let x = &t - chol.solve(&aa.tr_mul(&ya));
                    (x, ya)
                }
                None => (t, DVector::zeros(0)),
            }
        };

        let neg_q = -qs;
        let (mut x, mut ya) = solve_reg(&neg_q, &b);
        for _ in 0..self.settings.polish_refine_iter {
            let r1 = &neg_q - &self.p * &x - aa.tr_mul(&ya);
            let r2 = &b - &aa * &x;
            let (dx, dy) = solve_reg(&r1, &r2);
            x += dx;
            ya += dy;
        }

        let mut y = DVector::zeros(m);
        for (r, &(i, _)) in active.iter().enumerate() {
            y[i] = ya[r];
        }
        let z_raw = &self.a * &x;
        let mut z = z_raw.clone();
        let mut prim_violation: f64 = 0.0;
        let mut comp: f64 = 0.0;
        let cinv = 1.0 / self.c;
        for i in 0..m {
            let ei = 1.0 / self.e[i];
            prim_violation = prim_violation
                .max((ls[i] - z_raw[i]) * ei)
                .max((z_raw[i] - us[i]) * ei);
            z[i] = z_raw[i].clamp(ls[i], us[i]);
            let yu = y[i] * self.e[i] * cinv;
            comp = comp.max(bound_complementarity(z_raw[i] * ei, yu, ls[i] * ei, us[i] * ei));
        }
        let res = self.residuals(&x, &z_raw, &y, qs);
        let prim = prim_violation.max(0.0);
        if !(prim <= res.eps_prim && res.dual <= res.eps_dual && comp <= res.eps_dual) {
            let mut next: Vec<(usize, Side)> = Vec::new();
            let mut is_active = vec![false; m];
            for &(i, side) in active {
                is_active[i] = true;
                let wrong = match side {
                    Side::Lower => y[i] > 0.0,
                    Side::Upper => y[i] < 0.0,
                };
                if !wrong {
                    next.push((i, side));
                }
            }
            for i in 0..m {
                if is_active[i] {
                    continue;
                }
                let ei = 1.0 / self.e[i];
                if (ls[i] - z_raw[i]) * ei > res.eps_prim {
                    next.push((i, Side::Lower));
                } else if (z_raw[i] - us[i]) * ei > res.eps_prim {
                    next.push((i, Side::Upper));
                }
            }
            next.sort_by_key(|&(i, _)| i);
            return Some(Err(next));
        }
        let res = Residuals { prim, ..res };
        let out = self.unscaled_outcome(QpStatus::Solved, &x, &y, iterations, true, &res);
        self.warm = Some(Warm {
            x,
            z,
            y,
            active: active.to_vec(),
        });
        Some(Ok(out))
    }
}

fn factor_kkt(p: &DMatrix<f64>, a: &DMatrix<f64>, rho_vec: &DVector<f64>, sigma: f64) -> Cholesky<f64, Dyn> {
    let n = p.nrows();
    let mut scaled = a.clone();
    for i in 0..a.nrows() {
        let s = rho_vec[i].sqrt();
        scaled.row_mut(i).scale_mut(s);
    }
    let mut k = scaled.tr_mul(&scaled);
    k += p;
    let mut shift = sigma;
    loop {
        let mut kk = k.clone();
        for i in 0..n {
            kk[(i, i)] += shift;
        }
        if let Some(ch) = Cholesky::new(kk) {
            return ch;
        }
        // Only reachable when P carries round-off negative curvature.
        shift *= 10.0;
    }
}
