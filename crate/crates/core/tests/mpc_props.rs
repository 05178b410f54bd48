use fallsafe_core::config::Config;
use fallsafe_core::dynamics::{LinearDynamics, Polytope, RecoveryRegion};
use fallsafe_core::mpc::{nominal_cost, solve_contingency, verify_plan, MpcConfig};
use fallsafe_core::qp::{solve_qp, QpMethod, QpProblem, QpStatus, SolverSettings};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BRANCH_REG: f64 = 1e-8;

fn line_config(regions: &[(f64, f64)], horizon: usize, consensus: usize) -> MpcConfig {
    MpcConfig {
        dynamics: LinearDynamics::double_integrator(0.1, 1).unwrap(),
        state_set: Polytope::from_box(&[-10.0, -2.0], &[10.0, 2.0]).unwrap(),
        input_set: Polytope::from_box(&[-1.0], &[1.0]).unwrap(),
        recovery: regions
            .iter()
            .enumerate()
            .map(|(i, &(lo, hi))| RecoveryRegion {
                id: i + 1,
                set: Polytope::from_box(&[lo, -0.05], &[hi, 0.05]).unwrap(),
                label: format!("r{}", i + 1),
            })
            .collect(),
        horizon,
        consensus,
        q: DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.1])),
        r: DMatrix::identity(1, 1) * 0.01,
        goal: DVector::from_vec(vec![3.0, 0.0]),
        min_combo: 2,
        slack_weight: 1e4,
        solver: SolverSettings::default(),
    }
}

fn set_rows(rows: &mut Vec<(DVector<f64>, f64, f64)>, nv: usize, poly: &Polytope, at: usize, dim: usize) {
    for i in 0..poly.num_rows() {
        let mut r = DVector::zeros(nv);
        for c in 0..dim {
            r[at + c] = poly.h()[(i, c)];
        }
        rows.push((r, f64::NEG_INFINITY, poly.offsets()[i]));
    }
}

/// Uncondensed encoding: every trajectory carries its own states and inputs,
/// dynamics are equality rows and consensus is explicit equality between
/// input copies. Returns the nominal cost and first input, or `None` when
/// infeasible.
fn uncondensed(cfg: &MpcConfig, x0: &DVector<f64>, y: &[usize], k: usize, t: usize) -> Option<(f64, DVector<f64>)> {
    let (a, b) = (cfg.dynamics.a(), cfg.dynamics.b());
    let (n, m) = (a.nrows(), b.ncols());
    let trajs = 1 + y.len();
    let per = t * (n + m);
    let nv = trajs * per;
    let u_at = |j: usize, s: usize| j * per + s * m;
    let x_at = |j: usize, s: usize| j * per + t * m + (s - 1) * n;

    let mut p = DMatrix::zeros(nv, nv);
    let mut q = DVector::zeros(nv);
    for s in 0..t {
        for i in 0..m {
            for jj in 0..m {
                p[(u_at(0, s) + i, u_at(0, s) + jj)] += cfg.r[(i, jj)];
            }
        }
        for i in 0..n {
            for jj in 0..n {
                p[(x_at(0, s + 1) + i, x_at(0, s + 1) + jj)] += cfg.q[(i, jj)];
            }
        }
        let qg = &cfg.q * &cfg.goal;
        for i in 0..n {
            q[x_at(0, s + 1) + i] -= qg[i];
        }
    }
    // branch variables carry no cost; a tiny weight keeps P definite
    for j in 1..trajs {
        for i in j * per..(j + 1) * per {
            p[(i, i)] += BRANCH_REG;
        }
    }

    let mut rows: Vec<(DVector<f64>, f64, f64)> = Vec::new();
    for j in 0..trajs {
        for s in 0..t {
            // x_{s+1} − A x_s − B u_s = (A x0 if s = 0)
            for i in 0..n {
                let mut r = DVector::zeros(nv);
                r[x_at(j, s + 1) + i] = 1.0;
                for c in 0..m {
                    r[u_at(j, s) + c] = -b[(i, c)];
                }
                let rhs = if s == 0 {
                    (a * x0)[i]
                } else {
                    for c in 0..n {
                        r[x_at(j, s) + c] -= a[(i, c)];
                    }
                    0.0
                };
                rows.push((r, rhs, rhs));
            }
            set_rows(&mut rows, nv, &cfg.state_set, x_at(j, s + 1), n);
            set_rows(&mut rows, nv, &cfg.input_set, u_at(j, s), m);
        }
        if j > 0 {
            let region = &cfg.recovery.iter().find(|r| r.id == y[j - 1]).unwrap().set;
            set_rows(&mut rows, nv, region, x_at(j, t), n);
        }
    }
    for j in 1..trajs {
        for s in 0..k.max(1) {
            let other = if s == 0 { 0 } else { 1 };
            if other == j {
                continue;
            }
            for c in 0..m {
                let mut r = DVector::zeros(nv);
                r[u_at(j, s) + c] = 1.0;
                r[u_at(other, s) + c] = -1.0;
                rows.push((r, 0.0, 0.0));
            }
        }
    }
    let a_mat = DMatrix::from_fn(rows.len(), nv, |i, c| rows[i].0[c]);
    let l = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
    let u = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.2));
    let settings = SolverSettings { method: QpMethod::ActiveSet, ..Default::default() };
    let res = solve_qp(&QpProblem { p, q, a: a_mat, l, u }, &settings).unwrap();
    match res.status {
        QpStatus::PrimalInfeasible => None,
        QpStatus::Solved => {
            let xs = &res.x;
            let mut cost = 0.0;
            for s in 0..t {
                let e = xs.rows(x_at(0, s + 1), n) - &cfg.goal;
                let us = xs.rows(u_at(0, s), m);
                cost += 0.5 * e.dot(&(&cfg.q * &e)) + 0.5 * us.dot(&(&cfg.r * us));
            }
            Some((cost, xs.rows(u_at(0, 0), m).into_owned()))
        }
        other => panic!("oracle did not converge: {other:?}"),
    }
}

fn random_line_instance(rng: &mut ChaCha8Rng) -> (MpcConfig, DVector<f64>, Vec<usize>, usize, usize) {
    let x0 = DVector::from_vec(vec![rng.gen_range(-3.0..3.0), rng.gen_range(-0.5..0.5)]);
    let nreg = rng.gen_range(1..=3);
    let regions: Vec<(f64, f64)> = (0..nreg)
        .map(|_| {
            let c = x0[0] + rng.gen_range(-2.0..2.0);
            let w = rng.gen_range(0.2..1.0);
            (c - w, c + w)
        })
        .collect();
    let t = rng.gen_range(3..=25);
    let k = rng.gen_range(0..t);
    let cfg = line_config(&regions, t, k);
    let size = rng.gen_range(1..=nreg);
    let mut y: Vec<usize> = (1..=nreg).collect();
    while y.len() > size {
        y.remove(rng.gen_range(0..y.len()));
    }
    (cfg, x0, y, k, t)
}

#[test]
fn condensed_matches_uncondensed_encoding() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0de);
    let (mut feasible, mut infeasible) = (0, 0);
    for case in 0..120 {
        let (cfg, x0, y, k, t) = random_line_instance(&mut rng);
        let plan = solve_contingency(&cfg, &x0, &y, k, t).unwrap();
        let oracle = uncondensed(&cfg, &x0, &y, k, t);
        match (plan, oracle) {
            (Some(plan), Some((cost, u0))) => {
                feasible += 1;
                let c = nominal_cost(&cfg, &plan.nominal);
                assert!((c - cost).abs() <= 1e-5 * cost.abs().max(1.0), "case {case}: cost {c} vs {cost}");
                let du = (plan.first_input().unwrap() - &u0).amax();
                assert!(du <= 1e-3, "case {case}: first input differs by {du}");
            }
            (None, None) => infeasible += 1,
            (p, o) => panic!("case {case}: condensed {:?} vs oracle {:?}", p.is_some(), o.is_some()),
        }
    }
    assert!(feasible >= 20 && infeasible >= 5, "{feasible} feasible, {infeasible} infeasible");
}

fn shipped() -> MpcConfig {
    Config::shipped().mpc_config().unwrap()
}

fn flight_state() -> impl Strategy<Value = DVector<f64>> {
    (1.0f64..11.0, -1.5f64..1.5, 0.0f64..4.0, -1.0f64..1.0, 0.5f64..3.0, -1.0f64..1.0)
        .prop_map(|(px, vx, py, vy, pz, vz)| DVector::from_vec(vec![px, vx, py, vy, pz, vz]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn plans_share_their_prefix_exactly(
        x in flight_state(),
        mask in 1u8..16,
        t in 20usize..=40,
        k_frac in 0.0f64..1.0,
    ) {
        let cfg = shipped();
        let y: Vec<usize> = (1..=4).filter(|i| mask & (1 << (i - 1)) != 0).collect();
        let k = ((t as f64 * k_frac) as usize).min(t - 1).min(cfg.consensus);
        if let Some(plan) = solve_contingency(&cfg, &x, &y, k, t).unwrap() {
            let u0 = plan.first_input().unwrap();
            for b in plan.branches.values() {
                prop_assert_eq!(&b.inputs[0], u0);
            }
            let branches: Vec<_> = plan.branches.values().collect();
            for s in 0..k {
                for w in branches.windows(2) {
                    prop_assert_eq!(&w[0].inputs[s], &w[1].inputs[s]);
                }
            }
            prop_assert_eq!(plan.consensus_gap(), 0.0);
            prop_assert!(verify_plan(&cfg, &plan, 1e-5).unwrap());
            for (&id, b) in &plan.branches {
                let region = &cfg.recovery[id - 1].set;
                prop_assert!(region.contains(b.states.last().unwrap(), 1e-5).unwrap());
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, max_global_rejects: 4096, ..ProptestConfig::default() })]

    #[test]
    fn one_step_preserves_feasibility(
        x in flight_state(),
        mask in 1u8..16,
        t in 2usize..=40,
        k_frac in 0.0f64..1.0,
    ) {
        let cfg = shipped();
        let y: Vec<usize> = (1..=4).filter(|i| mask & (1 << (i - 1)) != 0).collect();
        let k = 1 + ((t as f64 * k_frac) as usize).min(t - 2).min(cfg.consensus - 1);
        let plan = solve_contingency(&cfg, &x, &y, k, t).unwrap();
        prop_assume!(plan.is_some());
        let next = cfg.dynamics.step(&x, plan.unwrap().first_input().unwrap()).unwrap();
        prop_assert!(solve_contingency(&cfg, &next, &y, k - 1, t - 1).unwrap().is_some());
    }
}
