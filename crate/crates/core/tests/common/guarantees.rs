//! Closed-loop guarantees checked on recorded traces.

use fallsafe_core::embedding::HazardClass;
use fallsafe_core::mpc::{MpcConfig, Planner};
use fallsafe_core::sim::{Mode, Trace};
use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-5;

fn v(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}

/// Ticks whose state or input leaves `X` or `U`, plus the final state.
pub fn constraint_violations(trace: &Trace, mpc: &MpcConfig) -> usize {
    let mut bad = 0;
    for r in &trace.records {
        if !mpc.state_set.contains(&v(&r.x), TOL).unwrap() || !mpc.input_set.contains(&v(&r.u), TOL).unwrap() {
            bad += 1;
        }
    }
    if !mpc.state_set.contains(&v(&trace.final_state), TOL).unwrap() {
        bad += 1;
    }
    bad
}

/// States at `t ≥ t_anom + T + 1` outside the chosen region, for
/// consequential traces. A consequential trace without an anomaly tick or a
/// recovery decision counts as one failure.
pub fn membership_failures(trace: &Trace, mpc: &MpcConfig) -> usize {
    if !matches!(trace.scenario.hazard, HazardClass::Consequential { .. }) {
        return 0;
    }
    let (Some(t_anom), Some(y)) = (trace.t_anom, trace.decision) else {
        return 1;
    };
    if y == 0 {
        return 1;
    }
    let region = &mpc.recovery[y - 1].set;
    let from = t_anom + mpc.horizon as u64 + 1;
    let mut states: Vec<(u64, &[f64])> = trace.records.iter().map(|r| (r.t, r.x.as_slice())).collect();
    let end = trace.records.last().map_or(0, |r| r.t + 1);
    states.push((end, &trace.final_state));
    if end < from {
        // the episode must last long enough for the claim to mean anything
        return 1;
    }
    states
        .iter()
        .filter(|(t, x)| *t >= from && !region.contains(&v(x), TOL).unwrap())
        .count()
}

/// Sampled ticks at which no singleton recovery set is feasible.
pub fn singleton_failures(trace: &Trace, planner: &mut Planner, rng: &mut ChaCha8Rng, fraction: f64) -> (usize, usize) {
    let d = planner.config().num_regions();
    let t = planner.config().horizon;
    let (mut checked, mut failed) = (0, 0);
    for r in &trace.records {
        if !rng.gen_bool(fraction) {
            continue;
        }
        checked += 1;
        let x = v(&r.x);
        let ok = (1..=d).any(|i| planner.solve(&x, &[i], 0, t).unwrap().is_some());
        if !ok {
            failed += 1;
        }
    }
    (checked, failed)
}

/// Awaiting ticks whose applied input differs from the first input of the
/// replayed frozen-set plan, or whose replayed branches disagree on the
/// shared prefix.
pub fn awaiting_consensus_failures(trace: &Trace, planner: &mut Planner) -> (usize, usize) {
    let (mut checked, mut failed) = (0, 0);
    for r in trace.records.iter().filter(|r| r.mode == Mode::Awaiting) {
        let (Some(k), Some(t)) = (r.k_rem, r.t_rem) else {
            failed += 1;
            continue;
        };
        checked += 1;
        let Some(plan) = planner.solve(&v(&r.x), &r.y_set, k, t).unwrap() else {
            failed += 1;
            continue;
        };
        let u = v(&r.u);
        let first_ok = plan.first_input() == Some(&u) && plan.branches.values().all(|b| b.inputs[0] == u);
        if !first_ok || plan.consensus_gap() != 0.0 {
            failed += 1;
        }
    }
    (checked, failed)
}
