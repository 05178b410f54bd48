mod common;

use common::{active_set_oracle, random_infeasible_qp, random_strictly_convex_qp};
use fallsafe_core::qp::{check_kkt, solve_qp, QpMethod, QpStatus, SolverSettings};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn active_set() -> SolverSettings {
    SolverSettings {
        method: QpMethod::ActiveSet,
        ..SolverSettings::default()
    }
}

#[test]
fn random_qps_match_active_set_enumeration() {
    match_enumeration(SolverSettings::default());
}

#[test]
fn dual_active_set_matches_enumeration() {
    match_enumeration(active_set());
}

fn match_enumeration(settings: SolverSettings) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x51ab);
    let mut worst_x: f64 = 0.0;
    let mut worst_f: f64 = 0.0;
    for case in 0..500 {
        let prob = random_strictly_convex_qp(&mut rng);
        let (x_ref, f_ref) = active_set_oracle(&prob).expect("oracle finds the optimum");
        let res = solve_qp(&prob, &settings).unwrap();
        assert_eq!(res.status, QpStatus::Solved, "case {case}");
        let dx = (&res.x - &x_ref).amax();
        let df = (res.objective - f_ref).abs();
        worst_x = worst_x.max(dx);
        worst_f = worst_f.max(df);
        assert!(dx <= 1e-5, "case {case}: x error {dx:e}");
        assert!(df <= 1e-7, "case {case}: objective error {df:e}");
        assert!(check_kkt(&prob, &res.x, &res.y, 1e-6).unwrap(), "case {case}");
    }
    println!("worst x error {worst_x:e}, worst objective error {worst_f:e}");
}

#[test]
fn disjoint_constraints_report_infeasible() {
    report_infeasible(SolverSettings::default());
}

#[test]
fn dual_active_set_reports_infeasible() {
    report_infeasible(active_set());
}

fn report_infeasible(settings: SolverSettings) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xdead);
    for case in 0..50 {
        let prob = random_infeasible_qp(&mut rng);
        let res = solve_qp(&prob, &settings).unwrap();
        assert_eq!(res.status, QpStatus::PrimalInfeasible, "case {case} after {} iterations", res.iterations);
        let v = res.certificate.unwrap();
        let atv = prob.a.tr_mul(&v);
        assert!(atv.amax() <= 1e-8 * v.amax(), "case {case}");
    }
}
