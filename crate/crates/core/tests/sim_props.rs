mod common;

use common::guarantees;
use fallsafe_core::config::Config;
use fallsafe_core::mpc::Planner;
use fallsafe_core::sim::{generate_scenarios, named_scenario, Method, Outcome, Simulator};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn aesop_traces_keep_the_guarantees() {
    let cfg = Config::shipped();
    let mpc = cfg.mpc_config().unwrap();
    let scenarios = generate_scenarios(24, &cfg, 77).unwrap();
    let mut sim = Simulator::new(cfg).unwrap();
    let mut planner = Planner::new(mpc.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut awaiting = 0;
    for s in &scenarios {
        let trace = sim.run_mock(Method::Aesop, s).unwrap().trace;
        assert_eq!(guarantees::constraint_violations(&trace, &mpc), 0, "seed {}", s.seed);
        assert_eq!(guarantees::membership_failures(&trace, &mpc), 0, "seed {}", s.seed);
        let (_, failed) = guarantees::singleton_failures(&trace, &mut planner, &mut rng, 0.1);
        assert_eq!(failed, 0, "seed {}", s.seed);
        let (checked, failed) = guarantees::awaiting_consensus_failures(&trace, &mut planner);
        assert_eq!(failed, 0, "seed {}", s.seed);
        awaiting += checked;
        assert!(matches!(trace.outcome, Outcome::Recovered { region } if Some(region) == trace.decision));
    }
    assert!(awaiting > 0);
}

#[test]
fn runs_are_bitwise_reproducible() {
    let cfg = Config::shipped();
    let scenarios = generate_scenarios(3, &cfg, 9).unwrap();
    for method in Method::ALL {
        let mut a = Simulator::new(cfg.clone()).unwrap();
        let mut b = Simulator::new(cfg.clone()).unwrap();
        for s in &scenarios {
            let first = a.run_mock(method, s).unwrap().trace;
            // a warm simulator gives the same trace as a fresh one
            let again = a.run_mock(method, s).unwrap().trace;
            let fresh = b.run_mock(method, s).unwrap().trace;
            assert_eq!(first, again, "{method}");
            assert_eq!(first, fresh, "{method}");
        }
    }
}

#[test]
fn naive_misses_the_west_field() {
    let cfg = Config::shipped();
    let s = named_scenario(&cfg, "fire ahead, land west", 1).unwrap();
    let mut sim = Simulator::new(cfg).unwrap();
    let aesop = sim.run_mock(Method::Aesop, &s).unwrap().trace;
    assert_eq!(aesop.outcome, Outcome::Recovered { region: 1 });
    let naive = sim.run_mock(Method::Naive, &s).unwrap().trace;
    assert_eq!(naive.outcome, Outcome::Violated);
}
