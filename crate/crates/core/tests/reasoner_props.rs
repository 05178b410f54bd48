use std::collections::BTreeMap;

use fallsafe_core::embedding::{HazardClass, Observation};
use fallsafe_core::reasoner::{
    parse_decision, render_template, LatencyDist, MockConfig, MockReasoner, ReasonerPoll, SlowReasoner,
};
use proptest::prelude::*;

fn options() -> impl Strategy<Value = (usize, Vec<usize>)> {
    (1usize..10).prop_flat_map(|d| (Just(d), prop::sample::subsequence((1..=d).collect::<Vec<_>>(), 1..=d)))
}

proptest! {
    #[test]
    fn template_round_trips((d, opts) in options(), pick in any::<prop::sample::Index>(), prefix in "[ -~]{0,40}") {
        let mut choices = vec![0];
        choices.extend(&opts);
        let y = *pick.get(&choices);
        let text = format!("{prefix}\n{}", render_template(y));
        prop_assert_eq!(parse_decision(&text, &opts, d).unwrap(), y);
    }

    #[test]
    fn mock_decides_within_k_max(
        (d, opts) in options(),
        min in 0u64..10,
        spread in 0u64..10,
        k_max in 0u64..15,
        seed in any::<u64>(),
        start in 0u64..100,
    ) {
        let cfg = MockConfig {
            script: BTreeMap::new(),
            latency: LatencyDist::Uniform { min, max: min + spread },
            k_max,
        };
        let mut r = MockReasoner::new(cfg, d, seed).unwrap();
        let target = opts[0];
        let obs = Observation::new(["smoke"], start).with_hazard(HazardClass::Consequential { target });
        let h = r.start(&obs, &opts, start).unwrap();
        let mut done = None;
        for t in start..=start + k_max {
            if let ReasonerPoll::Done(dec) = r.poll(&h, t).unwrap() {
                done = Some((t, dec));
                break;
            }
        }
        let (t, dec) = done.expect("decision within k_max ticks");
        prop_assert!(t - start <= k_max);
        prop_assert_eq!(dec.y, target);
        // later polls repeat the same decision
        for later in [t, t + 1, t + 50] {
            prop_assert_eq!(r.poll(&h, later).unwrap(), ReasonerPoll::Done(dec.clone()));
        }
    }
}
