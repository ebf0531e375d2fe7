use proptest::prelude::*;
use valuewalk::eval::ks_two_sample;
use valuewalk::mdp::{gridworld_by_size, value_iteration, Demonstration, RewardTable};
use valuewalk::sampler::adaptation_windows;
use valuewalk::valuewalk::{policy_from_q, ContinuationPolicy, FinitePosterior, FinitePosteriorSpec, ValueSpace};

fn greedy_posterior(space: ValueSpace) -> FinitePosterior {
    let world = gridworld_by_size(3).unwrap();
    let spec = FinitePosteriorSpec::new(world.mdp, Demonstration::new("gridworld3x3", 3.0, 0, Vec::new()))
        .with_policy(ContinuationPolicy::Greedy)
        .with_value_space(space);
    FinitePosterior::new(spec).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // Inverting with the greedy policy and planning forward again is the identity.
    #[test]
    fn greedy_inversion_round_trips_q(q in prop::collection::vec(-20.0f64..20.0, 36)) {
        let post = greedy_posterior(ValueSpace::StateAction);
        let r = post.reward(&q);
        let back = value_iteration(&post.spec().mdp, &RewardTable::new(r, 4), 1e-12);
        let expect = post.q_values(&q);
        for (a, b) in back.iter().zip(&expect) {
            prop_assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn greedy_inversion_round_trips_v(v in prop::collection::vec(-20.0f64..20.0, 9)) {
        let post = greedy_posterior(ValueSpace::StateOnly);
        let r = post.reward(&v);
        prop_assert_eq!(r.len(), 9);
        let q = value_iteration(&post.spec().mdp, &RewardTable::from_state_rewards(&r, 4), 1e-12);
        for (s, row) in q.chunks(4).enumerate() {
            let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!((best - v[s]).abs() < 1e-8, "state {s}: {best} vs {}", v[s]);
        }
    }

    #[test]
    fn soft_policy_rows_are_distributions(q in prop::collection::vec(-50.0f64..50.0, 12), alpha_bar in 0.1f64..200.0) {
        let pi = policy_from_q(&q, 4, alpha_bar);
        for row in pi.chunks(4) {
            prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ks_is_symmetric_and_bounded(
        x in prop::collection::vec(-5.0f64..5.0, 1..60),
        y in prop::collection::vec(-5.0f64..5.0, 1..60),
    ) {
        let a = ks_two_sample(&x, &y).unwrap();
        let b = ks_two_sample(&y, &x).unwrap();
        prop_assert_eq!(a.statistic, b.statistic);
        prop_assert!((0.0..=1.0).contains(&a.statistic));
        prop_assert!((0.0..=1.0).contains(&a.p_value));
        let same = ks_two_sample(&x, &x).unwrap();
        prop_assert_eq!(same.statistic, 0.0);
    }

    #[test]
    fn adaptation_windows_tile_the_slow_phase(n in 0usize..5000) {
        let w = adaptation_windows(n);
        for pair in w.windows(2) {
            prop_assert_eq!(pair[0].1, pair[1].0);
        }
        for &(a, b) in &w {
            prop_assert!(a < b && b <= n);
        }
        if let (Some(first), Some(last)) = (w.first(), w.last()) {
            // fast phases at both ends
            prop_assert!(first.0 > 0 && last.1 < n);
        }
    }
}
