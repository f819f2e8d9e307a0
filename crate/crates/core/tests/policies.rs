use delayed_rl::delay::AugmentedState;
use delayed_rl::envs::{make_env, EnvName, State};
use delayed_rl::mdp::{build_amdp, value_iteration, AugmentedCodec, TabularMdp};
use delayed_rl::policies::{
    amdp_select, delayed_q_select, exact_expected_q_select, exact_risk_stats, risk_stats, smbs_select, SmbsConfig,
};
use delayed_rl::qlearn::{ExactAugmentedQ, QError, QFunction};
use delayed_rl::Solution;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Q-values looked up from an explicit table.
struct TableQ {
    values: Vec<Vec<f64>>,
}

impl QFunction for TableQ {
    fn num_actions(&self) -> usize {
        self.values[0].len()
    }

    fn q_values(&self, s: &State) -> Result<Vec<f64>, QError> {
        Ok(self.values[s.index().ok_or(QError::Encoding)?].clone())
    }
}

fn random_mdp(rng: &mut ChaCha8Rng, ns: usize, na: usize) -> TabularMdp<f64> {
    let mut mdp = TabularMdp::new(ns, na, 0.9);
    for s in 0..ns {
        for a in 0..na {
            let w: Vec<f64> = (0..ns).map(|_| if rng.random_bool(0.5) { rng.random::<f64>() } else { 0.0 }).collect();
            let total: f64 = w.iter().sum();
            let row = if total == 0.0 { vec![(s, 1.0)] } else { w.iter().enumerate().filter(|(_, &x)| x > 0.0).map(|(n, x)| (n, x / total)).collect() };
            mdp.set_row(s, a, row);
        }
    }
    mdp
}

fn lake(r: f64) -> TabularMdp<f64> {
    make_env(EnvName::FrozenLake4, r).unwrap().as_tabular().unwrap()
}

#[test]
fn sampled_scores_match_brute_force_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for _ in 0..1000 {
        let (ns, na) = (rng.random_range(2..8), rng.random_range(2..5));
        let mdp = random_mdp(&mut rng, ns, na);
        let q = TableQ { values: (0..ns).map(|_| (0..na).map(|_| rng.random_range(-10.0..10.0)).collect()).collect() };
        let queue: Vec<usize> = (0..rng.random_range(0..4)).map(|_| rng.random_range(0..na)).collect();
        let i = AugmentedState::new(State::Discrete(rng.random_range(0..ns)), queue);
        let config = SmbsConfig { samples: rng.random_range(1..30), alpha: rng.random_range(0.0..2.0), tie_tol: 0.0, keep_targets: true };
        let (action, trace) = smbs_select(&q, &mdp, &i, &config, &mut rng).unwrap();
        let targets = trace.targets.as_ref().unwrap();
        let m = targets.len() as f64;
        let mut scores = Vec::new();
        for a in 0..na {
            let xs: Vec<f64> = targets.iter().map(|s| q.values[s.index().unwrap()][a]).collect();
            let mean = xs.iter().sum::<f64>() / m;
            let std = if xs.len() < 2 { 0.0 } else { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt() };
            assert!((trace.stats.mean[a] - mean).abs() <= 1e-12);
            assert!((trace.stats.std[a] - std).abs() <= 1e-12);
            scores.push(mean - config.alpha * std);
        }
        let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(action, scores.iter().position(|&s| s == best).unwrap());
        assert!(trace.is_consistent(0.0));
    }
}

#[test]
fn sampled_planning_converges_to_exact_expectation() {
    let mdp = lake(0.1);
    let sol = value_iteration(&mdp, 1e-10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (mut agree, mut in_band, mut pairs) = (0, 0, 0);
    let states = 200;
    for _ in 0..states {
        let i = AugmentedState::new(State::Discrete(rng.random_range(0..16)), vec![rng.random_range(0..4), rng.random_range(0..4)]);
        let config = SmbsConfig { samples: 10_000, alpha: 0.0, ..Default::default() };
        let (sampled, trace) = smbs_select(&sol, &mdp, &i, &config, &mut rng).unwrap();
        let (exact, exact_trace) = exact_expected_q_select(&sol, &mdp, &i, 0.0, 1e-9).unwrap();
        agree += (sampled == exact) as usize;
        for a in 0..4 {
            pairs += 1;
            let band = 3.0 * exact_trace.stats.std[a] / 100.0;
            in_band += ((trace.stats.mean[a] - exact_trace.stats.mean[a]).abs() <= band + 1e-12) as usize;
        }
    }
    assert!(agree as f64 >= 0.99 * states as f64, "agreement {agree}/{states}");
    assert!(in_band as f64 >= 0.99 * pairs as f64, "in band {in_band}/{pairs}");
}

#[test]
fn most_likely_state_can_disagree_with_expectation() {
    let mdp = lake(0.15);
    let sol = value_iteration(&mdp, 1e-10).unwrap();
    let mut found = None;
    'search: for s in 0..16 {
        for a1 in 0..4 {
            for a2 in 0..4 {
                let i = AugmentedState::new(State::Discrete(s), vec![a1, a2]);
                let (mode_action, _) = delayed_q_select(&sol, &mdp, &i, 1e-9).unwrap();
                let (exact_action, _) = exact_expected_q_select(&sol, &mdp, &i, 0.0, 1e-9).unwrap();
                if mode_action != exact_action {
                    found = Some(i);
                    break 'search;
                }
            }
        }
    }
    let i = found.expect("some augmented state separates the two rules");
    // The exact rule is optimal for the expectation, so it scores at least as well.
    let stats = exact_risk_stats(&sol, &mdp, &i).unwrap();
    let (mode_action, _) = delayed_q_select(&sol, &mdp, &i, 1e-9).unwrap();
    let (exact_action, _) = exact_expected_q_select(&sol, &mdp, &i, 0.0, 1e-9).unwrap();
    assert!(stats.mean[exact_action] > stats.mean[mode_action]);
}

#[test]
fn deterministic_mdp_collapses_all_planning_rules() {
    let mdp = lake(0.0);
    let sol = value_iteration(&mdp, 1e-10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for s in 0..16 {
        for q in 0..16 {
            let i = AugmentedState::new(State::Discrete(s), vec![q / 4, q % 4]);
            let stats = exact_risk_stats(&sol, &mdp, &i).unwrap();
            assert!(stats.std.iter().all(|&x| x == 0.0));
            let mode = delayed_q_select(&sol, &mdp, &i, 1e-9).unwrap().0;
            assert_eq!(exact_expected_q_select(&sol, &mdp, &i, 0.7, 1e-9).unwrap().0, mode);
            let config = SmbsConfig { samples: 3, alpha: 0.3, ..Default::default() };
            assert_eq!(smbs_select(&sol, &mdp, &i, &config, &mut rng).unwrap().0, mode);
        }
    }
}

#[test]
fn augmented_greedy_on_a_hand_solved_chain() {
    // Action 0 stays, action 1 advances (state 2 absorbs); reward 1 for
    // advancing out of state 1. With γ = 0.9: q*(0) = (0.81, 0.9),
    // q*(1) = (0.9, 1), q*(2) = (0, 0). With one queued action the choice
    // acts on the successor of (s, queued): (0,0)→0, (0,1)→1, (1,0)→1,
    // (1,1)→2, (2,·)→2, so the optimal actions are 1, 1, 1, 0, 0, 0.
    let mut mdp = TabularMdp::new(3, 2, 0.9);
    for s in 0..3 {
        mdp.set_row(s, 0, vec![(s, 1.0)]);
        mdp.set_row(s, 1, vec![((s + 1).min(2), 1.0)]);
    }
    mdp.set_reward(1, 1, 1.0);
    let codec = AugmentedCodec::new(3, 2, 1, 100).unwrap();
    let q_aug = ExactAugmentedQ { solution: value_iteration(&build_amdp(&mdp, 1).unwrap(), 1e-12).unwrap(), codec };
    let chosen: Vec<usize> = (0..6)
        .map(|idx| {
            let (s, queue) = codec.decode(idx);
            amdp_select(&q_aug, &AugmentedState::new(State::Discrete(s), queue), 1e-9).unwrap().0
        })
        .collect();
    assert_eq!(chosen, vec![1, 1, 1, 0, 0, 0]);
    let base: Solution = value_iteration(&mdp, 1e-12).unwrap();
    let none = ExactAugmentedQ { solution: base.clone(), codec: AugmentedCodec::new(3, 2, 0, 100).unwrap() };
    assert_eq!(amdp_select(&none, &AugmentedState::new(State::Discrete(1), vec![]), 0.0).unwrap().0, 1);
}

#[test]
fn score_gap_bounded_by_affected_fraction() {
    let mdp = lake(0.15);
    let sol = value_iteration(&mdp, 1e-10).unwrap();
    let base = TableQ { values: (0..16).map(|s| sol.q_row(s).to_vec()).collect() };
    let mut perturbed = TableQ { values: base.values.clone() };
    let affected = [2usize, 6];
    for &s in &affected {
        for v in &mut perturbed.values[s] {
            *v += 0.5;
        }
    }
    let i = AugmentedState::new(State::Discrete(1), vec![2, 1]);
    let config = SmbsConfig { samples: 200, alpha: 0.0, tie_tol: 0.0, keep_targets: true };
    let (_, a) = smbs_select(&base, &mdp, &i, &config, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let (_, b) = smbs_select(&perturbed, &mdp, &i, &config, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let targets = a.targets.unwrap();
    let fraction = targets.iter().filter(|s| affected.contains(&s.index().unwrap())).count() as f64 / targets.len() as f64;
    for act in 0..4 {
        assert!((a.stats.mean[act] - b.stats.mean[act]).abs() <= fraction * 0.5 + 1e-12);
    }
}

proptest! {
    #[test]
    fn constant_shift_preserves_choice(
        samples in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 5), 1..20),
        shift in -100.0f64..100.0,
        alpha in 0.0f64..3.0,
    ) {
        let per_action: Vec<Vec<f64>> = (0..5).map(|a| samples.iter().map(|row| row[a]).collect()).collect();
        let shifted: Vec<Vec<f64>> = per_action.iter().map(|v| v.iter().map(|x| x + shift).collect()).collect();
        let x = risk_stats(&per_action).unwrap();
        let y = risk_stats(&shifted).unwrap();
        for a in 0..5 {
            prop_assert!((y.mean[a] - x.mean[a] - shift).abs() < 1e-9);
            prop_assert!((y.std[a] - x.std[a]).abs() < 1e-9);
            prop_assert!(x.std[a] >= 0.0);
        }
        let pick = |s: &delayed_rl::policies::RiskStats| delayed_rl::scalar::argmax_lowest(&s.scores(alpha), 1e-7).unwrap();
        prop_assert_eq!(pick(&x), pick(&y));
    }
}
