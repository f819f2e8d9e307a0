//! Exact target-state distributions and mechanical checks of the two
//! guarantees behind sampled planning: equivalence with the optimal
//! augmented-state policy in deterministic MDPs, and the Chebyshev bound on
//! how far the sampled score can fall short of the conditional value.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::delay::AugmentedState;
use crate::envs::State;
use crate::mdp::{build_amdp_with, value_iteration, AmdpOptions, AugmentedCodec, MdpError, TabularMdp};
use crate::models::rollout_sample;
use crate::policies::{exact_risk_stats, smbs_select, PolicyError, SmbsConfig};
use crate::scalar::argmax_lowest;

#[derive(Debug, Error, PartialEq)]
pub enum TheoryError {
    #[error("augmented state is not a valid discrete state of this MDP")]
    InvalidState,
    #[error("MDP is not deterministic")]
    NotDeterministic,
    #[error("reward {reward} at state {state}, action {action} is not positive")]
    NonPositiveReward { state: usize, action: usize, reward: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error("policy evaluation failed: {0}")]
    Policy(String),
}

impl From<PolicyError> for TheoryError {
    fn from(err: PolicyError) -> Self {
        TheoryError::Policy(err.to_string())
    }
}

/// Law of the current state given the augmented state: a point mass at the
/// observed state pushed through the queued actions' transition rows.
pub fn target_state_distribution(mdp: &TabularMdp<f64>, i: &AugmentedState) -> Result<Vec<f64>, TheoryError> {
    let base = i.base.index().filter(|&s| s < mdp.num_states()).ok_or(TheoryError::InvalidState)?;
    if i.queue.iter().any(|&a| a >= mdp.num_actions()) {
        return Err(TheoryError::InvalidState);
    }
    let mut dist = vec![0.0; mdp.num_states()];
    dist[base] = 1.0;
    let mut next = vec![0.0; mdp.num_states()];
    for &a in &i.queue {
        next.iter_mut().for_each(|x| *x = 0.0);
        for (s, &p) in dist.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for &(n, q) in mdp.row(s, a) {
                next[n] += p * q;
            }
        }
        std::mem::swap(&mut dist, &mut next);
    }
    Ok(dist)
}

/// Settings shared by the theorem checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoryOptions {
    /// Value-iteration tolerance for both the base and augmented MDP.
    pub vi_tol: f64,
    /// Scores this close count as ties (lowest action wins).
    pub tie_tol: f64,
    pub state_cap: usize,
    pub seed: u64,
}

impl Default for TheoryOptions {
    fn default() -> Self {
        Self { vi_tol: 1e-10, tie_tol: 1e-8, state_cap: crate::mdp::DEFAULT_STATE_CAP, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mismatch {
    pub state: AugmentedState,
    pub samples: usize,
    pub alpha: f64,
    pub planned: usize,
    pub optimal: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub delay: usize,
    pub reachable: usize,
    /// Decisions compared (reachable states × sample counts × risk weights).
    pub comparisons: usize,
    pub mismatches: Vec<Mismatch>,
}

/// Augmented states reachable from the initial distribution (every queue is
/// a possible start) under all action sequences, in breadth-first order.
pub fn reachable_augmented_states(amdp: &TabularMdp<f64>) -> Vec<usize> {
    let mut seen = vec![false; amdp.num_states()];
    let mut queue: VecDeque<usize> = VecDeque::new();
    for (idx, &p) in amdp.initial().iter().enumerate() {
        if p > 0.0 {
            seen[idx] = true;
            queue.push_back(idx);
        }
    }
    let mut order = Vec::new();
    while let Some(idx) = queue.pop_front() {
        order.push(idx);
        for a in 0..amdp.num_actions() {
            for &(next, p) in amdp.row(idx, a) {
                if p > 0.0 && !seen[next] {
                    seen[next] = true;
                    queue.push_back(next);
                }
            }
        }
    }
    order
}

/// Compares sampled planning (exact model, exact base Q) with the exact
/// optimal augmented-state policy on every reachable augmented state, for
/// every combination of `sample_counts` and `alphas`.
pub fn verify_theorem1(
    mdp: &TabularMdp<f64>,
    delay: usize,
    sample_counts: &[usize],
    alphas: &[f64],
    opts: &TheoryOptions,
) -> Result<Theorem1Report, TheoryError> {
    if !mdp.is_deterministic() {
        return Err(TheoryError::NotDeterministic);
    }
    let codec = AugmentedCodec::new(mdp.num_states(), mdp.num_actions(), delay, opts.state_cap)?;
    let amdp = build_amdp_with(mdp, delay, &AmdpOptions { state_cap: opts.state_cap, initial_queue: None })?;
    let base = value_iteration(mdp, opts.vi_tol)?;
    let augmented = value_iteration(&amdp, opts.vi_tol)?;
    let reachable = reachable_augmented_states(&amdp);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut mismatches = Vec::new();
    let mut comparisons = 0;
    for &idx in &reachable {
        let (s, queue) = codec.decode(idx);
        let i = AugmentedState::new(State::Discrete(s), queue);
        let optimal = argmax_lowest(augmented.q_row(idx), opts.tie_tol).expect("actions exist");
        for &samples in sample_counts {
            for &alpha in alphas {
                let config = SmbsConfig { samples, alpha, tie_tol: opts.tie_tol, keep_targets: false };
                let (planned, _) = smbs_select(&base, mdp, &i, &config, &mut rng)?;
                comparisons += 1;
                if planned != optimal {
                    mismatches.push(Mismatch { state: i.clone(), samples, alpha, planned, optimal });
                }
            }
        }
    }
    Ok(Theorem1Report { delay, reachable: reachable.len(), comparisons, mismatches })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Theorem2Options {
    pub delta: f64,
    pub samples: usize,
    pub trials: usize,
    /// Added to every non-terminal reward before checking positivity.
    pub reward_shift: f64,
    pub vi_tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Report {
    pub delta: f64,
    pub samples: usize,
    pub trials: usize,
    pub reward_shift: f64,
    pub events: usize,
    pub frequency: f64,
    /// `|A| / δ²`.
    pub bound: f64,
    /// `E[V*(s_t) | I]`.
    pub expected_value: f64,
    /// Population standard deviation of `q*(s_t, a)` given `I`, per action.
    pub action_std: Vec<f64>,
    /// Right-hand side of the event, `E[V*|I]/|A| − δ/√M · max_a std`.
    pub threshold: f64,
}

impl Theorem2Report {
    /// Binomial standard error of the measured frequency at the bound.
    pub fn standard_error(&self) -> f64 {
        let p = self.bound.min(1.0);
        (p * (1.0 - p) / self.trials as f64).sqrt()
    }
}

/// Measures how often the best sampled mean falls below
/// `E[V*|I]/|A| − δ/√M · max_a std(q*(s_t, a))` over independent M-sample
/// draws, next to the Chebyshev bound `|A|/δ²`.
pub fn verify_theorem2(
    mdp: &TabularMdp<f64>,
    i: &AugmentedState,
    opts: &Theorem2Options,
    rng: &mut dyn rand::RngCore,
) -> Result<Theorem2Report, TheoryError> {
    if !(opts.delta > 0.0) || opts.samples == 0 || opts.trials == 0 {
        return Err(TheoryError::InvalidArgument("δ, M and trials must be positive".into()));
    }
    let shifted = mdp.shift_rewards(opts.reward_shift);
    for s in 0..shifted.num_states() {
        if shifted.is_terminal(s) {
            continue;
        }
        for a in 0..shifted.num_actions() {
            let reward = shifted.reward(s, a);
            if !(reward > 0.0) {
                return Err(TheoryError::NonPositiveReward { state: s, action: a, reward });
            }
        }
    }
    let sol = value_iteration(&shifted, opts.vi_tol)?;
    let dist = target_state_distribution(&shifted, i)?;
    let expected_value: f64 = dist.iter().zip(&sol.v_star).map(|(p, v)| p * v).sum();
    let exact = exact_risk_stats(&sol, &shifted, i)?;
    let num_actions = shifted.num_actions();
    let max_std = exact.std.iter().copied().fold(0.0, f64::max);
    let threshold = expected_value / num_actions as f64 - opts.delta / (opts.samples as f64).sqrt() * max_std;
    let mut events = 0;
    let mut sums = vec![0.0; num_actions];
    for _ in 0..opts.trials {
        sums.iter_mut().for_each(|x| *x = 0.0);
        for _ in 0..opts.samples {
            let target = rollout_sample(&shifted, &i.base, &i.queue, rng).map_err(|e| TheoryError::Policy(e.to_string()))?;
            if target.terminated {
                continue;
            }
            let s = target.state.index().expect("discrete");
            for (acc, q) in sums.iter_mut().zip(sol.q_row(s)) {
                *acc += q;
            }
        }
        let best = sums.iter().copied().fold(f64::NEG_INFINITY, f64::max) / opts.samples as f64;
        if best <= threshold {
            events += 1;
        }
    }
    Ok(Theorem2Report {
        delta: opts.delta,
        samples: opts.samples,
        trials: opts.trials,
        reward_shift: opts.reward_shift,
        events,
        frequency: events as f64 / opts.trials as f64,
        bound: num_actions as f64 / (opts.delta * opts.delta),
        expected_value,
        action_std: exact.std,
        threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{make_env, EnvName};

    fn lake(r: f64) -> TabularMdp<f64> {
        make_env(EnvName::FrozenLake4, r).unwrap().as_tabular().unwrap()
    }

    #[test]
    fn zero_delay_is_point_mass() {
        let dist = target_state_distribution(&lake(0.1), &AugmentedState::new(State::Discrete(5), vec![])).unwrap();
        assert_eq!(dist[5], 1.0);
        assert_eq!(dist.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn deterministic_two_steps() {
        // Right twice from the corner of the 4×4 lake.
        let dist = target_state_distribution(&lake(0.0), &AugmentedState::new(State::Discrete(0), vec![2, 2])).unwrap();
        assert_eq!(dist[2], 1.0);
    }

    #[test]
    fn invalid_states_rejected() {
        let mdp = lake(0.0);
        assert_eq!(
            target_state_distribution(&mdp, &AugmentedState::new(State::Discrete(16), vec![])),
            Err(TheoryError::InvalidState)
        );
        assert_eq!(
            target_state_distribution(&mdp, &AugmentedState::new(State::Discrete(0), vec![4])),
            Err(TheoryError::InvalidState)
        );
    }

    #[test]
    fn stochastic_input_rejected_by_theorem1() {
        assert_eq!(verify_theorem1(&lake(0.1), 1, &[1], &[0.0], &TheoryOptions::default()).unwrap_err(), TheoryError::NotDeterministic);
    }

    #[test]
    fn theorem1_small_delay() {
        let report = verify_theorem1(&lake(0.0), 1, &[1, 5], &[0.0, 1.0], &TheoryOptions::default()).unwrap();
        assert!(report.mismatches.is_empty(), "{:?}", report.mismatches);
        assert_eq!(report.comparisons, report.reachable * 4);
    }

    #[test]
    fn nonpositive_rewards_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let opts = Theorem2Options { delta: 2.0, samples: 5, trials: 10, reward_shift: 0.0, vi_tol: 1e-8 };
        let i = AugmentedState::new(State::Discrete(0), vec![2, 2]);
        assert!(matches!(verify_theorem2(&lake(0.1), &i, &opts, &mut rng), Err(TheoryError::NonPositiveReward { .. })));
    }

    #[test]
    fn deterministic_mdp_never_triggers_the_event() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let opts = Theorem2Options { delta: 2.0, samples: 5, trials: 100, reward_shift: 0.1, vi_tol: 1e-8 };
        let i = AugmentedState::new(State::Discrete(0), vec![2, 1]);
        let report = verify_theorem2(&lake(0.0), &i, &opts, &mut rng).unwrap();
        assert!(report.action_std.iter().all(|&s| s == 0.0));
        assert_eq!(report.events, 0);
    }
}
