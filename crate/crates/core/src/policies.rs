//! Decision rules for delayed control. Each takes the augmented state (latest
//! observation plus queued actions) and returns an action with an auditable
//! trace of the per-action scores it compared.
//!
//! * sampled planning: roll the queue through a probabilistic model `M` times
//!   and maximize `mean − α · std` of the Q-values at the sampled targets;
//! * most-likely-state planning: follow the model's mode and act greedily;
//! * augmented-state Q: greedy on a Q-function over augmented states;
//! * exact expectation: the same risk score computed from the exact target
//!   distribution of a known MDP.
//!
//! All rules break ties toward the lowest action index.

use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::delay::AugmentedState;
use crate::envs::State;
use crate::mdp::TabularMdp;
use crate::models::{rollout_mode, rollout_sample_batch, DynamicsModel, ModelError};
use crate::qlearn::{AugmentedQFunction, QError, QFunction};
use crate::scalar::argmax_lowest;
use crate::theory::{target_state_distribution, TheoryError};

/// Default number of sampled rollouts per decision.
pub const DEFAULT_SAMPLES: usize = 50;
/// Smaller rollout count used for expensive tasks.
pub const FAST_SAMPLES: usize = 20;
/// Default weight on the Q-value standard deviation.
pub const DEFAULT_ALPHA: f64 = 0.01;
/// Scores within this distance of the best count as ties.
pub const DEFAULT_TIE_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("no samples")]
    NoSamples,
    #[error("sample lists have different lengths")]
    Ragged,
    #[error("risk weight must be a nonnegative number")]
    NegativeAlpha,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Q(#[from] QError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Smbs,
    DelayedQ,
    Amdp,
    ExactExpected,
}

impl PolicyKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PolicyKind::Smbs => "smbs",
            PolicyKind::DelayedQ => "delayed_q",
            PolicyKind::Amdp => "amdp",
            PolicyKind::ExactExpected => "exact_expected",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [PolicyKind::Smbs, PolicyKind::DelayedQ, PolicyKind::Amdp, PolicyKind::ExactExpected]
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown policy `{s}`"))
    }
}

/// Per-action mean and standard deviation of Q-values over `samples` draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub samples: usize,
}

impl RiskStats {
    /// `mean − α · std` per action.
    pub fn scores(&self, alpha: f64) -> Vec<f64> {
        self.mean.iter().zip(&self.std).map(|(m, s)| m - alpha * s).collect()
    }

    /// Stats of a single exact evaluation (zero spread).
    pub fn point(values: Vec<f64>) -> Self {
        let std = vec![0.0; values.len()];
        Self { mean: values, std, samples: 1 }
    }
}

/// Sample mean and `(M − 1)`-denominator standard deviation per action;
/// the deviation is zero when `M = 1`.
pub fn risk_stats(per_action: &[Vec<f64>]) -> Result<RiskStats, PolicyError> {
    let m = per_action.first().map(Vec::len).ok_or(PolicyError::NoSamples)?;
    if m == 0 {
        return Err(PolicyError::NoSamples);
    }
    if per_action.iter().any(|v| v.len() != m) {
        return Err(PolicyError::Ragged);
    }
    let columns: Vec<f64> = (0..m).flat_map(|i| per_action.iter().map(move |v| v[i])).collect();
    Ok(risk_stats_rows(&columns, m, per_action.len()))
}

/// Stats from a row-major `m × k` matrix of Q-values.
fn risk_stats_rows(values: &[f64], m: usize, k: usize) -> RiskStats {
    let mut mean = vec![0.0; k];
    for row in values.chunks_exact(k) {
        for (acc, v) in mean.iter_mut().zip(row) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|x| *x /= m as f64);
    let mut std = vec![0.0; k];
    if m > 1 {
        for row in values.chunks_exact(k) {
            for ((acc, v), mu) in std.iter_mut().zip(row).zip(&mean) {
                *acc += (v - mu) * (v - mu);
            }
        }
        std.iter_mut().for_each(|x| *x = (*x / (m - 1) as f64).sqrt());
    }
    RiskStats { mean, std, samples: m }
}

/// Record of one decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTrace {
    pub policy: PolicyKind,
    pub state: AugmentedState,
    pub stats: RiskStats,
    pub alpha: f64,
    pub action: usize,
    /// Sampled target states, when retention was requested.
    pub targets: Option<Vec<State>>,
}

impl DecisionTrace {
    /// `policy <TAB> I <TAB> mean:std per action <TAB> action`.
    pub fn to_line(&self) -> String {
        let stats: Vec<String> = self.stats.mean.iter().zip(&self.stats.std).map(|(m, s)| format!("{m}:{s}")).collect();
        format!("{}\t{}\t{}\t{}", self.policy, self.state, stats.join(","), self.action)
    }

    /// Whether `action` maximizes the recorded scores under the tie rule.
    pub fn is_consistent(&self, tie_tol: f64) -> bool {
        argmax_lowest(&self.stats.scores(self.alpha), tie_tol) == Some(self.action)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmbsConfig {
    pub samples: usize,
    pub alpha: f64,
    pub tie_tol: f64,
    pub keep_targets: bool,
}

impl Default for SmbsConfig {
    fn default() -> Self {
        Self { samples: DEFAULT_SAMPLES, alpha: DEFAULT_ALPHA, tie_tol: DEFAULT_TIE_TOL, keep_targets: false }
    }
}

fn choose(stats: &RiskStats, alpha: f64, tie_tol: f64) -> usize {
    argmax_lowest(&stats.scores(alpha), tie_tol).expect("at least one action")
}

/// Q-values at the given targets; terminal targets are worth zero.
fn q_matrix(q: &dyn QFunction, targets: &[(State, bool)]) -> Result<Vec<f64>, PolicyError> {
    let k = q.num_actions();
    let live: Vec<State> = targets.iter().filter(|(_, t)| !t).map(|(s, _)| s.clone()).collect();
    let live_values = if live.is_empty() { Vec::new() } else { q.q_values_batch(&live)? };
    let mut out = Vec::with_capacity(targets.len() * k);
    let mut next_live = live_values.chunks_exact(k);
    for (_, terminal) in targets {
        if *terminal {
            out.extend(std::iter::repeat(0.0).take(k));
        } else {
            out.extend_from_slice(next_live.next().expect("one row per live target"));
        }
    }
    Ok(out)
}

/// Sampled risk-sensitive planning.
pub fn smbs_select(
    q: &dyn QFunction,
    model: &dyn DynamicsModel,
    i: &AugmentedState,
    config: &SmbsConfig,
    rng: &mut dyn RngCore,
) -> Result<(usize, DecisionTrace), PolicyError> {
    if config.samples == 0 {
        return Err(PolicyError::NoSamples);
    }
    if !(config.alpha >= 0.0) {
        return Err(PolicyError::NegativeAlpha);
    }
    let targets: Vec<(State, bool)> = rollout_sample_batch(model, &i.base, &i.queue, config.samples, rng)?
        .into_iter()
        .map(|sample| (sample.state, sample.terminated))
        .collect();
    let values = q_matrix(q, &targets)?;
    let stats = risk_stats_rows(&values, config.samples, q.num_actions());
    let action = choose(&stats, config.alpha, config.tie_tol);
    let kept = config.keep_targets.then(|| targets.into_iter().map(|(s, _)| s).collect());
    Ok((
        action,
        DecisionTrace { policy: PolicyKind::Smbs, state: i.clone(), stats, alpha: config.alpha, action, targets: kept },
    ))
}

/// Greedy action at the model's most likely target state.
pub fn delayed_q_select(
    q: &dyn QFunction,
    model: &dyn DynamicsModel,
    i: &AugmentedState,
    tie_tol: f64,
) -> Result<(usize, DecisionTrace), PolicyError> {
    let target = rollout_mode(model, &i.base, &i.queue)?;
    let values = q_matrix(q, &[(target.state.clone(), target.terminated)])?;
    let stats = RiskStats::point(values);
    let action = choose(&stats, 0.0, tie_tol);
    Ok((
        action,
        DecisionTrace {
            policy: PolicyKind::DelayedQ,
            state: i.clone(),
            stats,
            alpha: 0.0,
            action,
            targets: Some(vec![target.state]),
        },
    ))
}

/// Greedy action of a Q-function over augmented states.
pub fn amdp_select(q_aug: &dyn AugmentedQFunction, i: &AugmentedState, tie_tol: f64) -> Result<(usize, DecisionTrace), PolicyError> {
    let stats = RiskStats::point(q_aug.q_values_augmented(i)?);
    let action = choose(&stats, 0.0, tie_tol);
    Ok((action, DecisionTrace { policy: PolicyKind::Amdp, state: i.clone(), stats, alpha: 0.0, action, targets: None }))
}

/// Exact mean and population standard deviation of `q(s_t, a)` under the
/// target distribution of `mdp`. Terminal targets are worth zero.
pub fn exact_risk_stats(q: &dyn QFunction, mdp: &TabularMdp<f64>, i: &AugmentedState) -> Result<RiskStats, PolicyError> {
    let dist = target_state_distribution(mdp, i)?;
    let support: Vec<(State, bool)> =
        dist.iter().enumerate().filter(|(_, &p)| p > 0.0).map(|(s, _)| (State::Discrete(s), mdp.is_terminal(s))).collect();
    let probs: Vec<f64> = dist.iter().copied().filter(|&p| p > 0.0).collect();
    let k = q.num_actions();
    let values = q_matrix(q, &support)?;
    let mut mean = vec![0.0; k];
    for (row, p) in values.chunks_exact(k).zip(&probs) {
        for (acc, v) in mean.iter_mut().zip(row) {
            *acc += p * v;
        }
    }
    let mut var = vec![0.0; k];
    for (row, p) in values.chunks_exact(k).zip(&probs) {
        for ((acc, v), mu) in var.iter_mut().zip(row).zip(&mean) {
            *acc += p * (v - mu) * (v - mu);
        }
    }
    Ok(RiskStats { mean, std: var.into_iter().map(f64::sqrt).collect(), samples: 0 })
}

/// Risk score from the exact target distribution (`α = 0` maximizes the
/// conditional expectation of `q`).
pub fn exact_expected_q_select(
    q: &dyn QFunction,
    mdp: &TabularMdp<f64>,
    i: &AugmentedState,
    alpha: f64,
    tie_tol: f64,
) -> Result<(usize, DecisionTrace), PolicyError> {
    if !(alpha >= 0.0) {
        return Err(PolicyError::NegativeAlpha);
    }
    let stats = exact_risk_stats(q, mdp, i)?;
    let action = choose(&stats, alpha, tie_tol);
    Ok((action, DecisionTrace { policy: PolicyKind::ExactExpected, state: i.clone(), stats, alpha, action, targets: None }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_samples_have_zero_std() {
        let stats = risk_stats(&[vec![1.0, 1.0, 1.0]]).unwrap();
        assert_eq!(stats.mean, vec![1.0]);
        assert_eq!(stats.std, vec![0.0]);
    }

    #[test]
    fn hand_computed_std() {
        // Deviations (-1, 2, -1): (1 + 4 + 1) / 2 = 3.
        let stats = risk_stats(&[vec![0.0, 3.0, 0.0]]).unwrap();
        assert_eq!(stats.mean, vec![1.0]);
        assert_abs_diff_eq!(stats.std[0], 3f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn single_sample_has_zero_std() {
        let stats = risk_stats(&[vec![7.0]]).unwrap();
        assert_eq!((stats.mean[0], stats.std[0], stats.samples), (7.0, 0.0, 1));
    }

    #[test]
    fn malformed_samples_rejected() {
        assert_eq!(risk_stats(&[]), Err(PolicyError::NoSamples));
        assert_eq!(risk_stats(&[vec![]]), Err(PolicyError::NoSamples));
        assert_eq!(risk_stats(&[vec![1.0], vec![1.0, 2.0]]), Err(PolicyError::Ragged));
    }

    #[test]
    fn risk_weight_breaks_mean_tie() {
        let stats = risk_stats(&[vec![1.0, 1.0, 1.0], vec![0.0, 3.0, 0.0]]).unwrap();
        assert_eq!(choose(&stats, 0.0, 0.0), 0);
        assert_eq!(choose(&stats, 0.1, 0.0), 0);
        // Reverse the actions: mean tie goes to index 0 at α = 0, risk to index 1.
        let stats = risk_stats(&[vec![0.0, 3.0, 0.0], vec![1.0, 1.0, 1.0]]).unwrap();
        assert_eq!(choose(&stats, 0.0, 0.0), 0);
        assert_eq!(choose(&stats, 0.1, 0.0), 1);
    }

    #[test]
    fn policy_names_round_trip() {
        for k in [PolicyKind::Smbs, PolicyKind::DelayedQ, PolicyKind::Amdp, PolicyKind::ExactExpected] {
            assert_eq!(k.as_str().parse::<PolicyKind>().unwrap(), k);
        }
        assert!("greedy".parse::<PolicyKind>().is_err());
    }

    fn chain() -> TabularMdp<f64> {
        // 0 -> 1 -> 2 (absorbing), both actions; action 1 pays more in 2.
        let mut mdp = TabularMdp::new(3, 2, 0.9);
        for a in 0..2 {
            mdp.set_row(0, a, vec![(1, 1.0)]);
            mdp.set_row(1, a, vec![(2, 1.0)]);
            mdp.set_row(2, a, vec![(2, 1.0)]);
        }
        mdp.set_reward(2, 1, 1.0);
        mdp
    }

    #[test]
    fn zero_delay_collapses_to_greedy() {
        let mdp = chain();
        let sol = crate::mdp::value_iteration(&mdp, 1e-10).unwrap();
        let i = AugmentedState::new(State::Discrete(2), vec![]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for alpha in [0.0, 0.5, 5.0] {
            let config = SmbsConfig { samples: 7, alpha, ..Default::default() };
            let (a, trace) = smbs_select(&sol, &mdp, &i, &config, &mut rng).unwrap();
            assert_eq!(a, 1);
            assert!(trace.stats.std.iter().all(|&s| s == 0.0));
            assert!(trace.is_consistent(DEFAULT_TIE_TOL));
        }
        assert_eq!(delayed_q_select(&sol, &mdp, &i, 0.0).unwrap().0, 1);
        assert_eq!(exact_expected_q_select(&sol, &mdp, &i, 0.0, 0.0).unwrap().0, 1);
    }

    #[test]
    fn trace_line_format() {
        let mdp = chain();
        let sol = crate::mdp::value_iteration(&mdp, 1e-10).unwrap();
        let i = AugmentedState::new(State::Discrete(0), vec![0, 1]);
        let (_, trace) = delayed_q_select(&sol, &mdp, &i, 0.0).unwrap();
        let line = trace.to_line();
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields[0], "delayed_q");
        assert_eq!(fields[1], "0|0,1");
        assert_eq!(fields[3], "1");
    }

    #[test]
    fn negative_alpha_rejected() {
        let mdp = chain();
        let sol = crate::mdp::value_iteration(&mdp, 1e-10).unwrap();
        let i = AugmentedState::new(State::Discrete(0), vec![]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let config = SmbsConfig { alpha: -1.0, ..Default::default() };
        assert_eq!(smbs_select(&sol, &mdp, &i, &config, &mut rng).unwrap_err(), PolicyError::NegativeAlpha);
    }
}
