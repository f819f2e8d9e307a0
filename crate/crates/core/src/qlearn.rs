//! Q-function learners: tabular Q-learning and Double DQN with experience
//! replay and a periodically synchronized target network.

use std::collections::VecDeque;

use rand::{Rng, RngCore};
use thiserror::Error;

use crate::delay::{AugmentedState, TransitionRecord};
use crate::envs::{State, StateKind};
use crate::mdp::{AugmentedCodec, ValueSolution};
use crate::nn::{AdamConfig, AdamState, Gradients, Mlp, NnError};
use crate::scalar::argmax_lowest;

#[derive(Debug, Error, PartialEq)]
pub enum QError {
    #[error("input does not match the Q-function's encoding")]
    Encoding,
    #[error("index out of range: state {state}, action {action}")]
    OutOfRange { state: usize, action: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("empty batch")]
    EmptyBatch,
}

/// Action values of a single base state.
pub trait QFunction: Send + Sync {
    fn num_actions(&self) -> usize;

    fn q_values(&self, s: &State) -> Result<Vec<f64>, QError>;

    /// Row-major `states.len() × num_actions` values.
    fn q_values_batch(&self, states: &[State]) -> Result<Vec<f64>, QError> {
        let mut out = Vec::with_capacity(states.len() * self.num_actions());
        for s in states {
            out.extend(self.q_values(s)?);
        }
        Ok(out)
    }
}

/// Action values of an augmented state.
pub trait AugmentedQFunction: Send + Sync {
    fn num_actions(&self) -> usize;

    fn q_values_augmented(&self, i: &AugmentedState) -> Result<Vec<f64>, QError>;
}

/// Uniform with probability `epsilon`, otherwise greedy with lowest-index
/// ties. No randomness is consumed when `epsilon` is zero.
pub fn epsilon_greedy(q_values: &[f64], epsilon: f64, rng: &mut dyn RngCore) -> usize {
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        return rng.random_range(0..q_values.len());
    }
    argmax_lowest(q_values, 0.0).expect("at least one action")
}

/// Linear annealing from `start` to `end` over `steps`, constant afterwards.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub steps: u64,
}

impl EpsilonSchedule {
    pub fn value(&self, step: u64) -> f64 {
        if self.steps == 0 || step >= self.steps {
            return self.end;
        }
        self.start + (self.end - self.start) * step as f64 / self.steps as f64
    }
}

impl QFunction for ValueSolution<f64> {
    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn q_values(&self, s: &State) -> Result<Vec<f64>, QError> {
        let idx = s.index().ok_or(QError::Encoding)?;
        if idx >= self.num_states() {
            return Err(QError::OutOfRange { state: idx, action: 0 });
        }
        Ok(self.q_row(idx).to_vec())
    }
}

/// An exact solution of the augmented MDP, indexed through its codec.
#[derive(Debug, Clone)]
pub struct ExactAugmentedQ {
    pub solution: ValueSolution<f64>,
    pub codec: AugmentedCodec,
}

impl AugmentedQFunction for ExactAugmentedQ {
    fn num_actions(&self) -> usize {
        self.solution.num_actions
    }

    fn q_values_augmented(&self, i: &AugmentedState) -> Result<Vec<f64>, QError> {
        let idx = i.index(&self.codec).ok_or(QError::Encoding)?;
        Ok(self.solution.q_row(idx).to_vec())
    }
}

/// Q-table over `(state, action)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularQ {
    num_states: usize,
    num_actions: usize,
    q: Vec<f64>,
}

impl TabularQ {
    pub fn new(num_states: usize, num_actions: usize) -> Self {
        Self { num_states, num_actions, q: vec![0.0; num_states * num_actions] }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.q[s * self.num_actions + a]
    }

    pub fn set(&mut self, s: usize, a: usize, value: f64) {
        self.q[s * self.num_actions + a] = value;
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.q[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn table(&self) -> &[f64] {
        &self.q
    }

    /// `q[s][a] += lr · (r + γ · max q[s'] · (1 − terminated) − q[s][a])` on
    /// raw indices. Returns the temporal-difference error.
    pub fn update_indices(
        &mut self,
        s: usize,
        a: usize,
        reward: f64,
        next: usize,
        terminated: bool,
        discount: f64,
        lr: f64,
    ) -> Result<f64, QError> {
        if s >= self.num_states || next >= self.num_states || a >= self.num_actions {
            return Err(QError::OutOfRange { state: s.max(next), action: a });
        }
        let bootstrap = if terminated { 0.0 } else { self.row(next).iter().copied().fold(f64::NEG_INFINITY, f64::max) };
        let idx = s * self.num_actions + a;
        let td = reward + discount * bootstrap - self.q[idx];
        self.q[idx] += lr * td;
        Ok(td)
    }

    pub fn update(&mut self, rec: &TransitionRecord, discount: f64, lr: f64) -> Result<f64, QError> {
        let s = rec.s.index().ok_or(QError::Encoding)?;
        let next = rec.s_next.index().ok_or(QError::Encoding)?;
        self.update_indices(s, rec.a, rec.reward, next, rec.terminated, discount, lr)
    }

    /// Text matrix: `qtable S A`, then one row of action values per state.
    pub fn to_text(&self) -> String {
        let mut out = format!("qtable {} {}\n", self.num_states, self.num_actions);
        for s in 0..self.num_states {
            let row: Vec<String> = self.row(s).iter().map(|v| v.to_string()).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, QError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines.next().ok_or(QError::Encoding)?.split_whitespace().collect();
        if header.len() != 3 || header[0] != "qtable" {
            return Err(QError::Encoding);
        }
        let num_states: usize = header[1].parse().map_err(|_| QError::Encoding)?;
        let num_actions: usize = header[2].parse().map_err(|_| QError::Encoding)?;
        let q: Vec<f64> = lines
            .flat_map(|l| l.split_whitespace())
            .map(|f| f.parse().map_err(|_| QError::Encoding))
            .collect::<Result<_, _>>()?;
        if q.len() != num_states * num_actions {
            return Err(QError::Encoding);
        }
        Ok(Self { num_states, num_actions, q })
    }
}

impl QFunction for TabularQ {
    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn q_values(&self, s: &State) -> Result<Vec<f64>, QError> {
        let idx = s.index().ok_or(QError::Encoding)?;
        if idx >= self.num_states {
            return Err(QError::OutOfRange { state: idx, action: 0 });
        }
        Ok(self.row(idx).to_vec())
    }
}

/// Tabular Q over augmented states, indexed through a codec.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedTabularQ {
    pub table: TabularQ,
    pub codec: AugmentedCodec,
}

impl AugmentedQFunction for AugmentedTabularQ {
    fn num_actions(&self) -> usize {
        self.table.num_actions
    }

    fn q_values_augmented(&self, i: &AugmentedState) -> Result<Vec<f64>, QError> {
        let idx = i.index(&self.codec).ok_or(QError::Encoding)?;
        Ok(self.table.row(idx).to_vec())
    }
}

/// How network inputs are built from states.
#[derive(Debug, Clone, PartialEq)]
pub enum Encoder {
    /// One-hot base state.
    OneHot { num_states: usize },
    /// Continuous state scaled to `[-1, 1]` by its declared bounds.
    Bounds { low: Vec<f64>, high: Vec<f64> },
    /// Base-state encoding followed by one one-hot block per queued action.
    Augmented { base: Box<Encoder>, num_actions: usize, delay: usize },
}

impl Encoder {
    pub fn for_state_kind(kind: &StateKind) -> Self {
        match kind {
            StateKind::Discrete { count } => Encoder::OneHot { num_states: *count },
            StateKind::Continuous { low, high } => Encoder::Bounds { low: low.clone(), high: high.clone() },
        }
    }

    pub fn augmented(kind: &StateKind, num_actions: usize, delay: usize) -> Self {
        Encoder::Augmented { base: Box::new(Self::for_state_kind(kind)), num_actions, delay }
    }

    pub fn dim(&self) -> usize {
        match self {
            Encoder::OneHot { num_states } => *num_states,
            Encoder::Bounds { low, .. } => low.len(),
            Encoder::Augmented { base, num_actions, delay } => base.dim() + num_actions * delay,
        }
    }

    fn encode_base(&self, s: &State, out: &mut Vec<f64>) -> Result<(), QError> {
        match (self, s) {
            (Encoder::OneHot { num_states }, State::Discrete(idx)) if idx < num_states => {
                let start = out.len();
                out.resize(start + num_states, 0.0);
                out[start + idx] = 1.0;
                Ok(())
            }
            (Encoder::Bounds { low, high }, State::Continuous(x)) if x.len() == low.len() => {
                for ((x, lo), hi) in x.iter().zip(low).zip(high) {
                    out.push(2.0 * (x - lo) / (hi - lo) - 1.0);
                }
                Ok(())
            }
            _ => Err(QError::Encoding),
        }
    }

    pub fn encode_state(&self, s: &State, out: &mut Vec<f64>) -> Result<(), QError> {
        match self {
            Encoder::Augmented { .. } => Err(QError::Encoding),
            _ => self.encode_base(s, out),
        }
    }

    pub fn encode_augmented(&self, i: &AugmentedState, out: &mut Vec<f64>) -> Result<(), QError> {
        match self {
            Encoder::Augmented { base, num_actions, delay } => {
                if i.queue.len() != *delay || i.queue.iter().any(|&a| a >= *num_actions) {
                    return Err(QError::Encoding);
                }
                base.encode_base(&i.base, out)?;
                for &a in &i.queue {
                    let start = out.len();
                    out.resize(start + num_actions, 0.0);
                    out[start + a] = 1.0;
                }
                Ok(())
            }
            _ => Err(QError::Encoding),
        }
    }
}

/// Values that can be fed to an [`Encoder`].
pub trait Encodable: Clone + Send + Sync {
    fn encode(&self, encoder: &Encoder, out: &mut Vec<f64>) -> Result<(), QError>;
}

impl Encodable for State {
    fn encode(&self, encoder: &Encoder, out: &mut Vec<f64>) -> Result<(), QError> {
        encoder.encode_state(self, out)
    }
}

impl Encodable for AugmentedState {
    fn encode(&self, encoder: &Encoder, out: &mut Vec<f64>) -> Result<(), QError> {
        encoder.encode_augmented(self, out)
    }
}

/// One stored transition. `reward` already includes any rewards that are
/// folded into the step (see the trainer's handling of episode ends).
#[derive(Debug, Clone, PartialEq)]
pub struct Experience<X> {
    pub input: X,
    pub action: usize,
    pub reward: f64,
    pub next: X,
    pub terminal: bool,
}

impl From<TransitionRecord> for Experience<State> {
    fn from(rec: TransitionRecord) -> Self {
        Experience { input: rec.s, action: rec.a, reward: rec.reward, next: rec.s_next, terminal: rec.terminated }
    }
}

/// Fixed-capacity FIFO replay memory.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    items: VecDeque<T>,
    capacity: usize,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self { items: VecDeque::with_capacity(capacity.min(1 << 16)), capacity }
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(item);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }

    /// `batch` uniform draws with replacement.
    pub fn sample(&self, batch: usize, rng: &mut dyn RngCore) -> Vec<&T> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..batch).map(|_| &self.items[rng.random_range(0..self.items.len())]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DqnConfig {
    pub hidden: Vec<usize>,
    pub replay_capacity: usize,
    pub batch_size: usize,
    pub sync_period: u64,
    pub discount: f64,
    pub adam: AdamConfig<f64>,
}

impl Default for DqnConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            replay_capacity: 50_000,
            batch_size: 64,
            sync_period: 500,
            discount: 0.99,
            adam: AdamConfig::default(),
        }
    }
}

/// Double DQN: online network, target network and its optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct DqnAgent {
    pub online: Mlp<f64>,
    pub target: Mlp<f64>,
    adam: AdamState<f64>,
    encoder: Encoder,
    num_actions: usize,
    discount: f64,
    sync_period: u64,
    updates: u64,
}

impl DqnAgent {
    pub fn new<R: Rng + ?Sized>(encoder: Encoder, num_actions: usize, config: &DqnConfig, rng: &mut R) -> Result<Self, QError> {
        let mut sizes = vec![encoder.dim()];
        sizes.extend(&config.hidden);
        sizes.push(num_actions);
        let online = Mlp::new(&sizes, rng)?;
        Ok(Self::from_networks(online.clone(), online, encoder, config))
    }

    pub fn from_networks(online: Mlp<f64>, target: Mlp<f64>, encoder: Encoder, config: &DqnConfig) -> Self {
        let adam = AdamState::new(online.num_params(), config.adam);
        let num_actions = online.output_dim();
        Self {
            online,
            target,
            adam,
            encoder,
            num_actions,
            discount: config.discount,
            sync_period: config.sync_period,
            updates: 0,
        }
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Copies the online parameters into the target network.
    pub fn sync_target(&mut self) {
        self.target.set_params(self.online.params()).expect("same shape");
    }

    fn encode_all<'a, X: Encodable + 'a>(&self, xs: impl Iterator<Item = &'a X>) -> Result<(Vec<f64>, usize), QError> {
        let mut out = Vec::new();
        let mut n = 0;
        for x in xs {
            x.encode(&self.encoder, &mut out)?;
            n += 1;
        }
        Ok((out, n))
    }

    /// Online-network action values.
    pub fn values<X: Encodable>(&self, x: &X) -> Result<Vec<f64>, QError> {
        let (input, _) = self.encode_all(std::iter::once(x))?;
        Ok(self.online.forward(&input)?)
    }

    /// Double-Q bootstrap targets for a batch.
    pub fn targets<X: Encodable>(&self, batch: &[&Experience<X>]) -> Result<Vec<f64>, QError> {
        let (next_inputs, n) = self.encode_all(batch.iter().map(|e| &e.next))?;
        let online_next = self.online.forward_batch(&next_inputs, n)?;
        let target_next = self.target.forward_batch(&next_inputs, n)?;
        let k = self.num_actions;
        Ok(batch
            .iter()
            .enumerate()
            .map(|(b, e)| {
                if e.terminal {
                    return e.reward;
                }
                let best = argmax_lowest(&online_next[b * k..(b + 1) * k], 0.0).unwrap();
                e.reward + self.discount * target_next[b * k + best]
            })
            .collect())
    }

    /// One Adam step on the mean squared error against the double-Q
    /// targets. Syncs the target network every `sync_period` updates.
    /// Returns the loss before the step.
    pub fn update<X: Encodable>(&mut self, batch: &[&Experience<X>]) -> Result<f64, QError> {
        if batch.is_empty() {
            return Err(QError::EmptyBatch);
        }
        let targets = self.targets(batch)?;
        let (inputs, n) = self.encode_all(batch.iter().map(|e| &e.input))?;
        let cache = self.online.forward_cached(&inputs, n)?;
        let outputs = cache.outputs();
        let k = self.num_actions;
        let mut upstream = vec![0.0; n * k];
        let mut loss = 0.0;
        for (b, e) in batch.iter().enumerate() {
            let err = outputs[b * k + e.action] - targets[b];
            loss += err * err;
            upstream[b * k + e.action] = 2.0 * err / n as f64;
        }
        let mut grads = Gradients::zeros(self.online.num_params());
        self.online.accumulate_cached(&cache, &upstream, &mut grads)?;
        self.adam.step(self.online.params_mut(), &grads.0);
        self.updates += 1;
        if self.sync_period > 0 && self.updates % self.sync_period == 0 {
            self.sync_target();
        }
        Ok(loss / n as f64)
    }
}

impl QFunction for DqnAgent {
    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn q_values(&self, s: &State) -> Result<Vec<f64>, QError> {
        self.values(s)
    }

    fn q_values_batch(&self, states: &[State]) -> Result<Vec<f64>, QError> {
        let (input, n) = self.encode_all(states.iter())?;
        Ok(self.online.forward_batch(&input, n)?)
    }
}

impl AugmentedQFunction for DqnAgent {
    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn q_values_augmented(&self, i: &AugmentedState) -> Result<Vec<f64>, QError> {
        self.values(i)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rec(s: usize, a: usize, r: f64, next: usize, terminated: bool) -> TransitionRecord {
        TransitionRecord { s: State::Discrete(s), a, s_next: State::Discrete(next), reward: r, terminated }
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut q = TabularQ::new(2, 2);
        q.set(1, 0, 3.0);
        let before = q.clone();
        q.update(&rec(0, 1, 1.0, 1, false), 0.9, 0.0).unwrap();
        assert_eq!(q, before);
    }

    #[test]
    fn terminal_update_moves_to_reward() {
        let mut q = TabularQ::new(2, 2);
        q.set(1, 0, 100.0);
        q.update(&rec(0, 0, 1.0, 1, true), 0.9, 1.0).unwrap();
        assert_eq!(q.get(0, 0), 1.0);
    }

    #[test]
    fn bootstraps_from_best_next_action() {
        let mut q = TabularQ::new(2, 2);
        q.set(1, 1, 2.0);
        q.update(&rec(0, 0, 1.0, 1, false), 0.5, 0.5).unwrap();
        assert_eq!(q.get(0, 0), 0.5 * (1.0 + 0.5 * 2.0));
    }

    #[test]
    fn qtable_text_round_trip() {
        let mut q = TabularQ::new(3, 2);
        q.set(2, 1, -0.125);
        q.set(0, 0, 1.0 / 3.0);
        assert_eq!(TabularQ::from_text(&q.to_text()).unwrap(), q);
    }

    #[test]
    fn greedy_selection_and_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(epsilon_greedy(&[0.0, 5.0, 3.0], 0.0, &mut rng), 1);
        assert_eq!(epsilon_greedy(&[5.0, 5.0], 0.0, &mut rng), 0);
    }

    #[test]
    fn full_exploration_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[epsilon_greedy(&[1.0, 0.0, 0.0, 0.0], 1.0, &mut rng)] += 1;
        }
        // 3 standard errors of a Bernoulli(1/4) frequency.
        let band = 3.0 * (0.25f64 * 0.75 / n as f64).sqrt();
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() < band, "{counts:?}");
        }
    }

    #[test]
    fn epsilon_schedule_anneals_then_holds() {
        let s = EpsilonSchedule { start: 1.0, end: 0.05, steps: 100 };
        assert_eq!(s.value(0), 1.0);
        assert_abs_diff_eq!(s.value(50), 0.525, epsilon = 1e-12);
        assert_eq!(s.value(100), 0.05);
        assert_eq!(s.value(10_000), 0.05);
    }

    #[test]
    fn replay_evicts_oldest() {
        let mut buf = ReplayBuffer::new(3);
        for i in 0..5 {
            buf.push(i);
        }
        assert_eq!(buf.iter().copied().collect::<Vec<_>>(), vec![2, 3, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(buf.sample(10, &mut rng).iter().all(|&&x| x >= 2));
    }

    #[test]
    fn encoders() {
        let one_hot = Encoder::OneHot { num_states: 3 };
        let mut out = Vec::new();
        one_hot.encode_state(&State::Discrete(1), &mut out).unwrap();
        assert_eq!(out, vec![0.0, 1.0, 0.0]);
        let bounds = Encoder::Bounds { low: vec![0.0, -2.0], high: vec![1.0, 2.0] };
        out.clear();
        bounds.encode_state(&State::Continuous(vec![0.25, 2.0]), &mut out).unwrap();
        assert_eq!(out, vec![-0.5, 1.0]);
        let aug = Encoder::augmented(&StateKind::Discrete { count: 2 }, 3, 2);
        assert_eq!(aug.dim(), 8);
        out.clear();
        aug.encode_augmented(&AugmentedState::new(State::Discrete(1), vec![2, 0]), &mut out).unwrap();
        assert_eq!(out, vec![0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(aug.encode_state(&State::Discrete(0), &mut out), Err(QError::Encoding));
        assert_eq!(one_hot.encode_state(&State::Discrete(3), &mut out), Err(QError::Encoding));
    }

    fn small_agent() -> DqnAgent {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let config = DqnConfig { hidden: vec![4], discount: 0.9, ..Default::default() };
        DqnAgent::new(Encoder::OneHot { num_states: 3 }, 2, &config, &mut rng).unwrap()
    }

    #[test]
    fn terminal_batch_at_reward_has_zero_loss() {
        let mut agent = small_agent();
        let s = State::Discrete(0);
        let out = agent.values(&s).unwrap();
        let e = Experience { input: s.clone(), action: 1, reward: out[1], next: State::Discrete(2), terminal: true };
        let loss = agent.update(&[&e, &e]).unwrap();
        assert_abs_diff_eq!(loss, 0.0, epsilon = 1e-24);
    }

    #[test]
    fn double_q_target_by_hand() {
        // Single linear layers over one-hot states: outputs are weight rows.
        let config = DqnConfig { hidden: vec![], discount: 0.5, ..Default::default() };
        let mut online = Mlp::zeros(&[2, 2]).unwrap();
        let mut target = Mlp::zeros(&[2, 2]).unwrap();
        // Online prefers action 1 in state 1; the target values it at 4
        // while its own favourite (action 0) is worth 10.
        online.set_weight(0, 1, 0, 1.0);
        online.set_weight(0, 1, 1, 2.0);
        target.set_weight(0, 1, 0, 10.0);
        target.set_weight(0, 1, 1, 4.0);
        let agent = DqnAgent::from_networks(online, target, Encoder::OneHot { num_states: 2 }, &config);
        let e = Experience { input: State::Discrete(0), action: 0, reward: 1.0, next: State::Discrete(1), terminal: false };
        assert_eq!(agent.targets(&[&e]).unwrap(), vec![1.0 + 0.5 * 4.0]);
    }

    #[test]
    fn sync_copies_exactly_and_update_diverges() {
        let mut agent = small_agent();
        agent.online.params_mut()[0] += 1.0;
        agent.sync_target();
        assert_eq!(agent.online, agent.target);
        let snapshot = agent.target.clone();
        agent.sync_target();
        assert_eq!(agent.target, snapshot);
        let e = Experience { input: State::Discrete(0), action: 0, reward: 5.0, next: State::Discrete(1), terminal: true };
        agent.update(&[&e]).unwrap();
        assert_ne!(agent.online, agent.target);
    }

    #[test]
    fn target_syncs_on_period() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let config = DqnConfig { hidden: vec![4], sync_period: 3, ..Default::default() };
        let mut agent = DqnAgent::new(Encoder::OneHot { num_states: 2 }, 2, &config, &mut rng).unwrap();
        let e = Experience { input: State::Discrete(0), action: 0, reward: 1.0, next: State::Discrete(1), terminal: false };
        agent.update(&[&e]).unwrap();
        agent.update(&[&e]).unwrap();
        assert_ne!(agent.online, agent.target);
        agent.update(&[&e]).unwrap();
        assert_eq!(agent.online, agent.target);
    }
}
