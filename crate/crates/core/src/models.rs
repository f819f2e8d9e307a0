//! One-step dynamics models: a smoothed frequency table for discrete tasks
//! and a Gaussian network for continuous ones, plus the multi-step rollouts
//! used by the planning policies.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::delay::TransitionRecord;
use crate::envs::State;
use crate::mdp::{parse_field, parse_values, push_row, MdpError, TabularMdp};
use crate::nn::{AdamConfig, AdamState, Gradients, Mlp, NnError};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("state kind does not match the model")]
    StateKind,
    #[error("no data for state {state}, action {action}")]
    UnseenPair { state: usize, action: usize },
    #[error("index out of range: state {state}, action {action}")]
    OutOfRange { state: usize, action: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Format(#[from] MdpError),
}

/// A predicted next state and whether the episode ends there.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSample {
    pub state: State,
    pub terminated: bool,
}

/// Conditional next-state distribution `μ(s' | s, a)`.
pub trait DynamicsModel: Send + Sync {
    fn sample_next(&self, s: &State, a: usize, rng: &mut dyn RngCore) -> Result<ModelSample, ModelError>;

    /// Most likely next state.
    fn mode_next(&self, s: &State, a: usize) -> Result<ModelSample, ModelError>;

    /// One sample per state, consuming randomness in the same order as
    /// calling `sample_next` on each state in turn.
    fn sample_next_batch(&self, states: &[State], a: usize, rng: &mut dyn RngCore) -> Result<Vec<ModelSample>, ModelError> {
        states.iter().map(|s| self.sample_next(s, a, rng)).collect()
    }
}

/// Chains `sample_next` through `actions`, stopping at the first terminal
/// sample (which is returned flagged).
pub fn rollout_sample<M: DynamicsModel + ?Sized>(
    model: &M,
    s: &State,
    actions: &[usize],
    rng: &mut dyn RngCore,
) -> Result<ModelSample, ModelError> {
    let mut current = ModelSample { state: s.clone(), terminated: false };
    for &a in actions {
        current = model.sample_next(&current.state, a, rng)?;
        if current.terminated {
            break;
        }
    }
    Ok(current)
}

/// `count` independent rollouts advanced in lockstep, so a model can batch
/// its work per step. Finished rollouts stop consuming randomness.
pub fn rollout_sample_batch<M: DynamicsModel + ?Sized>(
    model: &M,
    s: &State,
    actions: &[usize],
    count: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<ModelSample>, ModelError> {
    let mut current = vec![ModelSample { state: s.clone(), terminated: false }; count];
    for &a in actions {
        let live: Vec<usize> = (0..count).filter(|&k| !current[k].terminated).collect();
        if live.is_empty() {
            break;
        }
        let states: Vec<State> = live.iter().map(|&k| current[k].state.clone()).collect();
        for (k, next) in live.into_iter().zip(model.sample_next_batch(&states, a, rng)?) {
            current[k] = next;
        }
    }
    Ok(current)
}

/// Chains `mode_next` through `actions`.
pub fn rollout_mode<M: DynamicsModel + ?Sized>(model: &M, s: &State, actions: &[usize]) -> Result<ModelSample, ModelError> {
    let mut current = ModelSample { state: s.clone(), terminated: false };
    for &a in actions {
        current = model.mode_next(&current.state, a)?;
        if current.terminated {
            break;
        }
    }
    Ok(current)
}

fn sample_row(row: &[(usize, f64)], rng: &mut dyn RngCore) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(next, p) in row {
        acc += p;
        if u < acc {
            return next;
        }
    }
    row.last().map(|&(next, _)| next).unwrap_or(0)
}

fn discrete_index(s: &State, num_states: usize, a: usize, num_actions: usize) -> Result<usize, ModelError> {
    let state = s.index().ok_or(ModelError::StateKind)?;
    if state >= num_states || a >= num_actions {
        return Err(ModelError::OutOfRange { state, action: a });
    }
    Ok(state)
}

/// The exact dynamics of a finite MDP, used as a perfect model.
impl DynamicsModel for TabularMdp<f64> {
    fn sample_next(&self, s: &State, a: usize, rng: &mut dyn RngCore) -> Result<ModelSample, ModelError> {
        let state = discrete_index(s, self.num_states(), a, self.num_actions())?;
        let next = sample_row(self.row(state, a), rng);
        Ok(ModelSample { state: State::Discrete(next), terminated: self.is_terminal(next) })
    }

    fn mode_next(&self, s: &State, a: usize) -> Result<ModelSample, ModelError> {
        let state = discrete_index(s, self.num_states(), a, self.num_actions())?;
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for &(next, p) in self.row(state, a) {
            if p > best.1 {
                best = (next, p);
            }
        }
        Ok(ModelSample { state: State::Discrete(best.0), terminated: self.is_terminal(best.0) })
    }
}

/// Transition counts with an additive pseudo-count.
#[derive(Debug)]
pub struct TabularModel {
    num_states: usize,
    num_actions: usize,
    smoothing: f64,
    /// Observed successors per `(s, a)`, sorted by state.
    counts: Vec<Vec<(usize, u64)>>,
    totals: Vec<u64>,
    terminal: Vec<bool>,
    uniform_fallback: bool,
    fallbacks: AtomicU64,
}

impl Clone for TabularModel {
    fn clone(&self) -> Self {
        Self {
            num_states: self.num_states,
            num_actions: self.num_actions,
            smoothing: self.smoothing,
            counts: self.counts.clone(),
            totals: self.totals.clone(),
            terminal: self.terminal.clone(),
            uniform_fallback: self.uniform_fallback,
            fallbacks: AtomicU64::new(self.fallbacks.load(Ordering::Relaxed)),
        }
    }
}

impl PartialEq for TabularModel {
    fn eq(&self, other: &Self) -> bool {
        self.num_states == other.num_states
            && self.num_actions == other.num_actions
            && self.smoothing == other.smoothing
            && self.counts == other.counts
            && self.terminal == other.terminal
            && self.uniform_fallback == other.uniform_fallback
    }
}

impl TabularModel {
    pub fn new(num_states: usize, num_actions: usize, smoothing: f64) -> Self {
        assert!(smoothing >= 0.0, "pseudo-count must be nonnegative");
        Self {
            num_states,
            num_actions,
            smoothing,
            counts: vec![Vec::new(); num_states * num_actions],
            totals: vec![0; num_states * num_actions],
            terminal: vec![false; num_states],
            uniform_fallback: false,
            fallbacks: AtomicU64::new(0),
        }
    }

    /// Pairs without data are treated as uniform over states instead of
    /// failing.
    pub fn with_uniform_fallback(mut self, enabled: bool) -> Self {
        self.uniform_fallback = enabled;
        self
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    /// How many lookups fell back to the uniform distribution.
    pub fn fallback_count(&self) -> u64 {
        self.fallbacks.load(Ordering::Relaxed)
    }

    pub fn count(&self, s: usize, a: usize, next: usize) -> u64 {
        let row = &self.counts[s * self.num_actions + a];
        row.binary_search_by_key(&next, |&(n, _)| n).map(|i| row[i].1).unwrap_or(0)
    }

    pub fn total(&self, s: usize, a: usize) -> u64 {
        self.totals[s * self.num_actions + a]
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn observe(&mut self, s: usize, a: usize, next: usize, terminated: bool) -> Result<(), ModelError> {
        if s >= self.num_states || next >= self.num_states || a >= self.num_actions {
            return Err(ModelError::OutOfRange { state: s.max(next), action: a });
        }
        let idx = s * self.num_actions + a;
        let row = &mut self.counts[idx];
        match row.binary_search_by_key(&next, |&(n, _)| n) {
            Ok(i) => row[i].1 += 1,
            Err(i) => row.insert(i, (next, 1)),
        }
        self.totals[idx] += 1;
        if terminated {
            self.terminal[next] = true;
        }
        Ok(())
    }

    /// Adds every record's transition to the counts.
    pub fn fit_update(&mut self, batch: &[TransitionRecord]) -> Result<(), ModelError> {
        for rec in batch {
            let s = rec.s.index().ok_or(ModelError::StateKind)?;
            let next = rec.s_next.index().ok_or(ModelError::StateKind)?;
            self.observe(s, rec.a, next, rec.terminated)?;
        }
        Ok(())
    }

    fn mass(&self, s: usize, a: usize) -> f64 {
        self.total(s, a) as f64 + self.smoothing * self.num_states as f64
    }

    /// `(N + ε) / Σ (N + ε)`, or `None` when the pair has no mass.
    pub fn prob(&self, s: usize, a: usize, next: usize) -> Option<f64> {
        let mass = self.mass(s, a);
        (mass > 0.0).then(|| (self.count(s, a, next) as f64 + self.smoothing) / mass)
    }

    pub fn distribution(&self, s: usize, a: usize) -> Option<Vec<f64>> {
        (self.mass(s, a) > 0.0).then(|| (0..self.num_states).map(|n| self.prob(s, a, n).unwrap()).collect())
    }

    fn unseen(&self, s: usize, a: usize) -> Result<(), ModelError> {
        if self.uniform_fallback {
            self.fallbacks.fetch_add(1, Ordering::Relaxed);
            log::debug!("tabular model: no data for ({s}, {a}); using uniform successor");
            Ok(())
        } else {
            Err(ModelError::UnseenPair { state: s, action: a })
        }
    }

    /// Probability estimate as an MDP (unseen pairs uniform, zero reward).
    pub fn to_mdp(&self, discount: f64) -> TabularMdp<f64> {
        let mut mdp = TabularMdp::new(self.num_states, self.num_actions, discount);
        let uniform = vec![1.0 / self.num_states as f64; self.num_states];
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                let row = self.distribution(s, a).unwrap_or_else(|| uniform.clone());
                mdp.set_dense_row(s, a, &row).expect("model rows are distributions");
            }
        }
        for s in 0..self.num_states {
            mdp.set_terminal_flag(s, self.terminal[s]);
        }
        mdp
    }

    /// Count matrix text: `counts S A ε`, one dense count row per `(s, a)`,
    /// then the terminal states.
    pub fn to_text(&self) -> String {
        let mut out = format!("counts {} {} {}\n", self.num_states, self.num_actions, self.smoothing);
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                let dense: Vec<u64> = (0..self.num_states).map(|n| self.count(s, a, n)).collect();
                push_row(&mut out, &dense);
                out.push('\n');
            }
        }
        out.push_str("terminal");
        for (s, &t) in self.terminal.iter().enumerate() {
            if t {
                out.push_str(&format!(" {s}"));
            }
        }
        out.push('\n');
        out
    }

    pub fn from_text(text: &str) -> Result<Self, ModelError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (no, header) = lines.next().ok_or(MdpError::Parse { line: 1, message: "empty input".into() })?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 || fields[0] != "counts" {
            return Err(MdpError::Parse { line: no + 1, message: "expected `counts S A smoothing`".into() }.into());
        }
        let num_states: usize = parse_field(fields[1], no + 1)?;
        let num_actions: usize = parse_field(fields[2], no + 1)?;
        let smoothing: f64 = parse_field(fields[3], no + 1)?;
        let mut model = Self::new(num_states, num_actions, smoothing);
        for s in 0..num_states {
            for a in 0..num_actions {
                let (no, line) = lines.next().ok_or(MdpError::Parse { line: 0, message: "missing count row".into() })?;
                let dense: Vec<u64> = parse_values(line.split_whitespace(), no + 1)?;
                if dense.len() != num_states {
                    return Err(MdpError::Parse { line: no + 1, message: "count row has wrong length".into() }.into());
                }
                let idx = s * num_actions + a;
                model.counts[idx] = dense.iter().enumerate().filter(|(_, &c)| c > 0).map(|(n, &c)| (n, c)).collect();
                model.totals[idx] = dense.iter().sum();
            }
        }
        if let Some((no, line)) = lines.next() {
            let mut fields = line.split_whitespace();
            if fields.next() != Some("terminal") {
                return Err(MdpError::Parse { line: no + 1, message: "expected `terminal`".into() }.into());
            }
            for s in parse_values::<usize>(fields, no + 1)? {
                if s >= num_states {
                    return Err(MdpError::Parse { line: no + 1, message: "terminal state out of range".into() }.into());
                }
                model.terminal[s] = true;
            }
        }
        Ok(model)
    }
}

impl DynamicsModel for TabularModel {
    fn sample_next(&self, s: &State, a: usize, rng: &mut dyn RngCore) -> Result<ModelSample, ModelError> {
        let state = discrete_index(s, self.num_states, a, self.num_actions)?;
        let idx = state * self.num_actions + a;
        let mass = self.mass(state, a);
        let next = if mass <= 0.0 {
            self.unseen(state, a)?;
            rng.random_range(0..self.num_states)
        } else {
            let counted = self.totals[idx] as f64;
            let u = rng.random::<f64>() * mass;
            if u < counted {
                let mut acc = 0.0;
                let row = &self.counts[idx];
                let mut chosen = row.last().unwrap().0;
                for &(next, c) in row {
                    acc += c as f64;
                    if u < acc {
                        chosen = next;
                        break;
                    }
                }
                chosen
            } else {
                // The pseudo-count mass is spread evenly over all states.
                rng.random_range(0..self.num_states)
            }
        };
        Ok(ModelSample { state: State::Discrete(next), terminated: self.terminal[next] })
    }

    fn mode_next(&self, s: &State, a: usize) -> Result<ModelSample, ModelError> {
        let state = discrete_index(s, self.num_states, a, self.num_actions)?;
        let idx = state * self.num_actions + a;
        if self.mass(state, a) <= 0.0 {
            self.unseen(state, a)?;
        }
        // Smoothing never changes the ordering; with no counts every state ties.
        let mut best = (0, 0);
        for &(next, c) in &self.counts[idx] {
            if c > best.1 {
                best = (next, c);
            }
        }
        Ok(ModelSample { state: State::Discrete(best.0), terminated: self.terminal[best.0] })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct GaussianModelConfig {
    pub hidden: [usize; 2],
    /// Clamp applied to the predicted log standard deviation (normalized
    /// delta units).
    pub log_std_bounds: (f64, f64),
    pub adam: AdamConfig<f64>,
}

impl Default for GaussianModelConfig {
    fn default() -> Self {
        Self { hidden: [64, 64], log_std_bounds: (-5.0, 2.0), adam: AdamConfig::default() }
    }
}

/// Diagonal Gaussian over state deltas plus a termination probability.
///
/// Inputs are the state scaled to `[-1, 1]` by its declared bounds followed by
/// a one-hot action. Outputs are, per dimension, the mean of the normalized
/// delta and its log standard deviation, then one termination logit.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianModel {
    net: Mlp<f64>,
    adam: AdamState<f64>,
    low: Vec<f64>,
    high: Vec<f64>,
    num_actions: usize,
    log_std_bounds: (f64, f64),
    delta_mean: Vec<f64>,
    delta_scale: Vec<f64>,
}

/// One step of Gaussian model fitting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitLoss {
    /// Mean Gaussian negative log-likelihood per record (normalized units,
    /// constant dropped).
    pub nll: f64,
    /// Mean termination cross-entropy.
    pub bce: f64,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl GaussianModel {
    pub fn new<R: Rng + ?Sized>(
        low: Vec<f64>,
        high: Vec<f64>,
        num_actions: usize,
        config: GaussianModelConfig,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        if low.len() != high.len() || low.is_empty() || low.iter().zip(&high).any(|(l, h)| !(h > l)) {
            return Err(ModelError::StateKind);
        }
        let dim = low.len();
        let net = Mlp::new(&[dim + num_actions, config.hidden[0], config.hidden[1], 2 * dim + 1], rng)?;
        let adam = AdamState::new(net.num_params(), config.adam);
        Ok(Self {
            net,
            adam,
            low,
            high,
            num_actions,
            log_std_bounds: config.log_std_bounds,
            delta_mean: vec![0.0; dim],
            delta_scale: vec![1.0; dim],
        })
    }

    pub fn dim(&self) -> usize {
        self.low.len()
    }

    pub fn network(&self) -> &Mlp<f64> {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Mlp<f64> {
        &mut self.net
    }

    pub fn set_log_std_bounds(&mut self, bounds: (f64, f64)) {
        self.log_std_bounds = bounds;
    }

    pub fn delta_normalizer(&self) -> (&[f64], &[f64]) {
        (&self.delta_mean, &self.delta_scale)
    }

    /// Sets the affine map between raw and normalized deltas.
    pub fn set_delta_normalizer(&mut self, mean: Vec<f64>, scale: Vec<f64>) {
        assert_eq!(mean.len(), self.dim());
        assert_eq!(scale.len(), self.dim());
        assert!(scale.iter().all(|&s| s > 0.0), "delta scale must be positive");
        self.delta_mean = mean;
        self.delta_scale = scale;
    }

    /// Normalizes deltas by their per-dimension mean and standard deviation
    /// over `records`.
    pub fn fit_normalizer(&mut self, records: &[TransitionRecord]) -> Result<(), ModelError> {
        if records.is_empty() {
            return Ok(());
        }
        let dim = self.dim();
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for rec in records {
            let delta = self.raw_delta(rec)?;
            for k in 0..dim {
                sum[k] += delta[k];
                sq[k] += delta[k] * delta[k];
            }
        }
        let n = records.len() as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let scale = sq.iter().zip(&mean).map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-6)).collect();
        self.set_delta_normalizer(mean, scale);
        Ok(())
    }

    fn raw_delta(&self, rec: &TransitionRecord) -> Result<Vec<f64>, ModelError> {
        let s = rec.s.vector().ok_or(ModelError::StateKind)?;
        let next = rec.s_next.vector().ok_or(ModelError::StateKind)?;
        if s.len() != self.dim() || next.len() != self.dim() {
            return Err(ModelError::StateKind);
        }
        Ok(next.iter().zip(s).map(|(n, c)| n - c).collect())
    }

    fn encode(&self, s: &[f64], a: usize, out: &mut Vec<f64>) -> Result<(), ModelError> {
        if s.len() != self.dim() || a >= self.num_actions {
            return Err(ModelError::StateKind);
        }
        for ((x, lo), hi) in s.iter().zip(&self.low).zip(&self.high) {
            out.push(2.0 * (x - lo) / (hi - lo) - 1.0);
        }
        out.extend((0..self.num_actions).map(|k| if k == a { 1.0 } else { 0.0 }));
        Ok(())
    }

    /// Raw-unit mean delta, standard deviation and termination probability.
    pub fn predict(&self, s: &State, a: usize) -> Result<(Vec<f64>, Vec<f64>, f64), ModelError> {
        let x = s.vector().ok_or(ModelError::StateKind)?;
        let mut input = Vec::with_capacity(self.dim() + self.num_actions);
        self.encode(x, a, &mut input)?;
        let out = self.net.forward(&input)?;
        let dim = self.dim();
        let (lo, hi) = self.log_std_bounds;
        let mean = (0..dim).map(|k| self.delta_mean[k] + self.delta_scale[k] * out[k]).collect();
        let std = (0..dim).map(|k| self.delta_scale[k] * out[dim + k].clamp(lo, hi).exp()).collect();
        Ok((mean, std, sigmoid(out[2 * dim])))
    }

    /// `predict` for many states under one action with a single network pass.
    pub fn predict_batch(&self, states: &[State], a: usize) -> Result<Vec<(Vec<f64>, Vec<f64>, f64)>, ModelError> {
        let mut input = Vec::with_capacity(states.len() * (self.dim() + self.num_actions));
        for s in states {
            self.encode(s.vector().ok_or(ModelError::StateKind)?, a, &mut input)?;
        }
        let out = self.net.forward_batch(&input, states.len())?;
        let dim = self.dim();
        let (lo, hi) = self.log_std_bounds;
        Ok(out
            .chunks_exact(self.net.output_dim())
            .map(|o| {
                let mean = (0..dim).map(|k| self.delta_mean[k] + self.delta_scale[k] * o[k]).collect();
                let std = (0..dim).map(|k| self.delta_scale[k] * o[dim + k].clamp(lo, hi).exp()).collect();
                (mean, std, sigmoid(o[2 * dim]))
            })
            .collect())
    }

    fn draw(&self, x: &[f64], mean: &[f64], std: &[f64], p_term: f64, rng: &mut dyn RngCore) -> ModelSample {
        let next = x
            .iter()
            .zip(mean.iter().zip(std))
            .map(|(x, (m, sd))| {
                let z: f64 = rng.sample(StandardNormal);
                x + m + if *sd > 0.0 { sd * z } else { 0.0 }
            })
            .collect();
        let terminated = rng.random::<f64>() < p_term;
        ModelSample { state: self.clip(next), terminated }
    }

    fn clip(&self, mut state: Vec<f64>) -> State {
        for ((v, lo), hi) in state.iter_mut().zip(&self.low).zip(&self.high) {
            *v = v.clamp(*lo, *hi);
        }
        State::Continuous(state)
    }

    /// Per-record loss without updating (normalized units).
    pub fn loss(&self, batch: &[TransitionRecord]) -> Result<FitLoss, ModelError> {
        let (loss, _) = self.loss_and_gradient(batch, false)?;
        Ok(loss)
    }

    fn loss_and_gradient(&self, batch: &[TransitionRecord], want_grad: bool) -> Result<(FitLoss, Gradients<f64>), ModelError> {
        let dim = self.dim();
        let out_dim = 2 * dim + 1;
        let mut inputs = Vec::with_capacity(batch.len() * (dim + self.num_actions));
        let mut targets = Vec::with_capacity(batch.len() * dim);
        for rec in batch {
            let s = rec.s.vector().ok_or(ModelError::StateKind)?;
            self.encode(s, rec.a, &mut inputs)?;
            for (k, d) in self.raw_delta(rec)?.into_iter().enumerate() {
                targets.push((d - self.delta_mean[k]) / self.delta_scale[k]);
            }
        }
        let n = batch.len();
        let cache = self.net.forward_cached(&inputs, n)?;
        let outputs = cache.outputs();
        let (lo, hi) = self.log_std_bounds;
        let mut nll = 0.0;
        let mut bce = 0.0;
        let mut upstream = vec![0.0; n * out_dim];
        let inv_n = 1.0 / n as f64;
        for (b, rec) in batch.iter().enumerate() {
            let out = &outputs[b * out_dim..(b + 1) * out_dim];
            let up = &mut upstream[b * out_dim..(b + 1) * out_dim];
            for k in 0..dim {
                let raw = out[dim + k];
                let log_std = raw.clamp(lo, hi);
                let inv_var = (-2.0 * log_std).exp();
                let err = targets[b * dim + k] - out[k];
                nll += 0.5 * err * err * inv_var + log_std;
                up[k] = -err * inv_var * inv_n;
                if raw > lo && raw < hi {
                    up[dim + k] = (1.0 - err * err * inv_var) * inv_n;
                }
            }
            let z = out[2 * dim];
            let t = if rec.terminated { 1.0 } else { 0.0 };
            // Numerically stable binary cross-entropy on the logit.
            bce += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
            up[2 * dim] = (sigmoid(z) - t) * inv_n;
        }
        let mut grads = Gradients::zeros(if want_grad { self.net.num_params() } else { 0 });
        if want_grad {
            self.net.accumulate_cached(&cache, &upstream, &mut grads)?;
        }
        Ok((FitLoss { nll: nll * inv_n, bce: bce * inv_n }, grads))
    }

    /// One Adam step on the batch's delta likelihood and termination
    /// cross-entropy. Returns the loss before the step.
    pub fn fit_update(&mut self, batch: &[TransitionRecord]) -> Result<FitLoss, ModelError> {
        if batch.is_empty() {
            return Ok(FitLoss { nll: 0.0, bce: 0.0 });
        }
        let (loss, grads) = self.loss_and_gradient(batch, true)?;
        self.adam.step(self.net.params_mut(), &grads.0);
        Ok(loss)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("gaussian {} {}", self.dim(), self.num_actions);
        for v in [self.log_std_bounds.0, self.log_std_bounds.1] {
            out.push_str(&format!(" {v}"));
        }
        out.push('\n');
        for row in [&self.low, &self.high, &self.delta_mean, &self.delta_scale] {
            push_row(&mut out, row);
            out.push('\n');
        }
        out.push_str(&self.net.to_text());
        out
    }

    /// Restores a snapshot; optimizer state starts fresh.
    pub fn from_text(text: &str, adam: AdamConfig<f64>) -> Result<Self, ModelError> {
        let mut parts = text.splitn(6, '\n');
        let mut next_line = |no: usize| parts.next().ok_or(MdpError::Parse { line: no, message: "truncated snapshot".into() });
        let header: Vec<String> = next_line(1)?.split_whitespace().map(String::from).collect();
        if header.len() != 5 || header[0] != "gaussian" {
            return Err(MdpError::Parse { line: 1, message: "expected `gaussian D A lo hi`".into() }.into());
        }
        let num_actions: usize = parse_field(&header[2], 1)?;
        let bounds = (parse_field(&header[3], 1)?, parse_field(&header[4], 1)?);
        let mut rows = Vec::new();
        for no in 2..=5 {
            rows.push(parse_values::<f64>(next_line(no)?.split_whitespace(), no)?);
        }
        let net = Mlp::from_text(next_line(6)?)?;
        let [low, high, delta_mean, delta_scale]: [Vec<f64>; 4] = rows.try_into().unwrap();
        let adam = AdamState::new(net.num_params(), adam);
        Ok(Self { net, adam, low, high, num_actions, log_std_bounds: bounds, delta_mean, delta_scale })
    }
}

impl DynamicsModel for GaussianModel {
    fn sample_next(&self, s: &State, a: usize, rng: &mut dyn RngCore) -> Result<ModelSample, ModelError> {
        let (mean, std, p_term) = self.predict(s, a)?;
        Ok(self.draw(s.vector().unwrap(), &mean, &std, p_term, rng))
    }

    fn sample_next_batch(&self, states: &[State], a: usize, rng: &mut dyn RngCore) -> Result<Vec<ModelSample>, ModelError> {
        let preds = self.predict_batch(states, a)?;
        Ok(states
            .iter()
            .zip(preds)
            .map(|(s, (mean, std, p))| self.draw(s.vector().unwrap(), &mean, &std, p, rng))
            .collect())
    }

    fn mode_next(&self, s: &State, a: usize) -> Result<ModelSample, ModelError> {
        let (mean, _, p_term) = self.predict(s, a)?;
        let x = s.vector().unwrap();
        let next = x.iter().zip(&mean).map(|(x, m)| x + m).collect();
        Ok(ModelSample { state: self.clip(next), terminated: p_term > 0.5 })
    }
}
