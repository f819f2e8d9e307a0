//! Constant-delay wrapper around any [`Environment`].
//!
//! The controller sees the state from `d` steps ago together with the `d`
//! actions submitted since then. Actions reach the environment immediately;
//! it is the observations that lag. Each step releases one fully observed,
//! non-delayed transition pairing a state with the action that was applied
//! to it. Episode ends are reported without delay, and the transitions still
//! in flight at that moment are released at once.

use std::collections::VecDeque;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{EnvError, EnvObservation, EnvSpec, Environment, State};
use crate::mdp::AugmentedCodec;

#[derive(Debug, Error, PartialEq)]
pub enum DelayError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("episode finished; call reset")]
    EpisodeFinished,
    #[error("wrapper not reset yet")]
    NotStarted,
}

/// Latest observation plus the actions whose effect is not yet observed,
/// oldest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedState {
    pub base: State,
    pub queue: Vec<usize>,
}

impl AugmentedState {
    pub fn new(base: State, queue: Vec<usize>) -> Self {
        Self { base, queue }
    }

    pub fn delay(&self) -> usize {
        self.queue.len()
    }

    /// Mixed-radix index for discrete base states.
    pub fn index(&self, codec: &AugmentedCodec) -> Option<usize> {
        let s = self.base.index()?;
        (s < codec.num_states && self.queue.len() == codec.delay).then(|| codec.encode(s, &self.queue))
    }
}

impl fmt::Display for AugmentedState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}|", self.base)?;
        for (i, a) in self.queue.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{a}")?;
        }
        Ok(())
    }
}

/// Non-delayed transition `(s, a, s', r)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub s: State,
    pub a: usize,
    pub s_next: State,
    pub reward: f64,
    pub terminated: bool,
}

/// How the initial action queue is filled on reset.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueueInit {
    #[default]
    Uniform,
    Constant(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DelayedStep {
    pub state: AugmentedState,
    /// Reward of the transition observed this step (`d` steps old).
    pub reward: f64,
    pub done: bool,
    /// The episode ended in a terminal state (not by a time limit).
    pub terminated: bool,
}

pub struct DelayedEnv {
    env: Box<dyn Environment>,
    delay: usize,
    queue_init: QueueInit,
    rng: ChaCha8Rng,
    base: Option<State>,
    queue: VecDeque<usize>,
    in_flight: VecDeque<EnvObservation>,
    pending: Vec<TransitionRecord>,
    done: bool,
    env_steps: u64,
}

impl DelayedEnv {
    pub fn wrap(env: Box<dyn Environment>, delay: usize, queue_init: QueueInit) -> Self {
        Self {
            env,
            delay,
            queue_init,
            rng: ChaCha8Rng::seed_from_u64(0),
            base: None,
            queue: VecDeque::with_capacity(delay + 1),
            in_flight: VecDeque::with_capacity(delay + 1),
            pending: Vec::new(),
            done: false,
            env_steps: 0,
        }
    }

    /// Seeds both the wrapped environment and the queue initializer.
    pub fn seed(&mut self, seed: u64) {
        self.env.seed(seed);
        self.rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
    }

    pub fn delay(&self) -> usize {
        self.delay
    }

    pub fn spec(&self) -> &EnvSpec {
        self.env.spec()
    }

    pub fn env(&self) -> &dyn Environment {
        self.env.as_ref()
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Underlying environment steps taken so far, priming included.
    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    /// Actions applied whose transitions are not yet observed.
    pub fn in_flight(&self) -> usize {
        self.in_flight.len()
    }

    /// The true current state, hidden from the controller.
    pub fn hidden_state(&self) -> State {
        self.env.state()
    }

    pub fn augmented(&self) -> Option<AugmentedState> {
        let base = self.base.clone()?;
        Some(AugmentedState { base, queue: self.queue.iter().copied().collect() })
    }

    fn priming_action(&mut self) -> usize {
        match self.queue_init {
            QueueInit::Uniform => self.rng.random_range(0..self.env.spec().action_count),
            QueueInit::Constant(a) => a,
        }
    }

    /// Starts an episode and executes `d` priming actions.
    pub fn reset(&mut self) -> Result<AugmentedState, DelayError> {
        'episode: loop {
            self.queue.clear();
            self.in_flight.clear();
            self.base = Some(self.env.reset());
            self.done = false;
            for _ in 0..self.delay {
                let a = self.priming_action();
                let obs = self.env.step(a)?;
                self.env_steps += 1;
                let over = obs.done();
                self.queue.push_back(a);
                self.in_flight.push_back(obs);
                if over {
                    self.flush();
                    continue 'episode;
                }
            }
            return Ok(self.augmented().expect("base set on reset"));
        }
    }

    fn release_one(&mut self) -> Option<f64> {
        let a = self.queue.pop_front()?;
        let obs = self.in_flight.pop_front().expect("queue and in-flight observations align");
        let s = self.base.replace(obs.state.clone()).expect("base set on reset");
        self.pending.push(TransitionRecord { s, a, s_next: obs.state, reward: obs.reward, terminated: obs.terminated });
        Some(obs.reward)
    }

    fn flush(&mut self) {
        while self.release_one().is_some() {}
    }

    pub fn step(&mut self, action: usize) -> Result<DelayedStep, DelayError> {
        if self.base.is_none() {
            return Err(DelayError::NotStarted);
        }
        if self.done {
            return Err(DelayError::EpisodeFinished);
        }
        let obs = self.env.step(action)?;
        self.env_steps += 1;
        let over = obs.done();
        let terminated = obs.terminated;
        self.queue.push_back(action);
        self.in_flight.push_back(obs);
        let reward = self.release_one().expect("one transition in flight");
        let state = self.augmented().expect("base set on reset");
        if over {
            self.flush();
            self.done = true;
        }
        Ok(DelayedStep { state, reward, done: over, terminated })
    }

    /// Returns and clears the non-delayed transitions observed so far.
    pub fn drain_transitions(&mut self) -> Vec<TransitionRecord> {
        std::mem::take(&mut self.pending)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{make_env, CliffDynamics, DiscreteEnv, EnvName, Move};

    fn cliff(delay: usize, init: QueueInit) -> DelayedEnv {
        DelayedEnv::wrap(make_env(EnvName::Cliff, 0.0).unwrap(), delay, init)
    }

    #[test]
    fn zero_delay_has_empty_queue() {
        let mut env = cliff(0, QueueInit::Uniform);
        let aug = env.reset().unwrap();
        assert!(aug.queue.is_empty());
        assert_eq!(aug.base, State::Discrete(CliffDynamics::start()));
        assert_eq!(env.env_steps(), 0);
    }

    #[test]
    fn constant_queue_init() {
        let mut env = cliff(3, QueueInit::Constant(0));
        assert_eq!(env.reset().unwrap().queue, vec![0, 0, 0]);
    }

    #[test]
    fn hidden_state_runs_ahead() {
        // From the start, two priming moves up lead two rows up.
        let mut env = cliff(2, QueueInit::Constant(Move::Up as usize));
        let aug = env.reset().unwrap();
        assert_eq!(aug.base, State::Discrete(CliffDynamics::start()));
        assert_eq!(env.hidden_state(), State::Discrete(CliffDynamics::start() - 24));
    }

    #[test]
    fn queue_mechanics_d1() {
        let mut env = cliff(1, QueueInit::Constant(Move::Up as usize));
        env.reset().unwrap();
        let step = env.step(Move::Right as usize).unwrap();
        assert_eq!(step.state.queue, vec![Move::Right as usize]);
        let recs = env.drain_transitions();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].a, Move::Up as usize);
        assert_eq!(recs[0].s, State::Discrete(CliffDynamics::start()));
    }

    #[test]
    fn zero_delay_matches_raw_env() {
        let actions = [3, 2, 2, 1, 2, 0, 3, 3, 2, 2];
        let mut raw = make_env(EnvName::Cliff, 0.2).unwrap();
        raw.seed(4);
        raw.reset();
        let mut wrapped = DelayedEnv::wrap(make_env(EnvName::Cliff, 0.2).unwrap(), 0, QueueInit::Uniform);
        wrapped.seed(4);
        wrapped.reset().unwrap();
        for &a in &actions {
            let r = raw.step(a).unwrap();
            let w = wrapped.step(a).unwrap();
            assert_eq!(w.state.base, r.state);
            assert_eq!(w.reward, r.reward);
            assert_eq!(w.done, r.done());
        }
    }

    #[test]
    fn delayed_rewards_are_shifted_raw_rewards() {
        let up = Move::Up as usize;
        let actions = [2, 2, 2, 2, 1, 2, 2, 0, 2, 2];
        let mut raw = make_env(EnvName::Cliff, 0.2).unwrap();
        raw.seed(6);
        raw.reset();
        let raw_rewards: Vec<f64> =
            [up, up].iter().chain(&actions).map(|&a| raw.step(a).unwrap().reward).collect();
        let mut env = DelayedEnv::wrap(make_env(EnvName::Cliff, 0.2).unwrap(), 2, QueueInit::Constant(up));
        env.seed(6);
        env.reset().unwrap();
        let delayed: Vec<f64> = actions.iter().map(|&a| env.step(a).unwrap().reward).collect();
        assert_eq!(delayed, raw_rewards[..actions.len()].to_vec());
    }

    #[test]
    fn drain_counts_and_conservation() {
        let mut env = DelayedEnv::wrap(make_env(EnvName::FrozenLake4, 0.1).unwrap(), 2, QueueInit::Uniform);
        env.seed(1);
        env.reset().unwrap();
        assert!(env.drain_transitions().is_empty());
        let k = 7;
        for t in 0..k {
            env.step(t % 4).unwrap();
        }
        let recs = env.drain_transitions();
        assert_eq!(recs.len(), k);
        assert!(env.drain_transitions().is_empty());
        // Records chain: each next state is the following record's state.
        for w in recs.windows(2) {
            assert_eq!(w[0].s_next, w[1].s);
        }
        // Submitted actions appear in order, priming actions first.
        assert_eq!(recs[2..].iter().map(|r| r.a).collect::<Vec<_>>(), vec![0, 1, 2, 3, 0]);
    }

    #[test]
    fn records_have_positive_probability() {
        let mut env = DelayedEnv::wrap(make_env(EnvName::FrozenLake4, 0.1).unwrap(), 3, QueueInit::Uniform);
        let mdp = make_env(EnvName::FrozenLake4, 0.1).unwrap().as_tabular().unwrap();
        env.seed(2);
        env.reset().unwrap();
        for t in 0..500 {
            env.step((t * 7) % 4).unwrap();
        }
        for rec in env.drain_transitions() {
            let p = mdp.prob(rec.s.index().unwrap(), rec.a, rec.s_next.index().unwrap());
            assert!(p > 0.0);
        }
    }

    #[test]
    fn alignment_on_deterministic_env() {
        let mut env = DelayedEnv::wrap(make_env(EnvName::FrozenLake8, 0.0).unwrap(), 4, QueueInit::Uniform);
        let model = DiscreteEnv::new(crate::envs::FrozenLakeDynamics::new(crate::envs::LakeMap::Eight, 0.0).unwrap());
        env.seed(3);
        let mut aug = env.reset().unwrap();
        for t in 0..200 {
            let mut s = aug.base.index().unwrap();
            for &a in &aug.queue {
                s = model.outcomes(s, a)[0].next;
            }
            assert_eq!(State::Discrete(s), env.hidden_state());
            aug = env.step((t * 3 + t / 5) % 4).unwrap().state;
        }
    }

    #[test]
    fn termination_is_immediate_and_flushes() {
        // Priming climbs to the top row; the goal is reached while three
        // transitions are still unobserved.
        let mut env = cliff(3, QueueInit::Constant(Move::Up as usize));
        env.reset().unwrap();
        let mut plan = vec![Move::Right; 11];
        plan.extend([Move::Down; 3]);
        let mut total = 0;
        let mut finished = false;
        for m in plan {
            let step = env.step(m as usize).unwrap();
            total += 1;
            if step.done {
                finished = true;
                break;
            }
        }
        assert!(finished);
        let recs = env.drain_transitions();
        assert_eq!(recs.len(), total + 3);
        assert!(recs.last().unwrap().terminated);
        assert_eq!(env.step(0), Err(DelayError::EpisodeFinished));
    }

    #[test]
    fn augmented_index_matches_codec() {
        let codec = AugmentedCodec::new(48, 4, 2, 1_000_000).unwrap();
        let aug = AugmentedState::new(State::Discrete(5), vec![3, 1]);
        assert_eq!(aug.index(&codec), Some(codec.encode(5, &[3, 1])));
        assert_eq!(aug.to_string(), "5|3,1");
    }
}
