//! Benchmark environments with tunable transition randomness.
//!
//! Every environment owns its random stream; reseeding with the same value
//! reproduces trajectories bit for bit. Discrete environments are defined by
//! an explicit outcome table, so stepping and [`Environment::as_tabular`]
//! share one source of truth.

mod cartpole;
mod cliff;
mod frozen_lake;
mod puddle_world;
mod stormy_road;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::TabularMdp;

pub use cartpole::{Cartpole, CartpoleParams};
pub use cliff::{CliffDynamics, CLIFF_COLS, CLIFF_ROWS};
pub use frozen_lake::{FrozenLakeDynamics, LakeMap};
pub use puddle_world::{puddle_penalty_depth, PuddleWorld};
pub use stormy_road::StormyRoadDynamics;

/// Discount used for tabular exports unless stated otherwise.
pub const DEFAULT_DISCOUNT: f64 = 0.99;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("randomness {value} outside [{low}, {high}] for {env}")]
    RandomnessOutOfRange { env: &'static str, value: f64, low: f64, high: f64 },
    #[error("action {action} invalid (environment has {count} actions)")]
    InvalidAction { action: usize, count: usize },
    #[error("{0} has a continuous state space and no tabular form")]
    NotDiscrete(&'static str),
    #[error("episode has ended; call reset first")]
    EpisodeOver,
    #[error("unknown environment `{0}`")]
    UnknownEnv(String),
}

/// Environment state: a cell index or a real vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum State {
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl State {
    pub fn index(&self) -> Option<usize> {
        match self {
            State::Discrete(i) => Some(*i),
            State::Continuous(_) => None,
        }
    }

    pub fn vector(&self) -> Option<&[f64]> {
        match self {
            State::Discrete(_) => None,
            State::Continuous(v) => Some(v),
        }
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            State::Discrete(i) => write!(f, "{i}"),
            State::Continuous(v) => {
                for (i, x) in v.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{x}")?;
                }
                Ok(())
            }
        }
    }
}

/// Result of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvObservation {
    pub state: State,
    pub reward: f64,
    pub terminated: bool,
    /// Episode cut by a step cap; not a true terminal state.
    pub truncated: bool,
}

impl EnvObservation {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StateKind {
    Discrete { count: usize },
    Continuous { low: Vec<f64>, high: Vec<f64> },
}

impl StateKind {
    pub fn is_discrete(&self) -> bool {
        matches!(self, StateKind::Discrete { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvName {
    StormyRoad,
    FrozenLake4,
    FrozenLake8,
    Cartpole,
    PuddleWorld,
    Cliff,
}

impl EnvName {
    pub const ALL: [EnvName; 6] = [
        EnvName::StormyRoad,
        EnvName::FrozenLake4,
        EnvName::FrozenLake8,
        EnvName::Cartpole,
        EnvName::PuddleWorld,
        EnvName::Cliff,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            EnvName::StormyRoad => "stormy_road",
            EnvName::FrozenLake4 => "frozen_lake4",
            EnvName::FrozenLake8 => "frozen_lake8",
            EnvName::Cartpole => "cartpole",
            EnvName::PuddleWorld => "puddle_world",
            EnvName::Cliff => "cliff",
        }
    }

    pub fn is_discrete(&self) -> bool {
        !matches!(self, EnvName::Cartpole | EnvName::PuddleWorld)
    }
}

impl fmt::Display for EnvName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvName {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EnvName::ALL
            .iter()
            .copied()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| EnvError::UnknownEnv(s.to_string()))
    }
}

/// Static description of an environment instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: EnvName,
    pub randomness: f64,
    pub state_kind: StateKind,
    pub action_count: usize,
    pub episodic: bool,
    /// Inclusive bounds on every per-step reward.
    pub reward_range: (f64, f64),
}

/// Reset/step contract shared by all benchmark environments.
pub trait Environment: Send {
    fn spec(&self) -> &EnvSpec;

    /// Reseeds the environment's random stream.
    fn seed(&mut self, seed: u64);

    fn reset(&mut self) -> State;

    fn step(&mut self, action: usize) -> Result<EnvObservation, EnvError>;

    /// Exact transition tensor and expected-reward matrix.
    fn tabular(&self, discount: f64) -> Result<TabularMdp<f64>, EnvError>;

    fn as_tabular(&self) -> Result<TabularMdp<f64>, EnvError> {
        self.tabular(DEFAULT_DISCOUNT)
    }

    /// Current (true, undelayed) state.
    fn state(&self) -> State;
}

/// Builds an environment by name. `randomness` is the environment's `r`
/// (slip probability for the cliff).
pub fn make_env(name: EnvName, randomness: f64) -> Result<Box<dyn Environment>, EnvError> {
    Ok(match name {
        EnvName::StormyRoad => Box::new(DiscreteEnv::new(StormyRoadDynamics::new(randomness)?)),
        EnvName::FrozenLake4 => Box::new(DiscreteEnv::new(FrozenLakeDynamics::new(LakeMap::Four, randomness)?)),
        EnvName::FrozenLake8 => Box::new(DiscreteEnv::new(FrozenLakeDynamics::new(LakeMap::Eight, randomness)?)),
        EnvName::Cartpole => Box::new(Cartpole::new(randomness)?),
        EnvName::PuddleWorld => Box::new(PuddleWorld::new(randomness)?),
        EnvName::Cliff => Box::new(DiscreteEnv::new(CliffDynamics::new(randomness)?)),
    })
}

pub(crate) fn check_range(env: &'static str, value: f64, low: f64, high: f64) -> Result<(), EnvError> {
    if value.is_finite() && value >= low && value <= high {
        Ok(())
    } else {
        Err(EnvError::RandomnessOutOfRange { env, value, low, high })
    }
}

/// One possible result of taking an action in a discrete environment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outcome {
    pub next: usize,
    pub reward: f64,
    pub terminated: bool,
    pub probability: f64,
}

/// Dynamics of a finite environment given as explicit outcome lists.
pub trait DiscreteDynamics: Send {
    fn spec(&self) -> &EnvSpec;
    fn initial_state(&self) -> usize;
    /// Outcomes of `action` in `state`; probabilities sum to one.
    fn outcomes(&self, state: usize, action: usize) -> Vec<Outcome>;
    /// States that end an episode (absorbing in the tabular form).
    fn terminal_states(&self) -> Vec<usize> {
        Vec::new()
    }
}

/// Environment driven by a precomputed outcome table.
pub struct DiscreteEnv<D> {
    dynamics: D,
    table: Vec<Vec<Outcome>>,
    state: usize,
    done: bool,
    rng: ChaCha8Rng,
}

impl<D: DiscreteDynamics> DiscreteEnv<D> {
    pub fn new(dynamics: D) -> Self {
        let spec = dynamics.spec();
        let count = match spec.state_kind {
            StateKind::Discrete { count } => count,
            StateKind::Continuous { .. } => unreachable!("discrete dynamics with continuous states"),
        };
        let table = (0..count)
            .flat_map(|s| (0..spec.action_count).map(move |a| (s, a)))
            .map(|(s, a)| dynamics.outcomes(s, a))
            .collect();
        let state = dynamics.initial_state();
        Self { dynamics, table, state, done: false, rng: ChaCha8Rng::seed_from_u64(0) }
    }

    pub fn dynamics(&self) -> &D {
        &self.dynamics
    }

    pub fn outcomes(&self, state: usize, action: usize) -> &[Outcome] {
        &self.table[state * self.dynamics.spec().action_count + action]
    }

    /// Places the agent in `state` (test and study hook).
    pub fn set_state(&mut self, state: usize) {
        self.state = state;
        self.done = false;
    }
}

impl<D: DiscreteDynamics> Environment for DiscreteEnv<D> {
    fn spec(&self) -> &EnvSpec {
        self.dynamics.spec()
    }

    fn seed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    fn reset(&mut self) -> State {
        self.state = self.dynamics.initial_state();
        self.done = false;
        State::Discrete(self.state)
    }

    fn step(&mut self, action: usize) -> Result<EnvObservation, EnvError> {
        let count = self.dynamics.spec().action_count;
        if action >= count {
            return Err(EnvError::InvalidAction { action, count });
        }
        if self.done {
            return Err(EnvError::EpisodeOver);
        }
        let outcomes = &self.table[self.state * count + action];
        let u: f64 = self.rng.random();
        let mut acc = 0.0;
        let mut chosen = outcomes[outcomes.len() - 1];
        for o in outcomes {
            acc += o.probability;
            if u < acc {
                chosen = *o;
                break;
            }
        }
        self.state = chosen.next;
        self.done = chosen.terminated;
        Ok(EnvObservation {
            state: State::Discrete(chosen.next),
            reward: chosen.reward,
            terminated: chosen.terminated,
            truncated: false,
        })
    }

    fn tabular(&self, discount: f64) -> Result<TabularMdp<f64>, EnvError> {
        let spec = self.dynamics.spec();
        let count = match spec.state_kind {
            StateKind::Discrete { count } => count,
            StateKind::Continuous { .. } => return Err(EnvError::NotDiscrete(spec.name.as_str())),
        };
        let na = spec.action_count;
        let mut mdp = TabularMdp::new(count, na, discount);
        for s in 0..count {
            for a in 0..na {
                let outcomes = &self.table[s * na + a];
                mdp.set_row(s, a, outcomes.iter().map(|o| (o.next, o.probability)).collect());
                mdp.set_reward(s, a, outcomes.iter().map(|o| o.probability * o.reward).sum());
            }
        }
        for s in self.dynamics.terminal_states() {
            mdp.make_terminal(s);
        }
        let mut initial = vec![0.0; count];
        initial[self.dynamics.initial_state()] = 1.0;
        mdp.set_initial(initial);
        Ok(mdp)
    }

    fn state(&self) -> State {
        State::Discrete(self.state)
    }
}

/// Grid moves in the order left, down, right, up.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Move {
    Left = 0,
    Down = 1,
    Right = 2,
    Up = 3,
}

impl Move {
    pub fn from_index(a: usize) -> Move {
        match a {
            0 => Move::Left,
            1 => Move::Down,
            2 => Move::Right,
            3 => Move::Up,
            _ => panic!("move index {a} out of range"),
        }
    }

    /// Row/column step; rows grow downward.
    pub fn delta(self) -> (isize, isize) {
        match self {
            Move::Left => (0, -1),
            Move::Down => (1, 0),
            Move::Right => (0, 1),
            Move::Up => (-1, 0),
        }
    }

    /// Cell reached from `(row, col)`; moves off the grid stay in place.
    pub fn apply(self, row: usize, col: usize, rows: usize, cols: usize) -> (usize, usize) {
        let (dr, dc) = self.delta();
        let r = row as isize + dr;
        let c = col as isize + dc;
        if r < 0 || c < 0 || r >= rows as isize || c >= cols as isize {
            (row, col)
        } else {
            (r as usize, c as usize)
        }
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    /// Empirical next-state frequencies for `(s, a)` from `n` env steps.
    pub fn empirical_row<D: DiscreteDynamics>(env: &mut DiscreteEnv<D>, s: usize, a: usize, n: usize) -> Vec<f64> {
        let count = match env.spec().state_kind {
            StateKind::Discrete { count } => count,
            _ => unreachable!(),
        };
        let mut freq = vec![0.0; count];
        for _ in 0..n {
            env.set_state(s);
            let obs = env.step(a).unwrap();
            freq[obs.state.index().unwrap()] += 1.0;
        }
        freq.iter_mut().for_each(|f| *f /= n as f64);
        freq
    }
}
