//! Puddle world on the unit square with two capsule-shaped puddles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{check_range, EnvError, EnvName, EnvObservation, EnvSpec, Environment, Move, State, StateKind};
use crate::mdp::TabularMdp;

const STEP: f64 = 0.05;
const GOAL_MARGIN: f64 = 0.05;
const PUDDLE_RADIUS: f64 = 0.1;
const PUDDLE_PENALTY: f64 = 400.0;
const MAX_STEPS: usize = 2000;
const PUDDLES: [((f64, f64), (f64, f64)); 2] = [((0.10, 0.75), (0.45, 0.75)), ((0.45, 0.40), (0.45, 0.80))];

fn distance_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Summed penetration depth into both puddles.
pub fn puddle_penalty_depth(x: f64, y: f64) -> f64 {
    PUDDLES
        .iter()
        .map(|&(a, b)| (PUDDLE_RADIUS - distance_to_segment((x, y), a, b)).max(0.0))
        .sum()
}

pub struct PuddleWorld {
    spec: EnvSpec,
    noise_std: f64,
    position: [f64; 2],
    steps: usize,
    done: bool,
    rng: ChaCha8Rng,
}

impl PuddleWorld {
    pub fn new(noise_std: f64) -> Result<Self, EnvError> {
        check_range("puddle_world", noise_std, 0.0, f64::MAX)?;
        Ok(Self {
            spec: EnvSpec {
                name: EnvName::PuddleWorld,
                randomness: noise_std,
                state_kind: StateKind::Continuous { low: vec![0.0, 0.0], high: vec![1.0, 1.0] },
                action_count: 4,
                episodic: true,
                reward_range: (-1.0 - PUDDLE_PENALTY * 2.0 * PUDDLE_RADIUS, -1.0),
            },
            noise_std,
            position: [0.0; 2],
            steps: 0,
            done: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        })
    }

    pub fn reset_to(&mut self, x: f64, y: f64) -> State {
        self.position = [x, y];
        self.steps = 0;
        self.done = false;
        State::Continuous(self.position.to_vec())
    }

    pub fn at_goal(x: f64, y: f64) -> bool {
        x >= 1.0 - GOAL_MARGIN && y >= 1.0 - GOAL_MARGIN
    }
}

impl Environment for PuddleWorld {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn seed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    /// Uniform start outside the goal region.
    fn reset(&mut self) -> State {
        loop {
            let x: f64 = self.rng.random();
            let y: f64 = self.rng.random();
            if !Self::at_goal(x, y) {
                return self.reset_to(x, y);
            }
        }
    }

    fn step(&mut self, action: usize) -> Result<EnvObservation, EnvError> {
        if action >= 4 {
            return Err(EnvError::InvalidAction { action, count: 4 });
        }
        if self.done {
            return Err(EnvError::EpisodeOver);
        }
        // Move deltas are (row, col); y grows upward.
        let (dr, dc) = Move::from_index(action).delta();
        let mut next = [self.position[0] + STEP * dc as f64, self.position[1] - STEP * dr as f64];
        if self.noise_std > 0.0 {
            for v in &mut next {
                let z: f64 = self.rng.sample(StandardNormal);
                *v += z * self.noise_std;
            }
        }
        for v in &mut next {
            *v = v.clamp(0.0, 1.0);
        }
        self.position = next;
        self.steps += 1;
        let reward = -1.0 - PUDDLE_PENALTY * puddle_penalty_depth(next[0], next[1]);
        let terminated = Self::at_goal(next[0], next[1]);
        let truncated = !terminated && self.steps >= MAX_STEPS;
        self.done = terminated || truncated;
        Ok(EnvObservation { state: State::Continuous(next.to_vec()), reward, terminated, truncated })
    }

    fn tabular(&self, _discount: f64) -> Result<TabularMdp<f64>, EnvError> {
        Err(EnvError::NotDiscrete("puddle_world"))
    }

    fn state(&self) -> State {
        State::Continuous(self.position.to_vec())
    }
}
