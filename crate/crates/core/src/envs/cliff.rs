//! 4×12 cliff walk where every move may slip one extra cell toward the cliff.

use super::{check_range, DiscreteDynamics, EnvError, EnvName, EnvSpec, Move, Outcome, StateKind};

pub const CLIFF_ROWS: usize = 4;
pub const CLIFF_COLS: usize = 12;
const STEP_REWARD: f64 = -1.0;
const FALL_REWARD: f64 = -100.0;

#[derive(Debug, Clone)]
pub struct CliffDynamics {
    spec: EnvSpec,
    slip: f64,
}

impl CliffDynamics {
    pub fn new(slip: f64) -> Result<Self, EnvError> {
        check_range("cliff", slip, 0.0, 0.5)?;
        Ok(Self {
            spec: EnvSpec {
                name: EnvName::Cliff,
                randomness: slip,
                state_kind: StateKind::Discrete { count: CLIFF_ROWS * CLIFF_COLS },
                action_count: 4,
                episodic: true,
                reward_range: (FALL_REWARD, STEP_REWARD),
            },
            slip,
        })
    }

    pub fn start() -> usize {
        (CLIFF_ROWS - 1) * CLIFF_COLS
    }

    pub fn goal() -> usize {
        CLIFF_ROWS * CLIFF_COLS - 1
    }

    pub fn is_cliff(state: usize) -> bool {
        state / CLIFF_COLS == CLIFF_ROWS - 1 && (1..CLIFF_COLS - 1).contains(&(state % CLIFF_COLS))
    }

    /// Rows between `state` and the cliff row (0 on the bottom row).
    pub fn distance_to_cliff(state: usize) -> usize {
        CLIFF_ROWS - 1 - state / CLIFF_COLS
    }

    fn step_cell(state: usize, mv: Move) -> usize {
        let (r, c) = mv.apply(state / CLIFF_COLS, state % CLIFF_COLS, CLIFF_ROWS, CLIFF_COLS);
        r * CLIFF_COLS + c
    }

    fn resolve(cell: usize, probability: f64) -> Outcome {
        if Self::is_cliff(cell) {
            Outcome { next: Self::start(), reward: FALL_REWARD, terminated: false, probability }
        } else {
            Outcome { next: cell, reward: STEP_REWARD, terminated: cell == Self::goal(), probability }
        }
    }
}

impl DiscreteDynamics for CliffDynamics {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn initial_state(&self) -> usize {
        Self::start()
    }

    fn outcomes(&self, state: usize, action: usize) -> Vec<Outcome> {
        if state == Self::goal() || Self::is_cliff(state) {
            return vec![Outcome { next: state, reward: 0.0, terminated: true, probability: 1.0 }];
        }
        let moved = Self::step_cell(state, Move::from_index(action));
        if Self::is_cliff(moved) || moved == Self::goal() || self.slip == 0.0 {
            return vec![Self::resolve(moved, 1.0)];
        }
        let slipped = Self::step_cell(moved, Move::Down);
        if slipped == moved {
            return vec![Self::resolve(moved, 1.0)];
        }
        vec![Self::resolve(moved, 1.0 - self.slip), Self::resolve(slipped, self.slip)]
    }

    fn terminal_states(&self) -> Vec<usize> {
        let mut out: Vec<usize> = (0..CLIFF_ROWS * CLIFF_COLS).filter(|&s| Self::is_cliff(s)).collect();
        out.push(Self::goal());
        out
    }
}
