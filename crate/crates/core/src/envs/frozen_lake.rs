//! Slippery grid lake, run as a continuing task: holes and the goal send the
//! agent back to the start.

use super::{check_range, DiscreteDynamics, EnvError, EnvName, EnvSpec, Move, Outcome, StateKind};

const MAP4: [&str; 4] = ["SFFF", "FHFH", "FFFH", "HFFG"];
const MAP8: [&str; 8] = [
    "SFFFFFFF", "FFFFFFFF", "FFFHFFFF", "FFFFFHFF", "FFFHFFFF", "FHHFFFHF", "FHFFHFHF", "FFFHFFFG",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LakeMap {
    Four,
    Eight,
}

impl LakeMap {
    fn rows(self) -> &'static [&'static str] {
        match self {
            LakeMap::Four => &MAP4,
            LakeMap::Eight => &MAP8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FrozenLakeDynamics {
    spec: EnvSpec,
    size: usize,
    cells: Vec<u8>,
    slip: f64,
}

impl FrozenLakeDynamics {
    /// `slip` is the probability of each perpendicular move; the intended
    /// move succeeds with `1 - 2·slip`.
    pub fn new(map: LakeMap, slip: f64) -> Result<Self, EnvError> {
        let name = match map {
            LakeMap::Four => EnvName::FrozenLake4,
            LakeMap::Eight => EnvName::FrozenLake8,
        };
        check_range(name.as_str(), slip, 0.0, 1.0 / 3.0)?;
        let rows = map.rows();
        let size = rows.len();
        let cells: Vec<u8> = rows.iter().flat_map(|r| r.bytes()).collect();
        Ok(Self {
            spec: EnvSpec {
                name,
                randomness: slip,
                state_kind: StateKind::Discrete { count: size * size },
                action_count: 4,
                episodic: false,
                reward_range: (0.0, 1.0),
            },
            size,
            cells,
            slip,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn cell(&self, state: usize) -> char {
        self.cells[state] as char
    }

    pub fn start(&self) -> usize {
        self.cells.iter().position(|&c| c == b'S').unwrap()
    }

    pub fn goal(&self) -> usize {
        self.cells.iter().position(|&c| c == b'G').unwrap()
    }

    fn landing(&self, state: usize, mv: Move) -> Outcome {
        let (r, c) = mv.apply(state / self.size, state % self.size, self.size, self.size);
        let next = r * self.size + c;
        match self.cells[next] {
            b'H' => Outcome { next: self.start(), reward: 0.0, terminated: false, probability: 0.0 },
            b'G' => Outcome { next: self.start(), reward: 1.0, terminated: false, probability: 0.0 },
            _ => Outcome { next, reward: 0.0, terminated: false, probability: 0.0 },
        }
    }
}

impl DiscreteDynamics for FrozenLakeDynamics {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn initial_state(&self) -> usize {
        self.start()
    }

    fn outcomes(&self, state: usize, action: usize) -> Vec<Outcome> {
        // Holes and the goal are never occupied; treat them like the start.
        let from = match self.cells[state] {
            b'H' | b'G' => self.start(),
            _ => state,
        };
        let intended = Move::from_index(action);
        let perpendicular = [Move::from_index((action + 3) % 4), Move::from_index((action + 1) % 4)];
        let mut out = vec![Outcome { probability: 1.0 - 2.0 * self.slip, ..self.landing(from, intended) }];
        if self.slip > 0.0 {
            for mv in perpendicular {
                out.push(Outcome { probability: self.slip, ..self.landing(from, mv) });
            }
        }
        out.retain(|o| o.probability > 0.0);
        out
    }
}
