//! Car on a narrow road through a swamp, pushed around by a storm.
//!
//! Positions run from -12 to 12: the road is -10..=10 and two swamp cells lie
//! on each side. Actions steer by -2, -1, +1, +2 cells. In the swamp, steering
//! toward the road gets the car back to the road edge with probability 0.9
//! (strong) or 0.5 (mild). After steering, the storm shifts the car by -1 or
//! +1 cell, each with probability `r`.

use super::{check_range, DiscreteDynamics, EnvError, EnvName, EnvSpec, Outcome, StateKind};

pub const ROAD_HALF_WIDTH: i64 = 10;
pub const SWAMP_WIDTH: i64 = 2;
const EDGE: i64 = ROAD_HALF_WIDTH + SWAMP_WIDTH;
const ROAD_REWARD: f64 = 1.0;
const SWAMP_REWARD: f64 = -10.0;
const STRONG_RECOVERY: f64 = 0.9;
const MILD_RECOVERY: f64 = 0.5;
const STEER: [i64; 4] = [-2, -1, 1, 2];

#[derive(Debug, Clone)]
pub struct StormyRoadDynamics {
    spec: EnvSpec,
    storm: f64,
}

impl StormyRoadDynamics {
    pub fn new(storm: f64) -> Result<Self, EnvError> {
        check_range("stormy_road", storm, 0.0, 0.5)?;
        Ok(Self {
            spec: EnvSpec {
                name: EnvName::StormyRoad,
                randomness: storm,
                state_kind: StateKind::Discrete { count: (2 * EDGE + 1) as usize },
                action_count: 4,
                episodic: false,
                reward_range: (SWAMP_REWARD, ROAD_REWARD),
            },
            storm,
        })
    }

    pub fn position(state: usize) -> i64 {
        state as i64 - EDGE
    }

    pub fn state_of(position: i64) -> usize {
        (position.clamp(-EDGE, EDGE) + EDGE) as usize
    }

    pub fn on_road(state: usize) -> bool {
        Self::position(state).abs() <= ROAD_HALF_WIDTH
    }

    /// Positions after steering, before the storm, with probabilities.
    fn steer(position: i64, action: usize) -> Vec<(i64, f64)> {
        let shift = STEER[action];
        if position.abs() <= ROAD_HALF_WIDTH {
            return vec![(position + shift, 1.0)];
        }
        let toward = shift.signum() == -position.signum();
        if !toward {
            return vec![(position + shift, 1.0)];
        }
        let recovery = if shift.abs() == 2 { STRONG_RECOVERY } else { MILD_RECOVERY };
        vec![(ROAD_HALF_WIDTH * position.signum(), recovery), (position, 1.0 - recovery)]
    }
}

impl DiscreteDynamics for StormyRoadDynamics {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn initial_state(&self) -> usize {
        Self::state_of(0)
    }

    fn outcomes(&self, state: usize, action: usize) -> Vec<Outcome> {
        let mut out = Vec::new();
        for (pos, p) in Self::steer(Self::position(state), action) {
            for (shift, q) in [(-1, self.storm), (0, 1.0 - 2.0 * self.storm), (1, self.storm)] {
                if p * q == 0.0 {
                    continue;
                }
                let next = Self::state_of(pos + shift);
                let reward = if Self::on_road(next) { ROAD_REWARD } else { SWAMP_REWARD };
                out.push(Outcome { next, reward, terminated: false, probability: p * q });
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::test_support::empirical_row;
    use crate::envs::{DiscreteEnv, Environment, State};
    use crate::mdp::{greedy_policy, value_iteration, TieBreak};

    #[test]
    fn has_25_positions() {
        let d = StormyRoadDynamics::new(0.1).unwrap();
        assert_eq!(d.spec().state_kind, StateKind::Discrete { count: 25 });
        assert!(StormyRoadDynamics::new(0.6).is_err());
    }

    #[test]
    fn calm_mild_right_moves_one_cell() {
        let mut env = DiscreteEnv::new(StormyRoadDynamics::new(0.0).unwrap());
        env.reset();
        let obs = env.step(2).unwrap();
        assert_eq!(obs.state, State::Discrete(StormyRoadDynamics::state_of(1)));
        assert_eq!(obs.reward, 1.0);
    }

    #[test]
    fn storm_shift_distribution() {
        let d = StormyRoadDynamics::new(0.15).unwrap();
        let probs: Vec<f64> = d.outcomes(d.initial_state(), 2).iter().map(|o| o.probability).collect();
        assert_eq!(probs.len(), 3);
        for (got, want) in probs.iter().zip([0.15, 0.70, 0.15]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn swamp_recovery_odds() {
        let d = StormyRoadDynamics::new(0.0).unwrap();
        let swamp = StormyRoadDynamics::state_of(11);
        let back = |a| -> f64 {
            d.outcomes(swamp, a).iter().filter(|o| StormyRoadDynamics::on_road(o.next)).map(|o| o.probability).sum()
        };
        assert!((back(0) - 0.9).abs() < 1e-12);
        assert!((back(1) - 0.5).abs() < 1e-12);
        assert_eq!(back(2), 0.0);
        assert_eq!(back(3), 0.0);
    }

    #[test]
    fn optimal_policy_stays_on_road() {
        let mut env = DiscreteEnv::new(StormyRoadDynamics::new(0.1).unwrap());
        let mdp = env.as_tabular().unwrap();
        let policy = greedy_policy(&value_iteration(&mdp, 1e-9).unwrap(), TieBreak::default());
        env.seed(1);
        let mut s = env.reset().index().unwrap();
        let mut on_road = 0;
        for _ in 0..10_000 {
            s = env.step(policy[s]).unwrap().state.index().unwrap();
            on_road += StormyRoadDynamics::on_road(s) as usize;
        }
        assert!(on_road as f64 >= 0.99 * 10_000.0, "on road {on_road}");
    }

    #[test]
    fn empirical_frequencies_match_export() {
        let mut env = DiscreteEnv::new(StormyRoadDynamics::new(0.15).unwrap());
        env.seed(2);
        let mdp = env.as_tabular().unwrap();
        for (s, a) in [(12, 3), (1, 3), (23, 1)] {
            let freq = empirical_row(&mut env, s, a, 100_000);
            for (n, f) in freq.iter().enumerate() {
                assert!((f - mdp.prob(s, a, n)).abs() < 0.01);
            }
        }
    }
}
