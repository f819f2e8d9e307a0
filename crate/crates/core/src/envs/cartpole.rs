//! Cart-pole balancing with Gaussian noise on the applied force.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{check_range, EnvError, EnvName, EnvObservation, EnvSpec, Environment, State, StateKind};
use crate::mdp::TabularMdp;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CartpoleParams {
    pub gravity: f64,
    pub cart_mass: f64,
    pub pole_mass: f64,
    pub half_length: f64,
    pub force: f64,
    pub tau: f64,
    pub angle_limit: f64,
    pub position_limit: f64,
    pub max_steps: usize,
}

impl Default for CartpoleParams {
    fn default() -> Self {
        Self {
            gravity: 9.8,
            cart_mass: 1.0,
            pole_mass: 0.1,
            half_length: 0.5,
            force: 10.0,
            tau: 0.02,
            angle_limit: 12.0 * std::f64::consts::PI / 180.0,
            position_limit: 2.4,
            max_steps: 500,
        }
    }
}

// Declared state bounds: [x, x_dot, theta, theta_dot].
const LOW: [f64; 4] = [-4.8, -10.0, -0.42, -10.0];
const HIGH: [f64; 4] = [4.8, 10.0, 0.42, 10.0];

pub struct Cartpole {
    spec: EnvSpec,
    params: CartpoleParams,
    noise_std: f64,
    state: [f64; 4],
    steps: usize,
    done: bool,
    rng: ChaCha8Rng,
}

impl Cartpole {
    /// Force noise has standard deviation `r · force`.
    pub fn new(r: f64) -> Result<Self, EnvError> {
        check_range("cartpole", r, 0.0, f64::MAX)?;
        let params = CartpoleParams::default();
        Ok(Self {
            spec: EnvSpec {
                name: EnvName::Cartpole,
                randomness: r,
                state_kind: StateKind::Continuous { low: LOW.to_vec(), high: HIGH.to_vec() },
                action_count: 2,
                episodic: true,
                reward_range: (1.0, 1.0),
            },
            noise_std: r * params.force,
            params,
            state: [0.0; 4],
            steps: 0,
            done: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        })
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn params(&self) -> &CartpoleParams {
        &self.params
    }

    /// Starts an episode from an explicit state.
    pub fn reset_to(&mut self, state: [f64; 4]) -> State {
        self.state = state;
        self.steps = 0;
        self.done = false;
        State::Continuous(state.to_vec())
    }

    /// One explicit-Euler step under the given total force.
    pub fn integrate(params: &CartpoleParams, s: [f64; 4], force: f64) -> [f64; 4] {
        let [x, x_dot, theta, theta_dot] = s;
        let total_mass = params.cart_mass + params.pole_mass;
        let pole_mass_length = params.pole_mass * params.half_length;
        let (sin, cos) = theta.sin_cos();
        let temp = (force + pole_mass_length * theta_dot * theta_dot * sin) / total_mass;
        let theta_acc = (params.gravity * sin - cos * temp)
            / (params.half_length * (4.0 / 3.0 - params.pole_mass * cos * cos / total_mass));
        let x_acc = temp - pole_mass_length * theta_acc * cos / total_mass;
        [
            x + params.tau * x_dot,
            x_dot + params.tau * x_acc,
            theta + params.tau * theta_dot,
            theta_dot + params.tau * theta_acc,
        ]
    }
}

impl Environment for Cartpole {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn seed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    fn reset(&mut self) -> State {
        let mut s = [0.0; 4];
        for v in &mut s {
            *v = self.rng.random_range(-0.05..0.05);
        }
        self.reset_to(s)
    }

    fn step(&mut self, action: usize) -> Result<EnvObservation, EnvError> {
        if action >= 2 {
            return Err(EnvError::InvalidAction { action, count: 2 });
        }
        if self.done {
            return Err(EnvError::EpisodeOver);
        }
        let direction = if action == 1 { 1.0 } else { -1.0 };
        let noise = if self.noise_std > 0.0 {
            let z: f64 = self.rng.sample(StandardNormal);
            z * self.noise_std
        } else {
            0.0
        };
        let mut next = Self::integrate(&self.params, self.state, direction * self.params.force + noise);
        for (v, (lo, hi)) in next.iter_mut().zip(LOW.iter().zip(HIGH)) {
            *v = v.clamp(*lo, hi);
        }
        self.state = next;
        self.steps += 1;
        let terminated =
            next[0].abs() > self.params.position_limit || next[2].abs() > self.params.angle_limit;
        let truncated = !terminated && self.steps >= self.params.max_steps;
        self.done = terminated || truncated;
        Ok(EnvObservation { state: State::Continuous(next.to_vec()), reward: 1.0, terminated, truncated })
    }

    fn tabular(&self, _discount: f64) -> Result<TabularMdp<f64>, EnvError> {
        Err(EnvError::NotDiscrete("cartpole"))
    }

    fn state(&self) -> State {
        State::Continuous(self.state.to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn noise_scale() {
        assert_eq!(Cartpole::new(0.2).unwrap().noise_std(), 2.0);
        assert!(Cartpole::new(-0.1).is_err());
    }

    #[test]
    fn noiseless_trajectory_is_reproducible() {
        let run = || {
            let mut env = Cartpole::new(0.0).unwrap();
            env.reset_to([0.01, 0.0, -0.02, 0.0]);
            (0..30).map(|t| env.step(t % 2).unwrap().state).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn one_euler_step_by_hand() {
        // temp = 10 / 1.1; theta_acc = -temp / (0.5 * (4/3 - 0.1/1.1)).
        let temp = 10.0 / 1.1;
        let theta_acc = -temp / (0.5 * (4.0 / 3.0 - 0.1 / 1.1));
        let x_acc = temp - 0.05 * theta_acc / 1.1;
        let mut env = Cartpole::new(0.0).unwrap();
        env.reset_to([0.0; 4]);
        let s1 = env.step(1).unwrap().state.vector().unwrap().to_vec();
        assert_eq!(s1[0], 0.0);
        assert_eq!(s1[2], 0.0);
        assert_abs_diff_eq!(s1[1], 0.02 * x_acc, epsilon = 1e-15);
        assert_abs_diff_eq!(s1[3], 0.02 * theta_acc, epsilon = 1e-15);
        assert_abs_diff_eq!(s1[3], -0.292_682_926_829_268_3, epsilon = 1e-12);
        let s2 = env.step(1).unwrap().state.vector().unwrap().to_vec();
        assert_abs_diff_eq!(s2[2], 0.02 * s1[3], epsilon = 1e-15);
    }

    #[test]
    fn episode_ends_when_pole_falls() {
        let mut env = Cartpole::new(0.0).unwrap();
        env.reset_to([0.0; 4]);
        let mut steps = 0;
        loop {
            let obs = env.step(1).unwrap();
            steps += 1;
            if obs.done() {
                assert!(obs.terminated);
                break;
            }
        }
        assert!(steps < 100);
        assert_eq!(env.step(0), Err(EnvError::EpisodeOver));
    }

    #[test]
    fn states_stay_within_bounds() {
        let mut env = Cartpole::new(0.3).unwrap();
        env.seed(4);
        env.reset();
        for t in 0..20_000 {
            let obs = env.step((t / 3) % 2).unwrap();
            for (i, v) in obs.state.vector().unwrap().iter().enumerate() {
                assert!(v.is_finite() && *v >= LOW[i] && *v <= HIGH[i]);
            }
            if obs.done() {
                env.reset();
            }
        }
    }
}
