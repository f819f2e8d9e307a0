//! Control under constant observation delay: exact finite-MDP oracles,
//! benchmark environments, a delay wrapper, dynamics models, Q-learners and
//! the delayed-control policies built on top of them (stochastic sampled
//! planning, most-likely-state planning, augmented-state Q and exact
//! expectation).

pub mod delay;
pub mod envs;
pub mod mdp;
pub mod models;
pub mod nn;
pub mod policies;
pub mod qlearn;
pub mod scalar;
pub mod theory;
pub mod trainer;

pub use scalar::Scalar;

/// Double-precision MDP, the concrete type used by environments and policies.
pub type Mdp = mdp::TabularMdp<f64>;
/// Double-precision value-iteration solution.
pub type Solution = mdp::ValueSolution<f64>;
