//! Interleaved collection and training in the delayed environment.
//!
//! Each controller step picks an action (ε-greedy around the configured
//! method), drains the non-delayed transitions the wrapper reconstructed, and
//! after a warmup performs one learning update. The frozen policy is
//! evaluated periodically on a separately seeded environment and the best
//! snapshot is kept as the run's checkpoint.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::delay::{AugmentedState, DelayError, DelayedEnv, QueueInit, TransitionRecord};
use crate::envs::{make_env, EnvError, EnvName, EnvSpec, State, StateKind};
use crate::mdp::{AugmentedCodec, MdpError};
use crate::models::{DynamicsModel, GaussianModel, GaussianModelConfig, ModelError, TabularModel};
use crate::nn::Mlp;
use crate::policies::{
    amdp_select, delayed_q_select, smbs_select, PolicyError, SmbsConfig, DEFAULT_ALPHA, DEFAULT_SAMPLES, DEFAULT_TIE_TOL,
};
use crate::qlearn::{
    AugmentedQFunction, AugmentedTabularQ, DqnAgent, DqnConfig, Encoder, EpsilonSchedule, Experience, QError, QFunction,
    ReplayBuffer, TabularQ,
};

/// Largest augmented table the tabular AMDP learner will allocate.
const AUGMENTED_TABLE_CAP: usize = 1 << 22;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Delay(#[from] DelayError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Q(#[from] QError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error("checkpoint does not fit this configuration: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

/// Delayed-control method being trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Smbs,
    DelayedQ,
    Amdp,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Smbs, Method::DelayedQ, Method::Amdp];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Smbs => "smbs",
            Method::DelayedQ => "delayed_q",
            Method::Amdp => "amdp",
        }
    }

    /// Plans through a dynamics model (as opposed to learning over augmented states).
    pub fn is_planning(&self) -> bool {
        !matches!(self, Method::Amdp)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| TrainError::Config(format!("unknown method `{s}` (expected smbs, delayed_q or amdp)")))
    }
}

/// Q-function representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QLearner {
    #[default]
    Ddqn,
    /// Lookup table updated from replay; discrete environments only.
    Tabular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub env: EnvName,
    pub randomness: f64,
    pub delay: usize,
    pub method: Method,
    /// Controller steps of training.
    pub steps: u64,
    /// Rollouts per SMBS decision.
    pub samples: usize,
    pub alpha: f64,
    pub tie_tol: f64,
    pub seed: u64,
    pub learner: QLearner,
    pub dqn: DqnConfig,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of training over which ε is annealed.
    pub epsilon_fraction: f64,
    /// Uniform-random steps before the first update.
    pub warmup: u64,
    /// Pseudo-count of the tabular model.
    pub model_smoothing: f64,
    pub model_batch: usize,
    pub gaussian: GaussianModelConfig,
    pub eval_period: u64,
    pub eval_steps: u64,
    pub final_eval_steps: u64,
    pub queue_init: QueueInit,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            env: EnvName::FrozenLake4,
            randomness: 0.0,
            delay: 1,
            method: Method::Smbs,
            steps: 100_000,
            samples: DEFAULT_SAMPLES,
            alpha: DEFAULT_ALPHA,
            tie_tol: DEFAULT_TIE_TOL,
            seed: 0,
            learner: QLearner::Ddqn,
            dqn: DqnConfig::default(),
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_fraction: 0.5,
            warmup: 1000,
            model_smoothing: 0.0,
            model_batch: 64,
            gaussian: GaussianModelConfig::default(),
            eval_period: 2000,
            eval_steps: 2000,
            final_eval_steps: 10_000,
            queue_init: QueueInit::Uniform,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: &str| Err(TrainError::Config(msg.to_string()));
        if self.steps == 0 {
            return bad("steps must be positive");
        }
        if self.eval_period == 0 || self.eval_steps == 0 || self.final_eval_steps == 0 {
            return bad("evaluation period and lengths must be positive");
        }
        if self.method == Method::Smbs && self.samples == 0 {
            return bad("SMBS needs at least one sample");
        }
        if !(self.alpha >= 0.0) || !(self.tie_tol >= 0.0) {
            return bad("alpha and tie tolerance must be nonnegative");
        }
        let eps_ok = |e: f64| (0.0..=1.0).contains(&e);
        if !eps_ok(self.epsilon_start) || !eps_ok(self.epsilon_end) || !(0.0..=1.0).contains(&self.epsilon_fraction) {
            return bad("epsilon settings must lie in [0, 1]");
        }
        if self.dqn.batch_size == 0 || self.model_batch == 0 || self.dqn.replay_capacity == 0 {
            return bad("batch sizes and replay capacity must be positive");
        }
        if !(self.model_smoothing >= 0.0) {
            return bad("model smoothing must be nonnegative");
        }
        if self.learner == QLearner::Tabular && !self.env.is_discrete() {
            return bad("the tabular learner needs a discrete environment");
        }
        if let QueueInit::Constant(a) = self.queue_init {
            let count = make_env(self.env, self.randomness)?.spec().action_count;
            if a >= count {
                return bad("constant queue action out of range");
            }
        }
        make_env(self.env, self.randomness)?;
        Ok(())
    }

    pub fn smbs_config(&self) -> SmbsConfig {
        SmbsConfig { samples: self.samples, alpha: self.alpha, tie_tol: self.tie_tol, keep_targets: false }
    }

    pub fn epsilon_schedule(&self) -> EpsilonSchedule {
        EpsilonSchedule {
            start: self.epsilon_start,
            end: self.epsilon_end,
            steps: (self.steps as f64 * self.epsilon_fraction).round() as u64,
        }
    }

    /// Seed of the periodic evaluation environment.
    pub fn eval_seed(&self) -> u64 {
        derive_seed(self.seed, 1)
    }

    /// Seed of the final evaluation of the best checkpoint.
    pub fn final_seed(&self) -> u64 {
        derive_seed(self.seed, 2)
    }

    fn agent_seed(&self) -> u64 {
        derive_seed(self.seed, 3)
    }

    pub fn delayed_env(&self, seed: u64) -> Result<DelayedEnv, TrainError> {
        let mut env = DelayedEnv::wrap(make_env(self.env, self.randomness)?, self.delay, self.queue_init);
        env.seed(seed);
        Ok(env)
    }
}

/// Independent stream `stream` of a run seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Chooses an action for an augmented state.
pub trait Controller {
    fn act(&self, i: &AugmentedState, rng: &mut dyn RngCore) -> Result<usize, TrainError>;
}

/// SMBS or Delayed-Q over a base-state Q-function and a dynamics model.
pub struct PlanningController<'a> {
    pub method: Method,
    pub q: &'a dyn QFunction,
    pub model: &'a dyn DynamicsModel,
    pub smbs: SmbsConfig,
}

impl Controller for PlanningController<'_> {
    fn act(&self, i: &AugmentedState, rng: &mut dyn RngCore) -> Result<usize, TrainError> {
        Ok(match self.method {
            Method::Smbs => smbs_select(self.q, self.model, i, &self.smbs, rng)?.0,
            Method::DelayedQ => delayed_q_select(self.q, self.model, i, self.smbs.tie_tol)?.0,
            Method::Amdp => return Err(TrainError::Config("AMDP does not plan through a model".into())),
        })
    }
}

/// Greedy action of an augmented-state Q-function.
pub struct AugmentedController<'a> {
    pub q: &'a dyn AugmentedQFunction,
    pub tie_tol: f64,
}

impl Controller for AugmentedController<'_> {
    fn act(&self, i: &AugmentedState, _rng: &mut dyn RngCore) -> Result<usize, TrainError> {
        Ok(amdp_select(self.q, i, self.tie_tol)?.0)
    }
}

/// Frozen Q-function of a run.
#[derive(Debug, Clone, PartialEq)]
pub enum QSnapshot {
    Network(DqnAgent),
    Table(TabularQ),
    AugmentedTable(AugmentedTabularQ),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSnapshot {
    Tabular(TabularModel),
    Gaussian(GaussianModel),
}

impl ModelSnapshot {
    fn as_dynamics(&self) -> &dyn DynamicsModel {
        match self {
            ModelSnapshot::Tabular(m) => m,
            ModelSnapshot::Gaussian(m) => m,
        }
    }

    fn to_text(&self) -> String {
        match self {
            ModelSnapshot::Tabular(m) => m.to_text(),
            ModelSnapshot::Gaussian(m) => m.to_text(),
        }
    }
}

/// Everything needed to replay a frozen policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub method: Method,
    pub q: QSnapshot,
    pub model: Option<ModelSnapshot>,
}

pub const Q_FILE: &str = "best_q.txt";
pub const MODEL_FILE: &str = "best_model.txt";
pub const RECORD_FILE: &str = "record.json";
pub const TIMING_FILE: &str = "timing.json";

impl Checkpoint {
    pub fn controller(&self, config: &TrainConfig) -> Result<Box<dyn Controller + '_>, TrainError> {
        if self.method != config.method {
            return Err(TrainError::Checkpoint(format!("checkpoint is {}, config is {}", self.method, config.method)));
        }
        if self.method.is_planning() {
            let model = self.model.as_ref().ok_or_else(|| TrainError::Checkpoint("planning needs a model".into()))?;
            let q: &dyn QFunction = match &self.q {
                QSnapshot::Network(agent) => agent,
                QSnapshot::Table(table) => table,
                QSnapshot::AugmentedTable(_) => return Err(TrainError::Checkpoint("augmented Q cannot plan".into())),
            };
            Ok(Box::new(PlanningController { method: self.method, q, model: model.as_dynamics(), smbs: config.smbs_config() }))
        } else {
            let q: &dyn AugmentedQFunction = match &self.q {
                QSnapshot::Network(agent) => agent,
                QSnapshot::AugmentedTable(table) => table,
                QSnapshot::Table(_) => return Err(TrainError::Checkpoint("AMDP needs an augmented Q".into())),
            };
            Ok(Box::new(AugmentedController { q, tie_tol: config.tie_tol }))
        }
    }

    /// Writes the Q snapshot (and model, if any) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), TrainError> {
        fs::create_dir_all(dir).map_err(io_error(dir))?;
        let q_text = match &self.q {
            QSnapshot::Network(agent) => agent.online.to_text(),
            QSnapshot::Table(t) => t.to_text(),
            QSnapshot::AugmentedTable(t) => t.table.to_text(),
        };
        let path = dir.join(Q_FILE);
        fs::write(&path, q_text).map_err(io_error(&path))?;
        if let Some(model) = &self.model {
            let path = dir.join(MODEL_FILE);
            fs::write(&path, model.to_text()).map_err(io_error(&path))?;
        }
        Ok(())
    }

    /// Reads a checkpoint written by [`Checkpoint::save`] for `config`.
    pub fn load(dir: &Path, config: &TrainConfig) -> Result<Self, TrainError> {
        let spec = make_env(config.env, config.randomness)?.spec().clone();
        let path = dir.join(Q_FILE);
        let q_text = fs::read_to_string(&path).map_err(io_error(&path))?;
        let q = match (config.learner, config.method.is_planning()) {
            (QLearner::Ddqn, _) => {
                let net = Mlp::from_text(&q_text).map_err(QError::from)?;
                let encoder = q_encoder(&spec, config.method, config.delay);
                if net.input_dim() != encoder.dim() || net.output_dim() != spec.action_count {
                    return Err(TrainError::Checkpoint("network shape does not match the environment".into()));
                }
                QSnapshot::Network(DqnAgent::from_networks(net.clone(), net, encoder, &config.dqn))
            }
            (QLearner::Tabular, true) => QSnapshot::Table(TabularQ::from_text(&q_text)?),
            (QLearner::Tabular, false) => {
                let table = TabularQ::from_text(&q_text)?;
                QSnapshot::AugmentedTable(AugmentedTabularQ { table, codec: augmented_codec(&spec, config.delay)? })
            }
        };
        let model = if config.method.is_planning() {
            let path = dir.join(MODEL_FILE);
            let text = fs::read_to_string(&path).map_err(io_error(&path))?;
            Some(match spec.state_kind {
                StateKind::Discrete { .. } => ModelSnapshot::Tabular(TabularModel::from_text(&text)?.with_uniform_fallback(true)),
                StateKind::Continuous { .. } => ModelSnapshot::Gaussian(GaussianModel::from_text(&text, config.gaussian.adam)?),
            })
        } else {
            None
        };
        Ok(Checkpoint { method: config.method, q, model })
    }
}

fn q_encoder(spec: &EnvSpec, method: Method, delay: usize) -> Encoder {
    if method.is_planning() {
        Encoder::for_state_kind(&spec.state_kind)
    } else {
        Encoder::augmented(&spec.state_kind, spec.action_count, delay)
    }
}

fn augmented_codec(spec: &EnvSpec, delay: usize) -> Result<AugmentedCodec, TrainError> {
    match spec.state_kind {
        StateKind::Discrete { count } => Ok(AugmentedCodec::new(count, spec.action_count, delay, AUGMENTED_TABLE_CAP)?),
        StateKind::Continuous { .. } => Err(TrainError::Config("augmented tables need a discrete environment".into())),
    }
}

/// Outcome of running a controller for a number of steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    /// Controller steps taken.
    pub steps: u64,
    /// Environment transitions observed (priming included).
    pub transitions: u64,
    pub total_reward: f64,
    /// Reward per observed transition.
    pub average_reward: f64,
    /// Returns of the episodes completed within the horizon.
    pub episode_returns: Vec<f64>,
    pub return_mean: f64,
    /// Sample variance of the episode returns (0 with fewer than two).
    pub return_variance: f64,
    /// Performance measure used to rank checkpoints and runs; see [`Metric`].
    pub score: f64,
    /// True states visited in each completed episode, when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paths: Option<Vec<Vec<State>>>,
}

/// Mean and sample variance (denominator n−1, 0 below two values).
pub fn mean_and_variance(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// How an evaluation is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Reward per observed transition.
    AverageReward,
    /// Mean return of completed episodes, or the running return when none
    /// completed. Used when every step pays the same reward, since the
    /// per-step average is then constant.
    EpisodeReturn,
}

impl Metric {
    pub fn for_spec(spec: &EnvSpec) -> Self {
        if spec.episodic && spec.reward_range.0 == spec.reward_range.1 {
            Metric::EpisodeReturn
        } else {
            Metric::AverageReward
        }
    }
}

/// When [`run_controller`] stops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Horizon {
    /// This many controller steps.
    Steps(u64),
    /// This many completed episodes, giving up after `max_steps` steps.
    Episodes { episodes: usize, max_steps: u64 },
}

/// Runs `controller` greedily until `horizon`, restarting finished episodes.
/// Rewards are counted from the reconstructed transitions, so rewards of
/// actions still in flight at the end are excluded along with their steps.
pub fn run_controller(
    env: &mut DelayedEnv,
    controller: &dyn Controller,
    horizon: Horizon,
    rng: &mut dyn RngCore,
    keep_paths: bool,
) -> Result<EvalStats, TrainError> {
    let max_steps = match horizon {
        Horizon::Steps(n) => n,
        Horizon::Episodes { max_steps, .. } => max_steps,
    };
    let mut i = env.reset()?;
    let mut steps = 0u64;
    let mut transitions = 0u64;
    let mut total = 0.0;
    let mut returns = Vec::new();
    let mut episode_return = 0.0;
    let mut path: Vec<State> = Vec::new();
    let mut paths = Vec::new();
    while steps < max_steps {
        if let Horizon::Episodes { episodes, .. } = horizon {
            if returns.len() >= episodes {
                break;
            }
        }
        if env.is_done() {
            i = env.reset()?;
        }
        let a = controller.act(&i, rng)?;
        let step = env.step(a)?;
        steps += 1;
        for rec in env.drain_transitions() {
            transitions += 1;
            total += rec.reward;
            episode_return += rec.reward;
            if keep_paths {
                path.push(rec.s);
            }
        }
        if step.done {
            returns.push(episode_return);
            episode_return = 0.0;
            if keep_paths {
                paths.push(std::mem::take(&mut path));
            }
        }
        i = step.state;
    }
    let (return_mean, return_variance) = mean_and_variance(&returns);
    let average_reward = if transitions > 0 { total / transitions as f64 } else { 0.0 };
    let score = match Metric::for_spec(env.spec()) {
        Metric::AverageReward => average_reward,
        Metric::EpisodeReturn if returns.is_empty() => episode_return,
        Metric::EpisodeReturn => return_mean,
    };
    Ok(EvalStats {
        steps,
        transitions,
        total_reward: total,
        average_reward,
        episode_returns: returns,
        return_mean,
        return_variance,
        score,
        paths: keep_paths.then_some(paths),
    })
}

/// Greedy evaluation of a checkpoint on a fresh environment seeded with `seed`.
pub fn evaluate(checkpoint: &Checkpoint, config: &TrainConfig, steps: u64, seed: u64) -> Result<EvalStats, TrainError> {
    let controller = checkpoint.controller(config)?;
    let mut env = config.delayed_env(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 7));
    run_controller(&mut env, controller.as_ref(), Horizon::Steps(steps), &mut rng, false)
}

enum QState {
    Dqn { agent: DqnAgent, replay: ReplayBuffer<Experience<State>> },
    DqnAugmented { agent: DqnAgent, replay: ReplayBuffer<Experience<AugmentedState>> },
    Table { q: TabularQ, visits: Vec<u64>, replay: ReplayBuffer<Experience<usize>> },
    AugmentedTable { q: AugmentedTabularQ, visits: Vec<u64>, replay: ReplayBuffer<Experience<usize>> },
}

enum ModelState {
    Tabular(TabularModel),
    Gaussian { model: GaussianModel, replay: ReplayBuffer<TransitionRecord> },
}

/// Step size of the tabular learner after `n` updates of a pair. Decays like
/// 1/n but stays near one for the first 1/(1−γ) updates.
fn tabular_step_size(n: u64, discount: f64) -> f64 {
    1.0 / (1.0 + (1.0 - discount) * n as f64)
}

fn tabular_sweep(
    q: &mut TabularQ,
    visits: &mut [u64],
    replay: &ReplayBuffer<Experience<usize>>,
    batch: usize,
    discount: f64,
    rng: &mut dyn RngCore,
) -> Result<(), TrainError> {
    let na = q.num_actions();
    let picked: Vec<Experience<usize>> = replay.sample(batch, rng).into_iter().cloned().collect();
    for e in picked {
        let n = &mut visits[e.input * na + e.action];
        *n += 1;
        let lr = tabular_step_size(*n, discount);
        q.update_indices(e.input, e.action, e.reward, e.next, e.terminal, discount, lr)?;
    }
    Ok(())
}

struct Learner {
    q: QState,
    model: Option<ModelState>,
    discount: f64,
}

impl Learner {
    fn new(config: &TrainConfig, spec: &EnvSpec, rng: &mut ChaCha8Rng) -> Result<Self, TrainError> {
        let capacity = config.dqn.replay_capacity;
        let discount = config.dqn.discount;
        let na = spec.action_count;
        let q = match (config.learner, config.method.is_planning()) {
            (QLearner::Ddqn, true) => QState::Dqn {
                agent: DqnAgent::new(q_encoder(spec, config.method, config.delay), na, &config.dqn, rng)?,
                replay: ReplayBuffer::new(capacity),
            },
            (QLearner::Ddqn, false) => QState::DqnAugmented {
                agent: DqnAgent::new(q_encoder(spec, config.method, config.delay), na, &config.dqn, rng)?,
                replay: ReplayBuffer::new(capacity),
            },
            (QLearner::Tabular, true) => {
                let StateKind::Discrete { count } = spec.state_kind else { unreachable!("validated") };
                QState::Table { q: TabularQ::new(count, na), visits: vec![0; count * na], replay: ReplayBuffer::new(capacity) }
            }
            (QLearner::Tabular, false) => {
                let codec = augmented_codec(spec, config.delay)?;
                let table = TabularQ::new(codec.len(), na);
                QState::AugmentedTable {
                    q: AugmentedTabularQ { table, codec },
                    visits: vec![0; codec.len() * na],
                    replay: ReplayBuffer::new(capacity),
                }
            }
        };
        let model = if config.method.is_planning() {
            Some(match &spec.state_kind {
                StateKind::Discrete { count } => {
                    ModelState::Tabular(TabularModel::new(*count, na, config.model_smoothing).with_uniform_fallback(true))
                }
                StateKind::Continuous { low, high } => ModelState::Gaussian {
                    model: GaussianModel::new(low.clone(), high.clone(), na, config.gaussian, rng)?,
                    replay: ReplayBuffer::new(capacity),
                },
            })
        } else {
            None
        };
        Ok(Self { q, model, discount })
    }

    fn q_kind(&self) -> &'static str {
        match self.q {
            QState::Dqn { .. } => "ddqn",
            QState::DqnAugmented { .. } => "ddqn_augmented",
            QState::Table { .. } => "tabular",
            QState::AugmentedTable { .. } => "tabular_augmented",
        }
    }

    fn model_kind(&self) -> Option<&'static str> {
        self.model.as_ref().map(|m| match m {
            ModelState::Tabular(_) => "tabular",
            ModelState::Gaussian { .. } => "gaussian",
        })
    }

    fn snapshot(&self, method: Method) -> Checkpoint {
        let q = match &self.q {
            QState::Dqn { agent, .. } | QState::DqnAugmented { agent, .. } => QSnapshot::Network(agent.clone()),
            QState::Table { q, .. } => QSnapshot::Table(q.clone()),
            QState::AugmentedTable { q, .. } => QSnapshot::AugmentedTable(q.clone()),
        };
        let model = self.model.as_ref().map(|m| match m {
            ModelState::Tabular(t) => ModelSnapshot::Tabular(t.clone()),
            ModelState::Gaussian { model, .. } => ModelSnapshot::Gaussian(model.clone()),
        });
        Checkpoint { method, q, model }
    }

    fn act(&self, config: &TrainConfig, i: &AugmentedState, rng: &mut dyn RngCore) -> Result<usize, TrainError> {
        let model: Option<&dyn DynamicsModel> = self.model.as_ref().map(|m| match m {
            ModelState::Tabular(t) => t as &dyn DynamicsModel,
            ModelState::Gaussian { model, .. } => model as &dyn DynamicsModel,
        });
        match &self.q {
            QState::Dqn { agent, .. } => {
                PlanningController { method: config.method, q: agent, model: model.unwrap(), smbs: config.smbs_config() }.act(i, rng)
            }
            QState::Table { q, .. } => {
                PlanningController { method: config.method, q, model: model.unwrap(), smbs: config.smbs_config() }.act(i, rng)
            }
            QState::DqnAugmented { agent, .. } => AugmentedController { q: agent, tie_tol: config.tie_tol }.act(i, rng),
            QState::AugmentedTable { q, .. } => AugmentedController { q, tie_tol: config.tie_tol }.act(i, rng),
        }
    }

    /// Stores what one controller step produced. `records` are the
    /// transitions reconstructed during that step, oldest first.
    fn observe(
        &mut self,
        before: &AugmentedState,
        action: usize,
        after: &AugmentedState,
        terminated: bool,
        records: &[TransitionRecord],
    ) -> Result<(), TrainError> {
        let discount = self.discount;
        match &mut self.q {
            QState::Dqn { replay, .. } => records.iter().for_each(|r| replay.push(Experience::from(r.clone()))),
            QState::Table { replay, .. } => {
                for r in records {
                    let (s, next) = (r.s.index().ok_or(QError::Encoding)?, r.s_next.index().ok_or(QError::Encoding)?);
                    replay.push(Experience { input: s, action: r.a, reward: r.reward, next, terminal: r.terminated });
                }
            }
            QState::DqnAugmented { replay, .. } => {
                if let Some(e) = augmented_experience(before, action, after, terminated, records, discount) {
                    replay.push(e);
                }
            }
            QState::AugmentedTable { q, replay, .. } => {
                if let Some(e) = augmented_experience(before, action, after, terminated, records, discount) {
                    let input = e.input.index(&q.codec).ok_or(QError::Encoding)?;
                    let next = e.next.index(&q.codec).ok_or(QError::Encoding)?;
                    replay.push(Experience { input, action, reward: e.reward, next, terminal: e.terminal });
                }
            }
        }
        match &mut self.model {
            Some(ModelState::Tabular(m)) => m.fit_update(records)?,
            Some(ModelState::Gaussian { replay, .. }) => records.iter().for_each(|r| replay.push(r.clone())),
            None => {}
        }
        Ok(())
    }

    /// Called once when the warmup ends.
    fn finish_warmup(&mut self) -> Result<(), TrainError> {
        if let Some(ModelState::Gaussian { model, replay }) = &mut self.model {
            let seen: Vec<TransitionRecord> = replay.iter().cloned().collect();
            model.fit_normalizer(&seen)?;
        }
        Ok(())
    }

    fn update(&mut self, config: &TrainConfig, rng: &mut dyn RngCore) -> Result<(), TrainError> {
        let batch = config.dqn.batch_size;
        match &mut self.q {
            QState::Dqn { agent, replay } => {
                if !replay.is_empty() {
                    agent.update(&replay.sample(batch, rng))?;
                }
            }
            QState::DqnAugmented { agent, replay } => {
                if !replay.is_empty() {
                    agent.update(&replay.sample(batch, rng))?;
                }
            }
            QState::Table { q, visits, replay } => tabular_sweep(q, visits, replay, batch, self.discount, rng)?,
            QState::AugmentedTable { q, visits, replay } => tabular_sweep(&mut q.table, visits, replay, batch, self.discount, rng)?,
        }
        if let Some(ModelState::Gaussian { model, replay }) = &mut self.model {
            if !replay.is_empty() {
                let picked: Vec<TransitionRecord> = replay.sample(config.model_batch, rng).into_iter().cloned().collect();
                model.fit_update(&picked)?;
            }
        }
        Ok(())
    }
}

/// Augmented-state transition for one controller step. When the episode
/// terminates, the rewards of actions still in flight are folded into this
/// transition as a discounted tail and it is marked terminal. A time-limit
/// cut bootstraps from the next augmented state instead. Returns `None` if
/// the step observed nothing (cannot happen after a reset).
fn augmented_experience(
    before: &AugmentedState,
    action: usize,
    after: &AugmentedState,
    terminated: bool,
    records: &[TransitionRecord],
    discount: f64,
) -> Option<Experience<AugmentedState>> {
    let first = records.first()?;
    let reward = if terminated {
        records.iter().rev().fold(0.0, |acc, r| r.reward + discount * acc)
    } else {
        first.reward
    };
    Some(Experience { input: before.clone(), action, reward, next: after.clone(), terminal: terminated })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestCheckpoint {
    /// Training step at which the snapshot was taken.
    pub step: u64,
    /// Its periodic evaluation score (under `eval_seed`).
    pub score: f64,
    pub q_file: String,
    pub model_file: Option<String>,
}

/// Persistent summary of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub seed: u64,
    pub eval_seed: u64,
    pub final_seed: u64,
    pub q_kind: String,
    pub model_kind: Option<String>,
    pub curve: Vec<CurvePoint>,
    pub best: BestCheckpoint,
    /// Evaluation of the best checkpoint over `final_eval_steps`.
    pub final_eval: EvalStats,
    pub env_steps: u64,
    pub transitions_consumed: u64,
    /// Transitions still unobserved when training stopped.
    pub transitions_in_flight: u64,
    pub episodes_started: u64,
}

impl RunRecord {
    pub fn to_json(&self) -> Result<String, TrainError> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        Ok(serde_json::from_str(text)?)
    }
}

/// A finished run: its record, the best and last snapshots and the elapsed time.
pub struct TrainOutcome {
    pub record: RunRecord,
    pub best: Checkpoint,
    /// Learner state when training stopped.
    pub last: Checkpoint,
    pub wall_clock_secs: f64,
}

/// Trains one run in memory.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let started = Instant::now();
    let mut env = config.delayed_env(config.seed)?;
    let spec = env.spec().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.agent_seed());
    let mut learner = Learner::new(config, &spec, &mut rng)?;
    let schedule = config.epsilon_schedule();
    let mut i = env.reset()?;
    let mut episodes = 1u64;
    let mut consumed = 0u64;
    let mut curve = Vec::new();
    let mut best: Option<(u64, f64, Checkpoint)> = None;
    for t in 0..config.steps {
        if env.is_done() {
            i = env.reset()?;
            episodes += 1;
        }
        let explore = t < config.warmup || rng.random::<f64>() < schedule.value(t);
        let a = if explore { rng.random_range(0..spec.action_count) } else { learner.act(config, &i, &mut rng)? };
        let step = env.step(a)?;
        let records = env.drain_transitions();
        consumed += records.len() as u64;
        learner.observe(&i, a, &step.state, step.terminated, &records)?;
        i = step.state;
        if t + 1 == config.warmup {
            learner.finish_warmup()?;
        }
        if t >= config.warmup {
            learner.update(config, &mut rng)?;
        }
        if (t + 1) % config.eval_period == 0 {
            let snapshot = learner.snapshot(config.method);
            let stats = evaluate(&snapshot, config, config.eval_steps, config.eval_seed())?;
            curve.push(CurvePoint { step: t + 1, score: stats.score });
            if best.as_ref().is_none_or(|(_, r, _)| stats.score > *r) {
                best = Some((t + 1, stats.score, snapshot));
            }
        }
    }
    let (best_step, best_score, checkpoint) = match best {
        Some(b) => b,
        None => {
            // Training shorter than one period: the final policy is the checkpoint.
            let snapshot = learner.snapshot(config.method);
            let stats = evaluate(&snapshot, config, config.eval_steps, config.eval_seed())?;
            (config.steps, stats.score, snapshot)
        }
    };
    let final_eval = evaluate(&checkpoint, config, config.final_eval_steps, config.final_seed())?;
    let record = RunRecord {
        config: config.clone(),
        seed: config.seed,
        eval_seed: config.eval_seed(),
        final_seed: config.final_seed(),
        q_kind: learner.q_kind().to_string(),
        model_kind: learner.model_kind().map(String::from),
        curve,
        best: BestCheckpoint {
            step: best_step,
            score: best_score,
            q_file: Q_FILE.to_string(),
            model_file: checkpoint.model.as_ref().map(|_| MODEL_FILE.to_string()),
        },
        final_eval,
        env_steps: env.env_steps(),
        transitions_consumed: consumed,
        transitions_in_flight: env.in_flight() as u64,
        episodes_started: episodes,
    };
    let last = learner.snapshot(config.method);
    Ok(TrainOutcome { record, best: checkpoint, last, wall_clock_secs: started.elapsed().as_secs_f64() })
}

/// `<root>/<env>/<method>/<d>/<r>/<seed>`.
pub fn run_dir(root: &Path, config: &TrainConfig) -> PathBuf {
    root.join(config.env.as_str())
        .join(config.method.as_str())
        .join(config.delay.to_string())
        .join(config.randomness.to_string())
        .join(config.seed.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_clock_secs: f64,
}

/// Writes the record, checkpoint and timing sidecar of a finished run. The
/// record itself holds no timing so reruns reproduce it byte for byte.
pub fn save_run(dir: &Path, outcome: &TrainOutcome) -> Result<(), TrainError> {
    outcome.best.save(dir)?;
    let timing = dir.join(TIMING_FILE);
    fs::write(&timing, serde_json::to_string(&Timing { wall_clock_secs: outcome.wall_clock_secs })? + "\n")
        .map_err(io_error(&timing))?;
    // The record goes last: its presence marks the run complete.
    let path = dir.join(RECORD_FILE);
    fs::write(&path, outcome.record.to_json()?).map_err(io_error(&path))?;
    Ok(())
}

/// Record of a completed run in `dir`, if there is one for `config`.
pub fn load_record(dir: &Path, config: &TrainConfig) -> Option<RunRecord> {
    let text = fs::read_to_string(dir.join(RECORD_FILE)).ok()?;
    let record = RunRecord::from_json(&text).ok()?;
    (record.config == *config).then_some(record)
}

/// Returns the stored record for `config` under `root`, training and
/// persisting it first if it is missing. The flag tells whether training ran.
pub fn train_or_load(root: &Path, config: &TrainConfig) -> Result<(RunRecord, bool), TrainError> {
    let dir = run_dir(root, config);
    if let Some(record) = load_record(&dir, config) {
        return Ok((record, false));
    }
    let outcome = train(config)?;
    save_run(&dir, &outcome)?;
    Ok((outcome.record, true))
}

/// Top-k summary of a seed group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub env: EnvName,
    pub randomness: f64,
    pub delay: usize,
    pub method: Method,
    pub num_seeds: usize,
    pub top_k: usize,
    /// Seeds of the runs that entered the mean, best first.
    pub seeds: Vec<u64>,
    pub mean: f64,
    pub stderr: f64,
    /// Fewer than `top_k` runs succeeded.
    pub partial: bool,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedGroup {
    pub records: Vec<RunRecord>,
    pub aggregate: Aggregate,
}

/// Mean and standard error of the `top_k` largest values; ties keep input
/// order. Returns the chosen indices too.
pub fn top_k_mean(values: &[f64], top_k: usize) -> (f64, f64, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    order.truncate(top_k);
    let picked: Vec<f64> = order.iter().map(|&k| values[k]).collect();
    let (mean, var) = mean_and_variance(&picked);
    let stderr = if picked.is_empty() { 0.0 } else { (var / picked.len() as f64).sqrt() };
    (mean, stderr, order)
}

/// Seeds `config.seed, config.seed + 1, …` of a group.
pub fn group_configs(config: &TrainConfig, num_seeds: usize) -> Vec<TrainConfig> {
    (0..num_seeds as u64).map(|k| TrainConfig { seed: config.seed + k, ..config.clone() }).collect()
}

/// Trains `num_seeds` runs (up to `parallelism` at a time) and aggregates the
/// `top_k` best by final evaluation score. With `root`, runs are persisted
/// and completed ones are loaded instead of retrained.
pub fn run_seed_group(
    config: &TrainConfig,
    num_seeds: usize,
    top_k: usize,
    parallelism: usize,
    root: Option<&Path>,
) -> Result<SeedGroup, TrainError> {
    if top_k == 0 || num_seeds < top_k {
        return Err(TrainError::Config(format!("need 0 < top_k ≤ num_seeds, got top_k={top_k}, num_seeds={num_seeds}")));
    }
    let configs = group_configs(config, num_seeds);
    let results = run_many(&configs, parallelism, |c| match root {
        Some(root) => train_or_load(root, c).map(|(r, _)| r),
        None => train(c).map(|o| o.record),
    });
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (c, result) in configs.iter().zip(results) {
        match result {
            Ok(r) => records.push(r),
            Err(e) => failures.push(format!("seed {}: {e}", c.seed)),
        }
    }
    if records.is_empty() {
        return Err(TrainError::Config(format!("every run failed: {}", failures.join("; "))));
    }
    let aggregate = aggregate_records(&records, top_k, num_seeds, failures)?;
    Ok(SeedGroup { records, aggregate })
}

/// Top-k aggregation over the records of one (env, r, d, method) cell.
pub fn aggregate_records(records: &[RunRecord], top_k: usize, num_seeds: usize, failures: Vec<String>) -> Result<Aggregate, TrainError> {
    let first = records.first().ok_or_else(|| TrainError::Config("no records to aggregate".into()))?;
    let c = &first.config;
    if records.iter().any(|r| {
        r.config.env != c.env || r.config.randomness != c.randomness || r.config.delay != c.delay || r.config.method != c.method
    }) {
        return Err(TrainError::Config("records belong to different cells".into()));
    }
    let values: Vec<f64> = records.iter().map(|r| r.final_eval.score).collect();
    let (mean, stderr, order) = top_k_mean(&values, top_k);
    Ok(Aggregate {
        env: c.env,
        randomness: c.randomness,
        delay: c.delay,
        method: c.method,
        num_seeds,
        top_k,
        seeds: order.iter().map(|&k| records[k].seed).collect(),
        mean,
        stderr,
        partial: records.len() < top_k || !failures.is_empty(),
        failures,
    })
}

/// Applies `job` to every item with up to `parallelism` worker threads;
/// results come back in input order.
pub fn run_many<I: Sync, O: Send>(items: &[I], parallelism: usize, job: impl Fn(&I) -> O + Sync) -> Vec<O> {
    let workers = parallelism.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(&job).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<O>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                if k >= items.len() {
                    break;
                }
                let out = job(&items[k]);
                slots.lock().expect("no worker panicked")[k] = Some(out);
            });
        }
    });
    slots.into_inner().expect("no worker panicked").into_iter().map(|o| o.expect("every item ran")).collect()
}
