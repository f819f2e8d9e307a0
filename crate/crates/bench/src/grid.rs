//! Cross-product experiment grids and resumable sweeps.

use std::cmp::Ordering;
use std::fmt;
use std::fs;
use std::path::Path;

use delayed_rl::envs::EnvName;
use delayed_rl::trainer::{group_configs, run_many, train_or_load, Method, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::{io_error, BenchError};

/// Default delays for the classic tasks.
pub const DEFAULT_DELAYS: [usize; 3] = [5, 15, 25];

/// One (environment, randomness, delay, method) combination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub env: EnvName,
    pub randomness: f64,
    pub delay: usize,
    pub method: Method,
}

impl Cell {
    pub fn of(config: &TrainConfig) -> Self {
        Cell { env: config.env, randomness: config.randomness, delay: config.delay, method: config.method }
    }

    /// Total order: env, randomness, delay, method.
    pub fn order(&self, other: &Self) -> Ordering {
        self.env
            .cmp(&other.env)
            .then(self.randomness.total_cmp(&other.randomness))
            .then(self.delay.cmp(&other.delay))
            .then(self.method.cmp(&other.method))
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} r={} d={} {}", self.env, self.randomness, self.delay, self.method)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentGrid {
    pub envs: Vec<EnvName>,
    pub randomness: Vec<f64>,
    pub delays: Vec<usize>,
    pub methods: Vec<Method>,
    /// Seeds per cell, counted up from `base.seed`.
    pub seeds: usize,
    pub parallelism: usize,
    /// Fields shared by every run; the grid axes override theirs.
    pub base: TrainConfig,
}

impl Default for ExperimentGrid {
    fn default() -> Self {
        Self {
            envs: vec![EnvName::FrozenLake4],
            randomness: vec![0.0],
            delays: DEFAULT_DELAYS.to_vec(),
            methods: Method::ALL.to_vec(),
            seeds: 5,
            parallelism: 1,
            base: TrainConfig::default(),
        }
    }
}

impl ExperimentGrid {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = fs::read_to_string(path).map_err(io_error(path))?;
        Self::from_toml(&text).map_err(|message| BenchError::Parse { path: path.to_path_buf(), message })
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for &env in &self.envs {
            for &randomness in &self.randomness {
                for &delay in &self.delays {
                    for &method in &self.methods {
                        cells.push(Cell { env, randomness, delay, method });
                    }
                }
            }
        }
        cells
    }

    /// Every run of the grid, validated.
    pub fn expand(&self) -> Result<Vec<TrainConfig>, BenchError> {
        if self.seeds == 0 {
            return Err(BenchError::Invalid("a grid needs at least one seed".into()));
        }
        let mut configs = Vec::new();
        for cell in self.cells() {
            let config = TrainConfig {
                env: cell.env,
                randomness: cell.randomness,
                delay: cell.delay,
                method: cell.method,
                ..self.base.clone()
            };
            config.validate().map_err(|e| BenchError::Invalid(format!("{cell}: {e}")))?;
            configs.extend(group_configs(&config, self.seeds));
        }
        Ok(configs)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepReport {
    pub trained: usize,
    pub loaded: usize,
    pub failures: Vec<String>,
}

/// Runs every grid run not already complete under `root`.
pub fn run_sweep(grid: &ExperimentGrid, root: &Path) -> Result<SweepReport, BenchError> {
    let configs = grid.expand()?;
    let results = run_many(&configs, grid.parallelism, |c| train_or_load(root, c));
    let mut report = SweepReport::default();
    for (config, result) in configs.iter().zip(results) {
        match result {
            Ok((_, true)) => report.trained += 1,
            Ok((_, false)) => report.loaded += 1,
            Err(e) => report.failures.push(format!("{} seed {}: {e}", Cell::of(config), config.seed)),
        }
    }
    Ok(report)
}
