//! Risk-preference study on the slippery cliff walk: SMBS with the exact
//! values and model, run over a grid of α at two slip levels.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use delayed_rl::delay::{DelayedEnv, QueueInit};
use delayed_rl::envs::{make_env, CliffDynamics, EnvName, CLIFF_COLS, CLIFF_ROWS};
use delayed_rl::mdp::value_iteration;
use delayed_rl::policies::SmbsConfig;
use delayed_rl::trainer::{run_controller, run_many, Horizon, Method, PlanningController};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::stats::{exceeds_by, summarize, Summary};
use crate::{io_error, BenchError};

pub const ALPHA_GRID: [f64; 6] = [0.0, 0.1, 0.25, 0.5, 0.75, 1.0];
/// Action that primes the initial queue: moving up, away from the cliff.
pub const UP: usize = 3;
pub const STUDY_DIR: &str = "cliff_study";
pub const STUDY_FILE: &str = "study.json";
pub const PATHS_SCHEMA: &str = "# schema: cliff_paths v1";
pub const PATHS_HEADER: [&str; 7] = ["slip", "alpha", "row", "col", "mean_occupancy", "distance_to_cliff", "column_mean_distance"];
pub const SWEEP_SCHEMA: &str = "# schema: alpha_sweep v1";
pub const SWEEP_HEADER: [&str; 9] =
    ["slip", "alpha", "episodes", "mean_return", "return_std", "stderr", "std_stderr", "mean_distance", "mean_length"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliffStudyConfig {
    pub slips: Vec<f64>,
    pub alphas: Vec<f64>,
    pub delay: usize,
    pub samples: usize,
    pub episodes: usize,
    /// Cap on total steps over all episodes.
    pub max_steps: u64,
    /// Action filling the queue at reset; `None` draws uniformly.
    pub prime_action: Option<usize>,
    pub env_seed: u64,
    pub rng_seed: u64,
    pub parallelism: usize,
}

impl Default for CliffStudyConfig {
    fn default() -> Self {
        Self {
            slips: vec![0.05, 0.2],
            alphas: ALPHA_GRID.to_vec(),
            delay: 3,
            samples: 200,
            episodes: 500,
            max_steps: 100_000,
            prime_action: Some(UP),
            env_seed: 1,
            rng_seed: 2,
            parallelism: 1,
        }
    }
}

/// Evaluation traces of one (slip, α) setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CliffRun {
    pub slip: f64,
    pub alpha: f64,
    pub returns: Vec<f64>,
    /// Cell each move of a completed episode was taken from.
    pub paths: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CliffStudy {
    pub config: CliffStudyConfig,
    pub runs: Vec<CliffRun>,
}

/// Plays `config.episodes` episodes for every (slip, α). All α share the
/// environment and sampling seeds, so differences come from the policy.
pub fn run_cliff_study(config: &CliffStudyConfig) -> Result<CliffStudy, BenchError> {
    if config.episodes == 0 || config.samples == 0 {
        return Err(BenchError::Invalid("episodes and samples must be positive".into()));
    }
    if config.alphas.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
        return Err(BenchError::Invalid("α must be finite and non-negative".into()));
    }
    let settings: Vec<(f64, f64)> =
        config.slips.iter().flat_map(|&s| config.alphas.iter().map(move |&a| (s, a))).collect();
    let results = run_many(&settings, config.parallelism, |&(slip, alpha)| run_one(config, slip, alpha));
    Ok(CliffStudy { config: config.clone(), runs: results.into_iter().collect::<Result<_, _>>()? })
}

fn run_one(config: &CliffStudyConfig, slip: f64, alpha: f64) -> Result<CliffRun, BenchError> {
    let invalid = |e: &dyn std::fmt::Display| BenchError::Invalid(format!("cliff slip={slip}: {e}"));
    let raw = make_env(EnvName::Cliff, slip).map_err(|e| invalid(&e))?;
    let mdp = raw.as_tabular().map_err(|e| invalid(&e))?;
    let solution = value_iteration(&mdp, 1e-10).map_err(|e| invalid(&e))?;
    let controller = PlanningController {
        method: Method::Smbs,
        q: &solution,
        model: &mdp,
        smbs: SmbsConfig { samples: config.samples, alpha, tie_tol: 1e-9, keep_targets: false },
    };
    let queue_init = config.prime_action.map_or(QueueInit::Uniform, QueueInit::Constant);
    let mut env = DelayedEnv::wrap(raw, config.delay, queue_init);
    env.seed(config.env_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let horizon = Horizon::Episodes { episodes: config.episodes, max_steps: config.max_steps };
    let stats = run_controller(&mut env, &controller, horizon, &mut rng, true)?;
    let paths = stats
        .paths
        .unwrap_or_default()
        .iter()
        .map(|p| p.iter().map(|s| s.index().ok_or_else(|| invalid(&"continuous state"))).collect())
        .collect::<Result<_, _>>()?;
    Ok(CliffRun { slip, alpha, returns: stats.episode_returns, paths })
}

pub fn study_path(root: &Path) -> PathBuf {
    root.join(STUDY_DIR).join(STUDY_FILE)
}

/// Loads the study under `root` when its config matches, else runs and saves
/// it. The flag reports whether it ran.
pub fn run_or_load_study(root: &Path, config: &CliffStudyConfig) -> Result<(CliffStudy, bool), BenchError> {
    let path = study_path(root);
    if let Ok(text) = fs::read_to_string(&path) {
        if let Ok(study) = serde_json::from_str::<CliffStudy>(&text) {
            if study.config == *config {
                return Ok((study, false));
            }
        }
    }
    let study = run_cliff_study(config)?;
    save_study(&path, &study)?;
    Ok((study, true))
}

pub fn save_study(path: &Path, study: &CliffStudy) -> Result<(), BenchError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_error(dir))?;
    }
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_string(study)? + "\n").map_err(io_error(&tmp))?;
    fs::rename(&tmp, path).map_err(io_error(path))
}

pub fn load_study(path: &Path) -> Result<CliffStudy, BenchError> {
    let text = fs::read_to_string(path).map_err(io_error(path))?;
    serde_json::from_str(&text).map_err(|e| BenchError::Parse { path: path.to_path_buf(), message: e.to_string() })
}

/// Average visitation of one (slip, α) setting.
#[derive(Debug, Clone, PartialEq)]
pub struct CliffPaths {
    pub slip: f64,
    pub alpha: f64,
    /// Mean visits per episode, indexed by cell.
    pub occupancy: Vec<f64>,
    /// Mean distance to the cliff over visits in each column; `None` if the
    /// column was never entered.
    pub column_distance: Vec<Option<f64>>,
    /// Mean distance to the cliff over every visit.
    pub mean_distance: f64,
    pub mean_length: f64,
}

pub fn emit_cliff_paths(runs: &[CliffRun]) -> Vec<CliffPaths> {
    runs.iter().map(cliff_paths).collect()
}

fn cliff_paths(run: &CliffRun) -> CliffPaths {
    let cells = CLIFF_ROWS * CLIFF_COLS;
    let mut visits = vec![0u64; cells];
    for path in &run.paths {
        for &s in path {
            visits[s] += 1;
        }
    }
    let episodes = run.paths.len().max(1) as f64;
    let total: u64 = visits.iter().sum();
    let distance_weighted =
        |filter: &dyn Fn(usize) -> bool| -> (u64, f64) {
            (0..cells).filter(|&s| filter(s)).fold((0, 0.0), |(n, d), s| {
                (n + visits[s], d + visits[s] as f64 * CliffDynamics::distance_to_cliff(s) as f64)
            })
        };
    let column_distance = (0..CLIFF_COLS)
        .map(|c| {
            let (n, d) = distance_weighted(&|s| s % CLIFF_COLS == c);
            (n > 0).then(|| d / n as f64)
        })
        .collect();
    let (_, all) = distance_weighted(&|_| true);
    CliffPaths {
        slip: run.slip,
        alpha: run.alpha,
        occupancy: visits.iter().map(|&v| v as f64 / episodes).collect(),
        column_distance,
        mean_distance: if total > 0 { all / total as f64 } else { f64::NAN },
        mean_length: total as f64 / episodes,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaSweepRow {
    pub slip: f64,
    pub alpha: f64,
    pub returns: Summary,
    pub mean_distance: f64,
    pub mean_length: f64,
}

pub fn emit_alpha_sweep(runs: &[CliffRun]) -> Vec<AlphaSweepRow> {
    runs.iter()
        .map(|run| {
            let paths = cliff_paths(run);
            AlphaSweepRow {
                slip: run.slip,
                alpha: run.alpha,
                returns: summarize(&run.returns),
                mean_distance: paths.mean_distance,
                mean_length: paths.mean_length,
            }
        })
        .collect()
}

fn csv_writer(mut out: impl Write, schema: &str) -> Result<csv::Writer<impl Write>, BenchError> {
    writeln!(out, "{schema}").map_err(io_error("<csv>"))?;
    Ok(csv::Writer::from_writer(out))
}

pub fn write_paths_csv(paths: &[CliffPaths], out: impl Write) -> Result<(), BenchError> {
    let mut writer = csv_writer(out, PATHS_SCHEMA)?;
    writer.write_record(PATHS_HEADER)?;
    for p in paths {
        for s in 0..CLIFF_ROWS * CLIFF_COLS {
            let (row, col) = (s / CLIFF_COLS, s % CLIFF_COLS);
            writer.write_record([
                p.slip.to_string(),
                p.alpha.to_string(),
                row.to_string(),
                col.to_string(),
                p.occupancy[s].to_string(),
                CliffDynamics::distance_to_cliff(s).to_string(),
                p.column_distance[col].map(|d| d.to_string()).unwrap_or_default(),
            ])?;
        }
    }
    writer.flush().map_err(io_error("<csv>"))
}

pub fn write_sweep_csv(rows: &[AlphaSweepRow], out: impl Write) -> Result<(), BenchError> {
    let mut writer = csv_writer(out, SWEEP_SCHEMA)?;
    writer.write_record(SWEEP_HEADER)?;
    for r in rows {
        writer.write_record([
            r.slip.to_string(),
            r.alpha.to_string(),
            r.returns.n.to_string(),
            r.returns.mean.to_string(),
            r.returns.std.to_string(),
            r.returns.stderr.to_string(),
            r.returns.std_stderr.to_string(),
            r.mean_distance.to_string(),
            r.mean_length.to_string(),
        ])?;
    }
    writer.flush().map_err(io_error("<csv>"))
}

/// Outcome of the three risk-study checks.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskChecks {
    /// At the high slip, mean distance never drops as α grows.
    pub distance_nondecreasing: bool,
    /// At the high slip, return std at the largest α is below that at the
    /// smallest by more than two standard errors.
    pub std_reduced: bool,
    /// At the low slip, every pair of mean returns differs by less than two
    /// combined standard errors.
    pub low_slip_flat: bool,
    pub notes: Vec<String>,
}

impl RiskChecks {
    pub fn all(&self) -> bool {
        self.distance_nondecreasing && self.std_reduced && self.low_slip_flat
    }
}

pub fn check_risk_study(rows: &[AlphaSweepRow], low_slip: f64, high_slip: f64) -> RiskChecks {
    let sorted = |slip: f64| {
        let mut r: Vec<&AlphaSweepRow> = rows.iter().filter(|r| r.slip == slip).collect();
        r.sort_by(|a, b| a.alpha.total_cmp(&b.alpha));
        r
    };
    let high = sorted(high_slip);
    let low = sorted(low_slip);
    let mut notes = Vec::new();

    let distance_nondecreasing = high.len() >= 2 && high.windows(2).all(|w| w[1].mean_distance >= w[0].mean_distance);
    notes.push(format!(
        "slip {high_slip} distance by α: {}",
        high.iter().map(|r| format!("{:.3}", r.mean_distance)).collect::<Vec<_>>().join(", ")
    ));

    let std_reduced = match (high.first(), high.last()) {
        (Some(a), Some(b)) if high.len() >= 2 => {
            notes.push(format!(
                "slip {high_slip} return std α={}: {:.3}±{:.3}, α={}: {:.3}±{:.3}",
                a.alpha, a.returns.std, a.returns.std_stderr, b.alpha, b.returns.std, b.returns.std_stderr
            ));
            exceeds_by(a.returns.std, a.returns.std_stderr, b.returns.std, b.returns.std_stderr, 2.0)
        }
        _ => false,
    };

    let mut low_slip_flat = low.len() >= 2;
    let mut worst: f64 = 0.0;
    for (i, a) in low.iter().enumerate() {
        for b in &low[i + 1..] {
            let se = (a.returns.stderr.powi(2) + b.returns.stderr.powi(2)).sqrt();
            let gap = (a.returns.mean - b.returns.mean).abs();
            worst = worst.max(if se > 0.0 { gap / se } else if gap > 0.0 { f64::INFINITY } else { 0.0 });
            low_slip_flat &= gap < 2.0 * se || gap == 0.0;
        }
    }
    notes.push(format!("slip {low_slip} largest pairwise gap: {worst:.2} combined SE"));
    RiskChecks { distance_nondecreasing, std_reduced, low_slip_flat, notes }
}
