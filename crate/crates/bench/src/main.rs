use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use delayed_rl::delay::AugmentedState;
use delayed_rl::envs::{make_env, EnvName, State};
use delayed_rl::mdp::{build_amdp, AugmentedCodec, DEFAULT_STATE_CAP};
use delayed_rl::theory::{reachable_augmented_states, verify_theorem1, verify_theorem2, Theorem2Options, TheoryOptions};
use delayed_rl::trainer::{evaluate, run_dir, save_run, train, Checkpoint, Method, QLearner, RunRecord, TrainConfig, RECORD_FILE};
use delayed_rl_bench::cliff::{
    check_risk_study, emit_alpha_sweep, emit_cliff_paths, load_study, run_or_load_study, study_path, write_paths_csv,
    write_sweep_csv, CliffStudyConfig,
};
use delayed_rl_bench::grid::{run_sweep, ExperimentGrid};
use delayed_rl_bench::tables::{emit_fig4_table, load_records, write_fig4_csv};
use delayed_rl_bench::{output_root, BenchError, OUTPUT_ROOT_VAR};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Delayed-control experiments: training, evaluation, sweeps, theory checks
/// and plot tables.
#[derive(Parser)]
#[command(name = "delayed-bench", version)]
struct Cli {
    /// Output root for runs and studies.
    #[arg(long, global = true, env = OUTPUT_ROOT_VAR)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and persist it under the output root.
    Train(TrainArgs),
    /// Re-evaluate the checkpoint of a persisted run.
    Eval(EvalArgs),
    /// Run every cell of an experiment grid, skipping completed runs.
    Sweep(SweepArgs),
    /// Check the theorems on an exact environment model.
    Verify(VerifyArgs),
    /// Aggregate persisted results into a CSV table.
    Plotdata(PlotArgs),
    /// Run (or reload) the cliff risk study and report its checks.
    CliffStudy(CliffArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML file with TrainConfig fields; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    env: Option<EnvName>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long = "r")]
    randomness: Option<f64>,
    #[arg(long = "d")]
    delay: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_enum)]
    learner: Option<LearnerArg>,
    /// Retrain even if a matching run exists.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum LearnerArg {
    Ddqn,
    Tabular,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory holding a record and checkpoint.
    run: PathBuf,
    #[arg(long)]
    steps: Option<u64>,
    /// Evaluation seed; defaults to the run's final-evaluation seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SweepArgs {
    /// TOML experiment grid.
    grid: PathBuf,
    #[arg(long)]
    parallelism: Option<usize>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    theorem: u8,
    #[arg(long)]
    env: EnvName,
    #[arg(long = "r", default_value_t = 0.0)]
    randomness: f64,
    #[arg(long = "d")]
    delay: usize,
    /// Rollout counts M.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 5, 50])]
    samples: Vec<usize>,
    /// Risk weights α (first theorem).
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.01, 1.0])]
    alphas: Vec<f64>,
    /// Deviation multipliers δ (second theorem).
    #[arg(long, value_delimiter = ',', default_values_t = [2.0, 4.0])]
    deltas: Vec<f64>,
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    /// Reward shift making every reward positive (second theorem).
    #[arg(long, default_value_t = 0.1)]
    shift: f64,
    /// Check only the first N reachable augmented states (second theorem).
    #[arg(long)]
    states: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Table {
    Fig4,
    CliffPaths,
    AlphaSweep,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(value_enum)]
    table: Table,
    #[arg(long, default_value_t = 4)]
    top_k: usize,
    /// Destination file; standard output if absent.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct CliffArgs {
    /// TOML study configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    parallelism: Option<usize>,
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, BenchError> {
    let text = fs::read_to_string(path).map_err(|source| BenchError::Io { path: path.to_path_buf(), source })?;
    toml::from_str(&text).map_err(|e| BenchError::Parse { path: path.to_path_buf(), message: e.to_string() })
}

fn train_config(args: &TrainArgs) -> Result<TrainConfig, BenchError> {
    let mut config: TrainConfig = match &args.config {
        Some(path) => read_toml(path)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = args.env {
        config.env = v;
    }
    if let Some(v) = args.method {
        config.method = v;
    }
    if let Some(v) = args.randomness {
        config.randomness = v;
    }
    if let Some(v) = args.delay {
        config.delay = v;
    }
    if let Some(v) = args.steps {
        config.steps = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.samples {
        config.samples = v;
    }
    if let Some(v) = args.alpha {
        config.alpha = v;
    }
    if let Some(v) = args.learner {
        config.learner = match v {
            LearnerArg::Ddqn => QLearner::Ddqn,
            LearnerArg::Tabular => QLearner::Tabular,
        };
    }
    config.validate()?;
    Ok(config)
}

fn cmd_train(root: &Path, args: &TrainArgs) -> Result<bool, BenchError> {
    let config = train_config(args)?;
    let dir = run_dir(root, &config);
    if !args.force {
        if let Some(record) = delayed_rl::trainer::load_record(&dir, &config) {
            println!("{}: already complete, final score {}", dir.display(), record.final_eval.score);
            return Ok(true);
        }
    }
    let outcome = train(&config)?;
    save_run(&dir, &outcome)?;
    let r = &outcome.record;
    println!(
        "{}: best step {} (eval score {}), final score {} over {} steps, {:.1}s",
        dir.display(),
        r.best.step,
        r.best.score,
        r.final_eval.score,
        r.final_eval.steps,
        outcome.wall_clock_secs
    );
    Ok(true)
}

fn cmd_eval(args: &EvalArgs) -> Result<bool, BenchError> {
    let path = args.run.join(RECORD_FILE);
    let text = fs::read_to_string(&path).map_err(|source| BenchError::Io { path: path.clone(), source })?;
    let record = RunRecord::from_json(&text)?;
    let checkpoint = Checkpoint::load(&args.run, &record.config)?;
    let steps = args.steps.unwrap_or(record.config.final_eval_steps);
    let seed = args.seed.unwrap_or(record.final_seed);
    let mut stats = evaluate(&checkpoint, &record.config, steps, seed)?;
    stats.paths = None;
    println!("{}", serde_json::to_string_pretty(&stats)?);
    Ok(true)
}

fn cmd_sweep(root: &Path, args: &SweepArgs) -> Result<bool, BenchError> {
    let mut grid = ExperimentGrid::load(&args.grid)?;
    if let Some(p) = args.parallelism {
        grid.parallelism = p;
    }
    let report = run_sweep(&grid, root)?;
    println!("trained {}, loaded {}, failed {}", report.trained, report.loaded, report.failures.len());
    for f in &report.failures {
        eprintln!("failed: {f}");
    }
    Ok(report.failures.is_empty())
}

fn cmd_verify(args: &VerifyArgs) -> Result<bool, BenchError> {
    let invalid = |e: &dyn std::fmt::Display| BenchError::Invalid(e.to_string());
    let env = make_env(args.env, args.randomness).map_err(|e| invalid(&e))?;
    let mdp = env.as_tabular().map_err(|e| invalid(&e))?;
    if args.theorem == 1 {
        let opts = TheoryOptions { seed: args.seed, ..Default::default() };
        let report = verify_theorem1(&mdp, args.delay, &args.samples, &args.alphas, &opts).map_err(|e| invalid(&e))?;
        println!(
            "theorem 1: {} reachable augmented states, {} comparisons, {} mismatches",
            report.reachable,
            report.comparisons,
            report.mismatches.len()
        );
        for m in report.mismatches.iter().take(20) {
            println!("  mismatch at {:?}: M={} α={} planned {} optimal {}", m.state, m.samples, m.alpha, m.planned, m.optimal);
        }
        return Ok(report.mismatches.is_empty());
    }
    let amdp = build_amdp(&mdp, args.delay).map_err(|e| invalid(&e))?;
    let codec = AugmentedCodec::new(mdp.num_states(), mdp.num_actions(), args.delay, DEFAULT_STATE_CAP).map_err(|e| invalid(&e))?;
    let mut states = reachable_augmented_states(&amdp);
    states.retain(|&idx| !mdp.is_terminal(codec.decode(idx).0));
    if let Some(n) = args.states {
        states.truncate(n);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut ok = true;
    for &delta in &args.deltas {
        for &samples in &args.samples {
            let opts = Theorem2Options { delta, samples, trials: args.trials, reward_shift: args.shift, vi_tol: 1e-10 };
            let (mut worst, mut bound, mut se) = (0.0f64, 0.0, 0.0);
            for &idx in &states {
                let (s, queue) = codec.decode(idx);
                let i = AugmentedState::new(State::Discrete(s), queue);
                let report = verify_theorem2(&mdp, &i, &opts, &mut rng).map_err(|e| invalid(&e))?;
                worst = worst.max(report.frequency);
                bound = report.bound;
                se = report.standard_error();
            }
            let pass = worst <= bound + 3.0 * se;
            ok &= pass;
            println!(
                "theorem 2: δ={delta} M={samples}: max frequency {worst:.4} over {} states, bound {bound:.4} + 3·{se:.4} {}",
                states.len(),
                if pass { "ok" } else { "VIOLATED" }
            );
        }
    }
    Ok(ok)
}

fn write_output(path: Option<&Path>, render: impl FnOnce(&mut dyn Write) -> Result<(), BenchError>) -> Result<(), BenchError> {
    match path {
        Some(path) => {
            let mut buf = Vec::new();
            render(&mut buf)?;
            fs::write(path, buf).map_err(|source| BenchError::Io { path: path.to_path_buf(), source })
        }
        None => render(&mut io::stdout().lock()),
    }
}

fn cmd_plotdata(root: &Path, args: &PlotArgs) -> Result<bool, BenchError> {
    match args.table {
        Table::Fig4 => {
            let records: Vec<RunRecord> = load_records(root)?.into_iter().map(|(_, r)| r).collect();
            let table = emit_fig4_table(&records, &[], args.top_k)?;
            for cell in &table.missing {
                eprintln!("incomplete cell: {cell}");
            }
            write_output(args.output.as_deref(), |out| write_fig4_csv(&table, out))?;
        }
        Table::CliffPaths | Table::AlphaSweep => {
            let study = load_study(&study_path(root))?;
            match args.table {
                Table::CliffPaths => {
                    let paths = emit_cliff_paths(&study.runs);
                    write_output(args.output.as_deref(), |out| write_paths_csv(&paths, out))?;
                }
                _ => {
                    let rows = emit_alpha_sweep(&study.runs);
                    write_output(args.output.as_deref(), |out| write_sweep_csv(&rows, out))?;
                }
            }
        }
    }
    Ok(true)
}

fn cmd_cliff(root: &Path, args: &CliffArgs) -> Result<bool, BenchError> {
    let mut config: CliffStudyConfig = match &args.config {
        Some(path) => read_toml(path)?,
        None => CliffStudyConfig::default(),
    };
    if let Some(v) = args.episodes {
        config.episodes = v;
    }
    if let Some(v) = args.samples {
        config.samples = v;
    }
    if let Some(v) = args.parallelism {
        config.parallelism = v;
    }
    let (study, ran) = run_or_load_study(root, &config)?;
    println!("{} {}", if ran { "ran" } else { "loaded" }, study_path(root).display());
    let rows = emit_alpha_sweep(&study.runs);
    for r in &rows {
        println!(
            "slip {} α {}: return {:.3} ± {:.3} (std {:.3}), distance {:.3}",
            r.slip, r.alpha, r.returns.mean, r.returns.stderr, r.returns.std, r.mean_distance
        );
    }
    let (low, high) = config
        .slips
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| (lo.min(s), hi.max(s)));
    if config.slips.len() >= 2 {
        let checks = check_risk_study(&rows, low, high);
        for n in &checks.notes {
            println!("{n}");
        }
        println!(
            "distance non-decreasing: {}, std reduced: {}, low slip flat: {}",
            checks.distance_nondecreasing, checks.std_reduced, checks.low_slip_flat
        );
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let root = output_root(cli.out);
    let result = match &cli.command {
        Command::Train(a) => cmd_train(&root, a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(&root, a),
        Command::Verify(a) => cmd_verify(a),
        Command::Plotdata(a) => cmd_plotdata(&root, a),
        Command::CliffStudy(a) => cmd_cliff(&root, a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
