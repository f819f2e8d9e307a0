//! Figure-ready tables built from persisted run records.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use delayed_rl::trainer::{aggregate_records, RunRecord, RECORD_FILE};
use walkdir::WalkDir;

use crate::grid::Cell;
use crate::{io_error, BenchError};

/// Leading comment line of the method-comparison CSV.
pub const FIG4_SCHEMA: &str = "# schema: method_comparison v1";
pub const FIG4_HEADER: [&str; 9] = ["env", "randomness", "delay", "method", "seeds", "top_k", "mean_reward", "stderr", "partial"];

/// Every record under `root`, in path order.
pub fn load_records(root: &Path) -> Result<Vec<(PathBuf, RunRecord)>, BenchError> {
    let mut out = Vec::new();
    if !root.exists() {
        return Ok(out);
    }
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| BenchError::Invalid(format!("walking {}: {e}", root.display())))?;
        if !entry.file_type().is_file() || entry.file_name() != RECORD_FILE {
            continue;
        }
        let path = entry.path();
        let text = fs::read_to_string(path).map_err(io_error(path))?;
        let record = RunRecord::from_json(&text)
            .map_err(|e| BenchError::Parse { path: path.to_path_buf(), message: e.to_string() })?;
        out.push((path.to_path_buf(), record));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fig4Row {
    pub cell: Cell,
    pub seeds: usize,
    pub top_k: usize,
    pub mean_reward: f64,
    pub stderr: f64,
    pub partial: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Fig4Table {
    pub rows: Vec<Fig4Row>,
    /// Requested cells with fewer than `top_k` records.
    pub missing: Vec<Cell>,
}

/// One row per complete cell, aggregating its `top_k` best final scores.
/// With no `requested` cells, every cell present in `records` is used.
/// Records repeating a (cell, seed) pair are ignored after the first.
pub fn emit_fig4_table(records: &[RunRecord], requested: &[Cell], top_k: usize) -> Result<Fig4Table, BenchError> {
    if top_k == 0 {
        return Err(BenchError::Invalid("top_k must be positive".into()));
    }
    let mut groups: Vec<(Cell, Vec<RunRecord>)> = Vec::new();
    for record in records {
        let cell = Cell::of(&record.config);
        match groups.iter_mut().find(|(c, _)| *c == cell) {
            Some((_, group)) => {
                if group.iter().all(|r| r.seed != record.seed) {
                    group.push(record.clone());
                }
            }
            None => groups.push((cell, vec![record.clone()])),
        }
    }
    let mut wanted: Vec<Cell> = if requested.is_empty() { groups.iter().map(|(c, _)| *c).collect() } else { requested.to_vec() };
    wanted.sort_by(|a, b| a.order(b));
    wanted.dedup();

    let mut table = Fig4Table::default();
    for cell in wanted {
        let Some((_, group)) = groups.iter_mut().find(|(c, _)| *c == cell) else {
            table.missing.push(cell);
            continue;
        };
        if group.len() < top_k {
            table.missing.push(cell);
            continue;
        }
        group.sort_by_key(|r| r.seed);
        let agg = aggregate_records(group, top_k, group.len(), Vec::new())?;
        table.rows.push(Fig4Row {
            cell,
            seeds: group.len(),
            top_k,
            mean_reward: agg.mean,
            stderr: agg.stderr,
            partial: agg.partial,
        });
    }
    Ok(table)
}

pub fn write_fig4_csv(table: &Fig4Table, out: impl Write) -> Result<(), BenchError> {
    let mut out = out;
    writeln!(out, "{FIG4_SCHEMA}").map_err(io_error("<csv>"))?;
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(FIG4_HEADER)?;
    for row in &table.rows {
        writer.write_record([
            row.cell.env.to_string(),
            row.cell.randomness.to_string(),
            row.cell.delay.to_string(),
            row.cell.method.to_string(),
            row.seeds.to_string(),
            row.top_k.to_string(),
            row.mean_reward.to_string(),
            row.stderr.to_string(),
            row.partial.to_string(),
        ])?;
    }
    writer.flush().map_err(io_error("<csv>"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use delayed_rl::envs::EnvName;
    use delayed_rl::trainer::{BestCheckpoint, EvalStats, Method, TrainConfig};

    fn record(env: EnvName, method: Method, seed: u64, reward: f64) -> RunRecord {
        let config = TrainConfig { env, method, seed, delay: 5, ..Default::default() };
        RunRecord {
            config,
            seed,
            eval_seed: 0,
            final_seed: 0,
            q_kind: "ddqn".into(),
            model_kind: None,
            curve: Vec::new(),
            best: BestCheckpoint { step: 0, score: reward, q_file: String::new(), model_file: None },
            final_eval: EvalStats {
                steps: 1,
                transitions: 1,
                total_reward: reward,
                average_reward: reward,
                episode_returns: Vec::new(),
                return_mean: 0.0,
                return_variance: 0.0,
                score: reward,
                paths: None,
            },
            env_steps: 0,
            transitions_consumed: 0,
            transitions_in_flight: 0,
            episodes_started: 0,
        }
    }

    #[test]
    fn synthetic_means_by_hand() {
        // Top 4 of {1, 2, 3, 4, 10} is {10, 4, 3, 2}: mean 4.75.
        let records: Vec<_> = [1.0, 2.0, 3.0, 4.0, 10.0]
            .iter()
            .enumerate()
            .map(|(k, &v)| record(EnvName::Cliff, Method::Amdp, k as u64, v))
            .collect();
        let table = emit_fig4_table(&records, &[], 4).unwrap();
        assert_eq!(table.rows.len(), 1);
        let row = &table.rows[0];
        assert_eq!(row.mean_reward, 4.75);
        let var = [10.0f64, 4.0, 3.0, 2.0].iter().map(|v| (v - 4.75).powi(2)).sum::<f64>() / 3.0;
        assert!((row.stderr - (var / 4.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn deterministic_cell_has_zero_stderr() {
        let records: Vec<_> = (0..5).map(|k| record(EnvName::Cliff, Method::Smbs, k, -13.0)).collect();
        let table = emit_fig4_table(&records, &[], 4).unwrap();
        assert_eq!(table.rows[0].stderr, 0.0);
    }

    #[test]
    fn incomplete_cells_are_listed() {
        let mut records: Vec<_> = (0..5).map(|k| record(EnvName::Cliff, Method::Smbs, k, 1.0)).collect();
        records.extend((0..3).map(|k| record(EnvName::Cliff, Method::Amdp, k, 1.0)));
        // A repeated seed does not complete a cell.
        records.push(record(EnvName::Cliff, Method::Amdp, 0, 9.0));
        let absent = Cell::of(&record(EnvName::FrozenLake4, Method::Smbs, 0, 0.0).config);
        let mut requested: Vec<Cell> = records.iter().map(|r| Cell::of(&r.config)).collect();
        requested.push(absent);
        let table = emit_fig4_table(&records, &requested, 4).unwrap();
        assert_eq!(table.rows.len(), 1);
        assert_eq!(table.rows[0].cell.method, Method::Smbs);
        assert_eq!(table.missing.len(), 2);
    }

    #[test]
    fn csv_is_independent_of_record_order() {
        let mut records: Vec<_> = (0..5)
            .flat_map(|k| [record(EnvName::Cliff, Method::Smbs, k, k as f64), record(EnvName::StormyRoad, Method::Amdp, k, 0.5)])
            .collect();
        let render = |records: &[RunRecord]| {
            let mut buf = Vec::new();
            write_fig4_csv(&emit_fig4_table(records, &[], 4).unwrap(), &mut buf).unwrap();
            String::from_utf8(buf).unwrap()
        };
        let a = render(&records);
        records.reverse();
        assert_eq!(a, render(&records));
        let lines: Vec<&str> = a.lines().collect();
        assert_eq!(lines[0], FIG4_SCHEMA);
        assert_eq!(lines[1], FIG4_HEADER.join(","));
        assert!(lines[2].starts_with("stormy_road,"));
    }
}
