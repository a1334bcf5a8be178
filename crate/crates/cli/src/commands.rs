//! The five subcommands as library functions; `main` only parses flags.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};

use satlearn::train::TrainReport;

use crate::config::{ExperimentConfig, Method};
use crate::experiment::{ensure_dir, write_corpus, Experiment};
use crate::plot::{self, CHARTS};
use crate::results::{self, ResultRow};
use crate::{CliError, Result};

pub fn out_dir(cfg: &ExperimentConfig, out: Option<&Path>) -> PathBuf {
    out.map_or_else(|| cfg.out_dir.clone(), Path::to_path_buf)
}

pub fn results_path(out: &Path) -> PathBuf {
    out.join("results.csv")
}

pub fn summary_path(out: &Path) -> PathBuf {
    out.join("summary.csv")
}

pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    let dir = write_corpus(cfg, out)?;
    info!("corpus written to {}", dir.display());
    Ok(dir)
}

pub fn cmd_train(
    cfg: &ExperimentConfig,
    out: &Path,
    method: Method,
    n: usize,
    seed: u64,
) -> Result<(TrainReport, PathBuf)> {
    let exp = Experiment::open(cfg, out)?;
    let (_, report, stem) = exp.train_and_save(method, n, seed)?;
    for w in &report.warnings {
        warn!("{w}");
    }
    Ok((report, stem))
}

/// Evaluates a trained cell. With `csv_out` the rows are appended to that
/// file, otherwise returned for printing.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    out: &Path,
    method: Method,
    n: usize,
    seed: u64,
    csv_out: Option<&Path>,
) -> Result<Vec<ResultRow>> {
    let exp = Experiment::open(cfg, out)?;
    let params = exp.load_run(method, n, seed)?;
    let rows = exp.evaluate(&params, method, n, seed);
    if let Some(path) = csv_out {
        results::append_rows(path, &exp.hash, &rows)?;
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SweepOutcome {
    pub cells_run: usize,
    pub cells_skipped: usize,
    pub rows_failed: usize,
}

/// Runs every missing (method, n_labeled, seed) cell, appending two rows per
/// cell to `results.csv`, then rewrites `summary.csv` from all rows.
pub fn cmd_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<SweepOutcome> {
    let exp = Experiment::open(cfg, out)?;
    let path = results_path(out);
    let (found, _) = results::read_rows(&path)?;
    if let Some(h) = found.filter(|h| *h != exp.hash) {
        return Err(CliError::Usage(format!(
            "{} holds results of a different config ({h}); use another --out",
            path.display()
        )));
    }
    let mut outcome = SweepOutcome::default();
    for &method in &cfg.methods {
        for &n in &cfg.n_labeled {
            for &seed in &cfg.seeds {
                let done = results::completed(&path)?;
                let keys = ResultRow::failed_cell(method, n, seed, "")
                    .into_iter()
                    .map(|r| r.key());
                if keys.clone().all(|k| done.contains(&k)) {
                    outcome.cells_skipped += 1;
                    continue;
                }
                info!("cell {method} n={n} seed={seed}");
                let rows: Vec<ResultRow> = exp
                    .run_cell(method, n, seed)
                    .into_iter()
                    .filter(|r| !done.contains(&r.key()))
                    .collect();
                for r in rows.iter().filter(|r| r.error.is_some()) {
                    warn!(
                        "{method} n={n} seed={seed} {}: {}",
                        r.split,
                        r.error.as_deref().unwrap_or_default()
                    );
                }
                outcome.rows_failed += rows.iter().filter(|r| r.error.is_some()).count();
                results::append_rows(&path, &exp.hash, &rows)?;
                outcome.cells_run += 1;
            }
        }
    }
    let (_, rows) = results::read_rows(&path)?;
    let text = results::summary_csv(&exp.hash, &results::summarize(&rows));
    let summary = summary_path(out);
    fs::write(&summary, text).map_err(|e| CliError::io(&summary, e))?;
    Ok(outcome)
}

/// Writes the four charts for `results_csv` into `out`.
pub fn cmd_plot(results_csv: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    if !results_csv.exists() {
        return Err(CliError::Usage(format!(
            "{} does not exist",
            results_csv.display()
        )));
    }
    let (hash, rows) = results::read_rows(results_csv)?;
    if rows.is_empty() {
        return Err(CliError::Usage(format!(
            "{} has no result rows",
            results_csv.display()
        )));
    }
    let summary = results::summarize(&rows);
    if summary.is_empty() {
        return Err(CliError::Usage(format!(
            "{} has no rows with both metrics",
            results_csv.display()
        )));
    }
    ensure_dir(out)?;
    let hash = hash.unwrap_or_else(|| "unknown".into());
    CHARTS
        .iter()
        .map(|&(metric, split)| {
            let path = out.join(plot::file_name(metric, split));
            fs::write(&path, plot::render(&summary, metric, split, &hash))
                .map_err(|e| CliError::io(&path, e))?;
            Ok(path)
        })
        .collect()
}
