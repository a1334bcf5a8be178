use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use satlearn_cli::commands::{
    cmd_eval, cmd_gen_data, cmd_plot, cmd_sweep, cmd_train, out_dir, results_path,
};
use satlearn_cli::{results, CliError, ExperimentConfig, Method, Result};

/// Turn-level satisfaction experiments on a synthetic dialogue corpus.
#[derive(Parser)]
#[command(name = "satlearn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the labeled and unlabeled corpus and its split.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to `out_dir` from the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one method on a labeled subset and save checkpoint and report.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// supervised, pretrain_finetune or few_shot.
        #[arg(long)]
        method: String,
        #[arg(long)]
        n_labeled: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a trained checkpoint on both test splits.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        method: String,
        #[arg(long)]
        n_labeled: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Append rows to this CSV instead of printing them.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every missing method × n_labeled × seed cell into results.csv.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw the four metric charts from a results CSV.
    Plot {
        /// Results CSV (defaults to results.csv under the config's out_dir).
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Chart directory (defaults to `plots` next to the results).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = cmd_gen_data(&cfg, &out_dir(&cfg, out.as_deref()))?;
            println!("{}", dir.display());
        }
        Command::Train {
            config,
            method,
            n_labeled,
            seed,
            out,
        } => {
            let method: Method = method.parse()?;
            let cfg = ExperimentConfig::load(&config)?;
            let (report, stem) = cmd_train(
                &cfg,
                &out_dir(&cfg, out.as_deref()),
                method,
                n_labeled,
                seed,
            )?;
            println!(
                "{method} n={} seed={seed} steps={} checkpoint={}",
                report.n_train,
                report.steps,
                stem.display()
            );
        }
        Command::Eval {
            config,
            method,
            n_labeled,
            seed,
            out,
        } => {
            let method: Method = method.parse()?;
            let cfg = ExperimentConfig::load(&config)?;
            let rows = cmd_eval(&cfg, &cfg.out_dir, method, n_labeled, seed, out.as_deref())?;
            if out.is_none() {
                print!("{}", results::render(&cfg.config_hash(), &rows)?);
            }
        }
        Command::Sweep { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = out_dir(&cfg, out.as_deref());
            let o = cmd_sweep(&cfg, &dir)?;
            println!(
                "ran {} cells, skipped {}, {} failed rows; results in {}",
                o.cells_run,
                o.cells_skipped,
                o.rows_failed,
                results_path(&dir).display()
            );
        }
        Command::Plot {
            results,
            config,
            out,
        } => {
            let csv = match (results, config) {
                (Some(r), _) => r,
                (None, Some(c)) => results_path(&ExperimentConfig::load(&c)?.out_dir),
                (None, None) => {
                    return Err(CliError::Usage("plot needs --results or --config".into()))
                }
            };
            let dir = out.unwrap_or_else(|| csv.parent().unwrap_or(Path::new(".")).join("plots"));
            for p in cmd_plot(&csv, &dir)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
