use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Result};
use clap::{Parser, Subcommand};
use fedsim::harness::{self, ExperimentConfig, SweepGrid};

#[derive(Debug, Parser)]
#[command(name = "fedsim", version, about = "Desk-scale federated learning simulator")]
struct Cli {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides report.output_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run only this seed instead of report.seeds.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
    /// Worker threads; does not change results.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Config override `section.key=value`, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write per-seed partition files and heterogeneity reports.
    Partition,
    /// Write per-seed transition matrices and noisy-label audits.
    Noise,
    /// Train every seed and write metrics logs plus summary.csv.
    Train,
    /// Consolidate metrics logs under RUN_DIR into report.txt and report.csv.
    Report {
        /// Directory searched recursively; defaults to the output directory.
        run_dir: Option<PathBuf>,
    },
    /// Train a preset comparison grid and report it.
    Sweep {
        /// One of skew, participation, noise, precision.
        #[arg(long)]
        grid: String,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path, &cli.overrides)?,
        None => ExperimentConfig::from_toml_with_overrides("", &cli.overrides)?,
    };
    if let Some(seed) = cli.seed_override {
        cfg.report.seeds = vec![seed];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output_dir(cli: &Cli, cfg: Option<&ExperimentConfig>) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| cfg.and_then(|c| c.report.output_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("fedsim-out"))
}

/// Returns whether every requested seed completed.
fn run(cli: &Cli) -> Result<bool> {
    if let Command::Report { run_dir } = &cli.command {
        let cfg = cli.config.as_ref().map(|_| load_config(cli)).transpose()?;
        let out = output_dir(cli, cfg.as_ref());
        let dir = run_dir.clone().unwrap_or_else(|| out.clone());
        let table = harness::with_threads(cli.threads, || harness::cli_report(&dir, &out))??;
        print!("{}", table.render_text());
        return Ok(true);
    }

    let cfg = load_config(cli)?;
    let out = output_dir(cli, Some(&cfg));
    match &cli.command {
        Command::Partition => {
            let artifacts = harness::with_threads(cli.threads, || harness::cli_partition(&cfg, &out))??;
            for (path, report) in artifacts.partition_files.iter().zip(&artifacts.reports) {
                println!("{}: mean_kl_to_global {:.6}", path.display(), report.mean_kl_to_global);
            }
            Ok(true)
        }
        Command::Noise => {
            let artifacts = harness::with_threads(cli.threads, || harness::cli_noise(&cfg, &out))??;
            for (path, audit) in artifacts.audit_files.iter().zip(&artifacts.audits) {
                println!("{}: empirical rate {:.6}", path.display(), audit.measurement.rate);
            }
            Ok(true)
        }
        Command::Train => {
            let artifacts = harness::with_threads(cli.threads, || harness::cli_train(&cfg, &out))??;
            for row in &artifacts.summary {
                println!(
                    "{} (round {}): metric {:.4} ± {:.4}, best {:.4} ± {:.4} over {} run(s)",
                    row.tag, row.round, row.metric_mean, row.metric_std, row.best_mean, row.best_std, row.runs
                );
            }
            for f in &artifacts.failures {
                eprintln!("run {} (seed {}) failed: {}", f.index, f.run_seed, f.error);
            }
            Ok(artifacts.all_completed())
        }
        Command::Sweep { grid } => {
            let grid = SweepGrid::parse(grid).ok_or_else(|| anyhow!("unknown grid {grid:?}"))?;
            let (_, table) = harness::with_threads(cli.threads, || harness::sweep(&cfg, grid, &out))??;
            print!("{}", table.render_text());
            Ok(true)
        }
        Command::Report { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
