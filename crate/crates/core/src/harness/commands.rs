use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    build_partition, prepare_data, prepare_noise, report, resolve_model, run_seed, write_atomic, ExperimentConfig,
    RunSeeds, SeedOutcome,
};
use crate::error::{Error, Result};
use crate::partition;

fn run_stem(index: usize, run_seed: u64) -> String {
    format!("run{index}_seed{run_seed}")
}

/// Paths written by [`cli_partition`], one pair per run seed.
#[derive(Debug, Clone)]
pub struct PartitionArtifacts {
    pub partition_files: Vec<PathBuf>,
    pub report_files: Vec<PathBuf>,
    pub reports: Vec<partition::HeterogeneityReport>,
}

/// Writes `partition_<run>.txt` and `heterogeneity_<run>.txt` per seed.
pub fn cli_partition(cfg: &ExperimentConfig, out: &Path) -> Result<PartitionArtifacts> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let mut artifacts = PartitionArtifacts {
        partition_files: Vec::new(),
        report_files: Vec::new(),
        reports: Vec::new(),
    };
    for (i, &s) in cfg.report.seeds.iter().enumerate() {
        let seeds = RunSeeds::derive(cfg, s);
        let file = build_partition(cfg, &data.train, seeds.partition)?;
        let report = partition::heterogeneity_report(&file.map, data.train.targets())?;
        let stem = run_stem(i, s);
        let part_path = out.join(format!("partition_{stem}.txt"));
        let report_path = out.join(format!("heterogeneity_{stem}.txt"));
        write_atomic(&part_path, file.to_text().as_bytes())?;
        write_atomic(&report_path, report.render().as_bytes())?;
        artifacts.partition_files.push(part_path);
        artifacts.report_files.push(report_path);
        artifacts.reports.push(report);
    }
    Ok(artifacts)
}

/// Paths and audits written by [`cli_noise`].
#[derive(Debug, Clone)]
pub struct NoiseArtifacts {
    pub matrix_files: Vec<PathBuf>,
    pub audit_files: Vec<PathBuf>,
    pub audits: Vec<crate::noise::NoiseAudit>,
    pub matrices: Vec<crate::noise::TransitionMatrix>,
}

/// Writes `transition_matrix_<run>.txt` and `noise_audit_<run>.txt` per seed.
pub fn cli_noise(cfg: &ExperimentConfig, out: &Path) -> Result<NoiseArtifacts> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let spec = resolve_model(cfg, &data.train)?;
    let mut artifacts = NoiseArtifacts {
        matrix_files: Vec::new(),
        audit_files: Vec::new(),
        audits: Vec::new(),
        matrices: Vec::new(),
    };
    for (i, &s) in cfg.report.seeds.iter().enumerate() {
        let outcome = prepare_noise(cfg, &data, &spec, RunSeeds::derive(cfg, s).noise)?;
        let stem = run_stem(i, s);
        let matrix_path = out.join(format!("transition_matrix_{stem}.txt"));
        let audit_path = out.join(format!("noise_audit_{stem}.txt"));
        write_atomic(&matrix_path, outcome.matrix.to_text().as_bytes())?;
        write_atomic(&audit_path, outcome.audit.render().as_bytes())?;
        artifacts.matrix_files.push(matrix_path);
        artifacts.audit_files.push(audit_path);
        artifacts.audits.push(outcome.audit);
        artifacts.matrices.push(outcome.matrix);
    }
    Ok(artifacts)
}

/// Mean and sample standard deviation over completed seeds at one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSummary {
    pub tag: String,
    pub round: usize,
    pub runs: usize,
    pub metric_mean: f64,
    pub metric_std: f64,
    pub best_mean: f64,
    pub best_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunFailure {
    pub index: usize,
    pub run_seed: u64,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub metrics_files: Vec<PathBuf>,
    pub summary_file: PathBuf,
    pub summary: Vec<CheckpointSummary>,
    pub outcomes: Vec<SeedOutcome>,
    pub failures: Vec<RunFailure>,
}

impl TrainArtifacts {
    pub fn all_completed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn summarize(outcomes: &[SeedOutcome]) -> Vec<CheckpointSummary> {
    let per_run: Vec<_> = outcomes.iter().map(|o| o.log.checkpoints()).collect();
    let Some(first) = per_run.first() else {
        return Vec::new();
    };
    first
        .iter()
        .enumerate()
        .map(|(k, cp)| {
            let metrics: Vec<f64> = per_run.iter().map(|c| c[k].metric).collect();
            let bests: Vec<f64> = per_run.iter().map(|c| c[k].best).collect();
            let (metric_mean, metric_std) = mean_std(&metrics);
            let (best_mean, best_std) = mean_std(&bests);
            CheckpointSummary {
                tag: cp.tag.clone(),
                round: cp.round,
                runs: metrics.len(),
                metric_mean,
                metric_std,
                best_mean,
                best_std,
            }
        })
        .collect()
}

fn summary_csv(rows: &[CheckpointSummary]) -> String {
    let mut out = String::from("checkpoint,round,runs,metric_mean,metric_std,best_mean,best_std\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{:.6},{:.6}",
            r.tag, r.round, r.runs, r.metric_mean, r.metric_std, r.best_mean, r.best_std
        );
    }
    out
}

fn timing_csv(outcome: &SeedOutcome) -> String {
    let mut out = String::from("round,wall_time_ms\n");
    for r in &outcome.log.records {
        let _ = writeln!(out, "{},{:.3}", r.round, r.wall_time_ms);
    }
    out
}

/// Runs every seed (concurrently), writing `metrics_<run>.jsonl` and
/// `timing_<run>.csv` per completed run and `FAILED_<run>.txt` per failed
/// one. `summary.csv` covers completed runs and is written last.
pub fn cli_train(cfg: &ExperimentConfig, out: &Path) -> Result<TrainArtifacts> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let spec = resolve_model(cfg, &data.train)?;
    let results: Vec<(usize, u64, Result<(SeedOutcome, PathBuf)>)> = cfg
        .report
        .seeds
        .par_iter()
        .enumerate()
        .map(|(i, &s)| {
            let stem = run_stem(i, s);
            let res = run_seed(cfg, &data, &spec, s).and_then(|outcome| {
                let path = out.join(format!("metrics_{stem}.jsonl"));
                write_atomic(&path, outcome.log.to_jsonl().as_bytes())?;
                write_atomic(&out.join(format!("timing_{stem}.csv")), timing_csv(&outcome).as_bytes())?;
                Ok((outcome, path))
            });
            (i, s, res)
        })
        .collect();

    let mut outcomes = Vec::new();
    let mut metrics_files = Vec::new();
    let mut failures = Vec::new();
    for (index, run_seed, res) in results {
        match res {
            Ok((outcome, path)) => {
                outcomes.push(outcome);
                metrics_files.push(path);
            }
            Err(e) => {
                let marker = out.join(format!("FAILED_{}.txt", run_stem(index, run_seed)));
                write_atomic(&marker, format!("{e}\n").as_bytes())?;
                failures.push(RunFailure {
                    index,
                    run_seed,
                    error: e.to_string(),
                });
            }
        }
    }
    let summary = summarize(&outcomes);
    let summary_file = out.join("summary.csv");
    write_atomic(&summary_file, summary_csv(&summary).as_bytes())?;
    Ok(TrainArtifacts {
        metrics_files,
        summary_file,
        summary,
        outcomes,
        failures,
    })
}

/// Preset comparison grids over a base config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepGrid {
    /// Centralized baseline against label-skewed FedAvg at alpha 0.5 and 0.1.
    Skew,
    /// Sample ratio 0.1 against 0.3.
    Participation,
    /// Noise ratio 0, 0.1 and 0.3.
    Noise,
    /// Full32 against half16.
    Precision,
}

impl SweepGrid {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "skew" => Some(Self::Skew),
            "participation" => Some(Self::Participation),
            "noise" => Some(Self::Noise),
            "precision" => Some(Self::Precision),
            _ => None,
        }
    }
}

/// `(directory name, overrides)` per variant of `grid`.
pub fn sweep_variants(grid: SweepGrid) -> Vec<(&'static str, Vec<String>)> {
    let o = |items: &[&str]| items.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    match grid {
        SweepGrid::Skew => vec![
            ("centralized", o(&["partition.scheme=\"centralized\""])),
            ("alpha_0.5", o(&["partition.scheme=\"labels\"", "partition.alpha=0.5"])),
            ("alpha_0.1", o(&["partition.scheme=\"labels\"", "partition.alpha=0.1"])),
        ],
        SweepGrid::Participation => vec![
            ("sample_0.1", o(&["fed.sample_ratio=0.1"])),
            ("sample_0.3", o(&["fed.sample_ratio=0.3"])),
        ],
        SweepGrid::Noise => vec![
            ("noise_0", o(&["noise.ratio=0.0"])),
            ("noise_0.1", o(&["noise.ratio=0.1"])),
            ("noise_0.3", o(&["noise.ratio=0.3"])),
        ],
        SweepGrid::Precision => vec![
            ("full32", o(&["quant.precision=\"full32\""])),
            ("half16", o(&["quant.precision=\"half16\""])),
        ],
    }
}

/// Trains every variant of `grid` into `out/<variant>/`, then writes the
/// consolidated report into `out`.
pub fn sweep(base: &ExperimentConfig, grid: SweepGrid, out: &Path) -> Result<(Vec<TrainArtifacts>, report::ReportTable)> {
    let mut runs = Vec::new();
    for (name, overrides) in sweep_variants(grid) {
        let cfg = base.with_overrides(&overrides)?;
        runs.push(cli_train(&cfg, &out.join(name))?);
    }
    let table = report::cli_report(out, out)?;
    if runs.iter().any(|r| !r.all_completed()) {
        let failed: usize = runs.iter().map(|r| r.failures.len()).sum();
        return Err(Error::invalid(format!("{failed} sweep run(s) failed; see FAILED_* markers")));
    }
    Ok((runs, table))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std() {
        assert_eq!(mean_std(&[7.0, 7.0, 7.0]), (7.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }

    #[test]
    fn grids_parse() {
        assert_eq!(SweepGrid::parse("noise"), Some(SweepGrid::Noise));
        assert_eq!(SweepGrid::parse("table9"), None);
        for grid in [SweepGrid::Skew, SweepGrid::Participation, SweepGrid::Noise, SweepGrid::Precision] {
            for (_, overrides) in sweep_variants(grid) {
                ExperimentConfig::default().with_overrides(&overrides).unwrap().validate().unwrap();
            }
        }
    }
}
