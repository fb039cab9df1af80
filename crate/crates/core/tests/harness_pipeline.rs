use std::fs;
use std::path::Path;

use fedsim::fedengine::MetricsLog;
use fedsim::harness::{self, DatasetKind, ExperimentConfig, SweepGrid};
use fedsim::noise::TransitionMatrix;
use fedsim::partition::Scheme;
use fedsim::quant::Precision;

fn blobs() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset.n = 600;
    cfg.dataset.d = 2;
    cfg.dataset.separation = 6.0;
    cfg.partition.num_clients = 10;
    cfg.fed.rounds = 4;
    cfg
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| !p.file_name().unwrap().to_string_lossy().starts_with("timing_"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn partition_files_are_reproducible() {
    let mut cfg = blobs();
    cfg.partition.alpha = 0.1;
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = harness::cli_partition(&cfg, a.path()).unwrap();
    harness::cli_partition(&cfg, b.path()).unwrap();
    assert_eq!(first.partition_files.len(), 3);
    assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
    let text = fs::read_to_string(&first.partition_files[0]).unwrap();
    let parsed = fedsim::partition::PartitionFile::parse(&text).unwrap();
    assert_eq!(parsed.map.num_clients(), 10);
    assert_eq!(parsed.alpha, Some(0.1));
}

#[test]
fn partition_report_skew_follows_alpha() {
    let mean_kl = |alpha: f64| {
        let mut cfg = blobs();
        cfg.dataset.n = 2500;
        cfg.partition.num_clients = 20;
        cfg.partition.alpha = alpha;
        cfg.report.seeds = (1..=20).collect();
        let dir = tempfile::tempdir().unwrap();
        let out = harness::cli_partition(&cfg, dir.path()).unwrap();
        out.reports.iter().map(|r| r.mean_kl_to_global).sum::<f64>() / 20.0
    };
    assert!(mean_kl(0.1) > mean_kl(0.5));
}

#[test]
fn quantile_scheme_needs_continuous_targets() {
    let mut cfg = blobs();
    cfg.partition.scheme = Scheme::Quantiles;
    let dir = tempfile::tempdir().unwrap();
    let err = harness::cli_partition(&cfg, dir.path()).unwrap_err();
    assert_eq!(err.to_string(), "partition.scheme: quantile scheme requires continuous targets");
}

#[test]
fn train_writes_one_log_per_seed_and_a_summary() {
    let cfg = blobs();
    let dir = tempfile::tempdir().unwrap();
    let out = harness::cli_train(&cfg, dir.path()).unwrap();
    assert!(out.all_completed());
    assert_eq!(out.metrics_files.len(), 3);
    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
    assert_eq!(out.summary.iter().map(|r| r.tag.as_str()).collect::<Vec<_>>(), ["50%", "80%", "100%"]);
    let log = MetricsLog::from_jsonl(&fs::read_to_string(&out.metrics_files[0]).unwrap()).unwrap();
    assert_eq!(log.records.len(), 4);
    assert!(log.header.note.is_some());
}

#[test]
fn identical_seeds_give_zero_spread() {
    let mut cfg = blobs();
    cfg.report.seeds = vec![7, 7, 7];
    let dir = tempfile::tempdir().unwrap();
    let out = harness::cli_train(&cfg, dir.path()).unwrap();
    assert_eq!(out.metrics_files.len(), 3);
    for row in &out.summary {
        assert_eq!(row.metric_std, 0.0);
        assert_eq!(row.best_std, 0.0);
    }
}

#[test]
fn echoed_config_reproduces_the_log() {
    let mut cfg = blobs();
    cfg.noise.ratio = 0.1;
    cfg.noise.confusion_epochs = 2;
    cfg.fed.optimizer = fedsim::fedengine::ServerOptimizer::FedOpt;
    cfg.quant.precision = Precision::Half16;
    cfg.report.seeds = vec![4, 9];
    let dir = tempfile::tempdir().unwrap();
    let out = harness::cli_train(&cfg, dir.path()).unwrap();
    let original = fs::read_to_string(&out.metrics_files[1]).unwrap();
    let echo = harness::config_from_header(&MetricsLog::from_jsonl(&original).unwrap()).unwrap();
    echo.validate().unwrap();
    assert_eq!(echo.report.seeds, vec![9]);
    let again_dir = tempfile::tempdir().unwrap();
    let again = harness::cli_train(&echo, again_dir.path()).unwrap();
    assert_eq!(fs::read_to_string(&again.metrics_files[0]).unwrap(), original);
}

#[test]
fn failed_seeds_leave_markers_and_partial_summary() {
    let mut cfg = blobs();
    cfg.dataset.kind = DatasetKind::SyntheticRegression;
    cfg.partition.scheme = Scheme::Quantiles;
    cfg.fed.client_lr = 1e300;
    cfg.report.seeds = vec![1, 2];
    let dir = tempfile::tempdir().unwrap();
    let out = harness::cli_train(&cfg, dir.path()).unwrap();
    assert!(!out.all_completed());
    assert_eq!(out.failures.len(), 2);
    assert!(dir.path().join("FAILED_run0_seed1.txt").exists());
    assert!(dir.path().join("FAILED_run1_seed2.txt").exists());
    assert_eq!(fs::read_to_string(dir.path().join("summary.csv")).unwrap().lines().count(), 1);
}

#[test]
fn zero_noise_audit_reports_zero_rate() {
    let mut cfg = blobs();
    cfg.noise.confusion_epochs = 2;
    cfg.report.seeds = vec![1];
    let dir = tempfile::tempdir().unwrap();
    let out = harness::cli_noise(&cfg, dir.path()).unwrap();
    assert_eq!(out.audits[0].measurement.rate, 0.0);
    assert!(fs::read_to_string(&out.audit_files[0]).unwrap().contains("empirical_rate: 0.000000"));
    TransitionMatrix::read(&out.matrix_files[0]).unwrap();
}

#[test]
fn preset_noise_rates_at_scale() {
    let dir = tempfile::tempdir().unwrap();
    let q_path = dir.path().join("q.txt");
    let mut rows = vec![vec![0.0; 10]; 10];
    for (i, row) in rows.iter_mut().enumerate() {
        row[i] = 0.8;
        row[(i + 1) % 10] = 0.15;
        row[(i + 3) % 10] = 0.05;
    }
    fs::write(&q_path, TransitionMatrix::new(rows).unwrap().to_text()).unwrap();
    for ratio in [0.1, 0.3] {
        let mut cfg = blobs();
        cfg.dataset.n = 125_000;
        cfg.noise.ratio = ratio;
        cfg.noise.matrix_path = Some(q_path.clone());
        cfg.report.seeds = vec![1];
        let out = harness::cli_noise(&cfg, &dir.path().join(format!("r{ratio}"))).unwrap();
        assert_eq!(out.audits[0].measurement.conditional.len(), 10);
        assert!((out.audits[0].measurement.rate - ratio).abs() <= 0.01);
        // per-row TV needs about 3000 flips per row to sit well inside 0.03
        if ratio == 0.3 {
            assert!(out.audits[0].row_tv.iter().flatten().all(|&tv| tv <= 0.03), "{}", out.audits[0].render());
        }
    }
}

#[test]
fn confusion_source_on_separable_blobs_is_near_identity() {
    let mut cfg = blobs();
    cfg.dataset.n = 2500;
    cfg.noise.ratio = 0.1;
    cfg.report.seeds = vec![1];
    let dir = tempfile::tempdir().unwrap();
    let out = harness::cli_noise(&cfg, dir.path()).unwrap();
    let q = &out.matrices[0];
    let diag = (0..10).map(|i| q.get(i, i)).sum::<f64>() / 10.0;
    assert!(diag >= 0.9, "diagonal mass {diag}");
}

#[test]
fn aep_memory_line_counts_half_precision_bytes() {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset.kind = DatasetKind::SyntheticRegression;
    cfg.dataset.n = 60;
    cfg.dataset.d = 18;
    cfg.model.preset = "aep-mlp".into();
    cfg.partition.scheme = Scheme::Centralized;
    cfg.fed.rounds = 1;
    cfg.fed.client_lr = 0.001;
    cfg.quant.precision = Precision::Half16;
    cfg.report.seeds = vec![1];
    let dir = tempfile::tempdir().unwrap();
    let out = harness::cli_train(&cfg, dir.path()).unwrap();
    let log = &out.outcomes[0].log;
    assert_eq!(log.header.param_count, 888_091);
    assert_eq!(log.header.memory, "param_bytes=1776182");
}

#[test]
fn precision_sweep_reports_two_columns() {
    let mut cfg = blobs();
    cfg.report.seeds = vec![1, 2];
    let dir = tempfile::tempdir().unwrap();
    let (runs, table) = harness::sweep(&cfg, SweepGrid::Precision, dir.path()).unwrap();
    assert_eq!(runs.len(), 2);
    assert_eq!(table.columns.len(), 2);
    assert_eq!(table.varying_keys, vec!["quant.precision".to_string()]);
    assert_eq!(table.trends.len(), 1);
    let csv = fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn report_lists_corrupt_logs_and_handles_empty_dirs() {
    let dir = tempfile::tempdir().unwrap();
    let empty = harness::cli_report(dir.path(), dir.path()).unwrap();
    assert!(empty.columns.is_empty());
    assert!(fs::read_to_string(dir.path().join("report.txt")).unwrap().starts_with("config"));

    fs::write(dir.path().join("metrics_bad.jsonl"), "{not json\n").unwrap();
    let table = harness::cli_report(dir.path(), dir.path()).unwrap();
    assert_eq!(table.problems.len(), 1);
    assert!(fs::read_to_string(dir.path().join("report.txt")).unwrap().contains("unreadable"));
}

#[test]
fn toml_file_with_unknown_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.toml");
    fs::write(&path, "[partition]\nalpha = 0.1\nclients = 4\n").unwrap();
    let err = ExperimentConfig::load(&path, &[]).unwrap_err();
    assert_eq!(err.to_string(), "partition.clients: unknown key");
}
