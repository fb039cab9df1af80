//! Declarative experiment pipeline: dataset -> noise -> partition -> rounds.
//!
//! Each run seed `s` derives its own partition, noise and training seeds
//! from the configured base seeds, so seeds are independent and may run
//! concurrently. Every file is written through [`write_atomic`].

mod commands;
mod config;
mod report;

use std::fs;
use std::path::Path;

use crate::dataset::{self, TabularDataset, TargetKind};
use crate::error::{Error, Result};
use crate::fedengine::{self, MetricsLog, RoundConfig, ServerOptimizer};
use crate::model::{self, ModelSpec, Task};
use crate::noise::{self, NoiseAudit, NoiseConfig, NoiseMode, TransitionMatrix};
use crate::partition::{self, HeterogeneityReport, PartitionFile, PartitionMap, Scheme};
use crate::quant::Precision;
use crate::seed;

pub use commands::{
    cli_noise, cli_partition, cli_train, sweep, sweep_variants, CheckpointSummary, NoiseArtifacts, PartitionArtifacts,
    RunFailure, SweepGrid, TrainArtifacts,
};
pub use config::{
    DatasetKind, DatasetSection, ExperimentConfig, FedSection, ModelSection, NoiseSection, PartitionSection,
    QuantSection, ReportSection,
};
pub use report::{cli_report, ReportColumn, ReportTable, TrendCheck};

/// Writes via a sibling temp file and a rename, creating parent directories.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} has no file name", path.display())))?
        .to_string_lossy();
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Runs `f` on a dedicated pool of `threads` workers, or on the global pool
/// when `None`. Results never depend on the worker count.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(0) => Err(Error::config("threads", "must be >= 1")),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Standardized train and test splits.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: TabularDataset,
    pub test: TabularDataset,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let d = &cfg.dataset;
    let full = match d.kind {
        DatasetKind::SyntheticClassification => {
            dataset::make_synthetic_classification(d.n, d.d, d.c, d.separation, d.seed)?
        }
        DatasetKind::SyntheticRegression => dataset::make_synthetic_regression(d.n, d.d, d.noise_sd, d.seed)?,
        DatasetKind::Csv => {
            let path = d.path.as_ref().ok_or_else(|| Error::config("dataset.path", "required for csv datasets"))?;
            let column = d
                .target_column
                .as_deref()
                .ok_or_else(|| Error::config("dataset.target_column", "required for csv datasets"))?;
            dataset::load_csv(path, column, d.target_kind)?
        }
    };
    let (train, test) = full.train_test_split(d.test_fraction, d.seed)?;
    let (train, mut others, _) = dataset::standardize(&train, &[test])?;
    Ok(PreparedData {
        train,
        test: others.remove(0),
    })
}

pub fn resolve_model(cfg: &ExperimentConfig, train: &TabularDataset) -> Result<ModelSpec> {
    let data_task = match train.targets().kind() {
        TargetKind::Categorical => Task::Classification,
        TargetKind::Continuous => Task::Regression,
    };
    let task = cfg.model.task.unwrap_or(data_task);
    if task != data_task {
        return Err(Error::config("model.task", format!("{task:?} does not match the dataset targets")));
    }
    let output = train.targets().num_classes().unwrap_or(1);
    let spec = match (&cfg.model.layers, cfg.model.preset.as_str()) {
        (Some(layers), _) => ModelSpec::new(layers.clone(), cfg.model.dropout.unwrap_or(0.0), task)
            .map_err(|e| Error::config("model.layers", e.to_string()))?,
        (None, "aep-mlp") => {
            let base = ModelSpec::aep_mlp();
            match cfg.model.dropout {
                Some(rate) => ModelSpec::new(base.layer_sizes().to_vec(), rate, base.task())?,
                None => base,
            }
        }
        (None, "toy-mlp") => {
            let base = ModelSpec::toy_mlp(train.dims(), output, task)?;
            match cfg.model.dropout {
                Some(rate) => ModelSpec::new(base.layer_sizes().to_vec(), rate, task)?,
                None => base,
            }
        }
        (None, other) => return Err(Error::config("model.preset", format!("unknown preset {other:?}"))),
    };
    spec.check_dataset(train).map_err(|e| Error::config("model", e.to_string()))?;
    Ok(spec)
}

/// Seeds used by one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSeeds {
    pub partition: u64,
    pub noise: u64,
    pub master: u64,
}

impl RunSeeds {
    pub fn derive(cfg: &ExperimentConfig, run_seed: u64) -> Self {
        Self {
            partition: seed::derive(cfg.partition.seed, &[seed::tag::PARTITION, run_seed]),
            noise: seed::derive(cfg.noise.seed, &[seed::tag::NOISE, run_seed]),
            master: seed::derive(cfg.fed.seed, &[run_seed]),
        }
    }
}

pub fn build_partition(cfg: &ExperimentConfig, train: &TabularDataset, partition_seed: u64) -> Result<PartitionFile> {
    let p = &cfg.partition;
    let map = match p.scheme {
        Scheme::Centralized => PartitionMap::single_client(train.len())?,
        Scheme::Labels => {
            if train.targets().kind() != TargetKind::Categorical {
                return Err(Error::config("partition.scheme", "label scheme requires categorical targets"));
            }
            partition::partition_by_labels_with_min(
                train.targets(),
                p.num_clients,
                p.alpha,
                partition_seed,
                p.min_samples_per_client,
            )?
        }
        Scheme::Features => partition::partition_by_features(
            train.features(),
            p.num_pseudo_classes,
            p.num_clients,
            p.alpha,
            partition_seed,
        )?,
        Scheme::Quantiles => {
            if train.targets().kind() != TargetKind::Continuous {
                return Err(Error::config(
                    "partition.scheme",
                    "quantile scheme requires continuous targets",
                ));
            }
            partition::partition_by_quantiles(train.targets(), p.num_bins, p.num_clients, p.alpha, partition_seed)?
        }
    };
    Ok(PartitionFile {
        scheme: p.scheme,
        alpha: (p.scheme != Scheme::Centralized).then_some(p.alpha),
        seed: partition_seed,
        map,
    })
}

/// Transition matrix, noisy training labels and their audit.
#[derive(Debug, Clone)]
pub struct NoiseOutcome {
    pub matrix: TransitionMatrix,
    pub noisy_train: TabularDataset,
    pub audit: NoiseAudit,
}

/// Centralized desk-scale training whose confusion matrix becomes Q.
pub fn confusion_source(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    spec: &ModelSpec,
    noise_seed: u64,
) -> Result<TransitionMatrix> {
    let round_cfg = RoundConfig {
        total_rounds: cfg.noise.confusion_epochs,
        sample_ratio: 1.0,
        local_epochs: 1,
        batch_size: cfg.fed.batch_size,
        client_lr: cfg.fed.client_lr,
        optimizer: ServerOptimizer::FedAvg,
        master_seed: seed::derive(noise_seed, &[seed::tag::CONFUSION]),
        eval_every: 0,
        precision: Precision::Full64,
        ..RoundConfig::default()
    };
    let single = PartitionMap::single_client(data.train.len())?;
    let outcome = fedengine::run_experiment(&data.train, &data.test, &single, spec, &round_cfg)?;
    let confusion = model::confusion_matrix(spec, &outcome.state.global, &data.train)?;
    noise::build_transition_matrix(&confusion)
}

pub fn prepare_noise(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    spec: &ModelSpec,
    noise_seed: u64,
) -> Result<NoiseOutcome> {
    let labels = data
        .train
        .targets()
        .labels()
        .ok_or_else(|| Error::config("noise", "label noise requires categorical targets"))?;
    let classes = data.train.targets().num_classes().unwrap_or(0);
    let matrix = match (&cfg.noise.matrix_path, cfg.noise.mode) {
        (Some(path), _) => TransitionMatrix::read(path)?,
        (None, NoiseMode::Uniform) => TransitionMatrix::uniform_off_diagonal(classes)?,
        (None, NoiseMode::Matrix) => confusion_source(cfg, data, spec, noise_seed)?,
    };
    if matrix.num_classes() != classes {
        return Err(Error::config(
            "noise.matrix_path",
            format!("matrix has {} classes, dataset has {classes}", matrix.num_classes()),
        ));
    }
    let noise_cfg = NoiseConfig {
        ratio: cfg.noise.ratio,
        mode: cfg.noise.mode,
        seed: noise_seed,
    };
    let (noisy, _) = noise::inject_noise(labels, &matrix, &noise_cfg)?;
    let audit = noise::audit(labels, &noisy, &matrix, cfg.noise.ratio)?;
    let noisy_train = data
        .train
        .clone()
        .with_targets(dataset::Targets::categorical(noisy, classes)?)?;
    Ok(NoiseOutcome {
        matrix,
        noisy_train,
        audit,
    })
}

/// Everything one run seed produces.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub run_seed: u64,
    pub seeds: RunSeeds,
    pub partition: PartitionFile,
    pub heterogeneity: HeterogeneityReport,
    pub noise: Option<NoiseAudit>,
    pub log: MetricsLog,
}

/// The config that reproduces exactly one run: `report.seeds = [run_seed]`
/// and no output directory.
pub fn single_run_config(cfg: &ExperimentConfig, run_seed: u64) -> ExperimentConfig {
    let mut echo = cfg.clone();
    echo.report.seeds = vec![run_seed];
    echo.report.output_dir = None;
    echo
}

const MEMORY_NOTE: &str = "param_bytes counts the parameter payload only; process memory is not measured";

pub fn run_seed(cfg: &ExperimentConfig, data: &PreparedData, spec: &ModelSpec, run_seed: u64) -> Result<SeedOutcome> {
    let seeds = RunSeeds::derive(cfg, run_seed);
    let (train, noise) = if cfg.noise.ratio > 0.0 {
        let outcome = prepare_noise(cfg, data, spec, seeds.noise)?;
        (outcome.noisy_train, Some(outcome.audit))
    } else {
        (data.train.clone(), None)
    };
    let partition = build_partition(cfg, &train, seeds.partition)?;
    let heterogeneity = partition::heterogeneity_report(&partition.map, train.targets())?;
    let outcome = fedengine::run_experiment(&train, &data.test, &partition.map, spec, &cfg.round_config(seeds.master))?;
    let mut log = outcome.log;
    log.header.config = serde_json::to_value(single_run_config(cfg, run_seed)).expect("config serializes");
    log.header.seed = run_seed;
    log.header.note = Some(MEMORY_NOTE.into());
    Ok(SeedOutcome {
        run_seed,
        seeds,
        partition,
        heterogeneity,
        noise,
        log,
    })
}

/// Rebuilds the config echoed in a metrics header.
pub fn config_from_header(log: &MetricsLog) -> Result<ExperimentConfig> {
    serde_json::from_value(log.header.config.clone())
        .map_err(|e| Error::Format(format!("header config: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.dataset.n = 300;
        cfg.dataset.d = 2;
        cfg.dataset.c = 3;
        cfg.dataset.separation = 6.0;
        cfg.partition.num_clients = 5;
        cfg.fed.rounds = 4;
        cfg.report.seeds = vec![1];
        cfg
    }

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub").join("a.txt");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "two");
        let entries: Vec<_> = fs::read_dir(dir.path().join("sub")).unwrap().collect();
        assert_eq!(entries.len(), 1);
    }

    #[test]
    fn run_seeds_are_independent_per_seed() {
        let cfg = small();
        let a = RunSeeds::derive(&cfg, 1);
        let b = RunSeeds::derive(&cfg, 2);
        assert_ne!(a, b);
        assert_eq!(a, RunSeeds::derive(&cfg, 1));
        assert_ne!(a.partition, a.noise);
    }

    #[test]
    fn model_resolution() {
        let cfg = small();
        let data = prepare_data(&cfg).unwrap();
        let spec = resolve_model(&cfg, &data.train).unwrap();
        assert_eq!(spec.layer_sizes(), &[2, 64, 64, 3]);
        let mut bad = cfg.clone();
        bad.model.layers = Some(vec![5, 3]);
        assert!(resolve_model(&bad, &data.train).unwrap_err().to_string().starts_with("model"));
        let mut aep = cfg.clone();
        aep.model.preset = "aep-mlp".into();
        assert!(resolve_model(&aep, &data.train).is_err());
        let mut reg = cfg;
        reg.model.task = Some(Task::Regression);
        assert!(resolve_model(&reg, &data.train).is_err());
    }

    #[test]
    fn quantile_scheme_rejects_classification() {
        let mut cfg = small();
        cfg.partition.scheme = Scheme::Quantiles;
        let data = prepare_data(&cfg).unwrap();
        let err = build_partition(&cfg, &data.train, 0).unwrap_err();
        assert!(err.to_string().contains("quantile scheme requires continuous targets"));
    }

    #[test]
    fn header_echo_reproduces_the_run() {
        let cfg = small();
        let data = prepare_data(&cfg).unwrap();
        let spec = resolve_model(&cfg, &data.train).unwrap();
        let first = run_seed(&cfg, &data, &spec, 1).unwrap();
        let echo = config_from_header(&first.log).unwrap();
        echo.validate().unwrap();
        let data2 = prepare_data(&echo).unwrap();
        let spec2 = resolve_model(&echo, &data2.train).unwrap();
        let again = run_seed(&echo, &data2, &spec2, echo.report.seeds[0]).unwrap();
        assert_eq!(first.log.to_jsonl(), again.log.to_jsonl());
    }

    #[test]
    fn uniform_noise_needs_no_training() {
        let mut cfg = small();
        cfg.noise.ratio = 0.3;
        cfg.noise.mode = NoiseMode::Uniform;
        let data = prepare_data(&cfg).unwrap();
        let spec = resolve_model(&cfg, &data.train).unwrap();
        let out = prepare_noise(&cfg, &data, &spec, 5).unwrap();
        assert_eq!(out.matrix, TransitionMatrix::uniform_off_diagonal(3).unwrap());
        assert!((out.audit.measurement.rate - 0.3).abs() < 0.1);
    }
}
