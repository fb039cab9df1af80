//! Federated rounds: client sampling, local SGD, FedAvg and FedOPT
//! aggregation, and the per-round metrics log.
//!
//! Every client's randomness is derived up front from
//! `(master_seed, round, client_id)` and updates are sorted by client id
//! before reduction, so a round produces the same bits whether clients run
//! sequentially or on any number of threads.

use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{TabularDataset, Targets};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{self, BatchTargets, ModelSpec, ParamVector};
use crate::partition::PartitionMap;
use crate::quant::{self, Precision, QuantizedVector};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServerOptimizer {
    FedAvg,
    /// Adam on the pseudo-gradient.
    FedOpt,
    /// Plain server SGD on the pseudo-gradient.
    #[serde(rename = "fedopt_sgd")]
    FedOptSgd,
}

impl ServerOptimizer {
    pub fn as_str(&self) -> &'static str {
        match self {
            ServerOptimizer::FedAvg => "fedavg",
            ServerOptimizer::FedOpt => "fedopt",
            ServerOptimizer::FedOptSgd => "fedopt_sgd",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    pub total_rounds: usize,
    pub sample_ratio: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub client_lr: f64,
    pub optimizer: ServerOptimizer,
    pub server_lr: f64,
    pub server_betas: (f64, f64),
    pub server_tau: f64,
    pub master_seed: u64,
    /// Evaluate every this many rounds; 0 evaluates at checkpoints only.
    pub eval_every: usize,
    pub precision: Precision,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            total_rounds: 60,
            sample_ratio: 0.3,
            local_epochs: 1,
            batch_size: 32,
            client_lr: 0.05,
            optimizer: ServerOptimizer::FedAvg,
            server_lr: 0.01,
            server_betas: (0.9, 0.999),
            server_tau: 1e-8,
            master_seed: 0,
            eval_every: 1,
            precision: Precision::Full64,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, reason: &str| if ok { Ok(()) } else { Err(Error::config(key, reason)) };
        check(self.sample_ratio > 0.0 && self.sample_ratio <= 1.0, "fed.sample_ratio", "must be in (0, 1]")?;
        check(self.local_epochs >= 1, "fed.local_epochs", "must be >= 1")?;
        check(self.batch_size >= 1, "fed.batch_size", "must be >= 1")?;
        check(self.client_lr > 0.0 && self.client_lr.is_finite(), "fed.client_lr", "must be finite and > 0")?;
        if self.optimizer != ServerOptimizer::FedAvg {
            check(self.server_lr > 0.0 && self.server_lr.is_finite(), "fed.server_lr", "must be finite and > 0")?;
            let (b1, b2) = self.server_betas;
            check((0.0..1.0).contains(&b1), "fed.beta1", "must be in [0, 1)")?;
            check((0.0..1.0).contains(&b2), "fed.beta2", "must be in [0, 1)")?;
            check(self.server_tau > 0.0 && self.server_tau.is_finite(), "fed.tau", "must be finite and > 0")?;
        }
        Ok(())
    }
}

/// Seed derivations shared by the engine and anything that must replay it.
pub mod seeds {
    use crate::seed::{derive, tag};

    /// Seed of the generator that shuffles a client's data each epoch.
    pub fn shuffle(master: u64, round: usize, client: usize) -> u64 {
        derive(master, &[tag::LOCAL_SHUFFLE, round as u64, client as u64])
    }

    /// Dropout seed of local step `step` (counted across epochs).
    pub fn dropout(master: u64, round: usize, client: usize, step: usize) -> u64 {
        derive(master, &[tag::DROPOUT, round as u64, client as u64, step as u64])
    }

    pub fn sampling(master: u64, round: usize) -> u64 {
        derive(master, &[tag::CLIENT_SAMPLING, round as u64])
    }
}

/// Number of clients drawn per round: `max(1, round(ratio * M))`.
pub fn clients_per_round(num_clients: usize, ratio: f64) -> usize {
    ((ratio * num_clients as f64).round() as usize).clamp(1, num_clients.max(1))
}

/// Uniform draw without replacement, returned in ascending order.
pub fn sample_clients(round: usize, num_clients: usize, ratio: f64, master_seed: u64) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::invalid(format!("sample ratio {ratio} outside (0, 1]")));
    }
    if num_clients == 0 {
        return Err(Error::invalid("num_clients must be >= 1"));
    }
    let k = clients_per_round(num_clients, ratio);
    let mut rng = seed::rng(seeds::sampling(master_seed, round));
    let mut ids = index::sample(&mut rng, num_clients, k).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// A client's shard: rows `indices` of a shared dataset.
#[derive(Debug, Clone, Copy)]
pub struct ClientData<'a> {
    pub features: &'a Matrix,
    pub targets: &'a Targets,
    pub indices: &'a [usize],
}

impl<'a> ClientData<'a> {
    pub fn new(dataset: &'a TabularDataset, indices: &'a [usize]) -> Self {
        Self {
            features: dataset.features(),
            targets: dataset.targets(),
            indices,
        }
    }
}

/// Gathered batch; owns its rows so it can be built from any index order.
pub struct Batch {
    pub inputs: Matrix,
    targets: BatchData,
}

enum BatchData {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl Batch {
    pub fn gather(features: &Matrix, targets: &Targets, rows: &[usize]) -> Self {
        let targets = match targets {
            Targets::Categorical { values, .. } => BatchData::Classes(rows.iter().map(|&i| values[i]).collect()),
            Targets::Continuous(v) => BatchData::Values(rows.iter().map(|&i| v[i]).collect()),
        };
        Self {
            inputs: features.select_rows(rows),
            targets,
        }
    }

    pub fn targets(&self) -> BatchTargets<'_> {
        match &self.targets {
            BatchData::Classes(c) => BatchTargets::Classes(c),
            BatchData::Values(v) => BatchTargets::Values(v),
        }
    }
}

/// A client's contribution: `local_final - global_snapshot`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub num_samples: usize,
    pub delta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalOutcome {
    pub update: ClientUpdate,
    /// Mean of the mini-batch losses seen during local training.
    pub mean_loss: f64,
}

/// Runs `local_epochs` of shuffled mini-batch SGD from a copy of `global`
/// on the `cfg.precision` grid. The last short batch of each epoch is kept.
pub fn local_train(
    global: &ParamVector,
    spec: &ModelSpec,
    data: ClientData<'_>,
    cfg: &RoundConfig,
    round: usize,
    client_id: usize,
) -> Result<LocalOutcome> {
    if data.indices.is_empty() {
        return Err(Error::invalid(format!("client {client_id} has no data")));
    }
    if cfg.local_epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::config("fed.local_epochs", "local epochs and batch size must be >= 1"));
    }
    let mut rng = seed::rng(seeds::shuffle(cfg.master_seed, round, client_id));
    let mut params = global.clone();
    let mut order = data.indices.to_vec();
    let mut step = 0;
    let mut loss_sum = 0.0;
    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        for rows in order.chunks(cfg.batch_size) {
            let batch = Batch::gather(data.features, data.targets, rows);
            let (loss, grad) = model::loss_and_grad(
                spec,
                &params,
                &batch.inputs,
                batch.targets(),
                true,
                seeds::dropout(cfg.master_seed, round, client_id, step),
            )?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("client {client_id} loss at step {step}")));
            }
            params = quant::quantized_sgd_step(&params, &grad, cfg.client_lr, cfg.precision)?;
            loss_sum += loss;
            step += 1;
        }
    }
    let delta = params.values().iter().zip(global.values()).map(|(l, g)| l - g).collect();
    Ok(LocalOutcome {
        update: ClientUpdate {
            client_id,
            num_samples: data.indices.len(),
            delta,
        },
        mean_loss: loss_sum / step as f64,
    })
}

/// Sample-count-weighted mean delta, reduced in ascending client-id order.
pub fn weighted_mean_delta(len: usize, updates: &[ClientUpdate]) -> Result<Vec<f64>> {
    if updates.is_empty() {
        return Err(Error::invalid("no client updates to aggregate"));
    }
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    if sorted.windows(2).any(|w| w[0].client_id == w[1].client_id) {
        return Err(Error::invalid("duplicate client id among updates"));
    }
    for u in &sorted {
        if u.delta.len() != len {
            return Err(Error::shape(format!(
                "client {} sent {} values for {len} parameters",
                u.client_id,
                u.delta.len()
            )));
        }
        if u.num_samples == 0 {
            return Err(Error::invalid(format!("client {} reports zero samples", u.client_id)));
        }
    }
    let total: usize = sorted.iter().map(|u| u.num_samples).sum();
    let weights: Vec<f64> = sorted.iter().map(|u| u.num_samples as f64 / total as f64).collect();
    let mut mean: Vec<f64> = sorted[0].delta.iter().map(|d| weights[0] * d).collect();
    for (u, w) in sorted.iter().zip(&weights).skip(1) {
        for (m, d) in mean.iter_mut().zip(&u.delta) {
            *m += w * d;
        }
    }
    Ok(mean)
}

/// `global + sum_k (n_k / n) * delta_k`.
pub fn aggregate_fedavg(global: &ParamVector, updates: &[ClientUpdate]) -> Result<ParamVector> {
    let mean = weighted_mean_delta(global.len(), updates)?;
    Ok(global.with_values(global.values().iter().zip(&mean).map(|(g, m)| g + m).collect()))
}

/// Global model plus server-optimizer moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub global: ParamVector,
    pub round: usize,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl ServerState {
    pub fn new(global: ParamVector) -> Self {
        let n = global.len();
        Self {
            global,
            round: 0,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
        }
    }
}

/// Server Adam on the pseudo-gradient `g = -(weighted mean delta)`, with
/// bias correction at step `t = round + 1`.
pub fn aggregate_fedopt(state: &ServerState, updates: &[ClientUpdate], lr: f64, betas: (f64, f64), tau: f64) -> Result<ServerState> {
    let mean = weighted_mean_delta(state.global.len(), updates)?;
    let (b1, b2) = betas;
    let t = (state.round + 1) as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let mut m = state.first_moment.clone();
    let mut v = state.second_moment.clone();
    let mut params = state.global.values().to_vec();
    for i in 0..params.len() {
        let g = -mean[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + tau);
    }
    Ok(ServerState {
        global: state.global.with_values(params),
        round: state.round + 1,
        first_moment: m,
        second_moment: v,
    })
}

/// Server SGD on the pseudo-gradient: `params - lr * g`. With `lr = 1` this
/// is bit-identical to [`aggregate_fedavg`].
pub fn aggregate_fedopt_sgd(state: &ServerState, updates: &[ClientUpdate], lr: f64) -> Result<ServerState> {
    let mean = weighted_mean_delta(state.global.len(), updates)?;
    let params = state
        .global
        .values()
        .iter()
        .zip(&mean)
        .map(|(p, m)| {
            let g = -m;
            p - lr * g
        })
        .collect();
    Ok(ServerState {
        global: state.global.with_values(params),
        round: state.round + 1,
        first_moment: state.first_moment.clone(),
        second_moment: state.second_moment.clone(),
    })
}

/// Encodes a client delta for transport at `precision`.
pub fn quantize_update(update: &ClientUpdate, precision: Precision) -> Result<QuantizedVector> {
    QuantizedVector::encode(&update.delta, precision)
}

/// Server-side decode of [`quantize_update`].
pub fn dequantize_update(encoded: &QuantizedVector, client_id: usize, num_samples: usize) -> ClientUpdate {
    ClientUpdate {
        client_id,
        num_samples,
        delta: encoded.decode(),
    }
}

pub const CHECKPOINT_FRACTIONS: [(f64, &str); 3] = [(0.5, "50%"), (0.8, "80%"), (1.0, "100%")];

/// Rounds (1-based) at which the 50/80/100% checkpoints fall.
pub fn checkpoint_rounds(total_rounds: usize) -> Vec<(usize, &'static str)> {
    if total_rounds == 0 {
        return Vec::new();
    }
    CHECKPOINT_FRACTIONS
        .iter()
        .map(|&(f, tag)| (((f * total_rounds as f64).ceil() as usize).max(1), tag))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub version: String,
    /// Echo of the configuration that produced the run.
    pub config: serde_json::Value,
    pub seed: u64,
    pub param_count: usize,
    /// `param_bytes=<n>` at the run's precision.
    pub memory: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub clients: Vec<usize>,
    pub train_loss: f64,
    pub metric: Option<f64>,
    pub checkpoint_tag: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dropped: Vec<usize>,
    /// Excluded from the serialized log so identical runs give identical bytes.
    #[serde(skip)]
    pub wall_time_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LogLine {
    Header(LogHeader),
    Round(RoundRecord),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    pub header: LogHeader,
    pub records: Vec<RoundRecord>,
}

/// Metric at a checkpoint round plus the best metric reached up to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub tag: String,
    pub round: usize,
    pub metric: f64,
    pub best: f64,
}

impl MetricsLog {
    /// One JSON object per line: the header, then one record per round.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&LogLine::Header(self.header.clone())).expect("header serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(&LogLine::Round(r.clone())).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut header = None;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let parsed: LogLine =
                serde_json::from_str(line).map_err(|e| Error::Format(format!("metrics line {}: {e}", i + 1)))?;
            match parsed {
                LogLine::Header(h) if header.is_none() && records.is_empty() => header = Some(h),
                LogLine::Header(_) => return Err(Error::Format(format!("metrics line {}: unexpected header", i + 1))),
                LogLine::Round(r) => {
                    if records.last().is_some_and(|p: &RoundRecord| p.round >= r.round) {
                        return Err(Error::Format(format!("metrics line {}: rounds not increasing", i + 1)));
                    }
                    records.push(r);
                }
            }
        }
        let header = header.ok_or_else(|| Error::Format("metrics log has no header".into()))?;
        Ok(Self { header, records })
    }

    /// Checkpoints in the order 50%, 80%, 100%.
    pub fn checkpoints(&self) -> Vec<Checkpoint> {
        let mut out = Vec::new();
        let mut best = f64::NEG_INFINITY;
        for r in &self.records {
            if let Some(m) = r.metric {
                best = best.max(m);
            }
            if let (Some(tags), Some(m)) = (&r.checkpoint_tag, r.metric) {
                for tag in tags.split(',') {
                    out.push(Checkpoint {
                        tag: tag.to_string(),
                        round: r.round,
                        metric: m,
                        best,
                    });
                }
            }
        }
        out
    }

    pub fn final_metric(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.metric)
    }
}

/// Final server state and the per-round log of one run.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub log: MetricsLog,
    pub state: ServerState,
}

/// Runs `cfg.total_rounds` rounds of sample -> local train (parallel) ->
/// aggregate -> evaluate on `test`.
pub fn run_experiment(
    train: &TabularDataset,
    test: &TabularDataset,
    partition: &PartitionMap,
    spec: &ModelSpec,
    cfg: &RoundConfig,
) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    spec.check_dataset(train)?;
    spec.check_dataset(test)?;
    if partition.dataset_size() != train.len() {
        return Err(Error::shape(format!(
            "partition covers {} samples, training set has {}",
            partition.dataset_size(),
            train.len()
        )));
    }
    partition.validate(1)?;

    let init = model::init_params(spec, cfg.master_seed);
    let mut state = ServerState::new(quant::quantize_params(&init, cfg.precision)?);
    let header = LogHeader {
        version: format!("fedsim {}", env!("CARGO_PKG_VERSION")),
        config: serde_json::to_value(cfg).expect("config serializes"),
        seed: cfg.master_seed,
        param_count: spec.num_params(),
        memory: format!("param_bytes={}", quant::payload_bytes(spec.num_params(), cfg.precision)),
        note: None,
    };
    let checkpoints = checkpoint_rounds(cfg.total_rounds);
    let mut records = Vec::with_capacity(cfg.total_rounds);

    for round in 0..cfg.total_rounds {
        let started = Instant::now();
        let sampled = sample_clients(round, partition.num_clients(), cfg.sample_ratio, cfg.master_seed)?;
        let snapshot = &state.global;
        let results: Vec<Result<LocalOutcome>> = sampled
            .par_iter()
            .map(|&c| local_train(snapshot, spec, ClientData::new(train, partition.client(c)), cfg, round, c))
            .collect();

        let mut updates = Vec::with_capacity(sampled.len());
        let mut losses = Vec::with_capacity(sampled.len());
        let mut dropped = Vec::new();
        for (&c, res) in sampled.iter().zip(results) {
            match res.and_then(|o| quantize_update(&o.update, cfg.precision).map(|q| (o, q))) {
                Ok((outcome, encoded)) => {
                    updates.push(dequantize_update(&encoded, c, outcome.update.num_samples));
                    losses.push(outcome.mean_loss);
                }
                Err(Error::NonFinite(_)) => dropped.push(c),
                Err(e) => return Err(e),
            }
        }
        if updates.is_empty() {
            return Err(Error::AllClientsAborted {
                round: round + 1,
                sampled: sampled.len(),
            });
        }

        state = match cfg.optimizer {
            ServerOptimizer::FedAvg => {
                let global = aggregate_fedavg(&state.global, &updates)?;
                ServerState {
                    global,
                    round: state.round + 1,
                    ..state
                }
            }
            ServerOptimizer::FedOpt => aggregate_fedopt(&state, &updates, cfg.server_lr, cfg.server_betas, cfg.server_tau)?,
            ServerOptimizer::FedOptSgd => aggregate_fedopt_sgd(&state, &updates, cfg.server_lr)?,
        };
        if cfg.precision != Precision::Full64 {
            state.global = quant::quantize_params(&state.global, cfg.precision)?;
        }
        if !state.global.is_finite() {
            return Err(Error::NonFinite(format!("global parameters after round {}", round + 1)));
        }

        let completed = round + 1;
        let tags: Vec<&str> = checkpoints.iter().filter(|(r, _)| *r == completed).map(|(_, t)| *t).collect();
        let evaluate_now = !tags.is_empty() || (cfg.eval_every > 0 && completed % cfg.eval_every == 0);
        let metric = if evaluate_now {
            Some(model::evaluate(spec, &state.global, test)?.value)
        } else {
            None
        };
        records.push(RoundRecord {
            round: completed,
            clients: sampled,
            train_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            metric,
            checkpoint_tag: (!tags.is_empty()).then(|| tags.join(",")),
            dropped,
            wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }

    Ok(ExperimentOutcome {
        log: MetricsLog { header, records },
        state,
    })
}
