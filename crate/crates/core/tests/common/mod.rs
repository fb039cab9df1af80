//! Oracles shared by the integration suites and the acceptance gate.
#![allow(dead_code)]

use fedsim::dataset::TabularDataset;
use fedsim::fedengine::{seeds, Batch, ClientUpdate, RoundConfig};
use fedsim::matrix::Matrix;
use fedsim::model::{self, BatchTargets, ModelSpec, ParamVector, Task};
use fedsim::partition::PartitionMap;
use fedsim::seed;
use rand::seq::SliceRandom;
use rand::Rng;

pub fn bits(values: &[f64]) -> Vec<u64> {
    values.iter().map(|v| v.to_bits()).collect()
}

/// Disjoint exact cover of `0..n` with every client holding at least `min`.
pub fn is_exact_cover(map: &PartitionMap, n: usize, min: usize) -> bool {
    let mut seen = vec![0u32; n];
    for idx in map.clients() {
        if idx.len() < min {
            return false;
        }
        for &i in idx {
            if i >= n {
                return false;
            }
            seen[i] += 1;
        }
    }
    seen.iter().all(|&s| s == 1)
}

/// Random updates with distinct client ids, arbitrary sample counts and
/// deltas spanning several magnitudes.
pub fn random_updates(rng: &mut impl Rng, len: usize) -> Vec<ClientUpdate> {
    let count = rng.random_range(1..=8);
    let mut ids: Vec<usize> = (0..40).collect();
    ids.shuffle(rng);
    ids.truncate(count);
    ids.into_iter()
        .map(|client_id| ClientUpdate {
            client_id,
            num_samples: rng.random_range(1..500),
            delta: (0..len)
                .map(|_| rng.random_range(-1.0..1.0) * 10f64.powi(rng.random_range(-6..3)))
                .collect(),
        })
        .collect()
}

pub fn random_params(rng: &mut impl Rng, len: usize) -> ParamVector {
    let spec = ModelSpec::new(vec![len - 1, 1], 0.0, Task::Regression).unwrap();
    let values = (0..len).map(|_| rng.random_range(-3.0..3.0)).collect();
    ParamVector::from_values(values, spec.layout()).unwrap()
}

/// Centralized SGD over the whole training set that replays the engine's
/// seed derivation (client 0) and its round-boundary delta arithmetic.
pub fn centralized_oracle(train: &TabularDataset, spec: &ModelSpec, cfg: &RoundConfig) -> Vec<f64> {
    let mut global = model::init_params(spec, cfg.master_seed);
    let all: Vec<usize> = (0..train.len()).collect();
    for round in 0..cfg.total_rounds {
        let snapshot = global.clone();
        let mut local = snapshot.clone();
        let mut rng = seed::rng(seeds::shuffle(cfg.master_seed, round, 0));
        let mut order = all.clone();
        let mut step = 0;
        for _ in 0..cfg.local_epochs {
            order.shuffle(&mut rng);
            for rows in order.chunks(cfg.batch_size) {
                let batch = Batch::gather(train.features(), train.targets(), rows);
                let (_, grad) = model::loss_and_grad(
                    spec,
                    &local,
                    &batch.inputs,
                    batch.targets(),
                    true,
                    seeds::dropout(cfg.master_seed, round, 0, step),
                )
                .unwrap();
                local = model::sgd_step(&local, &grad, cfg.client_lr).unwrap();
                step += 1;
            }
        }
        let next = snapshot
            .values()
            .iter()
            .zip(local.values())
            .map(|(s, l)| s + 1.0 * (l - s))
            .collect();
        global = ParamVector::from_values(next, spec.layout()).unwrap();
    }
    global.values().to_vec()
}

pub struct GradCase {
    pub spec: ModelSpec,
    pub params: ParamVector,
    pub inputs: Matrix,
    pub classes: Vec<usize>,
    pub values: Vec<f64>,
}

impl GradCase {
    pub fn targets(&self) -> BatchTargets<'_> {
        match self.spec.task() {
            Task::Classification => BatchTargets::Classes(&self.classes),
            Task::Regression => BatchTargets::Values(&self.values),
        }
    }
}

pub fn random_grad_case(seed: u64) -> GradCase {
    let mut rng = seed::rng(seed);
    let depth = rng.random_range(2..=6);
    let mut sizes: Vec<usize> = (0..depth).map(|_| rng.random_range(1..=12)).collect();
    let task = if rng.random_bool(0.5) { Task::Classification } else { Task::Regression };
    let out = match task {
        Task::Classification => rng.random_range(2..=6),
        Task::Regression => 1,
    };
    *sizes.last_mut().unwrap() = out;
    let spec = ModelSpec::new(sizes, 0.2, task).unwrap();
    let batch = rng.random_range(1..=8);
    build_grad_case(spec, batch, &mut rng, seed)
}

pub fn build_grad_case(spec: ModelSpec, batch: usize, rng: &mut impl Rng, seed: u64) -> GradCase {
    let base = model::init_params(&spec, seed);
    // nonzero biases so every term of the gradient is exercised
    let values = base.values().iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
    let params = ParamVector::from_values(values, base.layout().to_vec()).unwrap();
    let d = spec.input_dim();
    let inputs = Matrix::from_vec(batch, d, (0..batch * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let c = spec.output_dim();
    GradCase {
        classes: (0..batch).map(|i| i % c.max(2)).collect(),
        values: (0..batch).map(|_| rng.random_range(-2.0..2.0)).collect(),
        spec,
        params,
        inputs,
    }
}

/// Test-side central differences over `coords` evenly spread coordinates.
pub fn oracle_max_rel_error(case: &GradCase, step: f64, coords: usize) -> f64 {
    let (_, grad) = model::loss_and_grad(&case.spec, &case.params, &case.inputs, case.targets(), false, 0).unwrap();
    let n = case.params.len();
    let stride = (n / coords).max(1);
    let mut worst: f64 = 0.0;
    for k in (0..n).step_by(stride).take(coords) {
        let eval = |delta: f64| {
            let mut v = case.params.values().to_vec();
            v[k] += delta;
            let p = ParamVector::from_values(v, case.params.layout().to_vec()).unwrap();
            model::loss(&case.spec, &p, &case.inputs, case.targets()).unwrap()
        };
        let numeric = (eval(step) - eval(-step)) / (2.0 * step);
        let analytic = grad.values()[k];
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8));
    }
    worst
}
