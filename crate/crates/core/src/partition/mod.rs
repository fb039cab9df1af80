//! Non-IID client partitioning.
//!
//! Three schemes share one Dirichlet allocator:
//!
//! * **labels**: each client draws a class mixture from Dirichlet(alpha) over
//!   the C classes, and a separate Dirichlet(alpha) draw over the M clients
//!   fixes how many samples each client holds;
//! * **features**: k-means cluster ids become pseudo-classes, then labels;
//! * **quantiles**: equal-count bins of a continuous target become
//!   pseudo-classes, then labels.
//!
//! Every map produced here is checked to be a disjoint exact cover of the
//! sample indices before it is returned.

mod dirichlet;
pub mod kmeans;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use dirichlet::{sample_dirichlet, DirichletParams, ProbVector};

use crate::dataset::Targets;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed;

pub const DEFAULT_MIN_SAMPLES_PER_CLIENT: usize = 1;
pub const DEFAULT_QUANTILE_BINS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Labels,
    Features,
    Quantiles,
    /// One client holding every sample; the centralized baseline.
    Centralized,
}

impl Scheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scheme::Labels => "labels",
            Scheme::Features => "features",
            Scheme::Quantiles => "quantiles",
            Scheme::Centralized => "centralized",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "labels" => Some(Scheme::Labels),
            "features" => Some(Scheme::Features),
            "quantiles" => Some(Scheme::Quantiles),
            "centralized" => Some(Scheme::Centralized),
            _ => None,
        }
    }
}

/// Client id -> sorted sample indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionMap {
    assignments: Vec<Vec<usize>>,
    dataset_size: usize,
}

impl PartitionMap {
    /// Builds a map, sorting each client's indices and validating the cover.
    pub fn new(mut assignments: Vec<Vec<usize>>, dataset_size: usize, min_samples: usize) -> Result<Self> {
        for a in &mut assignments {
            a.sort_unstable();
        }
        let map = Self {
            assignments,
            dataset_size,
        };
        map.validate(min_samples)?;
        Ok(map)
    }

    pub fn single_client(dataset_size: usize) -> Result<Self> {
        Self::new(vec![(0..dataset_size).collect()], dataset_size, 1)
    }

    /// Exhaustive disjoint-exact-cover and minimum-size check.
    pub fn validate(&self, min_samples: usize) -> Result<()> {
        if self.assignments.is_empty() {
            return Err(Error::invalid("partition has no clients"));
        }
        let mut seen = vec![false; self.dataset_size];
        for (client, idx) in self.assignments.iter().enumerate() {
            if idx.len() < min_samples {
                return Err(Error::invalid(format!(
                    "client {client} holds {} samples, minimum is {min_samples}",
                    idx.len()
                )));
            }
            for &i in idx {
                if i >= self.dataset_size {
                    return Err(Error::invalid(format!("client {client}: index {i} out of range")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::invalid(format!("index {i} assigned twice")));
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::invalid(format!("index {missing} not assigned to any client")));
        }
        Ok(())
    }

    pub fn num_clients(&self) -> usize {
        self.assignments.len()
    }

    pub fn dataset_size(&self) -> usize {
        self.dataset_size
    }

    pub fn client(&self, id: usize) -> &[usize] {
        &self.assignments[id]
    }

    pub fn clients(&self) -> impl Iterator<Item = &[usize]> {
        self.assignments.iter().map(Vec::as_slice)
    }

    pub fn counts(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }
}

/// Floors of `total * w_i / sum(w)` plus one extra unit for the largest
/// fractional parts (ties to the lower index). `weights` must have a
/// positive sum.
pub(crate) fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    debug_assert!(sum > 0.0);
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut out: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut left = total.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if weights[i] > 0.0 {
            out[i] += 1;
            left -= 1;
        }
    }
    // floating-point floors can overshoot by a unit; trim from the smallest fractions
    let mut excess = out.iter().sum::<usize>().saturating_sub(total);
    for &i in order.iter().rev() {
        if excess == 0 {
            break;
        }
        if out[i] > 0 {
            out[i] -= 1;
            excess -= 1;
        }
    }
    out
}

/// Splits `target` samples across classes in proportion to `weights`,
/// never taking more than `supply[c]` from class `c`. Mass that cannot be
/// placed because a class ran out is renormalized over classes that still
/// have supply; when the mixture puts no weight on any such class the
/// remaining supplies themselves are the weights.
fn allocate_capped(target: usize, weights: &[f64], supply: &[usize]) -> Vec<usize> {
    let mut alloc = vec![0usize; weights.len()];
    let mut remaining = target;
    while remaining > 0 {
        let room: Vec<usize> = supply.iter().zip(&alloc).map(|(s, a)| s - a).collect();
        let mut w: Vec<f64> = weights.iter().zip(&room).map(|(&w, &r)| if r > 0 { w } else { 0.0 }).collect();
        if w.iter().sum::<f64>() <= 0.0 {
            w = room.iter().map(|&r| r as f64).collect();
        }
        let shares = largest_remainder(&w, remaining);
        for c in 0..alloc.len() {
            let add = shares[c].min(room[c]);
            alloc[c] += add;
            remaining -= add;
        }
    }
    alloc
}

/// Dirichlet allocation over `num_classes` (pseudo-)classes; `num_classes`
/// may be 1 here, which reduces to a pure count-share split.
fn dirichlet_allocate(
    labels: &[usize],
    num_classes: usize,
    num_clients: usize,
    alpha: f64,
    seed: u64,
    min_samples: usize,
) -> Result<PartitionMap> {
    let n = labels.len();
    if num_clients == 0 {
        return Err(Error::invalid("num_clients must be >= 1"));
    }
    if n < num_clients * min_samples {
        return Err(Error::invalid(format!(
            "infeasible: {n} samples cannot give {num_clients} clients {min_samples} each"
        )));
    }
    let mix_params = DirichletParams::new(alpha, num_classes)?;
    let share_params = DirichletParams::new(alpha, num_clients)?;

    let mut mixture_rng = seed::rng_for(seed, &[seed::tag::MIXTURES]);
    let mixtures: Vec<ProbVector> = (0..num_clients).map(|_| dirichlet::sample_with(mix_params, &mut mixture_rng)).collect();
    let shares = dirichlet::sample_with(share_params, &mut seed::rng_for(seed, &[seed::tag::COUNT_SHARES]));
    let targets = largest_remainder(shares.probs(), n);

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut shuffle_rng = seed::rng_for(seed, &[seed::tag::CLASS_SHUFFLE]);
    for members in &mut by_class {
        members.shuffle(&mut shuffle_rng);
    }

    let mut supply: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let mut cursor = vec![0usize; num_classes];
    let mut assignments: Vec<Vec<usize>> = Vec::with_capacity(num_clients);
    for (client, mixture) in mixtures.iter().enumerate() {
        let alloc = allocate_capped(targets[client], mixture.probs(), &supply);
        let mut mine = Vec::with_capacity(targets[client]);
        for c in 0..num_classes {
            mine.extend_from_slice(&by_class[c][cursor[c]..cursor[c] + alloc[c]]);
            cursor[c] += alloc[c];
            supply[c] -= alloc[c];
        }
        assignments.push(mine);
    }

    repair_deficits(&mut assignments, min_samples);
    PartitionMap::new(assignments, n, min_samples)
}

/// Moves one sample at a time from the largest client to the lowest-id
/// client below `min_samples`.
fn repair_deficits(assignments: &mut [Vec<usize>], min_samples: usize) {
    while let Some(needy) = assignments.iter().position(|a| a.len() < min_samples) {
        let donor = (0..assignments.len())
            .max_by(|&a, &b| assignments[a].len().cmp(&assignments[b].len()).then(b.cmp(&a)))
            .expect("at least one client");
        assignments[donor].sort_unstable();
        let moved = assignments[donor].pop().expect("donor above minimum");
        assignments[needy].push(moved);
    }
}

/// Scheme #1: Dirichlet label skew plus Dirichlet quantity skew.
pub fn partition_by_labels(targets: &Targets, num_clients: usize, alpha: f64, seed: u64) -> Result<PartitionMap> {
    partition_by_labels_with_min(targets, num_clients, alpha, seed, DEFAULT_MIN_SAMPLES_PER_CLIENT)
}

pub fn partition_by_labels_with_min(
    targets: &Targets,
    num_clients: usize,
    alpha: f64,
    seed: u64,
    min_samples: usize,
) -> Result<PartitionMap> {
    match targets {
        Targets::Categorical { values, num_classes } => {
            dirichlet_allocate(values, *num_classes, num_clients, alpha, seed, min_samples)
        }
        Targets::Continuous(_) => Err(Error::invalid("label scheme requires categorical targets")),
    }
}

/// Scheme #2: k-means pseudo-classes over the feature space, then Dirichlet.
pub fn partition_by_features(
    features: &Matrix,
    num_pseudo_classes: usize,
    num_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<PartitionMap> {
    let n = features.rows();
    if num_pseudo_classes == 0 || num_clients == 0 || n < num_pseudo_classes.max(num_clients) {
        return Err(Error::invalid(format!(
            "feature scheme needs K >= 1, M >= 1, N >= max(K, M); got K={num_pseudo_classes} M={num_clients} N={n}"
        )));
    }
    let pseudo = kmeans::kmeans(features, num_pseudo_classes, seed)?;
    dirichlet_allocate(
        &pseudo.assignments,
        num_pseudo_classes,
        num_clients,
        alpha,
        seed::derive(seed, &[seed::tag::PSEUDO_CLASSES]),
        DEFAULT_MIN_SAMPLES_PER_CLIENT,
    )
}

/// Equal-count bins over sorted target values.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileBins {
    /// Bin index of each sample, in sample order.
    pub bin_of: Vec<usize>,
    /// (min, max) target value inside each bin.
    pub ranges: Vec<(f64, f64)>,
    pub sizes: Vec<usize>,
}

/// Sorts by value (ties by original index) and cuts into `num_bins`
/// contiguous runs; the first `N % B` bins hold one extra sample.
pub fn quantile_bins(values: &[f64], num_bins: usize) -> Result<QuantileBins> {
    let n = values.len();
    if num_bins == 0 || n < num_bins {
        return Err(Error::invalid(format!("quantile binning needs 1 <= B <= N, got B={num_bins} N={n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let base = n / num_bins;
    let extra = n % num_bins;
    let mut bin_of = vec![0; n];
    let mut ranges = Vec::with_capacity(num_bins);
    let mut sizes = Vec::with_capacity(num_bins);
    let mut start = 0;
    for b in 0..num_bins {
        let size = base + usize::from(b < extra);
        let run = &order[start..start + size];
        for &i in run {
            bin_of[i] = b;
        }
        ranges.push((values[run[0]], values[run[size - 1]]));
        sizes.push(size);
        start += size;
    }
    Ok(QuantileBins { bin_of, ranges, sizes })
}

/// Scheme #3: quantile bins of a continuous target as pseudo-classes, then
/// Dirichlet.
pub fn partition_by_quantiles(
    targets: &Targets,
    num_bins: usize,
    num_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<PartitionMap> {
    let values = match targets {
        Targets::Continuous(v) => v,
        Targets::Categorical { .. } => {
            return Err(Error::invalid("quantile scheme requires continuous targets"));
        }
    };
    if num_clients == 0 {
        return Err(Error::invalid("num_clients must be >= 1"));
    }
    let bins = quantile_bins(values, num_bins)?;
    dirichlet_allocate(
        &bins.bin_of,
        num_bins,
        num_clients,
        alpha,
        seed::derive(seed, &[seed::tag::PSEUDO_CLASSES]),
        DEFAULT_MIN_SAMPLES_PER_CLIENT,
    )
}

/// Size and label-skew statistics of a partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityReport {
    pub per_client_counts: Vec<usize>,
    /// Present for categorical targets only.
    pub per_client_label_hist: Option<Vec<Vec<usize>>>,
    /// Mean over clients of KL(client || global). A client's support is a
    /// subset of the global support, so every term is finite; `0 ln 0 = 0`.
    /// Continuous targets are measured over ten quantile bins.
    pub mean_kl_to_global: f64,
    pub max_client_share: f64,
}

fn kl_to(hist: &[usize], global: &[usize]) -> f64 {
    let n = hist.iter().sum::<usize>() as f64;
    let g = global.iter().sum::<usize>() as f64;
    if n == 0.0 {
        return 0.0;
    }
    hist.iter()
        .zip(global)
        .filter(|(&h, _)| h > 0)
        .map(|(&h, &q)| {
            let p = h as f64 / n;
            p * (p / (q as f64 / g)).ln()
        })
        .sum::<f64>()
        .max(0.0)
}

pub fn heterogeneity_report(partition: &PartitionMap, targets: &Targets) -> Result<HeterogeneityReport> {
    let n = targets.len();
    let (labels, num_classes, categorical) = match targets {
        Targets::Categorical { values, num_classes } => (values.clone(), *num_classes, true),
        Targets::Continuous(v) => {
            let bins = quantile_bins(v, DEFAULT_QUANTILE_BINS.min(n.max(1)))?;
            let b = bins.sizes.len();
            (bins.bin_of, b, false)
        }
    };
    let mut hists = Vec::with_capacity(partition.num_clients());
    let mut global = vec![0usize; num_classes];
    for (client, idx) in partition.clients().enumerate() {
        let mut h = vec![0usize; num_classes];
        for &i in idx {
            let l = *labels
                .get(i)
                .ok_or_else(|| Error::invalid(format!("client {client}: index {i} out of range for {n} targets")))?;
            h[l] += 1;
            global[l] += 1;
        }
        hists.push(h);
    }
    let kl_sum: f64 = hists.iter().map(|h| kl_to(h, &global)).sum();
    let counts = partition.counts();
    let total: usize = counts.iter().sum();
    let max_share = counts.iter().copied().max().unwrap_or(0) as f64 / total.max(1) as f64;
    Ok(HeterogeneityReport {
        per_client_counts: counts,
        per_client_label_hist: categorical.then_some(hists),
        mean_kl_to_global: kl_sum / partition.num_clients() as f64,
        max_client_share: max_share,
    })
}

impl HeterogeneityReport {
    /// Human-readable rendering used by the partition subcommand.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "clients: {}", self.per_client_counts.len());
        let _ = writeln!(out, "samples: {}", self.per_client_counts.iter().sum::<usize>());
        let _ = writeln!(out, "mean_kl_to_global: {:.6}", self.mean_kl_to_global);
        let _ = writeln!(out, "max_client_share: {:.6}", self.max_client_share);
        let _ = writeln!(out);
        for (c, count) in self.per_client_counts.iter().enumerate() {
            let _ = write!(out, "client {c}: {count} samples");
            if let Some(h) = &self.per_client_label_hist {
                let hist: Vec<String> = h[c].iter().map(usize::to_string).collect();
                let _ = write!(out, "  labels [{}]", hist.join(" "));
            }
            let _ = writeln!(out);
        }
        out
    }
}

/// A partition plus the provenance written in the partition file header.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionFile {
    pub scheme: Scheme,
    pub alpha: Option<f64>,
    pub seed: u64,
    pub map: PartitionMap,
}

const PARTITION_MAGIC: &str = "# fedsim partition v1";

impl PartitionFile {
    /// Text form: a magic line, `key=value` header fields, then one
    /// `client <id>: <idx> <idx> ...` line per client.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{PARTITION_MAGIC}");
        let _ = writeln!(out, "scheme={}", self.scheme.as_str());
        match self.alpha {
            Some(a) => {
                let _ = writeln!(out, "alpha={a:?}");
            }
            None => {
                let _ = writeln!(out, "alpha=none");
            }
        }
        let _ = writeln!(out, "seed={}", self.seed);
        let _ = writeln!(out, "num_clients={}", self.map.num_clients());
        let _ = writeln!(out, "dataset_size={}", self.map.dataset_size());
        for (c, idx) in self.map.clients().enumerate() {
            let _ = write!(out, "client {c}:");
            for i in idx {
                let _ = write!(out, " {i}");
            }
            let _ = writeln!(out);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Format(format!("partition file: {msg}"));
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(PARTITION_MAGIC) {
            return Err(bad("missing header line".into()));
        }
        let mut header = std::collections::BTreeMap::new();
        let mut clients: Vec<Vec<usize>> = Vec::new();
        for (no, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("client ") {
                let (id, list) = rest.split_once(':').ok_or_else(|| bad(format!("line {}: missing ':'", no + 2)))?;
                let id: usize = id.trim().parse().map_err(|_| bad(format!("line {}: bad client id", no + 2)))?;
                if id != clients.len() {
                    return Err(bad(format!("line {}: expected client {}, found {id}", no + 2, clients.len())));
                }
                let idx = list
                    .split_whitespace()
                    .map(|t| t.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad(format!("line {}: bad index", no + 2)))?;
                clients.push(idx);
            } else {
                let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("line {}: expected key=value", no + 2)))?;
                header.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        let field = |k: &str| header.get(k).ok_or_else(|| bad(format!("missing {k}")));
        let scheme = Scheme::parse(field("scheme")?).ok_or_else(|| bad("unknown scheme".into()))?;
        let alpha = match field("alpha")?.as_str() {
            "none" => None,
            a => Some(a.parse::<f64>().map_err(|_| bad("bad alpha".into()))?),
        };
        let seed: u64 = field("seed")?.parse().map_err(|_| bad("bad seed".into()))?;
        let num_clients: usize = field("num_clients")?.parse().map_err(|_| bad("bad num_clients".into()))?;
        let dataset_size: usize = field("dataset_size")?.parse().map_err(|_| bad("bad dataset_size".into()))?;
        if clients.len() != num_clients {
            return Err(bad(format!("header says {num_clients} clients, found {}", clients.len())));
        }
        let map = PartitionMap::new(clients, dataset_size, DEFAULT_MIN_SAMPLES_PER_CLIENT)?;
        Ok(Self {
            scheme,
            alpha,
            seed,
            map,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::make_synthetic_classification;

    fn balanced(n: usize, c: usize) -> Targets {
        Targets::categorical((0..n).map(|i| i % c).collect(), c).unwrap()
    }

    #[test]
    fn largest_remainder_sums_exactly() {
        assert_eq!(largest_remainder(&[1.0, 1.0, 1.0], 10), vec![4, 3, 3]);
        assert_eq!(largest_remainder(&[0.5, 0.25, 0.25], 7), vec![3, 2, 2]);
        assert_eq!(largest_remainder(&[0.6, 0.3, 0.1], 7), vec![4, 2, 1]);
        assert_eq!(largest_remainder(&[0.0, 1.0], 5), vec![0, 5]);
        let w = [0.1, 0.2, 0.3, 0.4];
        for total in 0..50 {
            assert_eq!(largest_remainder(&w, total).iter().sum::<usize>(), total);
        }
    }

    #[test]
    fn capped_allocation_respects_supply() {
        let alloc = allocate_capped(10, &[1.0, 0.0, 0.0], &[3, 4, 5]);
        assert_eq!(alloc[0], 3);
        assert_eq!(alloc.iter().sum::<usize>(), 10);
        assert!(alloc.iter().zip([3, 4, 5]).all(|(a, s)| *a <= s));
    }

    #[test]
    fn single_client_gets_everything() {
        let t = balanced(57, 3);
        let p = partition_by_labels(&t, 1, 0.1, 4).unwrap();
        assert_eq!(p.client(0), (0..57).collect::<Vec<_>>().as_slice());
    }

    #[test]
    fn label_scheme_is_deterministic_cover() {
        let t = balanced(500, 10);
        for alpha in [0.01, 0.1, 0.5, 100.0] {
            let a = partition_by_labels(&t, 17, alpha, 9).unwrap();
            let b = partition_by_labels(&t, 17, alpha, 9).unwrap();
            assert_eq!(a, b);
            a.validate(1).unwrap();
        }
    }

    #[test]
    fn infeasible_minimum_rejected() {
        let t = balanced(10, 2);
        assert!(partition_by_labels(&t, 11, 0.5, 0).is_err());
        assert!(partition_by_labels_with_min(&t, 5, 0.5, 0, 3).is_err());
        let p = partition_by_labels_with_min(&t, 5, 0.01, 0, 2).unwrap();
        assert!(p.counts().iter().all(|&c| c >= 2));
    }

    #[test]
    fn label_scheme_rejects_continuous() {
        let t = Targets::continuous(vec![1.0; 10]).unwrap();
        assert!(partition_by_labels(&t, 2, 0.5, 0).is_err());
    }

    #[test]
    fn single_pseudo_class_is_count_split() {
        let ds = make_synthetic_classification(200, 2, 4, 3.0, 1).unwrap();
        let p = partition_by_features(ds.features(), 1, 5, 0.5, 3).unwrap();
        let labels = vec![0usize; 200];
        let direct = dirichlet_allocate(&labels, 1, 5, 0.5, seed::derive(3, &[seed::tag::PSEUDO_CLASSES]), 1).unwrap();
        assert_eq!(p, direct);
    }

    #[test]
    fn feature_scheme_is_deterministic() {
        let ds = make_synthetic_classification(300, 3, 3, 5.0, 2).unwrap();
        let a = partition_by_features(ds.features(), 3, 6, 0.5, 8).unwrap();
        let b = partition_by_features(ds.features(), 3, 6, 0.5, 8).unwrap();
        assert_eq!(a, b);
        assert!(partition_by_features(ds.features(), 0, 6, 0.5, 8).is_err());
        assert!(partition_by_features(ds.features(), 3, 301, 0.5, 8).is_err());
    }

    #[test]
    fn quantile_bins_by_order_statistics() {
        let values: Vec<f64> = (0..100).rev().map(f64::from).collect();
        let bins = quantile_bins(&values, 10).unwrap();
        for (i, v) in values.iter().enumerate() {
            assert_eq!(bins.bin_of[i], (*v as usize) / 10);
        }
        assert!(bins.sizes.iter().all(|&s| s == 10));
    }

    #[test]
    fn quantile_ties_use_index_order() {
        let bins = quantile_bins(&[3.0; 20], 4).unwrap();
        for i in 0..20 {
            assert_eq!(bins.bin_of[i], i / 5);
        }
    }

    #[test]
    fn quantile_scheme_preconditions() {
        let t = balanced(20, 2);
        let err = partition_by_quantiles(&t, 4, 2, 0.5, 0).unwrap_err();
        assert!(err.to_string().contains("quantile scheme requires continuous targets"));
        let c = Targets::continuous((0..5).map(f64::from).collect()).unwrap();
        assert!(partition_by_quantiles(&c, 6, 2, 0.5, 0).is_err());
        assert!(partition_by_quantiles(&c, 5, 2, 0.5, 0).is_ok());
    }

    #[test]
    fn report_on_round_robin_is_near_zero() {
        let t = balanced(1000, 10);
        let clients: Vec<Vec<usize>> = (0..10).map(|c| (0..1000).filter(|i| (i / 10) % 10 == c).collect()).collect();
        let p = PartitionMap::new(clients, 1000, 1).unwrap();
        let r = heterogeneity_report(&p, &t).unwrap();
        assert!(r.mean_kl_to_global <= 0.01, "{}", r.mean_kl_to_global);
        assert_eq!(r.per_client_counts.iter().sum::<usize>(), 1000);
    }

    #[test]
    fn report_one_class_per_client() {
        let t = balanced(40, 4);
        let clients: Vec<Vec<usize>> = (0..4).map(|c| (0..40).filter(|i| i % 4 == c).collect()).collect();
        let p = PartitionMap::new(clients, 40, 1).unwrap();
        let r = heterogeneity_report(&p, &t).unwrap();
        assert_eq!(r.max_client_share, 0.25);
        assert!(r.mean_kl_to_global > 0.5);
    }

    #[test]
    fn report_single_client_is_zero() {
        let t = balanced(30, 3);
        let r = heterogeneity_report(&PartitionMap::single_client(30).unwrap(), &t).unwrap();
        assert_eq!(r.mean_kl_to_global, 0.0);
        assert_eq!(r.max_client_share, 1.0);
    }

    #[test]
    fn single_sample_client_is_maximally_skewed() {
        let t = balanced(40, 4);
        let clients = vec![vec![0], (1..40).collect()];
        let r = heterogeneity_report(&PartitionMap::new(clients, 40, 1).unwrap(), &t).unwrap();
        let big = (9.0 / 39.0) * ((9.0 / 39.0) / 0.25f64).ln() + 3.0 * (10.0 / 39.0) * ((10.0 / 39.0) / 0.25f64).ln();
        assert!((r.mean_kl_to_global - (4f64.ln() + big) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn report_rejects_out_of_range() {
        let t = balanced(10, 2);
        let p = PartitionMap::single_client(12).unwrap();
        assert!(heterogeneity_report(&p, &t).is_err());
    }

    #[test]
    fn invalid_maps_rejected() {
        assert!(PartitionMap::new(vec![vec![0, 1], vec![1, 2]], 3, 1).is_err());
        assert!(PartitionMap::new(vec![vec![0], vec![2]], 3, 1).is_err());
        assert!(PartitionMap::new(vec![vec![0, 1, 2], vec![]], 3, 1).is_err());
        assert!(PartitionMap::new(vec![vec![0, 5]], 2, 1).is_err());
    }

    #[test]
    fn partition_file_round_trip() {
        let t = balanced(60, 3);
        let map = partition_by_labels(&t, 4, 0.5, 2).unwrap();
        let file = PartitionFile {
            scheme: Scheme::Labels,
            alpha: Some(0.5),
            seed: 2,
            map,
        };
        let parsed = PartitionFile::parse(&file.to_text()).unwrap();
        assert_eq!(parsed, file);

        let corrupted = file.to_text().replace("num_clients=4", "num_clients=5");
        assert!(PartitionFile::parse(&corrupted).is_err());
    }
}
