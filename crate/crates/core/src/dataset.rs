//! Tabular datasets: CSV ingestion, seeded synthetic generators and
//! train-split standardization.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Categorical,
    Continuous,
}

/// Per-sample targets. Categorical labels live in `0..num_classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    Categorical { values: Vec<usize>, num_classes: usize },
    Continuous(Vec<f64>),
}

impl Targets {
    pub fn categorical(values: Vec<usize>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid(format!(
                "categorical targets need at least 2 classes, got {num_classes} (fewer than 2 classes)"
            )));
        }
        if let Some(bad) = values.iter().find(|&&v| v >= num_classes) {
            return Err(Error::invalid(format!("label {bad} outside 0..{num_classes}")));
        }
        Ok(Targets::Categorical { values, num_classes })
    }

    pub fn continuous(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("continuous target".into()));
        }
        Ok(Targets::Continuous(values))
    }

    pub fn len(&self) -> usize {
        match self {
            Targets::Categorical { values, .. } => values.len(),
            Targets::Continuous(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> TargetKind {
        match self {
            Targets::Categorical { .. } => TargetKind::Categorical,
            Targets::Continuous(_) => TargetKind::Continuous,
        }
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self {
            Targets::Categorical { num_classes, .. } => Some(*num_classes),
            Targets::Continuous(_) => None,
        }
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match self {
            Targets::Categorical { values, .. } => Some(values),
            Targets::Continuous(_) => None,
        }
    }

    pub fn values(&self) -> Option<&[f64]> {
        match self {
            Targets::Continuous(v) => Some(v),
            Targets::Categorical { .. } => None,
        }
    }

    pub fn select(&self, indices: &[usize]) -> Targets {
        match self {
            Targets::Categorical { values, num_classes } => Targets::Categorical {
                values: indices.iter().map(|&i| values[i]).collect(),
                num_classes: *num_classes,
            },
            Targets::Continuous(v) => Targets::Continuous(indices.iter().map(|&i| v[i]).collect()),
        }
    }
}

/// Feature matrix plus targets; immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularDataset {
    features: Matrix,
    targets: Targets,
    feature_names: Vec<String>,
    split: SplitTag,
}

impl TabularDataset {
    pub fn new(
        features: Matrix,
        targets: Targets,
        feature_names: Vec<String>,
        split: SplitTag,
    ) -> Result<Self> {
        if features.rows() == 0 || features.cols() == 0 {
            return Err(Error::invalid("dataset needs at least one row and one feature"));
        }
        if targets.len() != features.rows() {
            return Err(Error::shape(format!(
                "{} targets for {} samples",
                targets.len(),
                features.rows()
            )));
        }
        if feature_names.len() != features.cols() {
            return Err(Error::shape(format!(
                "{} feature names for {} columns",
                feature_names.len(),
                features.cols()
            )));
        }
        if features.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix".into()));
        }
        Ok(Self {
            features,
            targets,
            feature_names,
            split,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> usize {
        self.features.cols()
    }

    pub fn with_split(mut self, split: SplitTag) -> Self {
        self.split = split;
        self
    }

    pub fn with_targets(mut self, targets: Targets) -> Result<Self> {
        if targets.len() != self.len() {
            return Err(Error::shape("replacement targets length differs from dataset"));
        }
        self.targets = targets;
        Ok(self)
    }

    /// Rows `indices` in order, keeping names and split tag.
    pub fn subset(&self, indices: &[usize]) -> Result<TabularDataset> {
        TabularDataset::new(
            self.features.select_rows(indices),
            self.targets.select(indices),
            self.feature_names.clone(),
            self.split,
        )
    }

    /// Seeded shuffle followed by a cut into (train, test).
    pub fn train_test_split(&self, test_fraction: f64, seed: u64) -> Result<(TabularDataset, TabularDataset)> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(Error::invalid(format!("test fraction {test_fraction} outside (0,1)")));
        }
        let n = self.len();
        let n_test = ((n as f64) * test_fraction).round() as usize;
        if n_test == 0 || n_test >= n {
            return Err(Error::invalid(format!("cannot split {n} samples with test fraction {test_fraction}")));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::rng_for(seed, &[seed::tag::SPLIT]));
        let (test_idx, train_idx) = order.split_at(n_test);
        let mut train_idx = train_idx.to_vec();
        let mut test_idx = test_idx.to_vec();
        train_idx.sort_unstable();
        test_idx.sort_unstable();
        Ok((
            self.subset(&train_idx)?.with_split(SplitTag::Train),
            self.subset(&test_idx)?.with_split(SplitTag::Test),
        ))
    }
}

fn parse_error(path: &Path, row: usize, column: &str, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        row,
        column: column.to_string(),
        reason: reason.into(),
    }
}

/// Reads a headed, comma-separated file. Every column other than
/// `target_column` becomes a feature, in file order.
///
/// Categorical targets that are exactly the integers `0..C` keep their
/// values; any other label set (strings, gaps, negatives) is mapped to
/// `0..C` in order of first appearance.
pub fn load_csv(path: impl AsRef<Path>, target_column: &str, kind: TargetKind) -> Result<TabularDataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Format(format!("{}: {other:?}", path.display())),
        })?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Format(format!("{}: bad header: {e}", path.display())))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let target_idx = headers
        .iter()
        .position(|h| h == target_column)
        .ok_or_else(|| Error::invalid(format!("{}: no column named {target_column:?}", path.display())))?;
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != target_idx)
        .map(|(_, h)| h.clone())
        .collect();
    if feature_names.is_empty() {
        return Err(Error::invalid(format!("{}: no feature columns", path.display())));
    }

    let mut data = Vec::new();
    let mut raw_targets = Vec::new();
    for (r, record) in reader.records().enumerate() {
        // header is line 1
        let line = r + 2;
        let record = record.map_err(|e| parse_error(path, line, "*", e.to_string()))?;
        if record.len() != headers.len() {
            return Err(parse_error(
                path,
                line,
                "*",
                format!("{} fields, header has {}", record.len(), headers.len()),
            ));
        }
        for (c, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            if c == target_idx {
                raw_targets.push(cell.to_string());
                continue;
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_error(path, line, &headers[c], format!("{cell:?} is not a number")))?;
            if !v.is_finite() {
                return Err(parse_error(path, line, &headers[c], "non-finite value"));
            }
            data.push(v);
        }
    }
    if raw_targets.is_empty() {
        return Err(Error::invalid(format!("{}: empty data section", path.display())));
    }

    let targets = match kind {
        TargetKind::Continuous => {
            let mut values = Vec::with_capacity(raw_targets.len());
            for (r, cell) in raw_targets.iter().enumerate() {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| parse_error(path, r + 2, target_column, format!("{cell:?} is not a number")))?;
                if !v.is_finite() {
                    return Err(parse_error(path, r + 2, target_column, "non-finite value"));
                }
                values.push(v);
            }
            Targets::Continuous(values)
        }
        TargetKind::Categorical => {
            let (values, num_classes) = encode_labels(&raw_targets);
            Targets::categorical(values, num_classes)?
        }
    };
    let n = raw_targets.len();
    TabularDataset::new(
        Matrix::from_vec(n, feature_names.len(), data)?,
        targets,
        feature_names,
        SplitTag::Train,
    )
}

fn encode_labels(raw: &[String]) -> (Vec<usize>, usize) {
    let mut first_seen: HashMap<&str, usize> = HashMap::new();
    let mut order = Vec::new();
    for s in raw {
        if !first_seen.contains_key(s.as_str()) {
            first_seen.insert(s, order.len());
            order.push(s.as_str());
        }
    }
    let c = order.len();
    let as_ints: Option<Vec<usize>> = order.iter().map(|s| s.parse::<usize>().ok()).collect();
    if let Some(ints) = as_ints {
        let mut sorted = ints.clone();
        sorted.sort_unstable();
        if sorted.iter().enumerate().all(|(i, &v)| i == v) {
            let values = raw.iter().map(|s| s.parse::<usize>().unwrap()).collect();
            return (values, c);
        }
    }
    (raw.iter().map(|s| first_seen[s.as_str()]).collect(), c)
}

fn default_names(d: usize) -> Vec<String> {
    (0..d).map(|j| format!("x{j}")).collect()
}

/// Class means for the blob generator: points spaced `separation` apart on a
/// circle in the first two coordinates (a line when `d == 1`), so adjacent
/// classes sit exactly `separation` apart and no pair is closer.
fn blob_means(d: usize, c: usize, separation: f64) -> Vec<Vec<f64>> {
    (0..c)
        .map(|k| {
            let mut mean = vec![0.0; d];
            if d == 1 {
                mean[0] = separation * (k as f64 - (c as f64 - 1.0) / 2.0);
            } else {
                let radius = separation / (2.0 * (PI / c as f64).sin());
                let angle = 2.0 * PI * k as f64 / c as f64;
                mean[0] = radius * angle.cos();
                mean[1] = radius * angle.sin();
            }
            mean
        })
        .collect()
}

/// `c` isotropic unit-variance Gaussian blobs. Sample `i` belongs to class
/// `i % c`, so class sizes differ by at most one.
pub fn make_synthetic_classification(n: usize, d: usize, c: usize, separation: f64, seed: u64) -> Result<TabularDataset> {
    if c < 2 || n < c || d == 0 {
        return Err(Error::invalid(format!("need n >= c >= 2 and d >= 1, got n={n} d={d} c={c}")));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::invalid(format!("separation {separation} must be finite and >= 0")));
    }
    let means = blob_means(d, c, separation);
    let mut rng = seed::rng(seed);
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % c;
        labels.push(k);
        for mu in &means[k] {
            let z: f64 = rng.sample(StandardNormal);
            data.push(mu + z);
        }
    }
    TabularDataset::new(
        Matrix::from_vec(n, d, data)?,
        Targets::categorical(labels, c)?,
        default_names(d),
        SplitTag::Train,
    )
}

/// Linear model `y = w.x + b + N(0, noise_sd^2)` with standard normal `w`,
/// `b` and `x`.
pub fn make_synthetic_regression(n: usize, d: usize, noise_sd: f64, seed: u64) -> Result<TabularDataset> {
    if n < 2 || d == 0 {
        return Err(Error::invalid(format!("need n >= 2 and d >= 1, got n={n} d={d}")));
    }
    if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return Err(Error::invalid(format!("noise_sd {noise_sd} must be finite and >= 0")));
    }
    let mut rng = seed::rng(seed);
    let w: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let b: f64 = rng.sample(StandardNormal);
    let mut data = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let mut acc = b;
        for wj in &w {
            let x: f64 = rng.sample(StandardNormal);
            acc += wj * x;
            data.push(x);
        }
        let eps: f64 = rng.sample(StandardNormal);
        y.push(acc + noise_sd * eps);
    }
    TabularDataset::new(
        Matrix::from_vec(n, d, data)?,
        Targets::continuous(y)?,
        default_names(d),
        SplitTag::Train,
    )
}

/// Per-column mean and population standard deviation of a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizeStats {
    pub means: Vec<f64>,
    pub stddevs: Vec<f64>,
}

impl StandardizeStats {
    pub fn fit(features: &Matrix) -> Self {
        let n = features.rows() as f64;
        let (means, stddevs) = (0..features.cols())
            .map(|j| {
                let mean = features.column(j).sum::<f64>() / n;
                let var = features.column(j).map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let sd = var.sqrt();
                // constant column
                let sd = if sd > 0.0 && sd.is_finite() { sd } else { 1.0 };
                (mean, sd)
            })
            .unzip();
        Self { means, stddevs }
    }

    pub fn apply(&self, features: &Matrix) -> Result<Matrix> {
        if features.cols() != self.means.len() {
            return Err(Error::shape(format!(
                "dataset has {} features, stats fitted on {}",
                features.cols(),
                self.means.len()
            )));
        }
        let mut out = features.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = (*v - self.means[j]) / self.stddevs[j];
            }
        }
        Ok(out)
    }

    pub fn invert(&self, standardized: &Matrix) -> Result<Matrix> {
        if standardized.cols() != self.means.len() {
            return Err(Error::shape("column count differs from fitted stats"));
        }
        let mut out = standardized.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = *v * self.stddevs[j] + self.means[j];
            }
        }
        Ok(out)
    }
}

/// Fits statistics on `train` alone and applies them to `train` and every
/// dataset in `others`.
pub fn standardize(
    train: &TabularDataset,
    others: &[TabularDataset],
) -> Result<(TabularDataset, Vec<TabularDataset>, StandardizeStats)> {
    let stats = StandardizeStats::fit(train.features());
    let transform = |ds: &TabularDataset| -> Result<TabularDataset> {
        TabularDataset::new(
            stats.apply(ds.features())?,
            ds.targets().clone(),
            ds.feature_names().to_vec(),
            ds.split(),
        )
    };
    let train_out = transform(train)?;
    let others_out = others.iter().map(transform).collect::<Result<Vec<_>>>()?;
    Ok((train_out, others_out, stats))
}
