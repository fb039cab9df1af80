//! Label noise: transition matrices and seeded corruption.
//!
//! A flip happens with probability `ratio`; its destination is drawn from
//! the off-diagonal part of row `y` of the transition matrix, renormalized.
//! This keeps the realized error rate equal to `ratio` in expectation while
//! preserving which classes are confused with which.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

const ROW_SUM_TOLERANCE: f64 = 1e-9;

/// Row-stochastic `C x C` matrix; `q[i][j] = P(observed j | true i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    q: Vec<Vec<f64>>,
}

impl TransitionMatrix {
    /// Validates entries in `[0, 1]` and unit row sums.
    pub fn new(q: Vec<Vec<f64>>) -> Result<Self> {
        let c = q.len();
        if c < 2 {
            return Err(Error::invalid(format!("transition matrix needs C >= 2, got {c}")));
        }
        for (i, row) in q.iter().enumerate() {
            if row.len() != c {
                return Err(Error::shape(format!("row {i} has {} entries, expected {c}", row.len())));
            }
            if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::invalid(format!("row {i}: entry {v} outside [0, 1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::invalid(format!("row {i} sums to {sum}, not 1")));
            }
        }
        Ok(Self { q })
    }

    pub fn identity(c: usize) -> Result<Self> {
        Self::new((0..c).map(|i| (0..c).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect())
    }

    /// Zero diagonal, `1/(C-1)` elsewhere: symmetric noise as a matrix.
    pub fn uniform_off_diagonal(c: usize) -> Result<Self> {
        let off = 1.0 / (c as f64 - 1.0);
        Self::new((0..c).map(|i| (0..c).map(|j| if i == j { 0.0 } else { off }).collect()).collect())
    }

    pub fn num_classes(&self) -> usize {
        self.q.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.q
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.q[i][j]
    }

    /// Destination distribution of a flip from class `i`: row `i` without
    /// its diagonal, renormalized, or uniform over the other classes when
    /// the row has no off-diagonal mass.
    pub fn flip_distribution(&self, i: usize) -> Vec<f64> {
        let c = self.num_classes();
        let off: f64 = (0..c).filter(|&j| j != i).map(|j| self.q[i][j]).sum();
        (0..c)
            .map(|j| {
                if j == i {
                    0.0
                } else if off > 0.0 {
                    self.q[i][j] / off
                } else {
                    1.0 / (c as f64 - 1.0)
                }
            })
            .collect()
    }

    /// Whitespace-separated decimals, one row per line. Values are written
    /// in shortest round-trip form so a reload is bit-exact.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for row in &self.q {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "{}", cells.join(" "));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let rows = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .enumerate()
            .map(|(i, line)| {
                line.split_whitespace()
                    .map(|t| {
                        t.parse::<f64>()
                            .map_err(|_| Error::Format(format!("transition matrix row {i}: {t:?} is not a number")))
                    })
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(rows)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// `Q[i][j] = confusion[i][j] / sum_j confusion[i][j]`; empty rows become
/// uniform.
pub fn build_transition_matrix(confusion: &[Vec<i64>]) -> Result<TransitionMatrix> {
    let c = confusion.len();
    if c < 2 {
        return Err(Error::invalid(format!("confusion matrix needs C >= 2, got {c}")));
    }
    let mut q = Vec::with_capacity(c);
    for (i, row) in confusion.iter().enumerate() {
        if row.len() != c {
            return Err(Error::shape(format!("confusion row {i} has {} entries, expected {c}", row.len())));
        }
        if let Some(v) = row.iter().find(|&&v| v < 0) {
            return Err(Error::invalid(format!("confusion row {i}: negative count {v}")));
        }
        let total: i64 = row.iter().sum();
        q.push(if total == 0 {
            vec![1.0 / c as f64; c]
        } else {
            row.iter().map(|&v| v as f64 / total as f64).collect()
        });
    }
    TransitionMatrix::new(q)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    Matrix,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub ratio: f64,
    pub mode: NoiseMode,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::invalid(format!("noise ratio {} outside [0, 1]", self.ratio)));
        }
        Ok(())
    }
}

fn draw_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (j, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = j;
            if u < acc {
                return j;
            }
        }
    }
    last_positive
}

/// Corrupts `labels`. Returns the noisy labels and a mask of changed
/// positions. `q` is only consulted in matrix mode but its class count
/// defines the label space in both modes.
pub fn inject_noise(labels: &[usize], q: &TransitionMatrix, config: &NoiseConfig) -> Result<(Vec<usize>, Vec<bool>)> {
    config.validate()?;
    let c = q.num_classes();
    if let Some(bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::shape(format!("label {bad} outside the {c}-class transition matrix")));
    }
    let flip_rows: Vec<Vec<f64>> = match config.mode {
        NoiseMode::Matrix => (0..c).map(|i| q.flip_distribution(i)).collect(),
        NoiseMode::Uniform => Vec::new(),
    };
    let mut rng = seed::rng_for(config.seed, &[seed::tag::NOISE]);
    let mut noisy = Vec::with_capacity(labels.len());
    let mut mask = Vec::with_capacity(labels.len());
    for &y in labels {
        let u: f64 = rng.random();
        if u < config.ratio {
            let dest = match config.mode {
                NoiseMode::Matrix => draw_categorical(&flip_rows[y], &mut rng),
                NoiseMode::Uniform => {
                    let r = rng.random_range(0..c - 1);
                    r + usize::from(r >= y)
                }
            };
            debug_assert_ne!(dest, y);
            noisy.push(dest);
            mask.push(true);
        } else {
            noisy.push(y);
            mask.push(false);
        }
    }
    Ok((noisy, mask))
}

/// Empirical flip statistics of a (clean, noisy) label pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseMeasurement {
    pub rate: f64,
    /// `conditional[i][j] = P(noisy = j | original = i, flipped)`; rows with
    /// no flips are uniform over the other classes.
    pub conditional: Vec<Vec<f64>>,
    /// Flip count per original class; zero marks an unsupported row.
    pub flips_per_class: Vec<usize>,
}

impl NoiseMeasurement {
    pub fn row_supported(&self, i: usize) -> bool {
        self.flips_per_class[i] > 0
    }
}

pub fn measure_noise(original: &[usize], noisy: &[usize], num_classes: usize) -> Result<NoiseMeasurement> {
    if original.len() != noisy.len() {
        return Err(Error::shape(format!(
            "{} original labels vs {} noisy labels",
            original.len(),
            noisy.len()
        )));
    }
    if num_classes < 2 {
        return Err(Error::invalid("need at least 2 classes"));
    }
    let mut counts = vec![vec![0usize; num_classes]; num_classes];
    let mut flips = 0usize;
    for (&a, &b) in original.iter().zip(noisy) {
        if a >= num_classes || b >= num_classes {
            return Err(Error::invalid(format!("label outside 0..{num_classes}")));
        }
        if a != b {
            counts[a][b] += 1;
            flips += 1;
        }
    }
    let flips_per_class: Vec<usize> = counts.iter().map(|r| r.iter().sum()).collect();
    let conditional = counts
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let total = flips_per_class[i];
            (0..num_classes)
                .map(|j| {
                    if total > 0 {
                        row[j] as f64 / total as f64
                    } else if j == i {
                        0.0
                    } else {
                        1.0 / (num_classes as f64 - 1.0)
                    }
                })
                .collect()
        })
        .collect();
    Ok(NoiseMeasurement {
        rate: if original.is_empty() { 0.0 } else { flips as f64 / original.len() as f64 },
        conditional,
        flips_per_class,
    })
}

/// Half the L1 distance between two distributions.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Audit of injected noise against the matrix that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseAudit {
    pub target_ratio: f64,
    pub measurement: NoiseMeasurement,
    /// TV between each empirical row and the renormalized off-diagonal row
    /// of Q; `None` for rows without flips.
    pub row_tv: Vec<Option<f64>>,
}

pub fn audit(original: &[usize], noisy: &[usize], q: &TransitionMatrix, target_ratio: f64) -> Result<NoiseAudit> {
    let measurement = measure_noise(original, noisy, q.num_classes())?;
    let row_tv = (0..q.num_classes())
        .map(|i| {
            measurement
                .row_supported(i)
                .then(|| total_variation(&measurement.conditional[i], &q.flip_distribution(i)))
        })
        .collect();
    Ok(NoiseAudit {
        target_ratio,
        measurement,
        row_tv,
    })
}

impl NoiseAudit {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "target_ratio: {}", self.target_ratio);
        let _ = writeln!(out, "empirical_rate: {:.6}", self.measurement.rate);
        for (i, tv) in self.row_tv.iter().enumerate() {
            match tv {
                Some(tv) => {
                    let _ = writeln!(out, "row {i}: flips={} tv={tv:.6}", self.measurement.flips_per_class[i]);
                }
                None => {
                    let _ = writeln!(out, "row {i}: flips=0 tv=n/a");
                }
            }
        }
        out
    }
}
