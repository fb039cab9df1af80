//! Symmetric Dirichlet sampling.
//!
//! A draw is a normalized vector of independent Gamma(alpha, 1) variates.
//! For `alpha < 1` the Gamma variates are generated in log space as
//! `ln Gamma(alpha + 1) + ln(U) / alpha`, because at small concentrations
//! (alpha = 0.01) the direct variates underflow to zero and the
//! normalization would divide by zero.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Symmetric concentration `alpha` over `dimension` categories.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirichletParams {
    alpha: f64,
    dimension: usize,
}

impl DirichletParams {
    pub fn new(alpha: f64, dimension: usize) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::invalid(format!("Dirichlet alpha must be finite and > 0, got {alpha}")));
        }
        if dimension == 0 {
            return Err(Error::invalid("Dirichlet dimension must be >= 1"));
        }
        Ok(Self { alpha, dimension })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }
}

/// A point on the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// One seeded draw from Dirichlet(alpha, ..., alpha).
pub fn sample_dirichlet(params: DirichletParams, seed: u64) -> ProbVector {
    sample_with(params, &mut seed::rng(seed))
}

pub(crate) fn sample_with<R: Rng + ?Sized>(params: DirichletParams, rng: &mut R) -> ProbVector {
    let k = params.dimension;
    if k == 1 {
        return ProbVector(vec![1.0]);
    }
    let alpha = params.alpha;
    let log_draws: Vec<f64> = if alpha < 1.0 {
        let boosted = Gamma::new(alpha + 1.0, 1.0).expect("alpha validated");
        (0..k)
            .map(|_| {
                let g: f64 = boosted.sample(rng);
                // (0, 1]: avoids ln(0)
                let u: f64 = 1.0 - rng.random::<f64>();
                g.ln() + u.ln() / alpha
            })
            .collect()
    } else {
        let gamma = Gamma::new(alpha, 1.0).expect("alpha validated");
        (0..k).map(|_| gamma.sample(rng).ln()).collect()
    };
    let max = log_draws.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_draws.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    ProbVector(weights.into_iter().map(|w| w / total).collect())
}
