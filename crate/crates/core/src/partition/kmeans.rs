//! Seeded Lloyd k-means with k-means++ seeding, used to derive pseudo-classes
//! from raw feature vectors.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed;

pub const MAX_ITERATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Matrix,
    pub iterations: usize,
    pub converged: bool,
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the nearest centroid; ties go to the lowest index.
fn nearest(point: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter_rows().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn plus_plus_init<R: Rng + ?Sized>(points: &Matrix, k: usize, rng: &mut R) -> Matrix {
    let n = points.rows();
    let mut centroids = Matrix::zeros(k, points.cols());
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = points.iter_rows().map(|p| sq_dist(p, centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // every point coincides with a centroid already
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for (i, p) in points.iter_rows().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, centroids.row(c)));
        }
    }
    centroids
}

/// Clusters the rows of `points` into `k` groups.
///
/// Assignment runs in parallel but each point's choice is independent, and
/// centroid sums are reduced sequentially in row order, so the result is
/// identical for any thread count.
pub fn kmeans(points: &Matrix, k: usize, seed: u64) -> Result<KMeansResult> {
    let n = points.rows();
    if k == 0 || n < k {
        return Err(Error::invalid(format!("k-means needs 1 <= k <= n, got k={k} n={n}")));
    }
    let mut rng = seed::rng_for(seed, &[seed::tag::KMEANS]);
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let mut assignments = vec![usize::MAX; n];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let nearest_all: Vec<(usize, f64)> = (0..n).into_par_iter().map(|i| nearest(points.row(i), &centroids)).collect();
        let mut next: Vec<usize> = nearest_all.iter().map(|&(c, _)| c).collect();
        let mut dists: Vec<f64> = nearest_all.iter().map(|&(_, d)| d).collect();

        let mut counts = vec![0usize; k];
        for &c in &next {
            counts[c] += 1;
        }
        // Re-seed empty clusters from the point farthest from its centroid.
        for empty in 0..k {
            if counts[empty] > 0 {
                continue;
            }
            let (far, _) = dists
                .iter()
                .enumerate()
                .filter(|&(i, _)| counts[next[i]] > 1)
                .fold((usize::MAX, f64::NEG_INFINITY), |best, (i, &d)| if d > best.1 { (i, d) } else { best });
            if far == usize::MAX {
                break;
            }
            counts[next[far]] -= 1;
            next[far] = empty;
            counts[empty] = 1;
            dists[far] = 0.0;
            centroids.row_mut(empty).copy_from_slice(points.row(far));
        }

        if next == assignments {
            converged = true;
            break;
        }
        assignments = next;

        let mut sums = Matrix::zeros(k, points.cols());
        for (i, p) in points.iter_rows().enumerate() {
            for (s, x) in sums.row_mut(assignments[i]).iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = counts[c] as f64;
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s / inv;
                }
            }
        }
    }

    Ok(KMeansResult {
        assignments,
        centroids,
        iterations,
        converged,
    })
}
