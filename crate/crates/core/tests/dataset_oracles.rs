use std::io::Write;

use fedsim::dataset::{self, StandardizeStats, TargetKind};
use fedsim::matrix::Matrix;
use proptest::prelude::*;

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Ordinary least squares with intercept; returns the fitted values.
fn ols_fit(x: &Matrix, y: &[f64]) -> Vec<f64> {
    let p = x.cols() + 1;
    let design = |i: usize| std::iter::once(1.0).chain(x.row(i).iter().copied()).collect::<Vec<f64>>();
    let mut xtx = vec![vec![0.0; p]; p];
    let mut xty = vec![0.0; p];
    for (i, &yi) in y.iter().enumerate() {
        let r = design(i);
        for a in 0..p {
            xty[a] += r[a] * yi;
            for b in 0..p {
                xtx[a][b] += r[a] * r[b];
            }
        }
    }
    let beta = solve(xtx, xty);
    (0..y.len())
        .map(|i| design(i).iter().zip(&beta).map(|(r, b)| r * b).sum())
        .collect()
}

#[test]
fn nearest_centroid_separates_wide_blobs() {
    let ds = dataset::make_synthetic_classification(1000, 2, 10, 6.0, 1).unwrap();
    let labels = ds.targets().labels().unwrap();
    let mut centroids = vec![[0.0f64; 2]; 10];
    let mut counts = [0usize; 10];
    for (i, &l) in labels.iter().enumerate() {
        centroids[l][0] += ds.features().get(i, 0);
        centroids[l][1] += ds.features().get(i, 1);
        counts[l] += 1;
    }
    for (c, n) in centroids.iter_mut().zip(counts) {
        c[0] /= n as f64;
        c[1] /= n as f64;
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| {
            let x = ds.features().row(i);
            let nearest = (0..10)
                .min_by(|&a, &b| {
                    let da = (x[0] - centroids[a][0]).powi(2) + (x[1] - centroids[a][1]).powi(2);
                    let db = (x[0] - centroids[b][0]).powi(2) + (x[1] - centroids[b][1]).powi(2);
                    da.total_cmp(&db)
                })
                .unwrap();
            nearest == l
        })
        .count();
    assert!(correct as f64 / 1000.0 >= 0.95, "nearest-centroid accuracy {}", correct as f64 / 1000.0);
}

#[test]
fn noiseless_regression_is_exactly_linear() {
    let ds = dataset::make_synthetic_regression(200, 4, 0.0, 3).unwrap();
    let y = ds.targets().values().unwrap();
    let fit = ols_fit(ds.features(), y);
    let max_resid = fit.iter().zip(y).map(|(f, y)| (f - y).abs()).fold(0.0, f64::max);
    assert!(max_resid <= 1e-9, "max residual {max_resid}");
}

#[test]
fn noisy_regression_has_high_r_squared() {
    let ds = dataset::make_synthetic_regression(10_000, 5, 0.1, 4).unwrap();
    let y = ds.targets().values().unwrap();
    let fit = ols_fit(ds.features(), y);
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_res: f64 = fit.iter().zip(y).map(|(f, y)| (f - y).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|y| (y - mean).powi(2)).sum();
    assert!(1.0 - ss_res / ss_tot >= 0.95);
}

#[test]
fn csv_rows_keep_file_order() {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    writeln!(f, "a,b,y").unwrap();
    for i in 0..50 {
        writeln!(f, "{},{},{}", i, 100 - i, i % 3).unwrap();
    }
    let ds = dataset::load_csv(f.path(), "y", TargetKind::Categorical).unwrap();
    assert_eq!(ds.len(), 50);
    for i in 0..50 {
        assert_eq!(ds.features().get(i, 0), i as f64);
        assert_eq!(ds.targets().labels().unwrap()[i], i % 3);
    }
}

proptest! {
    #[test]
    fn standardize_inverts(rows in 2usize..30, cols in 1usize..5, seed in any::<u64>()) {
        let ds = dataset::make_synthetic_regression(rows, cols, 1.0, seed).unwrap();
        let stats = StandardizeStats::fit(ds.features());
        let back = stats.invert(&stats.apply(ds.features()).unwrap()).unwrap();
        for (a, b) in ds.features().as_slice().iter().zip(back.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
    }
}
