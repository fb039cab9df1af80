use fedsim::noise::{self, NoiseConfig, NoiseMode, TransitionMatrix};
use proptest::prelude::*;

const N: usize = 100_000;

fn labels(c: usize) -> Vec<usize> {
    (0..N).map(|i| (i * 7 + i / 13) % c).collect()
}

/// Off-diagonal mass of row `i` renormalized to 1, computed directly.
fn renormalized_row(q: &[Vec<f64>], i: usize) -> Vec<f64> {
    let off: f64 = q[i].iter().enumerate().filter(|&(j, _)| j != i).map(|(_, p)| p).sum();
    q[i].iter()
        .enumerate()
        .map(|(j, &p)| if j == i { 0.0 } else { p / off })
        .collect()
}

fn tv(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

fn skewed_q() -> Vec<Vec<f64>> {
    vec![
        vec![0.70, 0.20, 0.05, 0.05],
        vec![0.10, 0.60, 0.25, 0.05],
        vec![0.02, 0.08, 0.80, 0.10],
        vec![0.30, 0.30, 0.30, 0.10],
    ]
}

#[test]
fn preset_rates_and_conditionals() {
    let rows = skewed_q();
    let q = TransitionMatrix::new(rows.clone()).unwrap();
    let clean = labels(4);
    for (ratio, seed) in [(0.1, 3), (0.3, 4)] {
        let cfg = NoiseConfig {
            ratio,
            mode: NoiseMode::Matrix,
            seed,
        };
        let (noisy, mask) = noise::inject_noise(&clean, &q, &cfg).unwrap();
        let flips = mask.iter().filter(|&&m| m).count();
        assert!((flips as f64 / N as f64 - ratio).abs() <= 0.01);
        for i in 0..N {
            assert_eq!(mask[i], noisy[i] != clean[i]);
        }
        let m = noise::measure_noise(&clean, &noisy, 4).unwrap();
        for i in 0..4 {
            if m.flips_per_class[i] >= 500 {
                let d = tv(&m.conditional[i], &renormalized_row(&rows, i));
                assert!(d <= 0.03, "ratio {ratio} row {i}: tv {d}");
            }
        }
    }
}

#[test]
fn identity_matrix_falls_back_to_uniform_flips() {
    let q = TransitionMatrix::identity(5).unwrap();
    let clean = labels(5);
    let cfg = NoiseConfig {
        ratio: 0.3,
        mode: NoiseMode::Matrix,
        seed: 8,
    };
    let (noisy, _) = noise::inject_noise(&clean, &q, &cfg).unwrap();
    let m = noise::measure_noise(&clean, &noisy, 5).unwrap();
    assert!((m.rate - 0.3).abs() <= 0.01);
    for i in 0..5 {
        let uniform: Vec<f64> = (0..5).map(|j| if j == i { 0.0 } else { 0.25 }).collect();
        assert!(tv(&m.conditional[i], &uniform) <= 0.03);
    }
}

#[test]
fn uniform_mode_matches_uniform_matrix() {
    let c = 6;
    let clean = labels(c);
    let q = TransitionMatrix::uniform_off_diagonal(c).unwrap();
    let run = |mode, seed| {
        let (noisy, mask) = noise::inject_noise(&clean, &q, &NoiseConfig { ratio: 0.3, mode, seed }).unwrap();
        let mut all = vec![0.0; c];
        let mut flipped = vec![0.0; c];
        for (&y, &m) in noisy.iter().zip(&mask) {
            all[y] += 1.0 / N as f64;
            if m {
                flipped[y] += 1.0;
            }
        }
        let total: f64 = flipped.iter().sum();
        flipped.iter_mut().for_each(|f| *f /= total);
        (total / N as f64, all, flipped)
    };
    let (rate_a, all_a, flipped_a) = run(NoiseMode::Uniform, 21);
    let (rate_b, all_b, flipped_b) = run(NoiseMode::Matrix, 21);
    assert!((rate_a - rate_b).abs() <= 0.01);
    assert!(tv(&all_a, &all_b) <= 0.02);
    assert!(tv(&flipped_a, &flipped_b) <= 0.02);
}

proptest! {
    #[test]
    fn flips_change_and_others_stay(
        clean in prop::collection::vec(0usize..4, 1..300),
        ratio in 0.0f64..=1.0,
        seed in any::<u64>(),
        uniform in any::<bool>(),
    ) {
        let q = TransitionMatrix::new(skewed_q()).unwrap();
        let mode = if uniform { NoiseMode::Uniform } else { NoiseMode::Matrix };
        let (noisy, mask) = noise::inject_noise(&clean, &q, &NoiseConfig { ratio, mode, seed }).unwrap();
        for i in 0..clean.len() {
            if mask[i] {
                prop_assert_ne!(noisy[i], clean[i]);
            } else {
                prop_assert_eq!(noisy[i], clean[i]);
            }
        }
    }
}
