#![allow(dead_code)]

use lttd_core::lttd::{LttdConfig, ModalityTriple};
use lttd_core::DenseTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> DenseTensor {
    let n = dims.iter().product();
    DenseTensor::new(dims.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn inputs(rng: &mut ChaCha8Rng, cfg: &LttdConfig) -> ModalityTriple {
    ModalityTriple::new(
        tensor(rng, &[cfg.n[0], cfg.d[0]]),
        tensor(rng, &[cfg.n[1], cfg.d[1]]),
        tensor(rng, &[cfg.n[2], cfg.d[2]]),
    )
    .unwrap()
}

/// Largest entrywise difference over the largest magnitude.
pub fn rel(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// `n_l <= 3`, `d_l in {2,4,8}`, `R in {1,2,4}` dividing all `d_l`, `d_z <= 8`.
pub fn small_config(rng: &mut ChaCha8Rng) -> LttdConfig {
    let r = [1, 2, 4][rng.random_range(0..3)];
    let ds: Vec<usize> = [2, 4, 8].into_iter().filter(|d| d % r == 0).collect();
    let mut pick = || ds[rng.random_range(0..ds.len())];
    let d = [pick(), pick(), pick()];
    let n = [rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3)];
    LttdConfig::new(n, d, r, rng.random_range(1..=8))
}

/// Least-squares coefficients of `y ~ rows` through the normal equations,
/// solved by Gaussian elimination with partial pivoting.
pub fn lstsq(rows: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let p = rows[0].len();
    let mut a = vec![vec![0.0; p + 1]; p];
    for (x, &t) in rows.iter().zip(y) {
        for i in 0..p {
            for j in 0..p {
                a[i][j] += x[i] * x[j];
            }
            a[i][p] += x[i] * t;
        }
    }
    for c in 0..p {
        let piv = (c..p).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, piv);
        assert!(a[c][c].abs() > 1e-14, "singular normal equations");
        for r in 0..p {
            if r != c {
                let f = a[r][c] / a[c][c];
                for k in c..=p {
                    a[r][k] -= f * a[c][k];
                }
            }
        }
    }
    (0..p).map(|i| a[i][p] / a[i][i]).collect()
}
