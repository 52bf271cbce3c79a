//! Dense linear solve by Gaussian elimination with partial pivoting.

use crate::splitmix::SplitMix64;

/// Floating-point operations for `k` solves of an `n`-square system.
pub fn flops(n: u32, k: u32) -> f64 {
    let n = n as f64;
    k as f64 * (2.0 * n * n * n / 3.0 + 2.0 * n * n)
}

/// Row-major `n x n` matrix and right-hand side drawn from `seed`. The
/// diagonal is shifted by `n` so the matrix is strictly diagonally dominant.
pub fn system(seed: u64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rng = SplitMix64::new(seed);
    let mut a: Vec<f64> = (0..n * n).map(|_| rng.next_signed_unit()).collect();
    for i in 0..n {
        a[i * n + i] += n as f64;
    }
    let b = (0..n).map(|_| rng.next_signed_unit()).collect();
    (a, b)
}

/// Solves `a x = b`, consuming copies of both. Returns `None` for a
/// singular matrix.
pub fn solve(mut a: Vec<f64>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))?;
        if a[pivot * n + col] == 0.0 {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        let p = a[col * n + col];
        for row in col + 1..n {
            let f = a[row * n + col] / p;
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row * n + k] -= f * a[col * n + k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row * n + k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row * n + row];
    }
    Some(x)
}

/// Euclidean norm of `a x - b`.
pub fn residual(a: &[f64], x: &[f64], b: &[f64]) -> f64 {
    let n = b.len();
    (0..n)
        .map(|i| {
            let r: f64 = (0..n).map(|k| a[i * n + k] * x[k]).sum::<f64>() - b[i];
            r * r
        })
        .sum::<f64>()
        .sqrt()
}

/// Solves the seeded system `k` times and returns the last residual.
pub fn run(seed: u64, n: usize, k: u32) -> f64 {
    let (a, b) = system(seed, n);
    let mut r = f64::NAN;
    for _ in 0..k {
        let x = solve(a.clone(), b.clone()).expect("diagonally dominant systems are regular");
        r = residual(&a, &x, &b);
    }
    r
}
