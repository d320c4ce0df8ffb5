//! Shared helpers for the integration tests: a hand-rolled linear solver
//! (Gauss-Jordan with partial pivoting), an OLS oracle built on it via the
//! normal equations, and small random problem generators. None of this goes
//! through the library's decomposition path, so agreement is meaningful.

#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stratarm::{assign_matched_tuples, Design, ExperimentData, Propensity};

pub fn chacha(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Solves the square system A x = b by Gauss-Jordan elimination with partial
/// pivoting. Returns None when a pivot falls below 1e-11 times the largest
/// initial entry.
pub fn solve_linear(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let q = a.len();
    assert_eq!(b.len(), q);
    let scale = a
        .iter()
        .flatten()
        .fold(1.0f64, |acc, v| acc.max(v.abs()));
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .zip(b)
        .map(|(row, rhs)| {
            assert_eq!(row.len(), q);
            let mut r = row.clone();
            r.push(*rhs);
            r
        })
        .collect();
    for col in 0..q {
        let pivot_row = (col..q).max_by(|&i, &j| {
            m[i][col].abs().partial_cmp(&m[j][col].abs()).unwrap()
        })?;
        if m[pivot_row][col].abs() < 1e-11 * scale {
            return None;
        }
        m.swap(col, pivot_row);
        let pivot = m[col][col];
        for c in col..=q {
            m[col][c] /= pivot;
        }
        for r in 0..q {
            if r != col {
                let f = m[r][col];
                if f != 0.0 {
                    for c in col..=q {
                        m[r][c] -= f * m[col][c];
                    }
                }
            }
        }
    }
    Some((0..q).map(|r| m[r][q]).collect())
}

/// Inverts a square matrix by solving against the identity columns.
pub fn invert(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let q = a.len();
    let mut cols = Vec::with_capacity(q);
    for j in 0..q {
        let mut e = vec![0.0; q];
        e[j] = 1.0;
        cols.push(solve_linear(a, &e)?);
    }
    // cols[j][i] is the (i, j) entry of the inverse.
    Some((0..q).map(|i| (0..q).map(|j| cols[j][i]).collect()).collect())
}

/// Least-squares coefficients through the normal equations X'X b = X'y.
pub fn ols_oracle(x: &DMatrix<f64>, y: &[f64]) -> Option<Vec<f64>> {
    let n = x.nrows();
    let q = x.ncols();
    assert_eq!(n, y.len());
    let mut gram = vec![vec![0.0; q]; q];
    let mut moment = vec![0.0; q];
    for r in 0..q {
        for c in 0..q {
            gram[r][c] = (0..n).map(|i| x[(i, r)] * x[(i, c)]).sum();
        }
        moment[r] = (0..n).map(|i| x[(i, r)] * y[i]).sum();
    }
    solve_linear(&gram, &moment)
}

pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, n: usize, q: usize) -> DMatrix<f64> {
    let flat: Vec<f64> = (0..n * q).map(|_| rng.random_range(-2.0..2.0)).collect();
    DMatrix::from_row_slice(n, q, &flat)
}

/// Random experiment under a matched-tuples design: psi uniform, h tilted
/// toward psi so matching carries signal, z independent, outcomes with a
/// treated-arm slope shift so adjustment matters. Leftover units from the
/// divisibility padding are already stripped from the returned pair.
pub fn random_experiment(
    rng: &mut ChaCha8Rng,
    n: usize,
    dim_psi: usize,
    dim_h: usize,
    dim_z: usize,
    prop: Propensity,
) -> (ExperimentData, Design) {
    let psi = random_matrix(rng, n, dim_psi);
    let mut h = random_matrix(rng, n, dim_h);
    for i in 0..n {
        let lean: f64 = (0..dim_psi).map(|j| psi[(i, j)]).sum();
        for c in 0..dim_h {
            h[(i, c)] += 0.5 * lean;
        }
    }
    let z = random_matrix(rng, n, dim_z);
    let design_seed: u64 = rng.random();
    let design = assign_matched_tuples(&psi, prop, design_seed).unwrap();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let base: f64 = (0..dim_h).map(|c| (c as f64 + 1.0) * h[(i, c)]).sum::<f64>()
            + (0..dim_z).map(|c| 0.3 * z[(i, c)]).sum::<f64>()
            + rng.random_range(-0.5..0.5);
        y[i] = if design.treatment[i] == 1 { 2.0 + 1.5 * base } else { base };
    }
    let data = ExperimentData::new(psi, h, z, y, design.treatment.clone()).unwrap();
    design.restricted(&data).unwrap()
}

pub fn assert_close(actual: f64, expected: f64, tol: f64, what: &str) {
    let gap = (actual - expected).abs();
    let bound = tol * (1.0 + expected.abs());
    assert!(
        gap <= bound,
        "{what}: got {actual}, expected {expected} (gap {gap:.3e} > {bound:.3e})"
    );
}
