//! Least-squares kernel and small matrix helpers.
//!
//! Every regression in the crate funnels through [`solve_least_squares`],
//! which factors the design matrix by SVD and refuses to produce coefficients
//! when the matrix is rank deficient at the relative threshold
//! 1e-10 * (largest singular value). No pseudo-inverse fallback: collinear
//! regressors are a caller error, not something to silently resolve.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Coefficients and residuals of one least-squares fit. `rank_flag` records
/// that the design matrix passed the full-column-rank check.
#[derive(Debug, Clone)]
pub struct LeastSquaresFit {
    pub coefficients: Vec<f64>,
    pub residuals: Vec<f64>,
    pub rank_flag: bool,
}

/// Relative rank tolerance applied to singular values.
pub const RANK_RTOL: f64 = 1e-10;

/// Minimizes ||response - design * beta|| over beta.
///
/// Errors with [`Error::RankDeficient`] when the design has fewer rows than
/// columns or any singular value falls below `RANK_RTOL * sigma_max`. A
/// zero-column design is legal and yields empty coefficients with the
/// response itself as residual.
pub fn solve_least_squares(design: &DMatrix<f64>, response: &[f64]) -> Result<LeastSquaresFit> {
    let n = design.nrows();
    let q = design.ncols();
    if n == 0 || response.is_empty() {
        return Err(Error::EmptyInput);
    }
    if response.len() != n {
        return Err(Error::Invalid(format!(
            "response has {} entries, design has {n} rows",
            response.len()
        )));
    }
    if q == 0 {
        return Ok(LeastSquaresFit {
            coefficients: vec![],
            residuals: response.to_vec(),
            rank_flag: true,
        });
    }
    if n < q {
        return Err(Error::RankDeficient);
    }
    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = RANK_RTOL * smax;
    if smax == 0.0 || svd.singular_values.iter().any(|&s| s <= tol) {
        return Err(Error::RankDeficient);
    }
    let b = DVector::from_column_slice(response);
    let beta = svd
        .solve(&b, tol)
        .map_err(|_| Error::RankDeficient)?;
    let fitted = design * &beta;
    let residuals = (0..n).map(|i| response[i] - fitted[i]).collect();
    Ok(LeastSquaresFit {
        coefficients: beta.iter().copied().collect(),
        residuals,
        rank_flag: true,
    })
}

/// Subtracts each column's mean. Zero-row and zero-column inputs pass through.
pub fn demean(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    let n = m.nrows();
    if n == 0 {
        return out;
    }
    for j in 0..m.ncols() {
        let mean = m.column(j).sum() / n as f64;
        for i in 0..n {
            out[(i, j)] -= mean;
        }
    }
    out
}

/// Column means as a vector.
pub fn column_means(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    (0..m.ncols()).map(|j| m.column(j).sum() / n as f64).collect()
}

/// Column means over the rows where `mask[i] == keep`.
pub fn column_means_where(m: &DMatrix<f64>, mask: &[u8], keep: u8) -> Vec<f64> {
    let count = mask.iter().filter(|&&v| v == keep).count();
    let mut means = vec![0.0; m.ncols()];
    if count == 0 {
        return means;
    }
    for i in 0..m.nrows() {
        if mask[i] == keep {
            for j in 0..m.ncols() {
                means[j] += m[(i, j)];
            }
        }
    }
    for v in &mut means {
        *v /= count as f64;
    }
    means
}

/// Mean of a slice. Zero for empty input.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Population-style variance (1/n convention) around the sample mean.
pub fn var_n(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}
