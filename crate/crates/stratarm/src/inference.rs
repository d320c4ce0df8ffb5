//! Variance estimation and confidence intervals.
//!
//! The primary estimator consumes the augmented outcomes Y^a of an adjusted
//! estimate together with the realized groups and a pairing of groups into
//! unions. Writing p for the assignment probability, a and k for treated
//! count and group size, and E_n for sample means, it combines
//!
//!   sample_term = var_n( (D_i - p) Y^a_i / (p - p^2) )
//!   V1  = (1/n) sum over unions U of [ (sum_{i in U} Y^a_i D_i)^2
//!           - sum_{i in U} (Y^a_i D_i)^2 ] (1-p) / [ p^2 (a(U) - 1) ]
//!   V0  = the mirror image with 1 - D, weight p / [ (1-p)^2 (k(U)-a(U)-1) ]
//!   V10 = (1/n) sum over original groups g of k / (a (k-a))
//!           (sum_{i in g} Y^a_i D_i) (sum_{j in g} Y^a_j (1 - D_j))
//!
//! into v_hat = sample_term - V1 - V0 - 2 V10, the estimated variance of
//! sqrt(n) (tau_hat - tau). The within-group and between-paired-group cross
//! products estimate exactly the conditional-mean terms that make the naive
//! sample_term conservative under stratified assignment, so intervals built
//! from v_hat are asymptotically exact rather than conservative. A negative
//! combination (possible in small samples) is clamped to zero and flagged.
//!
//! [`ehw_hc2_variance`] is the conventional leverage-corrected sandwich for
//! the regression-based estimators, reported for comparison; under matched
//! designs it is typically conservative. [`late_variance`] divides the
//! combination, computed on the Wald residuals, by the squared first stage.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::adjust::{self, AdjustedEstimate, EstimatorId};
use crate::data::ExperimentData;
use crate::design::{Design, GroupPairing};
use crate::error::{Error, Result};
use crate::linalg;

/// Which machinery produced a [`VarianceReport`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMethod {
    ExactPaired,
    EhwHc2,
}

/// The four pieces of the paired-group combination, on the variance scale of
/// sqrt(n) (tau_hat - tau).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VarianceComponents {
    pub sample_term: f64,
    pub v1: f64,
    pub v0: f64,
    pub v10: f64,
}

/// Variance estimate with its confidence interval.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarianceReport {
    /// Estimated variance of sqrt(n) (tau_hat - tau).
    pub v_hat: f64,
    /// sqrt(v_hat / n): the standard error of tau_hat itself.
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub alpha: f64,
    pub method: VarianceMethod,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub components: Option<VarianceComponents>,
    /// True when the raw combination was negative and clamped to zero.
    pub clamped: bool,
}

fn normal_quantile(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Invalid(format!("alpha must lie in (0,1), got {alpha}")));
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Ok(normal.inverse_cdf(1.0 - alpha / 2.0))
}

fn paired_components(
    augmented: &[f64],
    d: &[u8],
    design: &Design,
    pairing: &GroupPairing,
) -> Result<VarianceComponents> {
    let n = augmented.len();
    let prop = design
        .constant_propensity()
        .ok_or_else(|| Error::Invalid("exact variance needs a constant-propensity design".into()))?;
    let p = prop.p();
    if pairing.group_count() != design.groups.len() {
        return Err(Error::MissingPairing);
    }
    let denom = p - p * p;
    let w: Vec<f64> = (0..n)
        .map(|i| (f64::from(d[i]) - p) * augmented[i] / denom)
        .collect();
    let sample_term = linalg::var_n(&w);

    let mut v10 = 0.0;
    for group in &design.groups {
        let k = group.units.len() as f64;
        let a = f64::from(group.prop.a);
        let mut t_sum = 0.0;
        let mut c_sum = 0.0;
        for &u in &group.units {
            if d[u] == 1 {
                t_sum += augmented[u];
            } else {
                c_sum += augmented[u];
            }
        }
        v10 += k / (a * (k - a)) * t_sum * c_sum;
    }
    v10 /= n as f64;

    let mut v1 = 0.0;
    let mut v0 = 0.0;
    for union in pairing.unions() {
        let mut t_sum = 0.0;
        let mut t_sq = 0.0;
        let mut c_sum = 0.0;
        let mut c_sq = 0.0;
        let mut a_count = 0usize;
        let mut size = 0usize;
        for &g in &union {
            for &u in &design.groups[g].units {
                size += 1;
                let ya = augmented[u];
                if d[u] == 1 {
                    a_count += 1;
                    t_sum += ya;
                    t_sq += ya * ya;
                } else {
                    c_sum += ya;
                    c_sq += ya * ya;
                }
            }
        }
        let controls = size - a_count;
        if a_count <= 1 || controls <= 1 {
            return Err(Error::DegenerateUnion);
        }
        v1 += (t_sum * t_sum - t_sq) * (1.0 - p) / (p * p * (a_count as f64 - 1.0));
        v0 += (c_sum * c_sum - c_sq) * p / ((1.0 - p) * (1.0 - p) * (controls as f64 - 1.0));
    }
    v1 /= n as f64;
    v0 /= n as f64;

    Ok(VarianceComponents { sample_term, v1, v0, v10 })
}

fn combine(components: &VarianceComponents) -> (f64, bool) {
    let raw = components.sample_term - components.v1 - components.v0 - 2.0 * components.v10;
    if raw < 0.0 {
        (0.0, true)
    } else {
        (raw, false)
    }
}

/// Asymptotically exact variance and confidence interval for an adjusted
/// estimate, from its augmented outcomes and the paired groups.
///
/// The estimate, data, design, and pairing must describe the same n units;
/// the design must share one propensity across groups, and every union must
/// contain at least two treated and two control units.
pub fn exact_variance(
    estimate: &AdjustedEstimate,
    data: &ExperimentData,
    design: &Design,
    pairing: &GroupPairing,
    alpha: f64,
) -> Result<VarianceReport> {
    let z = normal_quantile(alpha)?;
    if estimate.n != data.n || estimate.augmented_outcomes.len() != data.n {
        return Err(Error::Invalid("estimate and data describe different samples".into()));
    }
    if estimate.late.is_some() {
        return Err(Error::Invalid("Wald estimates take late_variance".into()));
    }
    design.validate_for(data)?;
    let components = paired_components(&estimate.augmented_outcomes, &data.d, design, pairing)?;
    let (v_hat, clamped) = combine(&components);
    debug_assert!(
        (v_hat
            - (components.sample_term - components.v1 - components.v0 - 2.0 * components.v10))
            .abs()
            <= f64::EPSILON * components.sample_term.abs().max(1.0)
            || clamped
    );
    let se = (v_hat / data.n as f64).sqrt();
    Ok(VarianceReport {
        v_hat,
        se,
        ci_low: estimate.tau_hat - z * se,
        ci_high: estimate.tau_hat + z * se,
        alpha,
        method: VarianceMethod::ExactPaired,
        components: Some(components),
        clamped,
    })
}

/// Variance for a Wald (encouragement design) estimate: the paired-group
/// combination evaluated on the structural residuals, divided by the squared
/// first stage. `data.d` must hold the instrument the design randomized.
pub fn late_variance(
    estimate: &AdjustedEstimate,
    data: &ExperimentData,
    design: &Design,
    pairing: &GroupPairing,
    alpha: f64,
) -> Result<VarianceReport> {
    let z = normal_quantile(alpha)?;
    let late = estimate
        .late
        .as_ref()
        .ok_or_else(|| Error::Invalid("late_variance needs a Wald estimate".into()))?;
    if estimate.n != data.n || estimate.augmented_outcomes.len() != data.n {
        return Err(Error::Invalid("estimate and data describe different samples".into()));
    }
    design.validate_for(data)?;
    let components = paired_components(&estimate.augmented_outcomes, &data.d, design, pairing)?;
    let (v_reduced, clamped) = combine(&components);
    let v_hat = v_reduced / (late.tau_uptake * late.tau_uptake);
    let se = (v_hat / data.n as f64).sqrt();
    Ok(VarianceReport {
        v_hat,
        se,
        ci_low: estimate.tau_hat - z * se,
        ci_high: estimate.tau_hat + z * se,
        alpha,
        method: VarianceMethod::ExactPaired,
        components: Some(components),
        clamped,
    })
}

/// Rebuilds the defining regression of a regression-based estimator.
/// Returns (X, response, index of the tau coefficient, extra leverage).
fn defining_regression(
    estimate: &AdjustedEstimate,
    data: &ExperimentData,
    design: Option<&Design>,
) -> Result<(DMatrix<f64>, Vec<f64>, usize, Vec<f64>)> {
    let n = data.n;
    let need_design = || -> Result<&Design> {
        design.ok_or_else(|| {
            Error::Invalid(format!(
                "HC2 for {} needs the design that built the estimate",
                estimate.estimator
            ))
        })
    };
    match estimate.estimator {
        EstimatorId::Unadj => {
            let mut x = DMatrix::zeros(n, 2);
            for i in 0..n {
                x[(i, 0)] = 1.0;
                x[(i, 1)] = f64::from(data.d[i]);
            }
            Ok((x, data.y.clone(), 1, vec![0.0; n]))
        }
        EstimatorId::Naive => {
            let w = adjust::stacked_covariates(data, estimate.with_z);
            let mut x = DMatrix::zeros(n, 2 + w.ncols());
            for i in 0..n {
                x[(i, 0)] = 1.0;
                x[(i, 1)] = f64::from(data.d[i]);
                for j in 0..w.ncols() {
                    x[(i, 2 + j)] = w[(i, j)];
                }
            }
            Ok((x, data.y.clone(), 1, vec![0.0; n]))
        }
        EstimatorId::Lin => {
            let w = linalg::demean(&adjust::stacked_covariates(data, estimate.with_z));
            let dw = w.ncols();
            let mut x = DMatrix::zeros(n, 2 + 2 * dw);
            for i in 0..n {
                let di = f64::from(data.d[i]);
                x[(i, 0)] = 1.0;
                x[(i, 1)] = di;
                for j in 0..dw {
                    x[(i, 2 + j)] = w[(i, j)];
                    x[(i, 2 + dw + j)] = di * w[(i, j)];
                }
            }
            Ok((x, data.y.clone(), 1, vec![0.0; n]))
        }
        EstimatorId::Plin => {
            let design = need_design()?;
            let h_check = adjust::within_demean(&data.h, design);
            let z_used = if estimate.with_z && data.z.ncols() > 0 {
                let dropped = adjust::columns_constant_within_groups(&data.z, design);
                adjust::drop_columns(&data.z, &dropped).0
            } else {
                DMatrix::zeros(n, 0)
            };
            let dv = h_check.ncols() + z_used.ncols();
            let dh = h_check.ncols();
            let v = |i: usize, j: usize| if j < dh { h_check[(i, j)] } else { z_used[(i, j - dh)] };
            let mut x = DMatrix::zeros(n, 2 + 2 * dv);
            for i in 0..n {
                let di = f64::from(data.d[i]);
                x[(i, 0)] = 1.0;
                x[(i, 1)] = di;
                for j in 0..dv {
                    x[(i, 2 + j)] = v(i, j);
                    x[(i, 2 + dv + j)] = di * v(i, j);
                }
            }
            Ok((x, data.y.clone(), 1, vec![0.0; n]))
        }
        EstimatorId::Fe => {
            let design = need_design()?;
            let prop = design
                .constant_propensity()
                .ok_or_else(|| Error::Invalid("HC2 needs a constant-propensity design".into()))?;
            let h_check = adjust::within_demean(&data.h, design);
            if estimate.with_z && data.z.ncols() > 0 {
                // With auxiliary covariates the defining regression is the
                // plain Y ~ (1, D, h_check, z).
                let dropped = adjust::columns_constant_within_groups(&data.z, design);
                let z_used = adjust::drop_columns(&data.z, &dropped).0;
                let dh = h_check.ncols();
                let dz = z_used.ncols();
                let mut x = DMatrix::zeros(n, 2 + dh + dz);
                for i in 0..n {
                    x[(i, 0)] = 1.0;
                    x[(i, 1)] = f64::from(data.d[i]);
                    for j in 0..dh {
                        x[(i, 2 + j)] = h_check[(i, j)];
                    }
                    for j in 0..dz {
                        x[(i, 2 + dh + j)] = z_used[(i, j)];
                    }
                }
                return Ok((x, data.y.clone(), 1, vec![0.0; n]));
            }
            // Without z the defining regression carries one dummy per group.
            // Partialling the dummies out leaves X = (D - p, h_check) with
            // the within-demeaned outcome; the dummy block contributes
            // exactly 1/k(i) to unit i's leverage and the coefficient rows
            // of the sandwich are unchanged, so HC2 here reproduces HC2 of
            // the full dummy regression.
            let p = prop.p();
            let dh = h_check.ncols();
            let mut x = DMatrix::zeros(n, 1 + dh);
            for i in 0..n {
                x[(i, 0)] = f64::from(data.d[i]) - p;
                for j in 0..dh {
                    x[(i, 1 + j)] = h_check[(i, j)];
                }
            }
            let y_col = DMatrix::from_fn(n, 1, |i, _| data.y[i]);
            let y_within: Vec<f64> = adjust::within_demean(&y_col, design).column(0).iter().copied().collect();
            let mut extra = vec![0.0; n];
            for group in &design.groups {
                let k = group.units.len() as f64;
                for &u in &group.units {
                    extra[u] = 1.0 / k;
                }
            }
            Ok((x, y_within, 0, extra))
        }
        other => Err(Error::NotRegressionBased(other.name().to_owned())),
    }
}

/// Conventional HC2 (leverage-corrected heteroskedasticity-robust) variance
/// of the tau coefficient in the estimator's defining regression. Defined
/// for `unadj`, `naive`, `lin`, `partialled_lin`, and `fixed_effects`; the
/// latter two need the design. Group-level and moment-based estimators have
/// no defining regression and error with [`Error::NotRegressionBased`].
pub fn ehw_hc2_variance(
    estimate: &AdjustedEstimate,
    data: &ExperimentData,
    design: Option<&Design>,
    alpha: f64,
) -> Result<VarianceReport> {
    let z = normal_quantile(alpha)?;
    if estimate.late.is_some() {
        return Err(Error::Invalid("HC2 is not defined for Wald estimates here".into()));
    }
    if estimate.n != data.n {
        return Err(Error::Invalid("estimate and data describe different samples".into()));
    }
    adjust::require_outcomes(data)?;
    let (x, response, tau_col, extra_leverage) = defining_regression(estimate, data, design)?;
    let n = x.nrows();
    let q = x.ncols();
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = linalg::RANK_RTOL * smax;
    if smax == 0.0 || svd.singular_values.iter().any(|&s| s <= tol) {
        return Err(Error::RankDeficient);
    }
    let b = nalgebra::DVector::from_column_slice(&response);
    let beta = svd.solve(&b, tol).map_err(|_| Error::RankDeficient)?;
    let fitted = &x * &beta;
    let u = svd.u.as_ref().expect("svd with u");
    let vt = svd.v_t.as_ref().expect("svd with v_t");
    // bread = (X'X)^{-1} = V diag(1/sigma^2) V'
    let inv_s2 = nalgebra::DVector::from_iterator(
        q,
        svd.singular_values.iter().map(|&s| 1.0 / (s * s)),
    );
    let bread = vt.transpose() * DMatrix::from_diagonal(&inv_s2) * vt;
    let mut meat = DMatrix::zeros(q, q);
    for i in 0..n {
        let e = response[i] - fitted[i];
        let leverage = u.row(i).norm_squared() + extra_leverage[i];
        let denom = (1.0 - leverage).max(1e-10);
        let w = e * e / denom;
        for a in 0..q {
            let xa = x[(i, a)];
            for c in a..q {
                meat[(a, c)] += w * xa * x[(i, c)];
            }
        }
    }
    for a in 0..q {
        for c in a..q {
            meat[(c, a)] = meat[(a, c)];
        }
    }
    let cov = &bread * meat * &bread;
    let var_tau = cov[(tau_col, tau_col)];
    let v_hat = var_tau * n as f64;
    let se = var_tau.sqrt();
    Ok(VarianceReport {
        v_hat,
        se,
        ci_low: estimate.tau_hat - z * se,
        ci_high: estimate.tau_hat + z * se,
        alpha,
        method: VarianceMethod::EhwHc2,
        components: None,
        clamped: false,
    })
}
