//! Covariate-adjusted treatment effect estimators.
//!
//! Every estimator here is reported in one canonical form. Writing tau_dm
//! for the difference in means, p = a/k for the assignment probability and
//! s = sqrt(p(1-p)), an adjusted estimator is
//!
//!   tau_adj = tau_dm - gamma_hat' (wbar_1 - wbar_0) s,
//!
//! where w stacks the adjustment covariates h (and the auxiliary covariates
//! z when requested) and wbar_d is the arm mean of w. The family differs
//! only in how gamma_hat is fit:
//!
//! * `diff_means`: gamma = 0.
//! * `lin`: fully interacted regression Y ~ 1 + D + w~ + D w~ on globally
//!   demeaned covariates w~; arm slopes are recombined into gamma.
//! * `naive`: uninteracted regression Y ~ 1 + D + w; the coefficient on w is
//!   rescaled by 1/s.
//! * `fixed_effects`: group-dummy regression, computed by within-group
//!   demeaning; the within coefficient is rescaled by 1/s.
//! * `partialled_lin`: the interacted regression on within-group demeaned
//!   covariates h_check, which targets the mean-conditional variance instead
//!   of the marginal variance.
//! * `group_ols`: group-level inverse-probability aggregates regressed
//!   across groups; the intercept is the estimate.
//! * `tom`: a method-of-moments coefficient combining one pooled
//!   within-group variance with per-arm covariances.
//! * `adaptive`: evaluates the estimated variance of `lin` and
//!   `partialled_lin` (with z) and keeps the smaller.
//! * `wald_late`: ratio of two backbone estimates (outcome over uptake) for
//!   encouragement designs, with the instrument in the treatment slot.
//! * `aipw_varying`: augmented inverse-propensity estimator for designs
//!   whose assignment probability varies across groups.
//!
//! The augmented outcome Y^a_i = Y_i - s gamma_hat' w_i is carried on every
//! estimate; variance estimation consumes it directly.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{ExperimentData, Propensity};
use crate::design::{pair_groups, Design, GroupPairing};
use crate::error::{Error, Result};
use crate::linalg::{self, solve_least_squares};

/// Names the estimator an [`AdjustedEstimate`] came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorId {
    Unadj,
    Naive,
    Lin,
    Fe,
    Plin,
    Go,
    Tom,
    Adaptive,
    AipwVarying,
}

impl EstimatorId {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorId::Unadj => "unadj",
            EstimatorId::Naive => "naive",
            EstimatorId::Lin => "lin",
            EstimatorId::Fe => "fe",
            EstimatorId::Plin => "plin",
            EstimatorId::Go => "go",
            EstimatorId::Tom => "tom",
            EstimatorId::Adaptive => "adaptive",
            EstimatorId::AipwVarying => "aipw_varying",
        }
    }

    /// True for estimators that need a group structure, not just (y, d, h).
    pub fn needs_design(self) -> bool {
        matches!(
            self,
            EstimatorId::Fe
                | EstimatorId::Plin
                | EstimatorId::Go
                | EstimatorId::Tom
                | EstimatorId::Adaptive
                | EstimatorId::AipwVarying
        )
    }
}

impl std::fmt::Display for EstimatorId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for EstimatorId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "unadj" | "dm" => EstimatorId::Unadj,
            "naive" => EstimatorId::Naive,
            "lin" => EstimatorId::Lin,
            "fe" => EstimatorId::Fe,
            "plin" => EstimatorId::Plin,
            "go" => EstimatorId::Go,
            "tom" => EstimatorId::Tom,
            "adaptive" | "ad" => EstimatorId::Adaptive,
            "aipw_varying" | "aipw" => EstimatorId::AipwVarying,
            other => return Err(Error::Invalid(format!("unknown estimator {other:?}"))),
        })
    }
}

/// First-stage bookkeeping attached to Wald (encouragement design) estimates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LateDetail {
    pub backbone: EstimatorId,
    /// Effect of the instrument on uptake; the Wald denominator.
    pub tau_uptake: f64,
    pub gamma_outcome: Vec<f64>,
    pub gamma_uptake: Vec<f64>,
}

/// One fitted estimator in canonical form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdjustedEstimate {
    pub estimator: EstimatorId,
    pub with_z: bool,
    #[serde(rename = "tau")]
    pub tau_hat: f64,
    /// Adjustment coefficient on the raw stacked covariates (h, then z when
    /// `with_z`); length d_h + d_z or 2 d_h for `aipw_varying` (gamma0 then
    /// gamma1).
    #[serde(rename = "gamma")]
    pub gamma_hat: Vec<f64>,
    /// Y^a_i = Y_i - s gamma_hat' w_i; the input to variance estimation. For
    /// Wald estimates this is the structural residual
    /// Y_i - tau * uptake_i - s gamma' w_i.
    #[serde(skip)]
    pub augmented_outcomes: Vec<f64>,
    /// Assignment probability; None only for varying-propensity estimates.
    #[serde(rename = "p")]
    pub prop: Option<Propensity>,
    pub n: usize,
    /// Which branch `adaptive` kept.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chosen_branch: Option<EstimatorId>,
    /// z columns dropped for being constant within every group (their gamma
    /// entries are 0).
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub dropped_z: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub late: Option<LateDetail>,
}

impl AdjustedEstimate {
    /// Evaluates tau_dm - gamma_hat' (wbar_1 - wbar_0) s on the given data.
    /// For the estimators built from interacted or group-level regressions
    /// this reproduces `tau_hat` to machine precision; for `naive` and
    /// `fixed_effects` it agrees up to an O(1/n) remainder.
    pub fn reconstructed_tau(&self, data: &ExperimentData) -> Result<f64> {
        let (tau_dm, _, _) = raw_diff_means(data)?;
        let prop = match self.prop {
            Some(p) => p,
            None => return Err(Error::Invalid("no single propensity to reconstruct with".into())),
        };
        let w = stacked_covariates(data, self.with_z);
        let diff = arm_mean_diff(&w, &data.d);
        let dot: f64 = self
            .gamma_hat
            .iter()
            .zip(&diff)
            .map(|(g, d)| g * d)
            .sum();
        Ok(tau_dm - dot * prop.s())
    }
}

// === shared helpers (inference reuses the pub(crate) ones to rebuild
// defining regressions) ===

pub(crate) fn require_outcomes(data: &ExperimentData) -> Result<(usize, usize)> {
    if data.y.len() != data.n {
        return Err(Error::EmptyInput);
    }
    data.arm_counts()
}

/// Raw h, or raw (h | z) stacked column-wise.
pub(crate) fn stacked_covariates(data: &ExperimentData, include_z: bool) -> DMatrix<f64> {
    if !include_z || data.z.ncols() == 0 {
        data.h.clone()
    } else {
        let mut w = DMatrix::zeros(data.n, data.h.ncols() + data.z.ncols());
        w.view_mut((0, 0), (data.n, data.h.ncols())).copy_from(&data.h);
        w.view_mut((0, data.h.ncols()), (data.n, data.z.ncols())).copy_from(&data.z);
        w
    }
}

fn arm_mean_diff(w: &DMatrix<f64>, d: &[u8]) -> Vec<f64> {
    let m1 = linalg::column_means_where(w, d, 1);
    let m0 = linalg::column_means_where(w, d, 0);
    m1.iter().zip(&m0).map(|(a, b)| a - b).collect()
}

fn raw_diff_means(data: &ExperimentData) -> Result<(f64, f64, f64)> {
    let (n1, n0) = require_outcomes(data)?;
    let mut s1 = 0.0;
    let mut s0 = 0.0;
    for i in 0..data.n {
        if data.d[i] == 1 {
            s1 += data.y[i];
        } else {
            s0 += data.y[i];
        }
    }
    let ybar1 = s1 / n1 as f64;
    let ybar0 = s0 / n0 as f64;
    Ok((ybar1 - ybar0, ybar1, ybar0))
}

fn augmented(data: &ExperimentData, w: &DMatrix<f64>, gamma: &[f64], s: f64) -> Vec<f64> {
    (0..data.n)
        .map(|i| {
            let mut dot = 0.0;
            for (j, g) in gamma.iter().enumerate() {
                dot += g * w[(i, j)];
            }
            data.y[i] - s * dot
        })
        .collect()
}

/// Scale factors that turn per-arm slopes into the canonical coefficient:
/// gamma = alpha_1 * r1 + alpha_0 * r0.
fn arm_weights(p: f64) -> (f64, f64) {
    (((1.0 - p) / p).sqrt(), (p / (1.0 - p)).sqrt())
}

/// Checks the design covers exactly the rows of `data` with one shared
/// propensity; returns it.
fn constant_design(data: &ExperimentData, design: &Design) -> Result<Propensity> {
    design.validate_for(data)?;
    let covered: usize = design.groups.iter().map(|g| g.units.len()).sum();
    if covered != data.n {
        return Err(Error::GroupStructure(
            "design leaves units outside every group; restrict the data first".into(),
        ));
    }
    design.constant_propensity().ok_or_else(|| {
        Error::Invalid("this estimator needs a constant-propensity design".into())
    })
}

/// Subtracts each unit's group mean, column by column.
pub(crate) fn within_demean(m: &DMatrix<f64>, design: &Design) -> DMatrix<f64> {
    let mut out = m.clone();
    for group in &design.groups {
        let k = group.units.len() as f64;
        for j in 0..m.ncols() {
            let mean: f64 = group.units.iter().map(|&u| m[(u, j)]).sum::<f64>() / k;
            for &u in &group.units {
                out[(u, j)] -= mean;
            }
        }
    }
    out
}

/// Indices of columns with no variation inside any group (relative to the
/// column's own scale). Such columns carry no within-group information.
pub(crate) fn columns_constant_within_groups(m: &DMatrix<f64>, design: &Design) -> Vec<usize> {
    let centered = within_demean(m, design);
    (0..m.ncols())
        .filter(|&j| {
            let scale = 1.0 + m.column(j).amax();
            centered.column(j).amax() <= 1e-12 * scale
        })
        .collect()
}

/// z block with the given columns removed; `kept` maps new to old indices.
pub(crate) fn drop_columns(z: &DMatrix<f64>, dropped: &[usize]) -> (DMatrix<f64>, Vec<usize>) {
    let kept: Vec<usize> = (0..z.ncols()).filter(|j| !dropped.contains(j)).collect();
    let out = DMatrix::from_fn(z.nrows(), kept.len(), |i, j| z[(i, kept[j])]);
    (out, kept)
}

/// Scatters coefficients fit on kept columns back to full width, zeros at
/// dropped positions.
fn scatter(full_len: usize, kept: &[usize], values: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; full_len];
    for (slot, &col) in kept.iter().enumerate() {
        out[col] = values[slot];
    }
    out
}

// === estimators ===

/// Unadjusted difference in arm means. gamma = 0, so the augmented outcomes
/// are the outcomes themselves.
pub fn diff_means(data: &ExperimentData) -> Result<AdjustedEstimate> {
    let (tau, _, _) = raw_diff_means(data)?;
    Ok(AdjustedEstimate {
        estimator: EstimatorId::Unadj,
        with_z: false,
        tau_hat: tau,
        gamma_hat: vec![0.0; data.h.ncols()],
        augmented_outcomes: data.y.clone(),
        prop: Some(data.implied_propensity()?),
        n: data.n,
        chosen_branch: None,
        dropped_z: vec![],
        late: None,
    })
}

/// Fully interacted covariate adjustment: the coefficient on D in
/// Y ~ 1 + D + w~ + D w~ with globally demeaned covariates w~. The per-arm
/// slopes alpha_1 = a0 + a1 and alpha_0 = a0 recombine into the canonical
/// gamma exactly, so the reconstruction identity holds to machine precision.
pub fn lin(data: &ExperimentData, include_z: bool) -> Result<AdjustedEstimate> {
    require_outcomes(data)?;
    let prop = data.implied_propensity()?;
    let w_raw = stacked_covariates(data, include_z);
    let w = linalg::demean(&w_raw);
    let dw = w.ncols();
    let n = data.n;
    let mut x = DMatrix::zeros(n, 2 + 2 * dw);
    for i in 0..n {
        x[(i, 0)] = 1.0;
        x[(i, 1)] = f64::from(data.d[i]);
        for j in 0..dw {
            x[(i, 2 + j)] = w[(i, j)];
            x[(i, 2 + dw + j)] = f64::from(data.d[i]) * w[(i, j)];
        }
    }
    let fit = solve_least_squares(&x, &data.y)?;
    let tau = fit.coefficients[1];
    let (r1, r0) = arm_weights(prop.p());
    let gamma: Vec<f64> = (0..dw)
        .map(|j| {
            let a0 = fit.coefficients[2 + j];
            let a1 = fit.coefficients[2 + dw + j];
            (a0 + a1) * r1 + a0 * r0
        })
        .collect();
    let aug = augmented(data, &w_raw, &gamma, prop.s());
    Ok(AdjustedEstimate {
        estimator: EstimatorId::Lin,
        with_z: include_z,
        tau_hat: tau,
        gamma_hat: gamma,
        augmented_outcomes: aug,
        prop: Some(prop),
        n,
        chosen_branch: None,
        dropped_z: vec![],
        late: None,
    })
}

/// Uninteracted covariate adjustment: the coefficient on D in Y ~ 1 + D + w.
/// The covariate coefficient divided by s is reported as gamma; the
/// reconstruction identity then holds up to an O(1/n) remainder.
pub fn naive(data: &ExperimentData, include_z: bool) -> Result<AdjustedEstimate> {
    require_outcomes(data)?;
    let prop = data.implied_propensity()?;
    let w = stacked_covariates(data, include_z);
    let dw = w.ncols();
    let n = data.n;
    let mut x = DMatrix::zeros(n, 2 + dw);
    for i in 0..n {
        x[(i, 0)] = 1.0;
        x[(i, 1)] = f64::from(data.d[i]);
        for j in 0..dw {
            x[(i, 2 + j)] = w[(i, j)];
        }
    }
    let fit = solve_least_squares(&x, &data.y)?;
    let tau = fit.coefficients[1];
    let gamma: Vec<f64> = fit.coefficients[2..].iter().map(|b| b / prop.s()).collect();
    let aug = augmented(data, &w, &gamma, prop.s());
    Ok(AdjustedEstimate {
        estimator: EstimatorId::Naive,
        with_z: include_z,
        tau_hat: tau,
        gamma_hat: gamma,
        augmented_outcomes: aug,
        prop: Some(prop),
        n,
        chosen_branch: None,
        dropped_z: vec![],
        late: None,
    })
}

/// Group fixed effects, computed by within-group demeaning instead of
/// explicit dummies: tau is the coefficient on (D - p) in
/// Y ~ 1 + (D - p) + h_check [+ z], where h_check subtracts group means and
/// z enters raw. The covariate coefficients divided by s are reported as
/// gamma. z columns constant inside every group are dropped (gamma entry 0)
/// and listed in `dropped_z`.
pub fn fixed_effects(data: &ExperimentData, design: &Design, include_z: bool) -> Result<AdjustedEstimate> {
    require_outcomes(data)?;
    let prop = constant_design(data, design)?;
    let p = prop.p();
    let h_check = within_demean(&data.h, design);
    let (z_used, dropped, kept) = if include_z && data.z.ncols() > 0 {
        let dropped = columns_constant_within_groups(&data.z, design);
        let (z_used, kept) = drop_columns(&data.z, &dropped);
        (z_used, dropped, kept)
    } else {
        (DMatrix::zeros(data.n, 0), vec![], vec![])
    };
    let dh = h_check.ncols();
    let dz = z_used.ncols();
    let n = data.n;
    let mut x = DMatrix::zeros(n, 2 + dh + dz);
    for i in 0..n {
        x[(i, 0)] = 1.0;
        x[(i, 1)] = f64::from(data.d[i]) - p;
        for j in 0..dh {
            x[(i, 2 + j)] = h_check[(i, j)];
        }
        for j in 0..dz {
            x[(i, 2 + dh + j)] = z_used[(i, j)];
        }
    }
    let fit = solve_least_squares(&x, &data.y)?;
    let tau = fit.coefficients[1];
    let gamma_h: Vec<f64> = fit.coefficients[2..2 + dh].iter().map(|b| b / prop.s()).collect();
    let gamma_z_kept: Vec<f64> = fit.coefficients[2 + dh..].iter().map(|b| b / prop.s()).collect();
    let mut gamma = gamma_h;
    if include_z && data.z.ncols() > 0 {
        gamma.extend(scatter(data.z.ncols(), &kept, &gamma_z_kept));
    }
    let w_raw = stacked_covariates(data, include_z);
    let aug = augmented(data, &w_raw, &gamma, prop.s());
    Ok(AdjustedEstimate {
        estimator: EstimatorId::Fe,
        with_z: include_z,
        tau_hat: tau,
        gamma_hat: gamma,
        augmented_outcomes: aug,
        prop: Some(prop),
        n,
        chosen_branch: None,
        dropped_z: dropped,
        late: None,
    })
}

/// Interacted regression on within-group demeaned covariates:
/// Y ~ (1, v) + D (1, v) with v = (h_check [, z]). Unlike `lin`, the
/// partialling keeps only covariate variation orthogonal to the strata, so
/// the coefficient targets the mean-conditional variance. Per-arm slopes
/// recombine into gamma exactly as in `lin`. Because raw z enters with a
/// nonzero mean, tau is assembled from the difference in means and gamma
/// rather than read off the treatment coefficient (the two agree only when
/// every regressor averages to zero).
pub fn partialled_lin(data: &ExperimentData, design: &Design, include_z: bool) -> Result<AdjustedEstimate> {
    require_outcomes(data)?;
    let prop = constant_design(data, design)?;
    let h_check = within_demean(&data.h, design);
    let (z_used, dropped, kept) = if include_z && data.z.ncols() > 0 {
        let dropped = columns_constant_within_groups(&data.z, design);
        let (z_used, kept) = drop_columns(&data.z, &dropped);
        (z_used, dropped, kept)
    } else {
        (DMatrix::zeros(data.n, 0), vec![], vec![])
    };
    let dh = h_check.ncols();
    let dz = z_used.ncols();
    let dv = dh + dz;
    let n = data.n;
    let v = |i: usize, j: usize| -> f64 {
        if j < dh { h_check[(i, j)] } else { z_used[(i, j - dh)] }
    };
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
    let fit = solve_least_squares(&x, &data.y)?;
    let (r1, r0) = arm_weights(prop.p());
    let gamma_v: Vec<f64> = (0..dv)
        .map(|j| {
            let a0 = fit.coefficients[2 + j];
            let a1 = fit.coefficients[2 + dv + j];
            (a0 + a1) * r1 + a0 * r0
        })
        .collect();
    let mut gamma = gamma_v[..dh].to_vec();
    if include_z && data.z.ncols() > 0 {
        gamma.extend(scatter(data.z.ncols(), &kept, &gamma_v[dh..]));
    }
    let w_raw = stacked_covariates(data, include_z);
    let (tau_dm, _, _) = raw_diff_means(data)?;
    let wdiff = arm_mean_diff(&w_raw, &data.d);
    let shift: f64 = gamma.iter().zip(&wdiff).map(|(g, dw)| g * dw).sum();
    let tau = tau_dm - prop.s() * shift;
    let aug = augmented(data, &w_raw, &gamma, prop.s());
    Ok(AdjustedEstimate {
        estimator: EstimatorId::Plin,
        with_z: include_z,
        tau_hat: tau,
        gamma_hat: gamma,
        augmented_outcomes: aug,
        prop: Some(prop),
        n,
        chosen_branch: None,
        dropped_z: dropped,
        late: None,
    })
}

/// Group-level OLS: each group is collapsed to inverse-probability
/// aggregates
///
///   y_g = (1/k) sum_{i in g} [Y_i D_i / p - Y_i (1 - D_i) / (1 - p)],
///
/// h_g likewise, and y_g is regressed on (1, h_g) across groups. Because the
/// group means of (y_g, h_g) equal (tau_dm, hbar_1 - hbar_0) exactly under
/// a-of-k assignment, the intercept is the adjusted estimate and the slope
/// divided by s is the canonical gamma. With z, the auxiliary adjustment is
/// borrowed from `partialled_lin` (their coefficients share one limit).
pub fn group_ols(data: &ExperimentData, design: &Design, include_z: bool) -> Result<AdjustedEstimate> {
    require_outcomes(data)?;
    let prop = constant_design(data, design)?;
    let g = design.groups.len();
    if g < 2 {
        return Err(Error::SingleGroup);
    }
    let p = prop.p();
    let dh = data.h.ncols();
    let mut x = DMatrix::zeros(g, 1 + dh);
    let mut yg = vec![0.0; g];
    for (gi, group) in design.groups.iter().enumerate() {
        let k = group.units.len() as f64;
        x[(gi, 0)] = 1.0;
        for &u in &group.units {
            let sign = if data.d[u] == 1 { 1.0 / p } else { -1.0 / (1.0 - p) };
            yg[gi] += data.y[u] * sign / k;
            for j in 0..dh {
                x[(gi, 1 + j)] += data.h[(u, j)] * sign / k;
            }
        }
    }
    let fit = solve_least_squares(&x, &yg)?;
    let mut tau = fit.coefficients[0];
    let mut gamma: Vec<f64> = fit.coefficients[1..].iter().map(|b| b / prop.s()).collect();
    let mut dropped = vec![];
    if include_z && data.z.ncols() > 0 {
        let plin_z = partialled_lin(data, design, true)?;
        let alpha_z = &plin_z.gamma_hat[dh..];
        let zdiff = arm_mean_diff(&data.z, &data.d);
        let shift: f64 = alpha_z.iter().zip(&zdiff).map(|(a, d)| a * d).sum();
        tau -= shift * prop.s();
        gamma.extend_from_slice(alpha_z);
        dropped = plin_z.dropped_z;
    }
    let w_raw = stacked_covariates(data, include_z);
    let aug = augmented(data, &w_raw, &gamma, prop.s());
    Ok(AdjustedEstimate {
        estimator: EstimatorId::Go,
        with_z: include_z,
        tau_hat: tau,
        gamma_hat: gamma,
        augmented_outcomes: aug,
        prop: Some(prop),
        n: data.n,
        chosen_branch: None,
        dropped_z: dropped,
        late: None,
    })
}

/// Third-moment estimator: gamma solves
///
///   var_n(v) gamma = cov_n(v, Y | D=1) r1 + cov_n(v, Y | D=0) r0
///
/// with v = (h_check [, z]) and (r1, r0) the canonical arm weights. One
/// pooled within-group variance replaces the per-arm variances of
/// `partialled_lin`, which removes that estimator's own-arm partialling
/// noise. tau applies gamma to the raw covariate arm means.
pub fn tom(data: &ExperimentData, design: &Design, include_z: bool) -> Result<AdjustedEstimate> {
    require_outcomes(data)?;
    let prop = constant_design(data, design)?;
    let h_check = within_demean(&data.h, design);
    let dh = h_check.ncols();
    let use_z = include_z && data.z.ncols() > 0;
    let dz = if use_z { data.z.ncols() } else { 0 };
    let dv = dh + dz;
    let n = data.n;
    let v = |i: usize, j: usize| -> f64 {
        if j < dh { h_check[(i, j)] } else { data.z[(i, j - dh)] }
    };
    // Pooled second moment around the overall mean of v.
    let mut vbar = vec![0.0; dv];
    for i in 0..n {
        for j in 0..dv {
            vbar[j] += v(i, j);
        }
    }
    for val in &mut vbar {
        *val /= n as f64;
    }
    let mut m = DMatrix::zeros(dv, dv);
    for i in 0..n {
        for a in 0..dv {
            let va = v(i, a) - vbar[a];
            for b in a..dv {
                m[(a, b)] += va * (v(i, b) - vbar[b]);
            }
        }
    }
    for a in 0..dv {
        for b in a..dv {
            m[(a, b)] /= n as f64;
            m[(b, a)] = m[(a, b)];
        }
    }
    // Per-arm covariances around arm-conditional means.
    let mut rhs = vec![0.0; dv];
    let (r1, r0) = arm_weights(prop.p());
    for arm in [1u8, 0u8] {
        let count = data.d.iter().filter(|&&d| d == arm).count();
        let ybar: f64 = (0..n).filter(|&i| data.d[i] == arm).map(|i| data.y[i]).sum::<f64>() / count as f64;
        let mut vbar_arm = vec![0.0; dv];
        for i in 0..n {
            if data.d[i] == arm {
                for j in 0..dv {
                    vbar_arm[j] += v(i, j);
                }
            }
        }
        for val in &mut vbar_arm {
            *val /= count as f64;
        }
        let weight = if arm == 1 { r1 } else { r0 };
        for i in 0..n {
            if data.d[i] == arm {
                let dy = data.y[i] - ybar;
                for j in 0..dv {
                    rhs[j] += weight * (v(i, j) - vbar_arm[j]) * dy / count as f64;
                }
            }
        }
    }
    let gamma_v = if dv == 0 {
        vec![]
    } else {
        solve_least_squares(&m, &rhs)?.coefficients
    };
    let mut gamma = gamma_v[..dh].to_vec();
    if use_z {
        gamma.extend_from_slice(&gamma_v[dh..]);
    }
    let (tau_dm, _, _) = raw_diff_means(data)?;
    let w_raw = stacked_covariates(data, include_z);
    let wdiff = arm_mean_diff(&w_raw, &data.d);
    let shift: f64 = gamma.iter().zip(&wdiff).map(|(g, d)| g * d).sum();
    let tau = tau_dm - shift * prop.s();
    let aug = augmented(data, &w_raw, &gamma, prop.s());
    Ok(AdjustedEstimate {
        estimator: EstimatorId::Tom,
        with_z: include_z,
        tau_hat: tau,
        gamma_hat: gamma,
        augmented_outcomes: aug,
        prop: Some(prop),
        n,
        chosen_branch: None,
        dropped_z: vec![],
        late: None,
    })
}

/// Keeps whichever of `lin` and `partialled_lin` (both with z) has the
/// smaller estimated variance under the paired-group variance estimator.
/// Exact ties keep `lin`.
pub fn adaptive(data: &ExperimentData, design: &Design) -> Result<AdjustedEstimate> {
    let lin_z = lin(data, true)?;
    let plin_z = partialled_lin(data, design, true)?;
    let pairing = pair_groups(design, &data.psi)?;
    adaptive_from_candidates(data, design, &pairing, lin_z, plin_z)
}

/// Adaptive selection when the candidates and pairing are already at hand
/// (the simulation harness computes them anyway).
pub fn adaptive_from_candidates(
    data: &ExperimentData,
    design: &Design,
    pairing: &GroupPairing,
    lin_z: AdjustedEstimate,
    plin_z: AdjustedEstimate,
) -> Result<AdjustedEstimate> {
    let v_lin = crate::inference::exact_variance(&lin_z, data, design, pairing, 0.05)?.v_hat;
    let v_plin = crate::inference::exact_variance(&plin_z, data, design, pairing, 0.05)?.v_hat;
    let (winner, branch) = if v_lin <= v_plin {
        (lin_z, EstimatorId::Lin)
    } else {
        (plin_z, EstimatorId::Plin)
    };
    Ok(AdjustedEstimate {
        estimator: EstimatorId::Adaptive,
        chosen_branch: Some(branch),
        ..winner
    })
}

/// Wald estimator for encouragement designs. `data.d` must hold the
/// randomized instrument; `uptake` holds realized treatment. The backbone
/// (one of `plin`, `go`, `tom`) is run twice, on the outcome and on uptake,
/// and the ratio estimates the local average treatment effect. gamma_hat is
/// the combination gamma_outcome - tau * gamma_uptake, whose augmented
/// outcomes Y - tau uptake - s gamma' w feed `late_variance`.
pub fn wald_late(
    data: &ExperimentData,
    uptake: &[u8],
    design: &Design,
    backbone: EstimatorId,
    include_z: bool,
) -> Result<AdjustedEstimate> {
    if !matches!(backbone, EstimatorId::Plin | EstimatorId::Go | EstimatorId::Tom) {
        return Err(Error::Invalid(format!(
            "Wald backbone must be plin, go, or tom, not {backbone}"
        )));
    }
    if uptake.len() != data.n {
        return Err(Error::Invalid("uptake length does not match the data".into()));
    }
    for (i, &u) in uptake.iter().enumerate() {
        if u > 1 {
            return Err(Error::NonBinaryTreatment(i + 1));
        }
    }
    let run = |outcome: Vec<f64>| -> Result<AdjustedEstimate> {
        let swapped = ExperimentData { y: outcome, ..data.clone() };
        match backbone {
            EstimatorId::Plin => partialled_lin(&swapped, design, include_z),
            EstimatorId::Go => group_ols(&swapped, design, include_z),
            EstimatorId::Tom => tom(&swapped, design, include_z),
            _ => unreachable!(),
        }
    };
    let est_w = run(data.y.clone())?;
    let est_d = run(uptake.iter().map(|&u| f64::from(u)).collect())?;
    let tau_d = est_d.tau_hat;
    if tau_d.abs() <= 1e-6 {
        return Err(Error::WeakFirstStage);
    }
    let tau = est_w.tau_hat / tau_d;
    let gamma: Vec<f64> = est_w
        .gamma_hat
        .iter()
        .zip(&est_d.gamma_hat)
        .map(|(gw, gd)| gw - tau * gd)
        .collect();
    let prop = est_w.prop.expect("backbone estimates carry a propensity");
    let w_raw = stacked_covariates(data, include_z);
    let s = prop.s();
    let aug: Vec<f64> = (0..data.n)
        .map(|i| {
            let mut dot = 0.0;
            for (j, g) in gamma.iter().enumerate() {
                dot += g * w_raw[(i, j)];
            }
            data.y[i] - tau * f64::from(uptake[i]) - s * dot
        })
        .collect();
    Ok(AdjustedEstimate {
        estimator: backbone,
        with_z: include_z,
        tau_hat: tau,
        gamma_hat: gamma,
        augmented_outcomes: aug,
        prop: Some(prop),
        n: data.n,
        chosen_branch: None,
        dropped_z: est_w.dropped_z.clone(),
        late: Some(LateDetail {
            backbone,
            tau_uptake: tau_d,
            gamma_outcome: est_w.gamma_hat,
            gamma_uptake: est_d.gamma_hat,
        }),
    })
}

/// Per-arm companion coefficients (gamma0, gamma1) for [`aipw_varying`],
/// estimated from propensity-rescaled, within-group centered covariates.
pub fn aipw_gamma_hat(data: &ExperimentData, design: &Design) -> Result<(Vec<f64>, Vec<f64>)> {
    require_outcomes(data)?;
    design.validate_for(data)?;
    let props = crate::design::unit_propensities(design)?;
    let n = data.n;
    let dh = data.h.ncols();
    if dh == 0 {
        return Ok((vec![], vec![]));
    }
    let group_of = design.unit_groups();
    // Stacked rescaled covariates: block 0 pairs with gamma0, block 1 with
    // gamma1.
    let mut hp = DMatrix::zeros(n, 2 * dh);
    for i in 0..n {
        let p = props[i].p();
        let w0 = (p / (1.0 - p)).sqrt();
        let w1 = ((1.0 - p) / p).sqrt();
        for j in 0..dh {
            hp[(i, j)] = data.h[(i, j)] * w0;
            hp[(i, dh + j)] = data.h[(i, j)] * w1;
        }
    }
    let hp_check = within_demean(&hp, design);
    let mut m = DMatrix::zeros(2 * dh, 2 * dh);
    let mut rhs = vec![0.0; 2 * dh];
    for i in 0..n {
        let p = props[i].p();
        let k = design.groups[group_of[i].expect("covered")].units.len() as f64;
        let correction = k / (k - 1.0);
        let y_tm = if data.d[i] == 1 {
            data.y[i] * (1.0 - p).sqrt() * p.powf(-1.5)
        } else {
            data.y[i] * p.sqrt() * (1.0 - p).powf(-1.5)
        };
        for a in 0..2 * dh {
            let va = hp_check[(i, a)];
            rhs[a] += va * y_tm * correction / n as f64;
            for b in a..2 * dh {
                m[(a, b)] += va * hp_check[(i, b)] * correction / n as f64;
            }
        }
    }
    for a in 0..2 * dh {
        for b in a..2 * dh {
            m[(b, a)] = m[(a, b)];
        }
    }
    let g = solve_least_squares(&m, &rhs)?.coefficients;
    Ok((g[..dh].to_vec(), g[dh..].to_vec()))
}

/// Augmented inverse-propensity estimator for varying-propensity designs:
///
///   tau = (gamma1 - gamma0)' mean(h)
///       + mean(D (Y - gamma1' h) / p_i) - mean((1-D)(Y - gamma0' h) / (1-p_i))
///
/// with p_i the unit's group propensity. Under a constant propensity and
/// gamma0 = gamma1 = gamma this equals the canonical adjusted estimator with
/// coefficient gamma / s. The stored gamma_hat stacks (gamma0, gamma1).
pub fn aipw_varying(
    data: &ExperimentData,
    design: &Design,
    gamma0: &[f64],
    gamma1: &[f64],
) -> Result<AdjustedEstimate> {
    require_outcomes(data)?;
    design.validate_for(data)?;
    let dh = data.h.ncols();
    if gamma0.len() != dh || gamma1.len() != dh {
        return Err(Error::Invalid(format!(
            "gamma blocks must have length {dh} to match h"
        )));
    }
    let props = crate::design::unit_propensities(design)?;
    let n = data.n;
    let mut tau = 0.0;
    for i in 0..n {
        let p = props[i].p();
        let mut g0h = 0.0;
        let mut g1h = 0.0;
        for j in 0..dh {
            g0h += gamma0[j] * data.h[(i, j)];
            g1h += gamma1[j] * data.h[(i, j)];
        }
        tau += g1h - g0h;
        if data.d[i] == 1 {
            tau += (data.y[i] - g1h) / p;
        } else {
            tau -= (data.y[i] - g0h) / (1.0 - p);
        }
    }
    tau /= n as f64;
    // Effective canonical coefficient per unit, for the augmented outcomes.
    let aug: Vec<f64> = (0..n)
        .map(|i| {
            let p = props[i].p();
            let s = (p * (1.0 - p)).sqrt();
            let (r1, r0) = arm_weights(p);
            let mut dot = 0.0;
            for j in 0..dh {
                dot += (gamma1[j] * r1 + gamma0[j] * r0) * data.h[(i, j)];
            }
            data.y[i] - s * dot
        })
        .collect();
    let mut gamma = gamma0.to_vec();
    gamma.extend_from_slice(gamma1);
    Ok(AdjustedEstimate {
        estimator: EstimatorId::AipwVarying,
        with_z: false,
        tau_hat: tau,
        gamma_hat: gamma,
        augmented_outcomes: aug,
        prop: design.constant_propensity(),
        n,
        chosen_branch: None,
        dropped_z: vec![],
        late: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::assign_matched_tuples;

    fn toy_data() -> (ExperimentData, Design) {
        let n = 8;
        let psi = DMatrix::from_fn(n, 1, |i, _| i as f64);
        let h = DMatrix::from_fn(n, 1, |i, _| (i as f64) * 0.5 + ((i * i) as f64 * 0.13).sin());
        let z = DMatrix::zeros(n, 0);
        let design = assign_matched_tuples(&psi, Propensity::new(1, 2).unwrap(), 3).unwrap();
        let y: Vec<f64> = (0..n)
            .map(|i| h[(i, 0)] * 2.0 + f64::from(design.treatment[i]) * 1.5 + (i as f64 * 0.7).cos())
            .collect();
        let data = ExperimentData::new(psi, h, z, y, design.treatment.clone()).unwrap();
        (data, design)
    }

    #[test]
    fn diff_means_on_constants() {
        let data = ExperimentData::new(
            DMatrix::zeros(4, 0),
            DMatrix::zeros(4, 0),
            DMatrix::zeros(4, 0),
            vec![1.0, 3.0, 0.0, 1.0],
            vec![1, 1, 0, 0],
        )
        .unwrap();
        let est = diff_means(&data).unwrap();
        assert!((est.tau_hat - 1.5).abs() < 1e-12);
        assert_eq!(est.prop.unwrap(), Propensity::new(1, 2).unwrap());
    }

    #[test]
    fn lin_reconstruction_is_exact() {
        let (data, _) = toy_data();
        let est = lin(&data, false).unwrap();
        let rebuilt = est.reconstructed_tau(&data).unwrap();
        assert!((est.tau_hat - rebuilt).abs() < 1e-10);
    }

    #[test]
    fn plin_reconstruction_is_exact() {
        let (data, design) = toy_data();
        let est = partialled_lin(&data, &design, false).unwrap();
        let rebuilt = est.reconstructed_tau(&data).unwrap();
        assert!((est.tau_hat - rebuilt).abs() < 1e-10);
    }

    #[test]
    fn matched_pairs_collapse() {
        let (data, design) = toy_data();
        let a = partialled_lin(&data, &design, false).unwrap();
        let b = group_ols(&data, &design, false).unwrap();
        let c = fixed_effects(&data, &design, false).unwrap();
        assert!((a.tau_hat - b.tau_hat).abs() < 1e-8);
        assert!((a.tau_hat - c.tau_hat).abs() < 1e-8);
    }

    #[test]
    fn wald_full_compliance_equals_backbone() {
        let (data, design) = toy_data();
        let uptake = data.d.clone();
        let wald = wald_late(&data, &uptake, &design, EstimatorId::Plin, false).unwrap();
        let plain = partialled_lin(&data, &design, false).unwrap();
        assert!((wald.tau_hat - plain.tau_hat).abs() < 1e-10);
        assert!((wald.late.as_ref().unwrap().tau_uptake - 1.0).abs() < 1e-10);
    }
}
