//! Monte Carlo harness: synthetic data models, replication loops, design
//! replay over imputed potential outcomes, and an oracle benchmark.
//!
//! The registry models share one template. With psi ~ N(0, I_m) per unit,
//! u ~ N(0, 1) an unobserved factor, S = sum_j psi_j and
//! T = sum_j psi_j^2, outcomes and the adjustment covariate are
//!
//!   Y(d) = q_y (S^2 - T) + l_d S + c_d u + noise_sd * eps_d,
//!   h    = q_h (S^2 - T) + l_h S + u,
//!
//! where S^2 - T is the sum of all off-diagonal products psi_a psi_b. The
//! six registry models differ in (c_0, c_1), the assignment probability, and
//! the strength q_h of the nonlinearity in h; all have zero average effect.
//! The auxiliary covariates are z = psi, so estimators that admit strata
//! controls can reconstruct the stratification signal.
//!
//! Replication results are reported relative to the unadjusted difference in
//! means: relative MSE in percent, coverage of the paired-group intervals,
//! and percent change in interval length, each with a Monte Carlo standard
//! error (delta method for the ratios). Replications run in parallel but
//! each one derives its randomness from (master_seed, replication index)
//! alone, so results are bit-identical for any thread count.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjust::{self, AdjustedEstimate, EstimatorId};
use crate::data::{ExperimentData, Propensity};
use crate::design::{assign_complete, assign_matched_tuples, pair_groups, Design};
use crate::error::{Error, Result};
use crate::inference;
use crate::linalg;

/// One estimator choice in a scenario: which estimator, and whether the
/// auxiliary covariates z enter. Serialized as "lin", "lin+z", etc.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EstimatorSpec {
    pub id: EstimatorId,
    pub with_z: bool,
}

impl EstimatorSpec {
    pub fn new(id: EstimatorId, with_z: bool) -> Self {
        EstimatorSpec { id, with_z }
    }
}

impl std::fmt::Display for EstimatorSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.with_z {
            write!(f, "{}+z", self.id)
        } else {
            write!(f, "{}", self.id)
        }
    }
}

impl std::str::FromStr for EstimatorSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let trimmed = s.trim();
        let (base, with_z) = match trimmed.strip_suffix("+z") {
            Some(b) => (b, true),
            None => (trimmed, false),
        };
        let id: EstimatorId = base.parse()?;
        if with_z && matches!(id, EstimatorId::Unadj | EstimatorId::AipwVarying) {
            return Err(Error::Invalid(format!("{id} does not take +z")));
        }
        Ok(EstimatorSpec { id, with_z })
    }
}

impl Serialize for EstimatorSpec {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for EstimatorSpec {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// Concrete coefficients of one synthetic data model.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Coefficient on the off-diagonal quadratic S^2 - T in both potential
    /// outcomes.
    pub quad_outcome: f64,
    /// Coefficient on S^2 - T in the adjustment covariate h.
    pub quad_h: f64,
    /// Coefficients on S in (Y(0), Y(1)).
    pub lin_outcome: (f64, f64),
    /// Coefficient on S in h.
    pub lin_h: f64,
    /// Loadings (c_0, c_1) of the unobserved factor u in the two arms.
    pub unobserved: (f64, f64),
    /// Standard deviation of the idiosyncratic outcome noise.
    pub noise_sd: f64,
}

impl ModelSpec {
    /// Population average treatment effect. E[S] = 0, E[u] = 0, and
    /// E[S^2 - T] = m - m = 0, so every term of E[Y(1) - Y(0)] vanishes.
    pub fn true_ate(&self) -> f64 {
        0.0
    }

    /// Population value the within-group adjustment coefficients converge
    /// to: gamma* = c_1 sqrt((1-p)/p) + c_0 sqrt(p/(1-p)). Conditional on
    /// psi, the only covariate signal in h is u, with unit loading.
    pub fn limit_gamma(&self, p: f64) -> f64 {
        self.unobserved.1 * ((1.0 - p) / p).sqrt() + self.unobserved.0 * (p / (1.0 - p)).sqrt()
    }
}

/// Registry of the six benchmark models, parameterized by the psi dimension.
pub fn registry_model(id: u32, dim_psi: usize) -> Result<(ModelSpec, Propensity)> {
    let m = dim_psi as f64;
    if dim_psi == 0 {
        return Err(Error::Invalid("dim_psi must be at least 1".into()));
    }
    let base = ModelSpec {
        quad_outcome: 1.0 / m,
        quad_h: 1.0 / (m * m),
        lin_outcome: (1.0, 2.0),
        lin_h: 1.0,
        unobserved: (-3.0, -3.0),
        noise_sd: (0.1f64).sqrt(),
    };
    let two_thirds = Propensity::new(2, 3).expect("2/3");
    let half = Propensity::new(1, 2).expect("1/2");
    Ok(match id {
        1 => (base, two_thirds),
        2 => (ModelSpec { unobserved: (-4.0, -1.0), ..base }, two_thirds),
        3 => (ModelSpec { unobserved: (-4.0, -1.0), ..base }, half),
        4 => (ModelSpec { unobserved: (2.0, 4.0), ..base }, two_thirds),
        5 => (ModelSpec { unobserved: (2.0, 4.0), ..base }, half),
        6 => (ModelSpec { quad_h: 1.0 / 100.0, ..base }, two_thirds),
        other => return Err(Error::UnknownModel(other)),
    })
}

fn default_alpha() -> f64 {
    0.05
}

/// One simulation scenario: a model, a sample size, estimators to compare,
/// and a replication budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimScenario {
    /// Free-form name echoed into results.
    #[serde(default)]
    pub label: String,
    /// Registry model id 1..=6, or 0 to use `custom`.
    #[serde(default)]
    pub model: u32,
    #[serde(default)]
    pub custom: Option<ModelSpec>,
    pub n: usize,
    pub dim_psi: usize,
    /// Overrides the model's default assignment probability ("a/k").
    #[serde(default)]
    pub prop: Option<String>,
    pub estimators: Vec<EstimatorSpec>,
    pub reps: usize,
    pub master_seed: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Estimators for which the HC2 sandwich interval is also tracked.
    #[serde(default)]
    pub ehw: Vec<EstimatorSpec>,
    /// Skip pairing and interval work; record only point estimates and
    /// adjustment coefficients.
    #[serde(default)]
    pub gamma_only: bool,
}

impl SimScenario {
    /// Resolves the model coefficients and assignment probability.
    pub fn resolve_model(&self) -> Result<(ModelSpec, Propensity)> {
        let (spec, default_prop) = match (self.model, &self.custom) {
            (0, Some(custom)) => {
                let prop = self
                    .prop
                    .as_deref()
                    .ok_or_else(|| Error::Invalid("custom models must set prop".into()))?;
                return Ok((*custom, Propensity::parse(prop)?));
            }
            (0, None) => return Err(Error::Invalid("model 0 needs a custom block".into())),
            (id, None) => registry_model(id, self.dim_psi)?,
            (_, Some(_)) => {
                return Err(Error::Invalid("set either a registry model or a custom block, not both".into()))
            }
        };
        let prop = match &self.prop {
            Some(text) => Propensity::parse(text)?,
            None => default_prop,
        };
        Ok((spec, prop))
    }
}

/// One synthetic draw: covariates plus both potential outcomes and their
/// conditional means given (psi, u). Outcomes stay hidden until [`reveal`].
#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub data: ExperimentData,
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
    pub mean0: Vec<f64>,
    pub mean1: Vec<f64>,
}

impl GeneratedData {
    /// Fills in observed outcomes for a treatment vector.
    pub fn reveal(&self, treatment: &[u8]) -> Result<ExperimentData> {
        if treatment.len() != self.data.n {
            return Err(Error::Invalid("treatment length mismatch".into()));
        }
        let y: Vec<f64> = (0..self.data.n)
            .map(|i| if treatment[i] == 1 { self.y1[i] } else { self.y0[i] })
            .collect();
        Ok(ExperimentData { y, d: treatment.to_vec(), ..self.data.clone() })
    }
}

fn rep_rng(master_seed: u64, rep_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(rep_index as u64);
    rng
}

fn draw_standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Inverse-CDF sampling keeps the draw count per unit fixed at one, which
    // pins the stream layout regardless of rejection-sampler internals.
    use statrs::distribution::ContinuousCDF;
    let u: f64 = rng.random::<f64>();
    let u = u.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
    statrs::distribution::Normal::new(0.0, 1.0).expect("unit normal").inverse_cdf(u)
}

fn generate_with(
    rng: &mut ChaCha8Rng,
    model: &ModelSpec,
    n: usize,
    dim_psi: usize,
) -> Result<GeneratedData> {
    let mut psi = DMatrix::zeros(n, dim_psi);
    let mut h = DMatrix::zeros(n, 1);
    let mut y0 = vec![0.0; n];
    let mut y1 = vec![0.0; n];
    let mut mean0 = vec![0.0; n];
    let mut mean1 = vec![0.0; n];
    for i in 0..n {
        let mut s = 0.0;
        let mut t = 0.0;
        for j in 0..dim_psi {
            let v = draw_standard_normal(rng);
            psi[(i, j)] = v;
            s += v;
            t += v * v;
        }
        let u = draw_standard_normal(rng);
        let e0 = draw_standard_normal(rng);
        let e1 = draw_standard_normal(rng);
        let cross = s * s - t;
        h[(i, 0)] = model.quad_h * cross + model.lin_h * s + u;
        mean0[i] = model.quad_outcome * cross + model.lin_outcome.0 * s + model.unobserved.0 * u;
        mean1[i] = model.quad_outcome * cross + model.lin_outcome.1 * s + model.unobserved.1 * u;
        y0[i] = mean0[i] + model.noise_sd * e0;
        y1[i] = mean1[i] + model.noise_sd * e1;
    }
    let z = psi.clone();
    let data = ExperimentData::new(psi, h, z, vec![], vec![])?;
    Ok(GeneratedData { data, y0, y1, mean0, mean1 })
}

/// Draws replication `rep_index` of a scenario: covariates, unobservables,
/// and both potential outcomes. Deterministic in (master_seed, rep_index).
pub fn generate_model(scenario: &SimScenario, rep_index: usize) -> Result<GeneratedData> {
    let (model, _) = scenario.resolve_model()?;
    let mut rng = rep_rng(scenario.master_seed, rep_index);
    generate_with(&mut rng, &model, scenario.n, scenario.dim_psi)
}

/// Everything recorded about one estimator in one replication.
#[derive(Debug, Clone)]
struct RepRecord {
    tau: f64,
    gamma: Vec<f64>,
    ci: Option<(f64, f64)>,
    v_hat: Option<f64>,
    hc2_ci: Option<(f64, f64)>,
    lin_branch: Option<bool>,
}

/// Aggregated metrics for one estimator across replications.
#[derive(Debug, Clone, Serialize)]
pub struct EstimatorMetrics {
    pub estimator: EstimatorSpec,
    pub mean_tau: f64,
    pub bias: f64,
    pub var_tau: f64,
    pub mse: f64,
    /// 100 * MSE / MSE(unadjusted), with a delta-method standard error.
    pub relative_mse: f64,
    pub relative_mse_se: f64,
    pub coverage: Option<f64>,
    pub coverage_se: Option<f64>,
    pub mean_ci_length: Option<f64>,
    /// 100 * (mean length / unadjusted mean length - 1).
    pub ci_length_change_pct: Option<f64>,
    pub ci_length_change_se: Option<f64>,
    /// Mean of the estimated variance of sqrt(n)(tau_hat - tau).
    pub mean_v_hat: Option<f64>,
    pub mean_gamma: Vec<f64>,
    pub hc2_coverage: Option<f64>,
    pub hc2_mean_ci_length: Option<f64>,
    /// Fraction of replications in which `adaptive` kept the lin branch.
    pub adaptive_lin_share: Option<f64>,
}

/// Results of one scenario.
#[derive(Debug, Clone, Serialize)]
pub struct SimResult {
    pub label: String,
    pub n: usize,
    pub dim_psi: usize,
    pub reps: usize,
    pub completed_reps: usize,
    pub failed_reps: usize,
    pub master_seed: u64,
    pub prop: Propensity,
    pub true_ate: f64,
    pub estimators: Vec<EstimatorMetrics>,
}

fn dedup_specs(specs: &[EstimatorSpec]) -> Vec<EstimatorSpec> {
    let mut out: Vec<EstimatorSpec> = Vec::new();
    for &s in specs {
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

fn estimate_one(
    spec: EstimatorSpec,
    data: &ExperimentData,
    design: &Design,
    pairing: Option<&crate::design::GroupPairing>,
) -> Result<AdjustedEstimate> {
    match spec.id {
        EstimatorId::Unadj => adjust::diff_means(data),
        EstimatorId::Naive => adjust::naive(data, spec.with_z),
        EstimatorId::Lin => adjust::lin(data, spec.with_z),
        EstimatorId::Fe => adjust::fixed_effects(data, design, spec.with_z),
        EstimatorId::Plin => adjust::partialled_lin(data, design, spec.with_z),
        EstimatorId::Go => adjust::group_ols(data, design, spec.with_z),
        EstimatorId::Tom => adjust::tom(data, design, spec.with_z),
        EstimatorId::Adaptive => {
            let lin_z = adjust::lin(data, true)?;
            let plin_z = adjust::partialled_lin(data, design, true)?;
            match pairing {
                Some(p) => adjust::adaptive_from_candidates(data, design, p, lin_z, plin_z),
                None => adjust::adaptive(data, design),
            }
        }
        EstimatorId::AipwVarying => {
            let (g0, g1) = adjust::aipw_gamma_hat(data, design)?;
            adjust::aipw_varying(data, design, &g0, &g1)
        }
    }
}

fn run_rep(
    scenario: &SimScenario,
    model: &ModelSpec,
    prop: Propensity,
    specs: &[EstimatorSpec],
    rep: usize,
) -> Result<Vec<RepRecord>> {
    let mut rng = rep_rng(scenario.master_seed, rep);
    let gen = generate_with(&mut rng, model, scenario.n, scenario.dim_psi)?;
    let design_seed: u64 = rng.random();
    let design = assign_matched_tuples(&gen.data.psi, prop, design_seed)?;
    let revealed = gen.reveal(&design.treatment)?;
    let (data, design) = design.restricted(&revealed)?;
    let pairing = if scenario.gamma_only {
        None
    } else {
        Some(pair_groups(&design, &data.psi)?)
    };
    let mut records = Vec::with_capacity(specs.len());
    for &spec in specs {
        let est = estimate_one(spec, &data, &design, pairing.as_ref())?;
        let (ci, v_hat) = match &pairing {
            Some(pairing) => {
                let report = inference::exact_variance(&est, &data, &design, pairing, scenario.alpha)?;
                (Some((report.ci_low, report.ci_high)), Some(report.v_hat))
            }
            None => (None, None),
        };
        let hc2_ci = if scenario.ehw.contains(&spec) {
            let report = inference::ehw_hc2_variance(&est, &data, Some(&design), scenario.alpha)?;
            Some((report.ci_low, report.ci_high))
        } else {
            None
        };
        records.push(RepRecord {
            tau: est.tau_hat,
            gamma: est.gamma_hat.clone(),
            ci,
            v_hat,
            hc2_ci,
            lin_branch: est.chosen_branch.map(|b| b == EstimatorId::Lin),
        });
    }
    Ok(records)
}

fn aggregate(
    specs: &[EstimatorSpec],
    outcomes: Vec<Result<Vec<RepRecord>>>,
    true_ate: f64,
) -> Result<(Vec<EstimatorMetrics>, usize, usize)> {
    let reps = outcomes.len();
    let good: Vec<Vec<RepRecord>> = outcomes.into_iter().filter_map(|r| r.ok()).collect();
    let failed = reps - good.len();
    if failed * 100 > reps {
        return Err(Error::FailureBudget { failed, reps });
    }
    if good.is_empty() {
        return Err(Error::FailureBudget { failed, reps });
    }
    let s = good.len() as f64;
    let unadj_pos = specs
        .iter()
        .position(|sp| sp.id == EstimatorId::Unadj)
        .expect("unadjusted baseline is always included");
    let sq_err = |records: &Vec<RepRecord>, pos: usize| {
        let e = records[pos].tau - true_ate;
        e * e
    };
    let mse_u: f64 = good.iter().map(|r| sq_err(r, unadj_pos)).sum::<f64>() / s;
    let len_u: Option<f64> = if good[0][unadj_pos].ci.is_some() {
        Some(
            good.iter()
                .map(|r| {
                    let (lo, hi) = r[unadj_pos].ci.unwrap();
                    hi - lo
                })
                .sum::<f64>()
                / s,
        )
    } else {
        None
    };

    let mut metrics = Vec::with_capacity(specs.len());
    for (pos, &spec) in specs.iter().enumerate() {
        let taus: Vec<f64> = good.iter().map(|r| r[pos].tau).collect();
        let mean_tau = linalg::mean(&taus);
        let var_tau = linalg::var_n(&taus);
        let errs: Vec<f64> = good.iter().map(|r| sq_err(r, pos)).collect();
        let mse = linalg::mean(&errs);
        let ratio = mse / mse_u;
        let errs_u: Vec<f64> = good.iter().map(|r| sq_err(r, unadj_pos)).collect();
        let centered: Vec<f64> = errs
            .iter()
            .zip(&errs_u)
            .map(|(ek, eu)| ek - ratio * eu)
            .collect();
        let relative_mse_se = 100.0 * (linalg::var_n(&centered) / s).sqrt() / mse_u;

        let has_ci = good[0][pos].ci.is_some();
        let (coverage, coverage_se, mean_len, len_pct, len_pct_se, mean_v_hat) = if has_ci {
            let covered = good
                .iter()
                .filter(|r| {
                    let (lo, hi) = r[pos].ci.unwrap();
                    lo <= true_ate && true_ate <= hi
                })
                .count() as f64
                / s;
            let lens: Vec<f64> = good
                .iter()
                .map(|r| {
                    let (lo, hi) = r[pos].ci.unwrap();
                    hi - lo
                })
                .collect();
            let mean_len = linalg::mean(&lens);
            let (pct, pct_se) = match len_u {
                Some(lu) if lu > 0.0 => {
                    let g = mean_len / lu;
                    let lens_u: Vec<f64> = good
                        .iter()
                        .map(|r| {
                            let (lo, hi) = r[unadj_pos].ci.unwrap();
                            hi - lo
                        })
                        .collect();
                    let centered: Vec<f64> =
                        lens.iter().zip(&lens_u).map(|(lk, lu_i)| lk - g * lu_i).collect();
                    (
                        Some(100.0 * (g - 1.0)),
                        Some(100.0 * (linalg::var_n(&centered) / s).sqrt() / lu),
                    )
                }
                _ => (None, None),
            };
            let vh = good
                .iter()
                .map(|r| r[pos].v_hat.unwrap_or(f64::NAN))
                .sum::<f64>()
                / s;
            (
                Some(covered),
                Some((covered * (1.0 - covered) / s).sqrt()),
                Some(mean_len),
                pct,
                pct_se,
                Some(vh),
            )
        } else {
            (None, None, None, None, None, None)
        };

        let dim_gamma = good[0][pos].gamma.len();
        let mut mean_gamma = vec![0.0; dim_gamma];
        for r in &good {
            for (j, g) in r[pos].gamma.iter().enumerate() {
                mean_gamma[j] += g / s;
            }
        }

        let hc2_records: Vec<(f64, f64)> = good.iter().filter_map(|r| r[pos].hc2_ci).collect();
        let (hc2_coverage, hc2_len) = if hc2_records.is_empty() {
            (None, None)
        } else {
            let covered = hc2_records
                .iter()
                .filter(|(lo, hi)| *lo <= true_ate && true_ate <= *hi)
                .count() as f64
                / hc2_records.len() as f64;
            let mean_len = hc2_records.iter().map(|(lo, hi)| hi - lo).sum::<f64>()
                / hc2_records.len() as f64;
            (Some(covered), Some(mean_len))
        };

        let branches: Vec<bool> = good.iter().filter_map(|r| r[pos].lin_branch).collect();
        let adaptive_lin_share = if branches.is_empty() {
            None
        } else {
            Some(branches.iter().filter(|&&b| b).count() as f64 / branches.len() as f64)
        };

        metrics.push(EstimatorMetrics {
            estimator: spec,
            mean_tau,
            bias: mean_tau - true_ate,
            var_tau,
            mse,
            relative_mse: 100.0 * ratio,
            relative_mse_se,
            coverage,
            coverage_se,
            mean_ci_length: mean_len,
            ci_length_change_pct: len_pct,
            ci_length_change_se: len_pct_se,
            mean_v_hat,
            mean_gamma,
            hc2_coverage,
            hc2_mean_ci_length: hc2_len,
            adaptive_lin_share,
        });
    }
    Ok((metrics, good.len(), failed))
}

/// Runs a scenario: for each replication, draw data, randomize under the
/// matched-tuples design, estimate, and build intervals; then aggregate.
/// The unadjusted estimator is always included as the baseline. Errors with
/// [`Error::FailureBudget`] when more than 1% of replications fail.
pub fn run_scenario(scenario: &SimScenario) -> Result<SimResult> {
    let (model, prop) = scenario.resolve_model()?;
    if scenario.reps == 0 {
        return Err(Error::Invalid("reps must be positive".into()));
    }
    if scenario.n < 2 * prop.k as usize {
        return Err(Error::Invalid("n must cover at least two groups".into()));
    }
    let mut specs = dedup_specs(&scenario.estimators);
    if !specs.iter().any(|s| s.id == EstimatorId::Unadj) {
        specs.insert(0, EstimatorSpec::new(EstimatorId::Unadj, false));
    }
    let outcomes: Vec<Result<Vec<RepRecord>>> = (0..scenario.reps)
        .into_par_iter()
        .map(|rep| run_rep(scenario, &model, prop, &specs, rep))
        .collect();
    let (estimators, completed, failed) = aggregate(&specs, outcomes, model.true_ate())?;
    Ok(SimResult {
        label: if scenario.label.is_empty() {
            format!("model{}-n{}-m{}", scenario.model, scenario.n, scenario.dim_psi)
        } else {
            scenario.label.clone()
        },
        n: scenario.n,
        dim_psi: scenario.dim_psi,
        reps: scenario.reps,
        completed_reps: completed,
        failed_reps: failed,
        master_seed: scenario.master_seed,
        prop,
        true_ate: model.true_ate(),
        estimators,
    })
}

/// Mean regret in relative-MSE points: for each scenario the gap between an
/// estimator's relative MSE and the best relative MSE among the estimators
/// shared by all scenarios, averaged over scenarios.
pub fn compute_excess_risk(results: &[SimResult]) -> Result<Vec<(EstimatorSpec, f64)>> {
    if results.is_empty() {
        return Err(Error::EmptyInput);
    }
    let common: Vec<EstimatorSpec> = results[0]
        .estimators
        .iter()
        .map(|m| m.estimator)
        .filter(|spec| {
            results
                .iter()
                .all(|r| r.estimators.iter().any(|m| m.estimator == *spec))
        })
        .collect();
    if common.is_empty() {
        return Err(Error::Invalid("no estimator is shared by all scenarios".into()));
    }
    let mut risk = vec![0.0; common.len()];
    for result in results {
        let rel = |spec: EstimatorSpec| -> f64 {
            result
                .estimators
                .iter()
                .find(|m| m.estimator == spec)
                .map(|m| m.relative_mse)
                .expect("spec is common")
        };
        let best = common.iter().map(|&s| rel(s)).fold(f64::INFINITY, f64::min);
        for (slot, &spec) in common.iter().enumerate() {
            risk[slot] += (rel(spec) - best) / results.len() as f64;
        }
    }
    Ok(common.into_iter().zip(risk).collect())
}

/// Counterfactual design for [`impute_replay`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplayDesign {
    Matched(Propensity),
    Complete(Propensity),
}

impl ReplayDesign {
    /// Parses "matched:a/k" or "complete:a/k".
    pub fn parse(text: &str) -> Result<Self> {
        let (kind, prop) = text
            .split_once(':')
            .ok_or_else(|| Error::Invalid(format!("expected kind:a/k, got {text:?}")))?;
        let prop = Propensity::parse(prop)?;
        match kind.trim() {
            "matched" => Ok(ReplayDesign::Matched(prop)),
            "complete" => Ok(ReplayDesign::Complete(prop)),
            other => Err(Error::Invalid(format!("unknown replay design {other:?}"))),
        }
    }

    pub fn prop(&self) -> Propensity {
        match self {
            ReplayDesign::Matched(p) | ReplayDesign::Complete(p) => *p,
        }
    }
}

/// Imputes both potential outcomes for every unit by nearest-neighbor
/// matching on the stacked covariates (psi, h, z): a unit keeps its observed
/// outcome in its own arm and copies the outcome of its nearest other-arm
/// neighbor (Euclidean distance, ties to the lowest index) for the missing
/// arm. Returns (y0_hat, y1_hat).
pub fn impute_potential_outcomes(raw: &ExperimentData) -> Result<(Vec<f64>, Vec<f64>)> {
    adjust::require_outcomes(raw)?;
    let x = {
        let cols = raw.psi.ncols() + raw.h.ncols() + raw.z.ncols();
        if cols == 0 {
            return Err(Error::Invalid("replay needs covariates to match on".into()));
        }
        let mut x = DMatrix::zeros(raw.n, cols);
        x.view_mut((0, 0), (raw.n, raw.psi.ncols())).copy_from(&raw.psi);
        x.view_mut((0, raw.psi.ncols()), (raw.n, raw.h.ncols())).copy_from(&raw.h);
        x.view_mut((0, raw.psi.ncols() + raw.h.ncols()), (raw.n, raw.z.ncols()))
            .copy_from(&raw.z);
        x
    };
    let dist = |i: usize, j: usize| -> f64 {
        let mut acc = 0.0;
        for c in 0..x.ncols() {
            let diff = x[(i, c)] - x[(j, c)];
            acc += diff * diff;
        }
        acc
    };
    let nearest_in_arm = |i: usize, arm: u8| -> usize {
        let mut best = (f64::INFINITY, usize::MAX);
        for j in 0..raw.n {
            if raw.d[j] == arm && j != i {
                let dij = dist(i, j);
                if dij < best.0 {
                    best = (dij, j);
                }
            }
        }
        best.1
    };
    let mut y0 = vec![0.0; raw.n];
    let mut y1 = vec![0.0; raw.n];
    for i in 0..raw.n {
        if raw.d[i] == 1 {
            y1[i] = raw.y[i];
            y0[i] = raw.y[nearest_in_arm(i, 0)];
        } else {
            y0[i] = raw.y[i];
            y1[i] = raw.y[nearest_in_arm(i, 1)];
        }
    }
    Ok((y0, y1))
}

/// Replays a counterfactual design over a completed experiment: potential
/// outcomes are imputed by nearest-neighbor matching, then the chosen design
/// is redrawn `reps` times over the imputed table and the estimators are
/// compared exactly as in [`run_scenario`], with the imputed average effect
/// as the target.
pub fn impute_replay(
    raw: &ExperimentData,
    design_spec: ReplayDesign,
    estimators: &[EstimatorSpec],
    reps: usize,
    master_seed: u64,
    alpha: f64,
) -> Result<SimResult> {
    if reps == 0 {
        return Err(Error::Invalid("reps must be positive".into()));
    }
    let (y0, y1) = impute_potential_outcomes(raw)?;
    let truth = (0..raw.n).map(|i| y1[i] - y0[i]).sum::<f64>() / raw.n as f64;
    // The estimation table matches (and stratifies) on everything available.
    let cols = raw.psi.ncols() + raw.h.ncols() + raw.z.ncols();
    let mut x = DMatrix::zeros(raw.n, cols);
    x.view_mut((0, 0), (raw.n, raw.psi.ncols())).copy_from(&raw.psi);
    x.view_mut((0, raw.psi.ncols()), (raw.n, raw.h.ncols())).copy_from(&raw.h);
    x.view_mut((0, raw.psi.ncols() + raw.h.ncols()), (raw.n, raw.z.ncols())).copy_from(&raw.z);
    let base = ExperimentData::new(x, raw.h.clone(), raw.z.clone(), vec![], vec![])?;
    let gen = GeneratedData {
        data: base,
        y0,
        y1,
        mean0: vec![],
        mean1: vec![],
    };
    let mut specs = dedup_specs(estimators);
    if !specs.iter().any(|s| s.id == EstimatorId::Unadj) {
        specs.insert(0, EstimatorSpec::new(EstimatorId::Unadj, false));
    }
    let prop = design_spec.prop();
    let outcomes: Vec<Result<Vec<RepRecord>>> = (0..reps)
        .into_par_iter()
        .map(|rep| -> Result<Vec<RepRecord>> {
            let mut rng = rep_rng(master_seed, rep);
            let design_seed: u64 = rng.random();
            let design = match design_spec {
                ReplayDesign::Matched(p) => assign_matched_tuples(&gen.data.psi, p, design_seed)?,
                ReplayDesign::Complete(p) => assign_complete(gen.data.n, p, design_seed)?,
            };
            let revealed = gen.reveal(&design.treatment)?;
            let (data, design) = design.restricted(&revealed)?;
            let pairing = pair_groups(&design, &data.psi)?;
            let mut records = Vec::with_capacity(specs.len());
            for &spec in &specs {
                let est = estimate_one(spec, &data, &design, Some(&pairing))?;
                let report = inference::exact_variance(&est, &data, &design, &pairing, alpha)?;
                records.push(RepRecord {
                    tau: est.tau_hat,
                    gamma: est.gamma_hat.clone(),
                    ci: Some((report.ci_low, report.ci_high)),
                    v_hat: Some(report.v_hat),
                    hc2_ci: None,
                    lin_branch: est.chosen_branch.map(|b| b == EstimatorId::Lin),
                });
            }
            Ok(records)
        })
        .collect();
    let (metrics, completed, failed) = aggregate(&specs, outcomes, truth)?;
    Ok(SimResult {
        label: "replay".into(),
        n: raw.n,
        dim_psi: raw.psi.ncols(),
        reps,
        completed_reps: completed,
        failed_reps: failed,
        master_seed,
        prop,
        true_ate: truth,
        estimators: metrics,
    })
}

/// Oracle benchmark: the augmented inverse-propensity estimator evaluated
/// with the true conditional means of a [`GeneratedData`] draw, under iid
/// Bernoulli(p) treatment. No estimator that must learn the adjustment can
/// beat its asymptotic variance; simulations compare against it.
pub fn oracle_semiparam(gen: &GeneratedData, prop: Propensity, seed: u64) -> Result<f64> {
    let n = gen.data.n;
    if gen.mean0.len() != n || gen.mean1.len() != n {
        return Err(Error::Invalid("oracle needs the true conditional means".into()));
    }
    let p = prop.p();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for i in 0..n {
        let d = rng.random_bool(p);
        total += gen.mean1[i] - gen.mean0[i];
        if d {
            total += (gen.y1[i] - gen.mean1[i]) / p;
        } else {
            total -= (gen.y0[i] - gen.mean0[i]) / (1.0 - p);
        }
    }
    Ok(total / n as f64)
}
