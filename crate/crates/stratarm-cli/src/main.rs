//! Command line surface for the stratified-experiment toolkit.
//!
//! Four subcommands cover the pipeline end to end: `design` draws a
//! randomization from a covariate table, `estimate` computes adjusted
//! treatment effects with exact intervals from a completed experiment,
//! `simulate` runs synthetic scenario grids from a TOML config, and
//! `replay` re-randomizes a finished experiment over imputed potential
//! outcomes to compare designs after the fact.
//!
//! Every output file embeds the tool version, the seed, and the literal
//! invocation, so results can be regenerated from the file alone. Exit
//! codes: 2 for usage and parse problems, 3 when a stratum is too small
//! for its group size, 4 when a simulation exceeds its failure budget,
//! 1 for anything else.

use std::fmt;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use stratarm::adjust::{self, AdjustedEstimate, EstimatorId};
use stratarm::data::{load_csv, load_csv_column, CsvSchema, ExperimentData, Propensity};
use stratarm::design::{
    assign_coarse, assign_matched_tuples, design_from_labels, pair_groups, Design,
};
use stratarm::error::Error;
use stratarm::inference::{self, VarianceReport};
use stratarm::montecarlo::{
    impute_replay, run_scenario, EstimatorSpec, ReplayDesign, SimResult, SimScenario,
};

#[derive(Parser)]
#[command(name = "stratarm", version, about = "Stratified randomization and adjusted treatment effect estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a randomization design from a covariate CSV (psi_* columns).
    Design(DesignArgs),
    /// Estimate treatment effects from a completed experiment CSV.
    Estimate(EstimateArgs),
    /// Run simulation scenarios from a TOML config.
    Simulate(SimulateArgs),
    /// Replay a counterfactual design over a completed experiment.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct DesignArgs {
    /// Covariate CSV; units are matched on the psi_* columns.
    #[arg(long = "in", value_name = "PATH")]
    input: PathBuf,
    /// Where to write the design JSON (stdout when omitted).
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Assignment probability as a reduced fraction a/k.
    #[arg(long, value_name = "A/K")]
    prop: String,
    /// Randomization seed (default 0; STRATARM_SEED overrides the default).
    #[arg(long)]
    seed: Option<u64>,
    /// Stratify on this label column instead of matching on psi_*.
    #[arg(long, value_name = "NAME")]
    coarse_col: Option<String>,
}

#[derive(Args)]
struct EstimateArgs {
    /// Experiment CSV with y, d, psi_*, h_* (z_* optional).
    #[arg(long = "in", value_name = "PATH")]
    input: PathBuf,
    /// Design JSON produced by the design subcommand.
    #[arg(long, value_name = "PATH")]
    design: Option<PathBuf>,
    /// Column holding group labels, as an alternative to --design.
    #[arg(long, value_name = "NAME")]
    groups_col: Option<String>,
    /// Comma-separated estimators: unadj, naive, lin, fe, plin, go, tom,
    /// adaptive, aipw_varying; append +z for the z-augmented variant.
    #[arg(long, value_delimiter = ',', required = true, value_name = "LIST")]
    est: Vec<String>,
    /// Include the auxiliary z_* covariates in every estimator that takes them.
    #[arg(long)]
    with_z: bool,
    /// Two-sided miscoverage level of the intervals.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Also report the HC2 sandwich interval where a defining regression exists.
    #[arg(long)]
    ehw: bool,
    /// Treat d as a randomized encouragement and report Wald ratios.
    #[arg(long)]
    late: bool,
    /// Column with realized treatment uptake (required with --late).
    #[arg(long, value_name = "NAME")]
    uptake_col: Option<String>,
    /// Seed echoed into the output (estimation itself is deterministic).
    #[arg(long)]
    seed: Option<u64>,
    /// Where to write results JSON (table always goes to stdout).
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario config: one or more [[scenario]] tables.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Results file; .csv for a flat table, anything else for JSON.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Override the replication count of every scenario.
    #[arg(long)]
    reps: Option<usize>,
    /// Override the master seed of every scenario.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for the replication loop (0 = all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct ReplayArgs {
    /// Completed experiment CSV with y, d, and covariates.
    #[arg(long = "in", value_name = "PATH")]
    input: PathBuf,
    /// Counterfactual design: matched:a/k or complete:a/k.
    #[arg(long, value_name = "KIND:A/K")]
    design: String,
    /// Comma-separated estimators to compare (unadjusted is always included).
    #[arg(long, value_delimiter = ',', default_values_t = ["naive".to_string(), "lin".to_string(), "plin".to_string()], value_name = "LIST")]
    est: Vec<String>,
    /// Include the auxiliary z_* covariates in every estimator that takes them.
    #[arg(long)]
    with_z: bool,
    /// Number of re-randomizations.
    #[arg(long, default_value_t = 200)]
    reps: usize,
    /// Master seed (default 0; STRATARM_SEED overrides the default).
    #[arg(long)]
    seed: Option<u64>,
    /// Two-sided miscoverage level of the intervals.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Worker threads for the replication loop (0 = all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Results file; .csv for a flat table, anything else for JSON.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

enum CliError {
    Usage(String),
    Lib(Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => f.write_str(msg),
            CliError::Lib(err) => write!(f, "{err}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(err: Error) -> Self {
        CliError::Lib(err)
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError::Lib(Error::Io(err))
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Lib(err) => match err {
                Error::StratumTooSmall(_) => 3,
                Error::FailureBudget { .. } => 4,
                Error::MissingColumn(_)
                | Error::NonNumericCell { .. }
                | Error::NonBinaryTreatment(_)
                | Error::InvalidPropensity(_)
                | Error::UnknownModel(_)
                | Error::EmptyInput
                | Error::Invalid(_)
                | Error::Csv(_) => 2,
                _ => 1,
            },
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Design(args) => cmd_design(args),
        Command::Estimate(args) => cmd_estimate(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Replay(args) => cmd_replay(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.code())
        }
    }
}

/// Explicit --seed wins; otherwise STRATARM_SEED replaces the default of 0.
fn resolve_seed(flag: Option<u64>) -> CliResult<u64> {
    if let Some(seed) = flag {
        return Ok(seed);
    }
    match std::env::var("STRATARM_SEED") {
        Ok(text) => text
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("STRATARM_SEED must be an unsigned integer, got {text:?}"))),
        Err(_) => Ok(0),
    }
}

fn invocation() -> String {
    std::env::args().collect::<Vec<_>>().join(" ")
}

/// Content hash of the group structure (memberships and assignment shares),
/// echoed by both design and estimate so round trips can be checked.
fn groups_hash(design: &Design) -> String {
    let mut hasher = std::collections::hash_map::DefaultHasher::new();
    for group in &design.groups {
        group.units.hash(&mut hasher);
        group.prop.hash(&mut hasher);
    }
    format!("{:016x}", hasher.finish())
}

fn parse_specs(est: &[String], with_z: bool) -> CliResult<Vec<EstimatorSpec>> {
    let mut specs = Vec::new();
    for text in est {
        let mut spec: EstimatorSpec = text
            .parse()
            .map_err(|err| CliError::Usage(format!("--est: {err}")))?;
        if with_z && !matches!(spec.id, EstimatorId::Unadj | EstimatorId::AipwVarying) {
            spec.with_z = true;
        }
        if !specs.contains(&spec) {
            specs.push(spec);
        }
    }
    if specs.is_empty() {
        return Err(CliError::Usage("--est must name at least one estimator".into()));
    }
    Ok(specs)
}

fn configure_jobs(jobs: Option<usize>) -> CliResult<()> {
    if let Some(threads) = jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|err| CliError::Usage(format!("--jobs: {err}")))?;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct DesignFile {
    #[serde(default)]
    version: String,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    invocation: String,
    #[serde(default)]
    groups_hash: String,
    design: Design,
}

fn cmd_design(args: DesignArgs) -> CliResult<()> {
    let seed = resolve_seed(args.seed)?;
    let prop = Propensity::parse(&args.prop)?;
    let design = match &args.coarse_col {
        Some(column) => {
            let labels = load_csv_column(&args.input, column)?;
            assign_coarse(&labels, prop, seed)?
        }
        None => {
            let data = load_csv(&args.input, &CsvSchema::covariates_only())?;
            if data.psi.ncols() == 0 {
                return Err(CliError::Usage(
                    "no psi_* columns to match on; pass --coarse-col to stratify on a label".into(),
                ));
            }
            assign_matched_tuples(&data.psi, prop, seed)?
        }
    };
    let hash = groups_hash(&design);
    let summary = format!(
        "groups: {}  units: {}  homogeneity_score: {:.6}  groups_hash: {}",
        design.groups.len(),
        design.n(),
        design.homogeneity_score,
        hash,
    );
    if !design.excluded.is_empty() {
        eprintln!(
            "note: {} unit(s) left outside the design by the divisibility rule",
            design.excluded.len()
        );
    }
    let file = DesignFile {
        version: env!("CARGO_PKG_VERSION").into(),
        seed,
        invocation: invocation(),
        groups_hash: hash,
        design,
    };
    let json = serde_json::to_string_pretty(&file).map_err(|err| CliError::Usage(err.to_string()))?;
    match &args.out {
        Some(path) => {
            std::fs::write(path, json + "\n")?;
            println!("{summary}");
            println!("wrote {}", path.display());
        }
        None => {
            println!("{json}");
            eprintln!("{summary}");
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct EstimateRow {
    estimator: String,
    estimate: AdjustedEstimate,
    #[serde(skip_serializing_if = "Option::is_none")]
    exact: Option<VarianceReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    hc2: Option<VarianceReport>,
}

#[derive(Serialize)]
struct EstimateFile {
    version: String,
    seed: u64,
    invocation: String,
    groups_hash: String,
    alpha: f64,
    n: usize,
    rows: Vec<EstimateRow>,
}

fn load_design_for(args: &EstimateArgs, data: &ExperimentData) -> CliResult<(Design, String)> {
    match (&args.design, &args.groups_col) {
        (Some(path), None) => {
            let text = std::fs::read_to_string(path)?;
            let file: DesignFile = serde_json::from_str(&text)
                .map_err(|err| CliError::Usage(format!("{}: {err}", path.display())))?;
            let hash = groups_hash(&file.design);
            Ok((file.design, hash))
        }
        (None, Some(column)) => {
            let labels = load_csv_column(&args.input, column)?;
            let design = design_from_labels(&labels, &data.d, &data.psi)?;
            let hash = groups_hash(&design);
            Ok((design, hash))
        }
        (None, None) => Err(CliError::Usage(
            "estimation needs the group structure: pass --design or --groups-col".into(),
        )),
        (Some(_), Some(_)) => Err(CliError::Usage(
            "--design and --groups-col are mutually exclusive".into(),
        )),
    }
}

fn estimate_one(
    spec: EstimatorSpec,
    data: &ExperimentData,
    design: &Design,
) -> Result<AdjustedEstimate, Error> {
    match spec.id {
        EstimatorId::Unadj => adjust::diff_means(data),
        EstimatorId::Naive => adjust::naive(data, spec.with_z),
        EstimatorId::Lin => adjust::lin(data, spec.with_z),
        EstimatorId::Fe => adjust::fixed_effects(data, design, spec.with_z),
        EstimatorId::Plin => adjust::partialled_lin(data, design, spec.with_z),
        EstimatorId::Go => adjust::group_ols(data, design, spec.with_z),
        EstimatorId::Tom => adjust::tom(data, design, spec.with_z),
        EstimatorId::Adaptive => adjust::adaptive(data, design),
        EstimatorId::AipwVarying => {
            let (g0, g1) = adjust::aipw_gamma_hat(data, design)?;
            adjust::aipw_varying(data, design, &g0, &g1)
        }
    }
}

fn row_label(spec: EstimatorSpec, est: &AdjustedEstimate, late: bool) -> String {
    if late {
        return format!("wald:{spec}");
    }
    match est.chosen_branch {
        Some(branch) => format!("{spec}->{branch}"),
        None => spec.to_string(),
    }
}

fn cmd_estimate(args: EstimateArgs) -> CliResult<()> {
    let seed = resolve_seed(args.seed)?;
    if args.late && args.uptake_col.is_none() {
        return Err(CliError::Usage("--late needs --uptake-col".into()));
    }
    if !args.late && args.uptake_col.is_some() {
        return Err(CliError::Usage("--uptake-col only makes sense with --late".into()));
    }
    let data = load_csv(&args.input, &CsvSchema::default())?;
    let (design, hash) = load_design_for(&args, &data)?;
    let covered = design.covered_units();
    let (data, design) = design.restricted(&data)?;
    let uptake: Option<Vec<u8>> = match &args.uptake_col {
        Some(column) => {
            let raw = load_csv_column(&args.input, column)?;
            let mut parsed = Vec::with_capacity(raw.len());
            for (i, cell) in raw.iter().enumerate() {
                match cell.trim() {
                    "0" => parsed.push(0u8),
                    "1" => parsed.push(1u8),
                    other => {
                        return Err(CliError::Usage(format!(
                            "--uptake-col {column}: row {} holds {other:?}, expected 0 or 1",
                            i + 1
                        )))
                    }
                }
            }
            Some(covered.iter().map(|&i| parsed[i]).collect())
        }
        None => None,
    };
    let specs = parse_specs(&args.est, args.with_z)?;
    if args.late {
        for spec in &specs {
            if !matches!(spec.id, EstimatorId::Plin | EstimatorId::Go | EstimatorId::Tom) {
                return Err(CliError::Usage(format!(
                    "--late backbones are plin, go, and tom; {spec} does not form a Wald ratio"
                )));
            }
        }
        if args.ehw {
            eprintln!("note: --ehw ignored for Wald ratios (no defining regression)");
        }
    }
    let constant_prop = design.constant_propensity();
    let pairing = if constant_prop.is_some() {
        Some(pair_groups(&design, &data.psi)?)
    } else {
        eprintln!("note: varying-propensity design; exact intervals are unavailable");
        None
    };

    let mut rows = Vec::with_capacity(specs.len());
    println!(
        "{:<16} {:>12}  {:^27}  {:>10}",
        "estimator",
        "tau",
        format!("{:.0}% interval", 100.0 * (1.0 - args.alpha)),
        "se"
    );
    for &spec in &specs {
        let est = match (args.late, &uptake) {
            (true, Some(uptake)) => {
                adjust::wald_late(&data, uptake, &design, spec.id, spec.with_z)?
            }
            _ => estimate_one(spec, &data, &design)?,
        };
        if !est.dropped_z.is_empty() {
            eprintln!(
                "warning: {spec} dropped z column(s) {:?} (constant within every group)",
                est.dropped_z
            );
        }
        let exact = match &pairing {
            Some(pairing) if args.late => {
                Some(inference::late_variance(&est, &data, &design, pairing, args.alpha)?)
            }
            Some(pairing) => {
                Some(inference::exact_variance(&est, &data, &design, pairing, args.alpha)?)
            }
            None => None,
        };
        let hc2 = if args.ehw && !args.late {
            match inference::ehw_hc2_variance(&est, &data, Some(&design), args.alpha) {
                Ok(report) => Some(report),
                Err(Error::NotRegressionBased(_)) => None,
                Err(err) => return Err(err.into()),
            }
        } else {
            None
        };
        let label = row_label(spec, &est, args.late);
        match &exact {
            Some(report) => println!(
                "{:<16} {:>12.6}  [{:>11.6}, {:>11.6}]  ({:.6})",
                label, est.tau_hat, report.ci_low, report.ci_high, report.se
            ),
            None => println!("{:<16} {:>12.6}  {:^27}  {:>10}", label, est.tau_hat, "-", "-"),
        }
        if !est.gamma_hat.is_empty() {
            let joined = est
                .gamma_hat
                .iter()
                .map(|g| format!("{g:.6}"))
                .collect::<Vec<_>>()
                .join(", ");
            println!("{:<16} gamma: [{joined}]", "");
        }
        if let Some(report) = &hc2 {
            println!(
                "{:<16} hc2:   [{:>11.6}, {:>11.6}]  ({:.6})",
                "", report.ci_low, report.ci_high, report.se
            );
        }
        rows.push(EstimateRow { estimator: label, estimate: est, exact, hc2 });
    }
    if let Some(path) = &args.out {
        let file = EstimateFile {
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            invocation: invocation(),
            groups_hash: hash,
            alpha: args.alpha,
            n: data.n,
            rows,
        };
        let json =
            serde_json::to_string_pretty(&file).map_err(|err| CliError::Usage(err.to_string()))?;
        std::fs::write(path, json + "\n")?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SimConfig {
    #[serde(default)]
    scenario: Vec<SimScenario>,
}

#[derive(Serialize)]
struct ResultsFile {
    version: String,
    seed: u64,
    invocation: String,
    results: Vec<SimResult>,
}

/// Flat per-estimator row for the CSV form of simulation results.
#[derive(Serialize)]
struct MetricsRow {
    label: String,
    n: usize,
    dim_psi: usize,
    reps: usize,
    completed_reps: usize,
    failed_reps: usize,
    master_seed: u64,
    prop: String,
    true_ate: f64,
    estimator: String,
    mean_tau: f64,
    bias: f64,
    var_tau: f64,
    mse: f64,
    relative_mse: f64,
    relative_mse_se: f64,
    coverage: Option<f64>,
    coverage_se: Option<f64>,
    mean_ci_length: Option<f64>,
    ci_length_change_pct: Option<f64>,
    ci_length_change_se: Option<f64>,
    mean_v_hat: Option<f64>,
    hc2_coverage: Option<f64>,
    hc2_mean_ci_length: Option<f64>,
    adaptive_lin_share: Option<f64>,
    mean_gamma: String,
}

fn metrics_rows(result: &SimResult) -> Vec<MetricsRow> {
    result
        .estimators
        .iter()
        .map(|m| MetricsRow {
            label: result.label.clone(),
            n: result.n,
            dim_psi: result.dim_psi,
            reps: result.reps,
            completed_reps: result.completed_reps,
            failed_reps: result.failed_reps,
            master_seed: result.master_seed,
            prop: result.prop.to_string(),
            true_ate: result.true_ate,
            estimator: m.estimator.to_string(),
            mean_tau: m.mean_tau,
            bias: m.bias,
            var_tau: m.var_tau,
            mse: m.mse,
            relative_mse: m.relative_mse,
            relative_mse_se: m.relative_mse_se,
            coverage: m.coverage,
            coverage_se: m.coverage_se,
            mean_ci_length: m.mean_ci_length,
            ci_length_change_pct: m.ci_length_change_pct,
            ci_length_change_se: m.ci_length_change_se,
            mean_v_hat: m.mean_v_hat,
            hc2_coverage: m.hc2_coverage,
            hc2_mean_ci_length: m.hc2_mean_ci_length,
            adaptive_lin_share: m.adaptive_lin_share,
            mean_gamma: m
                .mean_gamma
                .iter()
                .map(|g| format!("{g:.6}"))
                .collect::<Vec<_>>()
                .join(";"),
        })
        .collect()
}

fn print_result(result: &SimResult) {
    println!(
        "== {} (n={}, dim_psi={}, p={}, reps={}, completed={}, failed={}, seed={})",
        if result.label.is_empty() { "scenario" } else { &result.label },
        result.n,
        result.dim_psi,
        result.prop,
        result.reps,
        result.completed_reps,
        result.failed_reps,
        result.master_seed,
    );
    let opt = |v: Option<f64>, width: usize, prec: usize| match v {
        Some(x) => format!("{x:>width$.prec$}"),
        None => format!("{:>width$}", "-"),
    };
    println!(
        "{:<14} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}",
        "estimator", "rel_mse", "bias", "coverage", "mean_len", "dlen_pct", "lin_share"
    );
    for m in &result.estimators {
        println!(
            "{:<14} {:>9.1} {:>9.4} {} {} {} {}",
            m.estimator.to_string(),
            m.relative_mse,
            m.bias,
            opt(m.coverage, 9, 3),
            opt(m.mean_ci_length, 9, 4),
            opt(m.ci_length_change_pct, 9, 1),
            opt(m.adaptive_lin_share, 9, 2),
        );
    }
}

fn write_results(results: &[SimResult], out: &Path, seed: u64) -> CliResult<()> {
    let is_csv = out.extension().map(|e| e.eq_ignore_ascii_case("csv")).unwrap_or(false);
    if is_csv {
        let mut buf = Vec::new();
        let header = format!(
            "# stratarm {} seed={} invocation={:?}\n",
            env!("CARGO_PKG_VERSION"),
            seed,
            invocation()
        );
        buf.extend_from_slice(header.as_bytes());
        {
            let mut writer = csv::Writer::from_writer(&mut buf);
            for result in results {
                for row in metrics_rows(result) {
                    writer.serialize(row).map_err(Error::Csv)?;
                }
            }
            writer.flush().map_err(|err| CliError::Lib(Error::Io(err)))?;
        }
        std::fs::write(out, buf)?;
    } else {
        let file = ResultsFile {
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            invocation: invocation(),
            results: results.to_vec(),
        };
        let json =
            serde_json::to_string_pretty(&file).map_err(|err| CliError::Usage(err.to_string()))?;
        std::fs::write(out, json + "\n")?;
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> CliResult<()> {
    configure_jobs(args.jobs)?;
    let text = std::fs::read_to_string(&args.config)?;
    let config: SimConfig = toml::from_str(&text)
        .map_err(|err| CliError::Usage(format!("{}: {err}", args.config.display())))?;
    if config.scenario.is_empty() {
        return Err(CliError::Usage("config has no [[scenario]] tables".into()));
    }
    let mut results = Vec::with_capacity(config.scenario.len());
    for mut scenario in config.scenario {
        if let Some(reps) = args.reps {
            scenario.reps = reps;
        }
        if let Some(seed) = args.seed {
            scenario.master_seed = seed;
        }
        let result = run_scenario(&scenario)?;
        print_result(&result);
        results.push(result);
    }
    if let Some(out) = &args.out {
        let seed = results[0].master_seed;
        write_results(&results, out, seed)?;
    }
    Ok(())
}

fn cmd_replay(args: ReplayArgs) -> CliResult<()> {
    configure_jobs(args.jobs)?;
    let seed = resolve_seed(args.seed)?;
    let raw = load_csv(&args.input, &CsvSchema::default())?;
    let design = ReplayDesign::parse(&args.design)?;
    let specs = parse_specs(&args.est, args.with_z)?;
    let result = impute_replay(&raw, design, &specs, args.reps, seed, args.alpha)?;
    print_result(&result);
    if let Some(out) = &args.out {
        write_results(std::slice::from_ref(&result), out, seed)?;
    }
    Ok(())
}
