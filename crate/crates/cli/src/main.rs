//! `icloss`: fits, loss estimates, Monte Carlo experiments and identity
//! checks from the command line.
//!
//! Exit codes: 0 success, 2 invalid input, 3 numerical failure (singular
//! matrices, degrees of freedom), 4 failed verification.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use icloss::criteria::{aic, aic_known_sigma, aicc, cbar, maic, maicc, sure_mat_regression, CriterionValue};
use icloss::mcengine::{fmt_float, in_pool, run_mse_experiment, run_selection_experiment, ExperimentSpec};
use icloss::regression::{fit_mle, read_matrix_csv, FitResult};
use icloss::verify::{run_battery, run_negative_controls, BatteryConfig};
use icloss::{Matrix, SpdMatrix};

#[derive(Parser)]
#[command(name = "icloss", version, about = "Loss estimation for information criteria in multivariate regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit Y = XB + E by maximum likelihood; print B̂, Σ̂ and the criteria.
    Fit(DataArgs),
    /// Print the criteria only.
    Criteria(DataArgs),
    /// Mean squared error of loss estimators, one row per point and estimator.
    McMse(RunArgs),
    /// Improvement sweep of a figure spec, one row per grid point.
    Figure(RunArgs),
    /// Selection frequencies among nested models.
    VarSelect(SelectArgs),
    /// Numerical checks of the matrix identities.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct DataArgs {
    /// n×p design matrix (CSV).
    #[arg(long)]
    design: PathBuf,
    /// n×q response matrix (CSV).
    #[arg(long)]
    response: PathBuf,
    /// Both CSV files start with a header row.
    #[arg(long)]
    header: bool,
    /// Known q×q error covariance (CSV); adds AIC_KNOWN, MAIC and SURE_MAT.
    #[arg(long)]
    sigma: Option<PathBuf>,
    /// MAICc constant; defaults to c̄.
    #[arg(long)]
    c: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment spec (JSON).
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the spec's replication count.
    #[arg(long)]
    reps: Option<usize>,
    /// Worker threads; the result does not depend on it.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Candidate orders, overriding the spec's list (default 1..=p).
    #[arg(long, value_delimiter = ',')]
    orders: Option<Vec<usize>>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Battery {
    Default,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, value_enum, default_value = "default")]
    battery: Battery,
    /// Replications per Monte Carlo check.
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also run the perturbed-coefficient negative controls.
    #[arg(long)]
    controls: bool,
    /// Replications per negative control.
    #[arg(long, default_value_t = 1_000_000)]
    control_reps: usize,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Raised when identity checks fail; maps to exit code 4.
#[derive(Debug)]
struct VerificationFailed(String);

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for VerificationFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<VerificationFailed>().is_some() {
        return 4;
    }
    match err.downcast_ref::<icloss::Error>() {
        Some(e) if e.is_numeric() => 3,
        _ => 2,
    }
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_spec(args: &RunArgs) -> anyhow::Result<ExperimentSpec> {
    let mut spec = ExperimentSpec::from_path(&args.spec)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(reps) = args.reps {
        spec.reps = reps;
    }
    Ok(spec)
}

fn matrix_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| fmt_float(*v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

const CRITERIA_HEADER: &str = "criterion,value,c_used,cbar,conditions,status";

fn criterion_row(name: &str, value: icloss::Result<CriterionValue>, bound: Option<f64>) -> anyhow::Result<String> {
    let bound = bound.map(fmt_float).unwrap_or_default();
    Ok(match value {
        Ok(v) => format!(
            "{name},{},{},{bound},{},ok",
            fmt_float(v.value),
            v.c_used.map(fmt_float).unwrap_or_default(),
            v.conditions_summary()
        ),
        // an estimator that is undefined for these dimensions is reported, not fatal
        Err(e) if e.is_numeric() => format!("{name},,,{bound},,unavailable: {}", e.to_string().replace(',', ";")),
        Err(e) => return Err(e.into()),
    })
}

fn criteria_table(fit: &FitResult, sigma: Option<&SpdMatrix>, c: Option<f64>) -> anyhow::Result<String> {
    let bound = cbar(fit.dims()).ok();
    let mut out = format!("{CRITERIA_HEADER}\n");
    for (name, value, b) in [
        ("AIC", aic(fit), None),
        ("AICC", aicc(fit), None),
        ("MAICC", maicc(fit, c), bound),
    ] {
        writeln!(out, "{}", criterion_row(name, value, b)?)?;
    }
    if let Some(sigma) = sigma {
        writeln!(out, "{}", criterion_row("AIC_KNOWN", aic_known_sigma(fit, sigma), None)?)?;
        writeln!(out, "{}", criterion_row("MAIC", maic(fit, sigma), None)?)?;
        let sure = sure_mat_regression(fit, sigma).map(|v| CriterionValue {
            name: icloss::CriterionName::SureMat,
            value: v,
            c_used: None,
            conditions: Vec::new(),
        });
        writeln!(out, "{}", criterion_row("SURE_MAT", sure, None)?)?;
    }
    Ok(out)
}

fn load_fit(args: &DataArgs) -> anyhow::Result<(FitResult, Option<SpdMatrix>)> {
    let x = read_matrix_csv(&args.design, args.header)?;
    let y = read_matrix_csv(&args.response, args.header)?;
    if x.nrows() != y.nrows() {
        return Err(icloss::Error::DimensionMismatch(format!(
            "design has {} rows but response has {}",
            x.nrows(),
            y.nrows()
        ))
        .into());
    }
    let sigma = match &args.sigma {
        Some(path) => Some(SpdMatrix::new(read_matrix_csv(path, args.header)?)?),
        None => None,
    };
    Ok((fit_mle(&x, &y)?, sigma))
}

fn cmd_fit(args: &DataArgs, with_estimates: bool) -> anyhow::Result<()> {
    let (fit, sigma) = load_fit(args)?;
    let mut out = String::new();
    if with_estimates {
        let dims = fit.dims();
        writeln!(out, "# n={} p={} q={}", dims.n, dims.p, dims.q)?;
        out.push_str("# bhat\n");
        out.push_str(&matrix_csv(&fit.bhat));
        out.push_str("# sigma_hat\n");
        out.push_str(&matrix_csv(&fit.sigma_hat));
        out.push_str("# criteria\n");
    }
    out.push_str(&criteria_table(&fit, sigma.as_ref(), args.c)?);
    emit(args.out.as_deref(), &out)
}

fn cmd_experiment(args: &RunArgs, wide: bool) -> anyhow::Result<()> {
    let spec = load_spec(args)?;
    spec.validate()?;
    let summary = in_pool(args.threads, || run_mse_experiment(&spec))??;
    let text = if wide { summary.to_wide_csv() } else { summary.to_long_csv() };
    emit(args.out.as_deref(), &text)
}

fn cmd_var_select(args: &SelectArgs) -> anyhow::Result<()> {
    let spec = load_spec(&args.run)?;
    let orders = args
        .orders
        .clone()
        .or_else(|| spec.candidate_orders.clone())
        .unwrap_or_else(|| (1..=spec.dims.p).collect());
    let table = in_pool(args.run.threads, || run_selection_experiment(&spec, &orders))??;
    emit(args.run.out.as_deref(), &table.to_csv())
}

fn cmd_verify(args: &VerifyArgs) -> anyhow::Result<()> {
    let Battery::Default = args.battery;
    let mut config = BatteryConfig::default();
    if let Some(reps) = args.reps {
        config.reps = reps;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if config.reps < 2 || args.control_reps < 2 {
        bail!(icloss::Error::Config("verification needs at least 2 replications".into()));
    }
    let battery = in_pool(args.threads, || run_battery(&config))??;
    let mut text = battery.checks_csv();
    let mut failures = battery.checks.iter().filter(|c| !c.passed).count();
    let mut missed = 0;
    if args.controls {
        let controls = in_pool(args.threads, || run_negative_controls(args.control_reps, config.seed))??;
        missed = controls.controls.iter().filter(|c| !c.detected).count();
        failures += controls.checks.iter().filter(|c| !c.passed).count();
        text.push('\n');
        text.push_str(&controls.checks_csv());
        text.push('\n');
        text.push_str(&controls.controls_csv());
    }
    emit(args.out.as_deref(), &text)?;
    if failures > 0 || missed > 0 {
        return Err(VerificationFailed(format!(
            "{failures} identity checks failed, {missed} negative controls missed"
        ))
        .into());
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Fit(args) => cmd_fit(args, true),
        Command::Criteria(args) => cmd_fit(args, false),
        Command::McMse(args) => cmd_experiment(args, false),
        Command::Figure(args) => cmd_experiment(args, true),
        Command::VarSelect(args) => cmd_var_select(args),
        Command::Verify(args) => cmd_verify(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
