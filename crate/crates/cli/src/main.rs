//! Command-line entry point.
//!
//! Exit codes: 0 on success, 1 on usage, input or I/O errors, 2 when the
//! numerics fail. Errors go to stderr as one JSON object per line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use labelshift::analysis::{self, AnalysisEstimand, AnalysisEstimator, WorkingRatio};
use labelshift::io::{self, RunConfig};
use labelshift::simulation::{run_study, EstimandChoice, EstimatorKind};
use labelshift::Error;
use log::info;

#[derive(Parser)]
#[command(name = "labelshift", version, about = "Efficient estimation for unlabeled target populations under label shift")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte Carlo study; writes summary.csv, raw_estimates.csv, rho_curves.csv.
    Simulate(SimulateArgs),
    /// One estimate with standard error and interval; writes report.json.
    Estimate(DataArgs),
    /// Working, first-stage and refined density ratios; writes density_ratio.csv.
    DensityRatio(DataArgs),
    /// Several estimators on one dataset; writes comparison.csv.
    Compare(DataArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// TOML configuration; the [simulation] table is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Restrict to one estimand: mean or variance.
    #[arg(long)]
    estimand: Option<String>,
    /// Comma-separated estimator ids.
    #[arg(long, value_delimiter = ',')]
    estimators: Option<Vec<String>>,
}

#[derive(Args)]
struct DataArgs {
    /// TOML configuration; the [analysis] table is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset CSV with columns r, y, x1..xd and optionally y_pred.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// mean, variance or power:k.
    #[arg(long)]
    estimand: Option<String>,
    /// Estimator reported by `estimate`.
    #[arg(long)]
    estimator: Option<String>,
    /// Comma-separated estimator ids run by `compare`.
    #[arg(long, value_delimiter = ',')]
    estimators: Option<Vec<String>>,
    /// Treat y as a class label and estimate class probabilities.
    #[arg(long)]
    discrete: bool,
    /// Seed the ratio pipeline with the confusion-matrix ratio built from y_pred.
    #[arg(long)]
    confusion: bool,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Error> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn simulate(args: SimulateArgs) -> Result<(), Error> {
    let mut cfg = load_config(args.config.as_deref())?;
    let sim = &mut cfg.simulation;
    if let Some(r) = args.replicates {
        sim.replicates = r;
    }
    if let Some(s) = args.seed {
        sim.seed = s;
    }
    if let Some(e) = args.estimand.as_deref() {
        sim.estimands = vec![match e {
            "mean" => EstimandChoice::Mean,
            "variance" => EstimandChoice::Variance,
            _ => return Err(Error::Config(format!("simulate supports mean or variance, got '{e}'"))),
        }];
    }
    if let Some(list) = &args.estimators {
        sim.estimators = list.iter().map(|s| EstimatorKind::parse(s)).collect::<Result<_, _>>()?;
    }
    sim.validate()?;
    let out = run_study(sim)?;
    let dir = &args.out;
    io::write_summary_csv(&dir.join("summary.csv"), &out.rows)?;
    io::write_raw_csv(&dir.join("raw_estimates.csv"), &out.raw)?;
    io::write_curves_csv(&dir.join("rho_curves.csv"), &out.curves)?;
    io::write_failures_csv(&dir.join("failures.csv"), &out.failures)?;
    cfg.echo(dir)?;
    println!("estimand,estimator,mse_x100,bias_x10,se_x10,are,coverage,failures");
    for r in &out.rows {
        println!(
            "{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{}",
            r.estimand.id(),
            r.estimator.id(),
            r.mse_x100,
            r.bias_x10,
            r.se_x10,
            r.are,
            r.coverage,
            r.failures
        );
    }
    info!("wrote outputs to {}", dir.display());
    Ok(())
}

/// Resolves the analysis configuration and loads the dataset.
fn prepare_data(args: &DataArgs) -> Result<(RunConfig, analysis::AnalysisInput), Error> {
    let mut cfg = load_config(args.config.as_deref())?;
    let a = &mut cfg.analysis;
    if let Some(p) = &args.data {
        a.data = Some(p.display().to_string());
    }
    if let Some(e) = args.estimand.as_deref() {
        a.estimand = AnalysisEstimand::parse(e)?;
    }
    if let Some(e) = args.estimator.as_deref() {
        a.estimator = AnalysisEstimator::parse(e)?;
    }
    if let Some(list) = &args.estimators {
        a.estimators = list.iter().map(|s| AnalysisEstimator::parse(s)).collect::<Result<_, _>>()?;
    }
    a.discrete |= args.discrete;
    if args.confusion {
        a.working_ratio = WorkingRatio::Confusion;
    }
    a.validate()?;
    let path = a
        .data
        .clone()
        .ok_or_else(|| Error::Config("no dataset: pass --data or set analysis.data".into()))?;
    let input = io::load_analysis_input(Path::new(&path))?;
    Ok((cfg, input))
}

fn estimate(args: DataArgs) -> Result<(), Error> {
    let (cfg, input) = prepare_data(&args)?;
    let report = analysis::estimate(&input, &cfg.analysis)?;
    io::write_report_json(&args.out.join("report.json"), &report)?;
    io::write_report_csv(&args.out.join("report.csv"), &report)?;
    cfg.echo(&args.out)?;
    for (c, t) in report.theta_hat.iter().enumerate() {
        println!(
            "{} {}[{c}] = {t:.6} (se {:.6}, {:.0}% CI [{:.6}, {:.6}])",
            report.estimator_name,
            report.estimand,
            report.std_err[c],
            100.0 * report.ci_level,
            report.ci[c][0],
            report.ci[c][1]
        );
    }
    Ok(())
}

fn density_ratio(args: DataArgs) -> Result<(), Error> {
    let (cfg, input) = prepare_data(&args)?;
    let rows = analysis::ratio_curves(&input, &cfg.analysis)?;
    io::write_ratio_csv(&args.out.join("density_ratio.csv"), &rows)?;
    cfg.echo(&args.out)?;
    info!("wrote {} ratio points", rows.len());
    Ok(())
}

fn compare(args: DataArgs) -> Result<(), Error> {
    let (cfg, input) = prepare_data(&args)?;
    let rows = analysis::compare(&input, &cfg.analysis)?;
    io::write_comparison_csv(&args.out.join("comparison.csv"), &rows)?;
    cfg.echo(&args.out)?;
    for r in &rows {
        match &r.error {
            None => println!("{:<16} {:<20} {:.6} (se {:.6})", r.estimator, r.estimand, r.theta_hat, r.std_err),
            Some(e) => println!("{:<16} {:<20} failed: {e}", r.estimator, r.estimand),
        }
    }
    Ok(())
}

fn report_error(e: &Error) -> ExitCode {
    let code: u8 = if e.is_numerical() { 2 } else { 1 };
    let kind = if e.is_numerical() { "numerical" } else { "input" };
    eprintln!("{}", serde_json::json!({ "error": kind, "message": e.to_string(), "exit_code": code }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Estimate(a) => estimate(a),
        Command::DensityRatio(a) => density_ratio(a),
        Command::Compare(a) => compare(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report_error(&e),
    }
}
