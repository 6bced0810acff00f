//! `gmmdc`: estimate linear GMM models from CSV files and run simulation
//! studies. Results go to stdout as a table or JSON; logs and progress go to
//! stderr.

mod data;
mod error;
mod estimate;
mod report;
mod simulate;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gmmdc::estimate::{DEFAULT_MAX_ITER, DEFAULT_TOL};
use gmmdc::montecarlo::Estimator;
use gmmdc::{PanelModel, WeightSpec};
use serde::Serialize;

use crate::data::Table;
use crate::error::{CliError, CliResult, ExitKind};

#[derive(Parser)]
#[command(
    name = "gmmdc",
    version,
    about = "Linear GMM with doubly corrected standard errors"
)]
struct Cli {
    /// Worker threads for simulations and bootstraps (default: all cores).
    #[arg(long, global = true, env = "GMMDC_THREADS")]
    threads: Option<usize>,

    /// Output format.
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    format: Format,

    /// Suppress progress messages.
    #[arg(long, short, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate a model from a CSV file.
    Estimate {
        #[command(subcommand)]
        model: ModelArgs,
    },
    /// Run a Monte Carlo study.
    Simulate(SimulateArgs),
}

#[derive(Subcommand)]
enum ModelArgs {
    /// Cross-sectional IV regression, one row per observation.
    Iv(IvArgs),
    /// First-differenced dynamic panel, long format (one row per id and period).
    Panel(PanelArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    OneStep,
    TwoStep,
    Iterated,
}

impl EstimatorArg {
    fn as_str(self) -> &'static str {
        match self {
            EstimatorArg::OneStep => "one-step",
            EstimatorArg::TwoStep => "two-step",
            EstimatorArg::Iterated => "iterated",
        }
    }

    fn estimator(self) -> Estimator {
        match self {
            EstimatorArg::OneStep => Estimator::OneStep,
            EstimatorArg::TwoStep => Estimator::TwoStep,
            EstimatorArg::Iterated => Estimator::Iterated,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightArg {
    /// Average of the per-observation weights (Z'Z/n for IV, the
    /// first-difference H weight for panels).
    Data,
    Identity,
}

#[derive(Args)]
struct CommonArgs {
    /// CSV file with a header row.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = EstimatorArg::TwoStep)]
    estimator: EstimatorArg,
    /// Initial weight matrix.
    #[arg(long, value_enum, default_value_t = WeightArg::Data)]
    weight: WeightArg,
    /// Use centered efficient weights.
    #[arg(long)]
    centered: bool,
    /// Convergence tolerance for the iterated estimator.
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITER)]
    max_iter: usize,
    /// Hypothesised values for the t tests: one for all coefficients or one
    /// per coefficient.
    #[arg(long = "null", value_delimiter = ',', allow_negative_numbers = true)]
    null_values: Vec<f64>,
    /// Number of bootstrap resamples for the dc-studentized t test.
    #[arg(long)]
    bootstrap: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct IvArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    y: String,
    /// Regressor columns, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    x: Vec<String>,
    /// Instrument columns, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    z: Vec<String>,
    /// Add a constant to both the regressors and the instruments.
    #[arg(long)]
    intercept: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum PanelMode {
    /// `y_it = beta x_it + eta_i + v_it` with x predetermined.
    Predetermined,
    /// `y_it = rho y_i,t-1 + eta_i + v_it`.
    Ar1,
}

#[derive(Args)]
struct PanelArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, default_value = "id")]
    id: String,
    #[arg(long, default_value = "time")]
    time: String,
    #[arg(long, default_value = "y")]
    y: String,
    /// Regressor column; required in predetermined mode.
    #[arg(long)]
    x: Option<String>,
    #[arg(long, value_enum, default_value_t = PanelMode::Predetermined)]
    mode: PanelMode,
}

#[derive(Args)]
struct SimulateArgs {
    /// JSON study configuration; flags given alongside it take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// iv, panel-rc or panel-lag.
    #[arg(long)]
    design: Option<String>,
    /// Observations (IV) or individuals (panels).
    #[arg(long, visible_alias = "N")]
    n: Option<usize>,
    /// Periods per individual.
    #[arg(long = "T")]
    t: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    alpha0: Option<f64>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Estimators to summarise, comma separated (default: all three).
    #[arg(long, value_enum, value_delimiter = ',')]
    estimators: Option<Vec<EstimatorArg>>,
    /// Bootstrap resamples per replication; enables the bootstrap t test.
    #[arg(long = "bootstrap-B")]
    bootstrap_b: Option<usize>,
    /// Keep the IV violation fixed instead of shrinking it with n.
    #[arg(long)]
    fixed_misspec: bool,
    #[arg(long)]
    centered: bool,
}

fn settings(c: &CommonArgs) -> estimate::Settings {
    let weight = match c.weight {
        WeightArg::Data => WeightSpec::DataAverage,
        WeightArg::Identity => WeightSpec::Identity,
    };
    estimate::Settings {
        plan: estimate::plan_for(c.estimator.as_str(), weight, c.centered, c.tol, c.max_iter),
        null_values: c.null_values.clone(),
        bootstrap: c.bootstrap,
        seed: c.seed,
    }
}

fn emit<T: Serialize>(
    format: Format,
    report: &T,
    table: impl FnOnce(&T) -> String,
) -> CliResult<()> {
    let text = match format {
        Format::Table => table(report),
        Format::Json => {
            let mut s = serde_json::to_string_pretty(report)
                .map_err(|e| CliError::data(format!("cannot serialise report: {e}")))?;
            s.push('\n');
            s
        }
    };
    std::io::stdout().write_all(text.as_bytes())?;
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(CliError::data("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::data(format!("cannot start thread pool: {e}")))?;
    }
    match cli.command {
        Command::Estimate { model } => {
            let (model, common) = match model {
                ModelArgs::Iv(a) => {
                    let table = Table::read(&a.common.data)?;
                    let m = estimate::iv_model(
                        table.vector(&a.y)?,
                        table.matrix(&a.x)?,
                        table.matrix(&a.z)?,
                        a.x.clone(),
                        a.intercept,
                    )?;
                    (m, a.common)
                }
                ModelArgs::Panel(a) => {
                    let table = Table::read(&a.common.data)?;
                    let (mode, x, name) = match (a.mode, &a.x) {
                        (PanelMode::Predetermined, Some(x)) => {
                            (PanelModel::Predetermined, Some(x.as_str()), x.clone())
                        }
                        (PanelMode::Predetermined, None) => {
                            return Err(CliError::data("predetermined mode needs --x"))
                        }
                        (PanelMode::Ar1, None) => (PanelModel::Ar1, None, format!("L.{}", a.y)),
                        (PanelMode::Ar1, Some(_)) => {
                            return Err(CliError::data("ar1 mode takes no --x column"))
                        }
                    };
                    let panel = table.panel(&a.id, &a.time, &a.y, x)?;
                    (estimate::panel_model(&panel, mode, name)?, a.common)
                }
            };
            let report = estimate::run(&model, &settings(&common))?;
            emit(cli.format, &report, |r| r.to_table())
        }
        Command::Simulate(a) => {
            let base = a.config.as_deref().map(simulate::load_config).transpose()?;
            let overrides = simulate::Overrides {
                design: a.design,
                n: a.n,
                t: a.t,
                alpha0: a.alpha0,
                reps: a.reps,
                seed: a.seed,
                estimators: a
                    .estimators
                    .map(|v| v.into_iter().map(EstimatorArg::estimator).collect()),
                bootstrap_b: a.bootstrap_b,
                fixed_misspec: a.fixed_misspec,
                centered: a.centered,
            };
            let cfg = simulate::build_config(base, &overrides)?;
            let report = simulate::run(&cfg, cli.quiet)?;
            emit(cli.format, &report, |r| r.to_table())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(match e.kind {
                ExitKind::Data => 2,
                ExitKind::Numerical => 3,
            })
        }
    }
}
