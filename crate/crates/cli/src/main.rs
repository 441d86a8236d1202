//! `gibbsfit`: simulate, fit and assess spatial Gibbs point-process models.
//!
//! Exit codes: 0 success, 2 bad configuration or input, 3 numerical failure.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gibbsfit::fit::Method;

use settings::{Failure, Outcome, Settings};

#[derive(Parser)]
#[command(name = "gibbsfit", version, about = "Spatial Gibbs point-process estimation")]
struct Cli {
    /// Worker threads (default: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

/// Options shared by the model-based subcommands; each overrides the config file.
#[derive(Args, Debug, Default)]
pub struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model specification: a JSON file or inline JSON.
    #[arg(long)]
    model: Option<String>,
    /// Parameter vector, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    theta: Option<Vec<f64>>,
    /// Window JSON file (default: unit square).
    #[arg(long)]
    window: Option<PathBuf>,
    /// Quadrature grid of the semi-optimal estimator.
    #[arg(long, num_args = 2, value_names = ["NX", "NY"])]
    grid: Option<Vec<usize>>,
    /// Dummy-point grid of the logistic pseudolikelihood.
    #[arg(long, num_args = 2, value_names = ["NX", "NY"])]
    dummy_grid: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
    /// `clamp-then-pl` or `pl`.
    #[arg(long)]
    fallback: Option<String>,
    /// Number of simulations.
    #[arg(long)]
    nsim: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate patterns; writes one CSV per pattern and manifest.json.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a model to one pattern.
    Fit {
        #[command(flatten)]
        common: Common,
        /// `pl` or `so`.
        #[arg(long)]
        method: Option<String>,
        /// Points CSV.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Attach plug-in standard errors (semi-optimal fits).
        #[arg(long)]
        se: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pooled fit of replicated patterns, with a two-sample test for two groups.
    FitReplicated {
        #[command(flatten)]
        common: Common,
        /// Group manifest JSON.
        #[arg(long)]
        group: PathBuf,
        #[arg(long)]
        method: Option<String>,
        /// Coordinates (0-based) compared between two groups; default: interaction coordinates.
        #[arg(long, value_delimiter = ',')]
        coords: Option<Vec<usize>>,
        /// Side length of the per-replicate quadrature cells; overrides --grid.
        #[arg(long)]
        cell_size: Option<f64>,
        /// Side length of the per-replicate dummy-point cells; overrides --dummy-grid.
        #[arg(long)]
        dummy_cell_size: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parametric bootstrap around a fit report.
    Bootstrap {
        /// Report written by `fit`.
        #[arg(long)]
        fit: PathBuf,
        /// Configuration file; only `sampler`, `seed` and `nsim` are used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        nsim: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte Carlo sensitivity, variance and Godambe matrices at a given parameter.
    Godambe {
        #[command(flatten)]
        common: Common,
        /// `pl`, `so` or `both`.
        #[arg(long, default_value = "both")]
        method: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// RMSE comparison of the estimators over simulated patterns.
    RmseStudy {
        /// Experiment specification JSON.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        nsim: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Choose the interaction range by profile pseudolikelihood.
    #[command(name = "profile-R")]
    ProfileR {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Candidate ranges, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        candidates: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_methods(s: &str) -> Outcome<Vec<Method>> {
    match s {
        "both" => Ok(vec![Method::Pl, Method::SemiOptimal]),
        m => Ok(vec![m.parse().map_err(|e: gibbsfit::Error| Failure::Config(e.to_string()))?]),
    }
}

fn run(cli: Cli) -> Outcome<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Config(e.to_string()))?;
    }
    match cli.command {
        Command::Simulate { common, out } => commands::simulate(&Settings::load(&common)?, &out),
        Command::Fit { common, method, data, se, out } => {
            let mut s = Settings::load(&common)?;
            s.set_method(&method);
            s.set_data(&data);
            commands::fit(&s, se, out.as_deref())
        }
        Command::FitReplicated { common, group, method, coords, cell_size, dummy_cell_size, out } => {
            let mut s = Settings::load(&common)?;
            s.set_method(&method);
            commands::fit_replicated(&s, &group, coords, (cell_size, dummy_cell_size), out.as_deref())
        }
        Command::Bootstrap { fit, config, nsim, seed, out } => {
            let common = Common { config, nsim, seed, ..Common::default() };
            commands::bootstrap(&Settings::load(&common)?, &fit, &out)
        }
        Command::Godambe { common, method, out } => {
            commands::godambe(&Settings::load(&common)?, &parse_methods(&method)?, &out)
        }
        Command::RmseStudy { config, seed, nsim, out } => commands::rmse_study(&config, seed, nsim, &out),
        Command::ProfileR { common, data, candidates, out } => {
            let mut s = Settings::load(&common)?;
            s.set_data(&data);
            commands::profile_r(&s, &candidates, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
