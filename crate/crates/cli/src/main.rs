mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Reconstructs a hidden environmental covariate from species counts.
#[derive(Debug, Parser)]
#[command(name = "mvgp", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Worker threads for chains and folds (default: all cores).
    #[arg(long, global = true, env = "MVGP_THREADS")]
    jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a dataset with a truth ledger.
    Simulate(SimulateArgs),
    /// Fit one model and predict the rows with missing covariates.
    Fit(FitArgs),
    /// Cross-validate models on fully observed data.
    Crossval(CrossvalArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// TOML file with a `[sim]` table.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Counts CSV: a header of species names, one row per sample.
    #[arg(long)]
    pub counts: PathBuf,
    /// Covariate CSV (`row_id,value`; empty value = to be predicted).
    #[arg(long)]
    pub covariates: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// TOML run configuration; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Sampler and basis overrides shared by `fit` and `crossval`.
#[derive(Debug, Args, Default)]
pub struct ModelFlags {
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub burnin: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    #[arg(long)]
    pub knots: Option<usize>,
    #[arg(long = "knot-extend")]
    pub knot_extend: Option<f64>,
    /// `exponential` or `matern:<nu>`.
    #[arg(long)]
    pub kernel: Option<String>,
    /// Adds per-row residuals to the log link.
    #[arg(long)]
    pub overdispersion: bool,
    /// 4 × 200,000 iterations, 50,000 burn-in, thin 150.
    #[arg(long = "paper-scale")]
    pub full_scale: bool,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// One of mvgp, gam, bummer, wa, mat, mlrc.
    #[arg(long)]
    pub model: String,
    #[command(flatten)]
    pub flags: ModelFlags,
}

#[derive(Debug, Args)]
pub struct CrossvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated model list (default: all six).
    #[arg(long = "models", alias = "model", value_delimiter = ',')]
    pub models: Vec<String>,
    /// Number of random folds.
    #[arg(long)]
    pub k: Option<usize>,
    /// Hold out the rows above this covariate quantile instead of using
    /// random folds.
    #[arg(long = "no-analog")]
    pub no_analog: Option<f64>,
    #[command(flatten)]
    pub flags: ModelFlags,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.jobs {
        if n == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start worker threads: {e}");
            return ExitCode::from(1);
        }
    }
    let sub = match &cli.command {
        Command::Simulate(_) => "simulate",
        Command::Fit(_) => "fit",
        Command::Crossval(_) => "crossval",
    };
    let result = match &cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Fit(a) => commands::fit(a),
        Command::Crossval(a) => commands::crossval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<config::UsageError>().is_some() {
                use clap::CommandFactory;
                let mut cmd = Cli::command();
                let usage = match cmd.find_subcommand_mut(sub) {
                    Some(c) => c.render_usage(),
                    None => cmd.render_usage(),
                };
                eprintln!("\n{usage}");
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
