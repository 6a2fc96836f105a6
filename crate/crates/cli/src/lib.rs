//! The `labordyn` command line: generate, prepare, estimate, predict,
//! lifetime and diagnose, plus `replay` to rerun a recorded manifest.
//!
//! Every subcommand writes its CSV outputs and a `manifest.json` into the
//! `--out` directory. Flags override values from an optional `--config`
//! TOML file, which in turn override built-in defaults.

mod commands;
mod config;
mod failure;
mod manifest;

use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

pub use failure::{Failure, EXIT_IO, EXIT_NON_CONVERGENCE, EXIT_OTHER, EXIT_SUCCESS, EXIT_VALIDATION};
pub use manifest::{RunManifest, MANIFEST_FILE};

pub const DEFAULT_SEED: u64 = 1;
pub const DEFAULT_OUT: &str = "labordyn-out";

#[derive(Parser, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[command(name = "labordyn", version, about = "Latent-class employment mobility and wage dynamics")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Common {
    /// Master seed for every random stream [default: 1]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads [default: available cores]
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Parameter file (TOML) [default: the bundled published fixture]
    #[arg(long, global = true)]
    pub params: Option<PathBuf>,
    /// Output directory [default: labordyn-out]
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// TOML file with defaults for any flag; flags win
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Simulate a synthetic panel from a parameter set
    Generate(GenerateArgs),
    /// Drop short histories, impute non-employment, winsorize wages
    Prepare(PrepareArgs),
    /// Three-phase EM estimation
    Estimate(EstimateArgs),
    /// Simulate each individual forward from the first observed spell
    Predict(PredictArgs),
    /// Lifetime values and sector counterfactual curves
    Lifetime(LifetimeArgs),
    /// Transition matrices, wage histograms and class composition
    Diagnose(DiagnoseArgs),
    /// Rerun the invocation recorded in a manifest
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Generate(_) => "generate",
            Command::Prepare(_) => "prepare",
            Command::Estimate(_) => "estimate",
            Command::Predict(_) => "predict",
            Command::Lifetime(_) => "lifetime",
            Command::Diagnose(_) => "diagnose",
            Command::Replay(_) => "replay",
        }
    }
}

#[derive(Args, Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerateArgs {
    /// Number of individuals [default: 5000]
    #[arg(long)]
    pub n: Option<usize>,
    /// Years per individual [default: 8]
    #[arg(long)]
    pub years: Option<usize>,
    /// Population spec file (`key = value` lines)
    #[arg(long)]
    pub population: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrepareArgs {
    /// Panel CSV to prepare
    #[arg(long)]
    pub panel: Option<PathBuf>,
    /// Last panel year [default: latest observed]
    #[arg(long)]
    pub end_year: Option<i32>,
    /// No trailing imputation from this age on [default: 60]
    #[arg(long)]
    pub max_age: Option<u32>,
    /// Age at zero experience [default: 25]
    #[arg(long)]
    pub entry_age_base: Option<u32>,
}

#[derive(Args, Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EstimateArgs {
    /// Prepared panel CSV
    #[arg(long)]
    pub panel: Option<PathBuf>,
    /// Transition classes [default: 4]
    #[arg(long)]
    pub k_m: Option<usize>,
    /// Income classes [default: 3]
    #[arg(long)]
    pub k_y: Option<usize>,
    /// EM iteration cap per phase [default: 500]
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// EM convergence distance [default: 1e-3]
    #[arg(long)]
    pub tol: Option<f64>,
    /// Random starts for the mobility phase [default: 1]
    #[arg(long)]
    pub restarts: Option<usize>,
    /// Write a parameter checkpoint every this many iterations
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Args, Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictArgs {
    /// Observed panel CSV
    #[arg(long)]
    pub panel: Option<PathBuf>,
    /// Draw the first state instead of using the observed one
    #[arg(long)]
    pub draw_initial: bool,
    /// Years simulated after the first [default: to the last observed year]
    #[arg(long)]
    pub horizon: Option<usize>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LifetimeMode {
    /// Job-for-life and with-mobility simulations to retirement
    Counterfactual,
    /// Value the panel's own trajectories as recorded
    Observed,
}

#[derive(Args, Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LifetimeArgs {
    /// Panel CSV (only first spells are used in counterfactual mode)
    #[arg(long)]
    pub panel: Option<PathBuf>,
    /// Discount factor [default: from the parameter file]
    #[arg(long)]
    pub beta: Option<f64>,
    /// Replacement-rate presets (`0.4`, `0.7`, `sector`, or any rate); repeatable
    #[arg(long)]
    pub rr: Vec<String>,
    /// [default: counterfactual]
    #[arg(long, value_enum)]
    pub mode: Option<LifetimeMode>,
    /// Population spec file, for the entry age
    #[arg(long)]
    pub population: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseArgs {
    /// Panel to describe
    #[arg(long, alias = "panel-a")]
    pub panel: Option<PathBuf>,
    /// Second panel; writes a side-by-side report with distances
    #[arg(long)]
    pub compare: Option<PathBuf>,
    /// Histogram bin width in log-wage units [default: 0.05]
    #[arg(long)]
    pub bin_width: Option<f64>,
}

#[derive(Args, Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayArgs {
    /// manifest.json written by an earlier run
    pub manifest: PathBuf,
}

/// Parses `args` (including the program name), runs, and returns the exit code.
pub fn run_from_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_SUCCESS };
        }
    };
    match execute(cli, argv) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

/// Runs a parsed invocation and returns the exit code of a completed run.
pub fn execute(cli: Cli, argv: Vec<String>) -> Result<i32, Failure> {
    if let Command::Replay(r) = &cli.command {
        let m = RunManifest::load(&r.manifest)?;
        let mut inv = m.invocation;
        if cli.common.out.is_some() {
            inv.common.out = cli.common.out.clone();
        }
        if cli.common.threads.is_some() {
            inv.common.threads = cli.common.threads;
        }
        if matches!(inv.command, Command::Replay(_)) {
            return Err(Failure::validation("a manifest cannot record a replay"));
        }
        return execute(inv, m.argv);
    }
    let mut resolved = config::resolve(cli)?;
    resolved.common.seed.get_or_insert(DEFAULT_SEED);
    resolved.common.out.get_or_insert_with(|| PathBuf::from(DEFAULT_OUT));
    let threads = resolved.common.threads.unwrap_or_else(|| {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    });
    if threads == 0 {
        return Err(Failure::validation("--threads must be at least 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Failure::other(format!("cannot start worker pool: {e}")))?;
    let started = Instant::now();
    let outcome = pool.install(|| commands::dispatch(&resolved))?;
    let code = if outcome.converged.as_ref().is_some_and(|c| c.iter().any(|x| !x)) {
        EXIT_NON_CONVERGENCE
    } else {
        EXIT_SUCCESS
    };
    let manifest = RunManifest {
        artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        subcommand: resolved.command.name().to_string(),
        argv,
        seed: resolved.common.seed.unwrap_or(DEFAULT_SEED),
        threads,
        inputs: outcome.inputs,
        outputs: outcome.outputs,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        converged: outcome.converged,
        exit_code: code,
        invocation: resolved,
    };
    manifest.write()?;
    if code == EXIT_NON_CONVERGENCE {
        eprintln!("warning: EM stopped at the iteration cap before converging; outputs are flagged in the manifest");
    }
    Ok(code)
}
