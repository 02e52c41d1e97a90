//! `koopman`: principal Koopman eigenfunctions from the command line.

mod commands;
mod config;
mod expr;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::CliError;
use config::{EigenSelect, MethodKind, OutputConfig, RunConfig, SystemSpec};

/// Environment variable holding the default worker-thread count.
const THREADS_ENV: &str = "KOOPMAN_THREADS";

#[derive(Parser)]
#[command(name = "koopman", version, about = "Principal Koopman eigenfunctions by path integrals along trajectories")]
struct Cli {
    /// Run configuration (TOML if the name ends in .toml, JSON otherwise;
    /// a JSON sidecar from an earlier run replays that run).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads [default: $KOOPMAN_THREADS, else all cores].
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log progress (-v) or details (-vv) to stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct Common {
    /// Case study: example-a, example-b or test-c.
    #[arg(long)]
    system: Option<String>,
    /// Output file.
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Maximum integration time per trajectory.
    #[arg(long)]
    t_max: Option<f64>,
}

#[derive(Args, Default)]
struct Target {
    /// Real part of the eigenvalue to compute.
    #[arg(long, allow_hyphen_values = true)]
    lambda: Option<f64>,
    /// Imaginary part of the eigenvalue.
    #[arg(long, allow_hyphen_values = true, requires = "lambda")]
    lambda_im: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Eigenvalues, left eigenvectors, equilibrium class and spectral-condition verdicts.
    Spectrum {
        #[command(flatten)]
        common: Common,
    },
    /// Eigenfunction on a grid, written as CSV with a JSON sidecar.
    Eigfun {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        target: Target,
        #[arg(long, value_enum)]
        method: Option<MethodKind>,
        /// Grid as comma-separated `lo:hi:count` axes.
        #[arg(long, allow_hyphen_values = true)]
        grid: Option<String>,
        /// Snapshot seed for finite_edmd.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Zero level set of the unstable eigenfunction and the optimal controller.
    Control {
        #[command(flatten)]
        common: Common,
        /// Controller abscissae as `lo:hi:count`.
        #[arg(long, allow_hyphen_values = true)]
        x1: Option<String>,
    },
    /// Fit EDMD on annulus snapshots and match the principal eigenvalues.
    EdmdFit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        /// Fit these snapshots (CSV with JSON sidecar) instead of sampling.
        #[arg(long)]
        snapshots: Option<PathBuf>,
        /// Also write the snapshots used.
        #[arg(long)]
        save_snapshots: Option<PathBuf>,
    },
    /// Run the acceptance suite.
    Verify {
        /// Skip the two long reproduction runs.
        #[arg(long, conflicts_with = "full")]
        fast: bool,
        /// Every criterion (the default).
        #[arg(long)]
        full: bool,
    },
}

fn load(path: Option<&PathBuf>) -> Result<RunConfig, CliError> {
    Ok(match path {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    })
}

fn apply_common(cfg: &mut RunConfig, c: Common) {
    if let Some(s) = c.system {
        cfg.system = SystemSpec::Named(s);
    }
    if let Some(p) = c.output {
        let format = cfg.output.take().map_or_else(|| "csv".into(), |o| o.format);
        cfg.output = Some(OutputConfig { path: p, format });
    }
    if let Some(t) = c.t_max {
        cfg.integrator.t_max = t;
    }
}

fn set_seed(cfg: &mut RunConfig, seed: Option<u64>) {
    if let Some(s) = seed {
        cfg.edmd.get_or_insert_with(Default::default).seed = s;
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let threads = match cli.threads {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(v.parse().map_err(|_| CliError::Config(format!("{THREADS_ENV}: not a thread count: `{v}`")))?),
            Err(_) => None,
        },
    };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("threads: {e}")))?;
    }
    let mut cfg = load(cli.config.as_ref())?;
    match cli.command {
        Command::Spectrum { common } => {
            apply_common(&mut cfg, common);
            commands::spectrum_cmd(&cfg)
        }
        Command::Eigfun { common, target, method, grid, seed } => {
            apply_common(&mut cfg, common);
            if let Some(re) = target.lambda {
                cfg.eigen_select = Some(EigenSelect { re, im: target.lambda_im.unwrap_or(0.0) });
            }
            if method.is_some() {
                cfg.method = method;
            }
            if grid.is_some() {
                cfg.grid = grid;
            }
            set_seed(&mut cfg, seed);
            commands::eigfun_cmd(&mut cfg)
        }
        Command::Control { common, x1 } => {
            apply_common(&mut cfg, common);
            if let Some(x1) = x1 {
                cfg.control.get_or_insert_with(Default::default).x1 = x1;
            }
            commands::control_cmd(&mut cfg)
        }
        Command::EdmdFit { common, seed, snapshots, save_snapshots } => {
            apply_common(&mut cfg, common);
            set_seed(&mut cfg, seed);
            commands::edmd_fit_cmd(&mut cfg, snapshots.as_deref(), save_snapshots.as_deref())
        }
        Command::Verify { fast, full: _ } => commands::verify_cmd(!fast),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
