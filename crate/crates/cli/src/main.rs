use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use twoscale_cli::config::{apply_overrides, config_from_value};
use twoscale_cli::{
    analyze_run, load_config, load_grid, run_experiment, run_sweep, validate_config, CliError,
    WORKERS_ENV,
};

/// Distributed two-time-scale stochastic approximation experiments.
#[derive(Debug, Parser)]
#[command(name = "twoscale", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run all replicas of one config and write a run directory.
    Run {
        config: PathBuf,
        /// Override a config key, e.g. `--set system.nodes=8`.
        #[arg(long = "set", value_name = "PATH=VALUE")]
        overrides: Vec<String>,
    },
    /// Run a parameter grid over a base config.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long = "set", value_name = "PATH=VALUE")]
        overrides: Vec<String>,
    },
    /// Recompute the summary of an existing run directory.
    Analyze { run_dir: PathBuf },
    /// Check a config against the modelling assumptions without running it.
    Validate {
        config: PathBuf,
        #[arg(long = "set", value_name = "PATH=VALUE")]
        overrides: Vec<String>,
    },
}

/// Exit status 1 means the run finished with audit violations (or failed
/// validation); 2 means it could not run.
fn execute(cli: Cli) -> Result<u8, CliError> {
    match cli.command {
        Command::Run { config, overrides } => {
            let loaded = load_config(&config, &overrides)?;
            let report = run_experiment(&loaded)?;
            println!("{}", report.dir.display());
            let violations = report.summary.audit.violations();
            if violations > 0 {
                log::error!("{violations} audit violations");
            }
            Ok(u8::from(!report.audit_passed()))
        }
        Command::Sweep {
            config,
            grid,
            overrides,
        } => {
            let text = std::fs::read_to_string(&config).map_err(|e| CliError::io(&config, e))?;
            let mut base: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| CliError::Parse {
                    source_name: config.display().to_string(),
                    line: e.line(),
                    column: e.column(),
                    message: e.to_string(),
                })?;
            apply_overrides(&mut base, &overrides)?;
            let dir = config.parent();
            config_from_value(base.clone(), dir)?;
            let report = run_sweep(&base, dir, &load_grid(&grid)?)?;
            println!("{}", report.dir.display());
            let failed = report
                .rows
                .iter()
                .any(|r| !r.error.is_empty() || r.audit_violations.is_some_and(|v| v > 0));
            Ok(u8::from(failed))
        }
        Command::Analyze { run_dir } => {
            let report = analyze_run(&run_dir)?;
            println!("{}", serde_json::to_string_pretty(&report.summary)?);
            Ok(u8::from(!report.audit_passed()))
        }
        Command::Validate { config, overrides } => {
            let loaded = load_config(&config, &overrides)?;
            let report = validate_config(&loaded)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(u8::from(!report.all_pass))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            log::warn!("could not cap workers at {n}: {e}");
        }
    }
    match execute(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(2)
        }
    }
}
