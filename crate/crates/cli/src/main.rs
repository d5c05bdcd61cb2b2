//! `nfrsma`: run near-field RSMA beamfocusing designs and sweeps.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nearfield_rsma::bench::experiment::{run_solve, RunOptions};
use nearfield_rsma::bench::{run_experiment, verify, ConfigFile, ExperimentSpec, Scheme};

#[derive(Parser)]
#[command(name = "nfrsma", version, about = "Near-field RSMA hybrid beamfocusing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Clone, Copy, Default)]
struct Overrides {
    /// Replace the seed from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Replace the Monte-Carlo trial count.
    #[arg(long, global = true)]
    trials: Option<usize>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// One design on one channel realization.
    Solve {
        #[arg(long)]
        config: PathBuf,
        /// RSMA-SHB, RSMA-SHB-Low, RSMA-FD, SDMA-SHB or RSMA-SHB-far.
        #[arg(long, default_value = "RSMA-SHB")]
        scheme: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte-Carlo sweep over one parameter.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// File with a [sweep] section; defaults to the one in --config.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Skip the per-run JSON traces.
        #[arg(long)]
        no_traces: bool,
    },
    /// Quick property and oracle checks.
    Verify,
}

fn load(path: &PathBuf) -> Result<ConfigFile> {
    ConfigFile::load(path).with_context(|| format!("reading {}", path.display()))
}

fn run(cli: Cli) -> Result<ExitCode> {
    let ov = cli.overrides;
    if ov.threads == Some(0) {
        bail!("--threads must be positive");
    }
    match cli.command {
        Command::Solve { config, scheme, out } => {
            let file = load(&config)?;
            let mut cfg = file.system_config()?;
            if let Some(seed) = ov.seed {
                cfg.seed = seed;
            }
            let scheme: Scheme = scheme.parse()?;
            let res = run_solve(&cfg, scheme, &out, ov.threads)?;
            for row in res.rows() {
                println!(
                    "{}: max-min rate {:.6} bits/s/Hz, {} outer / {} inner iterations, violation {:.3e}, status {}",
                    row.scheme,
                    row.maxmin_rate_bps_hz,
                    row.iters_outer,
                    row.iters_inner_total,
                    row.penalty_violation,
                    row.status
                );
            }
            println!("wrote {}", out.display());
        }
        Command::Sweep {
            config,
            spec,
            out,
            no_traces,
        } => {
            let file = load(&config)?;
            let sweep_file = spec.as_ref().map(load).transpose()?;
            let mut spec = ExperimentSpec::from_files(&file, sweep_file.as_ref())?;
            if let Some(seed) = ov.seed {
                spec.seed = seed;
            }
            if let Some(trials) = ov.trials {
                spec.trials = trials;
            }
            let res = run_experiment(
                &spec,
                &out,
                &RunOptions {
                    threads: ov.threads,
                    write_traces: !no_traces,
                },
            )?;
            println!("{:<14} {:>12} {:>7} {:>12} {:>10}", "scheme", spec.variable.name(), "trials", "mean", "std");
            for s in &res.summary {
                println!(
                    "{:<14} {:>12} {:>7} {:>12.6} {:>10.6}",
                    s.scheme, s.sweep_value, s.trials, s.mean_maxmin_rate, s.std_maxmin_rate
                );
            }
            println!("wrote {}", out.display());
        }
        Command::Verify => {
            let results = verify::run_all();
            let mut ok = true;
            for r in &results {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
                ok &= r.passed;
            }
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
