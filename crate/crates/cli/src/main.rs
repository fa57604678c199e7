use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use chores_cli::*;

#[derive(Parser)]
#[command(name = "chores", version, about = "Tatonnement experiments for chores Fisher markets")]
struct Cli {
    /// Worker threads for grid, rate and stability work (CHORES_JOBS overrides).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse an instance and print its moduli.
    Validate { file: PathBuf },
    /// Run tatonnement and write the trajectory.
    Simulate {
        file: PathBuf,
        #[arg(long, default_value = "relative")]
        mode: String,
        /// constant:η, harmonic[:c] or smooth
        #[arg(long, default_value = "harmonic")]
        schedule: String,
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        #[arg(long, default_value_t = 1_000_000)]
        max_iters: usize,
        /// uniform, random, or comma-separated prices
        #[arg(long, default_value = "uniform")]
        start: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        record_every: usize,
        /// Trajectory CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Summary JSON; stderr when omitted.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Potential and min-norm relative excess demand on a barycentric grid (3 chores).
    Grid {
        file: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        pitch: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Iterations to reach each eps under the smooth constant step (CES).
    Rate {
        file: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1e-1,1e-2,1e-3,1e-4")]
        eps_list: Vec<f64>,
        #[arg(long, default_value_t = 400_000_000)]
        max_iters: usize,
        #[arg(long, default_value = "uniform")]
        start: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Find, certify and classify the equilibria of a linear instance.
    Stability {
        file: PathBuf,
        #[arg(long, default_value_t = 0.02)]
        pitch: f64,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn write_json<T: serde::Serialize>(path: Option<&Path>, value: &T, fallback_stderr: bool) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None if fallback_stderr => eprint!("{text}"),
        None => print!("{text}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    configure_jobs(cli.jobs)?;
    match cli.cmd {
        Command::Validate { file } => {
            let market = load_market(&file)?;
            write_json(None, &validate_report(&market), false)?;
        }
        Command::Simulate { file, mode, schedule, eps, max_iters, start, seed, record_every, out, summary } => {
            let market = load_market(&file)?;
            let cfg = SimulateConfig {
                mode: parse_mode(&mode)?,
                rule: parse_schedule(&schedule)?,
                start: parse_start(&market, &start, seed)?,
                eps,
                max_iters,
                record_every,
            };
            let (traj, report) = simulate(&market, &cfg)?;
            write_trajectory_csv(sink(out.as_deref())?, market.m(), &traj)?;
            write_json(summary.as_deref(), &report, true)?;
        }
        Command::Grid { file, pitch, out } => {
            let market = load_market(&file)?;
            write_grid_csv(sink(out.as_deref())?, &market, pitch)?;
        }
        Command::Rate { file, eps_list, max_iters, start, seed, out, summary } => {
            let market = load_market(&file)?;
            let p0 = parse_start(&market, &start, seed)?;
            let study = rate_study(&market, &eps_list, &p0, max_iters)?;
            write_rate_csv(sink(out.as_deref())?, &study)?;
            write_json(summary.as_deref(), &study, true)?;
        }
        Command::Stability { file, pitch, samples, seed, out } => {
            let market = load_market(&file)?;
            let table = stability_table(&market, pitch, samples, seed)?;
            write_json(out.as_deref(), &table, false)?;
            match table.max_nw_stable {
                None => {
                    eprintln!("no equilibrium found at pitch {pitch}; try a finer pitch");
                    return Ok(ExitCode::from(1));
                }
                Some(false) => {
                    eprintln!("a Nash-welfare-maximising equilibrium was classified unstable");
                    return Ok(ExitCode::from(1));
                }
                Some(true) => {}
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
