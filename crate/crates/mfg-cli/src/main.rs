use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mfg_fd::config::{parse_bench_config, parse_config};
use mfg_fd::registry::entries;
use mfg_fd::run::{exit_code, run, run_bench};

#[derive(Parser)]
#[command(name = "mfg", version, about = "Finite-difference mean field game solvers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a configured problem and write fields, report and turnpike curve.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory, overriding the config's `out`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Benchmarks.
    Bench {
        #[command(subcommand)]
        kind: BenchKind,
    },
    /// Print the registered problems with their defaults.
    ListProblems,
}

#[derive(Subcommand)]
enum BenchKind {
    /// Krylov iteration counts with the multigrid preconditioner.
    Multigrid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn fail(e: mfg_fd::Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(exit_code(&e) as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, out } => {
            let cfg = match parse_config(&config) {
                Ok(c) => c,
                Err(mfg_fd::Error::Io(e)) => return fail(mfg_fd::Error::Config(format!("{}: {e}", config.display()))),
                Err(e) => return fail(e),
            };
            match run(&cfg, out.as_deref()) {
                Ok(s) => {
                    println!("wrote {}", s.out.display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Bench { kind: BenchKind::Multigrid { config, out } } => {
            let text = match std::fs::read_to_string(&config) {
                Ok(t) => t,
                Err(e) => return fail(mfg_fd::Error::Config(format!("{}: {e}", config.display()))),
            };
            match parse_bench_config(&text).and_then(|c| run_bench(&c, out.as_deref())) {
                Ok(p) => {
                    println!("wrote {}", p.display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::ListProblems => {
            for e in entries() {
                match e.defaults {
                    Some(d) => println!(
                        "{:<24} dim={} n={} nt={} nu={} T={}  {}",
                        e.name, d.dim, d.n, d.nt, d.nu, d.horizon, e.summary
                    ),
                    None => println!("{:<24} {}", e.name, e.summary),
                }
            }
            ExitCode::SUCCESS
        }
    }
}
