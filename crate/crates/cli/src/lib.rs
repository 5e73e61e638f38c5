//! Benchmark front end: argument parsing, run configuration, the parallel
//! episode runner and report writers behind the `osfsl` binary.

pub mod args;
pub mod commands;
pub mod config;
pub mod run;

use std::ffi::OsString;
use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use commands::Status;
use config::RunConfig;

pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_PARTIAL: u8 = 2;

/// Where a run stopped, which decides the exit code.
#[derive(Debug)]
pub enum Failure {
    /// Rejected before any work started.
    Config(anyhow::Error),
    /// Failed after work started.
    Run(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Run(_) => EXIT_PARTIAL,
        }
    }
}

fn config<T>(r: anyhow::Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Config)
}

fn running<T>(r: anyhow::Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Run)
}

fn report_status(status: Status) {
    if let Status::Partial { failed } = status {
        eprintln!("warning: {failed} method-episode runs failed; see the outcome records");
    }
}

/// Executes one parsed command.
pub fn execute(cli: Cli) -> Result<Status, Failure> {
    match cli.command {
        Command::Bench(a) => {
            let cfg = config(RunConfig::from_args(&a))?;
            let pool = config(cfg.pool.load())?;
            let report = running(commands::compute_bench(&cfg, &pool))?;
            running(commands::write_bench(&cfg, &report))?;
            for s in &report.summaries {
                let cells: Vec<String> = s
                    .metrics
                    .iter()
                    .map(|r| match (r.mean, r.ci95) {
                        (Some(m), Some(c)) => format!("{} {:.4} ± {:.4}", r.metric, m, c),
                        _ => format!("{} n/a", r.metric),
                    })
                    .collect();
                println!("{:<10} {}", s.method, cells.join("  "));
            }
            Ok(report.status())
        }
        Command::SweepB(a) => {
            let cfg = config(RunConfig::from_args(&a.run))?;
            let grid = config(commands::parse_grid(&a.b_grid))?;
            let pool = config(cfg.pool.load())?;
            let report = running(commands::compute_sweep(
                &cfg,
                &pool,
                &grid,
                &commands::IMBALANCE_PRESETS,
            ))?;
            running(commands::write_sweep(&cfg, &report))?;
            for b in report.best.iter().filter(|b| b.metric == "auroc") {
                println!("{:<6} best b for auroc: {} ({:.4})", b.preset, b.b, b.mean);
            }
            Ok(report.status())
        }
        Command::Ablate(a) => {
            let cfg = config(RunConfig::from_args(&a))?;
            if !cfg.methods.contains(&config::MethodName::Eol) {
                return Err(Failure::Config(anyhow::anyhow!(
                    "ablate needs eol among --methods"
                )));
            }
            let pool = config(cfg.pool.load())?;
            let report = running(commands::compute_ablation(
                &cfg,
                &pool,
                &commands::IMBALANCE_PRESETS,
            ))?;
            running(commands::write_ablation(&cfg, &report))?;
            for r in &report.rows {
                let auroc = r
                    .summary
                    .mean("auroc")
                    .map_or("n/a".into(), |m| format!("{m:.4}"));
                println!(
                    "{:<6} eta={:<5} delta={:<5} auroc {auroc}",
                    r.preset, r.eta, r.delta
                );
            }
            Ok(report.status())
        }
        Command::GenSynthetic(a) => {
            let fs = config(commands::gen_synthetic(&a))?;
            println!(
                "wrote {} samples of dimension {} to {}",
                fs.len(),
                fs.dim(),
                a.out.display()
            );
            Ok(Status::Complete)
        }
        Command::CheckGrad(a) => {
            if a.trials < 1 {
                return Err(Failure::Config(anyhow::anyhow!(
                    "--trials must be at least 1"
                )));
            }
            let r = running(commands::check_grad(&a))?;
            println!(
                "{} episodes, {} checks, worst relative error: prototypes {:.3e}, eta {:.3e}, delta {:.3e}",
                r.episodes, r.checks, r.worst_prototypes, r.worst_eta, r.worst_delta
            );
            if r.passed() {
                println!("PASS (tolerance {:e})", r.tolerance);
                Ok(Status::Complete)
            } else {
                for f in &r.failures {
                    println!(
                        "FAIL {} D={} case {} eta={} delta={}: block {} error {:.3e}",
                        f.method, f.dim, f.case, f.eta, f.delta, f.block, f.error
                    );
                }
                Ok(Status::Partial {
                    failed: r.failures.len(),
                })
            }
        }
    }
}

/// Full entry point: config-file expansion, parsing, execution, exit code.
pub fn main_with_args(argv: Vec<OsString>) -> ExitCode {
    let argv = match config::expand_config_file(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(EXIT_CONFIG);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match execute(cli) {
        Ok(Status::Complete) => ExitCode::SUCCESS,
        Ok(status) => {
            report_status(status);
            ExitCode::from(EXIT_PARTIAL)
        }
        Err(f) => {
            let (Failure::Config(e) | Failure::Run(e)) = &f;
            eprintln!("error: {e:#}");
            ExitCode::from(f.code())
        }
    }
}
