use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use htsfem::config::parse_config;
use htsfem::run::{run, RunSettings};
use htsfem::RunError;

#[derive(Parser)]
#[command(name = "htsfem", version, about = "Transient H-formulation simulations of superconductors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file.
    Run {
        config: PathBuf,
        /// Build the mesh and space, report sizes, and stop.
        #[arg(long)]
        dry_run: bool,
        /// Output directory (overrides the scenario's).
        #[arg(long, short)]
        output: Option<PathBuf>,
        /// Threads for the direct solver.
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long, default_value = "info")]
        log_level: log::LevelFilter,
    },
}

fn main() -> ExitCode {
    let Command::Run { config, dry_run, output, threads, log_level } = Cli::parse().command;
    env_logger::Builder::new().filter_level(log_level).format_timestamp_millis().init();
    let result = parse_config(&config).map_err(RunError::from).and_then(|cfg| {
        let settings = RunSettings { output, dry_run, threads };
        run(&cfg, &settings)
    });
    match result {
        Ok(summary) => {
            let s = &summary.stats;
            log::info!(
                "cells={} hts_cells={} dofs={} free={} dirichlet={} hanging={}",
                s.cells,
                s.hts_cells,
                s.dofs,
                s.free_dofs,
                s.dirichlet_dofs,
                s.hanging_dofs
            );
            if let Some(sim) = &summary.simulation {
                let l = &sim.losses;
                if let Some(q) = l.q_je {
                    log::info!("Q_JE = {q:.6e}");
                }
                if let Some(q) = l.q_mh {
                    log::info!("Q_MH = {q:.6e}");
                }
                log::info!("{} steps in {:.1} s", sim.series.steps.len(), sim.wall_seconds);
            }
            log::info!("results in {}", summary.output_dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
