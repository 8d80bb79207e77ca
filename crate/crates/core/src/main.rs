use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use ratefair::config::{ExperimentConfig, GridAxis};
use ratefair::experiment::{ablate, export_plots, run, ExperimentError};

#[derive(Parser)]
#[command(name = "ratefair", version, about = "Fair incremental representation learning with rate-reduction objectives")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one experiment.
    Run {
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Run the cross product of config overrides.
    Ablate {
        config: PathBuf,
        /// One axis, as `dotted.path=v1,v2`. Repeatable.
        #[arg(long = "grid")]
        grid: Vec<GridAxis>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Write plot-ready CSV series for a finished run.
    ExportPlots { run_dir: PathBuf },
    /// Parse and validate a config without running it.
    ValidateConfig { config: PathBuf },
}

fn load(path: &Path, output_dir: Option<PathBuf>) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(dir) = output_dir {
        cfg.output_dir = dir;
    }
    Ok(cfg)
}

fn execute(cmd: Command) -> Result<serde_json::Value, ExperimentError> {
    match cmd {
        Command::Run { config, output_dir } => {
            let out = run(&load(&config, output_dir)?)?;
            Ok(json!({ "status": "ok", "run_dir": out.run_dir, "summary": out.report.summary }))
        }
        Command::Ablate {
            config,
            grid,
            output_dir,
        } => {
            let summary = ablate(&load(&config, output_dir)?, &grid)?;
            let failed = summary.failures();
            Ok(json!({
                "status": if failed == 0 { "ok" } else { "partial" },
                "root": summary.root,
                "cells": summary.cells.len(),
                "failed": failed,
            }))
        }
        Command::ExportPlots { run_dir } => {
            let files = export_plots(&run_dir)?;
            Ok(json!({ "status": "ok", "files": files }))
        }
        Command::ValidateConfig { config } => {
            load(&config, None)?.validate()?;
            Ok(json!({ "status": "ok" }))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": "usage", "message": e.to_string() }));
            return ExitCode::from(1);
        }
    };
    match execute(cli.command) {
        Ok(v) => {
            let failed = v.get("failed").and_then(|f| f.as_u64()).unwrap_or(0);
            println!("{v}");
            if failed > 0 {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
