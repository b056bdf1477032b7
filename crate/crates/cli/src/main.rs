//! `spinbus` command-line driver.

mod config;
mod run;
mod table;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use config::SweepConfig;
use run::Command;
use table::Table;

#[derive(Parser)]
#[command(
    name = "spinbus",
    version,
    about = "Noisy spin-chain entangling-bus sweeps"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Configuration file (`key = value` lines); defaults apply without it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Worker threads; overrides `run.workers`.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Single-qubit channel metrics over the grid.
    ChannelSweep,
    /// Two-qubit gate metrics over the grid.
    GateSweep,
    /// κ_f and κ_c per chain length.
    Thresholds,
    /// Fit an analytic noise model per chain length.
    Fit,
    /// Packet-model estimate of κ_c.
    PacketModel,
    /// Graph-state fidelity for cluster and GHZ graphs.
    GraphGen,
    /// Print the effective configuration.
    ShowConfig,
}

#[derive(ValueEnum, Clone, Copy, PartialEq, Eq)]
enum Format {
    Csv,
    Json,
}

fn load(cli: &Cli) -> Result<SweepConfig, String> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            SweepConfig::parse(&text).map_err(|e| format!("{}: {e}", path.display()))?
        }
        None => SweepConfig::default(),
    };
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn metadata(cmd: Command, cfg: &SweepConfig, table: &Table) -> serde_json::Value {
    json!({
        "command": cmd.name(),
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg.to_map(),
        "integrator": { "rtol": cfg.rtol, "atol": cfg.atol },
        "columns": table.columns,
        "rows": table.rows.len(),
        "failures": table.failures,
    })
}

fn write_outputs(
    dir: &Path,
    cmd: Command,
    cfg: &SweepConfig,
    table: &Table,
    format: Format,
) -> Result<(), String> {
    fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    let mut meta = metadata(cmd, cfg, table);
    let json_path = match format {
        Format::Csv => {
            let path = dir.join(format!("{}.csv", cmd.name()));
            let file = fs::File::create(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            table
                .write_csv(file)
                .map_err(|e| format!("{}: {e}", path.display()))?;
            dir.join(format!("{}.meta.json", cmd.name()))
        }
        Format::Json => {
            meta["records"] = table.records_json();
            dir.join(format!("{}.json", cmd.name()))
        }
    };
    let text = serde_json::to_string_pretty(&meta).map_err(|e| e.to_string())?;
    fs::write(&json_path, text + "\n").map_err(|e| format!("{}: {e}", json_path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Error
        })
        .init();

    let cfg = match load(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let cmd = match cli.command {
        Cmd::ShowConfig => {
            print!("{}", cfg.emit());
            return ExitCode::SUCCESS;
        }
        Cmd::ChannelSweep => Command::ChannelSweep,
        Cmd::GateSweep => Command::GateSweep,
        Cmd::Thresholds => Command::Thresholds,
        Cmd::Fit => Command::Fit,
        Cmd::PacketModel => Command::PacketModel,
        Cmd::GraphGen => Command::GraphGen,
    };
    let mut cfg = cfg;
    run::apply_command(cmd, &mut cfg);
    let table = match run::run(cmd, &cfg, cfg.workers) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    if let Err(e) = write_outputs(&cli.out, cmd, &cfg, &table, cli.format) {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    for f in &table.failures {
        eprintln!("failed: {}: {}", f.point, f.error);
    }
    if table.failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    }
}
