use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, ValueEnum};
use spi_core::harness::{run, RunConfig, Subcommand};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    Diagrams,
    Propagate,
    Green,
    Fubini,
    Coords,
    Divergences,
    StphaseOracle,
}

impl From<Command> for Subcommand {
    fn from(c: Command) -> Subcommand {
        match c {
            Command::Diagrams => Subcommand::Diagrams,
            Command::Propagate => Subcommand::Propagate,
            Command::Green => Subcommand::Green,
            Command::Fubini => Subcommand::Fubini,
            Command::Coords => Subcommand::Coords,
            Command::Divergences => Subcommand::Divergences,
            Command::StphaseOracle => Subcommand::StphaseOracle,
        }
    }
}

/// Formal semiclassical path integrals: series, Green's functions and
/// theorem checks.
#[derive(Debug, Parser)]
#[command(name = "spi", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the result document here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override `compute.loop_order`.
    #[arg(long)]
    max_order: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let mut cfg = match &cli.config {
        Some(path) => match RunConfig::load(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("spi: {e}");
                return ExitCode::from(e.exit_code() as u8);
            }
        },
        None if matches!(cli.command, Command::Diagrams) => RunConfig::default(),
        None => {
            eprintln!("spi: --config is required for this subcommand");
            return ExitCode::from(2);
        }
    };
    if let Some(m) = cli.max_order {
        cfg.compute.loop_order = m;
        if let Err(e) = cfg.validate() {
            eprintln!("spi: {e}");
            return ExitCode::from(2);
        }
    }
    let base = cli
        .config
        .as_ref()
        .and_then(|p| p.parent().map(|d| d.to_path_buf()))
        .unwrap_or_else(|| PathBuf::from("."));
    let started = Instant::now();
    let output = match run(&cfg, cli.command.into(), &base) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("spi: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    eprintln!("spi: {:?} finished in {:.3} s", cli.command, started.elapsed().as_secs_f64());
    let target = cli.out.or_else(|| cfg.output.path.as_ref().map(|p| base.join(p)));
    match target {
        Some(path) => {
            if let Err(e) = std::fs::write(&path, &output.document) {
                eprintln!("spi: {}: {e}", path.display());
                return ExitCode::from(2);
            }
        }
        None => print!("{}", output.document),
    }
    if output.passed {
        ExitCode::SUCCESS
    } else {
        eprintln!("spi: check failed");
        ExitCode::from(1)
    }
}
