mod arbitrage;
mod backtest;
mod calibrate;
mod inputs;
mod localvol;
mod models;
mod synthetic;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;
use volsurf::Error;

/// Arbitrage-free option surface calibration, local volatility extraction and backtesting.
#[derive(Debug, Parser)]
#[command(name = "volsurf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Calibrate a GP, neural-network or SSVI model to a quote table.
    Calibrate(calibrate::CalibrateArgs),
    /// Extract a local volatility grid from a calibrated model.
    Localvol(localvol::LocalvolArgs),
    /// Reprice quotes under a local volatility grid by Monte Carlo or Crank-Nicolson.
    Backtest(backtest::BacktestArgs),
    /// Write synthetic quotes and curves from a known generator.
    GenSynthetic(synthetic::SyntheticArgs),
    /// Count calendar and butterfly violations of a model over a grid.
    CheckArbitrage(arbitrage::ArbitrageArgs),
}

/// Exit codes: 0 success, 2 bad input, 3 numerical failure.
fn exit_code(e: &Error) -> u8 {
    if e.is_input_error() {
        2
    } else {
        3
    }
}

fn configure_threads() -> volsurf::Result<()> {
    if let Ok(v) = std::env::var("VOLSURF_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::InvalidInput(format!("VOLSURF_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(Error::InvalidInput("VOLSURF_THREADS must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
    }
    Ok(())
}

/// Log lines go to stderr and, once an output directory is known, to `run.log` in it.
struct Tee {
    file: Option<std::fs::File>,
}

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        std::io::stderr().write_all(buf)?;
        if let Some(f) = &mut self.file {
            f.write_all(buf)?;
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        if let Some(f) = &mut self.file {
            f.flush()?;
        }
        std::io::stderr().flush()
    }
}

fn init_logging(out: Option<&Path>) -> volsurf::Result<()> {
    let file = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::fs::File::create(dir.join("run.log"))?)
        }
        None => None,
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Pipe(Box::new(Tee { file })))
        .try_init();
    Ok(())
}

fn run(cli: Cli) -> volsurf::Result<serde_json::Value> {
    configure_threads()?;
    let out: Option<PathBuf> = match &cli.command {
        Command::Calibrate(a) => Some(a.out.clone()),
        Command::Localvol(a) => Some(a.out.clone()),
        Command::Backtest(a) => Some(a.out.clone()),
        Command::GenSynthetic(a) => Some(a.out.clone()),
        Command::CheckArbitrage(a) => a.out.clone(),
    };
    init_logging(out.as_deref())?;
    match cli.command {
        Command::Calibrate(a) => calibrate::run(&a),
        Command::Localvol(a) => localvol::run(&a),
        Command::Backtest(a) => backtest::run(&a),
        Command::GenSynthetic(a) => synthetic::run(&a),
        Command::CheckArbitrage(a) => arbitrage::run(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = exit_code(&e);
            log::error!("{e}");
            println!("{}", json!({ "error": e.kind(), "message": e.to_string(), "exit_code": code }));
            ExitCode::from(code)
        }
    }
}
