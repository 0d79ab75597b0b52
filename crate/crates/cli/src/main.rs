use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use coact_core::pipeline::{self, PipelineConfig};
use coact_core::Result;

/// Exit status for malformed command lines.
const USAGE_EXIT: u8 = 64;

/// Collective mobility anomaly detection: simulate a world, pretrain the
/// model, calibrate, score and evaluate.
#[derive(Parser, Debug)]
#[command(name = "coact", version)]
struct Cli {
    /// TOML pipeline configuration. Defaults apply when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override a configuration key, e.g. `--set model.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Log level filter (error, warn, info, debug).
    #[arg(long, default_value = "info", global = true)]
    log_level: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic world with injected anomalies.
    Simulate,
    /// Pretrain on the training period, resuming from an existing checkpoint.
    Pretrain,
    /// Fit percentile references on the validation period.
    Calibrate,
    /// Score every test-period event and agent.
    Score,
    /// Compute detection and link-prediction metrics.
    Evaluate {
        /// Aggregate the metrics of these already-evaluated report
        /// directories instead of evaluating the configured run.
        #[arg(long, num_args = 1..)]
        runs: Vec<PathBuf>,
    },
    /// Export histogram and ROC/PR points for plotting.
    Report,
    /// Print the resolved configuration as TOML.
    Config,
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = PipelineConfig::load(
        cli.config.as_deref(),
        |k| std::env::var(k).ok(),
        &cli.overrides,
    )?;
    match &cli.command {
        Command::Simulate => pipeline::simulate(&cfg).map(drop),
        Command::Pretrain => pipeline::pretrain_stage(&cfg).map(drop),
        Command::Calibrate => pipeline::calibrate_stage(&cfg).map(drop),
        Command::Score => pipeline::score_stage(&cfg).map(drop),
        Command::Evaluate { runs } if runs.is_empty() => pipeline::evaluate_stage(&cfg).map(drop),
        Command::Evaluate { runs } => pipeline::aggregate_stage(&cfg, runs).map(drop),
        Command::Report => pipeline::report_stage(&cfg).map(drop),
        Command::Config => {
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { USAGE_EXIT } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format(|buf, rec| writeln!(buf, "level={} {}", rec.level().as_str().to_lowercase(), rec.args()))
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("error_kind={} message={:?}", e.exit_code(), e.to_string());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
