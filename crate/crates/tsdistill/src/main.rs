//! Command-line entry point. Exit codes: 0 ok, 2 representation collapse,
//! 64 usage/config, 65 data or checkpoint format, 70 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tsdistill::commands::{cmd_export, cmd_forecast, cmd_pretrain, cmd_probe, cmd_synth, SynthParams};
use tsdistill::config::RunConfig;
use tsdistill::error::Error;

#[derive(Parser)]
#[command(name = "tsdistill", version, about = "Self-distilled time-series representation learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain an encoder on a dataset, writing metrics and checkpoints
    Pretrain {
        /// key=value config file; defaults apply when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// .tsv/.ts/.txt labeled rows or .csv forecast series
        #[arg(long)]
        data: PathBuf,
        /// output directory for metrics.csv and checkpoints
        #[arg(long)]
        out: PathBuf,
        /// continue from a saved checkpoint (config comes from the file)
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a frozen encoder with the matching probe head
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// cls (logistic on pooled features) or fc (ridge on last-step features)
        #[arg(long)]
        task: String,
        /// probe the student weights instead of the EMA teacher
        #[arg(long)]
        student: bool,
    },
    /// Per-horizon forecast metrics against the carry-forward baseline
    Forecast {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// comma-separated horizons, e.g. 24,48
        #[arg(long, value_delimiter = ',', required = true)]
        horizons: Vec<usize>,
    },
    /// Write max-pooled per-series features as CSV
    Export {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate synthetic datasets
    Synth {
        /// cls (labeled TRAIN/TEST pair) or sine (forecast CSV)
        #[arg(long)]
        kind: String,
        /// output path; cls appends _TRAIN.tsv/_TEST.tsv to the stem
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        /// series per split (cls) or series length (sine uses --length)
        #[arg(long, default_value_t = 150)]
        count: usize,
        #[arg(long, default_value_t = 256)]
        length: usize,
        #[arg(long, default_value_t = 0.3)]
        noise: f64,
        #[arg(long, default_value_t = 50.0)]
        period: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig, Error> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    if let Ok(v) = std::env::var("TSDISTILL_SEED") {
        cfg.seed = v.parse().map_err(|_| {
            Error::Config(format!("TSDISTILL_SEED must be an unsigned integer, got {v:?}"))
        })?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Pretrain { config, data, out, resume } => {
            let cfg = load_config(config.as_ref())?;
            cmd_pretrain(cfg, &data, &out, resume.as_deref())?;
        }
        Command::Probe { ckpt, data, task, student } => {
            cmd_probe(&ckpt, &data, &task, student)?;
        }
        Command::Forecast { ckpt, data, horizons } => {
            cmd_forecast(&ckpt, &data, &horizons)?;
        }
        Command::Export { ckpt, data, out } => {
            cmd_export(&ckpt, &data, &out)?;
        }
        Command::Synth { kind, out, classes, count, length, noise, period, seed } => {
            let params = SynthParams { classes, per_split: count, length, noise, period, seed };
            cmd_synth(&kind, &out, &params)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help/version are successful exits; real parse errors are usage errors
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(64) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
