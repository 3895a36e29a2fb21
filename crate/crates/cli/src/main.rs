//! `lphom`: phantom data, latent diffusion training, sampling and evaluation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lphom_core::config::RunConfig;
use lphom_core::pipeline;
use lphom_core::Error;

#[derive(Parser, Debug)]
#[command(name = "lphom", version, about = "Conditional latent diffusion on procedural brain phantoms")]
struct Cli {
    /// `key = value` run configuration; missing keys take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Run directory (overrides the config).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the phantom dataset and its manifest.
    GenData {
        /// Multiplier on the reference per-cell counts.
        #[arg(long)]
        scale: Option<f64>,
    },
    /// Train the image autoencoder.
    TrainVae,
    /// Train the conditional latent denoiser with the autoencoder frozen.
    TrainLdm,
    /// Sample every cell and write the 4x5 grid.
    SampleGrid,
    /// FID, MS-SSIM and condition-match reports.
    Eval,
    /// Condition-match report for held-out cells only.
    Extrapolate,
    /// Print the effective configuration.
    ShowConfig,
}

fn config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Command::GenData { scale: Some(scale) } = cli.command {
        cfg.scale = scale;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = config(cli)?;
    let log = |msg: &str| println!("{msg}");
    match cli.command {
        Command::GenData { .. } => {
            pipeline::gen_data(&cfg, &log)?;
        }
        Command::TrainVae => {
            pipeline::train_vae_stage(&cfg, &log)?;
        }
        Command::TrainLdm => {
            pipeline::train_ldm_stage(&cfg, &log)?;
        }
        Command::SampleGrid => {
            pipeline::sample_grid_stage(&cfg, &log)?;
        }
        Command::Eval | Command::Extrapolate => {
            let held_out_only = matches!(cli.command, Command::Extrapolate);
            let report = pipeline::evaluate(&cfg, held_out_only, &log)?;
            if let Some(rate) = report.realism_pass_rate() {
                println!("realism ordering holds in {:.0}% of trained cells", rate * 100.0);
            }
            if let Some(rate) = report.pooled_match(&cfg.held_out) {
                println!("held-out condition match rate: {:.3}", rate);
            }
            println!("reports written to {}", cfg.out.display());
        }
        Command::ShowConfig => print!("{}", cfg.to_text()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("invalid arguments").trim());
            return ExitCode::from(1);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
