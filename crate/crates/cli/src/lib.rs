//! Command-line front end for the `bhct` workflow.
//!
//! Every subcommand takes `--config <path>` (JSON with a `"version"` field)
//! and `--out <dir>`; `--seed` overrides the seeds found in the config.

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod pipeline;

#[derive(Debug, Parser)]
#[command(
    name = "bhct",
    version,
    about = "Beam-hardening correction and sparse-view CT toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Common {
    /// JSON config file.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides every seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom image and PGM preview.
    Phantom(Common),
    /// Simulate beam-hardened, ideal and thickness sinograms.
    Scan(Common),
    /// Train the parameter-estimation network on synthetic data.
    BhcTrain(Common),
    /// Estimate model parameters from a scan and fit the linearization.
    BhcFit(Common),
    /// Apply a fitted linearization to a sinogram.
    BhcApply(Common),
    /// Reconstruct with FBP or SIRT.
    Recon(Common),
    /// Train the denoiser on a manifest of image pairs.
    DnTrain(Common),
    /// Denoise an image.
    DnApply(Common),
    /// Run the whole workflow into a run directory.
    Pipeline(Common),
    /// Compare an image against a reference.
    Eval(Common),
}

type Handler = fn(&std::path::Path, &std::path::Path, Option<u64>) -> Result<()>;

pub fn run(cli: Cli) -> Result<()> {
    use Command::*;
    let (f, c): (Handler, Common) = match cli.command {
        Phantom(c) => (commands::phantom, c),
        Scan(c) => (commands::scan, c),
        BhcTrain(c) => (commands::bhc_train, c),
        BhcFit(c) => (commands::bhc_fit, c),
        BhcApply(c) => (commands::bhc_apply, c),
        Recon(c) => (commands::recon, c),
        DnTrain(c) => (commands::dn_train, c),
        DnApply(c) => (commands::dn_apply, c),
        Pipeline(c) => (run_pipeline_command, c),
        Eval(c) => (commands::eval, c),
    };
    f(&c.config, &c.out, c.seed)
}

/// `pipeline` subcommand: loads the config and runs [`pipeline::run_pipeline`].
pub fn run_pipeline_command(
    config_path: &std::path::Path,
    out: &std::path::Path,
    seed: Option<u64>,
) -> Result<()> {
    let mut cfg: config::PipelineConfig = config::load(config_path)?;
    if let Some(s) = seed {
        cfg.override_seed(s);
    }
    let base = config_path
        .parent()
        .unwrap_or_else(|| std::path::Path::new("."));
    pipeline::run_pipeline(&cfg, base, out)?;
    Ok(())
}
