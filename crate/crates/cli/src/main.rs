// SPDX-License-Identifier: Apache-2.0

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context as _, Result};
use clap::{Args, Parser, Subcommand};

use ctmsim::harness::{self, Context, ExperimentConfig, Table};
use ctmsim::par::Execution;

/// Device-aware inference experiments for analog crossbar networks.
///
/// The dataset root comes from `$CTMSIM_DATA_DIR`, then the config's
/// `data_dir`, then `./data`.
#[derive(Parser)]
#[command(name = "ctmsim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network with the config's [train] section and write a bundle;
    /// the CSV is the per-epoch log.
    Train(Common),
    /// Per-image predictions of the first bundle under the [infer] settings.
    Infer(Common),
    /// Accuracy against read noise ([noise] section).
    SweepNoise(Common),
    /// Accuracy against device age ([drift] section).
    SweepDrift(Common),
    /// Accuracy against ADC/DAC resolution ([adc] section).
    SweepAdc(Common),
    /// Device-current histograms of one layer ([snapshot] section).
    SnapshotDist(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Use this single seed instead of the config's list.
    #[arg(long)]
    seed: Option<u64>,
    /// Evaluate on the first N test images.
    #[arg(long)]
    limit: Option<usize>,
    /// Output CSV; a `-summary.csv` file is written next to it for sweeps.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run on the calling thread only.
    #[arg(long)]
    sequential: bool,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf, Execution)> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(l) = self.limit {
            cfg.limit = Some(l);
        }
        let out = match (&self.out, &cfg.out) {
            (Some(o), _) => o.clone(),
            (None, Some(o)) => cfg.resolve(o),
            (None, None) => bail!("no output path: pass --out or set `out` in the config"),
        };
        let exec = if self.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        };
        Ok((cfg, out, exec))
    }
}

fn save<R: serde::Serialize>(table: &Table<R>, out: &Path) -> Result<()> {
    table.save(out)?;
    eprintln!("wrote {} rows to {}", table.rows.len(), out.display());
    for (k, s) in &table.summary {
        eprintln!(
            "  {}: {:.4} ± {:.4} (n={})",
            k.join(" "),
            s.mean,
            s.std,
            s.n
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => {
            let (cfg, out, _) = c.load()?;
            let seed = cfg.seeds[0];
            let (_, log) = harness::run_training(&cfg, seed, |e| {
                let test = e
                    .test_acc
                    .map_or(String::new(), |a| format!(" test_acc {a:.4}"));
                eprintln!(
                    "epoch {} loss {:.4} train_acc {:.4}{test}",
                    e.epoch, e.train_loss, e.train_acc
                );
            })?;
            save(&log, &out)
        }
        Command::Infer(c) => {
            let (cfg, out, exec) = c.load()?;
            let section = cfg.section(&cfg.infer, "infer")?.clone();
            let ctx = Context::from_config(&cfg, exec)?;
            save(
                &harness::infer(&harness::load_models(&cfg)?, &ctx, &section)?,
                &out,
            )
        }
        Command::SweepNoise(c) => {
            let (cfg, out, exec) = c.load()?;
            let sweep = cfg.section(&cfg.noise, "noise")?.clone();
            let ctx = Context::from_config(&cfg, exec)?;
            save(
                &harness::sweep_noise(&harness::load_models(&cfg)?, &ctx, &sweep)?,
                &out,
            )
        }
        Command::SweepDrift(c) => {
            let (cfg, out, exec) = c.load()?;
            let sweep = cfg.section(&cfg.drift, "drift")?.clone();
            let ctx = Context::from_config(&cfg, exec)?;
            save(
                &harness::sweep_drift(&harness::load_models(&cfg)?, &ctx, &sweep)?,
                &out,
            )
        }
        Command::SweepAdc(c) => {
            let (cfg, out, exec) = c.load()?;
            let sweep = cfg.section(&cfg.adc, "adc")?.clone();
            let ctx = Context::from_config(&cfg, exec)?;
            save(
                &harness::sweep_adc(&harness::load_models(&cfg)?, &ctx, &sweep)?,
                &out,
            )
        }
        Command::SnapshotDist(c) => {
            let (cfg, out, exec) = c.load()?;
            let section = cfg.section(&cfg.snapshot, "snapshot")?.clone();
            let ctx = Context::from_config(&cfg, exec)?;
            let models = harness::load_models(&cfg)?;
            save(
                &harness::snapshot_weight_distribution(&models, &ctx, &section)?,
                &out,
            )
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()).context("ctmsim failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
