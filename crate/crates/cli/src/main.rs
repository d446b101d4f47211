use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use smd_cli::commands::{cmd_metrics, cmd_sample, cmd_theorem_demo, cmd_train, gmm_check, VERSION};
use smd_cli::config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "smd", version = VERSION, about = "Diffusion experiments on Gaussian-mixture data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; omitted fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sets `seed`, `train.seed` and `sample.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Override a config field by dotted path, e.g. `train.n_eta=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Model checkpoint (input for sample/metrics, resume point for train).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::resolve(self.config.as_deref(), &self.overrides, self.seed)
    }

    fn out(&self) -> Result<PathBuf> {
        self.out.clone().context("--out is required for this command")
    }

    fn checkpoint(&self) -> Result<PathBuf> {
        self.checkpoint.clone().context("--checkpoint is required for this command")
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the Gaussian-algebra and posterior oracle checks.
    GmmCheck(Common),
    /// Train a denoiser.
    Train(Common),
    /// Draw samples from a checkpoint.
    Sample(Common),
    /// Estimate denoising errors and sample-quality metrics.
    Metrics(Common),
    /// Tabulate the local-error lower bound against Monte-Carlo estimates.
    TheoremDemo(Common),
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GmmCheck(c) => {
            let cfg = c.config()?;
            let results = gmm_check(&cfg, c.out.as_deref())?;
            for r in &results {
                println!("{} {} max_err={:.3e} tol={:.1e}", if r.pass { "PASS" } else { "FAIL" }, r.name, r.max_err, r.tol);
            }
            Ok(results.iter().all(|r| r.pass))
        }
        Command::Train(c) => {
            let (cfg, out) = (c.config()?, c.out()?);
            let outcome = cmd_train(&cfg, &out, c.checkpoint.as_deref())?;
            if let Some(p) = outcome.trace.points.last() {
                println!("step {} loss {:.5} ({:.1} s)", p.step, p.loss, p.wall_ms / 1e3);
            }
            println!("best step {}; checkpoint {}", outcome.best_step, outcome.final_checkpoint.display());
            Ok(true)
        }
        Command::Sample(c) => {
            let (cfg, out) = (c.config()?, c.out()?);
            let n = cmd_sample(&cfg, &c.checkpoint()?, &out)?;
            println!("wrote {n} samples to {}", out.join("samples.csv").display());
            Ok(true)
        }
        Command::Metrics(c) => {
            let (cfg, out) = (c.config()?, c.out()?);
            let r = cmd_metrics(&cfg, &c.checkpoint()?, &out)?;
            println!(
                "E = {:.4} ± {:.4}  mode_recall = {:.3}  mean_nll = {:.4}",
                r.e_global.mean, r.e_global.std_err, r.mode_recall, r.mean_nll
            );
            Ok(true)
        }
        Command::TheoremDemo(c) => {
            let (cfg, out) = (c.config()?, c.out()?);
            for r in cmd_theorem_demo(&cfg, &out)? {
                println!("lambda={} bound={:.6} mc={:.6} ± {:.6}", r.lambda, r.bound, r.mc_m_t, r.mc_se);
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
