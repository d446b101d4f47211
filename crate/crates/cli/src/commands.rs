use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::json;

use smd_core::denoiser::Model;
use smd_core::forward::NoiseSchedule;
use smd_core::metrics::{
    global_error_e, mode_metrics, mt_csv, theorem1_demo, theorem_csv, MetricReport, ModelKernel,
};
use smd_core::rng::{seeded, substream};
use smd_core::sampling::sample_chain;
use smd_core::training::{train, LossTrace};

use crate::checks::{run_checks, CheckResult};
use crate::config::ExperimentConfig;

pub const VERSION: &str = env!("SMD_VERSION");

/// Written into every output directory: the resolved config (usable as
/// `--config`) and run metadata.
pub fn write_echo(out: &Path, command: &str, cfg: &ExperimentConfig, extra: serde_json::Value) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    let meta = json!({
        "version": VERSION,
        "command": command,
        "seed": cfg.seed,
        "sigma_mode": cfg.schedule.sigma_mode,
        "noise_scale": cfg.sample.noise,
        "details": extra,
    });
    fs::write(out.join("run.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn gmm_check(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<CheckResult>> {
    let results = run_checks(cfg.seed)?;
    if let Some(dir) = out {
        write_echo(dir, "gmm-check", cfg, json!({}))?;
        fs::write(dir.join("checks.json"), serde_json::to_string_pretty(&results)?)?;
    }
    Ok(results)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub trace: LossTrace,
    pub best_step: usize,
    pub final_checkpoint: PathBuf,
}

/// Train from scratch, or continue from `resume`. Checkpoints land at
/// `ckpt_<step>.smd` every `eval_every` steps, with `last.smd` and
/// `best.smd` (lowest windowed loss) alongside.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    let data = cfg.data_mixture()?;
    let s = cfg.schedule_obj()?;
    let mut model = match resume {
        Some(p) => {
            let m = Model::load(p).with_context(|| format!("loading {}", p.display()))?;
            if m.config() != &cfg.denoiser_config()? {
                bail!("checkpoint architecture differs from the config's model section");
            }
            m
        }
        None => Model::new(cfg.denoiser_config()?, &mut substream(cfg.seed, &[0xD1]))?,
    };
    write_echo(out, "train", cfg, json!({ "resumed_from": resume.map(|p| p.display().to_string()), "model": model.kind() }))?;
    let mut best = (f64::INFINITY, 0usize);
    let mut csv = String::from("step,loss,wall_ms\n");
    let trace = train(&mut model, &data, &s, &cfg.train, |m, p| {
        let path = out.join(format!("ckpt_{}.smd", p.step));
        m.save(&path)?;
        if p.loss < best.0 {
            best = (p.loss, p.step);
            m.save(&out.join("best.smd"))?;
        }
        csv.push_str(&format!("{},{},{:.3}\n", p.step, p.loss, p.wall_ms));
        fs::write(out.join("loss.csv"), &csv)?;
        Ok(())
    })?;
    let last = out.join("last.smd");
    model.save(&last)?;
    if trace.points.is_empty() {
        fs::write(out.join("loss.csv"), &csv)?;
    }
    Ok(TrainOutcome { trace, best_step: best.1, final_checkpoint: last })
}

fn load_for(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<(Model, NoiseSchedule)> {
    let model = Model::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let s = cfg.schedule_obj()?;
    if model.config().total_steps != s.len() {
        bail!("checkpoint was trained for T = {}, config has T = {}", model.config().total_steps, s.len());
    }
    if model.dim() != cfg.data_mixture()?.dim() {
        bail!("checkpoint dimension {} does not match data", model.dim());
    }
    Ok((model, s))
}

pub fn cmd_sample(cfg: &ExperimentConfig, checkpoint: &Path, out: &Path) -> Result<usize> {
    let (model, s) = load_for(cfg, checkpoint)?;
    let output = sample_chain(&model, &cfg.sample, &s)?;
    write_echo(
        out,
        "sample",
        cfg,
        json!({ "checkpoint": checkpoint.display().to_string(), "model": model.kind(), "steps": output.steps }),
    )?;
    fs::write(out.join("samples.csv"), output.samples_csv())?;
    if let Some(t) = output.trajectories_csv() {
        fs::write(out.join("trajectories.csv"), t)?;
    }
    Ok(output.samples.len())
}

pub fn cmd_metrics(cfg: &ExperimentConfig, checkpoint: &Path, out: &Path) -> Result<MetricReport> {
    let (model, s) = load_for(cfg, checkpoint)?;
    let data = cfg.data_mixture()?;
    let kernel = ModelKernel { model: &model, noise: cfg.sample.noise };
    let mut rng = seeded(cfg.seed);
    let (e, rows) = global_error_e(&data, &kernel, &s, cfg.metrics.n_outer, cfg.metrics.n_inner, &mut rng)?;
    let samples = sample_chain(&model, &cfg.sample, &s)?;
    let mm = mode_metrics(&samples.samples, &data)?;
    let report = MetricReport {
        m_t: rows,
        e_global: e,
        mode_recall: mm.mode_recall,
        mean_nll: mm.mean_nll,
        metadata: json!({
            "version": VERSION,
            "checkpoint": checkpoint.display().to_string(),
            "model": model.kind(),
            "sigma_mode": cfg.schedule.sigma_mode,
            "noise_scale": cfg.sample.noise,
            "n_outer": cfg.metrics.n_outer,
            "n_inner": cfg.metrics.n_inner,
            "mean_nll_se": mm.nll_se,
            "note": "errors are evaluated at the given checkpoint and upper-bound the infimum over parameters",
        }),
    };
    write_echo(out, "metrics", cfg, json!({ "checkpoint": checkpoint.display().to_string() }))?;
    fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&report)?)?;
    fs::write(out.join("m_t.csv"), mt_csv(&report.m_t))?;
    Ok(report)
}

pub fn cmd_theorem_demo(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<smd_core::metrics::TheoremRow>> {
    let th = &cfg.theorem;
    let s = NoiseSchedule::from_betas(th.betas.clone(), cfg.schedule.sigma_mode)?;
    let rows = theorem1_demo(&th.construction(), &s, th.n_outer, th.n_inner, &mut seeded(cfg.seed))?;
    write_echo(out, "theorem-demo", cfg, json!({}))?;
    fs::write(out.join("theorem.csv"), theorem_csv(&rows))?;
    Ok(rows)
}
