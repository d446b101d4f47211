//! Ancestral sampling for trained denoisers.
//!
//! Chain `i` draws its initial state and per-step noise from
//! `substream(seed, [i, 0])` and its latent drivers from
//! `substream(seed, [i, 1])`, so a soft mixture model with vanishing
//! modulation reproduces the plain model's chains exactly.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::denoiser::{mean_from_eps, Model};
use crate::error::{Error, Result};
use crate::forward::{strided_steps, NoiseSchedule};
use crate::rng::{normal_dvector, substream, SmdRng};

/// Chains advanced together in one batched network call.
const BLOCK: usize = 512;

/// Scale of the additive noise in a backward step, given the schedule's
/// `σ_t` table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScale {
    /// `√σ_t · ε`, treating `σ_t` as the step variance.
    #[default]
    SqrtSigma,
    /// `σ_t · ε`.
    Sigma,
}

impl NoiseScale {
    pub fn std(self, sigma: f64) -> f64 {
        match self {
            NoiseScale::SqrtSigma => sigma.sqrt(),
            NoiseScale::Sigma => sigma,
        }
    }

    /// Variance of the backward step implied by this reading.
    pub fn variance(self, sigma: f64) -> f64 {
        self.std(sigma).powi(2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleRun {
    pub n: usize,
    pub keep_trajectory: bool,
    pub seed: u64,
    /// Backward steps actually taken; evenly strided out of the schedule.
    pub t_used: Option<usize>,
    pub noise: NoiseScale,
}

impl Default for SampleRun {
    fn default() -> Self {
        Self { n: 2000, keep_trajectory: false, seed: 0, t_used: None, noise: NoiseScale::SqrtSigma }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SampleOutput {
    pub samples: Vec<DVector<f64>>,
    /// Per chain: `x_T` followed by the state after each step.
    pub trajectories: Option<Vec<Vec<DVector<f64>>>>,
    /// Model timesteps visited, from high to low.
    pub steps: Vec<usize>,
}

impl SampleOutput {
    /// One row per sample: index then coordinates.
    pub fn samples_csv(&self) -> String {
        let d = self.samples.first().map_or(0, |x| x.len());
        let mut out = String::from("index");
        for k in 0..d {
            out.push_str(&format!(",x{k}"));
        }
        out.push('\n');
        for (i, x) in self.samples.iter().enumerate() {
            out.push_str(&i.to_string());
            for v in x.iter() {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    /// Long format: chain, step, coordinates. Step `T` is the initial state.
    pub fn trajectories_csv(&self) -> Option<String> {
        let trajs = self.trajectories.as_ref()?;
        let d = self.samples.first().map_or(0, |x| x.len());
        let mut out = String::from("chain,step");
        for k in 0..d {
            out.push_str(&format!(",x{k}"));
        }
        out.push('\n');
        let mut labels = self.steps.clone();
        labels.push(0);
        for (c, traj) in trajs.iter().enumerate() {
            for (x, step) in traj.iter().zip(&labels) {
                out.push_str(&format!("{c},{step}"));
                for v in x.iter() {
                    out.push_str(&format!(",{v}"));
                }
                out.push('\n');
            }
        }
        Some(out)
    }
}

fn predict_eps(model: &Model, x: &DVector<f64>, t: usize, latent_rng: &mut SmdRng) -> Result<DVector<f64>> {
    match model {
        Model::Vanilla(d) => crate::denoiser::predict_eps_vanilla(d, x, t),
        Model::Smd(d) => {
            let eta = normal_dvector(latent_rng, d.latent_dim);
            crate::denoiser::predict_eps_smd(d, x, t, &eta)
        }
    }
}

/// One backward step `x_t → x_{t-1}`; no noise is added at `t = 1`. For the
/// soft mixture model a fresh `η` is drawn from `latent_rng`.
pub fn denoise_step(
    model: &Model,
    x_t: &DVector<f64>,
    t: usize,
    s: &NoiseSchedule,
    noise_rng: &mut SmdRng,
    latent_rng: &mut SmdRng,
    noise: NoiseScale,
) -> Result<DVector<f64>> {
    s.check_step(t)?;
    let eps_hat = predict_eps(model, x_t, s.model_step(t), latent_rng)?;
    let mean = mean_from_eps(x_t, t, &eps_hat, s)?;
    if t == 1 {
        return Ok(mean);
    }
    Ok(mean + normal_dvector(noise_rng, x_t.len()) * noise.std(s.sigma(t)))
}

/// Schedule actually walked by a run with `t_used` steps.
pub fn schedule_for_run(s: &NoiseSchedule, t_used: Option<usize>) -> Result<NoiseSchedule> {
    match t_used {
        None => Ok(s.clone()),
        Some(n) if n == s.len() => Ok(s.clone()),
        Some(n) => s.respace(&strided_steps(s.len(), n)?),
    }
}

/// Run `run.n` independent chains from `N(0, I)` down the (possibly
/// strided) schedule.
pub fn sample_chain(model: &Model, run: &SampleRun, s: &NoiseSchedule) -> Result<SampleOutput> {
    if run.n == 0 {
        return Err(Error::InvalidArgument("sample count must be >= 1".into()));
    }
    let sched = schedule_for_run(s, run.t_used)?;
    let d = model.dim();
    let big_t = sched.len();
    let mut out = SampleOutput {
        samples: Vec::with_capacity(run.n),
        trajectories: run.keep_trajectory.then(Vec::new),
        steps: (1..=big_t).rev().map(|t| sched.model_step(t)).collect(),
    };
    for start in (0..run.n).step_by(BLOCK) {
        let end = (start + BLOCK).min(run.n);
        let b = end - start;
        let mut noise_rngs: Vec<SmdRng> = (start..end).map(|i| substream(run.seed, &[i as u64, 0])).collect();
        let mut latent_rngs: Vec<SmdRng> = (start..end).map(|i| substream(run.seed, &[i as u64, 1])).collect();
        let mut x = DMatrix::zeros(d, b);
        for (j, r) in noise_rngs.iter_mut().enumerate() {
            x.set_column(j, &normal_dvector(r, d));
        }
        let mut trajs: Vec<Vec<DVector<f64>>> = if run.keep_trajectory {
            (0..b).map(|j| vec![x.column(j).into_owned()]).collect()
        } else {
            Vec::new()
        };
        for t in (1..=big_t).rev() {
            let ts = vec![sched.model_step(t); b];
            let eps = match model {
                Model::Vanilla(m) => m.eps_batch(&x, &ts)?.0,
                Model::Smd(m) => {
                    let mut eta = DMatrix::zeros(m.latent_dim, b);
                    for (j, r) in latent_rngs.iter_mut().enumerate() {
                        eta.set_column(j, &normal_dvector(r, m.latent_dim));
                    }
                    m.eps_batch(&x, &ts, &eta)?.0
                }
            };
            let coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
            let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
            let std = run.noise.std(sched.sigma(t));
            for j in 0..b {
                let mut col = (x.column(j) - eps.column(j) * coef) * inv_sqrt_alpha;
                if t > 1 {
                    col += normal_dvector(&mut noise_rngs[j], d) * std;
                }
                if col.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("chain {} at step {t}", start + j)));
                }
                x.set_column(j, &col);
                if run.keep_trajectory {
                    trajs[j].push(col);
                }
            }
        }
        out.samples.extend((0..b).map(|j| x.column(j).into_owned()));
        if let Some(all) = out.trajectories.as_mut() {
            all.extend(trajs);
        }
    }
    Ok(out)
}
