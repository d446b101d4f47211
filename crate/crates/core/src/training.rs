//! Noise-prediction losses and the Adam training loop.
//!
//! Every example in a batch draws from its own substream of the step seed, in
//! the fixed order `x0, t, ε, η_1..η_n`. Gradients are computed over fixed
//! chunks of examples and summed in chunk order, so results are identical for
//! any worker count.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Model, SmdDenoiser, VanillaDenoiser};
use crate::error::{Error, Result};
use crate::forward::NoiseSchedule;
use crate::gmm::GaussianMixture;
use crate::nn::{adam_step, AdamConfig, GradBuf};
use crate::rng::{normal_dvector, substream, SmdRng};

/// Examples per gradient chunk.
pub const CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// Unweighted `‖ε - ε̂‖²`.
    #[default]
    Simple,
    /// Each term scaled by `Γ_t`.
    GammaWeighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Latent draws per example; the per-example loss is their mean.
    pub n_eta: usize,
    pub weight_mode: WeightMode,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 10_000, batch_size: 256, lr: 2e-4, n_eta: 1, weight_mode: WeightMode::Simple, seed: 0, eval_every: 500 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.n_eta == 0 || self.eval_every == 0 {
            return Err(Error::InvalidArgument("batch_size, n_eta and eval_every must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// One batch of training draws, one column per (example, η draw) pair.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x_t: DMatrix<f64>,
    pub eps: DMatrix<f64>,
    /// Empty for the plain model.
    pub eta: DMatrix<f64>,
    pub model_steps: Vec<usize>,
    /// Loss weight of each column, including the `1/(B n_eta)` average.
    pub weights: Vec<f64>,
}

fn draw_example(
    data: &GaussianMixture,
    s: &NoiseSchedule,
    mode: WeightMode,
    rng: &mut SmdRng,
) -> (DVector<f64>, DVector<f64>, usize, f64) {
    let x0 = data.sample(rng);
    let t = rng.random_range(1..=s.len());
    let eps = normal_dvector(rng, data.dim());
    let ab = s.alpha_bar(t);
    let x_t = &x0 * ab.sqrt() + &eps * (1.0 - ab).sqrt();
    let w = match mode {
        WeightMode::Simple => 1.0,
        WeightMode::GammaWeighted => s.gamma(t),
    };
    (x_t, eps, t, w)
}

/// Draw examples `range` of a batch seeded by `step_seed`. With
/// `latent_dim > 0`, each example is repeated for `n_eta` latent draws.
#[allow(clippy::too_many_arguments)]
pub fn draw_batch(
    data: &GaussianMixture,
    s: &NoiseSchedule,
    step_seed: u64,
    range: std::ops::Range<usize>,
    batch_size: usize,
    n_eta: usize,
    latent_dim: usize,
    mode: WeightMode,
) -> Batch {
    let d = data.dim();
    let reps = if latent_dim > 0 { n_eta } else { 1 };
    let cols = range.len() * reps;
    let mut b = Batch {
        x_t: DMatrix::zeros(d, cols),
        eps: DMatrix::zeros(d, cols),
        eta: DMatrix::zeros(latent_dim, cols),
        model_steps: Vec::with_capacity(cols),
        weights: Vec::with_capacity(cols),
    };
    let norm = 1.0 / (batch_size * reps) as f64;
    let mut col = 0;
    for i in range {
        let mut rng = substream(step_seed, &[i as u64]);
        let (x_t, eps, t, w) = draw_example(data, s, mode, &mut rng);
        for _ in 0..reps {
            b.x_t.set_column(col, &x_t);
            b.eps.set_column(col, &eps);
            if latent_dim > 0 {
                b.eta.set_column(col, &normal_dvector(&mut rng, latent_dim));
            }
            b.model_steps.push(s.model_step(t));
            b.weights.push(w * norm);
            col += 1;
        }
    }
    b
}

/// `Σ_j w_j ‖ε_j - ε̂_j‖²` and its gradient with respect to `ε̂`.
pub fn weighted_sq_loss(eps: &DMatrix<f64>, eps_hat: &DMatrix<f64>, weights: &[f64]) -> (f64, DMatrix<f64>) {
    let mut loss = 0.0;
    let mut grad = DMatrix::zeros(eps.nrows(), eps.ncols());
    for j in 0..eps.ncols() {
        let mut sq = 0.0;
        for r in 0..eps.nrows() {
            let diff = eps_hat[(r, j)] - eps[(r, j)];
            sq += diff * diff;
            grad[(r, j)] = 2.0 * weights[j] * diff;
        }
        loss += weights[j] * sq;
    }
    (loss, grad)
}

fn worker_count() -> usize {
    std::env::var("SMD_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n >= 1)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Evaluate `chunk_fn` over all chunks, possibly in parallel, and reduce in
/// chunk order.
fn reduce_chunks<F>(batch_size: usize, grads: GradBuf, chunk_fn: F) -> Result<(f64, GradBuf)>
where
    F: Fn(std::ops::Range<usize>) -> Result<(f64, GradBuf)> + Sync,
{
    let ranges: Vec<_> = (0..batch_size).step_by(CHUNK).map(|a| a..(a + CHUNK).min(batch_size)).collect();
    let workers = worker_count().min(ranges.len()).max(1);
    let results: Vec<Result<(f64, GradBuf)>> = if workers == 1 {
        ranges.into_iter().map(&chunk_fn).collect()
    } else {
        let mut slots: Vec<Option<Result<(f64, GradBuf)>>> = (0..ranges.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let ranges = &ranges;
                    let f = &chunk_fn;
                    scope.spawn(move || {
                        (w..ranges.len()).step_by(workers).map(|i| (i, f(ranges[i].clone()))).collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("loss worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots.into_iter().map(|s| s.expect("every chunk evaluated")).collect()
    };
    let mut total = 0.0;
    let mut acc = grads;
    for r in results {
        let (l, g) = r?;
        total += l;
        acc.add(&g);
    }
    Ok((total, acc))
}

/// Simplified noise-prediction loss for the plain model. `rng` supplies the
/// step seed from which per-example streams are split.
pub fn ddpm_loss_batch(
    d: &VanillaDenoiser,
    data: &GaussianMixture,
    s: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut SmdRng,
) -> Result<(f64, GradBuf)> {
    let step_seed: u64 = rng.random();
    reduce_chunks(cfg.batch_size, d.params.grad_buf(), |range| {
        let b = draw_batch(data, s, step_seed, range, cfg.batch_size, 1, 0, cfg.weight_mode);
        let (eps_hat, tape) = d.eps_batch(&b.x_t, &b.model_steps)?;
        let (loss, d_eps) = weighted_sq_loss(&b.eps, &eps_hat, &b.weights);
        let mut g = d.params.grad_buf();
        d.backward(&tape, &d_eps, &mut g)?;
        Ok((loss, g))
    })
}

/// Soft mixture loss: as [`ddpm_loss_batch`] with `ε̂` from a fresh latent
/// draw, averaged over `n_eta` draws per example. Gradients reach θ, φ and ξ.
pub fn smd_loss_batch(
    d: &SmdDenoiser,
    data: &GaussianMixture,
    s: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut SmdRng,
) -> Result<(f64, GradBuf)> {
    let step_seed: u64 = rng.random();
    reduce_chunks(cfg.batch_size, d.params.grad_buf(), |range| {
        let b = draw_batch(data, s, step_seed, range, cfg.batch_size, cfg.n_eta, d.latent_dim, cfg.weight_mode);
        let (eps_hat, tape) = d.eps_batch(&b.x_t, &b.model_steps, &b.eta)?;
        let (loss, d_eps) = weighted_sq_loss(&b.eps, &eps_hat, &b.weights);
        let mut g = d.params.grad_buf();
        d.backward(&tape, &d_eps, &mut g)?;
        Ok((loss, g))
    })
}

pub fn loss_batch(
    model: &Model,
    data: &GaussianMixture,
    s: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut SmdRng,
) -> Result<(f64, GradBuf)> {
    match model {
        Model::Vanilla(d) => ddpm_loss_batch(d, data, s, cfg, rng),
        Model::Smd(d) => smd_loss_batch(d, data, s, cfg, rng),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    /// Mean batch loss over the steps since the previous point.
    pub loss: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub points: Vec<TracePoint>,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,wall_ms\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{:.3}\n", p.step, p.loss, p.wall_ms));
        }
        out
    }

    pub fn loss_at(&self, step: usize) -> Option<f64> {
        self.points.iter().find(|p| p.step == step).map(|p| p.loss)
    }
}

/// Run `cfg.steps` Adam updates. `on_eval` sees the model and the newest
/// trace point every `eval_every` steps and after the final step. Resumes the
/// Adam step count stored in the parameters.
pub fn train<F>(
    model: &mut Model,
    data: &GaussianMixture,
    s: &NoiseSchedule,
    cfg: &TrainConfig,
    mut on_eval: F,
) -> Result<LossTrace>
where
    F: FnMut(&Model, &TracePoint) -> Result<()>,
{
    cfg.validate()?;
    if data.dim() != model.dim() {
        return Err(Error::DimensionMismatch { expected: model.dim(), got: data.dim() });
    }
    let mut trace = LossTrace::default();
    let start = Instant::now();
    let first = model.params().adam_steps();
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut window = 0.0;
    let mut window_len = 0usize;
    for i in 1..=cfg.steps {
        let global = first + i as u64;
        let mut rng = substream(cfg.seed, &[global]);
        let (loss, grads) = loss_batch(model, data, s, cfg, &mut rng)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: global as usize, loss });
        }
        let params = model.params_mut();
        params.zero_grad();
        params.accumulate(&grads);
        adam_step(params, adam, global);
        window += loss;
        window_len += 1;
        if i % cfg.eval_every == 0 || i == cfg.steps {
            let point = TracePoint {
                step: global as usize,
                loss: window / window_len as f64,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            };
            trace.points.push(point);
            on_eval(model, &point)?;
            window = 0.0;
            window_len = 0;
        }
    }
    Ok(trace)
}
