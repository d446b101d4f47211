//! Noise schedules, forward marginals, and the exact mixture posterior
//! `q(x_{t-1} | x_t)` for Gaussian-mixture data.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{symmetrize, Gaussian, GaussianMixture};

/// Floor applied to `σ_1` when `σ_t = β̃_t` (since `β̃_1 = 0`).
pub const SIGMA_FLOOR: f64 = 1e-12;

/// How the backward variance `σ_t` is read off the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    #[default]
    Beta,
    BetaTilde,
}

/// Precomputed tables for a `T`-step chain. All accessors are 1-based in `t`;
/// `alpha_bar(0) = 1`.
#[derive(Debug, Clone, Serialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    beta_tildes: Vec<f64>,
    sigmas: Vec<f64>,
    gammas: Vec<f64>,
    sigma_mode: SigmaMode,
    /// Timestep the denoiser is queried at for each index. Identity unless the
    /// schedule was respaced.
    model_steps: Vec<usize>,
}

/// Linear `β` schedule from `beta_min` to `beta_max` over `steps` steps.
pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64, sigma_mode: SigmaMode) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidArgument("schedule needs at least one step".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let betas = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_betas(betas, sigma_mode)
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>, sigma_mode: SigmaMode) -> Result<Self> {
        let n = betas.len();
        Self::with_model_steps(betas, sigma_mode, (1..=n).collect())
    }

    fn with_model_steps(betas: Vec<f64>, sigma_mode: SigmaMode, model_steps: Vec<usize>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidArgument("empty beta table".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidArgument(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let mut beta_tildes = Vec::with_capacity(betas.len());
        for (i, b) in betas.iter().enumerate() {
            let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
            beta_tildes.push((1.0 - prev) / (1.0 - alpha_bars[i]) * b);
        }
        let sigmas: Vec<f64> = match sigma_mode {
            SigmaMode::Beta => betas.clone(),
            SigmaMode::BetaTilde => beta_tildes.iter().map(|b| b.max(SIGMA_FLOOR)).collect(),
        };
        let gammas = (0..betas.len())
            .map(|i| betas[i] * betas[i] / (2.0 * sigmas[i] * alphas[i] * (1.0 - alpha_bars[i])))
            .collect();
        Ok(Self { betas, alphas, alpha_bars, beta_tildes, sigmas, gammas, sigma_mode, model_steps })
    }

    /// Number of steps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn sigma_mode(&self) -> SigmaMode {
        self.sigma_mode
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::StepOutOfRange { t, max: self.len() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta_tildes[t - 1]
    }

    /// Backward-step variance `σ_t`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    /// Loss weight `Γ_t = β_t² / (2 σ_t α_t (1 - ᾱ_t))`.
    pub fn gamma(&self, t: usize) -> f64 {
        self.gammas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Denoiser timestep for schedule index `t`.
    pub fn model_step(&self, t: usize) -> usize {
        self.model_steps[t - 1]
    }

    /// Schedule restricted to an increasing subset of steps. Each retained step
    /// jumps from `ᾱ_{τ_{i-1}}` to `ᾱ_{τ_i}`, so the effective
    /// `β'_i = 1 - ᾱ_{τ_i} / ᾱ_{τ_{i-1}}`; the denoiser is still queried at
    /// the original `τ_i`.
    pub fn respace(&self, steps: &[usize]) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::InvalidArgument("respacing needs at least one step".into()));
        }
        let mut prev = 0usize;
        let mut betas = Vec::with_capacity(steps.len());
        let mut model_steps = Vec::with_capacity(steps.len());
        for &s in steps {
            self.check_step(s)?;
            if s <= prev {
                return Err(Error::InvalidArgument("respaced steps must be strictly increasing".into()));
            }
            betas.push(1.0 - self.alpha_bar(s) / self.alpha_bar(prev));
            model_steps.push(self.model_step(s));
            prev = s;
        }
        Self::with_model_steps(betas, self.sigma_mode, model_steps)
    }
}

/// Evenly strided subset `{⌊iT/n⌋ : i = 1..n}` of `1..=T`; always ends at `T`.
pub fn strided_steps(total: usize, used: usize) -> Result<Vec<usize>> {
    if used == 0 || used > total {
        return Err(Error::InvalidArgument(format!("cannot stride {used} steps out of {total}")));
    }
    Ok((1..=used).map(|i| i * total / used).collect())
}

/// `√ᾱ_t x0 + √(1-ᾱ_t) ε`.
pub fn sample_forward(x0: &DVector<f64>, t: usize, eps: &DVector<f64>, s: &NoiseSchedule) -> Result<DVector<f64>> {
    s.check_step(t)?;
    if x0.len() != eps.len() {
        return Err(Error::DimensionMismatch { expected: x0.len(), got: eps.len() });
    }
    let ab = s.alpha_bar(t);
    Ok(x0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
}

fn marginal_component(c: &Gaussian, alpha_bar: f64) -> Result<Gaussian> {
    let d = c.dim();
    let cov = DMatrix::identity(d, d) * (1.0 - alpha_bar) + c.cov() * alpha_bar;
    Gaussian::new(c.mean() * alpha_bar.sqrt(), symmetrize(&cov))
}

/// `q(x_t)`: component k becomes `N(√ᾱ_t μ_k, (1-ᾱ_t) I + ᾱ_t Σ_k)`. `t = 0`
/// returns the data distribution.
pub fn marginal_q_xt(data: &GaussianMixture, t: usize, s: &NoiseSchedule) -> Result<GaussianMixture> {
    if t > s.len() {
        return Err(Error::StepOutOfRange { t, max: s.len() });
    }
    let ab = s.alpha_bar(t);
    let comps = data
        .components()
        .iter()
        .map(|c| marginal_component(c, ab))
        .collect::<Result<Vec<_>>>()?;
    GaussianMixture::from_log_weights(data.log_weights().to_vec(), comps)
}

/// Exact `q(x_{t-1} | x_t)` for mixture data, together with the per-component
/// `Λ_k = (α_t - ᾱ_t)/(1 - α_t) I + ᾱ_t/(1 - α_t) Σ_k`.
#[derive(Debug, Clone)]
pub struct PosteriorMixture {
    pub mixture: GaussianMixture,
    pub lambda_mats: Vec<DMatrix<f64>>,
}

pub fn posterior_true(data: &GaussianMixture, x_t: &DVector<f64>, t: usize, s: &NoiseSchedule) -> Result<PosteriorMixture> {
    s.check_step(t)?;
    if x_t.len() != data.dim() {
        return Err(Error::DimensionMismatch { expected: data.dim(), got: x_t.len() });
    }
    if x_t.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("x_t".into()));
    }
    let d = data.dim();
    let eye = DMatrix::<f64>::identity(d, d);
    let alpha = s.alpha(t);
    let ab = s.alpha_bar(t);
    let ab_prev = s.alpha_bar(t - 1);
    let x_scaled = x_t / alpha.sqrt();

    let mut log_w = Vec::with_capacity(data.len());
    let mut comps = Vec::with_capacity(data.len());
    let mut lambdas = Vec::with_capacity(data.len());
    for (c, lw) in data.components().iter().zip(data.log_weights()) {
        log_w.push(lw + marginal_component(c, ab)?.log_pdf(x_t)?);

        let lambda = &eye * ((alpha - ab) / (1.0 - alpha)) + c.cov() * (ab / (1.0 - alpha));
        let shrink = (&eye + &lambda)
            .cholesky()
            .ok_or(Error::NotPositiveDefinite("I + Λ_k"))?
            .inverse();
        // (I + Λ⁻¹)⁻¹ = Λ (I + Λ)⁻¹, formed without inverting Λ
        let keep = symmetrize(&(&lambda * &shrink));
        let mean = &keep * &x_scaled + &shrink * (c.mean() * ab_prev.sqrt());
        let cov = symmetrize(&(&keep * ((1.0 - alpha) / alpha)));
        comps.push(Gaussian::new(mean, cov)?);
        lambdas.push(lambda);
    }
    Ok(PosteriorMixture { mixture: GaussianMixture::from_log_weights(log_w, comps)?, lambda_mats: lambdas })
}

/// `q(x_{t-1} | x_t, x_0) = N(μ̃_t, β̃_t I)`. At `t = 1`, `β̃_1 = 0`; the
/// variance is floored at [`SIGMA_FLOOR`].
pub fn ddpm_posterior_given_x0(x_t: &DVector<f64>, x0: &DVector<f64>, t: usize, s: &NoiseSchedule) -> Result<Gaussian> {
    s.check_step(t)?;
    if x_t.len() != x0.len() {
        return Err(Error::DimensionMismatch { expected: x_t.len(), got: x0.len() });
    }
    let ab = s.alpha_bar(t);
    let ab_prev = s.alpha_bar(t - 1);
    let c0 = ab_prev.sqrt() * s.beta(t) / (1.0 - ab);
    let ct = s.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    Gaussian::isotropic(x0 * c0 + x_t * ct, s.beta_tilde(t).max(SIGMA_FLOOR))
}
