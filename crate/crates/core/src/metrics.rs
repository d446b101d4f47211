//! Denoising-error estimators and sample-quality metrics.
//!
//! `M_t = E_{x_t} KL[q(x_{t-1} | x_t) ‖ p(x_{t-1} | x_t)]` is estimated by
//! Monte Carlo over `x_t ~ q(x_t)`. Metrics are evaluated at the parameters
//! handed in; reporting the best training checkpoint stands in for the
//! infimum over parameters, so estimates upper-bound the true quantity.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{mean_from_eps, Model};
use crate::error::{Error, Result};
use crate::forward::{marginal_q_xt, posterior_true, NoiseSchedule};
use crate::gmm::{cross_entropy_mixture_gaussian, Gaussian, GaussianMixture};
use crate::rng::{normal_dvector, substream, SmdRng};
use crate::sampling::NoiseScale;
use crate::stats::{log_sum_exp, McEstimate};

/// A backward transition `p(x_{t-1} | x_t)`.
#[derive(Debug, Clone)]
pub enum StepDistribution {
    Gaussian(Gaussian),
    Mixture(GaussianMixture),
}

impl StepDistribution {
    pub fn log_pdf(&self, x: &DVector<f64>) -> Result<f64> {
        match self {
            StepDistribution::Gaussian(g) => g.log_pdf(x),
            StepDistribution::Mixture(m) => m.log_pdf(x),
        }
    }

    pub fn sample(&self, rng: &mut SmdRng) -> DVector<f64> {
        match self {
            StepDistribution::Gaussian(g) => g.sample(rng),
            StepDistribution::Mixture(m) => m.sample(rng),
        }
    }

    pub fn mean(&self) -> DVector<f64> {
        match self {
            StepDistribution::Gaussian(g) => g.mean().clone(),
            StepDistribution::Mixture(m) => m.mean(),
        }
    }
}

pub trait ReverseKernel {
    /// Backward step at schedule index `t`. Stochastic kernels (the soft
    /// mixture model) represent themselves with `n_inner` draws from `rng`.
    fn step_distribution(
        &self,
        x_t: &DVector<f64>,
        t: usize,
        s: &NoiseSchedule,
        n_inner: usize,
        rng: &mut SmdRng,
    ) -> Result<StepDistribution>;
}

/// The true posterior of the forward process: zero error by construction.
#[derive(Debug, Clone)]
pub struct ExactPosterior<'a> {
    pub data: &'a GaussianMixture,
}

impl ReverseKernel for ExactPosterior<'_> {
    fn step_distribution(&self, x_t: &DVector<f64>, t: usize, s: &NoiseSchedule, _: usize, _: &mut SmdRng) -> Result<StepDistribution> {
        Ok(StepDistribution::Mixture(posterior_true(self.data, x_t, t, s)?.mixture))
    }
}

/// The closest Gaussian with the fixed covariance `σ_t I`: centred on the
/// true posterior mean.
#[derive(Debug, Clone)]
pub struct BestGaussian<'a> {
    pub data: &'a GaussianMixture,
}

impl ReverseKernel for BestGaussian<'_> {
    fn step_distribution(&self, x_t: &DVector<f64>, t: usize, s: &NoiseSchedule, _: usize, _: &mut SmdRng) -> Result<StepDistribution> {
        let post = posterior_true(self.data, x_t, t, s)?;
        Ok(StepDistribution::Gaussian(Gaussian::isotropic(post.mixture.mean(), s.sigma(t))?))
    }
}

/// A trained denoiser. The plain model gives `N(μ_θ, v_t I)`; the soft
/// mixture model gives an equal-weight mixture over `n_inner` latent draws.
#[derive(Debug, Clone)]
pub struct ModelKernel<'a> {
    pub model: &'a Model,
    pub noise: NoiseScale,
}

impl ReverseKernel for ModelKernel<'_> {
    fn step_distribution(
        &self,
        x_t: &DVector<f64>,
        t: usize,
        s: &NoiseSchedule,
        n_inner: usize,
        rng: &mut SmdRng,
    ) -> Result<StepDistribution> {
        let var = self.noise.variance(s.sigma(t));
        let mt = s.model_step(t);
        let check = |v: &DVector<f64>| -> Result<()> {
            if v.iter().all(|x| x.is_finite()) {
                Ok(())
            } else {
                Err(Error::NonFinite(format!("model output at step {t}")))
            }
        };
        match self.model {
            Model::Vanilla(d) => {
                let eps = crate::denoiser::predict_eps_vanilla(d, x_t, mt)?;
                check(&eps)?;
                Ok(StepDistribution::Gaussian(Gaussian::isotropic(mean_from_eps(x_t, t, &eps, s)?, var)?))
            }
            Model::Smd(d) => {
                let n = n_inner.max(1);
                let x = DMatrix::from_fn(x_t.len(), n, |r, _| x_t[r]);
                let eta = DMatrix::from_fn(d.latent_dim, n, |_, _| rng.sample(rand_distr::StandardNormal));
                let (eps, _) = d.eps_batch(&x, &vec![mt; n], &eta)?;
                let comps = (0..n)
                    .map(|j| {
                        let e = eps.column(j).into_owned();
                        check(&e)?;
                        Gaussian::isotropic(mean_from_eps(x_t, t, &e, s)?, var)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(StepDistribution::Mixture(GaussianMixture::new(vec![1.0 / n as f64; n], comps)?))
            }
        }
    }
}

/// Monte-Carlo `M_t` at step `t`. Gaussian kernels use the analytic
/// cross-entropy minus a sampled posterior entropy; mixture kernels use a
/// sampled log-ratio. `n_inner` posterior samples per outer draw.
pub fn local_error_mt(
    data: &GaussianMixture,
    kernel: &dyn ReverseKernel,
    t: usize,
    s: &NoiseSchedule,
    n_outer: usize,
    n_inner: usize,
    rng: &mut SmdRng,
) -> Result<McEstimate> {
    s.check_step(t)?;
    if n_outer < 2 || n_inner == 0 {
        return Err(Error::InvalidArgument("need n_outer >= 2 and n_inner >= 1".into()));
    }
    let seed: u64 = rng.random();
    let marginal = marginal_q_xt(data, t, s)?;
    let mut values = Vec::with_capacity(n_outer);
    for i in 0..n_outer {
        let mut r = substream(seed, &[i as u64]);
        let x_t = marginal.sample(&mut r);
        let post = posterior_true(data, &x_t, t, s)?.mixture;
        let dist = kernel.step_distribution(&x_t, t, s, n_inner, &mut r)?;
        let kl = match &dist {
            StepDistribution::Gaussian(g) => {
                let ce = cross_entropy_mixture_gaussian(&post, g)?;
                let mut h = 0.0;
                for _ in 0..n_inner {
                    h -= post.log_pdf_unchecked(&post.sample(&mut r));
                }
                ce - h / n_inner as f64
            }
            StepDistribution::Mixture(m) => {
                let mut acc = 0.0;
                for _ in 0..n_inner {
                    let y = post.sample(&mut r);
                    acc += post.log_pdf_unchecked(&y) - m.log_pdf_unchecked(&y);
                }
                acc / n_inner as f64
            }
        };
        if !kl.is_finite() {
            return Err(Error::NonFinite(format!("KL estimate at step {t}")));
        }
        values.push(kl);
    }
    Ok(McEstimate::from_samples(&values))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MtRow {
    pub t: usize,
    pub m_t: f64,
    pub se: f64,
}

/// `E = Σ_t M_t` with standard errors pooled in quadrature; also returns the
/// per-step rows.
pub fn global_error_e(
    data: &GaussianMixture,
    kernel: &dyn ReverseKernel,
    s: &NoiseSchedule,
    n_outer: usize,
    n_inner: usize,
    rng: &mut SmdRng,
) -> Result<(McEstimate, Vec<MtRow>)> {
    let seed: u64 = rng.random();
    let mut parts = Vec::with_capacity(s.len());
    let mut rows = Vec::with_capacity(s.len());
    for t in 1..=s.len() {
        let est = local_error_mt(data, kernel, t, s, n_outer, n_inner, &mut substream(seed, &[t as u64]))?;
        rows.push(MtRow { t, m_t: est.mean, se: est.std_err });
        parts.push(est);
    }
    Ok((McEstimate::pooled_sum(&parts), rows))
}

pub fn mt_csv(rows: &[MtRow]) -> String {
    let mut out = String::from("t,m_t,se\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.t, r.m_t, r.se));
    }
    out
}

/// Symmetric construction for the lower bound: component `k` is
/// `N(λ μ_k, δ_k I)` with weight `w_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Theorem1Config {
    pub lambda_values: Vec<f64>,
    pub weights: Vec<f64>,
    pub delta: Vec<f64>,
    pub base_means: Vec<Vec<f64>>,
    pub t: usize,
}

impl Default for Theorem1Config {
    fn default() -> Self {
        Self {
            lambda_values: vec![1.0, 2.0, 4.0, 8.0],
            weights: vec![0.5, 0.5],
            delta: vec![1.0, 1.0],
            base_means: vec![vec![-1.0], vec![1.0]],
            t: 1,
        }
    }
}

impl Theorem1Config {
    pub fn dim(&self) -> usize {
        self.base_means.first().map_or(0, Vec::len)
    }

    fn validate(&self, s: &NoiseSchedule) -> Result<()> {
        s.check_step(self.t)?;
        let k = self.weights.len();
        if k == 0 || self.delta.len() != k || self.base_means.len() != k {
            return Err(Error::InvalidArgument("weights, delta and base_means must have equal nonzero length".into()));
        }
        let d = self.dim();
        if d == 0 || self.base_means.iter().any(|m| m.len() != d) {
            return Err(Error::InvalidArgument("base means must share a positive dimension".into()));
        }
        if self.lambda_values.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::InvalidArgument("lambda values must be finite and >= 0".into()));
        }
        let ab = s.alpha_bar(self.t);
        let mut centre = vec![0.0; d];
        for ((w, dk), m) in self.weights.iter().zip(&self.delta).zip(&self.base_means) {
            for (c, v) in centre.iter_mut().zip(m) {
                *c += w * v / (1.0 + (dk - 1.0) * ab);
            }
        }
        let off = centre.iter().map(|c| c.abs()).fold(0.0, f64::max);
        if off > 1e-10 {
            return Err(Error::InvalidArgument(format!("means violate the zero-centre constraint by {off:e}")));
        }
        Ok(())
    }

    /// Data mixture at scale `lambda`.
    pub fn mixture(&self, lambda: f64) -> Result<GaussianMixture> {
        let comps = self
            .base_means
            .iter()
            .zip(&self.delta)
            .map(|(m, d)| Gaussian::isotropic(DVector::from_iterator(m.len(), m.iter().map(|v| v * lambda)), *d))
            .collect::<Result<Vec<_>>>()?;
        GaussianMixture::new(self.weights.clone(), comps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundTerm {
    pub lambda: f64,
    /// The `λ²`-scaling part.
    pub quadratic: f64,
    /// The `λ`-independent part.
    pub constant: f64,
    pub bound: f64,
}

/// Closed-form lower bound on `M_t` for each `λ`:
/// `(1-α_t)² ᾱ_{t-1}/(2σ_t) Σ_k w_k ‖λμ_k/(1+(δ_k-1)ᾱ_t)‖²
///  - ln K + (D/2)(ln(σ_t α_t/(1-α_t)) + (1-α_t)/σ_t - 1)`.
pub fn theorem1_lower_bound(cfg: &Theorem1Config, s: &NoiseSchedule) -> Result<Vec<BoundTerm>> {
    cfg.validate(s)?;
    let t = cfg.t;
    let (alpha, ab, ab_prev, sigma) = (s.alpha(t), s.alpha_bar(t), s.alpha_bar(t - 1), s.sigma(t));
    let d = cfg.dim() as f64;
    let k = cfg.weights.len() as f64;
    let mut unit = 0.0;
    for ((w, dk), m) in cfg.weights.iter().zip(&cfg.delta).zip(&cfg.base_means) {
        let scale = 1.0 / (1.0 + (dk - 1.0) * ab);
        unit += w * m.iter().map(|v| (v * scale).powi(2)).sum::<f64>();
    }
    let coef = (1.0 - alpha).powi(2) * ab_prev / (2.0 * sigma);
    let constant = -k.ln() + 0.5 * d * ((sigma * alpha / (1.0 - alpha)).ln() + (1.0 - alpha) / sigma - 1.0);
    Ok(cfg
        .lambda_values
        .iter()
        .map(|&lambda| {
            let quadratic = coef * unit * lambda * lambda;
            BoundTerm { lambda, quadratic, constant, bound: quadratic + constant }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoremRow {
    pub lambda: f64,
    pub bound: f64,
    pub quadratic: f64,
    pub mc_m_t: f64,
    pub mc_se: f64,
}

/// Bound and Monte-Carlo `M_t` of the best fixed-covariance Gaussian per `λ`.
pub fn theorem1_demo(
    cfg: &Theorem1Config,
    s: &NoiseSchedule,
    n_outer: usize,
    n_inner: usize,
    rng: &mut SmdRng,
) -> Result<Vec<TheoremRow>> {
    let bounds = theorem1_lower_bound(cfg, s)?;
    let seed: u64 = rng.random();
    bounds
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let data = cfg.mixture(b.lambda)?;
            let est = local_error_mt(&data, &BestGaussian { data: &data }, cfg.t, s, n_outer, n_inner, &mut substream(seed, &[i as u64]))?;
            Ok(TheoremRow { lambda: b.lambda, bound: b.bound, quadratic: b.quadratic, mc_m_t: est.mean, mc_se: est.std_err })
        })
        .collect()
}

pub fn theorem_csv(rows: &[TheoremRow]) -> String {
    let mut out = String::from("lambda,bound,quadratic,mc_m_t,mc_se\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.lambda, r.bound, r.quadratic, r.mc_m_t, r.mc_se));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeMetrics {
    pub mode_recall: f64,
    pub mean_nll: f64,
    pub nll_se: f64,
    pub covered: Vec<bool>,
    pub counts: Vec<usize>,
}

/// Nearest-mean assignment (ties to the lowest index). A mode is covered when
/// it receives at least a quarter of its fair share `n/K` and its assignees
/// sit on average within `3 √λ_max(Σ_k)` of its mean.
pub fn mode_metrics(samples: &[DVector<f64>], truth: &GaussianMixture) -> Result<ModeMetrics> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("mode metrics need at least one sample".into()));
    }
    let k = truth.len();
    let mut counts = vec![0usize; k];
    let mut dist_sum = vec![0.0; k];
    let mut nll = Vec::with_capacity(samples.len());
    for x in samples {
        if x.len() != truth.dim() {
            return Err(Error::DimensionMismatch { expected: truth.dim(), got: x.len() });
        }
        let mut best = (0usize, f64::INFINITY);
        for (j, c) in truth.components().iter().enumerate() {
            let d = (x - c.mean()).norm();
            if d < best.1 {
                best = (j, d);
            }
        }
        counts[best.0] += 1;
        dist_sum[best.0] += best.1;
        nll.push(-truth.log_pdf_unchecked(x));
    }
    let fair = samples.len() as f64 / k as f64;
    let covered: Vec<bool> = truth
        .components()
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let max_eig = SymmetricEigen::new(c.cov().clone()).eigenvalues.max();
            counts[j] as f64 >= 0.25 * fair && counts[j] > 0 && dist_sum[j] / (counts[j] as f64) < 3.0 * max_eig.sqrt()
        })
        .collect();
    let nll_est = McEstimate::from_samples(&nll);
    Ok(ModeMetrics {
        mode_recall: covered.iter().filter(|c| **c).count() as f64 / k as f64,
        mean_nll: nll_est.mean,
        nll_se: nll_est.std_err,
        covered,
        counts,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub m_t: Vec<MtRow>,
    pub e_global: McEstimate,
    pub mode_recall: f64,
    pub mean_nll: f64,
    pub metadata: serde_json::Value,
}

/// `ln mean_j exp(v_j)`.
pub fn log_mean_exp(values: &[f64]) -> f64 {
    log_sum_exp(values) - (values.len() as f64).ln()
}

/// Ancestral simulation of `n` chains from `N(0, I)` through the kernel,
/// drawing from the step distribution at every step including the last.
pub fn sample_with_kernel(
    kernel: &dyn ReverseKernel,
    dim: usize,
    s: &NoiseSchedule,
    n: usize,
    n_inner: usize,
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    (0..n)
        .map(|i| {
            let mut r = substream(seed, &[i as u64]);
            let mut x = normal_dvector(&mut r, dim);
            for t in (1..=s.len()).rev() {
                let dist = kernel.step_distribution(&x, t, s, n_inner, &mut r)?;
                x = dist.sample(&mut r);
            }
            Ok(x)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{make_schedule, NoiseSchedule, SigmaMode};
    use crate::rng::seeded;

    fn one_step() -> NoiseSchedule {
        NoiseSchedule::from_betas(vec![0.1], SigmaMode::Beta).unwrap()
    }

    #[test]
    fn bound_single_step_scalar_evaluation() {
        let b = theorem1_lower_bound(&Theorem1Config::default(), &one_step()).unwrap();
        // (0.1)²·1/(0.2)·1 − ln 2 + ½(ln 0.9 + 1 − 1)
        let first = 0.01 / 0.2 - 2f64.ln() + 0.5 * 0.9f64.ln();
        assert!((b[0].bound - first).abs() < 1e-14);
        for w in b.windows(2) {
            assert!(w[1].bound > w[0].bound);
            assert!((w[1].quadratic / w[0].quadratic - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_lambda_gives_constant_and_constraint_enforced() {
        let cfg = Theorem1Config { lambda_values: vec![0.0], ..Theorem1Config::default() };
        let b = theorem1_lower_bound(&cfg, &one_step()).unwrap();
        assert_eq!(b[0].quadratic, 0.0);
        assert_eq!(b[0].bound, b[0].constant);
        let bad = Theorem1Config { base_means: vec![vec![-1.0], vec![1.5]], ..Theorem1Config::default() };
        assert!(theorem1_lower_bound(&bad, &one_step()).is_err());
    }

    #[test]
    fn exact_posterior_has_zero_error() {
        let data = GaussianMixture::grid(2, 3.0, 0.2).unwrap();
        let s = make_schedule(10, 1e-3, 0.2, SigmaMode::Beta).unwrap();
        let (e, rows) = global_error_e(&data, &ExactPosterior { data: &data }, &s, 20, 16, &mut seeded(1)).unwrap();
        assert_eq!(e.mean, 0.0);
        assert!(rows.iter().all(|r| r.m_t == 0.0));
        assert!(e.mean >= rows.iter().map(|r| r.m_t).fold(f64::MIN, f64::max));
    }

    #[test]
    fn best_gaussian_error_is_nonnegative_and_csv_shape() {
        let data = GaussianMixture::grid(2, 3.0, 0.2).unwrap();
        let s = make_schedule(10, 1e-3, 0.2, SigmaMode::Beta).unwrap();
        let (e, rows) = global_error_e(&data, &BestGaussian { data: &data }, &s, 50, 64, &mut seeded(2)).unwrap();
        for r in &rows {
            assert!(r.m_t >= -3.0 * r.se, "{r:?}");
        }
        assert!(e.mean > 0.0);
        assert_eq!(mt_csv(&rows).lines().count(), 11);
    }

    #[test]
    fn mode_metrics_cases() {
        let truth = GaussianMixture::grid(7, 2.0, 0.1).unwrap();
        let samples = crate::gmm::mixture_sample(&truth, &mut seeded(3), 10_000).unwrap();
        let m = mode_metrics(&samples, &truth).unwrap();
        assert_eq!(m.mode_recall, 1.0);
        // mean NLL of truth draws estimates the entropy; Huber bound caps it
        let ub = crate::gmm::mixture_entropy_upper_bound(&truth);
        assert!(m.mean_nll <= ub + 3.0 * m.nll_se);

        let collapsed = vec![truth.components()[10].mean().clone(); 2000];
        let m = mode_metrics(&collapsed, &truth).unwrap();
        assert!((m.mode_recall - 1.0 / 49.0).abs() < 1e-15);
        assert!(mode_metrics(&[], &truth).is_err());
    }

    #[test]
    fn lme_of_equal_values() {
        assert!((log_mean_exp(&[2.0, 2.0, 2.0]) - 2.0).abs() < 1e-15);
    }
}
