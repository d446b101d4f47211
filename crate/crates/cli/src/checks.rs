//! Identity and oracle checks behind `smd gmm-check`.
//!
//! Each check compares the library against pointwise evaluation or a
//! trapezoid-rule grid integral and reports its worst error.

use anyhow::Result;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use smd_core::forward::{make_schedule, marginal_q_xt, posterior_true, NoiseSchedule, SigmaMode};
use smd_core::gmm::{
    cross_entropy_mixture_gaussian, gaussian_product, gaussian_rescale, kl_gaussian_gaussian, Gaussian, GaussianMixture,
};
use smd_core::rng::{seeded, SmdRng};

/// Environment variable that replaces every tolerance (used to exercise the
/// failure path).
pub const TOL_OVERRIDE_ENV: &str = "SMD_CHECK_TOL_OVERRIDE";

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_err: f64,
    pub tol: f64,
    pub pass: bool,
}

fn random_spd(rng: &mut SmdRng, d: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    let m = &a * a.transpose() + DMatrix::identity(d, d) * rng.random_range(0.1..1.0);
    (&m + m.transpose()) * 0.5
}

fn random_gaussian(rng: &mut SmdRng, d: usize) -> Gaussian {
    let mean = DVector::from_fn(d, |_, _| rng.random_range(-3.0..3.0));
    Gaussian::new(mean, random_spd(rng, d)).expect("constructed SPD")
}

/// Trapezoid rule for `f` on `[a, b]` with about `(b - a)/h` panels.
pub fn trapezoid(a: f64, b: f64, h: f64, f: impl Fn(f64) -> f64) -> f64 {
    let n = ((b - a) / h).ceil().max(1.0) as usize;
    let step = (b - a) / n as f64;
    let mut acc = 0.5 * (f(a) + f(b));
    for i in 1..n {
        acc += f(a + i as f64 * step);
    }
    acc * step
}

fn normal_pdf(x: f64, m: f64, v: f64) -> f64 {
    (-(x - m).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
}

fn product_check(rng: &mut SmdRng, n: usize) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let d = 1 + i % 3;
        let (g1, g2) = (random_gaussian(rng, d), random_gaussian(rng, d));
        let prod = gaussian_product(&g1, &g2)?;
        for _ in 0..5 {
            let x = DVector::from_fn(d, |_, _| rng.random_range(-3.0..3.0));
            let lhs = g1.log_pdf(&x)? + g2.log_pdf(&x)?;
            let rhs = prod.log_value(&x)?;
            worst = worst.max((lhs - rhs).exp_m1().abs());
        }
    }
    Ok(worst)
}

fn rescale_check(rng: &mut SmdRng, n: usize) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let d = 1 + i % 3;
        let g = random_gaussian(rng, d);
        let lambda = rng.random_range(0.2..3.0);
        let scaled = gaussian_rescale(lambda, &g)?;
        let direct = Gaussian::new(g.mean() * lambda, g.cov().clone())?;
        for _ in 0..5 {
            let x = DVector::from_fn(d, |_, _| rng.random_range(-4.0..4.0));
            let lhs = direct.log_pdf(&x)?;
            let rhs = scaled.log_value(&(&x / lambda))?;
            worst = worst.max((lhs - rhs).exp_m1().abs());
        }
    }
    Ok(worst)
}

fn kl_grid_check(rng: &mut SmdRng, n: usize) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let (mp, vp) = (rng.random_range(-2.0..2.0), rng.random_range(0.2..2.0));
        let (mq, vq) = (rng.random_range(-2.0..2.0), rng.random_range(0.2..2.0));
        let analytic = kl_gaussian_gaussian(&Gaussian::scalar(mp, vp)?, &Gaussian::scalar(mq, vq)?)?;
        let sd = vp.sqrt();
        let grid = trapezoid(mp - 8.0 * sd, mp + 8.0 * sd, 0.01 * sd, |x| {
            let p = normal_pdf(x, mp, vp);
            let log_ratio = -0.5 * (vp / vq).ln() - (x - mp).powi(2) / (2.0 * vp) + (x - mq).powi(2) / (2.0 * vq);
            p * log_ratio
        });
        worst = worst.max((grid - analytic).abs() / analytic.abs().max(1e-3));
    }
    Ok(worst)
}

fn cross_entropy_grid_check(rng: &mut SmdRng, n: usize) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let k = rng.random_range(1..4usize);
        let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = w.iter().sum();
        let comps: Vec<(f64, f64)> = (0..k).map(|_| (rng.random_range(-3.0..3.0), rng.random_range(0.1..1.5))).collect();
        let m = GaussianMixture::new(
            w.iter().map(|x| x / total).collect(),
            comps.iter().map(|(mu, v)| Gaussian::scalar(*mu, *v)).collect::<Result<Vec<_>, _>>()?,
        )?;
        let (mg, vg) = (rng.random_range(-2.0..2.0), rng.random_range(0.3..3.0));
        let analytic = cross_entropy_mixture_gaussian(&m, &Gaussian::scalar(mg, vg)?)?;
        let lo = comps.iter().map(|(mu, v)| mu - 8.0 * v.sqrt()).fold(f64::INFINITY, f64::min);
        let hi = comps.iter().map(|(mu, v)| mu + 8.0 * v.sqrt()).fold(f64::NEG_INFINITY, f64::max);
        let h = 0.01 * comps.iter().map(|(_, v)| v.sqrt()).fold(f64::INFINITY, f64::min);
        let grid = trapezoid(lo, hi, h, |x| {
            let p: f64 = m.weights().iter().zip(&comps).map(|(w, (mu, v))| w * normal_pdf(x, *mu, *v)).sum();
            p * (0.5 * (2.0 * std::f64::consts::PI * vg).ln() + (x - mg).powi(2) / (2.0 * vg))
        });
        worst = worst.max((grid - analytic).abs() / analytic.abs().max(1e-3));
    }
    Ok(worst)
}

/// Random 1D mixture with `k` components.
pub fn random_mixture_1d(rng: &mut SmdRng, k: usize) -> GaussianMixture {
    let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = w.iter().sum();
    let comps = (0..k)
        .map(|_| Gaussian::scalar(rng.random_range(-3.0..3.0), rng.random_range(0.01..1.0)).expect("positive variance"))
        .collect();
    GaussianMixture::new(w.iter().map(|x| x / total).collect(), comps).expect("normalized weights")
}

/// Total variation between `posterior_true(·|x_t)` and the grid posterior
/// `q(x_t|x_{t-1}) q(x_{t-1}) / Z` in 1D.
pub fn posterior_tv_1d(data: &GaussianMixture, x_t: f64, t: usize, s: &NoiseSchedule) -> Result<f64> {
    let post = posterior_true(data, &DVector::from_vec(vec![x_t]), t, s)?.mixture;
    let prior = marginal_q_xt(data, t - 1, s)?;
    let (alpha, beta) = (s.alpha(t), s.beta(t));
    let comps: Vec<(f64, f64)> = post.components().iter().map(|c| (c.mean()[0], c.cov()[(0, 0)])).collect();
    let lo = comps.iter().map(|(m, v)| m - 8.0 * v.sqrt()).fold(f64::INFINITY, f64::min);
    let hi = comps.iter().map(|(m, v)| m + 8.0 * v.sqrt()).fold(f64::NEG_INFINITY, f64::max);
    let h = 0.01 * comps.iter().map(|(_, v)| v.sqrt()).fold(f64::INFINITY, f64::min);
    let prior_pdf = |x: f64| -> f64 {
        prior
            .weights()
            .iter()
            .zip(prior.components())
            .map(|(w, c)| w * normal_pdf(x, c.mean()[0], c.cov()[(0, 0)]))
            .sum()
    };
    let unnorm = |x: f64| normal_pdf(x_t, alpha.sqrt() * x, beta) * prior_pdf(x);
    let z = trapezoid(lo, hi, h, unnorm);
    let post_pdf = |x: f64| -> f64 { post.weights().iter().zip(&comps).map(|(w, (m, v))| w * normal_pdf(x, *m, *v)).sum() };
    Ok(0.5 * trapezoid(lo, hi, h, |x| (post_pdf(x) - unnorm(x) / z).abs()))
}

fn posterior_grid_check(rng: &mut SmdRng, n: usize) -> Result<f64> {
    let s = make_schedule(50, 1e-3, 0.2, SigmaMode::Beta)?;
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let k = rng.random_range(1..4usize);
        let data = random_mixture_1d(rng, k);
        let t = rng.random_range(1..=50usize);
        let x_t = rng.random_range(-3.0..3.0);
        worst = worst.max(posterior_tv_1d(&data, x_t, t, &s)?);
    }
    Ok(worst)
}

fn unit_variance_posterior_check() -> Result<f64> {
    let s = make_schedule(100, 1e-3, 0.2, SigmaMode::Beta)?;
    let data = GaussianMixture::single(Gaussian::isotropic(DVector::from_vec(vec![1.0, -2.0]), 1.0)?);
    let mut worst: f64 = 0.0;
    for t in 1..=100 {
        let post = posterior_true(&data, &DVector::from_vec(vec![0.4, 0.1]), t, &s)?;
        let diff = post.mixture.components()[0].cov() - DMatrix::identity(2, 2) * (1.0 - s.alpha(t));
        worst = worst.max(diff.abs().max());
    }
    Ok(worst)
}

fn weight_normalization_check(rng: &mut SmdRng, n: usize) -> Result<f64> {
    let s = make_schedule(100, 1e-3, 0.2, SigmaMode::Beta)?;
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let k = rng.random_range(1..6usize);
        let data = random_mixture_1d(rng, k);
        let t = rng.random_range(1..=100usize);
        let post = posterior_true(&data, &DVector::from_vec(vec![rng.random_range(-6.0..6.0)]), t, &s)?;
        worst = worst.max((post.mixture.weights().iter().sum::<f64>() - 1.0).abs());
    }
    Ok(worst)
}

fn schedule_check() -> Result<f64> {
    let mut worst: f64 = 0.0;
    for mode in [SigmaMode::Beta, SigmaMode::BetaTilde] {
        let s = make_schedule(1000, 1e-4, 0.02, mode)?;
        for t in 1..=1000 {
            // violations count as errors; a clean schedule scores 0
            worst = worst.max((s.beta_tilde(t) - s.beta(t)).max(0.0));
            if !(s.gamma(t).is_finite() && s.gamma(t) > 0.0) {
                worst = f64::INFINITY;
            }
        }
    }
    Ok(worst)
}

/// Run the full suite with a fixed seed.
pub fn run_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let override_tol = std::env::var(TOL_OVERRIDE_ENV).ok().and_then(|v| v.parse::<f64>().ok());
    let mut rng = seeded(seed);
    let plan: Vec<(&str, f64, f64)> = vec![
        ("product_identity_pointwise", 1e-9, product_check(&mut rng, 200)?),
        ("rescale_identity_pointwise", 1e-9, rescale_check(&mut rng, 200)?),
        ("kl_gaussian_vs_grid", 1e-4, kl_grid_check(&mut rng, 200)?),
        ("cross_entropy_vs_grid", 1e-4, cross_entropy_grid_check(&mut rng, 50)?),
        ("posterior_vs_grid_bayes_tv", 1e-3, posterior_grid_check(&mut rng, 100)?),
        ("unit_variance_posterior_covariance", 1e-14, unit_variance_posterior_check()?),
        ("posterior_weight_normalization", 1e-8, weight_normalization_check(&mut rng, 500)?),
        ("schedule_identities", 0.0, schedule_check()?),
    ];
    Ok(plan
        .into_iter()
        .map(|(name, tol, err)| {
            let tol = override_tol.unwrap_or(tol);
            CheckResult { name: name.to_string(), max_err: err, tol, pass: err <= tol }
        })
        .collect())
}
