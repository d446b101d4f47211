//! Plain-Rust implementations behind the browser exports.

use nalgebra::DVector;

use smd_core::forward::{make_schedule, posterior_true, NoiseSchedule, SigmaMode};
use smd_core::gmm::GaussianMixture;
use smd_core::metrics::{mode_metrics, sample_with_kernel, theorem1_demo, BestGaussian, ExactPosterior, ReverseKernel, Theorem1Config};
use smd_core::rng::seeded;
use smd_core::sampling::schedule_for_run;
use smd_core::{Error, Result};

/// Densities of one backward step on a shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCurves {
    pub xs: Vec<f64>,
    pub exact: Vec<f64>,
    pub gaussian: Vec<f64>,
}

fn one_step(beta: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::from_betas(vec![beta], SigmaMode::Beta)
}

/// Two unit-variance components at `±lambda`, one forward step of size
/// `beta`: the exact `q(x_0 | x_1)` next to the best fixed-variance Gaussian.
pub fn step_curves(lambda: f64, beta: f64, x_t: f64, points: usize) -> Result<StepCurves> {
    if points < 2 {
        return Err(Error::InvalidArgument("need at least two grid points".into()));
    }
    let s = one_step(beta)?;
    let data = Theorem1Config::default().mixture(lambda)?;
    let x = DVector::from_element(1, x_t);
    let post = posterior_true(&data, &x, 1, &s)?.mixture;
    let gauss = BestGaussian { data: &data }.step_distribution(&x, 1, &s, 1, &mut seeded(0))?;

    let spread = 5.0 * s.sigma(1).sqrt().max(post.covariance()[(0, 0)].sqrt());
    let centres = post.components().iter().map(|c| c.mean()[0]);
    let lo = centres.clone().fold(f64::INFINITY, f64::min) - spread;
    let hi = centres.fold(f64::NEG_INFINITY, f64::max) + spread;
    let step = (hi - lo) / (points - 1) as f64;
    let mut out = StepCurves { xs: Vec::with_capacity(points), exact: Vec::with_capacity(points), gaussian: Vec::with_capacity(points) };
    for i in 0..points {
        let y = DVector::from_element(1, lo + step * i as f64);
        out.exact.push(post.log_pdf(&y)?.exp());
        out.gaussian.push(gauss.log_pdf(&y)?.exp());
        out.xs.push(y[0]);
    }
    Ok(out)
}

/// Rows of `[lambda, bound, mc_error, mc_std_err]`.
pub fn bound_table(beta: f64, lambdas: &[f64], n_outer: usize, n_inner: usize, seed: u64) -> Result<Vec<[f64; 4]>> {
    let cfg = Theorem1Config { lambda_values: lambdas.to_vec(), ..Theorem1Config::default() };
    let rows = theorem1_demo(&cfg, &one_step(beta)?, n_outer, n_inner, &mut seeded(seed))?;
    Ok(rows.iter().map(|r| [r.lambda, r.bound, r.mc_m_t, r.mc_se]).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelChoice {
    Exact,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cloud {
    pub points: Vec<DVector<f64>>,
    pub mode_recall: f64,
}

/// Ancestral sampling on a square grid of isotropic Gaussians, walking
/// `t_used` evenly strided steps of a 100-step linear schedule.
pub fn grid_cloud(grid_size: usize, spacing: f64, std: f64, t_used: usize, n: usize, kernel: KernelChoice, seed: u64) -> Result<Cloud> {
    let data = GaussianMixture::grid(grid_size, spacing, std)?;
    let s = make_schedule(100, 1e-3, 0.2, SigmaMode::Beta)?;
    let walked = schedule_for_run(&s, Some(t_used))?;
    let exact = ExactPosterior { data: &data };
    let gauss = BestGaussian { data: &data };
    let k: &dyn ReverseKernel = match kernel {
        KernelChoice::Exact => &exact,
        KernelChoice::Gaussian => &gauss,
    };
    let points = sample_with_kernel(k, 2, &walked, n, 1, seed)?;
    let mode_recall = mode_metrics(&points, &data)?.mode_recall;
    Ok(Cloud { points, mode_recall })
}
