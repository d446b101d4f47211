//! Multivariate Gaussians and Gaussian mixtures.
//!
//! Covariances are stored as full matrices with a cached Cholesky factor.
//! Densities are evaluated in the log domain; mixture densities go through
//! log-sum-exp so far-tail points stay finite.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;

use crate::error::{Error, Result};
use crate::rng::{normal_dvector, SmdRng};
use crate::stats::{log_sum_exp, McEstimate};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

const SYMMETRY_TOL: f64 = 1e-12;
const WEIGHT_SUM_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct Gaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::InvalidArgument("zero-dimensional Gaussian".into()));
        }
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::DimensionMismatch { expected: d, got: cov.nrows().max(cov.ncols()) });
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Gaussian parameters".into()));
        }
        let mut asym = 0.0f64;
        for i in 0..d {
            for j in 0..i {
                asym = asym.max((cov[(i, j)] - cov[(j, i)]).abs());
            }
        }
        if asym > SYMMETRY_TOL {
            return Err(Error::NotSymmetric(asym));
        }
        let chol = cov
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite("Cholesky factorization failed"))?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        if !log_det.is_finite() {
            return Err(Error::NotPositiveDefinite("log-determinant not finite"));
        }
        Ok(Self { mean, cov, chol, log_det })
    }

    /// `N(mean, variance * I)`.
    pub fn isotropic(mean: DVector<f64>, variance: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, DMatrix::identity(d, d) * variance)
    }

    /// One-dimensional `N(mean, variance)`.
    pub fn scalar(mean: f64, variance: f64) -> Result<Self> {
        Self::new(DVector::from_element(1, mean), DMatrix::from_element(1, 1, variance))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Lower-triangular Cholesky factor of the covariance.
    pub fn chol_factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got });
        }
        Ok(())
    }

    fn mahalanobis_sq(&self, x: &DVector<f64>) -> f64 {
        let diff = x - &self.mean;
        let y = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&diff)
            .expect("Cholesky factor has a positive diagonal");
        y.norm_squared()
    }

    pub fn log_pdf(&self, x: &DVector<f64>) -> Result<f64> {
        self.check_dim(x.len())?;
        Ok(self.log_pdf_unchecked(x))
    }

    pub(crate) fn log_pdf_unchecked(&self, x: &DVector<f64>) -> f64 {
        -0.5 * (self.dim() as f64 * LN_2PI + self.log_det + self.mahalanobis_sq(x))
    }

    /// Differential entropy `½ ln|2πe Σ|`.
    pub fn entropy(&self) -> f64 {
        0.5 * (self.dim() as f64 * (1.0 + LN_2PI) + self.log_det)
    }

    /// `Σ⁻¹ b`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn precision(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    pub fn sample(&self, rng: &mut SmdRng) -> DVector<f64> {
        let z = normal_dvector(rng, self.dim());
        &self.mean + self.chol.l_dirty().lower_triangle() * z
    }
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// `exp(log_scale) · pdf(gaussian)`.
#[derive(Debug, Clone)]
pub struct ScaledGaussian {
    pub log_scale: f64,
    pub gaussian: Gaussian,
}

impl ScaledGaussian {
    pub fn log_value(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(self.log_scale + self.gaussian.log_pdf(x)?)
    }
}

pub fn gaussian_log_pdf(x: &DVector<f64>, g: &Gaussian) -> Result<f64> {
    g.log_pdf(x)
}

/// Pointwise product of two Gaussian densities:
/// `N(x; μ1, Σ1) N(x; μ2, Σ2) = N(μ2; μ1, Σ1+Σ2) · N(x; μ, Σ)` with
/// `Σ = (Σ1⁻¹ + Σ2⁻¹)⁻¹` and `μ = Σ (Σ1⁻¹ μ1 + Σ2⁻¹ μ2)`.
///
/// The result is computed through `S = Σ1 + Σ2` as `Σ = Σ1 S⁻¹ Σ2`,
/// `μ = Σ2 S⁻¹ μ1 + Σ1 S⁻¹ μ2`, which stays accurate when one factor is
/// nearly flat.
pub fn gaussian_product(g1: &Gaussian, g2: &Gaussian) -> Result<ScaledGaussian> {
    g1.check_dim(g2.dim())?;
    let sum = Gaussian::new(g1.mean.clone(), symmetrize(&(&g1.cov + &g2.cov)))?;
    let log_scale = sum.log_pdf_unchecked(&g2.mean);

    let s_inv_s2 = sum.solve(&g2.cov);
    let cov = symmetrize(&(&g1.cov * &s_inv_s2));
    let s_inv_mu1 = sum.chol.solve(&g1.mean);
    let s_inv_mu2 = sum.chol.solve(&g2.mean);
    let mean = &g2.cov * s_inv_mu1 + &g1.cov * s_inv_mu2;
    Ok(ScaledGaussian { log_scale, gaussian: Gaussian::new(mean, cov)? })
}

/// Scaling identity `N(x; λμ, Σ) = λ^{-D} N(μ; x/λ, Σ/λ²)`.
///
/// Returns `log_scale = -D ln λ` and `gaussian = N(μ, Σ/λ²)`; the identity
/// reads `N(x; λμ, Σ) = exp(log_scale) · pdf(gaussian)(x/λ)`, which is the
/// right-hand side by symmetry of the Gaussian in its mean and argument.
pub fn gaussian_rescale(lambda: f64, g: &Gaussian) -> Result<ScaledGaussian> {
    if !lambda.is_finite() || lambda <= 0.0 {
        return Err(Error::InvalidArgument(format!("rescale factor must be positive, got {lambda}")));
    }
    let d = g.dim() as f64;
    let cov = &g.cov / (lambda * lambda);
    Ok(ScaledGaussian { log_scale: -d * lambda.ln(), gaussian: Gaussian::new(g.mean.clone(), cov)? })
}

/// `KL[p ‖ q]` in closed form.
pub fn kl_gaussian_gaussian(p: &Gaussian, q: &Gaussian) -> Result<f64> {
    p.check_dim(q.dim())?;
    let d = p.dim() as f64;
    let trace = q.solve(&p.cov).trace();
    let maha = q.mahalanobis_sq(&p.mean);
    Ok(0.5 * (q.log_det - p.log_det - d + maha + trace))
}

#[derive(Debug, Clone)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    components: Vec<Gaussian>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, components: Vec<Gaussian>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::EmptyMixture);
        }
        if weights.len() != components.len() {
            return Err(Error::InvalidWeights(format!(
                "{} weights for {} components",
                weights.len(),
                components.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w <= 0.0) {
            return Err(Error::InvalidWeights("all weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidWeights(format!("weights sum to {total}")));
        }
        Self::check_dims(&components)?;
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self { weights, log_weights, components })
    }

    /// Build from unnormalized log-weights. Components whose weight underflows
    /// keep their finite log-weight, so densities stay exact in the log domain.
    pub fn from_log_weights(log_weights: Vec<f64>, components: Vec<Gaussian>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::EmptyMixture);
        }
        if log_weights.len() != components.len() {
            return Err(Error::InvalidWeights("log-weight count differs from component count".into()));
        }
        if log_weights.iter().any(|w| w.is_nan() || *w == f64::INFINITY) {
            return Err(Error::NonFinite("mixture log-weights".into()));
        }
        Self::check_dims(&components)?;
        let norm = log_sum_exp(&log_weights);
        if !norm.is_finite() {
            return Err(Error::InvalidWeights("all log-weights are -inf".into()));
        }
        let log_weights: Vec<f64> = log_weights.iter().map(|w| w - norm).collect();
        let weights = log_weights.iter().map(|w| w.exp()).collect();
        Ok(Self { weights, log_weights, components })
    }

    pub fn single(g: Gaussian) -> Self {
        Self { weights: vec![1.0], log_weights: vec![0.0], components: vec![g] }
    }

    /// Equal-weight mixture of isotropic Gaussians on an `n × n` grid centred at
    /// the origin.
    pub fn grid(n: usize, spacing: f64, std: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyMixture);
        }
        let offset = (n as f64 - 1.0) / 2.0;
        let mut comps = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let mean = DVector::from_vec(vec![
                    (i as f64 - offset) * spacing,
                    (j as f64 - offset) * spacing,
                ]);
                comps.push(Gaussian::isotropic(mean, std * std)?);
            }
        }
        let k = comps.len();
        Self::new(vec![1.0 / k as f64; k], comps)
    }

    fn check_dims(components: &[Gaussian]) -> Result<()> {
        let d = components[0].dim();
        if let Some(c) = components.iter().find(|c| c.dim() != d) {
            return Err(Error::DimensionMismatch { expected: d, got: c.dim() });
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn components(&self) -> &[Gaussian] {
        &self.components
    }

    pub fn mean(&self) -> DVector<f64> {
        self.components
            .iter()
            .zip(&self.weights)
            .fold(DVector::zeros(self.dim()), |acc, (c, w)| acc + c.mean() * *w)
    }

    /// Overall covariance: within-component plus between-component spread.
    pub fn covariance(&self) -> DMatrix<f64> {
        let m = self.mean();
        let d = self.dim();
        let mut cov = DMatrix::zeros(d, d);
        for (c, w) in self.components.iter().zip(&self.weights) {
            let diff = c.mean() - &m;
            cov += (c.cov() + &diff * diff.transpose()) * *w;
        }
        symmetrize(&cov)
    }

    /// Single Gaussian with the mixture's first two moments.
    pub fn moment_matched(&self) -> Result<Gaussian> {
        Gaussian::new(self.mean(), self.covariance())
    }

    pub fn log_pdf(&self, x: &DVector<f64>) -> Result<f64> {
        self.components[0].check_dim(x.len())?;
        Ok(self.log_pdf_unchecked(x))
    }

    pub(crate) fn log_pdf_unchecked(&self, x: &DVector<f64>) -> f64 {
        let terms: Vec<f64> = self
            .components
            .iter()
            .zip(&self.log_weights)
            .map(|(c, lw)| lw + c.log_pdf_unchecked(x))
            .collect();
        log_sum_exp(&terms)
    }

    /// Per-component responsibilities at `x`, normalized in the log domain.
    pub fn responsibilities(&self, x: &DVector<f64>) -> Result<Vec<f64>> {
        self.components[0].check_dim(x.len())?;
        let terms: Vec<f64> = self
            .components
            .iter()
            .zip(&self.log_weights)
            .map(|(c, lw)| lw + c.log_pdf_unchecked(x))
            .collect();
        let norm = log_sum_exp(&terms);
        Ok(terms.iter().map(|t| (t - norm).exp()).collect())
    }

    pub fn sample(&self, rng: &mut SmdRng) -> DVector<f64> {
        if self.len() == 1 {
            return self.components[0].sample(rng);
        }
        let index = WeightedIndex::new(&self.weights).expect("weights are validated");
        self.components[index.sample(rng)].sample(rng)
    }

    /// Draw `n` samples together with the index of the component each came from.
    pub fn sample_labeled(&self, rng: &mut SmdRng, n: usize) -> Vec<(usize, DVector<f64>)> {
        let index = WeightedIndex::new(&self.weights).expect("weights are validated");
        (0..n)
            .map(|_| {
                let k = index.sample(rng);
                (k, self.components[k].sample(rng))
            })
            .collect()
    }
}

pub fn mixture_log_pdf(x: &DVector<f64>, m: &GaussianMixture) -> Result<f64> {
    if m.is_empty() {
        return Err(Error::EmptyMixture);
    }
    m.log_pdf(x)
}

pub fn mixture_sample(m: &GaussianMixture, rng: &mut SmdRng, n: usize) -> Result<Vec<DVector<f64>>> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    Ok(m.sample_labeled(rng, n).into_iter().map(|(_, x)| x).collect())
}

/// `-E_m[ln g]`, expanded per component as `KL(N_k ‖ g) + H(N_k)`.
pub fn cross_entropy_mixture_gaussian(m: &GaussianMixture, g: &Gaussian) -> Result<f64> {
    let mut total = 0.0;
    for (c, w) in m.components().iter().zip(m.weights()) {
        if *w == 0.0 {
            continue;
        }
        total += w * (kl_gaussian_gaussian(c, g)? + c.entropy());
    }
    Ok(total)
}

/// `Σ_k w_k (-ln w_k + ½ ln|2πe Σ_k|)`, an upper bound on the mixture entropy.
pub fn mixture_entropy_upper_bound(m: &GaussianMixture) -> f64 {
    m.components()
        .iter()
        .zip(m.weights().iter().zip(m.log_weights()))
        .filter(|(_, (w, _))| **w > 0.0)
        .map(|(c, (w, lw))| w * (-lw + c.entropy()))
        .sum()
}

/// Monte-Carlo differential entropy `-E_m[ln m(x)]`.
pub fn mixture_entropy_mc(m: &GaussianMixture, rng: &mut SmdRng, n: usize) -> Result<McEstimate> {
    if n < 2 {
        return Err(Error::InvalidArgument("need at least 2 samples".into()));
    }
    let values: Vec<f64> = (0..n).map(|_| -m.log_pdf_unchecked(&m.sample(rng))).collect();
    Ok(McEstimate::from_samples(&values))
}

/// Monte-Carlo `KL[target ‖ approx] = E_target[ln target - ln approx]`.
pub fn kl_mixture_target_mc<F>(
    target: &GaussianMixture,
    mut approx_log_pdf: F,
    rng: &mut SmdRng,
    n: usize,
) -> Result<McEstimate>
where
    F: FnMut(&DVector<f64>) -> f64,
{
    if n < 100 {
        return Err(Error::InvalidArgument(format!("KL estimate needs n >= 100, got {n}")));
    }
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        let x = target.sample(rng);
        let approx = approx_log_pdf(&x);
        if !approx.is_finite() {
            return Err(Error::NonFinite(format!("approximate log-density at {:?}", x.as_slice())));
        }
        values.push(target.log_pdf_unchecked(&x) - approx);
    }
    Ok(McEstimate::from_samples(&values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    fn g1(mean: f64, var: f64) -> Gaussian {
        Gaussian::scalar(mean, var).unwrap()
    }

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_vec(xs.to_vec())
    }

    #[test]
    fn standard_normal_at_zero() {
        let lp = gaussian_log_pdf(&v(&[0.0]), &g1(0.0, 1.0)).unwrap();
        assert!((lp - (-0.918_938_533_204_672_8)).abs() < 1e-12);
    }

    #[test]
    fn log_pdf_at_mean_is_half_log_det_2pi_sigma() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.5]);
        let g = Gaussian::new(v(&[1.0, -2.0]), cov.clone()).unwrap();
        let expected = -0.5 * (cov * (2.0 * std::f64::consts::PI)).determinant().ln();
        assert!((g.log_pdf(&v(&[1.0, -2.0])).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn non_pd_and_asymmetric_covariances_are_errors() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(Gaussian::new(v(&[0.0, 0.0]), bad), Err(Error::NotPositiveDefinite(_))));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.2, 1.0]);
        assert!(matches!(Gaussian::new(v(&[0.0, 0.0]), asym), Err(Error::NotSymmetric(_))));
        assert!(matches!(Gaussian::scalar(0.0, 0.0), Err(Error::NotPositiveDefinite(_))));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let g = g1(0.0, 1.0);
        assert!(matches!(g.log_pdf(&v(&[0.0, 1.0])), Err(Error::DimensionMismatch { .. })));
        let g2 = Gaussian::isotropic(v(&[0.0, 0.0]), 1.0).unwrap();
        assert!(gaussian_product(&g, &g2).is_err());
    }

    #[test]
    fn product_of_identical_standard_normals() {
        let p = gaussian_product(&g1(0.0, 1.0), &g1(0.0, 1.0)).unwrap();
        assert!((p.log_scale.exp() - 0.282_094_791_773_878_1).abs() < 1e-12);
        assert!(p.gaussian.mean()[0].abs() < 1e-15);
        assert!((p.gaussian.cov()[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn product_with_flat_factor_returns_first() {
        let a = g1(1.5, 0.7);
        let flat = g1(-0.3, 1e6);
        let p = gaussian_product(&a, &flat).unwrap();
        assert!((p.gaussian.mean()[0] - 1.5).abs() < 1e-5);
        assert!((p.gaussian.cov()[(0, 0)] - 0.7).abs() < 1e-5);
        let expected = flat.log_pdf(&v(&[1.5])).unwrap();
        assert!((p.log_scale - expected).abs() < 1e-6);
    }

    #[test]
    fn rescale_by_one_is_identity() {
        let g = Gaussian::isotropic(v(&[1.0, 2.0]), 0.3).unwrap();
        let s = gaussian_rescale(1.0, &g).unwrap();
        assert_eq!(s.log_scale, 0.0);
        assert_eq!(s.gaussian.mean(), g.mean());
        assert_eq!(s.gaussian.cov(), g.cov());
    }

    #[test]
    fn rescale_rejects_nonpositive_factor() {
        let g = g1(0.0, 1.0);
        assert!(gaussian_rescale(0.0, &g).is_err());
        assert!(gaussian_rescale(-1.0, &g).is_err());
    }

    #[test]
    fn rescale_pointwise_at_x_equals_one() {
        // N(1; 2·0, 1) against 2^{-1} N(0; 1/2, 1/4)
        let g = g1(0.0, 1.0);
        let s = gaussian_rescale(2.0, &g).unwrap();
        let lhs = Gaussian::scalar(0.0, 1.0).unwrap().log_pdf(&v(&[1.0])).unwrap().exp();
        let rhs = (-(2f64.ln())).exp()
            * (-0.5 * ((0.0f64 - 0.5).powi(2) / 0.25) - 0.5 * (2.0 * std::f64::consts::PI * 0.25).ln()).exp();
        assert!((lhs - rhs).abs() < 1e-12);
        assert!((s.log_value(&v(&[0.5])).unwrap().exp() - lhs).abs() < 1e-12);
    }

    #[test]
    fn rescale_matches_on_grid_for_sqrt_alpha() {
        let lambda = 0.9f64.sqrt();
        let g = g1(3.0, 0.04);
        let s = gaussian_rescale(lambda, &g).unwrap();
        let lhs_g = g1(lambda * 3.0, 0.04);
        for i in 0..50 {
            let x = 2.0 + i as f64 * 0.04;
            let lhs = lhs_g.log_pdf(&v(&[x])).unwrap();
            let rhs = s.log_value(&v(&[x / lambda])).unwrap();
            assert!(rel_err(rhs.exp(), lhs.exp()) < 1e-10, "x={x}");
        }
    }

    #[test]
    fn kl_closed_forms() {
        assert!(kl_gaussian_gaussian(&g1(0.3, 2.0), &g1(0.3, 2.0)).unwrap().abs() < 1e-12);
        assert!((kl_gaussian_gaussian(&g1(0.0, 1.0), &g1(1.0, 1.0)).unwrap() - 0.5).abs() < 1e-14);
    }

    #[test]
    fn single_component_mixture_matches_gaussian() {
        let g = Gaussian::new(v(&[0.5, -1.0]), DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.3])).unwrap();
        let m = GaussianMixture::single(g.clone());
        let x = v(&[0.1, 0.2]);
        assert!((mixture_log_pdf(&x, &m).unwrap() - g.log_pdf(&x).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn symmetric_two_component_mixture_at_origin() {
        let m = GaussianMixture::new(vec![0.5, 0.5], vec![g1(-1.0, 1.0), g1(1.0, 1.0)]).unwrap();
        // direct summation: 0.5 φ(1) + 0.5 φ(-1) = φ(1)
        let phi1 = (-0.5f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
        assert!((mixture_log_pdf(&v(&[0.0]), &m).unwrap() - phi1.ln()).abs() < 1e-14);
    }

    #[test]
    fn far_tail_mixture_density_is_finite() {
        let m = GaussianMixture::new(vec![0.5, 0.5], vec![g1(-1.0, 1.0), g1(1.0, 1.0)]).unwrap();
        for x in [-50.0, 50.0] {
            let lp = mixture_log_pdf(&v(&[x]), &m).unwrap();
            assert!(lp.is_finite());
            assert!(lp < -1000.0);
        }
    }

    #[test]
    fn invalid_mixtures_are_rejected() {
        assert!(matches!(GaussianMixture::new(vec![], vec![]), Err(Error::EmptyMixture)));
        assert!(GaussianMixture::new(vec![0.5, 0.6], vec![g1(0.0, 1.0), g1(1.0, 1.0)]).is_err());
        assert!(GaussianMixture::new(vec![1.0, 0.0], vec![g1(0.0, 1.0), g1(1.0, 1.0)]).is_err());
        assert!(GaussianMixture::new(
            vec![0.5, 0.5],
            vec![g1(0.0, 1.0), Gaussian::isotropic(v(&[0.0, 0.0]), 1.0).unwrap()]
        )
        .is_err());
    }

    #[test]
    fn standard_normal_sample_moments() {
        let m = GaussianMixture::single(g1(0.0, 1.0));
        let xs = mixture_sample(&m, &mut seeded(3), 100_000).unwrap();
        let vals: Vec<f64> = xs.iter().map(|x| x[0]).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = crate::stats::sample_variance(&vals);
        assert!(mean.abs() < 0.02);
        assert!((var - 1.0).abs() < 0.02);
    }

    #[test]
    fn degenerate_weights_draw_from_first_component() {
        let m = GaussianMixture::new(vec![1.0 - 1e-15, 1e-15], vec![g1(0.0, 1e-4), g1(100.0, 1e-4)]).unwrap();
        let labeled = m.sample_labeled(&mut seeded(1), 10_000);
        assert!(labeled.iter().all(|(k, x)| *k == 0 && x[0].abs() < 1.0));
    }

    #[test]
    fn grid_component_frequencies_within_multinomial_bounds() {
        let m = GaussianMixture::grid(7, 2.0, 0.1).unwrap();
        let n = 49_000;
        let labeled = m.sample_labeled(&mut seeded(11), n);
        let mut counts = vec![0usize; 49];
        for (k, _) in &labeled {
            counts[*k] += 1;
        }
        let p = 1.0 / 49.0;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * sd + 1.0, "count {c}");
        }
    }

    #[test]
    fn sample_count_zero_is_error() {
        let m = GaussianMixture::single(g1(0.0, 1.0));
        assert!(mixture_sample(&m, &mut seeded(0), 0).is_err());
    }

    #[test]
    fn cross_entropy_with_itself_is_entropy() {
        let g = Gaussian::new(v(&[0.5, -1.0]), DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.3])).unwrap();
        let ce = cross_entropy_mixture_gaussian(&GaussianMixture::single(g.clone()), &g).unwrap();
        assert!((ce - g.entropy()).abs() < 1e-12);
    }

    #[test]
    fn entropy_bound_is_exact_for_one_component() {
        let g = g1(2.0, 0.25);
        let bound = mixture_entropy_upper_bound(&GaussianMixture::single(g));
        let exact = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * 0.25).ln();
        assert!((bound - exact).abs() < 1e-12);
    }

    #[test]
    fn mc_kl_rejects_small_n_and_nonfinite_approx() {
        let m = GaussianMixture::single(g1(0.0, 1.0));
        assert!(kl_mixture_target_mc(&m, |_| 0.0, &mut seeded(0), 10).is_err());
        assert!(matches!(
            kl_mixture_target_mc(&m, |_| f64::NAN, &mut seeded(0), 100),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn from_log_weights_normalizes() {
        let m = GaussianMixture::from_log_weights(vec![-1000.0, -1000.0 + 2f64.ln()], vec![g1(0.0, 1.0), g1(1.0, 1.0)])
            .unwrap();
        assert!((m.weights()[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((m.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
