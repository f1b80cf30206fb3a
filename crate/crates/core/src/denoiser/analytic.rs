use super::{DenoiserError, NoisePredictor};
use crate::schedule::DiffusionSchedule;
use crate::tensor::Tensor;

/// `N(μ₀, diag c₀)` over images.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrior {
    mean: Tensor,
    variance: Tensor,
}

impl GaussianPrior {
    pub fn new(mean: Tensor, variance: Tensor) -> Result<Self, DenoiserError> {
        mean.expect_shape(variance.shape())?;
        if !mean.is_finite() {
            return Err(DenoiserError::Prior("mean has non-finite entries".into()));
        }
        if !variance.data().iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err(DenoiserError::Prior("variances must be positive and finite".into()));
        }
        Ok(Self { mean, variance })
    }

    /// Same mean and variance for every element.
    pub fn isotropic(shape: impl Into<Vec<usize>>, mean: f64, variance: f64) -> Result<Self, DenoiserError> {
        let shape = shape.into();
        Self::new(Tensor::full(shape.clone(), mean), Tensor::full(shape, variance))
    }

    pub fn mean(&self) -> &Tensor {
        &self.mean
    }

    pub fn variance(&self) -> &Tensor {
        &self.variance
    }

    pub fn shape(&self) -> &[usize] {
        self.mean.shape()
    }
}

/// `E[x₀ | x_t]` under `x_t = √ᾱ x₀ + √(1−ᾱ) ε`, elementwise.
pub fn conditional_mean(
    prior: &GaussianPrior,
    schedule: &DiffusionSchedule,
    x_t: &Tensor,
    t: usize,
) -> Result<Tensor, DenoiserError> {
    schedule.check_timestep(t)?;
    x_t.expect_shape(prior.shape())?;
    let ab = schedule.alpha_bar(t);
    let sa = ab.sqrt();
    let data = x_t
        .data()
        .iter()
        .zip(prior.mean.data())
        .zip(prior.variance.data())
        .map(|((&x, &m), &c)| (sa * c * x + (1.0 - ab) * m) / (ab * c + 1.0 - ab))
        .collect();
    Ok(Tensor::new(x_t.shape().to_vec(), data)?)
}

/// `Var[x₀ | x_t] = c₀(1−ᾱ) / (ᾱc₀ + 1 − ᾱ)`, elementwise; independent of `x_t`.
pub fn posterior_variance(prior: &GaussianPrior, schedule: &DiffusionSchedule, t: usize) -> Tensor {
    let ab = schedule.alpha_bar(t);
    prior.variance.map(|c| c * (1.0 - ab) / (ab * c + 1.0 - ab))
}

/// The MMSE noise predictor `ε* = (x_t − √ᾱ·E[x₀|x_t]) / √(1−ᾱ)`.
pub fn analytic_predict_noise(
    prior: &GaussianPrior,
    schedule: &DiffusionSchedule,
    x_t: &Tensor,
    t: usize,
) -> Result<Tensor, DenoiserError> {
    let m = conditional_mean(prior, schedule, x_t, t)?;
    let ab = schedule.alpha_bar(t);
    let (sa, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x_t.zip_map(&m, |x, m| (x - sa * m) / s1))
}

/// Diagonal of `∂ε*/∂x_t = √(1−ᾱ) / (ᾱc₀ + 1 − ᾱ)`.
pub fn analytic_noise_jacobian(prior: &GaussianPrior, schedule: &DiffusionSchedule, t: usize) -> Tensor {
    let ab = schedule.alpha_bar(t);
    let s1 = (1.0 - ab).sqrt();
    prior.variance.map(|c| s1 / (ab * c + 1.0 - ab))
}

/// `∇ log p(x_t)` of the marginal `N(√ᾱμ₀, ᾱc₀ + 1 − ᾱ)`.
pub fn marginal_score(
    prior: &GaussianPrior,
    schedule: &DiffusionSchedule,
    x_t: &Tensor,
    t: usize,
) -> Result<Tensor, DenoiserError> {
    schedule.check_timestep(t)?;
    x_t.expect_shape(prior.shape())?;
    let ab = schedule.alpha_bar(t);
    let sa = ab.sqrt();
    let data = x_t
        .data()
        .iter()
        .zip(prior.mean.data())
        .zip(prior.variance.data())
        .map(|((&x, &m), &c)| -(x - sa * m) / (ab * c + 1.0 - ab))
        .collect();
    Ok(Tensor::new(x_t.shape().to_vec(), data)?)
}

/// Exact denoiser of the Gaussian lab.
#[derive(Debug, Clone)]
pub struct AnalyticDenoiser {
    prior: GaussianPrior,
    schedule: DiffusionSchedule,
}

impl AnalyticDenoiser {
    pub fn new(prior: GaussianPrior, schedule: DiffusionSchedule) -> Self {
        Self { prior, schedule }
    }

    pub fn prior(&self) -> &GaussianPrior {
        &self.prior
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }
}

impl NoisePredictor for AnalyticDenoiser {
    fn name(&self) -> String {
        "analytic".into()
    }

    fn predict_noise(&self, x_t: &Tensor, t: usize) -> Result<Tensor, DenoiserError> {
        analytic_predict_noise(&self.prior, &self.schedule, x_t, t)
    }

    fn noise_jacobian(&self, t: usize) -> Option<Tensor> {
        Some(analytic_noise_jacobian(&self.prior, &self.schedule, t))
    }
}
