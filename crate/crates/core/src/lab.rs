//! Closed-form quantities of the Gaussian lab.
//!
//! Under the prior `x₀ ~ N(μ₀, diag c₀)` and `y = A x₀ + σ_y·g`, the posterior
//! mean, the exact likelihood `p(y | x_t)` and its score are all available in
//! closed form (up to a linear solve), which is what the oracles compare the
//! guided samplers and the approximate scores against.

use crate::denoiser::{conditional_mean, posterior_variance, DenoiserError, GaussianPrior};
use crate::linops::{conjugate_gradient, LinearOperator, LinopError};
use crate::rng::NoiseRng;
use crate::schedule::DiffusionSchedule;
use crate::tensor::Tensor;

/// Relative residual for the lab's conjugate-gradient solves.
pub const LAB_SOLVE_TOL: f64 = 1e-13;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error(transparent)]
    Linop(#[from] LinopError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Shape(#[from] crate::tensor::ShapeError),
}

/// `(A·diag(d)·Aᵀ + σ²I)⁻¹ r` by conjugate gradients.
pub fn weighted_kernel_solve(op: &dyn LinearOperator, d: &[f64], sigma2: f64, r: &[f64]) -> Result<Vec<f64>, LinopError> {
    let gram = |v: &[f64]| -> Vec<f64> {
        let mut w = op.adjoint_slice(v);
        w.iter_mut().zip(d).for_each(|(w, d)| *w *= d);
        op.apply_slice(&w).iter().zip(v).map(|(g, v)| g + sigma2 * v).collect()
    };
    // the lab tolerance sits near rounding level; allow a few extra sweeps
    let out = conjugate_gradient(gram, r, LAB_SOLVE_TOL, 20 * r.len().max(10));
    if out.converged || out.relative_residual < 1e-11 {
        Ok(out.solution)
    } else {
        Err(LinopError::NotConverged {
            iterations: out.iterations,
            residual: out.relative_residual,
        })
    }
}

/// `E[x₀ | y] = μ₀ + C₀Aᵀ(A C₀ Aᵀ + σ_y²I)⁻¹(y − Aμ₀)`.
pub fn posterior_mean(op: &dyn LinearOperator, prior: &GaussianPrior, y: &Tensor, sigma_y: f64) -> Result<Tensor, LabError> {
    let r = y.sub(&op.apply(prior.mean())?);
    let v = weighted_kernel_solve(op, prior.variance().data(), sigma_y * sigma_y, r.data())?;
    let mut out = op.adjoint_slice(&v);
    for ((o, c), m) in out.iter_mut().zip(prior.variance().data()).zip(prior.mean().data()) {
        *o = m + c * *o;
    }
    Ok(Tensor::new(prior.shape().to_vec(), out)?)
}

/// `Aᵀy + (I − AᵀA)μ₀`: the measurement lifted back, completed by the prior mean.
pub fn adjoint_lifted(op: &dyn LinearOperator, prior: &GaussianPrior, y: &Tensor) -> Result<Tensor, LabError> {
    let aty = op.adjoint(y)?;
    let ata_mu = op.adjoint(&op.apply(prior.mean())?)?;
    Ok(aty.add(prior.mean()).sub(&ata_mu))
}

/// Quadratic part of the exact `log p(y | x_t)`,
/// `−½ rᵀ K⁻¹ r` with `r = y − A·E[x₀|x_t]` and `K = A·Var[x₀|x_t]·Aᵀ + σ_y²I`.
/// The omitted log-determinant does not depend on `x_t`.
pub fn exact_log_likelihood(
    op: &dyn LinearOperator,
    prior: &GaussianPrior,
    schedule: &DiffusionSchedule,
    x_t: &Tensor,
    y: &Tensor,
    sigma_y: f64,
    t: usize,
) -> Result<f64, LabError> {
    let m = conditional_mean(prior, schedule, x_t, t)?;
    let r = y.sub(&op.apply(&m)?);
    let p = posterior_variance(prior, schedule, t);
    let v = weighted_kernel_solve(op, p.data(), sigma_y * sigma_y, r.data())?;
    Ok(-0.5 * crate::tensor::dot(r.data(), &v))
}

/// Exact `∇_{x_t} log p(y | x_t)`:
/// `diag(∂m/∂x_t)·Aᵀ K⁻¹ (y − A·E[x₀|x_t])`, `∂m/∂x_t = √ᾱc₀/(ᾱc₀ + 1 − ᾱ)`.
pub fn exact_likelihood_score(
    op: &dyn LinearOperator,
    prior: &GaussianPrior,
    schedule: &DiffusionSchedule,
    x_t: &Tensor,
    y: &Tensor,
    sigma_y: f64,
    t: usize,
) -> Result<Tensor, LabError> {
    let m = conditional_mean(prior, schedule, x_t, t)?;
    let r = y.sub(&op.apply(&m)?);
    let p = posterior_variance(prior, schedule, t);
    let v = weighted_kernel_solve(op, p.data(), sigma_y * sigma_y, r.data())?;
    let ab = schedule.alpha_bar(t);
    let sa = ab.sqrt();
    let mut g = op.adjoint_slice(&v);
    for (g, &c) in g.iter_mut().zip(prior.variance().data()) {
        *g *= sa * c / (ab * c + 1.0 - ab);
    }
    Ok(Tensor::new(x_t.shape().to_vec(), g)?)
}

/// True measurement noise under which the fixed-covariance approximation,
/// run with assumed noise `σ_y`, is exact for an operator with `AAᵀ = I` and
/// an isotropic prior variance `c₀`: `σ² = σ_y² + c − p` where
/// `c = (1−ᾱ)/ᾱ` and `p = Var[x₀|x_t]`.
pub fn matched_noise_sigma(schedule: &DiffusionSchedule, c0: f64, sigma_y: f64, t: usize) -> f64 {
    let ab = schedule.alpha_bar(t);
    let c = (1.0 - ab) / ab;
    let p = c0 * (1.0 - ab) / (ab * c0 + 1.0 - ab);
    (sigma_y * sigma_y + c - p).sqrt()
}

/// Prior with seeded means in `[lo, hi]` and variances log-uniform in `[v_lo, v_hi]`.
pub fn random_prior(shape: &[usize], seed: u64, (lo, hi): (f64, f64), (v_lo, v_hi): (f64, f64)) -> GaussianPrior {
    let mut rng = NoiseRng::new(seed, crate::rng::STREAM_OPERATOR);
    let n: usize = shape.iter().product();
    let mean = (0..n).map(|_| lo + (hi - lo) * rng.uniform()).collect();
    let (a, b) = (v_lo.ln(), v_hi.ln());
    let var = (0..n).map(|_| (a + (b - a) * rng.uniform()).exp()).collect();
    GaussianPrior::new(Tensor::new(shape.to_vec(), mean).unwrap(), Tensor::new(shape.to_vec(), var).unwrap())
        .expect("positive variances")
}

/// Draws `x₀` from the prior.
pub fn sample_prior(prior: &GaussianPrior, rng: &mut NoiseRng) -> Tensor {
    let g = rng.normal_tensor(prior.shape());
    let data = g
        .data()
        .iter()
        .zip(prior.mean().data())
        .zip(prior.variance().data())
        .map(|((g, m), c)| m + c.sqrt() * g)
        .collect();
    Tensor::new(prior.shape().to_vec(), data).unwrap()
}

/// Sample moments of a scalar statistic with their standard errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
    pub se_mean: f64,
    pub se_variance: f64,
}

impl Moments {
    pub fn of(samples: &[f64]) -> Self {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let m2 = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let m4 = samples.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
        let variance = m2 * n / (n - 1.0);
        Self {
            mean,
            variance,
            se_mean: (variance / n).sqrt(),
            se_variance: ((m4 - m2 * m2) / n).max(0.0).sqrt(),
        }
    }

    /// Whether both moments lie within `k` standard errors of the targets.
    pub fn within(&self, mean: f64, variance: f64, k: f64) -> bool {
        (self.mean - mean).abs() <= k * self.se_mean && (self.variance - variance).abs() <= k * self.se_variance
    }
}

/// Two-stage Gaussian chain `z₁ ~ N(z₀, V₁)`, `z₂ ~ N(α·z₁, V₂)`; returns the moments of `z₂`.
///
/// The composition has marginal `N(α·z₀, α²V₁ + V₂)`.
pub fn gaussian_chain(z0: f64, v1: f64, alpha: f64, v2: f64, draws: usize, seed: u64) -> Moments {
    let mut rng = NoiseRng::new(seed, crate::rng::STREAM_STEPS);
    let samples: Vec<f64> = (0..draws)
        .map(|_| {
            let z1 = z0 + v1.sqrt() * rng.standard_normal();
            alpha * z1 + v2.sqrt() * rng.standard_normal()
        })
        .collect();
    Moments::of(&samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linops::{to_dense, BlockCs, ImageGeometry};
    use crate::schedule::ScheduleParams;
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn posterior_mean_matches_dense_formula() {
        let g = ImageGeometry::new(8, 8, 1);
        let op = BlockCs::new(g, 0.5, 4, 2).unwrap();
        let prior = random_prior(&g.shape(), 1, (0.2, 0.8), (0.01, 0.1));
        let mut rng = NoiseRng::new(3, 0);
        let y = rng.normal_tensor(op.output_shape());
        let got = posterior_mean(&op, &prior, &y, 0.05).unwrap();
        let a = to_dense(&op);
        let c0 = DMatrix::from_diagonal(&DVector::from_column_slice(prior.variance().data()));
        let mu = DVector::from_column_slice(prior.mean().data());
        let k = &a * &c0 * a.transpose() + DMatrix::identity(a.nrows(), a.nrows()) * 0.0025;
        let r = DVector::from_column_slice(y.data()) - &a * &mu;
        let expect = mu + &c0 * a.transpose() * k.cholesky().unwrap().solve(&r);
        let expect = Tensor::new(g.shape(), expect.as_slice().to_vec()).unwrap();
        assert!(got.rel_err(&expect) < 1e-11);
    }

    #[test]
    fn exact_score_matches_finite_differences() {
        let s = ScheduleParams::default().build().unwrap();
        let g = ImageGeometry::new(4, 4, 1);
        let op = BlockCs::new(g, 0.5, 4, 9).unwrap();
        let prior = random_prior(&g.shape(), 4, (0.0, 1.0), (0.01, 1.0));
        let mut rng = NoiseRng::new(5, 0);
        let x = rng.normal_tensor(&g.shape());
        let y = rng.normal_tensor(op.output_shape());
        for t in [1, 50, 100] {
            let score = exact_likelihood_score(&op, &prior, &s, &x, &y, 0.1, t).unwrap();
            let h = 1e-5;
            let fd: Vec<f64> = (0..16)
                .map(|i| {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp.data_mut()[i] += h;
                    xm.data_mut()[i] -= h;
                    let lp = exact_log_likelihood(&op, &prior, &s, &xp, &y, 0.1, t).unwrap();
                    let lm = exact_log_likelihood(&op, &prior, &s, &xm, &y, 0.1, t).unwrap();
                    (lp - lm) / (2.0 * h)
                })
                .collect();
            let err = score.rel_err(&Tensor::from_vec(fd).reshape(g.shape()).unwrap());
            assert!(err < 1e-6, "t={t} err={err}");
        }
    }

    #[test]
    fn chain_moments() {
        let m = gaussian_chain(0.3, 0.5, 0.8, 0.2, 100_000, 7);
        assert!(m.within(0.24, 0.64 * 0.5 + 0.2, 3.0), "{m:?}");
    }

    #[test]
    fn lifted_baseline_on_orthonormal_rows() {
        let g = ImageGeometry::new(4, 4, 1);
        let op = BlockCs::new(g, 0.5, 4, 1).unwrap();
        let prior = GaussianPrior::isotropic(g.shape(), 0.5, 0.1).unwrap();
        let x = Tensor::full(g.shape(), 0.5);
        // A x = y with x = μ₀ gives back μ₀
        let y = op.apply(&x).unwrap();
        assert!(adjoint_lifted(&op, &prior, &y).unwrap().rel_err(&x) < 1e-12);
    }
}
