//! Likelihood-score guidance.
//!
//! The measurement likelihood is approximated as
//! `p(y | x_t) ≈ N(y; A·x₀|ₜ, c·AAᵀ + σ_y²I)` with `c = (1−ᾱ)/ᾱ`. Holding the
//! predicted noise fixed, its gradient with respect to `x_t` is
//!
//! ```text
//! ∇ log p(y|x_t) ≈ (1/√ᾱ) · Aᵀ (c·AAᵀ + σ_y²I)⁻¹ (y − A·x₀|ₜ)
//! ```
//!
//! which is positive along the data-consistency direction. The score refines
//! the predicted noise as `ε̂ = ε − μ·√(1−ᾱ)·score`.

use thiserror::Error;

use crate::denoiser::{DenoiserError, NoisePredictor};
use crate::linops::{LinearOperator, LinopError, SvdFactors};
use crate::schedule::DiffusionSchedule;
use crate::tensor::{ShapeError, Tensor};

/// Ridge added to `σ_y²` when a noiseless problem would otherwise need an
/// inexact solve of a possibly singular system.
pub const NOISELESS_RIDGE: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error("invalid guidance configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Linop(#[from] LinopError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error("{0} does not provide an exact noise Jacobian")]
    NoJacobian(String),
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GuidanceConfig {
    pub mu: f64,
    pub zeta: f64,
    pub sigma_y: f64,
    /// Use the Tweedie mean as `x₀|ₜ`; when off, `x_t/√ᾱ`.
    pub mean_correction: bool,
    /// Multiply the score by `1 − √(1−ᾱ)·∂ε/∂x_t` (analytic denoisers only).
    pub jacobian_term: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            mu: 1.0,
            zeta: 1.0,
            sigma_y: 0.0,
            mean_correction: true,
            jacobian_term: false,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<(), GuidanceError> {
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(GuidanceError::Config(format!("mu must be >= 0, got {}", self.mu)));
        }
        if !(0.0..=1.0).contains(&self.zeta) {
            return Err(GuidanceError::Config(format!("zeta must be in [0, 1], got {}", self.zeta)));
        }
        if !(self.sigma_y >= 0.0 && self.sigma_y.is_finite()) {
            return Err(GuidanceError::Config(format!("sigma_y must be >= 0, got {}", self.sigma_y)));
        }
        if self.jacobian_term && !self.mean_correction {
            return Err(GuidanceError::Config(
                "jacobian_term needs mean_correction: without it x0 does not depend on the noise".into(),
            ));
        }
        Ok(())
    }
}

/// How the kernel `(c·AAᵀ + σ²I)⁻¹` is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorePath {
    /// SVD for noiseless problems on operators without orthonormal rows,
    /// the operator's kernel solve otherwise.
    #[default]
    Auto,
    Kernel,
    Svd,
}

fn c_of(schedule: &DiffusionSchedule, t: usize) -> f64 {
    let ab = schedule.alpha_bar(t);
    (1.0 - ab) / ab
}

/// `x₀|ₜ = (x_t − √(1−ᾱ)·ε)/√ᾱ`. Accepts `t = 0`, where it is the identity.
pub fn tweedie_x0(schedule: &DiffusionSchedule, x_t: &Tensor, eps: &Tensor, t: usize) -> Tensor {
    let ab = schedule.alpha_bar(t);
    let (sa, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
    x_t.zip_map(eps, |x, e| (x - s1 * e) / sa)
}

/// `σ_y²`, or [`NOISELESS_RIDGE`] when a noiseless kernel solve is not
/// backed by orthonormal-row structure.
pub fn effective_sigma2(op: &dyn LinearOperator, sigma_y: f64) -> f64 {
    if sigma_y > 0.0 {
        sigma_y * sigma_y
    } else if op.capabilities().gram_scale.is_some() {
        0.0
    } else {
        log::debug!("sigma_y = 0 on {}: adding ridge {NOISELESS_RIDGE:e}", op.name());
        NOISELESS_RIDGE
    }
}

/// Frozen-noise likelihood score through the operator's kernel solve.
pub fn likelihood_score(
    op: &dyn LinearOperator,
    schedule: &DiffusionSchedule,
    cfg: &GuidanceConfig,
    x0_pred: &Tensor,
    y: &Tensor,
    t: usize,
) -> Result<Tensor, GuidanceError> {
    let residual = y.sub(&op.apply(x0_pred)?);
    let v = op.kernel_solve(c_of(schedule, t), effective_sigma2(op, cfg.sigma_y), &residual)?;
    Ok(op.adjoint(&v)?.scale(1.0 / schedule.alpha_bar(t).sqrt()))
}

/// Same score through SVD factors: `(1/√ᾱ)·V·Σ(cΣ² + σ²)⁻¹·Uᵀ(y − U Σ Vᵀ x₀)`.
///
/// Zero singular values contribute nothing, also when `σ_y = 0`.
pub fn likelihood_score_svd(
    factors: &dyn SvdFactors,
    schedule: &DiffusionSchedule,
    cfg: &GuidanceConfig,
    x0_pred: &Tensor,
    y: &Tensor,
    t: usize,
) -> Result<Tensor, GuidanceError> {
    let c = c_of(schedule, t);
    let s2 = cfg.sigma_y * cfg.sigma_y;
    let sv = factors.singular_values();
    let coeff_x = factors.right_adjoint(x0_pred.data());
    let coeff_y = factors.left_adjoint(y.data());
    if coeff_x.len() != sv.len() || coeff_y.len() != sv.len() {
        return Err(GuidanceError::Config("SVD factors do not match the tensors".into()));
    }
    let scaled: Vec<f64> = sv
        .iter()
        .zip(coeff_x.iter().zip(&coeff_y))
        .map(|(&s, (&cx, &cy))| {
            let d = c * s * s + s2;
            if s == 0.0 || d == 0.0 {
                0.0
            } else {
                s / d * (cy - s * cx)
            }
        })
        .collect();
    let out = factors.right_apply(&scaled);
    let inv = 1.0 / schedule.alpha_bar(t).sqrt();
    Ok(Tensor::new(x0_pred.shape().to_vec(), out.into_iter().map(|v| v * inv).collect())?)
}

/// Frozen-noise score scaled elementwise by `1 − √(1−ᾱ)·jac`.
pub fn likelihood_score_with_jacobian(
    op: &dyn LinearOperator,
    schedule: &DiffusionSchedule,
    cfg: &GuidanceConfig,
    x0_pred: &Tensor,
    jac: &Tensor,
    y: &Tensor,
    t: usize,
) -> Result<Tensor, GuidanceError> {
    jac.expect_shape(x0_pred.shape())?;
    let score = likelihood_score(op, schedule, cfg, x0_pred, y, t)?;
    Ok(apply_jacobian(schedule, &score, jac, t))
}

fn apply_jacobian(schedule: &DiffusionSchedule, score: &Tensor, jac: &Tensor, t: usize) -> Tensor {
    let s1 = (1.0 - schedule.alpha_bar(t)).sqrt();
    score.zip_map(jac, |s, j| s * (1.0 - s1 * j))
}

/// `ε̂ = ε − μ·√(1−ᾱ)·score`.
pub fn refine_noise(cfg: &GuidanceConfig, schedule: &DiffusionSchedule, eps: &Tensor, score: &Tensor, t: usize) -> Tensor {
    let k = cfg.mu * (1.0 - schedule.alpha_bar(t)).sqrt();
    eps.lincomb(1.0, score, -k)
}

/// `s = −ε/√(1−ᾱ)`.
pub fn score_from_noise(schedule: &DiffusionSchedule, eps: &Tensor, t: usize) -> Tensor {
    eps.scale(-1.0 / (1.0 - schedule.alpha_bar(t)).sqrt())
}

/// `ε = −√(1−ᾱ)·s`.
pub fn noise_from_score(schedule: &DiffusionSchedule, score: &Tensor, t: usize) -> Tensor {
    score.scale(-(1.0 - schedule.alpha_bar(t)).sqrt())
}

/// Everything one guided step computes at timestep `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceStep {
    pub eps: Tensor,
    pub x0_pred: Tensor,
    pub likelihood_score: Tensor,
    pub refined_noise: Tensor,
    pub x0_refined: Tensor,
}

/// Shared context of a guided restoration.
pub struct Guide<'a> {
    pub op: &'a dyn LinearOperator,
    pub schedule: &'a DiffusionSchedule,
    pub cfg: GuidanceConfig,
    pub y: &'a Tensor,
    pub path: ScorePath,
    factors: Option<Box<dyn SvdFactors + 'a>>,
}

impl<'a> Guide<'a> {
    pub fn new(
        op: &'a dyn LinearOperator,
        schedule: &'a DiffusionSchedule,
        cfg: GuidanceConfig,
        y: &'a Tensor,
        path: ScorePath,
    ) -> Result<Self, GuidanceError> {
        cfg.validate()?;
        y.expect_shape(op.output_shape())?;
        let caps = op.capabilities();
        let use_svd = match path {
            ScorePath::Svd => true,
            ScorePath::Kernel => false,
            ScorePath::Auto => cfg.sigma_y == 0.0 && caps.gram_scale.is_none() && caps.has_svd,
        };
        let factors = if use_svd { Some(op.svd_factors()?) } else { None };
        Ok(Self {
            op,
            schedule,
            cfg,
            y,
            path,
            factors,
        })
    }

    pub fn uses_svd(&self) -> bool {
        self.factors.is_some()
    }

    /// Frozen-noise score at `x0_pred`, by the configured path.
    pub fn score(&self, x0_pred: &Tensor, t: usize) -> Result<Tensor, GuidanceError> {
        match &self.factors {
            Some(f) => likelihood_score_svd(f.as_ref(), self.schedule, &self.cfg, x0_pred, self.y, t),
            None => likelihood_score(self.op, self.schedule, &self.cfg, x0_pred, self.y, t),
        }
    }

    /// Predicts the noise at `x_t` and refines it towards the measurement.
    pub fn step(&self, denoiser: &dyn NoisePredictor, x_t: &Tensor, t: usize) -> Result<GuidanceStep, GuidanceError> {
        let eps = denoiser.predict_noise(x_t, t)?;
        self.step_with_noise(denoiser, x_t, eps, t)
    }

    pub fn step_with_noise(
        &self,
        denoiser: &dyn NoisePredictor,
        x_t: &Tensor,
        eps: Tensor,
        t: usize,
    ) -> Result<GuidanceStep, GuidanceError> {
        let x0_pred = if self.cfg.mean_correction {
            tweedie_x0(self.schedule, x_t, &eps, t)
        } else {
            x_t.scale(1.0 / self.schedule.alpha_bar(t).sqrt())
        };
        let mut score = self.score(&x0_pred, t)?;
        if self.cfg.jacobian_term {
            let jac = denoiser
                .noise_jacobian(t)
                .ok_or_else(|| GuidanceError::NoJacobian(denoiser.name()))?;
            score = apply_jacobian(self.schedule, &score, &jac, t);
        }
        let refined_noise = refine_noise(&self.cfg, self.schedule, &eps, &score, t);
        let x0_refined = tweedie_x0(self.schedule, x_t, &refined_noise, t);
        Ok(GuidanceStep {
            eps,
            x0_pred,
            likelihood_score: score,
            refined_noise,
            x0_refined,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linops::{DenseOperator, Identity, ImageGeometry, SeparableResample};
    use crate::rng::NoiseRng;
    use crate::schedule::ScheduleParams;

    fn sched() -> DiffusionSchedule {
        ScheduleParams::default().build().unwrap()
    }

    fn cfg(sigma_y: f64) -> GuidanceConfig {
        GuidanceConfig {
            sigma_y,
            ..Default::default()
        }
    }

    /// `log N(y; A x0, c·AAᵀ + σ²I)` up to a constant, by dense algebra.
    fn dense_log_density(a: &nalgebra::DMatrix<f64>, c: f64, s2: f64, x0: &[f64], y: &[f64]) -> f64 {
        let m = a.nrows();
        let k = a * a.transpose() * c + nalgebra::DMatrix::identity(m, m) * s2;
        let r = nalgebra::DVector::from_column_slice(y) - a * nalgebra::DVector::from_column_slice(x0);
        let sol = k.cholesky().unwrap().solve(&r);
        -0.5 * r.dot(&sol)
    }

    #[test]
    fn tweedie_round_trip_and_endpoints() {
        let s = sched();
        let mut rng = NoiseRng::new(1, 0);
        let x0 = Tensor::new(vec![5], rng.normal_vec(5)).unwrap();
        let eps = Tensor::new(vec![5], rng.normal_vec(5)).unwrap();
        let t = 63;
        let ab = s.alpha_bar(t);
        let xt = x0.lincomb(ab.sqrt(), &eps, (1.0 - ab).sqrt());
        assert!(tweedie_x0(&s, &xt, &eps, t).rel_err(&x0) < 1e-14);
        assert_eq!(tweedie_x0(&s, &xt, &eps, 0), xt);
        let zero = Tensor::zeros(vec![5]);
        assert!(tweedie_x0(&s, &xt, &zero, t).rel_err(&xt.scale(1.0 / ab.sqrt())) < 1e-15);
    }

    #[test]
    fn identity_noiseless_reduction() {
        let s = sched();
        let op = Identity::new(vec![4]);
        let x0 = Tensor::from_vec(vec![0.1, 0.2, 0.3, 0.4]);
        let y = Tensor::from_vec(vec![0.0, 0.5, 0.3, 1.0]);
        let t = 20;
        let ab = s.alpha_bar(t);
        let got = likelihood_score(&op, &s, &cfg(0.0), &x0, &y, t).unwrap();
        let expect = y.sub(&x0).scale(ab.sqrt() / (1.0 - ab));
        assert!(got.rel_err(&expect) < 1e-13);
        let f = op.svd_factors().unwrap();
        let svd = likelihood_score_svd(f.as_ref(), &s, &cfg(0.0), &x0, &y, t).unwrap();
        assert!(svd.rel_err(&expect) < 1e-13);
        // consistent measurement gives zero
        let zero = likelihood_score(&op, &s, &cfg(0.1), &x0, &x0, t).unwrap();
        assert_eq!(zero.max_abs(), 0.0);
    }

    #[test]
    fn dense_score_matches_finite_differences() {
        let s = sched();
        let op = DenseOperator::random(12, 20, 5).unwrap();
        let mut rng = NoiseRng::new(2, 0);
        let x0 = Tensor::new(vec![20], rng.normal_vec(20)).unwrap();
        let y = Tensor::new(vec![12], rng.normal_vec(12)).unwrap();
        for t in [1, 50, 100] {
            let ab = s.alpha_bar(t);
            let c = (1.0 - ab) / ab;
            let score = likelihood_score(&op, &s, &cfg(0.05), &x0, &y, t).unwrap();
            // gradient with respect to x_t with ε frozen: x0 = (x_t − …)/√ᾱ
            let h = 1e-4;
            let mut fd = vec![0.0; 20];
            for i in 0..20 {
                let mut xp = x0.data().to_vec();
                let mut xm = x0.data().to_vec();
                xp[i] += h / ab.sqrt();
                xm[i] -= h / ab.sqrt();
                let lp = dense_log_density(op.matrix(), c, 0.0025, &xp, y.data());
                let lm = dense_log_density(op.matrix(), c, 0.0025, &xm, y.data());
                fd[i] = (lp - lm) / (2.0 * h);
            }
            let err = score.rel_err(&Tensor::from_vec(fd));
            assert!(err < 1e-5, "t={t} err={err}");
        }
    }

    #[test]
    fn svd_path_matches_kernel_path() {
        let s = sched();
        let op = SeparableResample::avg_pool(ImageGeometry::new(8, 8, 1), 2).unwrap();
        let mut rng = NoiseRng::new(3, 0);
        let x0 = rng.normal_tensor(&[8, 8, 1]);
        let y = rng.normal_tensor(&[4, 4, 1]);
        let f = op.svd_factors().unwrap();
        for t in [1, 50, 100] {
            let a = likelihood_score(&op, &s, &cfg(0.05), &x0, &y, t).unwrap();
            let b = likelihood_score_svd(f.as_ref(), &s, &cfg(0.05), &x0, &y, t).unwrap();
            assert!(a.rel_err(&b) < 1e-12);
        }
    }

    #[test]
    fn zero_singular_values_give_zero_score() {
        let s = sched();
        let op = DenseOperator::new(nalgebra::DMatrix::zeros(3, 5)).unwrap();
        let f = op.svd_factors().unwrap();
        let x0 = Tensor::full(vec![5], 0.3);
        let y = Tensor::full(vec![3], 1.0);
        let out = likelihood_score_svd(f.as_ref(), &s, &cfg(0.1), &x0, &y, 10).unwrap();
        assert_eq!(out.max_abs(), 0.0);
    }

    #[test]
    fn refinement_and_score_conversions() {
        let s = sched();
        let eps = Tensor::zeros(vec![3]);
        let ones = Tensor::full(vec![3], 1.0);
        // find a t with ᾱ near 0.75 is not needed: check the formula directly
        let t = 40;
        let k = (1.0 - s.alpha_bar(t)).sqrt();
        let c = GuidanceConfig {
            mu: 1.6,
            ..Default::default()
        };
        let r = refine_noise(&c, &s, &eps, &ones, t);
        assert!(r.data().iter().all(|v| (v + 1.6 * k).abs() < 1e-15));
        let off = GuidanceConfig { mu: 0.0, ..c };
        assert_eq!(refine_noise(&off, &s, &ones, &ones, t), ones);
        let back = noise_from_score(&s, &score_from_noise(&s, &ones, t), t);
        assert!(back.rel_err(&ones) < 1e-15);
        // μ = 1: score of refined noise = unconditional score + likelihood score
        let mut rng = NoiseRng::new(4, 0);
        let e = Tensor::new(vec![3], rng.normal_vec(3)).unwrap();
        let l = Tensor::new(vec![3], rng.normal_vec(3)).unwrap();
        let unit = GuidanceConfig::default();
        let lhs = score_from_noise(&s, &refine_noise(&unit, &s, &e, &l, t), t);
        let rhs = score_from_noise(&s, &e, t).add(&l);
        assert!(lhs.rel_err(&rhs) < 1e-14);
    }

    #[test]
    fn config_validation() {
        assert!(GuidanceConfig::default().validate().is_ok());
        assert!(GuidanceConfig { zeta: 2.0, ..Default::default() }.validate().is_err());
        assert!(GuidanceConfig { mu: -1.0, ..Default::default() }.validate().is_err());
        let bad = GuidanceConfig {
            mean_correction: false,
            jacobian_term: true,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
