//! Oracle suites: numerical checks of the guidance maths, the samplers and
//! the denoiser protocol against closed-form or brute-force references.
//!
//! Each suite returns a [`SuiteReport`] of named checks with the measured
//! value and the bound it was held to.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::denoiser::{analytic_predict_noise, AnalyticDenoiser, DenoiserError, ExternalDenoiser, GaussianPrior, NoisePredictor};
use crate::forward::degrade;
use crate::guidance::{
    effective_sigma2, likelihood_score, likelihood_score_svd, tweedie_x0, GuidanceConfig, GuidanceError, Guide,
    ScorePath,
};
use crate::lab::{
    adjoint_lifted, exact_likelihood_score, gaussian_chain, matched_noise_sigma, posterior_mean, random_prior,
    sample_prior, LabError, Moments,
};
use crate::linops::{to_dense, BlockCs, DenseOperator, Identity, ImageGeometry, Kernel, LinearOperator, LinopError, OperatorDescriptor};
use crate::metrics::psnr;
use crate::rng::{mix_seed, NoiseRng};
use crate::samplers::{self, RunSpec, SamplerError, SamplerKind};
use crate::schedule::{uniform_timestep_plan, DiffusionSchedule, ScheduleError, ScheduleParams};
use crate::tensor::{ShapeError, Tensor};

pub const SUITES: [&str; 11] = [
    "fd_gradient",
    "path_equivalence",
    "jacobian_assumption",
    "gaussian_marginal",
    "mmse_optimality",
    "exactness",
    "posterior_recovery",
    "determinism",
    "ablation",
    "unguided",
    "protocol",
];

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("unknown suite {0:?}")]
    UnknownSuite(String),
    #[error("suite {0} needs a peer command")]
    NoPeer(&'static str),
    #[error(transparent)]
    Linop(#[from] LinopError),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Lab(#[from] LabError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    /// `value ≤ bound`.
    fn at_most(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self::new(name, value <= bound, format!("{value:.3e} <= {bound:.0e}"))
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub suite: String,
    pub checks: Vec<Check>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

impl std::fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for c in &self.checks {
            writeln!(f, "  [{}] {}: {}", if c.passed { "ok" } else { "FAIL" }, c.name, c.detail)?;
        }
        write!(
            f,
            "{} {}: {}/{} checks in {:.2?}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.suite,
            self.checks.iter().filter(|c| c.passed).count(),
            self.checks.len(),
            self.elapsed
        )
    }
}

/// Inputs some suites need from the caller.
#[derive(Debug, Clone, Default)]
pub struct VerifyOptions {
    /// Program and arguments of a protocol peer; `--mode <m>` is appended.
    pub peer_command: Option<Vec<String>>,
    /// Motion kernel for the operator suites; a built-in streak otherwise.
    pub motion_kernel: Option<Kernel>,
}

pub fn run_suite(name: &str, opts: &VerifyOptions) -> Result<SuiteReport, VerifyError> {
    let start = Instant::now();
    let checks = match name {
        "fd_gradient" => fd_gradient(opts)?,
        "path_equivalence" => path_equivalence(opts)?,
        "jacobian_assumption" => jacobian_assumption()?,
        "gaussian_marginal" => gaussian_marginal(),
        "mmse_optimality" => mmse_optimality()?,
        "exactness" => exactness()?,
        "posterior_recovery" => posterior_recovery()?,
        "determinism" => determinism()?,
        "ablation" => ablation()?,
        "unguided" => unguided()?,
        "protocol" => protocol(opts.peer_command.as_deref().ok_or(VerifyError::NoPeer("protocol"))?)?,
        other => return Err(VerifyError::UnknownSuite(other.to_string())),
    };
    let elapsed = start.elapsed();
    let mut report = SuiteReport {
        suite: name.to_string(),
        checks,
        elapsed,
    };
    let budget = match name {
        "fd_gradient" => Some(60.0),
        "exactness" => Some(10.0),
        _ => None,
    };
    if let Some(b) = budget {
        report
            .checks
            .push(Check::at_most("runtime seconds", elapsed.as_secs_f64(), b));
    }
    Ok(report)
}

/// A short curved streak on a 9×9 grid, normalized to unit sum.
pub fn streak_kernel() -> Kernel {
    let n = 9;
    let mut v = vec![0.0; n * n];
    let c = (n / 2) as f64;
    for s in 0..=64 {
        let u = s as f64 / 64.0 - 0.5;
        let (px, py) = (c + 7.0 * u, c + 3.0 * u + 4.0 * u * u);
        let (x0, y0) = (px.floor(), py.floor());
        let (fx, fy) = (px - x0, py - y0);
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
                let (i, j) = ((y0 + dy) as usize, (x0 + dx) as usize);
                if i < n && j < n {
                    v[i * n + j] += wx * wy;
                }
            }
        }
    }
    Kernel::new(n, n, v).and_then(Kernel::normalized).expect("nonempty streak")
}

fn shipped_operators(opts: &VerifyOptions, g: ImageGeometry) -> Result<Vec<(String, Box<dyn LinearOperator>)>, LinopError> {
    let block = g.height.min(g.width);
    let descs = [
        OperatorDescriptor::Identity,
        OperatorDescriptor::Mask { keep: 0.5, seed: 1 },
        OperatorDescriptor::Cs { ratio: 0.05, block, seed: 7 },
        OperatorDescriptor::Cs { ratio: 0.10, block, seed: 7 },
        OperatorDescriptor::Cs { ratio: 0.25, block, seed: 7 },
        OperatorDescriptor::GaussianBlur { size: 5, std: 10.0 },
        OperatorDescriptor::MotionBlur {
            kernel: opts.motion_kernel.clone().unwrap_or_else(streak_kernel),
            source: None,
        },
        OperatorDescriptor::AvgPool { factor: 4 },
    ];
    descs.iter().map(|d| Ok((d.to_string(), d.build(g)?))).collect()
}

fn default_schedule() -> DiffusionSchedule {
    ScheduleParams::default().build().expect("default schedule")
}

fn rel(a: &Tensor, b: &Tensor) -> f64 {
    a.sub(b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

/// Frozen-noise log-density `−½ rᵀ(cAAᵀ + σ²I)⁻¹r` with `r = y − A·x₀|ₜ(x_t)`.
fn frozen_log_density(
    op: &dyn LinearOperator,
    s: &DiffusionSchedule,
    sigma2: f64,
    x_t: &Tensor,
    eps: &Tensor,
    y: &Tensor,
    t: usize,
) -> Result<f64, LinopError> {
    let ab = s.alpha_bar(t);
    let r = y.sub(&op.apply(&tweedie_x0(s, x_t, eps, t))?);
    let v = op.kernel_solve((1.0 - ab) / ab, sigma2, &r)?;
    Ok(-0.5 * r.dot(&v))
}

fn fd_gradient(opts: &VerifyOptions) -> Result<Vec<Check>, VerifyError> {
    let g = ImageGeometry::new(16, 16, 1);
    let s = default_schedule();
    let big_t = s.num_steps();
    let prior = random_prior(&g.shape(), 3, (0.2, 0.8), (0.01, 0.05));
    let den = AnalyticDenoiser::new(prior.clone(), s.clone());
    let mut checks = Vec::new();
    for (k, (name, op)) in shipped_operators(opts, g)?.into_iter().enumerate() {
        for sigma_y in [0.05, 0.0] {
            let cfg = GuidanceConfig {
                sigma_y,
                ..GuidanceConfig::default()
            };
            let sigma2 = effective_sigma2(op.as_ref(), sigma_y);
            let mut worst: f64 = 0.0;
            for t in [1, big_t / 2, big_t] {
                let seed = mix_seed(k as u64, t as u64);
                let mut rng = NoiseRng::new(seed, 0);
                let x0 = sample_prior(&prior, &mut rng);
                let y = degrade(op.as_ref(), &x0, sigma_y, seed)?;
                let ab = s.alpha_bar(t);
                let x_t = x0.lincomb(ab.sqrt(), &rng.normal_tensor(&g.shape()), (1.0 - ab).sqrt());
                let eps = den.predict_noise(&x_t, t)?;
                let score = likelihood_score(op.as_ref(), &s, &cfg, &tweedie_x0(&s, &x_t, &eps, t), &y, t)?;
                let gn = score.norm();
                let mut dirs = vec![score.scale(1.0 / gn)];
                for _ in 0..4 {
                    let d = rng.normal_tensor(&g.shape());
                    dirs.push(d.scale(1.0 / d.norm()));
                }
                let h = 1e-2 * ab.sqrt();
                for d in dirs {
                    let lp = frozen_log_density(op.as_ref(), &s, sigma2, &x_t.lincomb(1.0, &d, h), &eps, &y, t)?;
                    let lm = frozen_log_density(op.as_ref(), &s, sigma2, &x_t.lincomb(1.0, &d, -h), &eps, &y, t)?;
                    let fd = (lp - lm) / (2.0 * h);
                    worst = worst.max((fd - score.dot(&d)).abs() / gn);
                }
            }
            checks.push(Check::at_most(format!("{name} sigma_y={sigma_y}"), worst, 1e-5));
        }
    }
    Ok(checks)
}

/// `(1/√ᾱ)·Aᵀ(cAAᵀ + σ²I)⁻¹(y − A x₀)` with a dense Cholesky factorization.
fn dense_score(a: &DMatrix<f64>, s: &DiffusionSchedule, sigma2: f64, x0: &Tensor, y: &Tensor, t: usize) -> Option<Vec<f64>> {
    let ab = s.alpha_bar(t);
    let c = (1.0 - ab) / ab;
    let m = a.nrows();
    let k = a * a.transpose() * c + DMatrix::identity(m, m) * sigma2;
    let r = DVector::from_column_slice(y.data()) - a * DVector::from_column_slice(x0.data());
    let v = k.cholesky()?.solve(&r);
    Some((a.transpose() * v / ab.sqrt()).as_slice().to_vec())
}

fn path_equivalence(opts: &VerifyOptions) -> Result<Vec<Check>, VerifyError> {
    let g = ImageGeometry::new(12, 12, 1);
    let s = default_schedule();
    let mut ops: Vec<(String, Box<dyn LinearOperator>)> = vec![
        OperatorDescriptor::Identity,
        OperatorDescriptor::Mask { keep: 0.4, seed: 2 },
        OperatorDescriptor::Cs { ratio: 0.25, block: 4, seed: 5 },
        OperatorDescriptor::GaussianBlur { size: 5, std: 10.0 },
        OperatorDescriptor::MotionBlur {
            kernel: opts.motion_kernel.clone().unwrap_or_else(streak_kernel),
            source: None,
        },
        OperatorDescriptor::AvgPool { factor: 4 },
        OperatorDescriptor::AvgPool { factor: 2 },
    ]
    .into_iter()
    .map(|d| Ok((d.to_string(), d.build(g)?)))
    .collect::<Result<_, LinopError>>()?;
    ops.push(("dense 50x144".into(), Box::new(DenseOperator::random(50, g.len(), 4)?)));

    let mut checks = Vec::new();
    for (k, (name, op)) in ops.iter().enumerate() {
        if !op.capabilities().has_svd {
            continue;
        }
        let a = to_dense(op.as_ref());
        let factors = op.svd_factors()?;
        let n = op.input_dim();
        let mut rng = NoiseRng::new(mix_seed(11, k as u64), 0);
        let (mut svd_err, mut iter_err, mut kernel_err): (f64, f64, f64) = (0.0, 0.0, 0.0);
        for trial in 0..20 {
            let t = 1 + (rng.next_u64() % s.num_steps() as u64) as usize;
            // orthonormal-row operators are also compared without noise
            let sigma_y = if trial % 2 == 1 && op.capabilities().gram_scale.is_some() { 0.0 } else { 0.05 };
            let cfg = GuidanceConfig {
                sigma_y,
                ..GuidanceConfig::default()
            };
            let x0 = Tensor::new(op.input_shape().to_vec(), rng.normal_vec(n))?;
            let y = Tensor::new(op.output_shape().to_vec(), rng.normal_vec(op.output_dim()))?;
            let sigma2 = sigma_y * sigma_y;
            let dense = dense_score(&a, &s, sigma2, &x0, &y, t).ok_or(LinopError::Singular)?;
            let dense = Tensor::new(op.input_shape().to_vec(), dense)?;
            let svd = likelihood_score_svd(factors.as_ref(), &s, &cfg, &x0, &y, t)?;
            svd_err = svd_err.max(rel(&svd, &dense));
            let kernel = likelihood_score(op.as_ref(), &s, &cfg, &x0, &y, t)?;
            kernel_err = kernel_err.max(rel(&kernel, &dense));
            let ab = s.alpha_bar(t);
            let r = y.sub(&op.apply(&x0)?);
            let v = op.kernel_solve_iterative((1.0 - ab) / ab, sigma2, &r, 1e-13, 50 * op.output_dim())?;
            let iterative = op.adjoint(&v)?.scale(1.0 / ab.sqrt());
            iter_err = iter_err.max(rel(&iterative, &dense));
        }
        checks.push(Check::at_most(format!("{name} svd vs dense"), svd_err, 1e-8));
        checks.push(Check::at_most(format!("{name} iterative vs dense"), iter_err, 1e-8));
        checks.push(Check::at_most(format!("{name} kernel solve vs dense"), kernel_err, 1e-8));
    }
    Ok(checks)
}

/// Scores at prior variance `c0` against the exact likelihood, returning
/// `(corrected error, uncorrected deviation, closed form of the deviation)`.
///
/// The measurement carries noise `σ_true² = σ_y² + c − p` while guidance
/// assumes `σ_y`, which makes the fixed-covariance Gaussian exact.
fn jacobian_errors(c0: f64, t: usize) -> Result<(f64, f64, f64), VerifyError> {
    let g = ImageGeometry::new(8, 8, 1);
    let s = default_schedule();
    let op = lab_cs(g)?;
    let prior = GaussianPrior::isotropic(g.shape(), 0.5, c0)?;
    let den = AnalyticDenoiser::new(prior.clone(), s.clone());
    let sigma_y = 0.05;
    let sigma_true = matched_noise_sigma(&s, c0, sigma_y, t);
    let mut rng = NoiseRng::new(mix_seed(c0.to_bits(), t as u64), 0);
    let x0 = sample_prior(&prior, &mut rng);
    let y = degrade(&op, &x0, sigma_true, 5)?;
    let ab = s.alpha_bar(t);
    let x_t = x0.lincomb(ab.sqrt(), &rng.normal_tensor(&g.shape()), (1.0 - ab).sqrt());
    let exact = exact_likelihood_score(&op, &prior, &s, &x_t, &y, sigma_true, t)?;
    let score = |jacobian_term: bool| -> Result<Tensor, VerifyError> {
        let cfg = GuidanceConfig {
            sigma_y,
            jacobian_term,
            ..GuidanceConfig::default()
        };
        Ok(Guide::new(&op, &s, cfg, &y, ScorePath::Kernel)?
            .step(&den, &x_t, t)?
            .likelihood_score)
    };
    let corrected = rel(&score(true)?, &exact);
    let plain = rel(&score(false)?, &exact);
    Ok((corrected, plain, (1.0 - ab) / (ab * c0)))
}

/// CS with `AAᵀ = I` for the lab suites.
fn lab_cs(g: ImageGeometry) -> Result<BlockCs, LinopError> {
    BlockCs::new(g, 0.25, 4, 9)
}

fn jacobian_assumption() -> Result<Vec<Check>, VerifyError> {
    let s = default_schedule();
    let big_t = s.num_steps();
    let mut checks = Vec::new();
    for c0 in [0.01, 1.0, 100.0] {
        let mut worst: f64 = 0.0;
        for t in [1, big_t / 4, big_t / 2, 3 * big_t / 4, big_t] {
            worst = worst.max(jacobian_errors(c0, t)?.0);
        }
        checks.push(Check::at_most(format!("corrected score vs exact, c0={c0}"), worst, 1e-6));
    }
    let t = big_t / 2;
    let mut devs = Vec::new();
    for c0 in [0.01, 1.0, 100.0] {
        let (_, dev, closed) = jacobian_errors(c0, t)?;
        checks.push(Check::new(
            format!("jac=0 deviation at t={t}, c0={c0}"),
            dev > 0.0 && ((dev - closed) / closed).abs() < 1e-6,
            format!("{dev:.6e} (closed form {closed:.6e})"),
        ));
        devs.push(dev);
    }
    checks.push(Check::new(
        "jac=0 deviation decreases with c0",
        devs.windows(2).all(|w| w[1] < w[0]),
        devs.iter().map(|d| format!("{d:.3e}")).collect::<Vec<_>>().join(", "),
    ));
    Ok(checks)
}

fn gaussian_marginal() -> Vec<Check> {
    let mut rng = NoiseRng::new(2024, 0);
    (0..5)
        .map(|i| {
            let alpha = 0.1 + 0.9 * rng.uniform();
            let v1 = 0.01 + 2.0 * rng.uniform();
            let v2 = 0.01 + 2.0 * rng.uniform();
            let z0 = -2.0 + 4.0 * rng.uniform();
            let m = gaussian_chain(z0, v1, alpha, v2, 100_000, mix_seed(77, i));
            let (mean, var) = (alpha * z0, alpha * alpha * v1 + v2);
            Check::new(
                format!("alpha={alpha:.3} V1={v1:.3} V2={v2:.3} z0={z0:.3}"),
                m.within(mean, var, 3.0),
                format!(
                    "mean {:+.2} SE, variance {:+.2} SE",
                    (m.mean - mean) / m.se_mean,
                    (m.variance - var) / m.se_variance
                ),
            )
        })
        .collect()
}

fn mmse_optimality() -> Result<Vec<Check>, VerifyError> {
    let s = default_schedule();
    let n = 100_000;
    let (m0, c0) = (0.5, 0.05);
    let prior = GaussianPrior::isotropic(vec![n], m0, c0)?;
    let wrong_var = GaussianPrior::isotropic(vec![n], m0, 4.0 * c0)?;
    let wrong_mean = GaussianPrior::isotropic(vec![n], m0 + 0.2, c0)?;
    let mut checks = Vec::new();
    for t in [10, 50, 100] {
        let mut rng = NoiseRng::new(mix_seed(5, t as u64), 0);
        let x0 = sample_prior(&prior, &mut rng);
        let eps = rng.normal_tensor(&[n]);
        let ab = s.alpha_bar(t);
        let x_t = x0.lincomb(ab.sqrt(), &eps, (1.0 - ab).sqrt());
        let best = analytic_predict_noise(&prior, &s, &x_t, t)?;
        let perturbed: [(&str, Tensor); 5] = [
            ("scaled 1.1", best.scale(1.1)),
            ("offset 0.1", best.map(|v| v + 0.1)),
            ("prior variance x4", analytic_predict_noise(&wrong_var, &s, &x_t, t)?),
            ("prior mean +0.2", analytic_predict_noise(&wrong_mean, &s, &x_t, t)?),
            ("nonlinear", best.zip_map(&x_t, |e, x| e + 0.1 * (3.0 * x).sin())),
        ];
        let base: Vec<f64> = best.zip_map(&eps, |a, b| (a - b) * (a - b)).into_data();
        for (name, p) in perturbed {
            let diff: Vec<f64> = p
                .zip_map(&eps, |a, b| (a - b) * (a - b))
                .data()
                .iter()
                .zip(&base)
                .map(|(a, b)| a - b)
                .collect();
            let m = Moments::of(&diff);
            let z = m.mean / m.se_mean;
            checks.push(Check::new(
                format!("t={t} vs {name}"),
                z > 3.0,
                format!("MSE excess {:.3e} = {z:.1} SE", m.mean),
            ));
        }
    }
    Ok(checks)
}

fn restore(
    kind: SamplerKind,
    op: &dyn LinearOperator,
    s: &DiffusionSchedule,
    den: &dyn NoisePredictor,
    y: &Tensor,
    cfg: GuidanceConfig,
    seed: u64,
) -> Result<samplers::Trajectory, VerifyError> {
    let plan = uniform_timestep_plan(s, s.num_steps())?;
    let mut spec = RunSpec::new(kind, s, &plan, op, y, den);
    spec.guidance = cfg;
    spec.seed = seed;
    Ok(samplers::run(&spec)?)
}

fn exactness() -> Result<Vec<Check>, VerifyError> {
    let g = ImageGeometry::new(32, 32, 1);
    let s = default_schedule();
    let op = BlockCs::new(g, 1.0, 32, 3)?;
    let prior = random_prior(&g.shape(), 11, (0.2, 0.8), (0.01, 0.05));
    let den = AnalyticDenoiser::new(prior.clone(), s.clone());
    let x0 = sample_prior(&prior, &mut NoiseRng::new(12, 0));
    let y = degrade(&op, &x0, 0.0, 0)?;
    let target = op.adjoint(&y)?;
    let out = restore(SamplerKind::IdNrlg, &op, &s, &den, &y, GuidanceConfig::default(), 1)?;
    let x = &out.final_x0;
    let db = psnr(x, &target, 1.0).unwrap_or(f64::NAN);
    Ok(vec![
        Check::at_most("relative error vs A^-1 y", rel(x, &target), 1e-3),
        Check::new("PSNR vs A^-1 y", db >= 50.0, format!("{db:.1} dB >= 50 dB")),
    ])
}

fn posterior_recovery() -> Result<Vec<Check>, VerifyError> {
    let g = ImageGeometry::new(16, 16, 1);
    let s = default_schedule();
    let op = BlockCs::new(g, 0.5, 8, 21)?;
    let sigma_y = 0.05;
    let mut checks = Vec::new();
    for seed in 0..10u64 {
        let prior = random_prior(&g.shape(), mix_seed(100, seed), (0.2, 0.8), (0.005, 0.05));
        let den = AnalyticDenoiser::new(prior.clone(), s.clone());
        let x0 = sample_prior(&prior, &mut NoiseRng::new(seed, 0));
        let y = degrade(&op, &x0, sigma_y, seed)?;
        let post = posterior_mean(&op, &prior, &y, sigma_y)?;
        let lifted = adjoint_lifted(&op, &prior, &y)?;
        let cfg = GuidanceConfig {
            sigma_y,
            ..GuidanceConfig::default()
        };
        let out = restore(SamplerKind::IdNrlg, &op, &s, &den, &y, cfg, seed)?;
        let (d_nrlg, d_lift) = (out.final_x0.sub(&post).norm(), lifted.sub(&post).norm());
        checks.push(Check::new(
            format!("seed {seed}"),
            d_nrlg < d_lift,
            format!("|x - post| = {d_nrlg:.4e} vs baseline {d_lift:.4e}"),
        ));
    }
    Ok(checks)
}

fn determinism() -> Result<Vec<Check>, VerifyError> {
    let g = ImageGeometry::new(8, 8, 1);
    let s = default_schedule();
    let op = lab_cs(g)?;
    let prior = random_prior(&g.shape(), 4, (0.2, 0.8), (0.01, 0.05));
    let den = AnalyticDenoiser::new(prior.clone(), s.clone());
    let x0 = sample_prior(&prior, &mut NoiseRng::new(1, 0));
    let sigma_y = 0.05;
    let y = degrade(&op, &x0, sigma_y, 2)?;
    let plan = uniform_timestep_plan(&s, 25)?;
    let cfg = GuidanceConfig {
        sigma_y,
        zeta: 0.6,
        ..GuidanceConfig::default()
    };
    let mut checks = Vec::new();
    for kind in SamplerKind::ALL {
        let mut spec = RunSpec::new(kind, &s, &plan, &op, &y, &den);
        spec.guidance = cfg;
        spec.seed = 42;
        spec.snapshot_stride = Some(5);
        spec.dps_rho = 0.1;
        let (a, b) = (samplers::run(&spec)?, samplers::run(&spec)?);
        checks.push(Check::new(format!("{kind} bit-reproducible"), a == b, "two runs compared"));
    }
    for kind in [SamplerKind::DdNrlg, SamplerKind::DdimUncond] {
        let mut spec = RunSpec::new(kind, &s, &plan, &op, &y, &den);
        spec.guidance = GuidanceConfig { zeta: 0.0, ..cfg };
        spec.seed = 42;
        spec.noise_seed = Some(1);
        let a = samplers::run(&spec)?;
        spec.noise_seed = Some(2);
        let b = samplers::run(&spec)?;
        checks.push(Check::new(
            format!("{kind} zeta=0 ignores reseeding"),
            a.final_x0 == b.final_x0 && a.residuals == b.residuals && a.injected.count == 0,
            format!("{} values injected", a.injected.count),
        ));
    }
    Ok(checks)
}

fn ablation() -> Result<Vec<Check>, VerifyError> {
    let g = ImageGeometry::new(8, 8, 1);
    let s = default_schedule();
    let op = Identity::new(g.shape());
    let cfg = GuidanceConfig {
        mu: 0.5,
        ..GuidanceConfig::default()
    };
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in 0..10u64 {
        let prior = random_prior(&g.shape(), mix_seed(200, seed), (0.2, 0.8), (0.01, 0.05));
        let den = AnalyticDenoiser::new(prior.clone(), s.clone());
        let y = sample_prior(&prior, &mut NoiseRng::new(seed, 0));
        let dd = restore(SamplerKind::DdNrlg, &op, &s, &den, &y, cfg, seed)?;
        let da = restore(SamplerKind::DirectAdjust, &op, &s, &den, &y, cfg, seed)?;
        let (a, b) = (dd.final_residual().unwrap_or(f64::NAN), da.final_residual().unwrap_or(f64::NAN));
        if a <= b {
            wins += 1;
        }
        detail.push(format!("{a:.2e}/{b:.2e}"));
    }
    Ok(vec![Check::new(
        "dd_nrlg residual <= direct_adjust residual",
        wins >= 8,
        format!("{wins}/10 seeds (dd/direct: {})", detail.join(" ")),
    )])
}

fn unguided() -> Result<Vec<Check>, VerifyError> {
    // a schedule long enough for x_T ~ N(0, I) to be the marginal
    let s = ScheduleParams {
        num_steps: 1000,
        ..ScheduleParams::default()
    }
    .build()?;
    let plan = uniform_timestep_plan(&s, s.num_steps())?;
    let op = Identity::new(vec![1]);
    let y = Tensor::zeros(vec![1]);
    let mut checks = Vec::new();
    for (m0, c0) in [(0.5, 0.01), (-0.3, 1.0)] {
        let den = AnalyticDenoiser::new(GaussianPrior::isotropic(vec![1], m0, c0)?, s.clone());
        let samples = (0..10_000u64)
            .map(|seed| {
                let mut spec = RunSpec::new(SamplerKind::DdpmUncond, &s, &plan, &op, &y, &den);
                spec.seed = mix_seed(9, seed);
                Ok(samplers::run(&spec)?.final_x0.data()[0])
            })
            .collect::<Result<Vec<f64>, VerifyError>>()?;
        let m = Moments::of(&samples);
        checks.push(Check::new(
            format!("DDPM prior N({m0}, {c0})"),
            m.within(m0, c0, 3.0),
            format!(
                "mean {:.4} ({:+.2} SE), variance {:.4} ({:+.2} SE)",
                m.mean,
                (m.mean - m0) / m.se_mean,
                m.variance,
                (m.variance - c0) / m.se_variance
            ),
        ));
    }
    let s100 = default_schedule();
    let plan = uniform_timestep_plan(&s100, 20)?;
    let den = AnalyticDenoiser::new(GaussianPrior::isotropic(vec![1], 0.5, 0.01)?, s100.clone());
    let mut spec = RunSpec::new(SamplerKind::DdimUncond, &s100, &plan, &op, &y, &den);
    spec.guidance.zeta = 0.0;
    spec.noise_seed = Some(3);
    let a = samplers::run(&spec)?;
    spec.noise_seed = Some(4);
    let b = samplers::run(&spec)?;
    checks.push(Check::new(
        "DDIM zeta=0 deterministic",
        a == b && a.injected.count == 0,
        "different step seeds give identical trajectories",
    ));
    Ok(checks)
}

fn peer(base: &[String], mode: &str, extra: &[&str]) -> Vec<String> {
    let mut cmd = base.to_vec();
    cmd.extend(["--mode", mode].iter().chain(extra).map(|s| s.to_string()));
    cmd
}

fn protocol(base: &[String]) -> Result<Vec<Check>, VerifyError> {
    let g = ImageGeometry::new(8, 8, 1);
    let s = default_schedule();
    let op = lab_cs(g)?;
    let (m0, c0) = (0.5, 0.05);
    let prior = GaussianPrior::isotropic(g.shape(), m0, c0)?;
    let local = AnalyticDenoiser::new(prior.clone(), s.clone());
    let sigma_y = 0.05;
    let x0 = sample_prior(&prior, &mut NoiseRng::new(3, 0));
    let y = degrade(&op, &x0, sigma_y, 4)?;
    let remote = ExternalDenoiser::spawn(&peer(base, "analytic", &["--mean", "0.5", "--var", "0.05"]), &s, &g.shape())?;
    let mut checks = Vec::new();
    for (kind, zeta) in [(SamplerKind::DdNrlg, 0.5), (SamplerKind::IdNrlg, 1.0), (SamplerKind::DdimUncond, 0.0)] {
        let cfg = GuidanceConfig {
            sigma_y,
            zeta,
            ..GuidanceConfig::default()
        };
        let a = restore(kind, &op, &s, &local, &y, cfg, 8)?;
        let b = restore(kind, &op, &s, &remote, &y, cfg, 8)?;
        let linf = a.final_x0.sub(&b.final_x0).max_abs();
        checks.push(Check::at_most(format!("{kind} over the wire, L-inf"), linf, 1e-4));
    }
    drop(remote);

    let shape = g.shape();
    let probe = Tensor::full(shape.clone(), 0.1);
    let outcome = |r: Result<ExternalDenoiser, DenoiserError>| match r {
        Ok(_) => "accepted".to_string(),
        Err(e) => e.to_string(),
    };
    let r = ExternalDenoiser::spawn(&peer(base, "bad-version", &[]), &s, &shape);
    checks.push(Check::new(
        "version mismatch rejected",
        matches!(r, Err(DenoiserError::Version { .. })),
        outcome(r),
    ));
    let r = ExternalDenoiser::spawn(&peer(base, "reject", &["--status", "7"]), &s, &shape);
    checks.push(Check::new(
        "handshake refusal surfaced",
        matches!(r, Err(DenoiserError::Rejected(7))),
        outcome(r),
    ));
    let wrong = ExternalDenoiser::spawn(&peer(base, "wrong-shape", &[]), &s, &shape)?;
    let first = wrong.predict_noise(&probe, 10);
    let second = wrong.predict_noise(&probe, 10);
    checks.push(Check::new(
        "shape mismatch detected",
        matches!(first, Err(DenoiserError::PeerShape { expected: 64, got: 65 })),
        format!("{:?}", first.err()),
    ));
    checks.push(Check::new(
        "endpoint closed after mismatch",
        matches!(second, Err(DenoiserError::Closed)),
        format!("{:?}", second.err()),
    ));
    let garbage = ExternalDenoiser::spawn(&peer(base, "garbage", &[]), &s, &shape)?;
    let r = garbage.predict_noise(&probe, 10);
    checks.push(Check::new(
        "malformed reply rejected",
        matches!(r, Err(DenoiserError::Protocol(_)) | Err(DenoiserError::Transport(_))),
        format!("{:?}", r.err()),
    ));
    let missing = ExternalDenoiser::spawn(&["/nonexistent/nrlg-peer".to_string()], &s, &shape);
    checks.push(Check::new(
        "missing peer program",
        matches!(missing, Err(DenoiserError::Transport(_))),
        outcome(missing),
    ));
    Ok(checks)
}
