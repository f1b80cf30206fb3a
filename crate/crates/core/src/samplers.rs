//! Restoration loops.
//!
//! Every sampler walks a [`TimestepPlan`] from `x_T ~ N(0, I)` down to `t = 0`.
//! The initial draw uses the run seed on [`STREAM_INIT`]; per-step noise uses
//! `noise_seed` (the run seed by default) on [`STREAM_STEPS`], and is only
//! drawn where a step actually injects noise.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::denoiser::{DenoiserError, NoisePredictor};
use crate::guidance::{tweedie_x0, Guide, GuidanceConfig, GuidanceError, GuidanceStep, ScorePath};
use crate::linops::{LinearOperator, LinopError};
use crate::rng::{NoiseRng, STREAM_INIT, STREAM_STEPS};
use crate::schedule::{DiffusionSchedule, TimestepPlan};
use crate::tensor::{ShapeError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    DdNrlg,
    IdNrlg,
    DdimUncond,
    DdpmUncond,
    Dps,
    DirectAdjust,
}

impl SamplerKind {
    pub const ALL: [SamplerKind; 6] = [
        Self::DdNrlg,
        Self::IdNrlg,
        Self::DdimUncond,
        Self::DdpmUncond,
        Self::Dps,
        Self::DirectAdjust,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::DdNrlg => "dd_nrlg",
            Self::IdNrlg => "id_nrlg",
            Self::DdimUncond => "ddim_uncond",
            Self::DdpmUncond => "ddpm_uncond",
            Self::Dps => "dps",
            Self::DirectAdjust => "direct_adjust",
        }
    }
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SamplerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown sampler {s:?}"))
    }
}

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error("non-finite values at step {step} (t = {t}); last finite state kept")]
    NonFinite {
        step: usize,
        t: usize,
        last_good: Box<Tensor>,
    },
    #[error("{0}")]
    Capability(String),
    #[error("invalid run: {0}")]
    Config(String),
}

impl From<DenoiserError> for SamplerError {
    fn from(e: DenoiserError) -> Self {
        Self::Guidance(e.into())
    }
}

impl From<LinopError> for SamplerError {
    fn from(e: LinopError) -> Self {
        Self::Guidance(e.into())
    }
}

impl From<ShapeError> for SamplerError {
    fn from(e: ShapeError) -> Self {
        Self::Guidance(e.into())
    }
}

/// Inputs of one restoration run.
#[derive(Clone, Copy)]
pub struct RunSpec<'a> {
    pub kind: SamplerKind,
    pub schedule: &'a DiffusionSchedule,
    pub plan: &'a TimestepPlan,
    pub operator: &'a dyn LinearOperator,
    pub measurement: &'a Tensor,
    pub denoiser: &'a dyn NoisePredictor,
    pub guidance: GuidanceConfig,
    pub seed: u64,
    /// Seed for draws after initialization; the run seed when `None`.
    pub noise_seed: Option<u64>,
    /// Keep `(x_t, x̂₀)` every this many steps.
    pub snapshot_stride: Option<usize>,
    /// DPS step size `ρ`.
    pub dps_rho: f64,
    pub score_path: ScorePath,
}

impl<'a> RunSpec<'a> {
    pub fn new(
        kind: SamplerKind,
        schedule: &'a DiffusionSchedule,
        plan: &'a TimestepPlan,
        operator: &'a dyn LinearOperator,
        measurement: &'a Tensor,
        denoiser: &'a dyn NoisePredictor,
    ) -> Self {
        Self {
            kind,
            schedule,
            plan,
            operator,
            measurement,
            denoiser,
            guidance: GuidanceConfig::default(),
            seed: 0,
            noise_seed: None,
            snapshot_stride: None,
            dps_rho: 1.0,
            score_path: ScorePath::Auto,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    pub t: usize,
    pub x_t: Tensor,
    pub x0: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualEntry {
    pub step: usize,
    pub t: usize,
    pub residual: f64,
}

/// Running totals of the standard-normal values injected during a run.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NoiseStats {
    pub count: usize,
    pub sum: f64,
    pub sum_sq: f64,
}

impl NoiseStats {
    fn record(&mut self, z: &Tensor) {
        self.count += z.len();
        self.sum += z.data().iter().sum::<f64>();
        self.sum_sq += z.data().iter().map(|v| v * v).sum::<f64>();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Final sample, unclamped.
    pub final_x0: Tensor,
    pub snapshots: Vec<Snapshot>,
    /// `‖y − A·x̂₀|ₜ‖` per step.
    pub residuals: Vec<ResidualEntry>,
    pub injected: NoiseStats,
}

impl Trajectory {
    pub fn clamped(&self, lo: f64, hi: f64) -> Tensor {
        self.final_x0.clamp(lo, hi)
    }

    pub fn final_residual(&self) -> Option<f64> {
        self.residuals.last().map(|r| r.residual)
    }
}

/// What a sampler's step function hands back to the shared loop.
struct StepOut {
    x_prev: Tensor,
    x0: Tensor,
}

struct Loop<'a> {
    spec: &'a RunSpec<'a>,
    noise: NoiseRng,
    injected: NoiseStats,
}

impl Loop<'_> {
    fn draw(&mut self, shape: &[usize]) -> Tensor {
        let z = self.noise.normal_tensor(shape);
        self.injected.record(&z);
        z
    }

    /// DDPM ancestral step from `t` to `t_prev`, with `α = ᾱ_t/ᾱ_{t_prev}` and variance `1 − α`.
    fn ddpm_step(&mut self, x_t: &Tensor, eps: &Tensor, t: usize, t_prev: usize) -> Tensor {
        let s = self.spec.schedule;
        let (ab, ab_prev) = (s.alpha_bar(t), s.alpha_bar(t_prev));
        let alpha = ab / ab_prev;
        let beta = 1.0 - alpha;
        let mean = x_t.lincomb(1.0 / alpha.sqrt(), eps, -beta / ((1.0 - ab).sqrt() * alpha.sqrt()));
        if t_prev == 0 {
            mean
        } else {
            let z = self.draw(x_t.shape());
            mean.lincomb(1.0, &z, beta.sqrt())
        }
    }

    /// `√ᾱ_prev·x₀ + √(1−ᾱ_prev)·(√(1−ζ)·ε + √ζ·z)`.
    fn zeta_step(&mut self, x0: &Tensor, eps: &Tensor, zeta: f64, t_prev: usize) -> Tensor {
        let ab_prev = self.spec.schedule.alpha_bar(t_prev);
        let k = (1.0 - ab_prev).sqrt();
        let mut out = x0.lincomb(ab_prev.sqrt(), eps, k * (1.0 - zeta).sqrt());
        if zeta > 0.0 && t_prev > 0 {
            let z = self.draw(x0.shape());
            out = out.lincomb(1.0, &z, k * zeta.sqrt());
        }
        out
    }
}

/// Runs the sampler selected by `spec.kind`.
pub fn run(spec: &RunSpec<'_>) -> Result<Trajectory, SamplerError> {
    match spec.kind {
        SamplerKind::DdNrlg => dd_nrlg(spec),
        SamplerKind::IdNrlg => id_nrlg(spec),
        SamplerKind::DdimUncond => ddim_uncond(spec),
        SamplerKind::DdpmUncond => ddpm_uncond(spec),
        SamplerKind::Dps => dps_baseline(spec, spec.dps_rho),
        SamplerKind::DirectAdjust => direct_adjust(spec),
    }
}

fn drive<F>(spec: &RunSpec<'_>, mut step: F) -> Result<Trajectory, SamplerError>
where
    F: FnMut(&mut Loop<'_>, &Tensor, usize, usize) -> Result<StepOut, SamplerError>,
{
    let shape = spec.operator.input_shape().to_vec();
    spec.measurement.expect_shape(spec.operator.output_shape())?;
    if spec.plan.is_empty() {
        return Err(SamplerError::Config("empty timestep plan".into()));
    }
    if let Some(first) = spec.plan.steps().first() {
        spec.schedule
            .check_timestep(first.t)
            .map_err(|e| SamplerError::Config(e.to_string()))?;
    }
    if spec.snapshot_stride == Some(0) {
        return Err(SamplerError::Config("snapshot stride must be positive".into()));
    }
    let mut x = NoiseRng::new(spec.seed, STREAM_INIT).normal_tensor(&shape);
    let mut lp = Loop {
        spec,
        noise: NoiseRng::new(spec.noise_seed.unwrap_or(spec.seed), STREAM_STEPS),
        injected: NoiseStats::default(),
    };
    let mut snapshots = Vec::new();
    let mut residuals = Vec::with_capacity(spec.plan.len());
    for (i, ps) in spec.plan.steps().iter().enumerate() {
        let out = step(&mut lp, &x, ps.t, ps.t_prev)?;
        let residual = spec.measurement.sub(&spec.operator.apply(&out.x0)?).norm();
        residuals.push(ResidualEntry {
            step: i,
            t: ps.t,
            residual,
        });
        if let Some(stride) = spec.snapshot_stride {
            if i % stride == 0 {
                snapshots.push(Snapshot {
                    step: i,
                    t: ps.t,
                    x_t: x.clone(),
                    x0: out.x0.clone(),
                });
            }
        }
        if !out.x_prev.is_finite() || !residual.is_finite() {
            return Err(SamplerError::NonFinite {
                step: i,
                t: ps.t,
                last_good: Box::new(x),
            });
        }
        x = out.x_prev;
    }
    Ok(Trajectory {
        final_x0: x,
        snapshots,
        residuals,
        injected: lp.injected,
    })
}

fn guide<'a>(spec: &'a RunSpec<'a>) -> Result<Guide<'a>, SamplerError> {
    Ok(Guide::new(
        spec.operator,
        spec.schedule,
        spec.guidance,
        spec.measurement,
        spec.score_path,
    )?)
}

/// Sampling with noise-refined likelihood guidance and `ζ`-mixed noise injection.
pub fn dd_nrlg(spec: &RunSpec<'_>) -> Result<Trajectory, SamplerError> {
    let g = guide(spec)?;
    let zeta = spec.guidance.zeta;
    drive(spec, |lp, x, t, t_prev| {
        let GuidanceStep {
            refined_noise,
            x0_refined,
            ..
        } = g.step(spec.denoiser, x, t)?;
        let x_prev = lp.zeta_step(&x0_refined, &refined_noise, zeta, t_prev);
        Ok(StepOut { x_prev, x0: x0_refined })
    })
}

/// Iterative denoising with noise-refined likelihood guidance: `x_{t−1} = √ᾱ_{t−1}·x̂₀|ₜ`.
pub fn id_nrlg(spec: &RunSpec<'_>) -> Result<Trajectory, SamplerError> {
    let g = guide(spec)?;
    drive(spec, |_, x, t, t_prev| {
        let step = g.step(spec.denoiser, x, t)?;
        let x_prev = step.x0_refined.scale(spec.schedule.alpha_bar(t_prev).sqrt());
        Ok(StepOut {
            x_prev,
            x0: step.x0_refined,
        })
    })
}

/// Unguided DDIM with the same `ζ` noise split.
pub fn ddim_uncond(spec: &RunSpec<'_>) -> Result<Trajectory, SamplerError> {
    let zeta = spec.guidance.zeta;
    if !(0.0..=1.0).contains(&zeta) {
        return Err(SamplerError::Config(format!("zeta must be in [0, 1], got {zeta}")));
    }
    drive(spec, |lp, x, t, t_prev| {
        let eps = spec.denoiser.predict_noise(x, t)?;
        let x0 = tweedie_x0(spec.schedule, x, &eps, t);
        let x_prev = lp.zeta_step(&x0, &eps, zeta, t_prev);
        Ok(StepOut { x_prev, x0 })
    })
}

/// Unguided DDPM ancestral sampling.
pub fn ddpm_uncond(spec: &RunSpec<'_>) -> Result<Trajectory, SamplerError> {
    drive(spec, |lp, x, t, t_prev| {
        let eps = spec.denoiser.predict_noise(x, t)?;
        let x0 = tweedie_x0(spec.schedule, x, &eps, t);
        let x_prev = lp.ddpm_step(x, &eps, t, t_prev);
        Ok(StepOut { x_prev, x0 })
    })
}

/// `∇_{x_t} ‖y − A·x₀|ₜ(x_t)‖²` through the affine denoiser, exactly.
///
/// With `∂x₀/∂x_t = diag((1 − √(1−ᾱ)·J)/√ᾱ)`, the gradient is
/// `−2·diag((1 − √(1−ᾱ)·J)/√ᾱ)·Aᵀ(y − A·x₀)`.
pub fn dps_gradient(
    op: &dyn LinearOperator,
    schedule: &DiffusionSchedule,
    x0: &Tensor,
    jac: &Tensor,
    y: &Tensor,
    t: usize,
) -> Result<Tensor, SamplerError> {
    let ab = schedule.alpha_bar(t);
    let (sa, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
    let r = y.sub(&op.apply(x0)?);
    let back = op.adjoint(&r)?;
    Ok(back.zip_map(jac, |b, j| -2.0 * b * (1.0 - s1 * j) / sa))
}

/// Diffusion posterior sampling: a DDPM step followed by `−ρ·∇‖y − A·x₀|ₜ‖²`.
pub fn dps_baseline(spec: &RunSpec<'_>, rho: f64) -> Result<Trajectory, SamplerError> {
    if !(rho >= 0.0 && rho.is_finite()) {
        return Err(SamplerError::Config(format!("dps rho must be >= 0, got {rho}")));
    }
    let dn = spec.denoiser;
    if dn.noise_jacobian(spec.plan.steps()[0].t).is_none() {
        return Err(SamplerError::Capability(format!("dps needs an exact noise Jacobian; {} has none", dn.name())));
    }
    drive(spec, |lp, x, t, t_prev| {
        let eps = dn.predict_noise(x, t)?;
        let x0 = tweedie_x0(spec.schedule, x, &eps, t);
        let jac = dn
            .noise_jacobian(t)
            .ok_or_else(|| SamplerError::Capability(format!("{} has no Jacobian at t = {t}", dn.name())))?;
        let grad = dps_gradient(spec.operator, spec.schedule, &x0, &jac, spec.measurement, t)?;
        let x_prev = lp.ddpm_step(x, &eps, t, t_prev).lincomb(1.0, &grad, -rho);
        Ok(StepOut { x_prev, x0 })
    })
}

/// Ablation: a DDPM step followed by `+μ·(1−ᾱ_t)/√ᾱ_t·score` in sample space.
pub fn direct_adjust(spec: &RunSpec<'_>) -> Result<Trajectory, SamplerError> {
    let g = guide(spec)?;
    let mu = spec.guidance.mu;
    drive(spec, |lp, x, t, t_prev| {
        let step = g.step(spec.denoiser, x, t)?;
        let ab = spec.schedule.alpha_bar(t);
        let k = mu * (1.0 - ab) / ab.sqrt();
        let x_prev = lp
            .ddpm_step(x, &step.eps, t, t_prev)
            .lincomb(1.0, &step.likelihood_score, k);
        Ok(StepOut { x_prev, x0: step.x0_pred })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{AnalyticDenoiser, GaussianPrior};
    use crate::linops::{BlockCs, Identity, ImageGeometry};
    use crate::schedule::{uniform_timestep_plan, ScheduleParams};

    struct Lab {
        schedule: DiffusionSchedule,
        den: AnalyticDenoiser,
        op: BlockCs,
        y: Tensor,
    }

    fn lab() -> Lab {
        let schedule = ScheduleParams::default().build().unwrap();
        let g = ImageGeometry::new(8, 8, 1);
        let prior = crate::lab::random_prior(&g.shape(), 2, (0.2, 0.8), (0.005, 0.05));
        let op = BlockCs::new(g, 0.5, 4, 3).unwrap();
        let mut rng = NoiseRng::new(11, 0);
        let x = crate::lab::sample_prior(&prior, &mut rng);
        let y = op.apply(&x).unwrap();
        Lab {
            den: AnalyticDenoiser::new(prior, schedule.clone()),
            schedule,
            op,
            y,
        }
    }

    #[test]
    fn every_sampler_is_deterministic() {
        let l = lab();
        let plan = uniform_timestep_plan(&l.schedule, 20).unwrap();
        for kind in SamplerKind::ALL {
            let mut spec = RunSpec::new(kind, &l.schedule, &plan, &l.op, &l.y, &l.den);
            spec.seed = 5;
            spec.guidance.zeta = 0.5;
            spec.guidance.mu = 0.5;
            spec.dps_rho = 0.1;
            spec.snapshot_stride = Some(3);
            let a = run(&spec).unwrap();
            let b = run(&spec).unwrap();
            assert_eq!(a, b, "{kind}");
            assert_eq!(a.snapshots.len(), 7);
            assert_eq!(a.residuals.len(), 20);
        }
    }

    #[test]
    fn dd_nrlg_zeta_zero_ignores_step_seed() {
        let l = lab();
        let plan = uniform_timestep_plan(&l.schedule, 25).unwrap();
        let mut spec = RunSpec::new(SamplerKind::DdNrlg, &l.schedule, &plan, &l.op, &l.y, &l.den);
        spec.guidance.zeta = 0.0;
        spec.seed = 1;
        let a = run(&spec).unwrap();
        spec.noise_seed = Some(999);
        let b = run(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.injected.count, 0);
        spec.guidance.zeta = 1.0;
        let c = run(&spec).unwrap();
        spec.noise_seed = Some(998);
        let d = run(&spec).unwrap();
        assert_ne!(c.final_x0, d.final_x0);
    }

    #[test]
    fn one_step_collapse() {
        let l = lab();
        let plan = uniform_timestep_plan(&l.schedule, 1).unwrap();
        let mut spec = RunSpec::new(SamplerKind::DdNrlg, &l.schedule, &plan, &l.op, &l.y, &l.den);
        spec.guidance.zeta = 0.0;
        let dd = run(&spec).unwrap();
        spec.kind = SamplerKind::IdNrlg;
        let id = run(&spec).unwrap();
        assert_eq!(dd.final_x0, id.final_x0);
    }

    #[test]
    fn t1_ddim_is_tweedie() {
        let schedule = ScheduleParams {
            num_steps: 1,
            beta_start: 0.3,
            beta_end: 0.3,
        }
        .build()
        .unwrap();
        let prior = GaussianPrior::isotropic(vec![4, 4, 1], 0.5, 0.1).unwrap();
        let den = AnalyticDenoiser::new(prior, schedule.clone());
        let op = Identity::new(vec![4, 4, 1]);
        let y = Tensor::zeros(vec![4, 4, 1]);
        let plan = uniform_timestep_plan(&schedule, 1).unwrap();
        let mut spec = RunSpec::new(SamplerKind::DdimUncond, &schedule, &plan, &op, &y, &den);
        spec.guidance.zeta = 0.0;
        spec.seed = 3;
        let out = run(&spec).unwrap();
        let x1 = NoiseRng::new(3, STREAM_INIT).normal_tensor(&[4, 4, 1]);
        let eps = den.predict_noise(&x1, 1).unwrap();
        assert_eq!(out.final_x0, tweedie_x0(&schedule, &x1, &eps, 1));
    }

    #[test]
    fn guidance_off_and_rho_zero_reduce() {
        let l = lab();
        let plan = uniform_timestep_plan(&l.schedule, 30).unwrap();
        let mut spec = RunSpec::new(SamplerKind::DdpmUncond, &l.schedule, &plan, &l.op, &l.y, &l.den);
        spec.seed = 8;
        let ddpm = run(&spec).unwrap();
        let dps = dps_baseline(&spec, 0.0).unwrap();
        assert_eq!(dps.final_x0, ddpm.final_x0);
        spec.guidance.mu = 0.0;
        let da = direct_adjust(&spec).unwrap();
        assert_eq!(da.final_x0, ddpm.final_x0);
    }

    #[test]
    fn dps_gradient_matches_finite_differences() {
        let l = lab();
        let mut rng = NoiseRng::new(4, 0);
        let x = rng.normal_tensor(&[8, 8, 1]);
        for t in [1, 50, 100] {
            let eps = l.den.predict_noise(&x, t).unwrap();
            let x0 = tweedie_x0(&l.schedule, &x, &eps, t);
            let jac = l.den.noise_jacobian(t).unwrap();
            let g = dps_gradient(&l.op, &l.schedule, &x0, &jac, &l.y, t).unwrap();
            let f = |x: &Tensor| {
                let e = l.den.predict_noise(x, t).unwrap();
                let x0 = tweedie_x0(&l.schedule, x, &e, t);
                l.y.sub(&l.op.apply(&x0).unwrap()).norm().powi(2)
            };
            let h = 1e-5;
            let fd: Vec<f64> = (0..64)
                .map(|i| {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp.data_mut()[i] += h;
                    xm.data_mut()[i] -= h;
                    (f(&xp) - f(&xm)) / (2.0 * h)
                })
                .collect();
            let err = g.rel_err(&Tensor::new(vec![8, 8, 1], fd).unwrap());
            assert!(err < 1e-5, "t={t} err={err}");
        }
    }

    #[test]
    fn residual_monotone_in_the_lab() {
        let l = lab();
        let plan = uniform_timestep_plan(&l.schedule, 100).unwrap();
        for mu in [0.5, 1.0, 2.0] {
            let mut spec = RunSpec::new(SamplerKind::IdNrlg, &l.schedule, &plan, &l.op, &l.y, &l.den);
            spec.guidance.mu = mu;
            let tr = run(&spec).unwrap();
            let tail = &tr.residuals[20..];
            for w in tail.windows(2) {
                assert!(w[1].residual <= w[0].residual * (1.0 + 1e-9) + 1e-12, "mu={mu} {:?}", w);
            }
        }
    }

    #[test]
    fn non_finite_is_caught() {
        let l = lab();
        let plan = uniform_timestep_plan(&l.schedule, 10).unwrap();
        let mut y = l.y.clone();
        y.data_mut()[0] = f64::NAN;
        let spec = RunSpec::new(SamplerKind::IdNrlg, &l.schedule, &plan, &l.op, &y, &l.den);
        match run(&spec) {
            Err(SamplerError::NonFinite { step: 0, last_good, .. }) => assert!(last_good.is_finite()),
            other => panic!("expected abort, got {other:?}"),
        }
    }

    #[test]
    fn kind_names_round_trip() {
        for k in SamplerKind::ALL {
            assert_eq!(k.as_str().parse::<SamplerKind>().unwrap(), k);
        }
        assert!("ddrm".parse::<SamplerKind>().is_err());
    }
}
