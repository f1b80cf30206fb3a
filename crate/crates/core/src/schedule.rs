//! Diffusion noise schedules and sampling timestep plans.
//!
//! Timesteps are 1-based: `t ∈ 1..=T`, with a virtual `ᾱ₀ = 1` so that the
//! final sampling step lands exactly on the clean-signal endpoint.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("number of diffusion steps must be at least 1")]
    ZeroSteps,
    #[error("beta bounds must satisfy 0 < beta_start <= beta_end < 1 (got {start}, {end})")]
    BetaBounds { start: f64, end: f64 },
    #[error("sampling steps must be in 1..={max}, got {got}")]
    SamplingSteps { got: usize, max: usize },
    #[error("timestep {t} outside 1..={max}")]
    Timestep { t: usize, max: usize },
}

/// Linear-in-`t` beta schedule parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub num_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            num_steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<DiffusionSchedule, ScheduleError> {
        linear_schedule(self.num_steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    params: ScheduleParams,
    // index 0 is unused padding so that betas[t] reads naturally
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Betas interpolated affinely over `T` points including both endpoints.
pub fn linear_schedule(
    num_steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<DiffusionSchedule, ScheduleError> {
    if num_steps == 0 {
        return Err(ScheduleError::ZeroSteps);
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(ScheduleError::BetaBounds {
            start: beta_start,
            end: beta_end,
        });
    }
    let mut betas = Vec::with_capacity(num_steps + 1);
    betas.push(0.0);
    for i in 0..num_steps {
        let beta = if num_steps == 1 {
            beta_start
        } else {
            beta_start + (beta_end - beta_start) * i as f64 / (num_steps - 1) as f64
        };
        betas.push(beta);
    }
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(num_steps + 1);
    alpha_bars.push(1.0);
    for t in 1..=num_steps {
        let prev = alpha_bars[t - 1];
        alpha_bars.push(prev * alphas[t]);
    }
    Ok(DiffusionSchedule {
        params: ScheduleParams {
            num_steps,
            beta_start,
            beta_end,
        },
        betas,
        alphas,
        alpha_bars,
    })
}

impl DiffusionSchedule {
    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    /// `T`.
    pub fn num_steps(&self) -> usize {
        self.params.num_steps
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[self.checked(t)]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[self.checked(t)]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.num_steps(), "timestep {t} beyond T={}", self.num_steps());
        self.alpha_bars[t]
    }

    /// `betas[1..=T]`.
    pub fn betas(&self) -> &[f64] {
        &self.betas[1..]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas[1..]
    }

    /// `ᾱ_0..=ᾱ_T`, including the leading `1`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_timestep(&self, t: usize) -> Result<(), ScheduleError> {
        if t == 0 || t > self.num_steps() {
            Err(ScheduleError::Timestep {
                t,
                max: self.num_steps(),
            })
        } else {
            Ok(())
        }
    }

    fn checked(&self, t: usize) -> usize {
        assert!(
            (1..=self.num_steps()).contains(&t),
            "timestep {t} outside 1..={}",
            self.num_steps()
        );
        t
    }
}

/// One sampler step: go from `t` to `t_prev`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStep {
    pub t: usize,
    pub t_prev: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestepPlan {
    steps: Vec<PlanStep>,
}

impl TimestepPlan {
    pub fn steps(&self) -> &[PlanStep] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn timesteps(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.t).collect()
    }

    /// Whether the plan visits every `t` from `T` down to `1`.
    pub fn is_full(&self, schedule: &DiffusionSchedule) -> bool {
        self.steps.len() == schedule.num_steps() && self.steps.iter().all(|s| s.t == s.t_prev + 1)
    }
}

/// Evenly spaced decreasing timesteps from `T` to `1`.
///
/// `t_k = round(T − k·(T−1)/(S−1))` for `k = 0..S`, so the first step is
/// always `T` and the last is `1`. A single-step plan is `(T)` alone.
pub fn uniform_timestep_plan(
    schedule: &DiffusionSchedule,
    num_sampling_steps: usize,
) -> Result<TimestepPlan, ScheduleError> {
    let t_max = schedule.num_steps();
    if num_sampling_steps == 0 || num_sampling_steps > t_max {
        return Err(ScheduleError::SamplingSteps {
            got: num_sampling_steps,
            max: t_max,
        });
    }
    let timesteps: Vec<usize> = if num_sampling_steps == 1 {
        vec![t_max]
    } else {
        let stride = (t_max - 1) as f64 / (num_sampling_steps - 1) as f64;
        (0..num_sampling_steps)
            .map(|k| (t_max as f64 - k as f64 * stride + 0.5).floor() as usize)
            .collect()
    };
    let steps = timesteps
        .iter()
        .enumerate()
        .map(|(i, &t)| PlanStep {
            t,
            t_prev: timesteps.get(i + 1).copied().unwrap_or(0),
        })
        .collect();
    Ok(TimestepPlan { steps })
}
