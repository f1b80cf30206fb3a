//! Noise predictors `ε_θ(x_t, t)`.
//!
//! [`AnalyticDenoiser`] is the exact MMSE predictor under a diagonal Gaussian
//! prior; [`ExternalDenoiser`] talks to a child process over the binary
//! protocol in [`protocol`].

mod analytic;
mod external;
mod peer;
pub mod protocol;

use thiserror::Error;

use crate::schedule::ScheduleError;
use crate::tensor::{ShapeError, Tensor};

pub use analytic::{
    analytic_noise_jacobian, analytic_predict_noise, conditional_mean, marginal_score, posterior_variance,
    AnalyticDenoiser, GaussianPrior,
};
pub use external::ExternalDenoiser;
pub use peer::{run_peer, PeerMode};

#[derive(Debug, Error)]
pub enum DenoiserError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("invalid prior: {0}")]
    Prior(String),
    #[error("denoiser transport: {0}")]
    Transport(#[from] std::io::Error),
    #[error("denoiser protocol: {0}")]
    Protocol(String),
    #[error("protocol version mismatch: client speaks {ours}, peer answered {theirs}")]
    Version { ours: u16, theirs: u16 },
    #[error("peer rejected the handshake with status {0}")]
    Rejected(u8),
    #[error("peer returned {got} values, expected {expected}")]
    PeerShape { expected: usize, got: usize },
    #[error("denoiser endpoint is closed after an earlier error")]
    Closed,
}

pub trait NoisePredictor: Send + Sync {
    fn name(&self) -> String;

    /// Predicted noise for `x_t` at timestep `t ∈ [1, T]`; same shape as `x_t`.
    fn predict_noise(&self, x_t: &Tensor, t: usize) -> Result<Tensor, DenoiserError>;

    /// Diagonal of `∂ε/∂x_t` at timestep `t`, when the predictor is affine
    /// with a known diagonal Jacobian.
    fn noise_jacobian(&self, _t: usize) -> Option<Tensor> {
        None
    }
}
