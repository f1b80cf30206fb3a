//! Linear degradation operators `A`.
//!
//! Every operator provides `A x`, `Aᵀ y` and the kernel solve
//! `(c·AAᵀ + σ²I)⁻¹ r` needed by the likelihood score. Operators whose structure
//! allows it solve exactly (orthonormal rows, DFT diagonalization, dense
//! Cholesky); the rest fall back to conjugate gradients. Most shipped operators
//! also expose SVD factors, explicit or implicit.
//!
//! All convolutions use periodic boundaries.

mod cg;
mod conv;
mod cs;
mod dense;
mod descriptor;
mod resample;
mod simple;

use std::fmt;

use thiserror::Error;

use crate::tensor::{ShapeError, Tensor};

pub use cg::{conjugate_gradient, CgOutcome};
pub use conv::{gaussian_kernel, parse_kernel_file, read_kernel_file, CircularConvolution, Kernel};
pub use cs::BlockCs;
pub use dense::{to_dense, DenseOperator};
pub use descriptor::{OperatorDescriptor, DEFAULT_CS_BLOCK};
pub use resample::{Resample1D, ResampleKind, SeparableResample};
pub use simple::{Identity, Mask};

/// Relative residual target of the iterative kernel solve.
pub const KERNEL_SOLVE_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum LinopError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("singular system: c and sigma^2 are both zero")]
    Singular,
    #[error("kernel solve did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("{operator} does not provide {capability}")]
    Capability {
        operator: String,
        capability: &'static str,
    },
    #[error("invalid operator parameter: {0}")]
    InvalidParameter(String),
    #[error("kernel file line {line}: {message}")]
    KernelFile { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Height, width and channel count of an image tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ImageGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageGeometry {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub fn from_shape(shape: &[usize]) -> Result<Self, LinopError> {
        match *shape {
            [h, w, c] if h > 0 && w > 0 && c > 0 => Ok(Self::new(h, w, c)),
            [h, w] if h > 0 && w > 0 => Ok(Self::new(h, w, 1)),
            _ => Err(LinopError::InvalidParameter(format!(
                "expected an image shape [H, W, C], got {shape:?}"
            ))),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        vec![self.height, self.width, self.channels]
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Capabilities {
    pub has_svd: bool,
    pub exact_kernel_solve: bool,
    /// `Some(k)` when `AAᵀ = k·I`.
    pub gram_scale: Option<f64>,
}

/// A linear map between flat tensors with fixed input and output shapes.
///
/// Implementors provide the unchecked slice kernels; the shape-checked
/// [`Tensor`] entry points are provided.
pub trait LinearOperator: Send + Sync + fmt::Debug {
    fn name(&self) -> String;
    fn input_shape(&self) -> &[usize];
    fn output_shape(&self) -> &[usize];
    fn capabilities(&self) -> Capabilities;

    fn apply_slice(&self, x: &[f64]) -> Vec<f64>;
    fn adjoint_slice(&self, y: &[f64]) -> Vec<f64>;

    /// Exact `(c·AAᵀ + σ²I)⁻¹ r`, when the operator has one.
    fn exact_kernel_solve(
        &self,
        _c: f64,
        _sigma2: f64,
        _r: &[f64],
    ) -> Option<Result<Vec<f64>, LinopError>> {
        None
    }

    fn svd_factors(&self) -> Result<Box<dyn SvdFactors + '_>, LinopError> {
        Err(LinopError::Capability {
            operator: self.name(),
            capability: "SVD factors",
        })
    }

    fn input_dim(&self) -> usize {
        self.input_shape().iter().product()
    }

    fn output_dim(&self) -> usize {
        self.output_shape().iter().product()
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor, LinopError> {
        x.expect_shape(self.input_shape())?;
        Ok(Tensor::new(self.output_shape().to_vec(), self.apply_slice(x.data()))?)
    }

    fn adjoint(&self, y: &Tensor) -> Result<Tensor, LinopError> {
        y.expect_shape(self.output_shape())?;
        Ok(Tensor::new(self.input_shape().to_vec(), self.adjoint_slice(y.data()))?)
    }

    /// `v` with `(c·AAᵀ + σ²I) v = r`.
    ///
    /// Uses the exact path when available, otherwise conjugate gradients to a
    /// relative residual of [`KERNEL_SOLVE_TOL`] within `10·M` iterations.
    fn kernel_solve(&self, c: f64, sigma2: f64, r: &Tensor) -> Result<Tensor, LinopError> {
        check_solve_args(c, sigma2)?;
        r.expect_shape(self.output_shape())?;
        let v = match self.exact_kernel_solve(c, sigma2, r.data()) {
            Some(v) => v?,
            None => {
                self.kernel_solve_iterative_slice(c, sigma2, r.data(), KERNEL_SOLVE_TOL, 10 * self.output_dim())?
            }
        };
        Ok(Tensor::new(self.output_shape().to_vec(), v)?)
    }

    /// Conjugate-gradient kernel solve, regardless of exact capabilities.
    fn kernel_solve_iterative(
        &self,
        c: f64,
        sigma2: f64,
        r: &Tensor,
        tol: f64,
        max_iter: usize,
    ) -> Result<Tensor, LinopError> {
        check_solve_args(c, sigma2)?;
        r.expect_shape(self.output_shape())?;
        let v = self.kernel_solve_iterative_slice(c, sigma2, r.data(), tol, max_iter)?;
        Ok(Tensor::new(self.output_shape().to_vec(), v)?)
    }

    #[doc(hidden)]
    fn kernel_solve_iterative_slice(
        &self,
        c: f64,
        sigma2: f64,
        r: &[f64],
        tol: f64,
        max_iter: usize,
    ) -> Result<Vec<f64>, LinopError> {
        let gram = |v: &[f64]| -> Vec<f64> {
            let atv = self.adjoint_slice(v);
            let aatv = self.apply_slice(&atv);
            aatv.iter().zip(v).map(|(g, x)| c * g + sigma2 * x).collect()
        };
        let out = conjugate_gradient(gram, r, tol, max_iter);
        if out.converged {
            Ok(out.solution)
        } else {
            Err(LinopError::NotConverged {
                iterations: out.iterations,
                residual: out.relative_residual,
            })
        }
    }
}

fn check_solve_args(c: f64, sigma2: f64) -> Result<(), LinopError> {
    if !(c >= 0.0 && sigma2 >= 0.0) {
        return Err(LinopError::InvalidParameter(format!(
            "kernel solve needs c >= 0 and sigma^2 >= 0 (got {c}, {sigma2})"
        )));
    }
    if c == 0.0 && sigma2 == 0.0 {
        return Err(LinopError::Singular);
    }
    Ok(())
}

/// Thin SVD `A = U·diag(Σ)·Vᵀ` exposed through its actions.
///
/// Coefficient vectors live in `ℝᴷ`, `K = min(M, N)`. Factors may be implicit,
/// for example real Fourier bases for circular convolutions.
pub trait SvdFactors {
    fn singular_values(&self) -> &[f64];
    /// `Vᵀ x`: `ℝᴺ → ℝᴷ`.
    fn right_adjoint(&self, x: &[f64]) -> Vec<f64>;
    /// `V c`: `ℝᴷ → ℝᴺ`.
    fn right_apply(&self, c: &[f64]) -> Vec<f64>;
    /// `Uᵀ y`: `ℝᴹ → ℝᴷ`.
    fn left_adjoint(&self, y: &[f64]) -> Vec<f64>;
    /// `U c`: `ℝᴷ → ℝᴹ`.
    fn left_apply(&self, c: &[f64]) -> Vec<f64>;
    /// Whether singular values are sorted in nonincreasing order.
    fn ordered(&self) -> bool {
        true
    }
}

/// Factors for operators with `AAᵀ = s²·I`: `U = I`, `Σ = s`, `Vᵀ = A/s`.
pub(crate) struct ScaledRowsSvd<'a> {
    op: &'a dyn LinearOperator,
    sigma: f64,
    values: Vec<f64>,
}

impl<'a> ScaledRowsSvd<'a> {
    pub(crate) fn new(op: &'a dyn LinearOperator, sigma: f64) -> Self {
        Self {
            op,
            sigma,
            values: vec![sigma; op.output_dim()],
        }
    }
}

impl SvdFactors for ScaledRowsSvd<'_> {
    fn singular_values(&self) -> &[f64] {
        &self.values
    }

    fn right_adjoint(&self, x: &[f64]) -> Vec<f64> {
        let inv = 1.0 / self.sigma;
        self.op.apply_slice(x).into_iter().map(|v| v * inv).collect()
    }

    fn right_apply(&self, c: &[f64]) -> Vec<f64> {
        let inv = 1.0 / self.sigma;
        self.op.adjoint_slice(c).into_iter().map(|v| v * inv).collect()
    }

    fn left_adjoint(&self, y: &[f64]) -> Vec<f64> {
        y.to_vec()
    }

    fn left_apply(&self, c: &[f64]) -> Vec<f64> {
        c.to_vec()
    }
}

/// Solve for operators with `AAᵀ = k·I`.
pub(crate) fn scaled_identity_solve(k: f64, c: f64, sigma2: f64, r: &[f64]) -> Result<Vec<f64>, LinopError> {
    let d = c * k + sigma2;
    if d == 0.0 {
        return Err(LinopError::Singular);
    }
    Ok(r.iter().map(|v| v / d).collect())
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;
    use crate::rng::NoiseRng;

    /// Largest relative adjoint defect `|⟨Ax,y⟩ − ⟨x,Aᵀy⟩| / (‖Ax‖‖y‖)` over random probes.
    pub fn adjoint_defect(op: &dyn LinearOperator, probes: usize, seed: u64) -> f64 {
        let mut rng = NoiseRng::new(seed, 99);
        let mut worst = 0.0f64;
        for _ in 0..probes {
            let x = rng.normal_vec(op.input_dim());
            let y = rng.normal_vec(op.output_dim());
            let ax = op.apply_slice(&x);
            let aty = op.adjoint_slice(&y);
            let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
            let scale = crate::tensor::norm(&ax) * crate::tensor::norm(&y);
            worst = worst.max((lhs - rhs).abs() / scale.max(f64::MIN_POSITIVE));
        }
        worst
    }

    /// Max relative error of `U Σ Vᵀ x` against `A x`, plus orthogonality defects.
    pub fn svd_defects(op: &dyn LinearOperator, probes: usize, seed: u64) -> (f64, f64, f64) {
        let f = op.svd_factors().expect("operator has SVD");
        let mut rng = NoiseRng::new(seed, 98);
        let (mut recon, mut vortho, mut uortho) = (0.0f64, 0.0f64, 0.0f64);
        for _ in 0..probes {
            let x = rng.normal_vec(op.input_dim());
            let ax = op.apply_slice(&x);
            let coeff = f.right_adjoint(&x);
            let scaled: Vec<f64> = coeff
                .iter()
                .zip(f.singular_values())
                .map(|(c, s)| c * s)
                .collect();
            let usvx = f.left_apply(&scaled);
            recon = recon.max(rel(&usvx, &ax));
            // VᵀV = I on coefficient probes
            let back = f.right_adjoint(&f.right_apply(&coeff));
            vortho = vortho.max(rel(&back, &coeff));
            let y = rng.normal_vec(op.output_dim());
            let uc = f.left_adjoint(&y);
            let back = f.left_adjoint(&f.left_apply(&uc));
            uortho = uortho.max(rel(&back, &uc));
        }
        (recon, vortho, uortho)
    }

    pub fn rel(a: &[f64], b: &[f64]) -> f64 {
        let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        d / crate::tensor::norm(b).max(f64::MIN_POSITIVE)
    }

    /// `‖(c·AAᵀ+σ²I)v − r‖ / ‖r‖`.
    pub fn solve_residual(op: &dyn LinearOperator, c: f64, sigma2: f64, v: &[f64], r: &[f64]) -> f64 {
        let g = op.apply_slice(&op.adjoint_slice(v));
        let lhs: Vec<f64> = g.iter().zip(v).map(|(g, v)| c * g + sigma2 * v).collect();
        rel(&lhs, r)
    }
}
