use super::{
    scaled_identity_solve, Capabilities, ImageGeometry, LinearOperator, LinopError, ScaledRowsSvd,
    SvdFactors,
};
use crate::rng::{NoiseRng, STREAM_OPERATOR};

/// `A = I` (denoising).
#[derive(Debug, Clone)]
pub struct Identity {
    shape: Vec<usize>,
}

impl Identity {
    pub fn new(shape: impl Into<Vec<usize>>) -> Self {
        Self { shape: shape.into() }
    }
}

impl LinearOperator for Identity {
    fn name(&self) -> String {
        "identity".into()
    }

    fn input_shape(&self) -> &[usize] {
        &self.shape
    }

    fn output_shape(&self) -> &[usize] {
        &self.shape
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            has_svd: true,
            exact_kernel_solve: true,
            gram_scale: Some(1.0),
        }
    }

    fn apply_slice(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }

    fn adjoint_slice(&self, y: &[f64]) -> Vec<f64> {
        y.to_vec()
    }

    fn exact_kernel_solve(&self, c: f64, sigma2: f64, r: &[f64]) -> Option<Result<Vec<f64>, LinopError>> {
        Some(scaled_identity_solve(1.0, c, sigma2, r))
    }

    fn svd_factors(&self) -> Result<Box<dyn SvdFactors + '_>, LinopError> {
        Ok(Box::new(ScaledRowsSvd::new(self, 1.0)))
    }
}

/// Inpainting: keeps a fixed subset of pixels (all channels of each) and
/// drops the rest. Output shape is `[kept_pixels, channels]`.
#[derive(Debug, Clone)]
pub struct Mask {
    geometry: ImageGeometry,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    kept: Vec<usize>,
}

impl Mask {
    /// Keeps exactly the given pixel indices (row-major `y·W + x`).
    pub fn from_pixels(geometry: ImageGeometry, mut kept: Vec<usize>) -> Result<Self, LinopError> {
        kept.sort_unstable();
        kept.dedup();
        if kept.is_empty() {
            return Err(LinopError::InvalidParameter("mask keeps no pixels".into()));
        }
        if let Some(&last) = kept.last() {
            if last >= geometry.pixels() {
                return Err(LinopError::InvalidParameter(format!(
                    "mask pixel {last} outside a {}x{} image",
                    geometry.height, geometry.width
                )));
            }
        }
        Ok(Self {
            geometry,
            input_shape: geometry.shape(),
            output_shape: vec![kept.len(), geometry.channels],
            kept,
        })
    }

    /// Keeps `round(keep·H·W)` pixels chosen by a seeded random ordering.
    pub fn random(geometry: ImageGeometry, keep: f64, seed: u64) -> Result<Self, LinopError> {
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(LinopError::InvalidParameter(format!(
                "mask keep fraction must be in (0, 1], got {keep}"
            )));
        }
        let pixels = geometry.pixels();
        let count = ((keep * pixels as f64).round() as usize).clamp(1, pixels);
        let mut rng = NoiseRng::new(seed, STREAM_OPERATOR);
        let mut keyed: Vec<(u64, usize)> = (0..pixels).map(|i| (rng.next_u64(), i)).collect();
        keyed.sort_unstable();
        let kept = keyed.into_iter().take(count).map(|(_, i)| i).collect();
        Self::from_pixels(geometry, kept)
    }

    pub fn kept_pixels(&self) -> &[usize] {
        &self.kept
    }
}

impl LinearOperator for Mask {
    fn name(&self) -> String {
        format!("mask({} of {})", self.kept.len(), self.geometry.pixels())
    }

    fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            has_svd: true,
            exact_kernel_solve: true,
            gram_scale: Some(1.0),
        }
    }

    fn apply_slice(&self, x: &[f64]) -> Vec<f64> {
        let c = self.geometry.channels;
        let mut out = Vec::with_capacity(self.kept.len() * c);
        for &p in &self.kept {
            out.extend_from_slice(&x[p * c..(p + 1) * c]);
        }
        out
    }

    fn adjoint_slice(&self, y: &[f64]) -> Vec<f64> {
        let c = self.geometry.channels;
        let mut out = vec![0.0; self.geometry.len()];
        for (k, &p) in self.kept.iter().enumerate() {
            out[p * c..(p + 1) * c].copy_from_slice(&y[k * c..(k + 1) * c]);
        }
        out
    }

    fn exact_kernel_solve(&self, c: f64, sigma2: f64, r: &[f64]) -> Option<Result<Vec<f64>, LinopError>> {
        Some(scaled_identity_solve(1.0, c, sigma2, r))
    }

    fn svd_factors(&self) -> Result<Box<dyn SvdFactors + '_>, LinopError> {
        Ok(Box::new(ScaledRowsSvd::new(self, 1.0)))
    }
}
