//! Degraded measurements `y = A x + σ_y·g`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::io::{read_tensor, write_tensor, IoError};
use crate::linops::{ImageGeometry, LinearOperator, LinopError, OperatorDescriptor};
use crate::rng::{NoiseRng, STREAM_MEASUREMENT};
use crate::tensor::Tensor;

/// `A x0 + σ_y·g` with `g` standard normal from `seed`. Nothing is clipped.
pub fn degrade(op: &dyn LinearOperator, x0: &Tensor, sigma_y: f64, seed: u64) -> Result<Tensor, LinopError> {
    if !(sigma_y >= 0.0 && sigma_y.is_finite()) {
        return Err(LinopError::InvalidParameter(format!("sigma_y must be >= 0, got {sigma_y}")));
    }
    let ax = op.apply(x0)?;
    if sigma_y == 0.0 {
        return Ok(ax);
    }
    let g = NoiseRng::new(seed, STREAM_MEASUREMENT).normal_tensor(ax.shape());
    Ok(ax.lincomb(1.0, &g, sigma_y))
}

/// A measurement together with everything needed to rebuild `A` and replay `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub y: Tensor,
    pub meta: MeasurementMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementMeta {
    pub operator: OperatorDescriptor,
    pub sigma_y: f64,
    pub seed: u64,
    pub geometry: ImageGeometry,
    pub output_shape: Vec<usize>,
    /// Value range of the clean images, `[lo, hi]`.
    pub value_range: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl Measurement {
    /// Builds the operator from `descriptor` and degrades `x0` (shape `[H, W, C]`).
    pub fn simulate(
        descriptor: &OperatorDescriptor,
        x0: &Tensor,
        sigma_y: f64,
        seed: u64,
        source: Option<String>,
    ) -> Result<Self, LinopError> {
        let geometry = ImageGeometry::from_shape(x0.shape())?;
        let op = descriptor.build(geometry)?;
        let x0 = x0.clone().reshape(geometry.shape())?;
        let y = degrade(op.as_ref(), &x0, sigma_y, seed)?;
        Ok(Self {
            meta: MeasurementMeta {
                operator: descriptor.clone(),
                sigma_y,
                seed,
                geometry,
                output_shape: y.shape().to_vec(),
                value_range: [0.0, 1.0],
                source,
            },
            y,
        })
    }

    pub fn operator(&self) -> Result<Box<dyn LinearOperator>, LinopError> {
        self.meta.operator.build(self.meta.geometry)
    }

    /// Sidecar path for a measurement tensor file: `y.nrtf` → `y.json`.
    pub fn sidecar_path(tensor_path: &Path) -> PathBuf {
        tensor_path.with_extension("json")
    }

    /// Writes the tensor file and its JSON sidecar.
    pub fn save(&self, tensor_path: &Path) -> Result<(), IoError> {
        write_tensor(tensor_path, &self.y)?;
        let json = serde_json::to_string_pretty(&self.meta).map_err(|e| IoError::Format(e.to_string()))?;
        std::fs::write(Self::sidecar_path(tensor_path), json + "\n")?;
        Ok(())
    }

    pub fn load(tensor_path: &Path) -> Result<Self, IoError> {
        let y = read_tensor(tensor_path)?;
        let side = Self::sidecar_path(tensor_path);
        let text = std::fs::read_to_string(&side)
            .map_err(|e| IoError::Format(format!("cannot read sidecar {}: {e}", side.display())))?;
        let meta: MeasurementMeta =
            serde_json::from_str(&text).map_err(|e| IoError::Format(format!("{}: {e}", side.display())))?;
        if y.shape() != meta.output_shape.as_slice() {
            return Err(IoError::Format(format!(
                "measurement shape {:?} does not match sidecar {:?}",
                y.shape(),
                meta.output_shape
            )));
        }
        Ok(Self { y, meta })
    }
}
