//! Separable downsampling: average pooling and antialiased bicubic.

use super::{
    scaled_identity_solve, Capabilities, ImageGeometry, LinearOperator, LinopError, ScaledRowsSvd,
    SvdFactors,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleKind {
    AvgPool,
    Bicubic,
}

/// A 1-D downsampling matrix stored as sparse rows.
#[derive(Debug, Clone)]
pub struct Resample1D {
    input_len: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

/// Keys cubic convolution kernel with `a = −0.5`.
fn keys_cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

impl Resample1D {
    /// Mean over consecutive groups of `factor` samples.
    pub fn average(input_len: usize, factor: usize) -> Result<Self, LinopError> {
        check_factor(input_len, factor)?;
        let w = 1.0 / factor as f64;
        let rows = (0..input_len / factor)
            .map(|i| (0..factor).map(|k| (i * factor + k, w)).collect())
            .collect();
        Ok(Self { input_len, rows })
    }

    /// Bicubic downsampling with the kernel stretched by `factor` (antialiased)
    /// and periodic wrap at the borders. Rows are normalized to unit sum.
    pub fn bicubic(input_len: usize, factor: usize) -> Result<Self, LinopError> {
        check_factor(input_len, factor)?;
        let s = factor as f64;
        let n = input_len as isize;
        let mut rows = Vec::with_capacity(input_len / factor);
        for i in 0..input_len / factor {
            let center = (i as f64 + 0.5) * s - 0.5;
            let lo = (center - 2.0 * s).floor() as isize;
            let hi = (center + 2.0 * s).ceil() as isize;
            let mut acc = vec![0.0; input_len];
            for j in lo..=hi {
                let w = keys_cubic((j as f64 - center) / s);
                if w != 0.0 {
                    acc[j.rem_euclid(n) as usize] += w;
                }
            }
            let total: f64 = acc.iter().sum();
            let row = acc
                .into_iter()
                .enumerate()
                .filter(|(_, w)| *w != 0.0)
                .map(|(j, w)| (j, w / total))
                .collect();
            rows.push(row);
        }
        Ok(Self { input_len, rows })
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn output_len(&self) -> usize {
        self.rows.len()
    }
}

fn check_factor(len: usize, factor: usize) -> Result<(), LinopError> {
    if factor == 0 || len % factor != 0 {
        return Err(LinopError::InvalidParameter(format!(
            "downsampling factor {factor} must divide the image size {len}"
        )));
    }
    Ok(())
}

/// `x ↦ R_h · x · R_wᵀ` on each channel of an `H×W×C` image.
#[derive(Debug, Clone)]
pub struct SeparableResample {
    kind: ResampleKind,
    factor: usize,
    geometry: ImageGeometry,
    rows: Resample1D,
    cols: Resample1D,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
}

impl SeparableResample {
    pub fn new(geometry: ImageGeometry, kind: ResampleKind, factor: usize) -> Result<Self, LinopError> {
        let build = match kind {
            ResampleKind::AvgPool => Resample1D::average,
            ResampleKind::Bicubic => Resample1D::bicubic,
        };
        let rows = build(geometry.height, factor)?;
        let cols = build(geometry.width, factor)?;
        Ok(Self {
            kind,
            factor,
            geometry,
            input_shape: geometry.shape(),
            output_shape: vec![rows.output_len(), cols.output_len(), geometry.channels],
            rows,
            cols,
        })
    }

    pub fn avg_pool(geometry: ImageGeometry, factor: usize) -> Result<Self, LinopError> {
        Self::new(geometry, ResampleKind::AvgPool, factor)
    }

    pub fn bicubic(geometry: ImageGeometry, factor: usize) -> Result<Self, LinopError> {
        Self::new(geometry, ResampleKind::Bicubic, factor)
    }

    pub fn kind(&self) -> ResampleKind {
        self.kind
    }

    pub fn factor(&self) -> usize {
        self.factor
    }
}

impl LinearOperator for SeparableResample {
    fn name(&self) -> String {
        match self.kind {
            ResampleKind::AvgPool => format!("avg_pool(x{})", self.factor),
            ResampleKind::Bicubic => format!("bicubic(x{})", self.factor),
        }
    }

    fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    fn capabilities(&self) -> Capabilities {
        let pool = self.kind == ResampleKind::AvgPool;
        let s2 = (self.factor * self.factor) as f64;
        Capabilities {
            has_svd: pool,
            exact_kernel_solve: pool,
            gram_scale: pool.then(|| 1.0 / s2),
        }
    }

    fn apply_slice(&self, x: &[f64]) -> Vec<f64> {
        let (w, c) = (self.geometry.width, self.geometry.channels);
        let (oh, ow) = (self.rows.output_len(), self.cols.output_len());
        // rows first: [oh, w, c]
        let mut mid = vec![0.0; oh * w * c];
        for (i, row) in self.rows.rows.iter().enumerate() {
            let dst = &mut mid[i * w * c..(i + 1) * w * c];
            for &(j, wt) in row {
                let src = &x[j * w * c..(j + 1) * w * c];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wt * s;
                }
            }
        }
        let mut out = vec![0.0; oh * ow * c];
        for i in 0..oh {
            for (k, col) in self.cols.rows.iter().enumerate() {
                let o = (i * ow + k) * c;
                for &(j, wt) in col {
                    let s = (i * w + j) * c;
                    for ch in 0..c {
                        out[o + ch] += wt * mid[s + ch];
                    }
                }
            }
        }
        out
    }

    fn adjoint_slice(&self, y: &[f64]) -> Vec<f64> {
        let (h, w, c) = (self.geometry.height, self.geometry.width, self.geometry.channels);
        let (oh, ow) = (self.rows.output_len(), self.cols.output_len());
        let mut mid = vec![0.0; oh * w * c];
        for i in 0..oh {
            for (k, col) in self.cols.rows.iter().enumerate() {
                let s = (i * ow + k) * c;
                for &(j, wt) in col {
                    let d = (i * w + j) * c;
                    for ch in 0..c {
                        mid[d + ch] += wt * y[s + ch];
                    }
                }
            }
        }
        let mut out = vec![0.0; h * w * c];
        for (i, row) in self.rows.rows.iter().enumerate() {
            let src = &mid[i * w * c..(i + 1) * w * c];
            for &(j, wt) in row {
                let dst = &mut out[j * w * c..(j + 1) * w * c];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wt * s;
                }
            }
        }
        out
    }

    fn exact_kernel_solve(&self, c: f64, sigma2: f64, r: &[f64]) -> Option<Result<Vec<f64>, LinopError>> {
        let k = self.capabilities().gram_scale?;
        Some(scaled_identity_solve(k, c, sigma2, r))
    }

    fn svd_factors(&self) -> Result<Box<dyn SvdFactors + '_>, LinopError> {
        match self.kind {
            ResampleKind::AvgPool => Ok(Box::new(ScaledRowsSvd::new(self, 1.0 / self.factor as f64))),
            ResampleKind::Bicubic => Err(LinopError::Capability {
                operator: self.name(),
                capability: "SVD factors",
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linops::testing::*;
    use crate::linops::to_dense;
    use crate::tensor::Tensor;

    #[test]
    fn keys_kernel_shape() {
        assert_eq!(keys_cubic(0.0), 1.0);
        assert_eq!(keys_cubic(1.0), 0.0);
        assert_eq!(keys_cubic(2.0), 0.0);
        // partition of unity at integer shifts
        for x in [0.1, 0.37, 0.5, 0.9] {
            let s: f64 = (-3..=3).map(|k| keys_cubic(x + k as f64)).sum();
            assert!((s - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn avg_pool_adjoint_spreads_uniformly() {
        let op = SeparableResample::avg_pool(ImageGeometry::new(8, 8, 1), 4).unwrap();
        let mut y = Tensor::zeros(vec![2, 2, 1]);
        y.data_mut()[1] = 1.0;
        let x = op.adjoint(&y).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let expect = if i < 4 && j >= 4 { 1.0 / 16.0 } else { 0.0 };
                assert_eq!(x.data()[i * 8 + j], expect);
            }
        }
        // dense transpose oracle
        let d = to_dense(&op);
        let dt = d.transpose();
        let expect = &dt * nalgebra::DVector::from_column_slice(y.data());
        assert!(rel(x.data(), expect.as_slice()) < 1e-15);
    }

    #[test]
    fn avg_pool_factors() {
        let op = SeparableResample::avg_pool(ImageGeometry::new(8, 8, 2), 2).unwrap();
        assert!(adjoint_defect(&op, 32, 1) < 1e-12);
        let (recon, vo, uo) = svd_defects(&op, 8, 2);
        assert!(recon < 1e-12 && vo < 1e-12 && uo < 1e-12);
        let f = op.svd_factors().unwrap();
        assert!(f.singular_values().iter().all(|&s| s == 0.5));
        // AAᵀ = I/s²
        let d = to_dense(&op);
        let g = &d * d.transpose();
        let err = (g - nalgebra::DMatrix::identity(32, 32) * 0.25).abs().max();
        assert!(err < 1e-15);
    }

    #[test]
    fn bicubic_is_iterative_only() {
        let op = SeparableResample::bicubic(ImageGeometry::new(16, 16, 1), 4).unwrap();
        assert!(!op.capabilities().has_svd);
        assert!(matches!(op.svd_factors(), Err(LinopError::Capability { .. })));
        assert!(adjoint_defect(&op, 32, 3) < 1e-12);
        // constants survive downsampling
        let y = op.apply_slice(&[0.6; 256]);
        assert!(y.iter().all(|v| (v - 0.6).abs() < 1e-14));
        let r = Tensor::full(vec![4, 4, 1], 1.0).map(|v| v * 0.3);
        let v = op.kernel_solve(0.5, 0.01, &r).unwrap();
        assert!(solve_residual(&op, 0.5, 0.01, v.data(), r.data()) < 1e-8);
    }

    #[test]
    fn factor_must_divide() {
        assert!(SeparableResample::avg_pool(ImageGeometry::new(10, 8, 1), 4).is_err());
        assert!(SeparableResample::bicubic(ImageGeometry::new(8, 8, 1), 0).is_err());
    }
}
