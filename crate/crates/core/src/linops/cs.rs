use super::{
    scaled_identity_solve, Capabilities, ImageGeometry, LinearOperator, LinopError, ScaledRowsSvd,
    SvdFactors,
};
use crate::rng::{NoiseRng, STREAM_OPERATOR};

/// Block compressive sensing with an orthonormal-row random matrix.
///
/// The image is tiled into `B×B` blocks per channel and every block is
/// measured by the same `m × B²` matrix `Φ`, where `m = round(ratio·B²)`.
/// `Φ` is a seeded standard-normal matrix with rows orthonormalized by
/// Gram–Schmidt (two passes), so `AAᵀ = I`. Output shape is
/// `[channels, blocks, m]`.
#[derive(Debug, Clone)]
pub struct BlockCs {
    geometry: ImageGeometry,
    block: usize,
    ratio: f64,
    seed: u64,
    rows: usize,
    phi: Vec<f64>,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
}

impl BlockCs {
    pub fn new(geometry: ImageGeometry, ratio: f64, block: usize, seed: u64) -> Result<Self, LinopError> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(LinopError::InvalidParameter(format!(
                "CS ratio must be in (0, 1], got {ratio}"
            )));
        }
        if block == 0 || geometry.height % block != 0 || geometry.width % block != 0 {
            return Err(LinopError::InvalidParameter(format!(
                "CS block size {block} must divide the image size {}x{}",
                geometry.height, geometry.width
            )));
        }
        let n = block * block;
        let rows = ((ratio * n as f64).round() as usize).clamp(1, n);
        let phi = orthonormal_rows(rows, n, seed)?;
        let blocks = (geometry.height / block) * (geometry.width / block);
        Ok(Self {
            geometry,
            block,
            ratio,
            seed,
            rows,
            phi,
            input_shape: geometry.shape(),
            output_shape: vec![geometry.channels, blocks, rows],
        })
    }

    pub fn rows_per_block(&self) -> usize {
        self.rows
    }

    pub fn block(&self) -> usize {
        self.block
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Flat input index of every element of block `(by, bx)` in channel `ch`.
    fn block_indices(&self, by: usize, bx: usize, ch: usize, out: &mut Vec<usize>) {
        out.clear();
        let (w, c, b) = (self.geometry.width, self.geometry.channels, self.block);
        for u in 0..b {
            for v in 0..b {
                let row = by * b + u;
                let col = bx * b + v;
                out.push((row * w + col) * c + ch);
            }
        }
    }

    fn blocks(&self) -> impl Iterator<Item = (usize, usize)> {
        let bw = self.geometry.width / self.block;
        let bh = self.geometry.height / self.block;
        (0..bh).flat_map(move |by| (0..bw).map(move |bx| (by, bx)))
    }
}

fn orthonormal_rows(rows: usize, cols: usize, seed: u64) -> Result<Vec<f64>, LinopError> {
    let mut rng = NoiseRng::new(seed, STREAM_OPERATOR);
    let mut q = rng.normal_vec(rows * cols);
    for i in 0..rows {
        // modified Gram–Schmidt, repeated once for orthogonality at roundoff level
        for _ in 0..2 {
            for j in 0..i {
                let (head, tail) = q.split_at_mut(i * cols);
                let qj = &head[j * cols..(j + 1) * cols];
                let qi = &mut tail[..cols];
                let proj: f64 = qi.iter().zip(qj).map(|(a, b)| a * b).sum();
                for (a, b) in qi.iter_mut().zip(qj) {
                    *a -= proj * b;
                }
            }
        }
        let qi = &mut q[i * cols..(i + 1) * cols];
        let nrm = qi.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nrm < 1e-10 {
            return Err(LinopError::InvalidParameter(
                "degenerate random matrix during orthonormalization".into(),
            ));
        }
        qi.iter_mut().for_each(|v| *v /= nrm);
    }
    Ok(q)
}

impl LinearOperator for BlockCs {
    fn name(&self) -> String {
        format!("cs(ratio={}, block={}, seed={})", self.ratio, self.block, self.seed)
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
        let n = self.block * self.block;
        let nblocks = self.output_shape[1];
        let mut out = vec![0.0; self.output_shape.iter().product()];
        let mut idx = Vec::with_capacity(n);
        let mut vals = vec![0.0; n];
        for ch in 0..self.geometry.channels {
            for (bi, (by, bx)) in self.blocks().enumerate() {
                self.block_indices(by, bx, ch, &mut idx);
                for (v, &i) in vals.iter_mut().zip(&idx) {
                    *v = x[i];
                }
                let base = (ch * nblocks + bi) * self.rows;
                for r in 0..self.rows {
                    let row = &self.phi[r * n..(r + 1) * n];
                    out[base + r] = row.iter().zip(&vals).map(|(a, b)| a * b).sum();
                }
            }
        }
        out
    }

    fn adjoint_slice(&self, y: &[f64]) -> Vec<f64> {
        let n = self.block * self.block;
        let nblocks = self.output_shape[1];
        let mut out = vec![0.0; self.geometry.len()];
        let mut idx = Vec::with_capacity(n);
        let mut vals = vec![0.0; n];
        for ch in 0..self.geometry.channels {
            for (bi, (by, bx)) in self.blocks().enumerate() {
                vals.iter_mut().for_each(|v| *v = 0.0);
                let base = (ch * nblocks + bi) * self.rows;
                for r in 0..self.rows {
                    let coef = y[base + r];
                    let row = &self.phi[r * n..(r + 1) * n];
                    for (v, a) in vals.iter_mut().zip(row) {
                        *v += coef * a;
                    }
                }
                self.block_indices(by, bx, ch, &mut idx);
                for (v, &i) in vals.iter().zip(&idx) {
                    out[i] = *v;
                }
            }
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
