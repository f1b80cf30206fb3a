//! Circular 2-D convolution (Gaussian and motion blur).
//!
//! With periodic boundaries the operator is diagonalized by the DFT:
//! `A = F⁻¹ diag(λ) F`, where `λ` is the unnormalized DFT of the kernel
//! embedded in an `H×W` array. Kernel solves divide by `c|λ|² + σ²` in the
//! frequency domain.
//!
//! For real SVD factors we use the real orthonormal Fourier basis: each
//! conjugate pair of frequencies `(k, −k)` contributes the two coefficients
//! `√2·Re X_k` and `√2·Im X_k`, self-conjugate frequencies contribute `Re X_k`.
//! In that basis the operator scales each pair by `|λ_k|` and rotates it by
//! `arg λ_k`, so `V` is the basis itself, `Σ = |λ|`, and `U` is the basis with
//! the phase applied. Singular values come out in frequency order, not sorted.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::{Capabilities, ImageGeometry, LinearOperator, LinopError, SvdFactors};

/// A `rows × cols` filter kernel in row-major order.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Kernel {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl Kernel {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, LinopError> {
        if rows == 0 || cols == 0 || values.len() != rows * cols {
            return Err(LinopError::InvalidParameter(format!(
                "kernel of {rows}x{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(LinopError::InvalidParameter("kernel has non-finite entries".into()));
        }
        Ok(Self { rows, cols, values })
    }

    /// Scales the kernel to unit sum.
    pub fn normalized(mut self) -> Result<Self, LinopError> {
        let s: f64 = self.values.iter().sum();
        if s.abs() < 1e-12 {
            return Err(LinopError::InvalidParameter("kernel sums to zero".into()));
        }
        self.values.iter_mut().for_each(|v| *v /= s);
        Ok(self)
    }
}

/// Separable `size×size` Gaussian with the given standard deviation, unit sum.
pub fn gaussian_kernel(size: usize, std: f64) -> Result<Kernel, LinopError> {
    if size == 0 || !(std > 0.0) {
        return Err(LinopError::InvalidParameter(format!(
            "gaussian kernel needs size >= 1 and std > 0 (got {size}, {std})"
        )));
    }
    let center = (size as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - center;
            (-d * d / (2.0 * std * std)).exp()
        })
        .collect();
    let mut values = Vec::with_capacity(size * size);
    for a in &taps {
        for b in &taps {
            values.push(a * b);
        }
    }
    Kernel::new(size, size, values)?.normalized()
}

/// Parses the plain-text kernel format: a `K_H K_W` header line followed by
/// `K_H` rows of `K_W` whitespace-separated reals.
pub fn parse_kernel_file(text: &str) -> Result<Kernel, LinopError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    let (hline, header) = lines.next().ok_or(LinopError::KernelFile {
        line: 1,
        message: "empty kernel file".into(),
    })?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| LinopError::KernelFile {
            line: hline,
            message: format!("bad header: {e}"),
        })?;
    let [rows, cols] = dims[..] else {
        return Err(LinopError::KernelFile {
            line: hline,
            message: "header must be `K_H K_W`".into(),
        });
    };
    let mut values = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let (lno, line) = lines.next().ok_or(LinopError::KernelFile {
            line: hline + r + 1,
            message: format!("expected {rows} kernel rows, found {r}"),
        })?;
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| LinopError::KernelFile {
                line: lno,
                message: e.to_string(),
            })?;
        if row.len() != cols {
            return Err(LinopError::KernelFile {
                line: lno,
                message: format!("expected {cols} values, found {}", row.len()),
            });
        }
        values.extend(row);
    }
    if let Some((lno, _)) = lines.next() {
        return Err(LinopError::KernelFile {
            line: lno,
            message: "trailing data after kernel rows".into(),
        });
    }
    Kernel::new(rows, cols, values)
}

pub fn read_kernel_file(path: impl AsRef<Path>) -> Result<Kernel, LinopError> {
    let text = std::fs::read_to_string(path)?;
    parse_kernel_file(&text)
}

/// Unitary 2-D FFT over an `h×w` grid.
#[derive(Clone)]
struct Fft2 {
    h: usize,
    w: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Fft2({}x{})", self.h, self.w)
    }
}

impl Fft2 {
    fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            h,
            w,
            row_fwd: planner.plan_fft_forward(w),
            row_inv: planner.plan_fft_inverse(w),
            col_fwd: planner.plan_fft_forward(h),
            col_inv: planner.plan_fft_inverse(h),
        }
    }

    fn transform(&self, data: &mut [Complex64], inverse: bool) {
        let (h, w) = (self.h, self.w);
        let (rf, cf) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        for row in data.chunks_exact_mut(w) {
            rf.process(row);
        }
        let mut col = vec![Complex64::new(0.0, 0.0); h];
        for j in 0..w {
            for i in 0..h {
                col[i] = data[i * w + j];
            }
            cf.process(&mut col);
            for i in 0..h {
                data[i * w + j] = col[i];
            }
        }
        let scale = 1.0 / ((h * w) as f64).sqrt();
        data.iter_mut().for_each(|v| *v *= scale);
    }

    fn forward_real(&self, x: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.transform(&mut buf, false);
        buf
    }

    fn inverse_real(&self, mut buf: Vec<Complex64>) -> Vec<f64> {
        self.transform(&mut buf, true);
        buf.into_iter().map(|v| v.re).collect()
    }
}

/// Real orthonormal Fourier basis bookkeeping for an `h×w` grid.
#[derive(Debug, Clone)]
struct RealFourierBasis {
    // (frequency, conjugate partner); partner == frequency for self-conjugate
    slots: Vec<(usize, usize)>,
}

impl RealFourierBasis {
    fn new(h: usize, w: usize) -> Self {
        let mut slots = Vec::with_capacity(h * w);
        for k1 in 0..h {
            for k2 in 0..w {
                let k = k1 * w + k2;
                let p = ((h - k1) % h) * w + (w - k2) % w;
                if p >= k {
                    slots.push((k, p));
                }
            }
        }
        Self { slots }
    }

    fn to_coeffs(&self, spec: &[Complex64], out: &mut Vec<f64>) {
        for &(k, p) in &self.slots {
            if k == p {
                out.push(spec[k].re);
            } else {
                out.push(std::f64::consts::SQRT_2 * spec[k].re);
                out.push(std::f64::consts::SQRT_2 * spec[k].im);
            }
        }
    }

    /// Inverse of `to_coeffs`; returns the number of coefficients consumed.
    fn from_coeffs(&self, c: &[f64], spec: &mut [Complex64]) -> usize {
        let mut i = 0;
        for &(k, p) in &self.slots {
            if k == p {
                spec[k] = Complex64::new(c[i], 0.0);
                i += 1;
            } else {
                let z = Complex64::new(c[i], c[i + 1]) / std::f64::consts::SQRT_2;
                spec[k] = z;
                spec[p] = z.conj();
                i += 2;
            }
        }
        i
    }
}

/// Periodic-boundary 2-D convolution applied independently to each channel.
#[derive(Debug, Clone)]
pub struct CircularConvolution {
    label: String,
    geometry: ImageGeometry,
    kernel: Kernel,
    shape: Vec<usize>,
    // nonzero taps of the kernel folded onto the grid: (dy, dx, weight)
    taps: Vec<(usize, usize, f64)>,
    spectrum: Vec<Complex64>,
    fft: Fft2,
    basis: RealFourierBasis,
}

impl CircularConvolution {
    /// `y[i,j] = Σ k[a,b] · x[i − a + a₀, j − b + b₀]` (indices mod H, W)
    /// with the kernel centre `(a₀, b₀) = (K_H/2, K_W/2)`.
    pub fn new(geometry: ImageGeometry, kernel: Kernel, label: impl Into<String>) -> Result<Self, LinopError> {
        let (h, w) = (geometry.height, geometry.width);
        if geometry.is_empty() {
            return Err(LinopError::InvalidParameter("empty image geometry".into()));
        }
        let (ca, cb) = (kernel.rows / 2, kernel.cols / 2);
        let mut grid = vec![0.0; h * w];
        for a in 0..kernel.rows {
            for b in 0..kernel.cols {
                let dy = (a as isize - ca as isize).rem_euclid(h as isize) as usize;
                let dx = (b as isize - cb as isize).rem_euclid(w as isize) as usize;
                grid[dy * w + dx] += kernel.values[a * kernel.cols + b];
            }
        }
        let taps = grid
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, &v)| (i / w, i % w, v))
            .collect();
        let fft = Fft2::new(h, w);
        // unnormalized DFT of the embedded kernel
        let norm = ((h * w) as f64).sqrt();
        let spectrum = fft.forward_real(&grid).into_iter().map(|v| v * norm).collect();
        Ok(Self {
            label: label.into(),
            geometry,
            kernel,
            shape: geometry.shape(),
            taps,
            spectrum,
            fft,
            basis: RealFourierBasis::new(h, w),
        })
    }

    pub fn gaussian(geometry: ImageGeometry, size: usize, std: f64) -> Result<Self, LinopError> {
        Self::new(geometry, gaussian_kernel(size, std)?, format!("gaussian_blur(k={size}, std={std})"))
    }

    /// Convolution with an arbitrary kernel, normalized to unit sum.
    pub fn from_kernel(geometry: ImageGeometry, kernel: Kernel) -> Result<Self, LinopError> {
        let label = format!("motion_blur({}x{})", kernel.rows, kernel.cols);
        Self::new(geometry, kernel.normalized()?, label)
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    /// Eigenvalues `λ_k` of the circulant, one per frequency of the `H×W` grid.
    pub fn spectrum(&self) -> &[Complex64] {
        &self.spectrum
    }

    fn channel(&self, x: &[f64], ch: usize) -> Vec<f64> {
        let c = self.geometry.channels;
        x.iter().skip(ch).step_by(c).copied().collect()
    }

    fn put_channel(&self, out: &mut [f64], ch: usize, plane: &[f64]) {
        let c = self.geometry.channels;
        for (i, v) in plane.iter().enumerate() {
            out[i * c + ch] = *v;
        }
    }

    fn convolve(&self, x: &[f64], transpose: bool) -> Vec<f64> {
        let (h, w, c) = (self.geometry.height, self.geometry.width, self.geometry.channels);
        let mut out = vec![0.0; x.len()];
        for i in 0..h {
            for j in 0..w {
                let o = (i * w + j) * c;
                for &(dy, dx, k) in &self.taps {
                    let (si, sj) = if transpose {
                        ((i + dy) % h, (j + dx) % w)
                    } else {
                        ((i + h - dy) % h, (j + w - dx) % w)
                    };
                    let s = (si * w + sj) * c;
                    for ch in 0..c {
                        out[o + ch] += k * x[s + ch];
                    }
                }
            }
        }
        out
    }

    /// Applies `f(λ_k)` as a Fourier multiplier to every channel.
    fn multiplier(&self, x: &[f64], f: impl Fn(Complex64) -> Complex64) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for ch in 0..self.geometry.channels {
            let mut spec = self.fft.forward_real(&self.channel(x, ch));
            for (s, l) in spec.iter_mut().zip(&self.spectrum) {
                *s *= f(*l);
            }
            let plane = self.fft.inverse_real(spec);
            self.put_channel(&mut out, ch, &plane);
        }
        out
    }
}

impl LinearOperator for CircularConvolution {
    fn name(&self) -> String {
        self.label.clone()
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
            gram_scale: None,
        }
    }

    fn apply_slice(&self, x: &[f64]) -> Vec<f64> {
        self.convolve(x, false)
    }

    fn adjoint_slice(&self, y: &[f64]) -> Vec<f64> {
        self.convolve(y, true)
    }

    fn exact_kernel_solve(&self, c: f64, sigma2: f64, r: &[f64]) -> Option<Result<Vec<f64>, LinopError>> {
        let singular = self.spectrum.iter().any(|l| c * l.norm_sqr() + sigma2 == 0.0);
        if singular {
            return Some(Err(LinopError::Singular));
        }
        Some(Ok(self.multiplier(r, |l| Complex64::new(1.0 / (c * l.norm_sqr() + sigma2), 0.0))))
    }

    fn svd_factors(&self) -> Result<Box<dyn SvdFactors + '_>, LinopError> {
        Ok(Box::new(ConvSvd::new(self)))
    }
}

struct ConvSvd<'a> {
    op: &'a CircularConvolution,
    values: Vec<f64>,
    phase: Vec<Complex64>,
}

impl<'a> ConvSvd<'a> {
    fn new(op: &'a CircularConvolution) -> Self {
        let mut per_channel = Vec::with_capacity(op.geometry.pixels());
        for &(k, p) in &op.basis.slots {
            let s = op.spectrum[k].norm();
            per_channel.push(s);
            if k != p {
                per_channel.push(s);
            }
        }
        let values = per_channel.repeat(op.geometry.channels);
        let phase = op
            .spectrum
            .iter()
            .map(|l| {
                let n = l.norm();
                if n == 0.0 {
                    Complex64::new(1.0, 0.0)
                } else {
                    *l / n
                }
            })
            .collect();
        Self { op, values, phase }
    }

    fn analyze(&self, x: &[f64], phase: bool) -> Vec<f64> {
        let mut out = Vec::with_capacity(x.len());
        for ch in 0..self.op.geometry.channels {
            let mut spec = self.op.fft.forward_real(&self.op.channel(x, ch));
            if phase {
                for (s, p) in spec.iter_mut().zip(&self.phase) {
                    *s *= p.conj();
                }
            }
            self.op.basis.to_coeffs(&spec, &mut out);
        }
        out
    }

    fn synthesize(&self, c: &[f64], phase: bool) -> Vec<f64> {
        let n = self.op.geometry.pixels();
        let mut out = vec![0.0; c.len()];
        for ch in 0..self.op.geometry.channels {
            let mut spec = vec![Complex64::new(0.0, 0.0); n];
            self.op.basis.from_coeffs(&c[ch * n..(ch + 1) * n], &mut spec);
            if phase {
                for (s, p) in spec.iter_mut().zip(&self.phase) {
                    *s *= p;
                }
            }
            let plane = self.op.fft.inverse_real(spec);
            self.op.put_channel(&mut out, ch, &plane);
        }
        out
    }
}

impl SvdFactors for ConvSvd<'_> {
    fn singular_values(&self) -> &[f64] {
        &self.values
    }

    fn right_adjoint(&self, x: &[f64]) -> Vec<f64> {
        self.analyze(x, false)
    }

    fn right_apply(&self, c: &[f64]) -> Vec<f64> {
        self.synthesize(c, false)
    }

    fn left_adjoint(&self, y: &[f64]) -> Vec<f64> {
        self.analyze(y, true)
    }

    fn left_apply(&self, c: &[f64]) -> Vec<f64> {
        self.synthesize(c, true)
    }

    fn ordered(&self) -> bool {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linops::testing::*;
    use crate::rng::NoiseRng;

    fn motion() -> Kernel {
        Kernel::new(3, 4, vec![0.0, 1.0, 2.0, 0.5, 0.3, 0.0, 1.0, 0.0, 0.0, 0.2, 0.0, 0.7])
            .unwrap()
            .normalized()
            .unwrap()
    }

    #[test]
    fn gaussian_kernel_sums_to_one() {
        let k = gaussian_kernel(5, 10.0).unwrap();
        assert!((k.values.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        // std 10 over 5 taps is nearly flat
        assert!(k.values.iter().all(|&v| (v - 0.04).abs() < 1e-3));
    }

    #[test]
    fn constant_image_is_preserved() {
        let op = CircularConvolution::gaussian(ImageGeometry::new(9, 7, 2), 5, 10.0).unwrap();
        let x = vec![0.37; 9 * 7 * 2];
        let y = op.apply_slice(&x);
        assert!(y.iter().all(|v| (v - 0.37).abs() < 1e-14));
    }

    #[test]
    fn direct_and_fourier_paths_agree() {
        let op = CircularConvolution::from_kernel(ImageGeometry::new(8, 10, 1), motion()).unwrap();
        let mut rng = NoiseRng::new(5, 0);
        let x = rng.normal_vec(80);
        let direct = op.apply_slice(&x);
        let fourier = op.multiplier(&x, |l| l);
        assert!(rel(&fourier, &direct) < 1e-12);
        let direct_t = op.adjoint_slice(&x);
        let fourier_t = op.multiplier(&x, |l| l.conj());
        assert!(rel(&fourier_t, &direct_t) < 1e-12);
    }

    #[test]
    fn adjoint_consistency() {
        let op = CircularConvolution::from_kernel(ImageGeometry::new(6, 5, 3), motion()).unwrap();
        assert!(adjoint_defect(&op, 32, 8) < 1e-12);
    }

    #[test]
    fn exact_solve_residual() {
        let op = CircularConvolution::gaussian(ImageGeometry::new(8, 8, 1), 5, 1.5).unwrap();
        let mut rng = NoiseRng::new(6, 0);
        let r = rng.normal_vec(64);
        let v = op.exact_kernel_solve(0.7, 0.01, &r).unwrap().unwrap();
        assert!(solve_residual(&op, 0.7, 0.01, &v, &r) < 1e-12);
    }

    #[test]
    fn real_fourier_factors() {
        for (h, w) in [(8, 8), (7, 6), (5, 9)] {
            let op = CircularConvolution::from_kernel(ImageGeometry::new(h, w, 2), motion()).unwrap();
            let (recon, vo, uo) = svd_defects(&op, 6, 3);
            assert!(recon < 1e-12, "{h}x{w} recon {recon}");
            assert!(vo < 1e-12 && uo < 1e-12);
            let f = op.svd_factors().unwrap();
            assert_eq!(f.singular_values().len(), h * w * 2);
            assert!(!f.ordered());
        }
    }

    #[test]
    fn kernel_file_round_trip() {
        let k = parse_kernel_file("2 3\n0.1 0.2 0.3\n0.4 0.5 0.6\n").unwrap();
        assert_eq!((k.rows, k.cols), (2, 3));
        assert_eq!(k.values[4], 0.5);
    }

    #[test]
    fn kernel_file_errors_carry_lines() {
        let err = parse_kernel_file("2 2\n1 2\n3\n").unwrap_err();
        assert!(matches!(err, LinopError::KernelFile { line: 3, .. }));
        let err = parse_kernel_file("2 2\n1 2\n").unwrap_err();
        assert!(matches!(err, LinopError::KernelFile { .. }));
        let err = parse_kernel_file("x 2\n").unwrap_err();
        assert!(matches!(err, LinopError::KernelFile { line: 1, .. }));
        assert!(parse_kernel_file("1 1\n0\n").unwrap().normalized().is_err());
    }
}
