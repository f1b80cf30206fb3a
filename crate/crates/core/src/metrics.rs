//! PSNR and SSIM.
//!
//! SSIM uses the usual constants: an 11×11 Gaussian window with σ = 1.5,
//! `K₁ = 0.01`, `K₂ = 0.03`, evaluated on every fully contained window and
//! averaged over windows and channels.

use std::io::Write;

use thiserror::Error;

use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("images differ in shape: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("image {height}x{width} is smaller than the {window}x{window} SSIM window")]
    TooSmall { height: usize, width: usize, window: usize },
    #[error("peak must be positive, got {0}")]
    Peak(f64),
    #[error("expected an image tensor [H, W, C], got shape {0:?}")]
    NotImage(Vec<usize>),
}

fn check(x: &Tensor, r: &Tensor, peak: f64) -> Result<(), MetricError> {
    if x.shape() != r.shape() {
        return Err(MetricError::Shape(x.shape().to_vec(), r.shape().to_vec()));
    }
    if !(peak > 0.0) {
        return Err(MetricError::Peak(peak));
    }
    Ok(())
}

/// `10·log₁₀(peak²/MSE)`; `+∞` when the images are identical.
pub fn psnr(x: &Tensor, reference: &Tensor, peak: f64) -> Result<f64, MetricError> {
    check(x, reference, peak)?;
    let mse = x
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

fn image_dims(x: &Tensor) -> Result<(usize, usize, usize), MetricError> {
    match *x.shape() {
        [h, w] => Ok((h, w, 1)),
        [h, w, c] => Ok((h, w, c)),
        _ => Err(MetricError::NotImage(x.shape().to_vec())),
    }
}

/// Mean structural similarity.
pub fn ssim(x: &Tensor, reference: &Tensor, peak: f64) -> Result<f64, MetricError> {
    check(x, reference, peak)?;
    let (h, w, c) = image_dims(x)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricError::TooSmall {
            height: h,
            width: w,
            window: SSIM_WINDOW,
        });
    }
    let g = gaussian_window();
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for ch in 0..c {
        let px = |i: usize, j: usize| x.data()[(i * w + j) * c + ch];
        let pr = |i: usize, j: usize| reference.data()[(i * w + j) * c + ch];
        for i in 0..oh {
            for j in 0..ow {
                let (mut mx, mut mr, mut xx, mut rr, mut xr) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (a, ga) in g.iter().enumerate() {
                    for (b, gb) in g.iter().enumerate() {
                        let wt = ga * gb;
                        let (u, v) = (px(i + a, j + b), pr(i + a, j + b));
                        mx += wt * u;
                        mr += wt * v;
                        xx += wt * u * u;
                        rr += wt * v * v;
                        xr += wt * u * v;
                    }
                }
                let (vx, vr, cov) = (xx - mx * mx, rr - mr * mr, xr - mx * mr);
                total += ((2.0 * mx * mr + c1) * (2.0 * cov + c2)) / ((mx * mx + mr * mr + c1) * (vx + vr + c2));
            }
        }
    }
    Ok(total / (oh * ow * c) as f64)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct MetricReport {
    pub image_id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

impl MetricReport {
    pub fn compute(image_id: impl Into<String>, x: &Tensor, reference: &Tensor, peak: f64) -> Result<Self, MetricError> {
        Ok(Self {
            image_id: image_id.into(),
            psnr_db: psnr(x, reference, peak)?,
            ssim: ssim(x, reference, peak)?,
        })
    }

    /// Mean over `reports` (infinite PSNR stays infinite).
    pub fn mean(reports: &[MetricReport]) -> Option<MetricReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        Some(MetricReport {
            image_id: "mean".into(),
            psnr_db: reports.iter().map(|r| r.psnr_db).sum::<f64>() / n,
            ssim: reports.iter().map(|r| r.ssim).sum::<f64>() / n,
        })
    }
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

/// Writes `image_id,psnr_db,ssim` rows, followed by a `mean` row when there
/// is more than one report.
pub fn write_csv(w: &mut impl Write, reports: &[MetricReport]) -> std::io::Result<()> {
    writeln!(w, "image_id,psnr_db,ssim")?;
    for r in reports {
        writeln!(w, "{},{},{:.6}", r.image_id, fmt_db(r.psnr_db), r.ssim)?;
    }
    if reports.len() > 1 {
        let m = MetricReport::mean(reports).expect("nonempty");
        writeln!(w, "{},{},{:.6}", m.image_id, fmt_db(m.psnr_db), m.ssim)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::NoiseRng;
    use proptest::prelude::*;

    fn rand_img(seed: u64, h: usize, w: usize, c: usize) -> Tensor {
        let mut rng = NoiseRng::new(seed, 0);
        Tensor::new(vec![h, w, c], (0..h * w * c).map(|_| rng.uniform()).collect()).unwrap()
    }

    #[test]
    fn psnr_cases() {
        let a = rand_img(1, 16, 16, 1);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&b, &a, 1.0).unwrap() - 20.0).abs() < 1e-10);
        let c = rand_img(2, 16, 16, 1);
        let mse: f64 = a.data().iter().zip(c.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 256.0;
        assert!((psnr(&a, &c, 1.0).unwrap() - 10.0 * (1.0 / mse).log10()).abs() < 1e-10);
        assert!(psnr(&a, &rand_img(1, 8, 8, 1), 1.0).is_err());
    }

    #[test]
    fn ssim_identity_and_luminance_shift() {
        let a = rand_img(3, 16, 16, 3);
        assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);
        // constant images: only the luminance term differs from 1
        let (u, v) = (0.3, 0.45);
        let x = Tensor::full(vec![12, 12, 1], u);
        let r = Tensor::full(vec![12, 12, 1], v);
        let c1 = (SSIM_K1 * 1.0f64).powi(2);
        let expect = (2.0 * u * v + c1) / (u * u + v * v + c1);
        let got = ssim(&x, &r, 1.0).unwrap();
        assert!(got < 1.0);
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn ssim_inverted_binary_is_negative() {
        let mut rng = NoiseRng::new(4, 0);
        let a = Tensor::new(vec![16, 16, 1], (0..256).map(|_| if rng.uniform() < 0.5 { 0.0 } else { 1.0 }).collect()).unwrap();
        let b = a.map(|v| 1.0 - v);
        let s = ssim(&b, &a, 1.0).unwrap();
        assert!(s <= 0.0, "{s}");
        assert!(matches!(ssim(&rand_img(1, 10, 16, 1), &rand_img(2, 10, 16, 1), 1.0), Err(MetricError::TooSmall { .. })));
    }

    #[test]
    fn csv_layout() {
        let a = rand_img(5, 12, 12, 1);
        let reports: Vec<_> = (0..3)
            .map(|i| MetricReport::compute(format!("img{i}"), &a, &a, 1.0).unwrap())
            .collect();
        let mut out = Vec::new();
        write_csv(&mut out, &reports).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[1], "img0,inf,1.000000");
        assert!(lines[4].starts_with("mean,inf,"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn metrics_are_symmetric(s1 in 0u64..1000, s2 in 0u64..1000) {
            let a = rand_img(s1, 12, 13, 1);
            let b = rand_img(s2 + 1000, 12, 13, 1);
            prop_assert!((ssim(&a, &b, 1.0).unwrap() - ssim(&b, &a, 1.0).unwrap()).abs() < 1e-12);
            prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        }

        #[test]
        fn ssim_scale_invariant(s in 0u64..1000, k in 0.5f64..4.0) {
            let a = rand_img(s, 12, 12, 1);
            let b = rand_img(s + 7, 12, 12, 1);
            let base = ssim(&a, &b, 1.0).unwrap();
            let scaled = ssim(&a.scale(k), &b.scale(k), k).unwrap();
            prop_assert!((base - scaled).abs() < 1e-10);
        }
    }
}
