//! Image quality metrics: PSNR, SSIM and mean absolute error.
//!
//! All three take `(B, C, H, W)` tensors in `[0, 1]` of equal shape and are
//! symmetric in their arguments. Identical inputs report PSNR as infinity
//! (rendered as 99 dB in text output), SSIM 1 and L1 0.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Value used when formatting an infinite PSNR for humans.
pub const PSNR_TEXT_CAP: f64 = 99.0;

fn check_pair(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            what.to_string(),
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB: `10 log10(peak^2 / MSE)`. Identical
/// inputs give `f64::INFINITY`.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    check_pair(a, b, "psnr operands")?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// PSNR formatted for text output, with the infinite sentinel capped.
pub fn format_psnr(value: f64) -> String {
    if value.is_finite() {
        format!("{value:.4}")
    } else {
        format!("{PSNR_TEXT_CAP:.4}")
    }
}

/// Mean absolute difference as a percentage of peak.
pub fn l1_pct(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b, "l1 operands")?;
    let mad = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / a.numel() as f64;
    Ok(mad * 100.0)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW as f64 - 1.0) / 2.0;
    let mut total = 0.0;
    for (i, slot) in w.iter_mut().enumerate() {
        let y = (i / SSIM_WINDOW) as f64 - c;
        let x = (i % SSIM_WINDOW) as f64 - c;
        let v = (-(x * x + y * y) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        *slot = v;
        total += v;
    }
    for slot in w.iter_mut() {
        *slot /= total;
    }
    w
}

/// Structural similarity with an 11x11 Gaussian window (sigma 1.5), averaged
/// over all fully-interior windows and channels. Inputs must be at least
/// 11x11.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b, "ssim operands")?;
    let [batch, channels, h, w] = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument {
            what: "ssim input size",
            detail: format!("need at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"),
        });
    }
    let window = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);

    let mut total = 0.0;
    let mut count = 0usize;
    for bi in 0..batch {
        for ci in 0..channels {
            for oy in 0..=(h - SSIM_WINDOW) {
                for ox in 0..=(w - SSIM_WINDOW) {
                    let mut mu_a = 0.0;
                    let mut mu_b = 0.0;
                    for ky in 0..SSIM_WINDOW {
                        for kx in 0..SSIM_WINDOW {
                            let g = window[ky * SSIM_WINDOW + kx];
                            mu_a += g * a.at(bi, ci, oy + ky, ox + kx);
                            mu_b += g * b.at(bi, ci, oy + ky, ox + kx);
                        }
                    }
                    let mut var_a = 0.0;
                    let mut var_b = 0.0;
                    let mut cov = 0.0;
                    for ky in 0..SSIM_WINDOW {
                        for kx in 0..SSIM_WINDOW {
                            let g = window[ky * SSIM_WINDOW + kx];
                            let da = a.at(bi, ci, oy + ky, ox + kx) - mu_a;
                            let db = b.at(bi, ci, oy + ky, ox + kx) - mu_b;
                            var_a += g * da * da;
                            var_b += g * db * db;
                            cov += g * da * db;
                        }
                    }
                    let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
                    let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
                    total += num / den;
                    count += 1;
                }
            }
        }
    }
    Ok(total / count as f64)
}

/// One row of a metric report.
#[derive(Clone, Debug)]
pub struct MetricRow {
    pub pair_id: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub l1_pct: f64,
}

/// Renders metric rows as CSV with the documented column set. PSNR uses the
/// capped text form.
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("pair_id,psnr_db,ssim,l1_pct\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6}\n",
            row.pair_id,
            format_psnr(row.psnr_db),
            row.ssim,
            row.l1_pct
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::uniform_tensor;
    use crate::testutil::rng;

    #[test]
    fn identical_images_hit_the_fixed_points() {
        let x = uniform_tensor([1, 3, 16, 16], &mut rng(111), 0.0, 1.0);
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), f64::INFINITY);
        assert_eq!(format_psnr(f64::INFINITY), "99.0000");
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(l1_pct(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset_psnr_closed_form() {
        // Offset of 16/255 without clipping: PSNR = 20 log10(255 / 16).
        let base = uniform_tensor([1, 3, 12, 12], &mut rng(112), 0.0, 1.0 - 16.0 / 255.0);
        let shifted = base.map(|v| v + 16.0 / 255.0);
        let got = psnr(&base, &shifted, 1.0).unwrap();
        let expected = 20.0 * (255.0f64 / 16.0).log10();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
        assert!((got - 24.0486).abs() < 1e-3);
    }

    #[test]
    fn metrics_are_symmetric() {
        let mut r = rng(113);
        let a = uniform_tensor([1, 3, 16, 16], &mut r, 0.0, 1.0);
        let b = uniform_tensor([1, 3, 16, 16], &mut r, 0.0, 1.0);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        let s_ab = ssim(&a, &b).unwrap();
        let s_ba = ssim(&b, &a).unwrap();
        assert!((s_ab - s_ba).abs() < 1e-12);
        assert_eq!(l1_pct(&a, &b).unwrap(), l1_pct(&b, &a).unwrap());
    }

    #[test]
    fn inverted_checkerboard_scores_poorly() {
        let x = Tensor::from_fn([1, 1, 16, 16], |_, _, h, w| ((h + w) % 2) as f64);
        let inv = x.map(|v| 1.0 - v);
        let s = ssim(&x, &inv).unwrap();
        assert!(s < 0.5, "ssim {s}");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = Tensor::zeros([1, 1, 16, 16]);
        let b = Tensor::zeros([1, 1, 12, 12]);
        assert!(psnr(&a, &b, 1.0).is_err());
        assert!(ssim(&a, &b).is_err());
        assert!(l1_pct(&a, &b).is_err());
    }

    #[test]
    fn small_images_rejected_by_ssim() {
        let a = Tensor::zeros([1, 1, 8, 8]);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn csv_has_documented_columns() {
        let rows = vec![MetricRow {
            pair_id: "0000".into(),
            psnr_db: f64::INFINITY,
            ssim: 1.0,
            l1_pct: 0.0,
        }];
        let csv = metrics_csv(&rows);
        assert!(csv.starts_with("pair_id,psnr_db,ssim,l1_pct\n"));
        assert!(csv.contains("0000,99.0000,1.000000,0.000000"));
    }
}
