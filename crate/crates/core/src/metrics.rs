//! Image-quality metrics used for evaluation.

use crate::error::{bail, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        bail!(
            Dimension,
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        );
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    check(a, b, "mse")?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(s / a.numel() as f64)
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` for identical inputs.
pub fn psnr(a: &Tensor, b: &Tensor, max_value: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, max_value))
}

pub fn psnr_from_mse(mse: f64, max_value: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_value * max_value / mse).log10()
    }
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    g.into_iter().map(|v| v / total).collect()
}

/// Separable "valid" Gaussian filtering of an `h×w` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, g: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = g.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

fn ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize, g: &[f64], c1: f64, c2: f64) -> f64 {
    let sq = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let (mu_a, _, _) = filter_valid(a, w, h, g);
    let (mu_b, _, _) = filter_valid(b, w, h, g);
    let (e_aa, _, _) = filter_valid(&sq(a, a), w, h, g);
    let (e_bb, _, _) = filter_valid(&sq(b, b), w, h, g);
    let (e_ab, _, _) = filter_valid(&sq(a, b), w, h, g);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total +=
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / mu_a.len() as f64
}

/// Mean structural similarity over every `H×W` plane of the inputs.
///
/// 11×11 Gaussian window (σ = 1.5) evaluated only where it fits inside the
/// image; planes smaller than 11 px shrink the window to the largest odd size
/// that fits.
pub fn ssim(a: &Tensor, b: &Tensor, max_value: f64) -> Result<f64> {
    check(a, b, "ssim")?;
    let s = a.shape();
    if s.len() < 2 {
        bail!(Dimension, "ssim needs at least [H,W], got {s:?}");
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let g = gaussian_window(size, SSIM_SIGMA);
    let c1 = (SSIM_K1 * max_value).powi(2);
    let c2 = (SSIM_K2 * max_value).powi(2);
    let planes = a.numel() / (h * w);
    let mut total = 0.0;
    for p in 0..planes {
        let r = p * h * w..(p + 1) * h * w;
        total += ssim_plane(&a.data()[r.clone()], &b.data()[r], w, h, &g, c1, c2);
    }
    Ok(total / planes as f64)
}

/// Mean endpoint error between two `[..., 2, H, W]` flow tensors.
pub fn mean_endpoint_error(predicted: &Tensor, target: &Tensor) -> Result<f64> {
    check(predicted, target, "endpoint error")?;
    let s = predicted.shape();
    if s.len() < 3 || s[s.len() - 3] != 2 {
        bail!(
            Dimension,
            "flow tensors need a 2-channel axis before H,W, got {s:?}"
        );
    }
    let n = s[s.len() - 2] * s[s.len() - 1];
    let fields = predicted.numel() / (2 * n);
    let (p, t) = (predicted.data(), target.data());
    let mut total = 0.0;
    for f in 0..fields {
        for i in 0..n {
            let du = p[f * 2 * n + i] - t[f * 2 * n + i];
            let dv = p[f * 2 * n + n + i] - t[f * 2 * n + n + i];
            total += du.hypot(dv);
        }
    }
    Ok(total / (fields * n) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(shape: &[usize], seed: u64) -> Tensor {
        let mut s = seed;
        Tensor::from_fn(shape, |_| {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        })
    }

    #[test]
    fn psnr_closed_form() {
        let a = Tensor::zeros(&[1, 10, 10]);
        let b = Tensor::full(&[1, 10, 10], 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        assert!(psnr(&a, &Tensor::zeros(&[10, 10]), 1.0).is_err());
    }

    #[test]
    fn ssim_identity_symmetry_and_constants() {
        let a = noise(&[3, 16, 20], 1);
        let b = noise(&[3, 16, 20], 2);
        assert_eq!(ssim(&a, &a, 1.0).unwrap(), 1.0);
        assert_eq!(ssim(&a, &b, 1.0).unwrap(), ssim(&b, &a, 1.0).unwrap());
        let c1 = (SSIM_K1 * 1.0f64).powi(2);
        let s = ssim(
            &Tensor::zeros(&[12, 12]),
            &Tensor::full(&[12, 12], 1.0),
            1.0,
        )
        .unwrap();
        assert!((s - c1 / (1.0 + c1)).abs() < 1e-9);
    }

    #[test]
    fn ssim_small_images_use_smaller_window() {
        let a = noise(&[4, 6], 3);
        let v = ssim(&a, &a, 1.0).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn endpoint_error() {
        let p = Tensor::new(&[2, 1, 2], vec![3.0, 0.0, 4.0, 0.0]).unwrap();
        let t = Tensor::zeros(&[2, 1, 2]);
        assert_eq!(mean_endpoint_error(&p, &t).unwrap(), 2.5);
    }
}
