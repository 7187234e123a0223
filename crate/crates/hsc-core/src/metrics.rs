//! Reference image quality metrics: PSNR and multi-scale SSIM.
//!
//! Both operate on `[C, H, W]` planes in [0, 1]. PSNR is reported on the
//! 8-bit scale; identical inputs return the +infinity sentinel rather than
//! an error so callers can sort by quality without special cases.

use crate::error::{Error, Result};

/// Mean squared error in [0,1] units.
pub fn mse(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::shape(&[x.len()], &[y.len()], "mse operands"));
    }
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
}

/// Peak signal-to-noise ratio in dB on the 8-bit scale.
pub fn psnr(x: &[f64], y: &[f64]) -> Result<f64> {
    let m = mse(x, y)? * 255.0 * 255.0;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0 * 255.0 / m).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
/// Canonical five-scale exponents.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Separable valid-mode Gaussian filter of one plane.
fn filter_plane(p: &[f64], h: usize, w: usize) -> Vec<f64> {
    let win = gaussian_window();
    let oh = h - SSIM_WINDOW + 1;
    let ow = w - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut s = 0.0;
            for (k, &wk) in win.iter().enumerate() {
                s += wk * p[y * w + x + k];
            }
            rows[y * ow + x] = s;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (k, &wk) in win.iter().enumerate() {
                s += wk * rows[(y + k) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    out
}

/// Per-scale means of the luminance and contrast-structure terms, averaged
/// over channels and valid positions.
fn ssim_terms(x: &[f64], y: &[f64], c: usize, h: usize, w: usize) -> (f64, f64) {
    let c1 = (K1 * K1) as f64;
    let c2 = (K2 * K2) as f64;
    let n = h * w;
    let mut l_sum = 0.0;
    let mut cs_sum = 0.0;
    let mut count = 0usize;
    for ci in 0..c {
        let px = &x[ci * n..(ci + 1) * n];
        let py = &y[ci * n..(ci + 1) * n];
        let mu_x = filter_plane(px, h, w);
        let mu_y = filter_plane(py, h, w);
        let xx: Vec<f64> = px.iter().map(|&v| v * v).collect();
        let yy: Vec<f64> = py.iter().map(|&v| v * v).collect();
        let xy: Vec<f64> = px.iter().zip(py).map(|(&a, &b)| a * b).collect();
        let mxx = filter_plane(&xx, h, w);
        let myy = filter_plane(&yy, h, w);
        let mxy = filter_plane(&xy, h, w);
        for i in 0..mu_x.len() {
            let sx = mxx[i] - mu_x[i] * mu_x[i];
            let sy = myy[i] - mu_y[i] * mu_y[i];
            let sxy = mxy[i] - mu_x[i] * mu_y[i];
            l_sum += (2.0 * mu_x[i] * mu_y[i] + c1) / (mu_x[i] * mu_x[i] + mu_y[i] * mu_y[i] + c1);
            cs_sum += (2.0 * sxy + c2) / (sx + sy + c2);
            count += 1;
        }
    }
    (l_sum / count as f64, cs_sum / count as f64)
}

fn downsample2(x: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let oh = h / 2;
    let ow = w / 2;
    let mut out = vec![0.0; c * oh * ow];
    for ci in 0..c {
        for y in 0..oh {
            for x2 in 0..ow {
                let base = ci * h * w + 2 * y * w + 2 * x2;
                out[(ci * oh + y) * ow + x2] = 0.25 * (x[base] + x[base + 1] + x[base + w] + x[base + w + 1]);
            }
        }
    }
    (out, oh, ow)
}

/// Number of usable scales for a given minimum dimension (at most 5).
pub fn ms_ssim_scales(min_dim: usize) -> usize {
    let mut scales = 0usize;
    let mut d = min_dim;
    while d >= SSIM_WINDOW && scales < 5 {
        scales += 1;
        d /= 2;
    }
    scales
}

/// Multi-scale SSIM with canonical weights, renormalized when the image
/// supports fewer than five scales.
pub fn ms_ssim(x: &[f64], y: &[f64], c: usize, h: usize, w: usize) -> Result<f64> {
    if x.len() != c * h * w || y.len() != c * h * w {
        return Err(Error::shape(&[c * h * w], &[x.len().min(y.len())], "ms_ssim operands"));
    }
    let scales = ms_ssim_scales(h.min(w));
    if scales == 0 {
        return Err(Error::Format(format!(
            "image {w}x{h} too small for an {SSIM_WINDOW}-tap SSIM window"
        )));
    }
    let wsum: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let mut cur_x = x.to_vec();
    let mut cur_y = y.to_vec();
    let (mut ch, mut cw) = (h, w);
    let mut score = 1.0f64;
    for s in 0..scales {
        let (l, cs) = ssim_terms(&cur_x, &cur_y, c, ch, cw);
        let weight = MS_SSIM_WEIGHTS[s] / wsum;
        // negative structure means anticorrelation; clamp so the product
        // stays real and bottoms out at zero
        let term = if s + 1 == scales { (l * cs).max(0.0) } else { cs.max(0.0) };
        score *= term.powf(weight);
        if s + 1 < scales {
            let (nx, nh, nw) = downsample2(&cur_x, c, ch, cw);
            let (ny, _, _) = downsample2(&cur_y, c, ch, cw);
            cur_x = nx;
            cur_y = ny;
            ch = nh;
            cw = nw;
        }
    }
    Ok(score)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_identical_images_hits_the_infinity_sentinel() {
        let x = vec![0.25; 3 * 16 * 16];
        assert_eq!(psnr(&x, &x).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_matches_closed_form_values() {
        // one 8-bit step everywhere: MSE = 1 in 8-bit units
        let x = vec![0.0; 3 * 8 * 8];
        let y = vec![1.0 / 255.0; 3 * 8 * 8];
        let p = psnr(&x, &y).unwrap();
        assert!((p - 20.0 * 255.0f64.log10()).abs() < 1e-9, "got {p}");

        // full-range error: MSE = 255^2, 0 dB
        let white = vec![1.0; 3 * 8 * 8];
        let black = vec![0.0; 3 * 8 * 8];
        assert!(psnr(&white, &black).unwrap().abs() < 1e-12);
    }

    #[test]
    fn ms_ssim_identical_images_is_exactly_one() {
        let x: Vec<f64> = (0..3 * 32 * 32).map(|i| ((i * 31 % 97) as f64) / 96.0).collect();
        assert_eq!(ms_ssim(&x, &x, 3, 32, 32).unwrap(), 1.0);
    }

    #[test]
    fn ms_ssim_detects_inversion_of_high_contrast_pattern() {
        let (h, w) = (64, 64);
        let mut x = vec![0.0; h * w];
        for y in 0..h {
            for xx in 0..w {
                x[y * w + xx] = (((y / 4) + (xx / 4)) % 2) as f64;
            }
        }
        let inv: Vec<f64> = x.iter().map(|&v| 1.0 - v).collect();
        let s = ms_ssim(&x, &inv, 1, h, w).unwrap();
        assert!(s < 0.5, "inverted checkerboard scored {s}");
        let near: Vec<f64> = x.iter().map(|&v| (v * 0.95) + 0.02).collect();
        let s2 = ms_ssim(&x, &near, 1, h, w).unwrap();
        assert!(s2 > s, "mild rescale {s2} must beat inversion {s}");
    }

    #[test]
    fn scale_count_follows_the_window_rule() {
        assert_eq!(ms_ssim_scales(10), 0);
        assert_eq!(ms_ssim_scales(11), 1);
        assert_eq!(ms_ssim_scales(64), 3);
        assert_eq!(ms_ssim_scales(176), 5);
        assert_eq!(ms_ssim_scales(4096), 5);
    }

    #[test]
    fn too_small_image_is_an_error() {
        let x = vec![0.5; 3 * 8 * 8];
        assert!(ms_ssim(&x, &x, 3, 8, 8).is_err());
    }

    #[test]
    fn ms_ssim_orders_noise_levels() {
        let (h, w) = (32, 32);
        let x: Vec<f64> = (0..h * w).map(|i| ((i % 13) as f64) / 13.0).collect();
        let small: Vec<f64> = x.iter().enumerate().map(|(i, &v)| v + if i % 2 == 0 { 0.02 } else { -0.02 }).collect();
        let large: Vec<f64> = x.iter().enumerate().map(|(i, &v)| v + if i % 2 == 0 { 0.3 } else { -0.3 }).collect();
        let s_small = ms_ssim(&x, &small, 1, h, w).unwrap();
        let s_large = ms_ssim(&x, &large, 1, h, w).unwrap();
        assert!(s_small > s_large, "small {s_small} vs large {s_large}");
    }
}
