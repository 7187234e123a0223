//! Saliency masks, importance channels, and mask expansion.
//!
//! The rate allocator works on a per-site "plane" value
//! `p = lambda1 * s * C + lambda2 * i`, where `s` is the binary saliency at
//! the stage-1 grid site, `i` the clamped importance channel, and `C` the
//! number of data channels. Saliency is scaled by `C` so both terms live in
//! channel units: a salient site keeps its full channel stack regardless of
//! what the importance channel wants.
//!
//! Expansion turns the plane into per-channel weights
//! `m_k = clamp(p - k, 0, 1)` for `k = 0..C`. Summed in ascending `k` this
//! reproduces `clamp(p, 0, C)` exactly in floating point, which the tests
//! pin down. The ceiled weights gate the bottleneck; the soft weights weight
//! the rate estimate.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    /// Loaded from a caller-provided map.
    Ingested,
    /// Computed by the built-in contrast heuristic.
    Heuristic,
    /// Constant full-keep mask.
    AllOnes,
}

/// Binary saliency at stage-1 grid resolution (one value per latent site).
#[derive(Debug, Clone)]
pub struct SaliencyMask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
    pub provenance: Provenance,
}

impl SaliencyMask {
    pub fn all_ones(h: usize, w: usize) -> Self {
        SaliencyMask { h, w, data: vec![1; h * w], provenance: Provenance::AllOnes }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.h * self.w {
            return Err(Error::shape(&[self.h * self.w], &[self.data.len()], "saliency mask size"));
        }
        if self.data.iter().any(|&v| v > 1) {
            return Err(Error::Format("saliency mask must be binary".into()));
        }
        Ok(())
    }

    /// Downsample an image-resolution map (>=128 means salient) to grid
    /// resolution by 8x8 max pooling. Image dims must be multiples of 8.
    pub fn from_image_map(map: &[u8], iw: usize, ih: usize) -> Result<Self> {
        if map.len() != iw * ih {
            return Err(Error::shape(&[iw * ih], &[map.len()], "saliency map size"));
        }
        if iw % 8 != 0 || ih % 8 != 0 {
            return Err(Error::Format(format!(
                "saliency map dims {iw}x{ih} must be multiples of 8"
            )));
        }
        let (gw, gh) = (iw / 8, ih / 8);
        let mut data = vec![0u8; gw * gh];
        for gy in 0..gh {
            for gx in 0..gw {
                let mut v = 0u8;
                'block: for dy in 0..8 {
                    for dx in 0..8 {
                        if map[(gy * 8 + dy) * iw + gx * 8 + dx] >= 128 {
                            v = 1;
                            break 'block;
                        }
                    }
                }
                data[gy * gw + gx] = v;
            }
        }
        Ok(SaliencyMask { h: gh, w: gw, data, provenance: Provenance::Ingested })
    }

    pub fn salient_fraction(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }
}

/// Center-weighted local-contrast saliency.
///
/// Scores each pixel by its absolute deviation from a local box mean,
/// weighted by a centered Gaussian prior, normalizes by the max score, and
/// thresholds. A constant image has no contrast anywhere; that degenerate
/// case returns an all-ones mask (still tagged as heuristic output).
pub fn heuristic_saliency(image: &[f64], channels: usize, h: usize, w: usize, threshold: f64) -> Result<SaliencyMask> {
    if image.len() != channels * h * w {
        return Err(Error::shape(&[channels * h * w], &[image.len()], "heuristic saliency image"));
    }
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::Format(format!("image dims {w}x{h} must be multiples of 8")));
    }
    let plane = h * w;
    let mut gray = vec![0.0; plane];
    for c in 0..channels {
        for i in 0..plane {
            gray[i] += image[c * plane + i];
        }
    }
    for v in gray.iter_mut() {
        *v /= channels as f64;
    }

    // integral image for box means
    let mut integral = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += gray[y * w + x];
            integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
        }
    }
    let box_mean = |y: usize, x: usize, r: usize| -> f64 {
        let y0 = y.saturating_sub(r);
        let x0 = x.saturating_sub(r);
        let y1 = (y + r + 1).min(h);
        let x1 = (x + r + 1).min(w);
        let s = integral[y1 * (w + 1) + x1] - integral[y0 * (w + 1) + x1] - integral[y1 * (w + 1) + x0]
            + integral[y0 * (w + 1) + x0];
        s / ((y1 - y0) * (x1 - x0)) as f64
    };

    let r = (h.min(w) / 4).max(1);
    let sigma = 0.35 * h.min(w) as f64;
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut score = vec![0.0; plane];
    let mut max_score = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            let contrast = (gray[y * w + x] - box_mean(y, x, r)).abs();
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let weight = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            let s = contrast * weight;
            score[y * w + x] = s;
            max_score = max_score.max(s);
        }
    }
    if max_score == 0.0 {
        let mut m = SaliencyMask::all_ones(h / 8, w / 8);
        m.provenance = Provenance::Heuristic;
        return Ok(m);
    }

    let (gw, gh) = (w / 8, h / 8);
    let mut data = vec![0u8; gw * gh];
    for gy in 0..gh {
        for gx in 0..gw {
            let mut v = 0u8;
            'block: for dy in 0..8 {
                for dx in 0..8 {
                    if score[(gy * 8 + dy) * w + gx * 8 + dx] / max_score >= threshold {
                        v = 1;
                        break 'block;
                    }
                }
            }
            data[gy * gw + gx] = v;
        }
    }
    Ok(SaliencyMask { h: gh, w: gw, data, provenance: Provenance::Heuristic })
}

/// Fused per-site plane value `lambda1 * s * C + lambda2 * i`.
///
/// `importance` must already be clamped to `[0, C]`; `saliency = None` means
/// importance-only allocation (the stage-2 variant).
pub fn fuse_plane(
    saliency: Option<&SaliencyMask>,
    importance: &[f64],
    lambda1: f64,
    lambda2: f64,
    channels: usize,
) -> Result<Vec<f64>> {
    if let Some(s) = saliency {
        s.validate()?;
        if s.data.len() != importance.len() {
            return Err(Error::shape(&[importance.len()], &[s.data.len()], "saliency vs importance size"));
        }
    }
    Ok(importance
        .iter()
        .enumerate()
        .map(|(i, &imp)| {
            let s = saliency.map(|m| m.data[i] as f64).unwrap_or(0.0);
            lambda1 * s * channels as f64 + lambda2 * imp
        })
        .collect())
}

/// Expand a plane `[H*W]` into per-channel soft weights `[C, H, W]` with
/// `m_k = clamp(p - k, 0, 1)`.
pub fn expand_plane(plane: &[f64], channels: usize) -> Vec<f64> {
    let n = plane.len();
    let mut out = vec![0.0; channels * n];
    for k in 0..channels {
        for (i, &p) in plane.iter().enumerate() {
            out[k * n + i] = (p - k as f64).clamp(0.0, 1.0);
        }
    }
    out
}

/// Binarized bottleneck gate: ceil of the soft weights, exactly 0 or 1.
pub fn ceil_binary(soft: &[f64]) -> Vec<f64> {
    soft.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect()
}

/// Split an encoder head output `[C+1, H, W]` into data channels and the
/// raw importance plane, clamping importance to `[0, C]` on the tape.
pub fn split_importance(tape: &mut Tape, head: Var) -> Result<(Var, Var)> {
    let shape = tape.shape(head).to_vec();
    if shape.len() != 3 || shape[0] < 2 {
        return Err(Error::shape(&[2, 0, 0], &shape, "importance split expects [C+1, H, W]"));
    }
    let c = shape[0] - 1;
    let data = tape.slice0(head, 0, c)?;
    let imp = tape.slice0(head, c, 1)?;
    let imp = tape.reshape(imp, vec![shape[1], shape[2]])?;
    let imp = tape.clamp(imp, 0.0, c as f64);
    Ok((data, imp))
}

/// Tape-side fuse + expand. `importance` is the clamped `[H, W]` plane var;
/// returns soft weights `[C, H, W]` mirroring [`fuse_plane`] + [`expand_plane`].
pub fn fuse_and_expand(
    tape: &mut Tape,
    importance: Var,
    saliency: Option<&SaliencyMask>,
    lambda1: f64,
    lambda2: f64,
    channels: usize,
) -> Result<Var> {
    let shape = tape.shape(importance).to_vec();
    if shape.len() != 2 {
        return Err(Error::shape(&[0, 0], &shape, "fuse_and_expand importance"));
    }
    let (h, w) = (shape[0], shape[1]);
    if let Some(s) = saliency {
        s.validate()?;
        if s.h != h || s.w != w {
            return Err(Error::shape(&[h, w], &[s.h, s.w], "saliency vs importance grid"));
        }
    }
    let sal_term: Vec<f64> = (0..h * w)
        .map(|i| lambda1 * saliency.map(|m| m.data[i] as f64).unwrap_or(0.0) * channels as f64)
        .collect();
    let sal = tape.constant(sal_term, vec![h, w])?;
    let scaled = tape.scale(importance, lambda2);
    let plane = tape.add(scaled, sal)?;
    let mut parts = Vec::with_capacity(channels);
    for k in 0..channels {
        let kc = tape.constant(vec![k as f64; h * w], vec![h, w])?;
        let shifted = tape.sub(plane, kc)?;
        let mk = tape.clamp(shifted, 0.0, 1.0);
        parts.push(tape.reshape(mk, vec![1, h, w])?);
    }
    tape.concat0(&parts)
}
