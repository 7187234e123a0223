//! Scalar codebook quantization.
//!
//! Both bottlenecks quantize each latent element independently against a
//! small learnable set of scalar centers. The forward pass is hard nearest-
//! center assignment; gradients flow through the soft assignment
//! `sum_j softmax_j(-sigma * |y - c_j|) * c_j` (see [`crate::tape::Tape::quantize`]).
//! This module holds the inference-side codebook used by the coder and the
//! bitstream, where only the hard assignment matters.

use crate::error::{Error, Result};

/// Index of the closest center; ties resolve to the lowest index.
#[inline]
pub fn nearest_center(y: f64, centers: &[f64]) -> usize {
    let mut best = 0usize;
    let mut best_d = (y - centers[0]).abs();
    for (j, c) in centers.iter().enumerate().skip(1) {
        let d = (y - c).abs();
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

/// Inference-side scalar codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub centers: Vec<f64>,
    pub sigma: f64,
}

impl Codebook {
    pub fn new(centers: Vec<f64>, sigma: f64) -> Result<Self> {
        let cb = Codebook { centers, sigma };
        cb.validate()?;
        Ok(cb)
    }

    /// Evenly spaced centers over [-2, 2].
    pub fn evenly_spaced(levels: usize, sigma: f64) -> Result<Self> {
        if levels == 0 {
            return Err(Error::Config("codebook needs at least one center".into()));
        }
        let centers = if levels == 1 {
            vec![0.0]
        } else {
            (0..levels)
                .map(|i| -2.0 + 4.0 * i as f64 / (levels - 1) as f64)
                .collect()
        };
        Codebook::new(centers, sigma)
    }

    pub fn levels(&self) -> usize {
        self.centers.len()
    }

    /// Centers rounded through f32, matching what serialized artifacts store.
    ///
    /// Encoding and decoding must see identical center values or their
    /// conditional PMFs can integerize differently; round once up front.
    pub fn rounded_f32(&self) -> Result<Codebook> {
        Codebook::new(self.centers.iter().map(|&c| c as f32 as f64).collect(), self.sigma)
    }

    /// Centers must be finite and pairwise distinct, sigma positive.
    pub fn validate(&self) -> Result<()> {
        if self.centers.is_empty() {
            return Err(Error::Config("codebook needs at least one center".into()));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::Numerical(format!("codebook sigma must be positive, got {}", self.sigma)));
        }
        for (i, c) in self.centers.iter().enumerate() {
            if !c.is_finite() {
                return Err(Error::Numerical(format!("codebook center {i} is not finite")));
            }
            for (j, d) in self.centers.iter().enumerate().skip(i + 1) {
                if c == d {
                    return Err(Error::Numerical(format!(
                        "codebook centers {i} and {j} collide at {c}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Hard-assign every element; returns codebook indices.
    pub fn quantize(&self, latent: &[f64]) -> Vec<u32> {
        latent.iter().map(|&y| nearest_center(y, &self.centers) as u32).collect()
    }

    /// Map indices back to center values.
    pub fn dequantize(&self, indices: &[u32]) -> Result<Vec<f64>> {
        indices
            .iter()
            .map(|&i| {
                self.centers
                    .get(i as usize)
                    .copied()
                    .ok_or_else(|| Error::Format(format!("symbol {i} outside codebook of {} centers", self.levels())))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn round_trip_hits_exact_centers() {
        let cb = Codebook::evenly_spaced(6, 1.0).unwrap();
        let latent = vec![-3.0, -0.1, 0.0, 0.41, 2.7];
        let idx = cb.quantize(&latent);
        let vals = cb.dequantize(&idx).unwrap();
        for (v, y) in vals.iter().zip(&latent) {
            let nearest = cb.centers[nearest_center(*y, &cb.centers)];
            assert_eq!(*v, nearest);
        }
        // saturation at the extremes
        assert_eq!(vals[0], -2.0);
        assert_eq!(vals[4], 2.0);
    }

    #[test]
    fn tie_prefers_lower_index() {
        let cb = Codebook::new(vec![-1.0, 1.0], 1.0).unwrap();
        assert_eq!(cb.quantize(&[0.0]), vec![0]);
    }

    #[test]
    fn collision_is_rejected() {
        let err = Codebook::new(vec![0.5, 0.5], 1.0).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
    }

    #[test]
    fn matching_behavior_with_tape_op() {
        let cb = Codebook::evenly_spaced(5, 1.0).unwrap();
        let latent: Vec<f64> = (0..40).map(|i| (i as f64 * 0.7).sin() * 2.5).collect();
        let mut tape = Tape::new();
        let lat = tape.leaf(latent.clone(), vec![40], false).unwrap();
        let cen = tape.leaf(cb.centers.clone(), vec![5], false).unwrap();
        let q = tape.quantize(lat, cen, cb.sigma).unwrap();
        assert_eq!(tape.quantize_indices(q).unwrap(), cb.quantize(&latent).as_slice());
    }

    #[test]
    fn high_sigma_soft_value_collapses_to_hard_center() {
        // With sigma = 1e3 the softmax is a near-delta on the winning
        // center, so the soft assignment agrees with the hard one to 1e-6.
        let centers = vec![-1.0, 0.0, 1.0];
        let sigma = 1e3;
        let y = 0.05f64;
        let amax = centers.iter().map(|c| -sigma * (y - c).abs()).fold(f64::MIN, f64::max);
        let mut wsum = 0.0;
        let mut soft = 0.0;
        for &c in &centers {
            let w = (-sigma * (y - c).abs() - amax).exp();
            wsum += w;
            soft += w * c;
        }
        soft /= wsum;
        let hard = centers[nearest_center(y, &centers)];
        assert!((soft - hard).abs() < 1e-6, "soft {soft} vs hard {hard}");
    }
}
