//! Hierarchical two-stage image codec with saliency-driven bit allocation.
//!
//! The crate is organised bottom-up:
//!
//! * [`tape`] — reverse-mode autodiff over dense f64 tensors, plus Adam and
//!   finite-difference gradient checking ([`gradcheck`]).
//! * [`quant`] — scalar codebook quantization (hard forward, soft backward).
//! * [`mask`] — saliency masks, importance channels, and mask expansion.
//! * [`context`] — causal 3D conditional probability models over symbol grids.
//! * [`coder`] — range coder with 16-bit quantized frequencies.
//! * [`codec`] — the two-stage encoder/decoder pipeline and bitstream format.
//! * [`metrics`], [`dpl`], [`afc`] — PSNR, MS-SSIM, a learned perceptual
//!   distance, and two-alternative-forced-choice fitting/scoring.
//! * [`trainer`], [`corpus`] — end-to-end training on a synthetic corpus and
//!   rate-distortion sweeps.

pub mod afc;
pub mod checkpoint;
pub mod coder;
pub mod codec;
pub mod config;
pub mod context;
pub mod corpus;
pub mod dpl;
pub mod error;
pub mod gradcheck;
pub mod image_io;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod quant;
pub mod tape;
pub mod trainer;

pub use error::Error;

/// Worker count used for data-parallel sections.
///
/// Reads `HSC_THREADS` if set (minimum 1), otherwise the available
/// parallelism. Results are identical for any worker count: per-item work is
/// independent and reductions always run in item order.
pub fn worker_count() -> usize {
    if let Ok(v) = std::env::var("HSC_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}
