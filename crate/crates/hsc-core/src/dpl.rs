//! Deep perceptual loss: channel-weighted distance between unit-normalized
//! activations of a small feature extractor.
//!
//! The extractor is five stride-2 conv blocks with ReLU taps. At desk scale
//! it is pretrained briefly as an autoencoder so the taps carry structure;
//! its parameters then ride along frozen in the codec checkpoint, because a
//! perceptual distance is only comparable across runs when the extractor
//! underneath it is fixed.

use crate::error::{Error, Result};
use crate::image_io::mirror_pad;
use crate::nn::{Conv2dSpec, ConvT2dSpec, Init, ParamSet};
use crate::tape::{Tape, Var};
use rand_chacha::ChaCha12Rng;

pub const TAP_CHANNELS: [usize; 5] = [8, 12, 16, 20, 24];

/// Five-block conv stack; taps are the post-ReLU activations of each block.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    blocks: Vec<Conv2dSpec>,
}

impl FeatureExtractor {
    pub fn new(ps: &mut ParamSet, rng: &mut ChaCha12Rng, prefix: &str) -> Self {
        let mut blocks = Vec::with_capacity(TAP_CHANNELS.len());
        let mut in_c = 3;
        for (i, &out_c) in TAP_CHANNELS.iter().enumerate() {
            blocks.push(Conv2dSpec::new(ps, rng, &format!("{prefix}.conv{i}"), in_c, out_c, 3, 2, 1));
            in_c = out_c;
        }
        FeatureExtractor { blocks }
    }

    /// Post-ReLU activations per block, shallowest first.
    pub fn taps(&self, tape: &mut Tape, vars: &[Var], image: Var) -> Result<Vec<Var>> {
        let shape = tape.shape(image).to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::shape(&[3, 0, 0], &shape, "feature extractor input"));
        }
        let min_dim = shape[1].min(shape[2]);
        if min_dim < 1 << self.blocks.len() {
            return Err(Error::shape(&[1 << self.blocks.len()], &[min_dim], "image too small for 5 tap scales"));
        }
        let mut x = image;
        let mut taps = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let y = b.apply(tape, vars, x)?;
            x = tape.relu(y);
            taps.push(x);
        }
        Ok(taps)
    }
}

/// Non-negative per-channel weights, one vector per tap.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelWeights {
    pub per_tap: Vec<Vec<f64>>,
}

impl ChannelWeights {
    pub fn ones() -> Self {
        ChannelWeights { per_tap: TAP_CHANNELS.iter().map(|&c| vec![1.0; c]).collect() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_tap.len() != TAP_CHANNELS.len() {
            return Err(Error::shape(&[TAP_CHANNELS.len()], &[self.per_tap.len()], "channel weight taps"));
        }
        for (i, (w, &c)) in self.per_tap.iter().zip(&TAP_CHANNELS).enumerate() {
            if w.len() != c {
                return Err(Error::shape(&[c], &[w.len()], format!("tap {i} weights")));
            }
            if w.iter().any(|&v| !v.is_finite() || v < 0.0) {
                return Err(Error::Numerical(format!("tap {i} weights must be finite and non-negative")));
            }
        }
        Ok(())
    }

    /// Register the weights as parameters named `{prefix}.w{tap}`.
    pub fn register(&self, ps: &mut ParamSet, rng: &mut ChaCha12Rng, prefix: &str) -> Vec<usize> {
        self.per_tap
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let idx = ps.add(format!("{prefix}.w{i}"), vec![w.len()], Init::Const(0.0), rng);
                ps.set_value(&format!("{prefix}.w{i}"), w).expect("fresh parameter");
                idx
            })
            .collect()
    }

    /// Read weights back out of a parameter set.
    pub fn from_params(ps: &ParamSet, prefix: &str) -> Result<Self> {
        let per_tap = (0..TAP_CHANNELS.len())
            .map(|i| {
                ps.by_name(&format!("{prefix}.w{i}"))
                    .map(|p| p.value.clone())
                    .ok_or_else(|| Error::Format(format!("missing {prefix}.w{i}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let cw = ChannelWeights { per_tap };
        cw.validate()?;
        Ok(cw)
    }
}

/// Unit-normalize a `[C, H, W]` tap across channels at every position.
fn normalize_tap(tape: &mut Tape, tap: Var) -> Result<Var> {
    let s = tape.shape(tap).to_vec();
    let (c, n) = (s[0], s[1] * s[2]);
    let flat = tape.reshape(tap, vec![c, n])?;
    tape.channel_norm(flat, 1e-10)
}

/// Perceptual distance between two images on the tape.
///
/// `weight_vars` must bind vectors of the tap channel counts (see
/// [`ChannelWeights::register`]); pass all-ones for the unweighted distance.
/// Differentiable in both images and the weights.
pub fn dpl_distance(
    tape: &mut Tape,
    extractor: &FeatureExtractor,
    vars: &[Var],
    weight_vars: &[Var],
    x: Var,
    xhat: Var,
) -> Result<Var> {
    if weight_vars.len() != TAP_CHANNELS.len() {
        return Err(Error::shape(&[TAP_CHANNELS.len()], &[weight_vars.len()], "dpl weight vars"));
    }
    let taps_x = extractor.taps(tape, vars, x)?;
    let taps_y = extractor.taps(tape, vars, xhat)?;
    let mut total: Option<Var> = None;
    for ((tx, ty), &wv) in taps_x.iter().zip(&taps_y).zip(weight_vars) {
        let spatial = {
            let s = tape.shape(*tx);
            (s[1] * s[2]) as f64
        };
        let nx = normalize_tap(tape, *tx)?;
        let ny = normalize_tap(tape, *ty)?;
        let diff = tape.sub(nx, ny)?;
        let wd = tape.mul_channel(diff, wv)?;
        let sq = tape.mul(wd, wd)?;
        let sum = tape.sum(sq);
        let term = tape.scale(sum, 1.0 / spatial);
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one tap"))
}

/// Per-tap, per-channel mean squared difference of unit-normalized tap
/// activations. The weighted distance is linear in the squared channel
/// weights over these coefficients, so fitting can precompute them once
/// per image pair instead of re-running the extractor every step.
pub fn tap_sq_diffs(
    extractor: &FeatureExtractor,
    params: &ParamSet,
    x: &[f64],
    xhat: &[f64],
    h: usize,
    w: usize,
) -> Result<Vec<Vec<f64>>> {
    if x.len() != 3 * h * w {
        return Err(Error::shape(&[3 * h * w], &[x.len()], "tap diff reference"));
    }
    if xhat.len() != x.len() {
        return Err(Error::shape(&[x.len()], &[xhat.len()], "tap diff reconstruction"));
    }
    let (px, ph, pw) = mirror_pad(x, 3, h, w, 32);
    let (py, _, _) = mirror_pad(xhat, 3, h, w, 32);
    let mut tape = Tape::new();
    let vars = params.bind_frozen(&mut tape)?;
    let xv = tape.constant(px, vec![3, ph, pw])?;
    let yv = tape.constant(py, vec![3, ph, pw])?;
    let taps_x = extractor.taps(&mut tape, &vars, xv)?;
    let taps_y = extractor.taps(&mut tape, &vars, yv)?;
    let mut out = Vec::with_capacity(taps_x.len());
    for (tx, ty) in taps_x.iter().zip(&taps_y) {
        let s = tape.shape(*tx).to_vec();
        let (c, n) = (s[0], s[1] * s[2]);
        let nx = normalize_tap(&mut tape, *tx)?;
        let ny = normalize_tap(&mut tape, *ty)?;
        let diff = tape.sub(nx, ny)?;
        let data = tape.data(diff);
        let per_channel = (0..c)
            .map(|ci| data[ci * n..(ci + 1) * n].iter().map(|v| v * v).sum::<f64>() / n as f64)
            .collect();
        out.push(per_channel);
    }
    Ok(out)
}

/// Mirror decoder used only while pretraining the extractor.
struct FeatureDecoder {
    blocks: Vec<ConvT2dSpec>,
}

impl FeatureDecoder {
    fn new(ps: &mut ParamSet, rng: &mut ChaCha12Rng, prefix: &str) -> Self {
        let mut blocks = Vec::new();
        let mut in_c = *TAP_CHANNELS.last().unwrap();
        for (i, &out_c) in TAP_CHANNELS.iter().rev().skip(1).enumerate() {
            blocks.push(ConvT2dSpec::new(ps, rng, &format!("{prefix}.deconv{i}"), in_c, out_c, 4, 2, 1, 0));
            in_c = out_c;
        }
        blocks.push(ConvT2dSpec::new(ps, rng, &format!("{prefix}.deconv4"), in_c, 3, 4, 2, 1, 0));
        FeatureDecoder { blocks }
    }

    fn apply(&self, tape: &mut Tape, vars: &[Var], mut x: Var) -> Result<Var> {
        for (i, b) in self.blocks.iter().enumerate() {
            x = b.apply(tape, vars, x)?;
            if i + 1 < self.blocks.len() {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }
}

/// Briefly train the extractor as an autoencoder so its taps respond to
/// image structure. Returns the extractor with its parameters living in
/// `ps` under `prefix`; the temporary decoder stays out of `ps`.
pub fn pretrain_extractor(
    ps: &mut ParamSet,
    rng: &mut ChaCha12Rng,
    prefix: &str,
    images: &[Vec<f64>],
    dims: (usize, usize),
    steps: usize,
    lr: f64,
) -> Result<FeatureExtractor> {
    let (h, w) = dims;
    let extractor = FeatureExtractor::new(ps, rng, prefix);
    let mut dec_ps = ParamSet::new();
    let decoder = FeatureDecoder::new(&mut dec_ps, rng, "tmp");
    if images.is_empty() {
        return Ok(extractor);
    }
    let enc_count = ps.len();
    for step in 0..steps {
        let img = &images[step % images.len()];
        let mut tape = Tape::new();
        let enc_vars = ps.bind(&mut tape)?;
        let dec_vars = dec_ps.bind(&mut tape)?;
        let x = tape.constant(img.clone(), vec![3, h, w])?;
        let taps = extractor.taps(&mut tape, &enc_vars, x)?;
        let recon = decoder.apply(&mut tape, &dec_vars, *taps.last().unwrap())?;
        let loss = tape.mse(recon, x)?;
        tape.backward(loss)?;
        let mut enc_grads = ps.zero_grads();
        ps.accumulate(&tape, &enc_vars[..enc_count], &mut enc_grads);
        let mut dec_grads = dec_ps.zero_grads();
        dec_ps.accumulate(&tape, &dec_vars, &mut dec_grads);
        ps.adam_step(&enc_grads, lr, Default::default())?;
        dec_ps.adam_step(&dec_grads, lr, Default::default())?;
    }
    Ok(extractor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn setup(seed: u64) -> (FeatureExtractor, ParamSet, Vec<usize>, ChaCha12Rng) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let fx = FeatureExtractor::new(&mut ps, &mut rng, "feat");
        let w_idx = ChannelWeights::ones().register(&mut ps, &mut rng, "dpl");
        (fx, ps, w_idx, rng)
    }

    fn random_image(rng: &mut ChaCha12Rng, h: usize, w: usize) -> Vec<f64> {
        (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect()
    }

    #[test]
    fn identical_images_have_zero_distance() {
        let (fx, ps, w_idx, mut rng) = setup(2);
        let img = random_image(&mut rng, 32, 32);
        let mut tape = Tape::new();
        let vars = ps.bind_frozen(&mut tape).unwrap();
        let wv: Vec<Var> = w_idx.iter().map(|&i| vars[i]).collect();
        let x = tape.constant(img.clone(), vec![3, 32, 32]).unwrap();
        let y = tape.constant(img, vec![3, 32, 32]).unwrap();
        let d = dpl_distance(&mut tape, &fx, &vars, &wv, x, y).unwrap();
        assert_eq!(tape.value(d), 0.0);
    }

    #[test]
    fn distance_is_positive_and_symmetric_for_different_images() {
        let (fx, ps, w_idx, mut rng) = setup(3);
        let a = random_image(&mut rng, 32, 32);
        let b = random_image(&mut rng, 32, 32);
        let eval = |x: &Vec<f64>, y: &Vec<f64>| {
            let mut tape = Tape::new();
            let vars = ps.bind_frozen(&mut tape).unwrap();
            let wv: Vec<Var> = w_idx.iter().map(|&i| vars[i]).collect();
            let xv = tape.constant(x.clone(), vec![3, 32, 32]).unwrap();
            let yv = tape.constant(y.clone(), vec![3, 32, 32]).unwrap();
            let d = dpl_distance(&mut tape, &fx, &vars, &wv, xv, yv).unwrap();
            tape.value(d)
        };
        let dab = eval(&a, &b);
        let dba = eval(&b, &a);
        assert!(dab > 0.0);
        assert!((dab - dba).abs() < 1e-12, "{dab} vs {dba}");
    }

    #[test]
    fn gradient_with_respect_to_reconstruction_matches_finite_differences() {
        let (fx, ps, w_idx, mut rng) = setup(5);
        let a = random_image(&mut rng, 32, 32);
        let b = random_image(&mut rng, 32, 32);

        let mut tape = Tape::new();
        let vars = ps.bind_frozen(&mut tape).unwrap();
        let wv: Vec<Var> = w_idx.iter().map(|&i| vars[i]).collect();
        let xv = tape.constant(a.clone(), vec![3, 32, 32]).unwrap();
        let yv = tape.leaf(b.clone(), vec![3, 32, 32], true).unwrap();
        let d = dpl_distance(&mut tape, &fx, &vars, &wv, xv, yv).unwrap();
        tape.backward(d).unwrap();
        let analytic = tape.grad(yv).unwrap().to_vec();

        let eval = |img: &[f64]| {
            let mut t = Tape::new();
            let vars = ps.bind_frozen(&mut t).unwrap();
            let wv: Vec<Var> = w_idx.iter().map(|&i| vars[i]).collect();
            let xv = t.constant(a.clone(), vec![3, 32, 32]).unwrap();
            let yv = t.constant(img.to_vec(), vec![3, 32, 32]).unwrap();
            let d = dpl_distance(&mut t, &fx, &vars, &wv, xv, yv).unwrap();
            t.value(d)
        };
        let mut max_rel = 0.0f64;
        for probe in [0usize, 577, 1264, 2047, 3071] {
            let eps = 1e-5;
            let mut plus = b.clone();
            plus[probe] += eps;
            let mut minus = b.clone();
            minus[probe] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let rel = (analytic[probe] - numeric).abs() / analytic[probe].abs().max(numeric.abs()).max(1e-3);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn zeroed_channel_weights_silence_their_taps() {
        let (fx, mut ps, w_idx, mut rng) = setup(8);
        let a = random_image(&mut rng, 32, 32);
        let b = random_image(&mut rng, 32, 32);
        for i in 0..TAP_CHANNELS.len() {
            ps.set_value(&format!("dpl.w{i}"), &vec![0.0; TAP_CHANNELS[i]]).unwrap();
        }
        let mut tape = Tape::new();
        let vars = ps.bind_frozen(&mut tape).unwrap();
        let wv: Vec<Var> = w_idx.iter().map(|&i| vars[i]).collect();
        let xv = tape.constant(a, vec![3, 32, 32]).unwrap();
        let yv = tape.constant(b, vec![3, 32, 32]).unwrap();
        let d = dpl_distance(&mut tape, &fx, &vars, &wv, xv, yv).unwrap();
        assert_eq!(tape.value(d), 0.0);
    }

    #[test]
    fn pretraining_reduces_reconstruction_error() {
        let images: Vec<Vec<f64>> = (0..4)
            .map(|k| {
                (0..3 * 32 * 32)
                    .map(|i| ((i + 137 * k) % 61) as f64 / 60.0)
                    .collect()
            })
            .collect();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let mut ps = ParamSet::new();
        let mut dec_ps = ParamSet::new();
        let fx = FeatureExtractor::new(&mut ps, &mut rng, "feat");
        let dec = FeatureDecoder::new(&mut dec_ps, &mut rng, "tmp");
        let loss_at = |ps: &ParamSet, dec_ps: &ParamSet| -> f64 {
            let mut tape = Tape::new();
            let ev = ps.bind_frozen(&mut tape).unwrap();
            let dv = dec_ps.bind_frozen(&mut tape).unwrap();
            let x = tape.constant(images[0].clone(), vec![3, 32, 32]).unwrap();
            let taps = fx.taps(&mut tape, &ev, x).unwrap();
            let recon = dec.apply(&mut tape, &dv, *taps.last().unwrap()).unwrap();
            let loss = tape.mse(recon, x).unwrap();
            tape.value(loss)
        };
        let before = loss_at(&ps, &dec_ps);
        for step in 0..12 {
            let mut tape = Tape::new();
            let ev = ps.bind(&mut tape).unwrap();
            let dv = dec_ps.bind(&mut tape).unwrap();
            let x = tape.constant(images[step % images.len()].clone(), vec![3, 32, 32]).unwrap();
            let taps = fx.taps(&mut tape, &ev, x).unwrap();
            let recon = dec.apply(&mut tape, &dv, *taps.last().unwrap()).unwrap();
            let loss = tape.mse(recon, x).unwrap();
            tape.backward(loss).unwrap();
            let mut eg = ps.zero_grads();
            ps.accumulate(&tape, &ev, &mut eg);
            let mut dg = dec_ps.zero_grads();
            dec_ps.accumulate(&tape, &dv, &mut dg);
            ps.adam_step(&eg, 2e-3, Default::default()).unwrap();
            dec_ps.adam_step(&dg, 2e-3, Default::default()).unwrap();
        }
        let after = loss_at(&ps, &dec_ps);
        assert!(after < before, "autoencoder loss {before} -> {after}");
    }

    #[test]
    fn pretrain_helper_is_deterministic() {
        let images: Vec<Vec<f64>> = (0..2)
            .map(|k| (0..3 * 32 * 32).map(|i| ((i * 7 + k * 13) % 53) as f64 / 52.0).collect())
            .collect();
        let run = || {
            let mut rng = ChaCha12Rng::seed_from_u64(21);
            let mut ps = ParamSet::new();
            pretrain_extractor(&mut ps, &mut rng, "feat", &images, (32, 32), 6, 2e-3).unwrap();
            ps.params.iter().flat_map(|p| p.value.clone()).collect::<Vec<f64>>()
        };
        assert_eq!(run(), run());
    }
}
