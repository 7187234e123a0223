//! The codec itself: encoder/decoder ladders, saliency-driven masking,
//! quantization, two-stage conditional entropy coding, and the `.hsc`
//! bitstream container.
//!
//! Layout of a compressed file, all little-endian:
//!
//! ```text
//! "HSCB"  version:u16  W:u32  H:u32  config_digest:u64
//! L1:u16  centers1:[f32; L1]  L2:u16  centers2:[f32; L2]
//! stage-2 payload  stage-1 payload
//! ```
//!
//! Stage 2 is coded first and unconditionally; its decoded latents are run
//! through the stage-2 decoder to produce the conditioning planes for stage 1.
//! Encoder and decoder must see bit-identical conditioning, which holds
//! because both sides rebuild it from the same dequantized symbols with the
//! same frozen parameters, and checkpoint values are f32-rounded so the f32
//! centers stored in the bitstream reproduce them exactly.

use crate::checkpoint::Checkpoint;
use crate::coder::{decode_grid, encode_grid_with_bits};
use crate::config::{CodecConfig, TrainConfig};
use crate::context::ContextModel;
use crate::dpl::{dpl_distance, ChannelWeights, FeatureExtractor};
use crate::error::{Error, Result};
use crate::image_io::{crop, mirror_pad};
use crate::mask::{ceil_binary, fuse_and_expand, heuristic_saliency, split_importance, SaliencyMask};
use crate::nn::{AttentionSpec, Conv2dSpec, ConvT2dSpec, Init, ParamSet, ResBlockSpec};
use crate::quant::Codebook;
use crate::tape::{Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::path::Path;

pub const BITSTREAM_MAGIC: &[u8; 4] = b"HSCB";
pub const BITSTREAM_VERSION: u16 = 1;
/// Images are reflect-padded to this multiple before encoding.
pub const PAD_MULTIPLE: usize = 32;
/// Contrast threshold for the fallback saliency heuristic.
pub const SALIENCY_THRESHOLD: f64 = 0.5;

/// Stride-2 conv ladder with residual blocks per scale, optional
/// self-attention at the innermost scale, and a stride-1 projection head.
/// An optional pooled shortcut (4x average pool, 2x2 space-to-depth, 1x1
/// projection) is added to the head so the bottleneck sees block statistics
/// directly; without it the stack needs far more steps than the short
/// training schedule provides before anything useful reaches the bottleneck.
#[derive(Debug, Clone)]
pub struct EncoderNet {
    downs: Vec<Conv2dSpec>,
    res: Vec<Vec<ResBlockSpec>>,
    attn: Option<AttentionSpec>,
    head: Conv2dSpec,
    bypass: Option<Conv2dSpec>,
}

impl EncoderNet {
    fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha12Rng,
        prefix: &str,
        in_c: usize,
        widths: &[usize],
        out_c: usize,
        res_blocks: usize,
        attention: bool,
        bypass: bool,
    ) -> Self {
        let mut downs = Vec::with_capacity(widths.len());
        let mut res = Vec::with_capacity(widths.len());
        let mut c = in_c;
        for (i, &wd) in widths.iter().enumerate() {
            downs.push(Conv2dSpec::new(ps, rng, &format!("{prefix}.down{i}"), c, wd, 3, 2, 1));
            res.push(
                (0..res_blocks)
                    .map(|r| ResBlockSpec::new(ps, rng, &format!("{prefix}.res{i}_{r}"), wd))
                    .collect(),
            );
            c = wd;
        }
        let attn =
            attention.then(|| AttentionSpec::new(ps, rng, &format!("{prefix}.attn"), c, (c / 2).max(4)));
        let head = Conv2dSpec::new(ps, rng, &format!("{prefix}.head"), c, out_c, 3, 1, 1);
        let bypass = bypass
            .then(|| Conv2dSpec::new(ps, rng, &format!("{prefix}.bypass"), 4 * in_c, out_c, 1, 1, 0));
        EncoderNet { downs, res, attn, head, bypass }
    }

    pub fn apply(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for (down, blocks) in self.downs.iter().zip(&self.res) {
            h = down.apply(tape, vars, h)?;
            h = tape.relu(h);
            for b in blocks {
                h = b.apply(tape, vars, h)?;
            }
        }
        if let Some(a) = &self.attn {
            h = a.apply(tape, vars, h)?;
        }
        let out = self.head.apply(tape, vars, h)?;
        match &self.bypass {
            Some(conv) => {
                let pooled = tape.avg_pool2(x, 4)?;
                let folded = tape.space_to_depth2(pooled, 2)?;
                let shortcut = conv.apply(tape, vars, folded)?;
                tape.add(out, shortcut)
            }
            None => Ok(out),
        }
    }
}

/// Mirror of [`EncoderNet`]: stride-1 stem, then per scale residual blocks
/// and a stride-2 transposed conv. The final upsample is linear. When the
/// paired encoder has a pooled shortcut the decoder mirrors it: 1x1
/// projection, 2x2 depth-to-space, 4x nearest upsample.
#[derive(Debug, Clone)]
pub struct DecoderNet {
    stem: Conv2dSpec,
    attn: Option<AttentionSpec>,
    res: Vec<Vec<ResBlockSpec>>,
    ups: Vec<ConvT2dSpec>,
    bypass: Option<Conv2dSpec>,
}

impl DecoderNet {
    /// `widths` runs innermost-first (reverse of the paired encoder).
    fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha12Rng,
        prefix: &str,
        in_c: usize,
        widths: &[usize],
        out_c: usize,
        res_blocks: usize,
        attention: bool,
        bypass: bool,
    ) -> Self {
        let stem = Conv2dSpec::new(ps, rng, &format!("{prefix}.stem"), in_c, widths[0], 3, 1, 1);
        let attn = attention
            .then(|| AttentionSpec::new(ps, rng, &format!("{prefix}.attn"), widths[0], (widths[0] / 2).max(4)));
        let mut res = Vec::with_capacity(widths.len());
        let mut ups = Vec::with_capacity(widths.len());
        for (i, &wd) in widths.iter().enumerate() {
            res.push(
                (0..res_blocks)
                    .map(|r| ResBlockSpec::new(ps, rng, &format!("{prefix}.res{i}_{r}"), wd))
                    .collect(),
            );
            let next = if i + 1 < widths.len() { widths[i + 1] } else { out_c };
            ups.push(ConvT2dSpec::new(ps, rng, &format!("{prefix}.up{i}"), wd, next, 4, 2, 1, 0));
        }
        let bypass = bypass
            .then(|| Conv2dSpec::new(ps, rng, &format!("{prefix}.bypass"), in_c, 4 * out_c, 1, 1, 0));
        DecoderNet { stem, attn, res, ups, bypass }
    }

    pub fn apply(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let mut h = self.stem.apply(tape, vars, x)?;
        h = tape.relu(h);
        if let Some(a) = &self.attn {
            h = a.apply(tape, vars, h)?;
        }
        for (i, (blocks, up)) in self.res.iter().zip(&self.ups).enumerate() {
            for b in blocks {
                h = b.apply(tape, vars, h)?;
            }
            h = up.apply(tape, vars, h)?;
            if i + 1 < self.ups.len() {
                h = tape.relu(h);
            }
        }
        match &self.bypass {
            Some(conv) => {
                let proj = conv.apply(tape, vars, x)?;
                let spread = tape.depth_to_space2(proj, 2)?;
                let shortcut = tape.upsample_nearest2(spread, 4)?;
                tape.add(h, shortcut)
            }
            None => Ok(h),
        }
    }
}

/// All networks, codebooks, and metric parameters of one model, in a single
/// parameter set so one checkpoint restores everything.
pub struct Codec {
    pub config: CodecConfig,
    pub params: ParamSet,
    pub e1: EncoderNet,
    pub d1: DecoderNet,
    pub e2: EncoderNet,
    pub d2: DecoderNet,
    pub ctx1: ContextModel,
    pub ctx2: ContextModel,
    pub extractor: FeatureExtractor,
    cb1: usize,
    cb2: usize,
    dpl_w: Vec<usize>,
}

impl Codec {
    /// Build a fresh model; initialization depends only on `config` (the
    /// seed included), so a config determines the starting parameters.
    pub fn new(config: CodecConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
        let mut ps = ParamSet::new();
        let w = config.width;
        let e1_widths = [w, w + w / 2, 2 * w];
        let e2_widths = [w, 2 * w];
        let d1_widths = [2 * w, w + w / 2, w];
        let d2_widths = [2 * w, w];
        let e1 = EncoderNet::new(&mut ps, &mut rng, "e1", 3, &e1_widths, config.c1 + 1, config.res_blocks, config.attention, true);
        let d1 = DecoderNet::new(&mut ps, &mut rng, "d1", config.c1, &d1_widths, 3, config.res_blocks, config.attention, true);
        let e2 = EncoderNet::new(&mut ps, &mut rng, "e2", config.c1, &e2_widths, config.c2 + 1, config.res_blocks, config.attention, false);
        let d2 = DecoderNet::new(&mut ps, &mut rng, "d2", config.c2, &d2_widths, config.c1, config.res_blocks, config.attention, false);
        let ctx1 = ContextModel::new(
            &mut ps,
            &mut rng,
            "ctx1",
            config.l1,
            config.ctx_hidden,
            config.ctx_layers,
            config.c1,
            config.ctx_kernel,
        )?;
        let ctx2 = ContextModel::new(
            &mut ps,
            &mut rng,
            "ctx2",
            config.l2,
            config.ctx_hidden,
            config.ctx_layers,
            0,
            config.ctx_kernel,
        )?;
        let cb1 = ps.add("cb1", vec![config.l1], Init::Linspace { lo: -2.0, hi: 2.0 }, &mut rng);
        let cb2 = ps.add("cb2", vec![config.l2], Init::Linspace { lo: -2.0, hi: 2.0 }, &mut rng);
        let extractor = FeatureExtractor::new(&mut ps, &mut rng, "feat");
        let dpl_w = ChannelWeights::ones().register(&mut ps, &mut rng, "dpl");
        // Start both importance planes at the clamp ceiling. With the default
        // lambda2 below one, non-salient sites then keep a fixed fraction of
        // the channels while saliency fusion saturates salient sites, and the
        // payload stays close to the soft rate estimate: a plane wandering
        // mid-channel makes the real stream pay full price for a channel the
        // soft weights only partially count.
        raise_last_bias(&mut ps, "e1.head.b", config.c1 as f64)?;
        raise_last_bias(&mut ps, "e2.head.b", config.c2 as f64)?;
        // The shortcut starts as an exact block-mean codec and the stage-1
        // heads start silent, so the first step already transmits content
        // and the stacks learn residuals on top.
        init_block_passthrough(&mut ps, config.c1)?;
        Ok(Codec { config, params: ps, e1, d1, e2, d2, ctx1, ctx2, extractor, cb1, cb2, dpl_w })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut codec = Codec::new(ckpt.config.clone())?;
        ckpt.apply_to(&mut codec.params)?;
        Ok(codec)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_params(&self.config, &self.params)
    }

    pub fn codebook1(&self) -> Result<Codebook> {
        Codebook::new(self.params.params[self.cb1].value.clone(), self.config.sigma)
    }

    pub fn codebook2(&self) -> Result<Codebook> {
        Codebook::new(self.params.params[self.cb2].value.clone(), self.config.sigma)
    }

    /// Parameter names the optimizer must leave alone: the perceptual metric
    /// is fixed while the codec trains under it.
    pub fn frozen_prefixes() -> &'static [&'static str] {
        &["feat.", "dpl."]
    }

    pub fn dpl_weight_vars(&self, vars: &[Var]) -> Vec<Var> {
        self.dpl_w.iter().map(|&i| vars[i]).collect()
    }

    /// Perceptual distance between two same-sized images, using the stored
    /// extractor and channel weights. Inputs are reflect-padded so the
    /// extractor always has at least 32 pixels per side.
    pub fn dpl_metric(&self, a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
        if a.len() != 3 * h * w || b.len() != a.len() {
            return Err(Error::shape(&[3 * h * w], &[a.len().min(b.len())], "dpl metric inputs"));
        }
        let (pa, ph, pw) = mirror_pad(a, 3, h, w, PAD_MULTIPLE);
        let (pb, _, _) = mirror_pad(b, 3, h, w, PAD_MULTIPLE);
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape)?;
        let wvars = self.dpl_weight_vars(&vars);
        let av = tape.constant(pa, vec![3, ph, pw])?;
        let bv = tape.constant(pb, vec![3, ph, pw])?;
        let d = dpl_distance(&mut tape, &self.extractor, &vars, &wvars, av, bv)?;
        Ok(tape.value(d))
    }

    /// Compress one image. `saliency_px` is an optional per-pixel map at the
    /// original resolution (values ≥ 128 are salient); without one, a
    /// contrast-based heuristic fills in.
    pub fn compress(
        &self,
        image: &[f64],
        w: usize,
        h: usize,
        saliency_px: Option<&[u8]>,
    ) -> Result<CompressOutput> {
        if w == 0 || h == 0 || image.len() != 3 * w * h {
            return Err(Error::shape(&[3 * h * w], &[image.len()], "compress image"));
        }
        if image.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("compress input has non-finite values".into()));
        }
        let (c1, c2) = (self.config.c1, self.config.c2);
        let (px, ph, pw) = mirror_pad(image, 3, h, w, PAD_MULTIPLE);
        let (h8, w8) = (ph / 8, pw / 8);
        let (h32, w32) = (ph / 32, pw / 32);
        let sal = match saliency_px {
            Some(map) => {
                if map.len() != w * h {
                    return Err(Error::shape(&[w * h], &[map.len()], "saliency map"));
                }
                let asf: Vec<f64> = map.iter().map(|&v| v as f64).collect();
                let (padded, _, _) = mirror_pad(&asf, 1, h, w, PAD_MULTIPLE);
                let bytes: Vec<u8> = padded.iter().map(|&v| v as u8).collect();
                SaliencyMask::from_image_map(&bytes, pw, ph)?
            }
            None => heuristic_saliency(&px, 3, ph, pw, SALIENCY_THRESHOLD)?,
        };

        // Decoders rebuild codebooks from the f32 centers stored in the
        // artifact, so the encode side must quantize against the same
        // rounded values or conditional PMFs can drift by an ulp and desync.
        let cb1 = self.codebook1()?.rounded_f32()?;
        let cb2 = self.codebook2()?.rounded_f32()?;

        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape)?;
        let c1v = tape.leaf(cb1.centers.clone(), vec![self.config.l1], false)?;
        let c2v = tape.leaf(cb2.centers.clone(), vec![self.config.l2], false)?;
        let x = tape.constant(px, vec![3, ph, pw])?;
        let head1 = self.e1.apply(&mut tape, &vars, x)?;
        let (y, imp1) = split_importance(&mut tape, head1)?;
        let soft1 = fuse_and_expand(&mut tape, imp1, Some(&sal), self.config.lambda1, self.config.lambda2, c1)?;
        let hard1 = ceil_binary(tape.data(soft1));
        let kept_fraction = hard1.iter().sum::<f64>() / hard1.len() as f64;
        let hard1v = tape.constant(hard1, vec![c1, h8, w8])?;
        let ym = tape.mul(y, hard1v)?;
        let yq = tape.quantize(ym, c1v, self.config.sigma)?;
        let idx1 = tape.quantize_indices(yq).expect("quantize node").to_vec();

        let head2 = self.e2.apply(&mut tape, &vars, yq)?;
        let (z, imp2) = split_importance(&mut tape, head2)?;
        let soft2 = fuse_and_expand(&mut tape, imp2, None, self.config.lambda1, self.config.lambda2, c2)?;
        let hard2 = ceil_binary(tape.data(soft2));
        let hard2v = tape.constant(hard2, vec![c2, h32, w32])?;
        let zm = tape.mul(z, hard2v)?;
        let zq = tape.quantize(zm, c2v, self.config.sigma)?;
        let idx2 = tape.quantize_indices(zq).expect("quantize node").to_vec();

        let (stage2, _) = encode_grid_with_bits(&self.ctx2, &self.params, &idx2, &cb2, (c2, h32, w32), None)?;
        let cond = self.d2.apply(&mut tape, &vars, zq)?;
        let cond_data = tape.data(cond).to_vec();
        let (stage1, stage1_site_bits) =
            encode_grid_with_bits(&self.ctx1, &self.params, &idx1, &cb1, (c1, h8, w8), Some(&cond_data))?;

        // The soft-mask-weighted estimate the training loss sees, for
        // comparison against the real payload.
        let rate1 = self.ctx1.rate_bits(&mut tape, &vars, yq, &idx1, Some(cond), Some(soft1))?;
        let rate2 = self.ctx2.rate_bits(&mut tape, &vars, zq, &idx2, None, Some(soft2))?;
        let rate_estimate_bpp = (tape.value(rate1) + tape.value(rate2)) / (w * h) as f64;

        let stage1_bits = stage1.declared_bits;
        let stage2_bits = stage2.declared_bits;
        let bitstream = Bitstream {
            w: w as u32,
            h: h as u32,
            digest: self.config.digest(),
            centers1: cb1.centers.iter().map(|&c| c as f32).collect(),
            centers2: cb2.centers.iter().map(|&c| c as f32).collect(),
            stage2,
            stage1,
        };
        let bpp = bitstream.bpp();
        Ok(CompressOutput {
            bitstream,
            stats: CompressStats {
                bpp,
                rate_estimate_bpp,
                stage1_bits,
                stage2_bits,
                stage1_site_bits,
                stage1_indices: idx1,
                stage2_indices: idx2,
                kept_fraction,
                saliency: sal,
            },
        })
    }

    pub fn decompress(&self, bs: &Bitstream) -> Result<DecompressOutput> {
        let model_digest = self.config.digest();
        if bs.digest != model_digest {
            return Err(Error::DigestMismatch { artifact: bs.digest, model: model_digest });
        }
        let (c1, c2) = (self.config.c1, self.config.c2);
        if bs.centers1.len() != self.config.l1 || bs.centers2.len() != self.config.l2 {
            return Err(Error::Format("bitstream codebook sizes disagree with the model".into()));
        }
        let (w, h) = (bs.w as usize, bs.h as usize);
        if w == 0 || h == 0 {
            return Err(Error::Format("bitstream declares an empty image".into()));
        }
        let ph = h.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE;
        let pw = w.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE;
        let (h8, w8) = (ph / 8, pw / 8);
        let (h32, w32) = (ph / 32, pw / 32);
        let cb1 = Codebook::new(bs.centers1.iter().map(|&c| c as f64).collect(), self.config.sigma)?;
        let cb2 = Codebook::new(bs.centers2.iter().map(|&c| c as f64).collect(), self.config.sigma)?;

        let idx2 = decode_grid(&bs.stage2, &self.ctx2, &self.params, &cb2, (c2, h32, w32), None)?;
        let zvals = cb2.dequantize(&idx2)?;
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape)?;
        let zq = tape.constant(zvals, vec![c2, h32, w32])?;
        let cond = self.d2.apply(&mut tape, &vars, zq)?;
        let cond_data = tape.data(cond).to_vec();
        let idx1 = decode_grid(&bs.stage1, &self.ctx1, &self.params, &cb1, (c1, h8, w8), Some(&cond_data))?;
        let yvals = cb1.dequantize(&idx1)?;
        let yq = tape.constant(yvals, vec![c1, h8, w8])?;
        let xh = self.d1.apply(&mut tape, &vars, yq)?;
        let xh = tape.clamp(xh, 0.0, 1.0);
        let image = crop(tape.data(xh), 3, ph, pw, h, w);
        Ok(DecompressOutput { image, w, h, stage1_indices: idx1, stage2_indices: idx2 })
    }

    /// One differentiable pass for training: runs the full pipeline on a
    /// padded image and assembles the loss
    /// `alpha * max(t, rate_bpp) + beta * weighted_distortion + aux`.
    ///
    /// The auxiliary term trains the stage-2 decoder to predict the (detached)
    /// stage-1 symbols, keeping the conditioning planes informative.
    pub fn train_forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        image: &[f64],
        h: usize,
        w: usize,
        sal: &SaliencyMask,
        tc: &TrainConfig,
    ) -> Result<TrainOutputs> {
        if h % PAD_MULTIPLE != 0 || w % PAD_MULTIPLE != 0 {
            return Err(Error::Config(format!("training images must be multiples of {PAD_MULTIPLE}, got {w}x{h}")));
        }
        if image.len() != 3 * h * w {
            return Err(Error::shape(&[3 * h * w], &[image.len()], "train image"));
        }
        let (c1, c2) = (self.config.c1, self.config.c2);
        let (h8, w8) = (h / 8, w / 8);
        let (h32, w32) = (h / 32, w / 32);
        let x = tape.constant(image.to_vec(), vec![3, h, w])?;
        let head1 = self.e1.apply(tape, vars, x)?;
        let (y, imp1) = split_importance(tape, head1)?;
        let soft1 = fuse_and_expand(tape, imp1, Some(sal), self.config.lambda1, self.config.lambda2, c1)?;
        let hard1 = ceil_binary(tape.data(soft1));
        let hard1v = tape.constant(hard1, vec![c1, h8, w8])?;
        let ym = tape.mul(y, hard1v)?;
        let yq = tape.quantize(ym, vars[self.cb1], self.config.sigma)?;
        let idx1 = tape.quantize_indices(yq).expect("quantize node").to_vec();

        let head2 = self.e2.apply(tape, vars, yq)?;
        let (z, imp2) = split_importance(tape, head2)?;
        let soft2 = fuse_and_expand(tape, imp2, None, self.config.lambda1, self.config.lambda2, c2)?;
        let hard2 = ceil_binary(tape.data(soft2));
        let hard2v = tape.constant(hard2, vec![c2, h32, w32])?;
        let zm = tape.mul(z, hard2v)?;
        let zq = tape.quantize(zm, vars[self.cb2], self.config.sigma)?;
        let idx2 = tape.quantize_indices(zq).expect("quantize node").to_vec();

        let cond = self.d2.apply(tape, vars, zq)?;
        let rate1 = self.ctx1.rate_bits(tape, vars, yq, &idx1, Some(cond), Some(soft1))?;
        let rate2 = self.ctx2.rate_bits(tape, vars, zq, &idx2, None, Some(soft2))?;
        let rate_bits = tape.add(rate1, rate2)?;
        let rate_bpp_var = tape.scale(rate_bits, 1.0 / (w * h) as f64);
        let rate_bpp = tape.value(rate_bpp_var);

        let xhat = self.d1.apply(tape, vars, yq)?;
        let wvars = self.dpl_weight_vars(vars);
        let extractor = &self.extractor;
        let (mse_w, dpl_w) = (tc.mse_weight, tc.dpl_weight);
        let dist = weighted_distortion(tape, x, xhat, sal, self.config.w1, self.config.w2, |t, a, b| {
            let m = t.mse(a, b)?;
            let m = t.scale(m, mse_w);
            if dpl_w > 0.0 {
                let d = dpl_distance(t, extractor, vars, &wvars, a, b)?;
                let d = t.scale(d, dpl_w);
                t.add(m, d)
            } else {
                Ok(m)
            }
        })?;

        let y_detached = tape.constant(tape.data(yq).to_vec(), vec![c1, h8, w8])?;
        let aux = tape.mse(cond, y_detached)?;

        // Subgradient of max(t, rate): the rate term only pushes while the
        // estimate is above target.
        let rate_term = if rate_bpp > self.config.target_bpp {
            tape.scale(rate_bpp_var, self.config.alpha)
        } else {
            tape.scalar(self.config.alpha * self.config.target_bpp)
        };
        let dist_term = tape.scale(dist, self.config.beta);
        let aux_term = tape.scale(aux, tc.aux_weight);
        let partial = tape.add(rate_term, dist_term)?;
        let loss = tape.add(partial, aux_term)?;

        let mse_full = tape.mse(x, xhat)?;
        let dpl_full = dpl_distance(tape, extractor, vars, &wvars, x, xhat)?;
        Ok(TrainOutputs {
            loss,
            rate_bpp,
            distortion: tape.value(dist),
            mse: tape.value(mse_full),
            dpl: tape.value(dpl_full),
            aux: tape.value(aux),
        })
    }
}

/// Gain mapping pooled pixel values in [0, 1] onto the initial center range.
const BYPASS_GAIN: f64 = 4.0;

/// Pooled-channel slot carried by bottleneck channel `o`: color-interleaved
/// (RGB of subcell 0, then subcell 1, ...) so mask truncation sheds whole
/// subcells instead of one color's detail.
fn pool_slot(o: usize) -> usize {
    let p = o % 12;
    (p % 3) * 4 + p / 3
}

/// Point the stage-1 shortcuts at each other: the encoder bypass writes
/// `(pooled - 0.5) * gain` into bottleneck channel `o` from its pooled slot,
/// the decoder bypass inverts that, and both stack heads are silenced so the
/// starting model is exactly a 4x4 block-mean codec.
fn init_block_passthrough(ps: &mut ParamSet, c1: usize) -> Result<()> {
    let pooled = 12;
    let mut ew = vec![0.0; (c1 + 1) * pooled];
    let mut eb = vec![0.0; c1 + 1];
    for o in 0..c1 {
        ew[o * pooled + pool_slot(o)] = BYPASS_GAIN;
        eb[o] = -0.5 * BYPASS_GAIN;
    }
    // Keep the raised importance bias from the head; the bypass adds zero.
    ps.set_value("e1.bypass.w", &ew)?;
    ps.set_value("e1.bypass.b", &eb)?;

    let mut dw = vec![0.0; pooled * c1];
    let db = vec![0.5; pooled];
    for j in 0..pooled {
        let carriers: Vec<usize> = (0..c1).filter(|&o| pool_slot(o) == j).collect();
        if carriers.is_empty() {
            continue;
        }
        let share = 1.0 / (BYPASS_GAIN * carriers.len() as f64);
        for o in carriers {
            dw[j * c1 + o] = share;
        }
    }
    ps.set_value("d1.bypass.w", &dw)?;
    ps.set_value("d1.bypass.b", &db)?;

    for name in ["e1.head.w", "d1.up2.w"] {
        let n = ps
            .by_name(name)
            .ok_or_else(|| Error::Format(format!("missing parameter {name}")))?
            .value
            .len();
        ps.set_value(name, &vec![0.0; n])?;
    }
    Ok(())
}

fn raise_last_bias(ps: &mut ParamSet, name: &str, value: f64) -> Result<()> {
    let mut b = ps
        .by_name(name)
        .ok_or_else(|| Error::Format(format!("missing parameter {name}")))?
        .value
        .clone();
    *b.last_mut().expect("bias is non-empty") = value;
    ps.set_value(name, &b)
}

/// Loss and logging values from one training forward.
pub struct TrainOutputs {
    pub loss: Var,
    /// Soft-mask-weighted rate estimate, bits per pixel.
    pub rate_bpp: f64,
    /// Saliency-weighted distortion (the loss term, unscaled by beta).
    pub distortion: f64,
    /// Plain full-image mse, for logs.
    pub mse: f64,
    /// Unweighted full-image perceptual distance, for logs.
    pub dpl: f64,
    /// Stage-2 prediction error of the stage-1 symbols.
    pub aux: f64,
}

/// `w1 * base(x*s, xhat*s) + w2 * base(x*(1-s), xhat*(1-s))` with the
/// saliency mask repeated over 8x8 pixel blocks and all channels.
pub fn weighted_distortion<F>(
    tape: &mut Tape,
    x: Var,
    xhat: Var,
    sal: &SaliencyMask,
    w1: f64,
    w2: f64,
    mut base: F,
) -> Result<Var>
where
    F: FnMut(&mut Tape, Var, Var) -> Result<Var>,
{
    let shape = tape.shape(x).to_vec();
    if shape != tape.shape(xhat) {
        return Err(Error::shape(&shape, tape.shape(xhat), "weighted distortion pair"));
    }
    if shape.len() != 3 {
        return Err(Error::shape(&[3, 0, 0], &shape, "weighted distortion image"));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if h != sal.h * 8 || w != sal.w * 8 {
        return Err(Error::shape(&[sal.h * 8, sal.w * 8], &[h, w], "saliency vs image size"));
    }
    let mut sal_px = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                sal_px[(ch * h + y) * w + xx] = sal.data[(y / 8) * sal.w + xx / 8] as f64;
            }
        }
    }
    let inv_px: Vec<f64> = sal_px.iter().map(|v| 1.0 - v).collect();
    let sv = tape.constant(sal_px, shape.clone())?;
    let nv = tape.constant(inv_px, shape)?;
    let xs = tape.mul(x, sv)?;
    let xhs = tape.mul(xhat, sv)?;
    let xn = tape.mul(x, nv)?;
    let xhn = tape.mul(xhat, nv)?;
    let ds = base(tape, xs, xhs)?;
    let dn = base(tape, xn, xhn)?;
    let a = tape.scale(ds, w1);
    let b = tape.scale(dn, w2);
    tape.add(a, b)
}

pub struct CompressOutput {
    pub bitstream: Bitstream,
    pub stats: CompressStats,
}

/// Everything the caller may want to know about one compression.
pub struct CompressStats {
    /// Payload bits of both stages over the original pixel count.
    pub bpp: f64,
    /// Soft-mask-weighted differentiable estimate, same normalization.
    pub rate_estimate_bpp: f64,
    pub stage1_bits: u64,
    pub stage2_bits: u64,
    /// Per-site stage-1 cost in bits under the quantized PMFs.
    pub stage1_site_bits: Vec<f64>,
    pub stage1_indices: Vec<u32>,
    pub stage2_indices: Vec<u32>,
    /// Fraction of stage-1 bottleneck values the hard mask kept.
    pub kept_fraction: f64,
    /// The latent-resolution saliency mask actually used (padded grid).
    pub saliency: SaliencyMask,
}

#[derive(Debug)]
pub struct DecompressOutput {
    pub image: Vec<f64>,
    pub w: usize,
    pub h: usize,
    pub stage1_indices: Vec<u32>,
    pub stage2_indices: Vec<u32>,
}

/// Parsed `.hsc` container.
#[derive(Debug, Clone, PartialEq)]
pub struct Bitstream {
    pub w: u32,
    pub h: u32,
    pub digest: u64,
    pub centers1: Vec<f32>,
    pub centers2: Vec<f32>,
    pub stage2: crate::coder::CodedPayload,
    pub stage1: crate::coder::CodedPayload,
}

impl Bitstream {
    pub fn total_bits(&self) -> u64 {
        self.stage1.declared_bits + self.stage2.declared_bits
    }

    pub fn bpp(&self) -> f64 {
        self.total_bits() as f64 / (self.w as u64 * self.h as u64) as f64
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(BITSTREAM_MAGIC);
        out.extend_from_slice(&BITSTREAM_VERSION.to_le_bytes());
        out.extend_from_slice(&self.w.to_le_bytes());
        out.extend_from_slice(&self.h.to_le_bytes());
        out.extend_from_slice(&self.digest.to_le_bytes());
        for centers in [&self.centers1, &self.centers2] {
            out.extend_from_slice(&(centers.len() as u16).to_le_bytes());
            for &c in centers.iter() {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        self.stage2.serialize(&mut out);
        self.stage1.serialize(&mut out);
        out
    }

    pub fn deserialize(data: &[u8]) -> Result<Self> {
        let mut at = 0usize;
        let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
            if *at + n > data.len() {
                return Err(Error::Format("bitstream truncated".into()));
            }
            let s = &data[*at..*at + n];
            *at += n;
            Ok(s)
        };
        if take(&mut at, 4)? != BITSTREAM_MAGIC {
            return Err(Error::Format("not a bitstream (bad magic)".into()));
        }
        let version = u16::from_le_bytes(take(&mut at, 2)?.try_into().unwrap());
        if version != BITSTREAM_VERSION {
            return Err(Error::Format(format!("unsupported bitstream version {version}")));
        }
        let w = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap());
        let h = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap());
        let digest = u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap());
        let read_centers = |at: &mut usize| -> Result<Vec<f32>> {
            let l = u16::from_le_bytes(take(at, 2)?.try_into().unwrap()) as usize;
            let mut centers = Vec::with_capacity(l);
            for _ in 0..l {
                let c = f32::from_le_bytes(take(at, 4)?.try_into().unwrap());
                if !c.is_finite() {
                    return Err(Error::Format("non-finite codebook center".into()));
                }
                centers.push(c);
            }
            Ok(centers)
        };
        let centers1 = read_centers(&mut at)?;
        let centers2 = read_centers(&mut at)?;
        let (stage2, used) = crate::coder::CodedPayload::deserialize(&data[at..])?;
        at += used;
        let (stage1, used) = crate::coder::CodedPayload::deserialize(&data[at..])?;
        at += used;
        if at != data.len() {
            return Err(Error::Format(format!("{} trailing bytes after bitstream", data.len() - at)));
        }
        Ok(Bitstream { w, h, digest, centers1, centers2, stage2, stage1 })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.serialize())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::deserialize(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coder::CodedPayload;

    fn tiny_config() -> CodecConfig {
        CodecConfig {
            c1: 3,
            c2: 2,
            l1: 4,
            l2: 4,
            width: 4,
            res_blocks: 1,
            ctx_hidden: 6,
            ctx_layers: 2,
            seed: 7,
            ..CodecConfig::default()
        }
    }

    fn test_image(w: usize, h: usize) -> Vec<f64> {
        (0..3 * w * h).map(|i| ((i * 31 + 7) % 97) as f64 / 96.0).collect()
    }

    #[test]
    fn bitstream_round_trips_through_bytes() {
        let bs = Bitstream {
            w: 40,
            h: 24,
            digest: 0xDEAD_BEEF_0123_4567,
            centers1: vec![-2.0, -0.5, 0.5, 2.0],
            centers2: vec![-1.0, 1.0],
            stage2: CodedPayload::from_body(3, vec![0x80, 0x01], crate::coder::symbols_checksum(&[0, 1, 2])),
            stage1: CodedPayload::from_body(5, vec![0xAB], crate::coder::symbols_checksum(&[1, 1, 0, 3, 2])),
        };
        let bytes = bs.serialize();
        let back = Bitstream::deserialize(&bytes).unwrap();
        assert_eq!(back, bs);
    }

    #[test]
    fn bitstream_rejects_damage() {
        let bs = Bitstream {
            w: 8,
            h: 8,
            digest: 1,
            centers1: vec![-1.0, 1.0],
            centers2: vec![-1.0, 1.0],
            stage2: CodedPayload::from_body(0, vec![], 0),
            stage1: CodedPayload::from_body(0, vec![], 0),
        };
        let bytes = bs.serialize();
        assert!(matches!(Bitstream::deserialize(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(Bitstream::deserialize(&bad_magic), Err(Error::Format(_))));
        let mut bad_version = bytes.clone();
        bad_version[4] = 0xFF;
        assert!(matches!(Bitstream::deserialize(&bad_version), Err(Error::Format(_))));
        let mut trailing = bytes;
        trailing.push(0);
        assert!(matches!(Bitstream::deserialize(&trailing), Err(Error::Format(_))));
    }

    #[test]
    fn compress_decompress_round_trip_keeps_shape_and_symbols() {
        let codec = Codec::new(tiny_config()).unwrap();
        let (w, h) = (40, 24);
        let image = test_image(w, h);
        let out = codec.compress(&image, w, h, None).unwrap();
        let bytes = out.bitstream.serialize();
        let parsed = Bitstream::deserialize(&bytes).unwrap();
        let dec = codec.decompress(&parsed).unwrap();
        assert_eq!((dec.w, dec.h), (w, h));
        assert_eq!(dec.image.len(), 3 * w * h);
        assert!(dec.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(dec.stage1_indices, out.stats.stage1_indices);
        assert_eq!(dec.stage2_indices, out.stats.stage2_indices);
        assert!(out.stats.bpp > 0.0);
    }

    #[test]
    fn compress_is_deterministic() {
        let codec = Codec::new(tiny_config()).unwrap();
        let image = test_image(32, 32);
        let a = codec.compress(&image, 32, 32, None).unwrap().bitstream.serialize();
        let b = codec.compress(&image, 32, 32, None).unwrap().bitstream.serialize();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_round_trip_preserves_compressed_output() {
        let codec = Codec::new(tiny_config()).unwrap();
        let image = test_image(32, 32);
        let a = codec.compress(&image, 32, 32, None).unwrap().bitstream.serialize();
        let restored = Codec::from_checkpoint(&codec.checkpoint()).unwrap();
        let b = restored.compress(&image, 32, 32, None).unwrap().bitstream.serialize();
        assert_eq!(a, b);
    }

    #[test]
    fn round_trip_survives_centers_that_are_not_f32_exact() {
        let mut codec = Codec::new(tiny_config()).unwrap();
        codec.params.set_value("cb1", &[-0.7, -0.1, 0.3, 0.9]).unwrap();
        codec.params.set_value("cb2", &[-0.4, 0.1, 0.6, 1.3]).unwrap();
        let image = test_image(64, 64);
        let out = codec.compress(&image, 64, 64, None).unwrap();
        let dec = codec.decompress(&out.bitstream).unwrap();
        assert_eq!(dec.stage1_indices, out.stats.stage1_indices);
        assert_eq!(dec.stage2_indices, out.stats.stage2_indices);
    }

    #[test]
    fn decompress_demands_matching_digest() {
        let codec = Codec::new(tiny_config()).unwrap();
        let image = test_image(32, 32);
        let out = codec.compress(&image, 32, 32, None).unwrap();
        let mut other_cfg = tiny_config();
        other_cfg.c1 = 4;
        let other = Codec::new(other_cfg).unwrap();
        match other.decompress(&out.bitstream) {
            Err(Error::DigestMismatch { .. }) => {}
            other => panic!("expected digest mismatch, got {other:?}"),
        }
    }

    #[test]
    fn all_ones_saliency_keeps_at_least_as_much_as_all_zeros() {
        let codec = Codec::new(tiny_config()).unwrap();
        let (w, h) = (32, 32);
        let image = test_image(w, h);
        let ones = vec![255u8; w * h];
        let zeros = vec![0u8; w * h];
        let kept_ones = codec.compress(&image, w, h, Some(&ones)).unwrap().stats.kept_fraction;
        let kept_zeros = codec.compress(&image, w, h, Some(&zeros)).unwrap().stats.kept_fraction;
        assert!(kept_ones >= kept_zeros, "{kept_ones} vs {kept_zeros}");
        assert_eq!(kept_ones, 1.0, "full saliency saturates the mask plane");
    }

    #[test]
    fn weighted_distortion_ratio_matches_weights() {
        // Same-magnitude error confined to the salient half vs the
        // non-salient half must cost exactly w1/w2 times as much.
        let (w, h) = (16, 8);
        let mut sal = SaliencyMask::all_ones(1, 2);
        sal.data = vec![1, 0];
        let x = vec![0.5; 3 * w * h];
        let mut err_sal = x.clone();
        let mut err_non = x.clone();
        for ch in 0..3 {
            for y in 0..h {
                for xx in 0..w {
                    let i = (ch * h + y) * w + xx;
                    if xx < 8 {
                        err_sal[i] += 0.125;
                    } else {
                        err_non[i] += 0.125;
                    }
                }
            }
        }
        let run = |xhat: &Vec<f64>| -> f64 {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone(), vec![3, h, w]).unwrap();
            let rv = tape.constant(xhat.clone(), vec![3, h, w]).unwrap();
            let d = weighted_distortion(&mut tape, xv, rv, &sal, 0.75, 0.25, |t, a, b| t.mse(a, b)).unwrap();
            tape.value(d)
        };
        let ls = run(&err_sal);
        let ln = run(&err_non);
        assert!((ls / ln - 3.0).abs() < 1e-12, "ratio {}", ls / ln);
    }

    #[test]
    fn train_forward_produces_finite_loss_and_gradients() {
        let codec = Codec::new(tiny_config()).unwrap();
        let (w, h) = (32, 32);
        let image = test_image(w, h);
        let sal = SaliencyMask::all_ones(h / 8, w / 8);
        let tc = TrainConfig::default();
        let mut tape = Tape::new();
        let vars = codec.params.bind(&mut tape).unwrap();
        let outs = codec.train_forward(&mut tape, &vars, &image, h, w, &sal, &tc).unwrap();
        assert!(tape.value(outs.loss).is_finite());
        assert!(outs.rate_bpp > 0.0);
        assert!(outs.distortion >= 0.0 && outs.aux >= 0.0);
        tape.backward(outs.loss).unwrap();
        let mut grads = codec.params.zero_grads();
        codec.params.accumulate(&tape, &vars, &mut grads);
        assert!(grads.iter().flatten().all(|g| g.is_finite()));
        // The stack head starts silent, so step one drives the head and the
        // shortcut; the body wakes once the head weights grow.
        for name in ["e1.head.w", "e1.bypass.w"] {
            let i = codec.params.params.iter().position(|p| p.name == name).unwrap();
            assert!(grads[i].iter().any(|&g| g != 0.0), "{name} receives gradient");
        }
    }
}
