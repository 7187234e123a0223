//! Auto-regressive probability models over quantized symbol grids.
//!
//! A [`ContextModel`] is a stack of causally masked 3D convolutions over the
//! latent treated as a `[1, C, H, W]` volume, so the raster order is
//! (channel, row, column). The first layer must not see the current site
//! (its PMF would be a tautology), later layers may, since by then the
//! center activation already excludes the site's own symbol.
//!
//! Conditioning channels are concatenated to every layer's input and left
//! unmasked: they come from an already-decoded coarser stage and are fully
//! known to the decoder before any symbol of this grid is read.
//!
//! Two evaluation paths exist and must agree bit for bit: the full-grid tape
//! forward used for training and encoding, and [`SequentialEvaluator`],
//! which fills one site at a time during decoding. Both accumulate kernel
//! taps in `(ic, kd, kh, kw)` order onto the bias, which is what makes the
//! equality exact rather than approximate.

use crate::error::{Error, Result};
use crate::nn::{Init, ParamSet};
use crate::tape::{KernelMask3, Tape, Var};
use rand_chacha::ChaCha12Rng;
use std::sync::Arc;

/// Probability floor mixed into every PMF: `p' = (1 - L*eps)*p + eps`.
pub const PMF_FLOOR: f64 = 1.0 / 65536.0;

/// Build the causal tap mask for one layer.
///
/// The first `main_channels` input channels carry latent-derived features
/// and get the raster-order mask; the remaining `cond_channels` are globally
/// visible. `include_center` distinguishes the first layer (false) from the
/// rest (true).
pub fn causal_mask(main_channels: usize, cond_channels: usize, k: usize, include_center: bool) -> KernelMask3 {
    let c = k / 2;
    let total = main_channels + cond_channels;
    let mut data = vec![0u8; total * k * k * k];
    for ic in 0..total {
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let idx = ((ic * k + kd) * k + kh) * k + kw;
                    if ic >= main_channels {
                        data[idx] = 1;
                        continue;
                    }
                    let before = kd < c || (kd == c && kh < c) || (kd == c && kh == c && kw < c);
                    let center = kd == c && kh == c && kw == c;
                    data[idx] = (before || (center && include_center)) as u8;
                }
            }
        }
    }
    KernelMask3 { data: Arc::new(data), in_channels: total, kd: k, kh: k, kw: k }
}

/// Per-site PMFs over a symbol grid, sites in raster order.
#[derive(Debug, Clone)]
pub struct PmfGrid {
    pub levels: usize,
    /// `[site * levels + symbol]`, each site summing to 1.
    pub probs: Vec<f64>,
}

impl PmfGrid {
    pub fn sites(&self) -> usize {
        self.probs.len() / self.levels
    }

    pub fn pmf(&self, site: usize) -> &[f64] {
        &self.probs[site * self.levels..(site + 1) * self.levels]
    }
}

/// Floor-and-renormalize raw softmax columns `[L, N]` into row-major
/// per-site PMFs.
fn floor_pmfs(levels: usize, sites: usize, columns: &[f64]) -> Vec<f64> {
    let a = 1.0 - levels as f64 * PMF_FLOOR;
    let mut probs = vec![0.0; sites * levels];
    for s in 0..sites {
        for l in 0..levels {
            probs[s * levels + l] = a * columns[l * sites + s] + PMF_FLOOR;
        }
    }
    probs
}

/// Masked 3D conv stack predicting per-site symbol PMFs.
#[derive(Debug, Clone)]
pub struct ContextModel {
    pub levels: usize,
    pub hidden: usize,
    pub cond_channels: usize,
    pub kernel: usize,
    /// `(weight, bias)` parameter indices per layer, head last.
    layer_params: Vec<(usize, usize)>,
    masks: Vec<KernelMask3>,
}

impl ContextModel {
    /// Register parameters for a `layers`-deep model under `prefix`.
    ///
    /// The head is zero-initialized so an untrained model predicts the
    /// uniform distribution.
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha12Rng,
        prefix: &str,
        levels: usize,
        hidden: usize,
        layers: usize,
        cond_channels: usize,
        kernel: usize,
    ) -> Result<Self> {
        if layers < 2 {
            return Err(Error::Config("context model needs at least 2 layers".into()));
        }
        if kernel % 2 == 0 {
            return Err(Error::Config("context model kernel must be odd".into()));
        }
        let mut layer_params = Vec::with_capacity(layers);
        let mut masks = Vec::with_capacity(layers);
        for l in 0..layers {
            let main_in = if l == 0 { 1 } else { hidden };
            let in_c = main_in + cond_channels;
            let out_c = if l + 1 == layers { levels } else { hidden };
            let fan_in = in_c * kernel * kernel * kernel;
            let init = if l + 1 == layers { Init::Const(0.0) } else { Init::HeUniform { fan_in } };
            let w = ps.add(format!("{prefix}.w{l}"), vec![out_c, in_c, kernel, kernel, kernel], init, rng);
            let b = ps.add(format!("{prefix}.b{l}"), vec![out_c], Init::Const(0.0), rng);
            layer_params.push((w, b));
            masks.push(causal_mask(main_in, cond_channels, kernel, l != 0));
        }
        Ok(ContextModel { levels, hidden, cond_channels, kernel, layer_params, masks })
    }

    pub fn layers(&self) -> usize {
        self.layer_params.len()
    }

    /// Teacher-forced forward over the whole grid.
    ///
    /// `symbols`: dequantized latent `[C, H, W]`; `cond`: `[cond_channels,
    /// H, W]` when the model is conditioned. Returns logits `[L, C*H*W]`
    /// with sites as raster-order columns.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], symbols: Var, cond: Option<Var>) -> Result<Var> {
        let shape = tape.shape(symbols).to_vec();
        if shape.len() != 3 {
            return Err(Error::shape(&[0, 0, 0], &shape, "context model symbols"));
        }
        let (d, h, w) = (shape[0], shape[1], shape[2]);
        let cond_rep = match (self.cond_channels, cond) {
            (0, None) => None,
            (0, Some(_)) => return Err(Error::Config("unconditional model given conditioning".into())),
            (_, None) => return Err(Error::Config("conditional model missing conditioning".into())),
            (cc, Some(cv)) => {
                let cs = tape.shape(cv).to_vec();
                if cs != vec![cc, h, w] {
                    return Err(Error::shape(&[cc, h, w], &cs, "context model conditioning"));
                }
                Some(tape.repeat_d(cv, d)?)
            }
        };
        let mut x = tape.reshape(symbols, vec![1, d, h, w])?;
        for (l, &(wi, bi)) in self.layer_params.iter().enumerate() {
            let inp = match cond_rep {
                Some(c) => tape.concat0(&[x, c])?,
                None => x,
            };
            let y = tape.conv3d(inp, vars[wi], vars[bi], Some(self.masks[l].clone()))?;
            x = if l + 1 == self.layer_params.len() { y } else { tape.relu(y) };
        }
        tape.reshape(x, vec![self.levels, d * h * w])
    }

    /// All per-site PMFs for a symbol grid (teacher forcing), floored.
    pub fn predict_pmfs(
        &self,
        params: &ParamSet,
        symbols: &[f64],
        grid: (usize, usize, usize),
        cond: Option<&[f64]>,
    ) -> Result<PmfGrid> {
        let (d, h, w) = grid;
        let mut tape = Tape::new();
        let vars = params.bind_frozen(&mut tape)?;
        let sym = tape.constant(symbols.to_vec(), vec![d, h, w])?;
        let cv = match cond {
            Some(c) => Some(tape.constant(c.to_vec(), vec![self.cond_channels, h, w])?),
            None => None,
        };
        let logits = self.forward(&mut tape, &vars, sym, cv)?;
        let sm = tape.softmax0(logits)?;
        Ok(PmfGrid { levels: self.levels, probs: floor_pmfs(self.levels, d * h * w, tape.data(sm)) })
    }

    /// Differentiable coding cost in bits: `sum_i w_i * -log2 p_i(sym_i)`.
    ///
    /// `weights = None` counts every site fully (reporting); training passes
    /// the soft mask so fractionally kept channels pay a fractional rate.
    pub fn rate_bits(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        symbols: Var,
        indices: &[u32],
        cond: Option<Var>,
        weights: Option<Var>,
    ) -> Result<Var> {
        let logits = self.forward(tape, vars, symbols, cond)?;
        let nll = tape.cross_entropy(logits, indices, PMF_FLOOR)?;
        let bits_per_site = tape.scale(nll, std::f64::consts::LOG2_E);
        match weights {
            Some(wv) => {
                let n = tape.data(bits_per_site).len();
                let flat = tape.reshape(wv, vec![n])?;
                let weighted = tape.mul(bits_per_site, flat)?;
                Ok(tape.sum(weighted))
            }
            None => Ok(tape.sum(bits_per_site)),
        }
    }
}

/// Weight snapshot for one layer of the sequential decoder path.
struct LayerSnapshot {
    weight: Vec<f64>,
    bias: Vec<f64>,
    main_in: usize,
    in_c: usize,
    out_c: usize,
}

/// Site-by-site evaluator used during decoding.
///
/// Holds plain copies of the layer weights plus per-layer activation
/// buffers. After `write_symbol`, `pmf_at` for the next raster site matches
/// the teacher-forced forward exactly: each output element is accumulated
/// in the same `(ic, kd, kh, kw)` tap order as [`Tape::conv3d`].
pub struct SequentialEvaluator<'m> {
    model: &'m ContextModel,
    layers: Vec<LayerSnapshot>,
    /// Dequantized symbols written so far, `[D, H, W]`.
    symbols: Vec<f64>,
    /// Post-activation buffers per non-head layer, `[hidden, D, H, W]`.
    acts: Vec<Vec<f64>>,
    cond: Option<Vec<f64>>,
    d: usize,
    h: usize,
    w: usize,
}

impl<'m> SequentialEvaluator<'m> {
    pub fn new(
        model: &'m ContextModel,
        params: &ParamSet,
        grid: (usize, usize, usize),
        cond: Option<&[f64]>,
    ) -> Result<Self> {
        let (d, h, w) = grid;
        match (model.cond_channels, cond) {
            (0, Some(_)) => return Err(Error::Config("unconditional model given conditioning".into())),
            (cc, None) if cc > 0 => return Err(Error::Config("conditional model missing conditioning".into())),
            (cc, Some(c)) if c.len() != cc * h * w => {
                return Err(Error::shape(&[cc * h * w], &[c.len()], "sequential conditioning size"));
            }
            _ => {}
        }
        let mut layers = Vec::with_capacity(model.layer_params.len());
        for (l, &(wi, bi)) in model.layer_params.iter().enumerate() {
            let wp = &params.params[wi];
            let bp = &params.params[bi];
            let main_in = if l == 0 { 1 } else { model.hidden };
            let in_c = main_in + model.cond_channels;
            let out_c = if l + 1 == model.layer_params.len() { model.levels } else { model.hidden };
            if wp.shape != vec![out_c, in_c, model.kernel, model.kernel, model.kernel] {
                return Err(Error::shape(
                    &[out_c, in_c, model.kernel],
                    &wp.shape,
                    "sequential evaluator weight shape",
                ));
            }
            layers.push(LayerSnapshot {
                weight: wp.value.clone(),
                bias: bp.value.clone(),
                main_in,
                in_c,
                out_c,
            });
        }
        let acts = (0..model.layer_params.len() - 1)
            .map(|_| vec![0.0; model.hidden * d * h * w])
            .collect();
        Ok(SequentialEvaluator {
            model,
            layers,
            symbols: vec![0.0; d * h * w],
            acts,
            cond: cond.map(|c| c.to_vec()),
            d,
            h,
            w,
        })
    }

    pub fn sites(&self) -> usize {
        self.d * self.h * self.w
    }

    fn site_coords(&self, site: usize) -> (usize, usize, usize) {
        let plane = self.h * self.w;
        (site / plane, (site % plane) / self.w, site % self.w)
    }

    /// Read an input channel value for layer `l` at volume coords, or None
    /// when out of bounds. Channels order: main features, then conditioning.
    #[inline]
    fn input_at(&self, l: usize, ic: usize, zd: isize, zy: isize, zx: isize) -> Option<f64> {
        if zd < 0 || zy < 0 || zx < 0 || zd >= self.d as isize || zy >= self.h as isize || zx >= self.w as isize {
            return None;
        }
        let (zd, zy, zx) = (zd as usize, zy as usize, zx as usize);
        let main_in = self.layers[l].main_in;
        let plane = self.h * self.w;
        if ic < main_in {
            let v = if l == 0 {
                self.symbols[(zd * self.h + zy) * self.w + zx]
            } else {
                self.acts[l - 1][((ic * self.d + zd) * self.h + zy) * self.w + zx]
            };
            Some(v)
        } else {
            // conditioning repeats across the depth axis
            let cc = ic - main_in;
            Some(self.cond.as_ref().expect("conditioning checked at construction")[cc * plane + zy * self.w + zx])
        }
    }

    /// Evaluate layer `l` outputs at one site, accumulating taps in the same
    /// order as the full-grid convolution.
    fn eval_layer_site(&self, l: usize, od: usize, oy: usize, ox: usize) -> Vec<f64> {
        let snap = &self.layers[l];
        let k = self.model.kernel;
        let p = (k / 2) as isize;
        let mask = &self.model.masks[l];
        let mut out = vec![0.0; snap.out_c];
        for (oc, slot) in out.iter_mut().enumerate() {
            let mut acc = snap.bias[oc];
            for ic in 0..snap.in_c {
                for kd in 0..k {
                    for kh in 0..k {
                        for kw in 0..k {
                            if !mask.at(ic, kd, kh, kw) {
                                continue;
                            }
                            let zd = od as isize + kd as isize - p;
                            let zy = oy as isize + kh as isize - p;
                            let zx = ox as isize + kw as isize - p;
                            if let Some(v) = self.input_at(l, ic, zd, zy, zx) {
                                let wv = snap.weight[(((oc * snap.in_c + ic) * k + kd) * k + kh) * k + kw];
                                acc += wv * v;
                            }
                        }
                    }
                }
            }
            *slot = acc;
        }
        out
    }

    /// PMF for the site about to be decoded. Call sites in raster order.
    pub fn pmf_at(&mut self, site: usize) -> Vec<f64> {
        let (od, oy, ox) = self.site_coords(site);
        let plane = self.h * self.w;
        // refresh hidden activations at this site, layer by layer
        for l in 0..self.layers.len() - 1 {
            let vals = self.eval_layer_site(l, od, oy, ox);
            for (oc, v) in vals.iter().enumerate() {
                self.acts[l][(oc * self.d + od) * plane + oy * self.w + ox] = v.max(0.0);
            }
        }
        let logits = self.eval_layer_site(self.layers.len() - 1, od, oy, ox);
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&v| (v - mx).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let a = 1.0 - self.model.levels as f64 * PMF_FLOOR;
        // same operation order as the tape softmax + floor path: normalize
        // first, then mix, so both sides round identically
        exps.iter().map(|&e| a * (e / sum) + PMF_FLOOR).collect()
    }

    /// Record the decoded symbol value for `site`.
    pub fn write_symbol(&mut self, site: usize, value: f64) {
        self.symbols[site] = value;
    }

    pub fn symbols(&self) -> &[f64] {
        &self.symbols
    }
}

/// Perturbation-based causality check.
///
/// For `trials` random grids, perturbs one random site and asserts PMFs at
/// all sites up to and including it are bit-identical. Returns the number of
/// violations found (0 for a correctly masked model).
pub fn causality_audit(
    model: &ContextModel,
    params: &ParamSet,
    grid: (usize, usize, usize),
    trials: usize,
    rng: &mut ChaCha12Rng,
) -> Result<usize> {
    use rand::Rng;
    let (d, h, w) = grid;
    let n = d * h * w;
    let cond: Option<Vec<f64>> = if model.cond_channels > 0 {
        Some((0..model.cond_channels * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())
    } else {
        None
    };
    let mut violations = 0;
    for _ in 0..trials {
        let base: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let site = rng.gen_range(0..n);
        let mut perturbed = base.clone();
        perturbed[site] += rng.gen_range(0.5..1.5);
        let p0 = model.predict_pmfs(params, &base, grid, cond.as_deref())?;
        let p1 = model.predict_pmfs(params, &perturbed, grid, cond.as_deref())?;
        for s in 0..=site {
            if p0.pmf(s) != p1.pmf(s) {
                violations += 1;
                break;
            }
        }
    }
    Ok(violations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_model(cond: usize, seed: u64) -> (ContextModel, ParamSet, ChaCha12Rng) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let m = ContextModel::new(&mut ps, &mut rng, "ctx", 6, 8, 3, cond, 3).unwrap();
        (m, ps, rng)
    }

    fn randomize_head(ps: &mut ParamSet, prefix: &str, layers: usize, rng: &mut ChaCha12Rng) {
        use rand::Rng;
        // the head starts at zero for the uniform-prior property; give it
        // life so equality tests are not trivially comparing zeros
        let name = format!("{prefix}.w{}", layers - 1);
        for p in ps.params.iter_mut() {
            if p.name == name {
                for v in p.value.iter_mut() {
                    *v = rng.gen_range(-0.3..0.3);
                }
            }
        }
    }

    #[test]
    fn untrained_model_predicts_uniform_pmfs() {
        let (m, ps, _) = small_model(0, 7);
        let grid = (4, 3, 5);
        let symbols = vec![0.5; 4 * 3 * 5];
        let pmfs = m.predict_pmfs(&ps, &symbols, grid, None).unwrap();
        for s in 0..pmfs.sites() {
            for &p in pmfs.pmf(s) {
                assert!((p - 1.0 / 6.0).abs() < 1e-12, "pmf {p} should be uniform");
            }
        }
    }

    #[test]
    fn pmfs_sum_to_one_and_respect_floor() {
        let (m, mut ps, mut rng) = small_model(0, 11);
        randomize_head(&mut ps, "ctx", 3, &mut rng);
        use rand::Rng;
        let grid = (3, 4, 4);
        let symbols: Vec<f64> = (0..48).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let pmfs = m.predict_pmfs(&ps, &symbols, grid, None).unwrap();
        for s in 0..pmfs.sites() {
            let sum: f64 = pmfs.pmf(s).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "site {s} sums to {sum}");
            assert!(pmfs.pmf(s).iter().all(|&p| p >= PMF_FLOOR));
        }
    }

    #[test]
    fn sequential_evaluation_matches_teacher_forcing_bit_exactly() {
        let (m, mut ps, mut rng) = small_model(0, 23);
        randomize_head(&mut ps, "ctx", 3, &mut rng);
        use rand::Rng;
        let grid = (4, 3, 3);
        let n = 36;
        let symbols: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let full = m.predict_pmfs(&ps, &symbols, grid, None).unwrap();
        let mut seq = SequentialEvaluator::new(&m, &ps, grid, None).unwrap();
        for site in 0..n {
            let pmf = seq.pmf_at(site);
            assert_eq!(pmf.as_slice(), full.pmf(site), "pmf mismatch at site {site}");
            seq.write_symbol(site, symbols[site]);
        }
    }

    #[test]
    fn sequential_evaluation_matches_with_conditioning() {
        let (m, mut ps, mut rng) = small_model(2, 29);
        randomize_head(&mut ps, "ctx", 3, &mut rng);
        use rand::Rng;
        let grid = (3, 4, 3);
        let n = 36;
        let symbols: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let cond: Vec<f64> = (0..2 * 12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let full = m.predict_pmfs(&ps, &symbols, grid, Some(&cond)).unwrap();
        let mut seq = SequentialEvaluator::new(&m, &ps, grid, Some(&cond)).unwrap();
        for site in 0..n {
            let pmf = seq.pmf_at(site);
            assert_eq!(pmf.as_slice(), full.pmf(site), "pmf mismatch at site {site}");
            seq.write_symbol(site, symbols[site]);
        }
    }

    #[test]
    fn audit_passes_on_masked_model_and_fails_on_unmasked_center() {
        let (m, mut ps, mut rng) = small_model(0, 31);
        randomize_head(&mut ps, "ctx", 3, &mut rng);
        let grid = (3, 3, 3);
        let v = causality_audit(&m, &ps, grid, 25, &mut rng).unwrap();
        assert_eq!(v, 0, "masked model must pass the audit");

        // negative control: first layer sees its own site
        let mut broken = m.clone();
        broken.masks[0] = causal_mask(1, 0, 3, true);
        let v = causality_audit(&broken, &ps, grid, 25, &mut rng).unwrap();
        assert!(v > 0, "unmasked center tap must be caught");
    }

    #[test]
    fn conditioning_perturbation_reaches_every_site() {
        let (m, mut ps, mut rng) = small_model(2, 37);
        randomize_head(&mut ps, "ctx", 3, &mut rng);
        use rand::Rng;
        let grid = (3, 3, 3);
        let n = 27;
        let symbols: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let cond: Vec<f64> = (0..2 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut cond2 = cond.clone();
        for v in cond2.iter_mut() {
            *v += 0.7;
        }
        let p0 = m.predict_pmfs(&ps, &symbols, grid, Some(&cond)).unwrap();
        let p1 = m.predict_pmfs(&ps, &symbols, grid, Some(&cond2)).unwrap();
        for s in 0..n {
            assert_ne!(p0.pmf(s), p1.pmf(s), "conditioning must reach site {s}");
        }
    }

    #[test]
    fn uniform_rate_is_symbol_count_times_log2_levels() {
        let (m, ps, _) = small_model(0, 41);
        let n = 24;
        let mut tape = Tape::new();
        let vars = ps.bind_frozen(&mut tape).unwrap();
        let sym = tape.constant(vec![0.0; n], vec![2, 3, 4]).unwrap();
        let indices = vec![3u32; n];
        let bits = m.rate_bits(&mut tape, &vars, sym, &indices, None, None).unwrap();
        let expected = n as f64 * (6.0f64).log2();
        // the floor changes -log2(1/6) in the 5th decimal at most
        assert!(
            (tape.value(bits) - expected).abs() < 1e-3,
            "got {} want {expected}",
            tape.value(bits)
        );
    }

    #[test]
    fn zero_weights_zero_rate() {
        let (m, mut ps, mut rng) = small_model(0, 43);
        randomize_head(&mut ps, "ctx", 3, &mut rng);
        let n = 8;
        let mut tape = Tape::new();
        let vars = ps.bind_frozen(&mut tape).unwrap();
        let sym = tape.constant(vec![0.3; n], vec![2, 2, 2]).unwrap();
        let weights = tape.constant(vec![0.0; n], vec![2, 2, 2]).unwrap();
        let indices = vec![1u32; n];
        let bits = m.rate_bits(&mut tape, &vars, sym, &indices, None, Some(weights)).unwrap();
        assert_eq!(tape.value(bits), 0.0);
    }

    #[test]
    fn rate_gradient_flows_to_weights() {
        let (m, mut ps, mut rng) = small_model(0, 47);
        randomize_head(&mut ps, "ctx", 3, &mut rng);
        use rand::Rng;
        let n = 27;
        let mut tape = Tape::new();
        let vars = ps.bind(&mut tape).unwrap();
        let vals: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let sym = tape.constant(vals, vec![3, 3, 3]).unwrap();
        let indices: Vec<u32> = (0..n).map(|_| rng.gen_range(0..6) as u32).collect();
        let bits = m.rate_bits(&mut tape, &vars, sym, &indices, None, None).unwrap();
        tape.backward(bits).unwrap();
        let g = tape.grad(vars[0]).expect("first layer weight gradient");
        assert!(g.iter().any(|&v| v != 0.0), "rate must reach the first layer weights");
    }
}
