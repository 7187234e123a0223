//! Parameters, initialization, Adam, and small layer builders.
//!
//! Networks are described once as layer specs holding indices into a
//! [`ParamSet`]; every forward pass binds the whole set onto a fresh tape
//! (one leaf per parameter, in registration order) and layers pull their
//! vars out of that binding. Keeping values outside the tape lets one
//! parameter set drive many tapes (batch items, eval passes) and keeps the
//! optimizer a plain array update.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform He-style: U(-b, b) with b = sqrt(6 / fan_in).
    HeUniform { fan_in: usize },
    Uniform { lo: f64, hi: f64 },
    Const(f64),
    /// Evenly spaced over [lo, hi] inclusive; a single element sits at the midpoint.
    Linspace { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    pub params: Vec<Parameter>,
    step: u64,
}

/// Adam hyperparameters; `beta1/beta2/eps` are the usual defaults.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, init: Init, rng: &mut ChaCha12Rng) -> usize {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        let n: usize = shape.iter().product();
        let value: Vec<f64> = match init {
            Init::HeUniform { fan_in } => {
                let b = (6.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-b..b)).collect()
            }
            Init::Uniform { lo, hi } => (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
            Init::Const(c) => vec![c; n],
            Init::Linspace { lo, hi } => {
                if n == 1 {
                    vec![(lo + hi) / 2.0]
                } else {
                    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
                }
            }
        };
        self.params.push(Parameter { name, shape, value: value.clone(), m: vec![0.0; n], v: vec![0.0; n] });
        self.params.len() - 1
    }

    /// Overwrite one parameter's values by name (checkpoint loading).
    pub fn set_value(&mut self, name: &str, value: &[f64]) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Format(format!("no parameter named {name}")))?;
        if p.value.len() != value.len() {
            return Err(Error::shape(&[p.value.len()], &[value.len()], format!("values for {name}")));
        }
        p.value.copy_from_slice(value);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Push every parameter onto `tape` as a gradient-carrying leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), p.shape.clone(), true))
            .collect()
    }

    /// Push every parameter as a constant (no gradients; eval passes).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), p.shape.clone(), false))
            .collect()
    }

    /// One Adam update from summed gradients (one slot per parameter).
    ///
    /// Gradients are validated to be finite; a non-finite gradient aborts
    /// with a numerical error and leaves all values untouched.
    pub fn adam_step(&mut self, grads: &[Vec<f64>], lr: f64, cfg: AdamConfig) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::shape(&[self.params.len()], &[grads.len()], "adam grads count"));
        }
        for (p, g) in self.params.iter().zip(grads) {
            if g.len() != p.value.len() {
                return Err(Error::shape(&[p.value.len()], &[g.len()], format!("grad size for {}", p.name)));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite gradient for parameter {}", p.name)));
            }
        }
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        // Stage every update first: an overflow must leave the set untouched.
        let mut staged = Vec::with_capacity(self.params.len());
        for (p, g) in self.params.iter().zip(grads) {
            let mut m = p.m.clone();
            let mut v = p.v.clone();
            let mut value = p.value.clone();
            for i in 0..value.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                value[i] -= lr * mh / (vh.sqrt() + cfg.eps);
            }
            let finite = |xs: &[f64]| xs.iter().all(|x| x.is_finite());
            if !(finite(&m) && finite(&v) && finite(&value)) {
                return Err(Error::Numerical(format!("non-finite update for parameter {}", p.name)));
            }
            staged.push((m, v, value));
        }
        self.step += 1;
        for (p, (m, v, value)) in self.params.iter_mut().zip(staged) {
            p.m = m;
            p.v = v;
            p.value = value;
        }
        Ok(())
    }

    /// Fresh zeroed gradient accumulator matching this set.
    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| vec![0.0; p.value.len()]).collect()
    }

    /// Add the tape's gradients for `vars` (a binding of this set) into `acc`.
    pub fn accumulate(&self, tape: &Tape, vars: &[Var], acc: &mut [Vec<f64>]) {
        for (i, v) in vars.iter().enumerate() {
            if let Some(g) = tape.grad(*v) {
                let slot = &mut acc[i];
                for (s, gv) in slot.iter_mut().zip(g) {
                    *s += gv;
                }
            }
        }
    }
}

/// 2D convolution layer spec (weight + bias indices).
#[derive(Debug, Clone)]
pub struct Conv2dSpec {
    pub w: usize,
    pub b: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dSpec {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha12Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_c * k * k;
        let w = ps.add(format!("{name}.w"), vec![out_c, in_c, k, k], Init::HeUniform { fan_in }, rng);
        let b = ps.add(format!("{name}.b"), vec![out_c], Init::Const(0.0), rng);
        Conv2dSpec { w, b, stride, pad }
    }

    pub fn apply(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        tape.conv2d(x, vars[self.w], vars[self.b], self.stride, self.pad)
    }
}

/// Transposed 2D convolution layer spec.
#[derive(Debug, Clone)]
pub struct ConvT2dSpec {
    pub w: usize,
    pub b: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl ConvT2dSpec {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha12Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Self {
        let fan_in = in_c * k * k;
        let w = ps.add(format!("{name}.w"), vec![in_c, out_c, k, k], Init::HeUniform { fan_in }, rng);
        let b = ps.add(format!("{name}.b"), vec![out_c], Init::Const(0.0), rng);
        ConvT2dSpec { w, b, stride, pad, out_pad }
    }

    pub fn apply(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        tape.conv_t2d(x, vars[self.w], vars[self.b], self.stride, self.pad, self.out_pad)
    }
}

/// Residual block: `x + conv2(relu(conv1(x)))`, stride 1, same padding.
#[derive(Debug, Clone)]
pub struct ResBlockSpec {
    pub c1: Conv2dSpec,
    pub c2: Conv2dSpec,
}

impl ResBlockSpec {
    pub fn new(ps: &mut ParamSet, rng: &mut ChaCha12Rng, name: &str, c: usize) -> Self {
        ResBlockSpec {
            c1: Conv2dSpec::new(ps, rng, &format!("{name}.c1"), c, c, 3, 1, 1),
            c2: Conv2dSpec::new(ps, rng, &format!("{name}.c2"), c, c, 3, 1, 1),
        }
    }

    pub fn apply(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let h = self.c1.apply(tape, vars, x)?;
        let h = tape.relu(h);
        let h = self.c2.apply(tape, vars, h)?;
        tape.add(x, h)
    }
}

/// Single-head self-attention over flattened spatial positions:
/// `x + Wo @ (V @ softmax(K^T Q / sqrt(d)))`, all projections 1x1.
#[derive(Debug, Clone)]
pub struct AttentionSpec {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub dim: usize,
}

impl AttentionSpec {
    pub fn new(ps: &mut ParamSet, rng: &mut ChaCha12Rng, name: &str, c: usize, dim: usize) -> Self {
        let init = Init::HeUniform { fan_in: c };
        AttentionSpec {
            wq: ps.add(format!("{name}.wq"), vec![dim, c], init, rng),
            wk: ps.add(format!("{name}.wk"), vec![dim, c], init, rng),
            wv: ps.add(format!("{name}.wv"), vec![dim, c], init, rng),
            wo: ps.add(format!("{name}.wo"), vec![c, dim], Init::HeUniform { fan_in: dim }, rng),
            dim,
        }
    }

    pub fn apply(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::shape(&[0, 0, 0], &shape, "attention expects [C, H, W]"));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let n = h * w;
        let flat = tape.reshape(x, vec![c, n])?;
        let q = tape.matmul(vars[self.wq], flat)?;
        let k = tape.matmul(vars[self.wk], flat)?;
        let v = tape.matmul(vars[self.wv], flat)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(kt, q)?;
        let scores = tape.scale(scores, 1.0 / (self.dim as f64).sqrt());
        let attn = tape.softmax0(scores)?;
        let mixed = tape.matmul(v, attn)?;
        let out = tape.matmul(vars[self.wo], mixed)?;
        let out = tape.reshape(out, vec![c, h, w])?;
        tape.add(x, out)
    }
}
