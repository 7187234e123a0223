//! Reverse-mode autodiff over dense f64 tensors.
//!
//! A [`Tape`] owns every tensor produced during a forward pass. Operations
//! append nodes and return [`Var`] handles; [`Tape::backward`] walks the
//! nodes in reverse and accumulates gradients for every node that requires
//! them. Tapes are built per forward pass and discarded after the gradient
//! has been read out.
//!
//! All arithmetic is sequential and in a fixed order, so forward values and
//! gradients are bit-reproducible for identical inputs.

use crate::error::{Error, Result};
use std::sync::Arc;

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Per-input-channel kernel mask for 3D convolutions.
///
/// Layout `[in_channels, kd, kh, kw]`, one byte per tap; zero disables the
/// tap for both forward and gradient.
#[derive(Debug, Clone)]
pub struct KernelMask3 {
    pub data: Arc<Vec<u8>>,
    pub in_channels: usize,
    pub kd: usize,
    pub kh: usize,
    pub kw: usize,
}

impl KernelMask3 {
    #[inline]
    pub fn at(&self, ic: usize, kd: usize, kh: usize, kw: usize) -> bool {
        self.data[((ic * self.kd + kd) * self.kh + kh) * self.kw + kw] != 0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, k: f64 },
    MulChannel { x: Var, w: Var },
    Relu { x: Var },
    LeakyRelu { x: Var, slope: f64 },
    Clamp { x: Var, lo: f64, hi: f64 },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    ConvT2d { x: Var, w: Var, b: Var, stride: usize, pad: usize, out_pad: usize },
    Conv3d { x: Var, w: Var, b: Var, mask: Option<KernelMask3> },
    Matmul { a: Var, b: Var },
    Softmax0 { x: Var },
    ChannelNorm { x: Var, eps: f64 },
    CrossEntropy { logits: Var, targets: Vec<u32>, floor: f64, probs: Vec<f64> },
    Mse { a: Var, b: Var },
    Sum { x: Var },
    Mean { x: Var },
    Concat0 { parts: Vec<Var> },
    Slice0 { x: Var, start: usize, len: usize },
    UpsampleNearest2 { x: Var, factor: usize },
    AvgPool2 { x: Var, k: usize },
    SpaceToDepth2 { x: Var, r: usize },
    DepthToSpace2 { x: Var, r: usize },
    RepeatD { x: Var, d: usize },
    Reshape { x: Var },
    Transpose { x: Var },
    Quantize { latent: Var, centers: Var, sigma: f64, indices: Vec<u32> },
    LogisticBce { margin: Var, targets: Vec<f64> },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires: bool,
    op: Op,
}

/// Growable record of one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[inline]
fn idx3(c: usize, h: usize, w: usize, hh: usize, ww: usize) -> usize {
    (c * hh + h) * ww + w
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Gradient of the last `backward` seed w.r.t. `v`, if one was computed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Scalar value of a single-element tensor.
    pub fn value(&self, v: Var) -> f64 {
        debug_assert_eq!(numel(&self.nodes[v.0].shape), 1);
        self.nodes[v.0].data[0]
    }

    /// Codebook indices selected by a `quantize` node.
    pub fn quantize_indices(&self, v: Var) -> Option<&[u32]> {
        match &self.nodes[v.0].op {
            Op::Quantize { indices, .. } => Some(indices),
            _ => None,
        }
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires: bool, op: Op) -> Var {
        debug_assert_eq!(data.len(), numel(&shape));
        self.nodes.push(Node { data, shape, requires, op });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<Var> {
        if data.len() != numel(&shape) {
            return Err(Error::shape(&shape, &[data.len()], "leaf data length"));
        }
        Ok(self.push(data, shape, requires_grad, Op::Leaf))
    }

    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<Var> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.push(vec![x], vec![1], false, Op::Leaf)
    }

    fn same_shape(&self, a: Var, b: Var, context: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::shape(&self.nodes[a.0].shape, &self.nodes[b.0].shape, context));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(data, shape, req, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(data, shape, req, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(data, shape, req, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v * k).collect();
        let shape = self.nodes[x.0].shape.clone();
        let req = self.requires(x);
        self.push(data, shape, req, Op::Scale { x, k })
    }

    /// Multiply `x` of shape `[C, ...]` by a per-channel weight `w` of shape `[C]`.
    pub fn mul_channel(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        if xs.is_empty() || ws != vec![xs[0]] {
            return Err(Error::shape(&[xs.first().copied().unwrap_or(0)], &ws, "mul_channel weight"));
        }
        let c = xs[0];
        let tail = numel(&xs) / c;
        let mut data = vec![0.0; numel(&xs)];
        for ci in 0..c {
            let wv = self.nodes[w.0].data[ci];
            let src = &self.nodes[x.0].data[ci * tail..(ci + 1) * tail];
            let dst = &mut data[ci * tail..(ci + 1) * tail];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s * wv;
            }
        }
        let req = self.requires(x) || self.requires(w);
        Ok(self.push(data, xs, req, Op::MulChannel { x, w }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v.max(0.0)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let req = self.requires(x);
        self.push(data, shape, req, Op::Relu { x })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let data: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| if v > 0.0 { v } else { v * slope })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let req = self.requires(x);
        self.push(data, shape, req, Op::LeakyRelu { x, slope })
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v.clamp(lo, hi)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let req = self.requires(x);
        self.push(data, shape, req, Op::Clamp { x, lo, hi })
    }

    /// 2D convolution. `x: [I, H, W]`, `w: [O, I, KH, KW]`, `b: [O]`,
    /// zero padding `pad` on both spatial axes.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] {
            return Err(Error::shape(&xs, &ws, "conv2d input/kernel"));
        }
        let (i, h, wd) = (xs[0], xs[1], xs[2]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        if self.nodes[b.0].shape != vec![o] {
            return Err(Error::shape(&[o], &self.nodes[b.0].shape, "conv2d bias"));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw || stride == 0 {
            return Err(Error::shape(&ws, &xs, "conv2d kernel larger than padded input"));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; o * oh * ow];
        {
            let xd = &self.nodes[x.0].data;
            let wdat = &self.nodes[w.0].data;
            let bd = &self.nodes[b.0].data;
            for oc in 0..o {
                let plane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
                for v in plane.iter_mut() {
                    *v = bd[oc];
                }
                for ic in 0..i {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = wdat[((oc * i + ic) * kh + ky) * kw + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let xrow = &xd[idx3(ic, iy as usize, 0, h, wd)..idx3(ic, iy as usize, 0, h, wd) + wd];
                                let orow = &mut plane[oy * ow..(oy + 1) * ow];
                                for ox in 0..ow {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    orow[ox] += wv * xrow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        let req = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(out, vec![o, oh, ow], req, Op::Conv2d { x, w, b, stride, pad }))
    }

    /// Transposed 2D convolution. `x: [I, H, W]`, `w: [I, O, KH, KW]`, `b: [O]`.
    /// Output spatial size `(H-1)*stride + KH - 2*pad + out_pad`.
    pub fn conv_t2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        if xs.len() != 3 || ws.len() != 4 || ws[0] != xs[0] {
            return Err(Error::shape(&xs, &ws, "conv_t2d input/kernel"));
        }
        let (i, h, wd) = (xs[0], xs[1], xs[2]);
        let (o, kh, kw) = (ws[1], ws[2], ws[3]);
        if self.nodes[b.0].shape != vec![o] {
            return Err(Error::shape(&[o], &self.nodes[b.0].shape, "conv_t2d bias"));
        }
        if stride == 0 || (h - 1) * stride + kh + out_pad < 2 * pad {
            return Err(Error::shape(&ws, &xs, "conv_t2d geometry"));
        }
        let oh = (h - 1) * stride + kh + out_pad - 2 * pad;
        let ow = (wd - 1) * stride + kw + out_pad - 2 * pad;
        let mut out = vec![0.0; o * oh * ow];
        {
            let xd = &self.nodes[x.0].data;
            let wdat = &self.nodes[w.0].data;
            let bd = &self.nodes[b.0].data;
            for oc in 0..o {
                let plane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
                for v in plane.iter_mut() {
                    *v = bd[oc];
                }
                for ic in 0..i {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = wdat[((ic * o + oc) * kh + ky) * kw + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            for yi in 0..h {
                                let oy = (yi * stride + ky) as isize - pad as isize;
                                if oy < 0 || oy >= oh as isize {
                                    continue;
                                }
                                let xrow = &xd[idx3(ic, yi, 0, h, wd)..idx3(ic, yi, 0, h, wd) + wd];
                                let orow = &mut plane[oy as usize * ow..(oy as usize + 1) * ow];
                                for xi in 0..wd {
                                    let ox = (xi * stride + kx) as isize - pad as isize;
                                    if ox < 0 || ox >= ow as isize {
                                        continue;
                                    }
                                    orow[ox as usize] += wv * xrow[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
        let req = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(out, vec![o, oh, ow], req, Op::ConvT2d { x, w, b, stride, pad, out_pad }))
    }

    /// 3D convolution with same-padding and stride 1, optionally masked per
    /// input channel and tap. `x: [I, D, H, W]`, `w: [O, I, KD, KH, KW]`.
    ///
    /// Per output element, taps accumulate in `(ic, kd, kh, kw)` order onto
    /// the bias; [`crate::context`] relies on this order matching its
    /// site-wise evaluation bit for bit.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, mask: Option<KernelMask3>) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        if xs.len() != 4 || ws.len() != 5 || ws[1] != xs[0] {
            return Err(Error::shape(&xs, &ws, "conv3d input/kernel"));
        }
        let (i, d, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kd, kh, kw) = (ws[0], ws[2], ws[3], ws[4]);
        if self.nodes[b.0].shape != vec![o] {
            return Err(Error::shape(&[o], &self.nodes[b.0].shape, "conv3d bias"));
        }
        if kd % 2 == 0 || kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape(&ws, &xs, "conv3d kernel dims must be odd"));
        }
        if let Some(m) = &mask {
            if m.in_channels != i || m.kd != kd || m.kh != kh || m.kw != kw {
                return Err(Error::shape(&[i, kd, kh, kw], &[m.in_channels, m.kd, m.kh, m.kw], "conv3d mask"));
            }
        }
        let (pd, ph, pw) = (kd / 2, kh / 2, kw / 2);
        let mut out = vec![0.0; o * d * h * wd];
        {
            let xd = &self.nodes[x.0].data;
            let wdat = &self.nodes[w.0].data;
            let bd = &self.nodes[b.0].data;
            for oc in 0..o {
                let plane = &mut out[oc * d * h * wd..(oc + 1) * d * h * wd];
                for v in plane.iter_mut() {
                    *v = bd[oc];
                }
                for ic in 0..i {
                    for zk in 0..kd {
                        for yk in 0..kh {
                            for xk in 0..kw {
                                if let Some(m) = &mask {
                                    if !m.at(ic, zk, yk, xk) {
                                        continue;
                                    }
                                }
                                let wv = wdat[(((oc * i + ic) * kd + zk) * kh + yk) * kw + xk];
                                for od in 0..d {
                                    let id = (od + zk) as isize - pd as isize;
                                    if id < 0 || id >= d as isize {
                                        continue;
                                    }
                                    for oy in 0..h {
                                        let iy = (oy + yk) as isize - ph as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        let xbase = ((ic * d + id as usize) * h + iy as usize) * wd;
                                        let obase = (od * h + oy) * wd;
                                        for ox in 0..wd {
                                            let ix = (ox + xk) as isize - pw as isize;
                                            if ix < 0 || ix >= wd as isize {
                                                continue;
                                            }
                                            plane[obase + ox] += wv * xd[xbase + ix as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let req = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(out, vec![o, d, h, wd], req, Op::Conv3d { x, w, b, mask }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ash = self.nodes[a.0].shape.clone();
        let bsh = self.nodes[b.0].shape.clone();
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(Error::shape(&ash, &bsh, "matmul"));
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let mut out = vec![0.0; m * n];
        {
            let ad = &self.nodes[a.0].data;
            let bd = &self.nodes[b.0].data;
            for mi in 0..m {
                for ki in 0..k {
                    let av = ad[mi * k + ki];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &bd[ki * n..(ki + 1) * n];
                    let orow = &mut out[mi * n..(mi + 1) * n];
                    for ni in 0..n {
                        orow[ni] += av * brow[ni];
                    }
                }
            }
        }
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(out, vec![m, n], req, Op::Matmul { a, b }))
    }

    /// Column-wise softmax over axis 0 of a `[L, N]` tensor.
    pub fn softmax0(&mut self, x: Var) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 2 {
            return Err(Error::shape(&[0, 0], &xs, "softmax0 expects 2d"));
        }
        let (l, n) = (xs[0], xs[1]);
        let mut out = vec![0.0; l * n];
        {
            let xd = &self.nodes[x.0].data;
            for c in 0..n {
                let mut mx = f64::NEG_INFINITY;
                for li in 0..l {
                    mx = mx.max(xd[li * n + c]);
                }
                let mut s = 0.0;
                for li in 0..l {
                    let e = (xd[li * n + c] - mx).exp();
                    out[li * n + c] = e;
                    s += e;
                }
                for li in 0..l {
                    out[li * n + c] /= s;
                }
            }
        }
        let req = self.requires(x);
        Ok(self.push(out, xs, req, Op::Softmax0 { x }))
    }

    /// Unit-normalize each column of a `[C, N]` tensor across the channel axis.
    pub fn channel_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 2 {
            return Err(Error::shape(&[0, 0], &xs, "channel_norm expects 2d"));
        }
        let (c, n) = (xs[0], xs[1]);
        let mut out = vec![0.0; c * n];
        {
            let xd = &self.nodes[x.0].data;
            for col in 0..n {
                let mut ss = eps;
                for ci in 0..c {
                    let v = xd[ci * n + col];
                    ss += v * v;
                }
                let r = ss.sqrt();
                for ci in 0..c {
                    out[ci * n + col] = xd[ci * n + col] / r;
                }
            }
        }
        let req = self.requires(x);
        Ok(self.push(out, xs, req, Op::ChannelNorm { x, eps }))
    }

    /// Per-column negative log likelihood of `targets` under the floored
    /// softmax of `logits: [L, N]`. The pmf floor mixes uniformly:
    /// `p' = (1 - L*floor) * softmax + floor`, keeping every symbol's
    /// probability at least `floor`. Output `[N]`, natural log.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], floor: f64) -> Result<Var> {
        let xs = self.nodes[logits.0].shape.clone();
        if xs.len() != 2 {
            return Err(Error::shape(&[0, 0], &xs, "cross_entropy logits"));
        }
        let (l, n) = (xs[0], xs[1]);
        if targets.len() != n {
            return Err(Error::shape(&[n], &[targets.len()], "cross_entropy targets"));
        }
        let a = 1.0 - l as f64 * floor;
        if a <= 0.0 {
            return Err(Error::Numerical(format!("pmf floor {floor} too large for {l} symbols")));
        }
        let mut probs = vec![0.0; l * n];
        let mut out = vec![0.0; n];
        {
            let xd = &self.nodes[logits.0].data;
            for col in 0..n {
                let t = targets[col] as usize;
                if t >= l {
                    return Err(Error::Numerical(format!("target {t} out of range for {l} symbols")));
                }
                let mut mx = f64::NEG_INFINITY;
                for li in 0..l {
                    mx = mx.max(xd[li * n + col]);
                }
                let mut s = 0.0;
                for li in 0..l {
                    let e = (xd[li * n + col] - mx).exp();
                    probs[li * n + col] = e;
                    s += e;
                }
                for li in 0..l {
                    probs[li * n + col] /= s;
                }
                let pt = a * probs[t * n + col] + floor;
                out[col] = -pt.ln();
            }
        }
        let req = self.requires(logits);
        Ok(self.push(out, vec![n], req, Op::CrossEntropy { logits, targets: targets.to_vec(), floor, probs }))
    }

    /// Mean squared error between same-shaped tensors; scalar output.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let n = self.nodes[a.0].data.len();
        let mut acc = 0.0;
        for (x, y) in self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data) {
            let d = x - y;
            acc += d * d;
        }
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(vec![acc / n as f64], vec![1], req, Op::Mse { a, b }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let req = self.requires(x);
        self.push(vec![s], vec![1], req, Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].data.len();
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let req = self.requires(x);
        self.push(vec![s / n as f64], vec![1], req, Op::Mean { x })
    }

    /// Concatenate along axis 0. All parts must agree on trailing dims.
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape(&[1], &[0], "concat0 needs at least one part"));
        }
        let tail: Vec<usize> = self.nodes[parts[0].0].shape[1..].to_vec();
        let mut c0 = 0;
        for p in parts {
            let s = &self.nodes[p.0].shape;
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::shape(&tail, &s[1..].to_vec(), "concat0 trailing dims"));
            }
            c0 += s[0];
        }
        let mut data = Vec::with_capacity(c0 * numel(&tail).max(1));
        for p in parts {
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        let mut shape = vec![c0];
        shape.extend_from_slice(&tail);
        let req = parts.iter().any(|p| self.requires(*p));
        Ok(self.push(data, shape, req, Op::Concat0 { parts: parts.to_vec() }))
    }

    /// Slice `len` entries along axis 0 starting at `start`.
    pub fn slice0(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.is_empty() || start + len > xs[0] {
            return Err(Error::shape(&[start + len], &xs, "slice0 out of range"));
        }
        let tail = numel(&xs) / xs[0];
        let data = self.nodes[x.0].data[start * tail..(start + len) * tail].to_vec();
        let mut shape = vec![len];
        shape.extend_from_slice(&xs[1..]);
        let req = self.requires(x);
        Ok(self.push(data, shape, req, Op::Slice0 { x, start, len }))
    }

    /// Nearest-neighbor upsampling of `[C, H, W]` by an integer factor.
    pub fn upsample_nearest2(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 3 || factor == 0 {
            return Err(Error::shape(&[0, 0, 0], &xs, "upsample_nearest2 expects 3d"));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (oh, ow) = (h * factor, w * factor);
        let mut data = vec![0.0; c * oh * ow];
        {
            let xd = &self.nodes[x.0].data;
            for ci in 0..c {
                for oy in 0..oh {
                    let iy = oy / factor;
                    let src = &xd[idx3(ci, iy, 0, h, w)..idx3(ci, iy, 0, h, w) + w];
                    let dst = &mut data[(ci * oh + oy) * ow..(ci * oh + oy + 1) * ow];
                    for ox in 0..ow {
                        dst[ox] = src[ox / factor];
                    }
                }
            }
        }
        let req = self.requires(x);
        Ok(self.push(data, vec![c, oh, ow], req, Op::UpsampleNearest2 { x, factor }))
    }

    /// Mean over non-overlapping `k`x`k` blocks of a `[C, H, W]` tensor.
    pub fn avg_pool2(&mut self, x: Var, k: usize) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 3 || k == 0 || xs[1] % k != 0 || xs[2] % k != 0 {
            return Err(Error::shape(&[0, 0, 0], &xs, format!("avg_pool2 by {k} expects [C, n*{k}, m*{k}]")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (oh, ow) = (h / k, w / k);
        let inv = 1.0 / (k * k) as f64;
        let mut data = vec![0.0; c * oh * ow];
        {
            let xd = &self.nodes[x.0].data;
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0.0;
                        for dy in 0..k {
                            for dx in 0..k {
                                s += xd[idx3(ci, oy * k + dy, ox * k + dx, h, w)];
                            }
                        }
                        data[(ci * oh + oy) * ow + ox] = s * inv;
                    }
                }
            }
        }
        let req = self.requires(x);
        Ok(self.push(data, vec![c, oh, ow], req, Op::AvgPool2 { x, k }))
    }

    /// Fold `r`x`r` spatial blocks into channels: `[C, H, W]` becomes
    /// `[C*r*r, H/r, W/r]`, with output channel `c*r*r + dy*r + dx` holding
    /// input channel `c` at block offset `(dy, dx)`.
    pub fn space_to_depth2(&mut self, x: Var, r: usize) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 3 || r == 0 || xs[1] % r != 0 || xs[2] % r != 0 {
            return Err(Error::shape(&[0, 0, 0], &xs, format!("space_to_depth2 by {r} expects [C, n*{r}, m*{r}]")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (oh, ow) = (h / r, w / r);
        let mut data = vec![0.0; c * h * w];
        {
            let xd = &self.nodes[x.0].data;
            for ci in 0..c {
                for dy in 0..r {
                    for dx in 0..r {
                        let co = (ci * r + dy) * r + dx;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                data[(co * oh + oy) * ow + ox] =
                                    xd[idx3(ci, oy * r + dy, ox * r + dx, h, w)];
                            }
                        }
                    }
                }
            }
        }
        let req = self.requires(x);
        Ok(self.push(data, vec![c * r * r, oh, ow], req, Op::SpaceToDepth2 { x, r }))
    }

    /// Inverse of [`Tape::space_to_depth2`]: `[C*r*r, H, W]` becomes
    /// `[C, H*r, W*r]`.
    pub fn depth_to_space2(&mut self, x: Var, r: usize) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 3 || r == 0 || xs[0] % (r * r) != 0 {
            return Err(Error::shape(&[0, 0, 0], &xs, format!("depth_to_space2 by {r} expects [C*{}, H, W]", r * r)));
        }
        let (cin, h, w) = (xs[0], xs[1], xs[2]);
        let c = cin / (r * r);
        let (oh, ow) = (h * r, w * r);
        let mut data = vec![0.0; cin * h * w];
        {
            let xd = &self.nodes[x.0].data;
            for ci in 0..c {
                for dy in 0..r {
                    for dx in 0..r {
                        let co = (ci * r + dy) * r + dx;
                        for y in 0..h {
                            for x2 in 0..w {
                                data[idx3(ci, y * r + dy, x2 * r + dx, oh, ow)] =
                                    xd[(co * h + y) * w + x2];
                            }
                        }
                    }
                }
            }
        }
        let req = self.requires(x);
        Ok(self.push(data, vec![c, oh, ow], req, Op::DepthToSpace2 { x, r }))
    }

    /// Stack a `[C, H, W]` tensor `d` times along a new depth axis -> `[C, d, H, W]`.
    pub fn repeat_d(&mut self, x: Var, d: usize) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 3 || d == 0 {
            return Err(Error::shape(&[0, 0, 0], &xs, "repeat_d expects 3d"));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let plane = h * w;
        let mut data = vec![0.0; c * d * plane];
        {
            let xd = &self.nodes[x.0].data;
            for ci in 0..c {
                let src = &xd[ci * plane..(ci + 1) * plane];
                for di in 0..d {
                    let dst = &mut data[(ci * d + di) * plane..(ci * d + di + 1) * plane];
                    dst.copy_from_slice(src);
                }
            }
        }
        let req = self.requires(x);
        Ok(self.push(data, vec![c, d, h, w], req, Op::RepeatD { x, d }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.nodes[x.0].data.len() {
            return Err(Error::shape(&self.nodes[x.0].shape, &shape, "reshape element count"));
        }
        let data = self.nodes[x.0].data.clone();
        let req = self.requires(x);
        Ok(self.push(data, shape, req, Op::Reshape { x }))
    }

    /// Transpose a 2D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 2 {
            return Err(Error::shape(&[0, 0], &xs, "transpose expects 2d"));
        }
        let (r, c) = (xs[0], xs[1]);
        let mut data = vec![0.0; r * c];
        {
            let xd = &self.nodes[x.0].data;
            for ri in 0..r {
                for ci in 0..c {
                    data[ci * r + ri] = xd[ri * c + ci];
                }
            }
        }
        let req = self.requires(x);
        Ok(self.push(data, vec![c, r], req, Op::Transpose { x }))
    }

    /// Scalar quantization against a learnable codebook.
    ///
    /// Forward emits the nearest center per element (ties resolve to the
    /// lowest index). Backward differentiates the soft assignment
    /// `sum_j softmax_j(-sigma * |y - c_j|) * c_j` w.r.t. both the latent and
    /// the centers.
    pub fn quantize(&mut self, latent: Var, centers: Var, sigma: f64) -> Result<Var> {
        let cs = self.nodes[centers.0].shape.clone();
        if cs.len() != 1 || cs[0] == 0 {
            return Err(Error::shape(&[1], &cs, "quantize centers must be 1d non-empty"));
        }
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::Numerical(format!("quantize sigma must be positive, got {sigma}")));
        }
        let l = cs[0];
        let n = self.nodes[latent.0].data.len();
        let mut data = vec![0.0; n];
        let mut indices = vec![0u32; n];
        {
            let xd = &self.nodes[latent.0].data;
            let cd = &self.nodes[centers.0].data;
            for i in 0..n {
                let y = xd[i];
                let mut best = 0usize;
                let mut best_d = (y - cd[0]).abs();
                for j in 1..l {
                    let dj = (y - cd[j]).abs();
                    if dj < best_d {
                        best_d = dj;
                        best = j;
                    }
                }
                indices[i] = best as u32;
                data[i] = cd[best];
            }
        }
        let shape = self.nodes[latent.0].shape.clone();
        let req = self.requires(latent) || self.requires(centers);
        Ok(self.push(data, shape, req, Op::Quantize { latent, centers, sigma, indices }))
    }

    /// Mean binary cross entropy of `sigmoid(margin)` against soft targets.
    pub fn logistic_bce(&mut self, margin: Var, targets: &[f64]) -> Result<Var> {
        let n = self.nodes[margin.0].data.len();
        if targets.len() != n {
            return Err(Error::shape(&[n], &[targets.len()], "logistic_bce targets"));
        }
        let mut acc = 0.0;
        for (m, t) in self.nodes[margin.0].data.iter().zip(targets) {
            acc += t * softplus(-m) + (1.0 - t) * softplus(*m);
        }
        let req = self.requires(margin);
        Ok(self.push(vec![acc / n as f64], vec![1], req, Op::LogisticBce { margin, targets: targets.to_vec() }))
    }

    /// Accumulate gradients of a scalar `seed` into every contributing node.
    ///
    /// A tape records exactly one backward pass; calling this twice is an
    /// error rather than silently double-accumulating.
    pub fn backward(&mut self, seed: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Numerical("backward already ran on this tape".into()));
        }
        if numel(&self.nodes[seed.0].shape) != 1 {
            return Err(Error::shape(&[1], &self.nodes[seed.0].shape, "backward seed must be scalar"));
        }
        self.backward_done = true;
        self.grads[seed.0] = Some(vec![1.0]);
        for i in (0..=seed.0).rev() {
            if !self.nodes[i].requires {
                continue;
            }
            let g = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_inputs(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn add_grad(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires {
            return;
        }
        let n = self.nodes[v.0].data.len();
        let slot = &mut self.grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; n]);
        }
        f(slot.as_mut().unwrap());
    }

    fn accumulate_inputs(&mut self, node: usize, g: &[f64]) -> Result<()> {
        // Ops are matched by moving small metadata out; tensor data stays in
        // place and is read through raw pointers local to each arm.
        let op = std::mem::replace(&mut self.nodes[node].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.add_grad(*a, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                self.add_grad(*b, |gb| {
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::Sub { a, b } => {
                self.add_grad(*a, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                self.add_grad(*b, |gb| {
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul { a, b } => {
                let bd = self.nodes[b.0].data.clone();
                self.add_grad(*a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bd[i];
                    }
                });
                let ad = self.nodes[a.0].data.clone();
                self.add_grad(*b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * ad[i];
                    }
                });
            }
            Op::Scale { x, k } => {
                let k = *k;
                self.add_grad(*x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * k;
                    }
                });
            }
            Op::MulChannel { x, w } => {
                let c = self.nodes[w.0].data.len();
                let tail = self.nodes[x.0].data.len() / c;
                let wdat = self.nodes[w.0].data.clone();
                self.add_grad(*x, |gx| {
                    for ci in 0..c {
                        let wv = wdat[ci];
                        for t in 0..tail {
                            gx[ci * tail + t] += g[ci * tail + t] * wv;
                        }
                    }
                });
                let xd = self.nodes[x.0].data.clone();
                self.add_grad(*w, |gw| {
                    for ci in 0..c {
                        let mut acc = 0.0;
                        for t in 0..tail {
                            acc += g[ci * tail + t] * xd[ci * tail + t];
                        }
                        gw[ci] += acc;
                    }
                });
            }
            Op::Relu { x } => {
                let xd = self.nodes[x.0].data.clone();
                self.add_grad(*x, |gx| {
                    for i in 0..gx.len() {
                        if xd[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::LeakyRelu { x, slope } => {
                let slope = *slope;
                let xd = self.nodes[x.0].data.clone();
                self.add_grad(*x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * if xd[i] > 0.0 { 1.0 } else { slope };
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                let xd = self.nodes[x.0].data.clone();
                self.add_grad(*x, |gx| {
                    for i in 0..gx.len() {
                        if xd[i] > lo && xd[i] < hi {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                self.conv2d_backward(*x, *w, *b, *stride, *pad, g);
            }
            Op::ConvT2d { x, w, b, stride, pad, out_pad } => {
                self.conv_t2d_backward(*x, *w, *b, *stride, *pad, *out_pad, g);
            }
            Op::Conv3d { x, w, b, mask } => {
                self.conv3d_backward(*x, *w, *b, mask.as_ref(), g);
            }
            Op::Matmul { a, b } => {
                let ash = self.nodes[a.0].shape.clone();
                let bsh = self.nodes[b.0].shape.clone();
                let (m, k, n) = (ash[0], ash[1], bsh[1]);
                let bd = self.nodes[b.0].data.clone();
                self.add_grad(*a, |ga| {
                    for mi in 0..m {
                        for ki in 0..k {
                            let mut acc = 0.0;
                            for ni in 0..n {
                                acc += g[mi * n + ni] * bd[ki * n + ni];
                            }
                            ga[mi * k + ki] += acc;
                        }
                    }
                });
                let ad = self.nodes[a.0].data.clone();
                self.add_grad(*b, |gb| {
                    for ki in 0..k {
                        for ni in 0..n {
                            let mut acc = 0.0;
                            for mi in 0..m {
                                acc += ad[mi * k + ki] * g[mi * n + ni];
                            }
                            gb[ki * n + ni] += acc;
                        }
                    }
                });
            }
            Op::Softmax0 { x } => {
                let s = self.nodes[node].data.clone();
                let (l, n) = (self.nodes[node].shape[0], self.nodes[node].shape[1]);
                self.add_grad(*x, |gx| {
                    for col in 0..n {
                        let mut dot = 0.0;
                        for li in 0..l {
                            dot += g[li * n + col] * s[li * n + col];
                        }
                        for li in 0..l {
                            gx[li * n + col] += s[li * n + col] * (g[li * n + col] - dot);
                        }
                    }
                });
            }
            Op::ChannelNorm { x, eps } => {
                let eps = *eps;
                let xd = self.nodes[x.0].data.clone();
                let (c, n) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                self.add_grad(*x, |gx| {
                    for col in 0..n {
                        let mut ss = eps;
                        for ci in 0..c {
                            let v = xd[ci * n + col];
                            ss += v * v;
                        }
                        let r = ss.sqrt();
                        let r3 = r * ss;
                        let mut dot = 0.0;
                        for ci in 0..c {
                            dot += g[ci * n + col] * xd[ci * n + col];
                        }
                        for ci in 0..c {
                            gx[ci * n + col] += g[ci * n + col] / r - xd[ci * n + col] * dot / r3;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, floor, probs } => {
                let (l, n) = (self.nodes[logits.0].shape[0], self.nodes[logits.0].shape[1]);
                let a = 1.0 - l as f64 * floor;
                self.add_grad(*logits, |gl| {
                    for col in 0..n {
                        let t = targets[col] as usize;
                        let pt = probs[t * n + col];
                        let ptf = a * pt + floor;
                        let scale = g[col] * a * pt / ptf;
                        for li in 0..l {
                            let delta = if li == t { 1.0 } else { 0.0 };
                            gl[li * n + col] += scale * (probs[li * n + col] - delta);
                        }
                    }
                });
            }
            Op::Mse { a, b } => {
                let n = self.nodes[a.0].data.len() as f64;
                let ad = self.nodes[a.0].data.clone();
                let bd = self.nodes[b.0].data.clone();
                let k = 2.0 * g[0] / n;
                self.add_grad(*a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += k * (ad[i] - bd[i]);
                    }
                });
                self.add_grad(*b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] -= k * (ad[i] - bd[i]);
                    }
                });
            }
            Op::Sum { x } => {
                let gv = g[0];
                self.add_grad(*x, |gx| {
                    for v in gx.iter_mut() {
                        *v += gv;
                    }
                });
            }
            Op::Mean { x } => {
                let n = self.nodes[x.0].data.len() as f64;
                let gv = g[0] / n;
                self.add_grad(*x, |gx| {
                    for v in gx.iter_mut() {
                        *v += gv;
                    }
                });
            }
            Op::Concat0 { parts } => {
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[p.0].data.len();
                    let seg = g[off..off + len].to_vec();
                    self.add_grad(*p, |gp| {
                        for i in 0..len {
                            gp[i] += seg[i];
                        }
                    });
                    off += len;
                }
            }
            Op::Slice0 { x, start, len } => {
                let xs = self.nodes[x.0].shape.clone();
                let tail = numel(&xs) / xs[0];
                let (start, len) = (*start, *len);
                self.add_grad(*x, |gx| {
                    for i in 0..len * tail {
                        gx[start * tail + i] += g[i];
                    }
                });
            }
            Op::UpsampleNearest2 { x, factor } => {
                let f = *factor;
                let xs = self.nodes[x.0].shape.clone();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let (oh, ow) = (h * f, w * f);
                self.add_grad(*x, |gx| {
                    for ci in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                gx[idx3(ci, oy / f, ox / f, h, w)] += g[(ci * oh + oy) * ow + ox];
                            }
                        }
                    }
                });
            }
            Op::AvgPool2 { x, k } => {
                let k = *k;
                let xs = self.nodes[x.0].shape.clone();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let (oh, ow) = (h / k, w / k);
                let inv = 1.0 / (k * k) as f64;
                self.add_grad(*x, |gx| {
                    for ci in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let go = g[(ci * oh + oy) * ow + ox] * inv;
                                for dy in 0..k {
                                    for dx in 0..k {
                                        gx[idx3(ci, oy * k + dy, ox * k + dx, h, w)] += go;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::SpaceToDepth2 { x, r } => {
                let r = *r;
                let xs = self.nodes[x.0].shape.clone();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let (oh, ow) = (h / r, w / r);
                self.add_grad(*x, |gx| {
                    for ci in 0..c {
                        for dy in 0..r {
                            for dx in 0..r {
                                let co = (ci * r + dy) * r + dx;
                                for oy in 0..oh {
                                    for ox in 0..ow {
                                        gx[idx3(ci, oy * r + dy, ox * r + dx, h, w)] +=
                                            g[(co * oh + oy) * ow + ox];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::DepthToSpace2 { x, r } => {
                let r = *r;
                let xs = self.nodes[x.0].shape.clone();
                let (cin, h, w) = (xs[0], xs[1], xs[2]);
                let c = cin / (r * r);
                let (oh, ow) = (h * r, w * r);
                self.add_grad(*x, |gx| {
                    for ci in 0..c {
                        for dy in 0..r {
                            for dx in 0..r {
                                let co = (ci * r + dy) * r + dx;
                                for y in 0..h {
                                    for x2 in 0..w {
                                        gx[(co * h + y) * w + x2] +=
                                            g[idx3(ci, y * r + dy, x2 * r + dx, oh, ow)];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::RepeatD { x, d } => {
                let d = *d;
                let xs = self.nodes[x.0].shape.clone();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let plane = h * w;
                self.add_grad(*x, |gx| {
                    for ci in 0..c {
                        for di in 0..d {
                            let base = (ci * d + di) * plane;
                            for t in 0..plane {
                                gx[ci * plane + t] += g[base + t];
                            }
                        }
                    }
                });
            }
            Op::Reshape { x } => {
                self.add_grad(*x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i];
                    }
                });
            }
            Op::Transpose { x } => {
                let xs = self.nodes[x.0].shape.clone();
                let (r, c) = (xs[0], xs[1]);
                self.add_grad(*x, |gx| {
                    for ri in 0..r {
                        for ci in 0..c {
                            gx[ri * c + ci] += g[ci * r + ri];
                        }
                    }
                });
            }
            Op::Quantize { latent, centers, sigma, .. } => {
                let sigma = *sigma;
                let xd = self.nodes[latent.0].data.clone();
                let cd = self.nodes[centers.0].data.clone();
                let l = cd.len();
                let n = xd.len();
                let mut glat = vec![0.0; n];
                let mut gcen = vec![0.0; l];
                let mut wbuf = vec![0.0; l];
                for i in 0..n {
                    let y = xd[i];
                    let mut amax = f64::NEG_INFINITY;
                    for j in 0..l {
                        let a = -sigma * (y - cd[j]).abs();
                        wbuf[j] = a;
                        amax = amax.max(a);
                    }
                    let mut s = 0.0;
                    for j in 0..l {
                        wbuf[j] = (wbuf[j] - amax).exp();
                        s += wbuf[j];
                    }
                    let mut ysoft = 0.0;
                    for j in 0..l {
                        wbuf[j] /= s;
                        ysoft += wbuf[j] * cd[j];
                    }
                    let mut cws = 0.0; // sum_j c_j w_j sign_j
                    let mut ws = 0.0; // sum_j w_j sign_j
                    for j in 0..l {
                        let sj = sign(y - cd[j]);
                        cws += cd[j] * wbuf[j] * sj;
                        ws += wbuf[j] * sj;
                    }
                    let dy = -sigma * (cws - ysoft * ws);
                    glat[i] = g[i] * dy;
                    for j in 0..l {
                        let sj = sign(y - cd[j]);
                        let dcj = wbuf[j] + sigma * sj * wbuf[j] * (cd[j] - ysoft);
                        gcen[j] += g[i] * dcj;
                    }
                }
                self.add_grad(*latent, |gx| {
                    for i in 0..n {
                        gx[i] += glat[i];
                    }
                });
                self.add_grad(*centers, |gc| {
                    for j in 0..l {
                        gc[j] += gcen[j];
                    }
                });
            }
            Op::LogisticBce { margin, targets } => {
                let md = self.nodes[margin.0].data.clone();
                let n = md.len() as f64;
                let k = g[0] / n;
                let t = targets.clone();
                self.add_grad(*margin, |gm| {
                    for i in 0..gm.len() {
                        gm[i] += k * (sigmoid(md[i]) - t[i]);
                    }
                });
            }
        }
        self.nodes[node].op = op;
        Ok(())
    }

    fn conv2d_backward(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize, g: &[f64]) {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        let (i, h, wd) = (xs[0], xs[1], xs[2]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        if self.nodes[x.0].requires {
            let wdat = self.nodes[w.0].data.clone();
            self.add_grad(x, |gx| {
                for oc in 0..o {
                    let gplane = &g[oc * oh * ow..(oc + 1) * oh * ow];
                    for ic in 0..i {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let wv = wdat[((oc * i + ic) * kh + ky) * kw + kx];
                                if wv == 0.0 {
                                    continue;
                                }
                                for oy in 0..oh {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let grow = &gplane[oy * ow..(oy + 1) * ow];
                                    let xbase = idx3(ic, iy as usize, 0, h, wd);
                                    for ox in 0..ow {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        gx[xbase + ix as usize] += wv * grow[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            });
        }
        if self.nodes[w.0].requires {
            let xd = self.nodes[x.0].data.clone();
            self.add_grad(w, |gw| {
                for oc in 0..o {
                    let gplane = &g[oc * oh * ow..(oc + 1) * oh * ow];
                    for ic in 0..i {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let mut acc = 0.0;
                                for oy in 0..oh {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let grow = &gplane[oy * ow..(oy + 1) * ow];
                                    let xbase = idx3(ic, iy as usize, 0, h, wd);
                                    for ox in 0..ow {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        acc += xd[xbase + ix as usize] * grow[ox];
                                    }
                                }
                                gw[((oc * i + ic) * kh + ky) * kw + kx] += acc;
                            }
                        }
                    }
                }
            });
        }
        if self.nodes[b.0].requires {
            self.add_grad(b, |gb| {
                for oc in 0..o {
                    let mut acc = 0.0;
                    for v in &g[oc * oh * ow..(oc + 1) * oh * ow] {
                        acc += v;
                    }
                    gb[oc] += acc;
                }
            });
        }
    }

    fn conv_t2d_backward(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        out_pad: usize,
        g: &[f64],
    ) {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        let (i, h, wd) = (xs[0], xs[1], xs[2]);
        let (o, kh, kw) = (ws[1], ws[2], ws[3]);
        let oh = (h - 1) * stride + kh + out_pad - 2 * pad;
        let ow = (wd - 1) * stride + kw + out_pad - 2 * pad;
        if self.nodes[x.0].requires {
            let wdat = self.nodes[w.0].data.clone();
            self.add_grad(x, |gx| {
                for ic in 0..i {
                    for oc in 0..o {
                        let gplane = &g[oc * oh * ow..(oc + 1) * oh * ow];
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let wv = wdat[((ic * o + oc) * kh + ky) * kw + kx];
                                if wv == 0.0 {
                                    continue;
                                }
                                for yi in 0..h {
                                    let oy = (yi * stride + ky) as isize - pad as isize;
                                    if oy < 0 || oy >= oh as isize {
                                        continue;
                                    }
                                    let grow = &gplane[oy as usize * ow..(oy as usize + 1) * ow];
                                    let xbase = idx3(ic, yi, 0, h, wd);
                                    for xi in 0..wd {
                                        let ox = (xi * stride + kx) as isize - pad as isize;
                                        if ox < 0 || ox >= ow as isize {
                                            continue;
                                        }
                                        gx[xbase + xi] += wv * grow[ox as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            });
        }
        if self.nodes[w.0].requires {
            let xd = self.nodes[x.0].data.clone();
            self.add_grad(w, |gw| {
                for ic in 0..i {
                    for oc in 0..o {
                        let gplane = &g[oc * oh * ow..(oc + 1) * oh * ow];
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let mut acc = 0.0;
                                for yi in 0..h {
                                    let oy = (yi * stride + ky) as isize - pad as isize;
                                    if oy < 0 || oy >= oh as isize {
                                        continue;
                                    }
                                    let grow = &gplane[oy as usize * ow..(oy as usize + 1) * ow];
                                    let xbase = idx3(ic, yi, 0, h, wd);
                                    for xi in 0..wd {
                                        let ox = (xi * stride + kx) as isize - pad as isize;
                                        if ox < 0 || ox >= ow as isize {
                                            continue;
                                        }
                                        acc += xd[xbase + xi] * grow[ox as usize];
                                    }
                                }
                                gw[((ic * o + oc) * kh + ky) * kw + kx] += acc;
                            }
                        }
                    }
                }
            });
        }
        if self.nodes[b.0].requires {
            self.add_grad(b, |gb| {
                for oc in 0..o {
                    let mut acc = 0.0;
                    for v in &g[oc * oh * ow..(oc + 1) * oh * ow] {
                        acc += v;
                    }
                    gb[oc] += acc;
                }
            });
        }
    }

    fn conv3d_backward(&mut self, x: Var, w: Var, b: Var, mask: Option<&KernelMask3>, g: &[f64]) {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        let (i, d, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kd, kh, kw) = (ws[0], ws[2], ws[3], ws[4]);
        let (pd, ph, pw) = (kd / 2, kh / 2, kw / 2);
        if self.nodes[x.0].requires {
            let wdat = self.nodes[w.0].data.clone();
            let mask = mask.cloned();
            self.add_grad(x, |gx| {
                for oc in 0..o {
                    let gplane = &g[oc * d * h * wd..(oc + 1) * d * h * wd];
                    for ic in 0..i {
                        for zk in 0..kd {
                            for yk in 0..kh {
                                for xk in 0..kw {
                                    if let Some(m) = &mask {
                                        if !m.at(ic, zk, yk, xk) {
                                            continue;
                                        }
                                    }
                                    let wv = wdat[(((oc * i + ic) * kd + zk) * kh + yk) * kw + xk];
                                    if wv == 0.0 {
                                        continue;
                                    }
                                    for od in 0..d {
                                        let id = (od + zk) as isize - pd as isize;
                                        if id < 0 || id >= d as isize {
                                            continue;
                                        }
                                        for oy in 0..h {
                                            let iy = (oy + yk) as isize - ph as isize;
                                            if iy < 0 || iy >= h as isize {
                                                continue;
                                            }
                                            let xbase = ((ic * d + id as usize) * h + iy as usize) * wd;
                                            let gbase = (od * h + oy) * wd;
                                            for ox in 0..wd {
                                                let ix = (ox + xk) as isize - pw as isize;
                                                if ix < 0 || ix >= wd as isize {
                                                    continue;
                                                }
                                                gx[xbase + ix as usize] += wv * gplane[gbase + ox];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            });
        }
        if self.nodes[w.0].requires {
            let xd = self.nodes[x.0].data.clone();
            let mask = mask.cloned();
            self.add_grad(w, |gw| {
                for oc in 0..o {
                    let gplane = &g[oc * d * h * wd..(oc + 1) * d * h * wd];
                    for ic in 0..i {
                        for zk in 0..kd {
                            for yk in 0..kh {
                                for xk in 0..kw {
                                    if let Some(m) = &mask {
                                        if !m.at(ic, zk, yk, xk) {
                                            continue;
                                        }
                                    }
                                    let mut acc = 0.0;
                                    for od in 0..d {
                                        let id = (od + zk) as isize - pd as isize;
                                        if id < 0 || id >= d as isize {
                                            continue;
                                        }
                                        for oy in 0..h {
                                            let iy = (oy + yk) as isize - ph as isize;
                                            if iy < 0 || iy >= h as isize {
                                                continue;
                                            }
                                            let xbase = ((ic * d + id as usize) * h + iy as usize) * wd;
                                            let gbase = (od * h + oy) * wd;
                                            for ox in 0..wd {
                                                let ix = (ox + xk) as isize - pw as isize;
                                                if ix < 0 || ix >= wd as isize {
                                                    continue;
                                                }
                                                acc += xd[xbase + ix as usize] * gplane[gbase + ox];
                                            }
                                        }
                                    }
                                    gw[(((oc * i + ic) * kd + zk) * kh + yk) * kw + xk] += acc;
                                }
                            }
                        }
                    }
                }
            });
        }
        if self.nodes[b.0].requires {
            self.add_grad(b, |gb| {
                for oc in 0..o {
                    let mut acc = 0.0;
                    for v in &g[oc * d * h * wd..(oc + 1) * d * h * wd] {
                        acc += v;
                    }
                    gb[oc] += acc;
                }
            });
        }
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_and_backward() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1.0, 2.0], vec![2], true).unwrap();
        let b = t.leaf(vec![3.0, 4.0], vec![2], true).unwrap();
        let c = t.add(a, b).unwrap();
        let s = t.sum(c);
        t.backward(s).unwrap();
        assert_eq!(t.data(c), &[4.0, 6.0]);
        assert_eq!(t.grad(a).unwrap(), &[1.0, 1.0]);
        assert_eq!(t.grad(b).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_twice_is_rejected() {
        let mut t = Tape::new();
        let a = t.leaf(vec![2.0], vec![1], true).unwrap();
        let s = t.sum(a);
        t.backward(s).unwrap();
        let err = t.backward(s).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)), "second backward must be rejected, got {err:?}");
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut t = Tape::new();
        let x = t.leaf(vec![0.0; 12], vec![3, 2, 2], true).unwrap();
        let w = t.leaf(vec![0.0; 4 * 9], vec![1, 4, 3, 3], true).unwrap();
        let b = t.leaf(vec![0.0], vec![1], true).unwrap();
        let err = t.conv2d(x, w, b, 1, 1).unwrap_err();
        match err {
            Error::Shape { expected, got, .. } => {
                assert_eq!(expected, vec![3, 2, 2]);
                assert_eq!(got, vec![1, 4, 3, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut t = Tape::new();
            let x = t
                .leaf((0..27).map(|i| (i as f64 * 0.37).sin()).collect(), vec![3, 3, 3], false)
                .unwrap();
            let w = t
                .leaf((0..54).map(|i| (i as f64 * 0.11).cos()).collect(), vec![2, 3, 3, 3], false)
                .unwrap();
            let b = t.leaf(vec![0.1, -0.2], vec![2], false).unwrap();
            let y = t.conv2d(x, w, b, 1, 1).unwrap();
            t.data(y).to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "identical inputs must produce bit-identical outputs");
    }

    #[test]
    fn quantize_forward_is_hard_and_ties_take_lowest_index() {
        let mut t = Tape::new();
        let y = t.leaf(vec![0.9, -0.2, 0.5], vec![3], false).unwrap();
        let c = t.leaf(vec![0.0, 1.0], vec![2], true).unwrap();
        let q = t.quantize(y, c, 1.0).unwrap();
        assert_eq!(t.data(q), &[1.0, 0.0, 0.0], "0.5 is equidistant and must take center index 0");
        assert_eq!(t.quantize_indices(q).unwrap(), &[1, 0, 0]);
    }

    #[test]
    fn softmax_columns_sum_to_one() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, -2.0, 0.3, 4.0, 0.0, -1.0], vec![3, 2], false).unwrap();
        let s = t.softmax0(x).unwrap();
        let d = t.data(s);
        for col in 0..2 {
            let sum: f64 = (0..3).map(|l| d[l * 2 + col]).sum();
            assert!((sum - 1.0).abs() < 1e-12, "column {col} sums to {sum}");
        }
    }

    #[test]
    fn channel_norm_unit_vector() {
        let mut t = Tape::new();
        let x = t.leaf(vec![3.0, 0.0, 0.0], vec![3, 1], false).unwrap();
        let y = t.channel_norm(x, 0.0).unwrap();
        let d = t.data(y);
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1] == 0.0 && d[2] == 0.0, "got {d:?}");
    }

    #[test]
    fn conv2d_stride2_shape() {
        let mut t = Tape::new();
        let x = t.leaf(vec![0.0; 3 * 64 * 64], vec![3, 64, 64], false).unwrap();
        let w = t.leaf(vec![0.0; 8 * 3 * 9], vec![8, 3, 3, 3], false).unwrap();
        let b = t.leaf(vec![0.0; 8], vec![8], false).unwrap();
        let y = t.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(t.shape(y), &[8, 32, 32]);
    }

    #[test]
    fn block_reshuffles_invert_and_pool_averages() {
        let mut t = Tape::new();
        let vals: Vec<f64> = (0..2 * 4 * 4).map(|i| i as f64).collect();
        let x = t.leaf(vals.clone(), vec![2, 4, 4], false).unwrap();
        let s = t.space_to_depth2(x, 2).unwrap();
        assert_eq!(t.shape(s), &[8, 2, 2]);
        // channel 0 of the folded tensor is the top-left corner of each block
        assert_eq!(&t.data(s)[..4], &[0.0, 2.0, 8.0, 10.0]);
        let back = t.depth_to_space2(s, 2).unwrap();
        assert_eq!(t.data(back), &vals[..]);
        let p = t.avg_pool2(x, 4).unwrap();
        assert_eq!(t.shape(p), &[2, 1, 1]);
        assert_eq!(t.data(p), &[7.5, 23.5]);
    }

    #[test]
    fn conv_t2d_doubles_spatial_size() {
        let mut t = Tape::new();
        let x = t.leaf(vec![0.0; 4 * 8 * 8], vec![4, 8, 8], false).unwrap();
        let w = t.leaf(vec![0.0; 4 * 2 * 16], vec![4, 2, 4, 4], false).unwrap();
        let b = t.leaf(vec![0.0; 2], vec![2], false).unwrap();
        let y = t.conv_t2d(x, w, b, 2, 1, 0).unwrap();
        assert_eq!(t.shape(y), &[2, 16, 16]);
    }
}
