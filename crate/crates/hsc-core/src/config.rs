//! Codec and trainer configuration, key=value parsing, and config digests.
//!
//! A [`CodecConfig`] fully determines the network shapes and codebooks, so
//! checkpoints and bitstreams both carry its 64-bit digest; decoding with a
//! mismatched model is refused instead of producing garbage. Floats enter
//! the digest rounded to f32, matching checkpoint parameter precision.

use crate::error::{Error, Result};

/// Everything that shapes the codec: bottleneck widths, codebooks, mask
/// fusion, loss weights, and architecture knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecConfig {
    /// Stage-1 data channels (the bottleneck also carries +1 importance channel).
    pub c1: usize,
    /// Stage-2 data channels.
    pub c2: usize,
    /// Stage-1 codebook size.
    pub l1: usize,
    /// Stage-2 codebook size.
    pub l2: usize,
    /// Softness of the quantizer's backward pass.
    pub sigma: f64,
    /// Saliency weight in mask fusion.
    pub lambda1: f64,
    /// Importance weight in mask fusion.
    pub lambda2: f64,
    /// Salient-region distortion weight.
    pub w1: f64,
    /// Non-salient-region distortion weight.
    pub w2: f64,
    /// Rate weight in the training loss.
    pub alpha: f64,
    /// Distortion weight in the training loss.
    pub beta: f64,
    /// Target bit-rate for rate clipping.
    pub target_bpp: f64,
    pub seed: u64,
    /// Base channel count of the encoder ladder (widths are w, 3w/2, 2w).
    pub width: usize,
    /// Residual blocks per encoder/decoder scale.
    pub res_blocks: usize,
    /// Self-attention block in the innermost scale.
    pub attention: bool,
    /// Context model hidden channels.
    pub ctx_hidden: usize,
    /// Context model depth (convolutions, head included).
    pub ctx_layers: usize,
    /// Context model kernel edge (cubic, odd).
    pub ctx_kernel: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            c1: 12,
            c2: 12,
            l1: 6,
            l2: 6,
            sigma: 1.0,
            lambda1: 1.0,
            // Below one so non-salient sites shed their deepest channels
            // even when the importance plane saturates.
            lambda2: 0.9,
            w1: 0.75,
            w2: 0.25,
            alpha: 1.0,
            beta: 32.0,
            target_bpp: 0.4,
            seed: 0,
            width: 16,
            res_blocks: 1,
            attention: false,
            ctx_hidden: 16,
            ctx_layers: 3,
            ctx_kernel: 3,
        }
    }
}

pub fn fnv1a64(data: &[u8]) -> u64 {
    let mut h = 0xCBF2_9CE4_8422_2325u64;
    for &b in data {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c1 < 1 || self.c2 < 1 {
            return Err(Error::Config("c1 and c2 must be at least 1".into()));
        }
        if self.l1 < 2 || self.l2 < 2 {
            return Err(Error::Config("codebooks need at least 2 levels".into()));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::Config("sigma must be positive".into()));
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("w1", self.w1),
            ("w2", self.w2),
            ("alpha", self.alpha),
            ("beta", self.beta),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        if (self.w1 + self.w2 - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("w1 + w2 must equal 1, got {}", self.w1 + self.w2)));
        }
        if !(self.target_bpp.is_finite() && self.target_bpp > 0.0) {
            return Err(Error::Config("target_bpp must be positive".into()));
        }
        if self.width < 4 {
            return Err(Error::Config("width must be at least 4".into()));
        }
        if self.ctx_layers < 2 {
            return Err(Error::Config("ctx_layers must be at least 2".into()));
        }
        if self.ctx_kernel % 2 == 0 || self.ctx_kernel == 0 {
            return Err(Error::Config("ctx_kernel must be odd".into()));
        }
        if self.ctx_hidden < 1 {
            return Err(Error::Config("ctx_hidden must be at least 1".into()));
        }
        Ok(())
    }

    /// Set one field by key; `Ok(false)` means the key is not a codec key.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        fn int(key: &str, value: &str) -> Result<usize> {
            value.parse().map_err(|_| Error::Config(format!("{key}: expected integer, got {value:?}")))
        }
        fn float(key: &str, value: &str) -> Result<f64> {
            value.parse().map_err(|_| Error::Config(format!("{key}: expected number, got {value:?}")))
        }
        match key {
            "c1" => self.c1 = int(key, value)?,
            "c2" => self.c2 = int(key, value)?,
            "l1" => self.l1 = int(key, value)?,
            "l2" => self.l2 = int(key, value)?,
            "sigma" => self.sigma = float(key, value)?,
            "lambda1" => self.lambda1 = float(key, value)?,
            "lambda2" => self.lambda2 = float(key, value)?,
            "w1" => self.w1 = float(key, value)?,
            "w2" => self.w2 = float(key, value)?,
            "alpha" => self.alpha = float(key, value)?,
            "beta" => self.beta = float(key, value)?,
            "target_bpp" => self.target_bpp = float(key, value)?,
            "seed" => {
                self.seed = value
                    .parse()
                    .map_err(|_| Error::Config(format!("seed: expected integer, got {value:?}")))?
            }
            "width" => self.width = int(key, value)?,
            "res_blocks" => self.res_blocks = int(key, value)?,
            "attention" => {
                self.attention = match value {
                    "true" | "1" => true,
                    "false" | "0" => false,
                    _ => return Err(Error::Config(format!("attention: expected bool, got {value:?}"))),
                }
            }
            "ctx_hidden" => self.ctx_hidden = int(key, value)?,
            "ctx_layers" => self.ctx_layers = int(key, value)?,
            "ctx_kernel" => self.ctx_kernel = int(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Canonical key=value form; parsing it back reproduces the config.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("c1={}\n", self.c1));
        s.push_str(&format!("c2={}\n", self.c2));
        s.push_str(&format!("l1={}\n", self.l1));
        s.push_str(&format!("l2={}\n", self.l2));
        s.push_str(&format!("sigma={}\n", self.sigma));
        s.push_str(&format!("lambda1={}\n", self.lambda1));
        s.push_str(&format!("lambda2={}\n", self.lambda2));
        s.push_str(&format!("w1={}\n", self.w1));
        s.push_str(&format!("w2={}\n", self.w2));
        s.push_str(&format!("alpha={}\n", self.alpha));
        s.push_str(&format!("beta={}\n", self.beta));
        s.push_str(&format!("target_bpp={}\n", self.target_bpp));
        s.push_str(&format!("seed={}\n", self.seed));
        s.push_str(&format!("width={}\n", self.width));
        s.push_str(&format!("res_blocks={}\n", self.res_blocks));
        s.push_str(&format!("attention={}\n", self.attention));
        s.push_str(&format!("ctx_hidden={}\n", self.ctx_hidden));
        s.push_str(&format!("ctx_layers={}\n", self.ctx_layers));
        s.push_str(&format!("ctx_kernel={}\n", self.ctx_kernel));
        s
    }

    /// 64-bit digest over all fields, floats rounded to f32 first.
    pub fn digest(&self) -> u64 {
        let mut bytes = Vec::with_capacity(256);
        let put_int = |name: &str, v: u64, bytes: &mut Vec<u8>| {
            bytes.extend_from_slice(name.as_bytes());
            bytes.push(b'=');
            bytes.extend_from_slice(&v.to_le_bytes());
            bytes.push(b';');
        };
        let put_f = |name: &str, v: f64, bytes: &mut Vec<u8>| {
            bytes.extend_from_slice(name.as_bytes());
            bytes.push(b'=');
            bytes.extend_from_slice(&(v as f32).to_bits().to_le_bytes());
            bytes.push(b';');
        };
        put_int("c1", self.c1 as u64, &mut bytes);
        put_int("c2", self.c2 as u64, &mut bytes);
        put_int("l1", self.l1 as u64, &mut bytes);
        put_int("l2", self.l2 as u64, &mut bytes);
        put_f("sigma", self.sigma, &mut bytes);
        put_f("lambda1", self.lambda1, &mut bytes);
        put_f("lambda2", self.lambda2, &mut bytes);
        put_f("w1", self.w1, &mut bytes);
        put_f("w2", self.w2, &mut bytes);
        put_f("alpha", self.alpha, &mut bytes);
        put_f("beta", self.beta, &mut bytes);
        put_f("target_bpp", self.target_bpp, &mut bytes);
        put_int("seed", self.seed, &mut bytes);
        put_int("width", self.width as u64, &mut bytes);
        put_int("res_blocks", self.res_blocks as u64, &mut bytes);
        put_int("attention", self.attention as u64, &mut bytes);
        put_int("ctx_hidden", self.ctx_hidden as u64, &mut bytes);
        put_int("ctx_layers", self.ctx_layers as u64, &mut bytes);
        put_int("ctx_kernel", self.ctx_kernel as u64, &mut bytes);
        fnv1a64(&bytes)
    }
}

/// Training-loop knobs; rate/distortion weights live in [`CodecConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Learning rate multiplies by `lr_decay` every `lr_decay_every` epochs.
    pub lr_decay_every: usize,
    pub lr_decay: f64,
    /// Distortion mix: `mse_weight * mse + dpl_weight * dpl`.
    pub mse_weight: f64,
    pub dpl_weight: f64,
    /// Weight of the stage-2 reconstruction term.
    pub aux_weight: f64,
    /// Corpus URI: `synthetic:<count>` or a directory of PPMs.
    pub corpus: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 4e-3,
            batch_size: 30,
            epochs: 6,
            lr_decay_every: 2,
            lr_decay: 0.1,
            mse_weight: 0.9,
            dpl_weight: 0.1,
            aux_weight: 1.0,
            corpus: "synthetic:500".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::Config("lr_decay_every must be at least 1".into()));
        }
        if !(self.lr_decay.is_finite() && self.lr_decay > 0.0) {
            return Err(Error::Config("lr_decay must be positive".into()));
        }
        for (name, v) in [
            ("mse_weight", self.mse_weight),
            ("dpl_weight", self.dpl_weight),
            ("aux_weight", self.aux_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        fn int(key: &str, value: &str) -> Result<usize> {
            value.parse().map_err(|_| Error::Config(format!("{key}: expected integer, got {value:?}")))
        }
        fn float(key: &str, value: &str) -> Result<f64> {
            value.parse().map_err(|_| Error::Config(format!("{key}: expected number, got {value:?}")))
        }
        match key {
            "lr" => self.lr = float(key, value)?,
            "batch_size" => self.batch_size = int(key, value)?,
            "epochs" => self.epochs = int(key, value)?,
            "lr_decay_every" => self.lr_decay_every = int(key, value)?,
            "lr_decay" => self.lr_decay = float(key, value)?,
            "mse_weight" => self.mse_weight = float(key, value)?,
            "dpl_weight" => self.dpl_weight = float(key, value)?,
            "aux_weight" => self.aux_weight = float(key, value)?,
            "corpus" => self.corpus = value.to_string(),
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Parse line-oriented `key=value` text; `#` starts a comment, blank lines
/// are skipped. Later keys override earlier ones at the caller's level.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", lineno + 1)))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

/// Apply parsed pairs to a codec and a train config together, rejecting
/// keys neither recognizes.
pub fn apply_pairs(codec: &mut CodecConfig, train: &mut TrainConfig, pairs: &[(String, String)]) -> Result<()> {
    for (k, v) in pairs {
        if !codec.apply(k, v)? && !train.apply(k, v)? {
            return Err(Error::Config(format!("unknown config key {k:?}")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        CodecConfig::default().validate().unwrap();
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn kv_round_trip_reproduces_config_and_digest() {
        let mut c = CodecConfig::default();
        c.c1 = 20;
        c.target_bpp = 0.8;
        c.sigma = 1.5;
        c.attention = true;
        c.seed = 99;
        let text = c.to_kv();
        let mut c2 = CodecConfig::default();
        let mut t2 = TrainConfig::default();
        apply_pairs(&mut c2, &mut t2, &parse_kv(&text).unwrap()).unwrap();
        assert_eq!(c2, c);
        assert_eq!(c2.digest(), c.digest());
    }

    #[test]
    fn digest_changes_with_any_shaping_field() {
        let base = CodecConfig::default();
        let d0 = base.digest();
        for key in ["c1", "c2", "l1", "l2", "width", "ctx_hidden", "ctx_layers"] {
            let mut c = base.clone();
            c.apply(key, "9").unwrap();
            assert_ne!(c.digest(), d0, "digest must move when {key} changes");
        }
        let mut c = base.clone();
        c.apply("sigma", "2.25").unwrap();
        assert_ne!(c.digest(), d0);
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let pairs = parse_kv("# header\n\n  c1 = 8  # trailing\nlr=0.001\n").unwrap();
        assert_eq!(pairs, vec![("c1".into(), "8".into()), ("lr".into(), "0.001".into())]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut c = CodecConfig::default();
        let mut t = TrainConfig::default();
        let pairs = parse_kv("nonsense=1\n").unwrap();
        assert!(apply_pairs(&mut c, &mut t, &pairs).is_err());
    }

    #[test]
    fn weight_sum_is_enforced() {
        let mut c = CodecConfig::default();
        c.w1 = 0.6;
        c.w2 = 0.2;
        assert!(c.validate().is_err());
    }

    #[test]
    fn malformed_lines_are_reported_with_line_numbers() {
        let err = parse_kv("c1=8\noops\n").unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("line 2"), "got {msg}");
    }
}
