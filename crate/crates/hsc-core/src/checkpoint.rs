//! Model checkpoints: config plus named f32 tensors.
//!
//! Layout, all little-endian: magic `HSC1`, u16 version, u32 config length,
//! config key=value text, u32 tensor count, then per tensor u32 name length,
//! name, u32 rank, u32 dims, f32 values.
//!
//! Values are stored as f32 on purpose: the encoder and decoder must agree
//! on PMFs bit for bit, so both sides load parameters through the same
//! f32 rounding instead of trusting whatever f64 state training happened to
//! end in. Optimizer state is not persisted.

use crate::config::CodecConfig;
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use std::path::Path;

const MAGIC: &[u8; 4] = b"HSC1";
const VERSION: u16 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: CodecConfig,
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    /// Snapshot a parameter set, rounding every value through f32.
    pub fn from_params(config: &CodecConfig, ps: &ParamSet) -> Self {
        let tensors = ps
            .params
            .iter()
            .map(|p| {
                let rounded: Vec<f64> = p.value.iter().map(|&v| v as f32 as f64).collect();
                (p.name.clone(), p.shape.clone(), rounded)
            })
            .collect();
        Checkpoint { config: config.clone(), tensors }
    }

    /// Copy stored values into a freshly constructed parameter set. Every
    /// stored tensor must exist in `ps` and vice versa.
    pub fn apply_to(&self, ps: &mut ParamSet) -> Result<()> {
        if ps.len() != self.tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, model wants {}",
                self.tensors.len(),
                ps.len()
            )));
        }
        self.apply_subset_to(ps)
    }

    /// Set only the tensors this checkpoint carries, for sidecar files that
    /// hold a slice of a model (fitted metric weights).
    pub fn apply_subset_to(&self, ps: &mut ParamSet) -> Result<()> {
        for (name, _, value) in &self.tensors {
            ps.set_value(name, value)?;
        }
        Ok(())
    }

    pub fn write_bytes(&self) -> Vec<u8> {
        let cfg = self.config.to_kv();
        let mut out = Vec::with_capacity(64 + cfg.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, shape, value) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in value {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn read_bytes(data: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if data.len() < *pos + n {
                return Err(Error::Format("checkpoint truncated".into()));
            }
            let s = &data[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let u32_at = |pos: &mut usize| -> Result<u32> {
            Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
        };
        if take(&mut pos, 4)? != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let cfg_len = u32_at(&mut pos)? as usize;
        let cfg_text = std::str::from_utf8(take(&mut pos, cfg_len)?)
            .map_err(|_| Error::Format("checkpoint config is not UTF-8".into()))?;
        let mut config = CodecConfig::default();
        let mut scratch = crate::config::TrainConfig::default();
        crate::config::apply_pairs(&mut config, &mut scratch, &crate::config::parse_kv(cfg_text)?)?;
        config.validate()?;
        let count = u32_at(&mut pos)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u32_at(&mut pos)? as usize;
            let name = std::str::from_utf8(take(&mut pos, name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = u32_at(&mut pos)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32_at(&mut pos)? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = take(&mut pos, n * 4)?;
            let value: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            tensors.push((name, shape, value));
        }
        if pos != data.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint { config, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.write_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn sample_params() -> ParamSet {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut ps = ParamSet::new();
        ps.add("a.w", vec![2, 3], Init::HeUniform { fan_in: 3 }, &mut rng);
        ps.add("a.b", vec![2], Init::Const(0.5), &mut rng);
        ps.add("centers", vec![4], Init::Linspace { lo: -2.0, hi: 2.0 }, &mut rng);
        ps
    }

    #[test]
    fn round_trip_preserves_config_and_f32_values() {
        let mut cfg = CodecConfig::default();
        cfg.c1 = 7;
        cfg.target_bpp = 0.31;
        let ps = sample_params();
        let ck = Checkpoint::from_params(&cfg, &ps);
        let bytes = ck.write_bytes();
        let back = Checkpoint::read_bytes(&bytes).unwrap();
        assert_eq!(back.config, cfg);
        assert_eq!(back.config.digest(), cfg.digest());
        assert_eq!(back.tensors.len(), 3);
        for ((n0, s0, v0), (n1, s1, v1)) in ck.tensors.iter().zip(&back.tensors) {
            assert_eq!(n0, n1);
            assert_eq!(s0, s1);
            assert_eq!(v0, v1, "f32-rounded values must survive exactly");
        }
    }

    #[test]
    fn apply_to_restores_a_fresh_model() {
        let cfg = CodecConfig::default();
        let ps = sample_params();
        let ck = Checkpoint::from_params(&cfg, &ps);
        let mut fresh = sample_params();
        // perturb, then restore
        let perturbed: Vec<f64> = fresh.params[0].value.iter().map(|v| v + 1.0).collect();
        fresh.set_value("a.w", &perturbed).unwrap();
        ck.apply_to(&mut fresh).unwrap();
        for (p, (_, _, v)) in fresh.params.iter().zip(&ck.tensors) {
            assert_eq!(&p.value, v);
        }
    }

    #[test]
    fn serialization_is_deterministic() {
        let cfg = CodecConfig::default();
        let ps = sample_params();
        let a = Checkpoint::from_params(&cfg, &ps).write_bytes();
        let b = Checkpoint::from_params(&cfg, &ps).write_bytes();
        assert_eq!(a, b);
    }

    #[test]
    fn truncation_and_bad_magic_are_rejected() {
        let ck = Checkpoint::from_params(&CodecConfig::default(), &sample_params());
        let bytes = ck.write_bytes();
        for cut in [0, 3, 5, 9, bytes.len() - 1] {
            assert!(Checkpoint::read_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::read_bytes(&bad).is_err());
    }

    #[test]
    fn missing_tensor_name_fails_apply() {
        let ck = Checkpoint::from_params(&CodecConfig::default(), &sample_params());
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let mut other = ParamSet::new();
        other.add("a.w", vec![2, 3], Init::Const(0.0), &mut rng);
        other.add("a.b", vec![2], Init::Const(0.0), &mut rng);
        other.add("different", vec![4], Init::Const(0.0), &mut rng);
        assert!(ck.apply_to(&mut other).is_err());
    }
}
