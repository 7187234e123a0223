//! Byte-oriented range coder and coded-payload framing.
//!
//! Carry handling follows the classic scheme: the encoder keeps a pending
//! byte plus a run of 0xFF bytes that a late carry may still increment, and
//! starts with one phantom pending byte that is dropped from the output. The
//! final interval always has width at least 2^24, so the flush can pick a
//! multiple of 2^24 inside it; its three low bytes are zero and trailing
//! zero bytes are trimmed (the decoder refills zeros past the end). Total
//! termination overhead stays within a few bytes of the entropy.
//!
//! Probabilities enter as 16-bit frequency tables summing to exactly 65536,
//! built by largest-remainder rounding with a minimum count of 1. Encoder
//! and decoder must build their tables from bit-identical PMFs; the tables,
//! not the floats, are the coding contract.

use crate::context::{ContextModel, SequentialEvaluator};
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::quant::Codebook;

pub const FREQ_TOTAL: u32 = 1 << 16;
const TOP: u32 = 1 << 24;

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder { low: 0, range: u32::MAX, cache: 0, cache_size: 1, out: Vec::new() }
    }

    fn shift_low(&mut self) {
        let carry = (self.low >> 32) as u8;
        if self.low < 0xFF00_0000 || carry == 1 {
            let mut pending = self.cache;
            loop {
                self.out.push(pending.wrapping_add(carry));
                pending = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low << 8) & 0xFFFF_FFFF;
    }

    /// Narrow the interval to `[cum, cum+freq) / 65536`.
    pub fn encode(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum + freq <= FREQ_TOTAL);
        let r = self.range >> 16;
        self.low += r as u64 * cum as u64;
        self.range = r * freq;
        while self.range < TOP {
            self.shift_low();
            self.range <<= 8;
        }
    }

    /// Terminate the stream. Returns the coded bytes, trailing zeros trimmed.
    pub fn finish(mut self) -> Vec<u8> {
        // smallest multiple of 2^24 at or above low; in [low, low+range)
        // because range >= 2^24 after normalization
        let v = (self.low + (TOP as u64 - 1)) & !((TOP as u64) - 1);
        self.low = v;
        for _ in 0..5 {
            self.shift_low();
        }
        let mut out = self.out;
        out.remove(0); // phantom first byte, always zero
        while out.last() == Some(&0) {
            out.pop();
        }
        out
    }
}

pub struct RangeDecoder<'a> {
    range: u32,
    code: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Self {
        let mut d = RangeDecoder { range: u32::MAX, code: 0, input, pos: 0 };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.input.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// Cumulative-frequency target of the next symbol, in `[0, 65536)`.
    pub fn decode_target(&mut self) -> u32 {
        let r = self.range >> 16;
        (self.code / r).min(FREQ_TOTAL - 1)
    }

    /// Consume the symbol spanning `[cum, cum+freq)`.
    pub fn advance(&mut self, cum: u32, freq: u32) {
        let r = self.range >> 16;
        // wrapping: corrupted streams may underflow here and get caught by
        // the payload checksum instead of aborting
        self.code = self.code.wrapping_sub(r * cum);
        self.range = r * freq;
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte() as u32;
            self.range <<= 8;
        }
    }
}

/// Quantize a PMF to integer frequencies summing to exactly 65536, every
/// entry at least 1. Largest-remainder rounding, ties to the lower index.
pub fn quantize_pmf(pmf: &[f64]) -> Result<Vec<u32>> {
    let l = pmf.len();
    if l < 2 {
        return Err(Error::Numerical("pmf needs at least 2 symbols".into()));
    }
    if l as u32 > FREQ_TOTAL {
        return Err(Error::Numerical(format!("pmf with {l} symbols cannot get 1 count each")));
    }
    if pmf.iter().any(|&p| !p.is_finite() || p < 0.0) {
        return Err(Error::Numerical("pmf entries must be finite and non-negative".into()));
    }
    let mut freqs = vec![0u32; l];
    let mut rems = vec![0.0f64; l];
    let mut sum = 0u64;
    for i in 0..l {
        let scaled = pmf[i] * FREQ_TOTAL as f64;
        let f = (scaled.floor() as u32).max(1);
        rems[i] = scaled - scaled.floor();
        freqs[i] = f;
        sum += f as u64;
    }
    if sum < FREQ_TOTAL as u64 {
        let mut order: Vec<usize> = (0..l).collect();
        order.sort_by(|&a, &b| rems[b].partial_cmp(&rems[a]).unwrap().then(a.cmp(&b)));
        let mut deficit = FREQ_TOTAL as u64 - sum;
        let mut i = 0;
        while deficit > 0 {
            freqs[order[i % l]] += 1;
            deficit -= 1;
            i += 1;
        }
    } else if sum > FREQ_TOTAL as u64 {
        let mut excess = sum - FREQ_TOTAL as u64;
        while excess > 0 {
            let (idx, _) = freqs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .expect("non-empty");
            if freqs[idx] <= 1 {
                return Err(Error::Numerical("pmf too degenerate to quantize".into()));
            }
            let take = (freqs[idx] - 1).min(excess as u32);
            freqs[idx] -= take;
            excess -= take as u64;
        }
    }
    debug_assert_eq!(freqs.iter().map(|&f| f as u64).sum::<u64>(), FREQ_TOTAL as u64);
    Ok(freqs)
}

/// Cumulative table: `cum[s]..cum[s+1]` spans symbol `s`; `cum[L] == 65536`.
pub fn cumulative(freqs: &[u32]) -> Vec<u32> {
    let mut cum = Vec::with_capacity(freqs.len() + 1);
    let mut acc = 0u32;
    cum.push(0);
    for &f in freqs {
        acc += f;
        cum.push(acc);
    }
    cum
}

pub fn fnv1a32(data: &[u8]) -> u32 {
    let mut h = 0x811C_9DC5u32;
    for &b in data {
        h ^= b as u32;
        h = h.wrapping_mul(0x0100_0193);
    }
    h
}

pub fn symbols_checksum(symbols: &[u32]) -> u32 {
    let mut bytes = Vec::with_capacity(symbols.len() * 4);
    for &s in symbols {
        bytes.extend_from_slice(&s.to_le_bytes());
    }
    fnv1a32(&bytes)
}

/// One coded symbol grid plus framing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodedPayload {
    pub symbol_count: u64,
    /// Exact bit length of `body` (its byte length is `ceil(bits/8)`).
    pub declared_bits: u64,
    pub body: Vec<u8>,
    pub checksum: u32,
}

impl CodedPayload {
    pub fn from_body(symbol_count: u64, body: Vec<u8>, checksum: u32) -> Self {
        let declared_bits = match body.last() {
            Some(&last) => body.len() as u64 * 8 - last.trailing_zeros() as u64,
            None => 0,
        };
        CodedPayload { symbol_count, declared_bits, body, checksum }
    }

    pub fn serialize(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.symbol_count.to_le_bytes());
        out.extend_from_slice(&self.declared_bits.to_le_bytes());
        out.extend_from_slice(&self.body);
        out.extend_from_slice(&self.checksum.to_le_bytes());
    }

    /// Parse one payload from the front of `data`; returns it and the bytes
    /// consumed.
    pub fn deserialize(data: &[u8]) -> Result<(Self, usize)> {
        let need = |n: usize, at: usize| -> Result<()> {
            if data.len() < at + n {
                Err(Error::Format("payload truncated".into()))
            } else {
                Ok(())
            }
        };
        need(16, 0)?;
        let symbol_count = u64::from_le_bytes(data[0..8].try_into().unwrap());
        let declared_bits = u64::from_le_bytes(data[8..16].try_into().unwrap());
        let body_len = declared_bits.div_ceil(8) as usize;
        need(body_len + 4, 16)?;
        let body = data[16..16 + body_len].to_vec();
        if let Some(&last) = body.last() {
            let pad = body.len() as u64 * 8 - declared_bits;
            if pad >= 8 || (pad > 0 && last.trailing_zeros() < pad as u32) || last == 0 {
                return Err(Error::Format("payload bit length inconsistent with body".into()));
            }
        }
        let at = 16 + body_len;
        let checksum = u32::from_le_bytes(data[at..at + 4].try_into().unwrap());
        Ok((CodedPayload { symbol_count, declared_bits, body, checksum }, at + 4))
    }
}

/// Encode a symbol grid under a context model.
///
/// PMFs come from one teacher-forced pass over the full grid, which equals
/// sequential evaluation site for site, so the decoder reconstructs the very
/// same frequency tables without ever seeing the symbols.
pub fn encode_grid(
    model: &ContextModel,
    params: &ParamSet,
    indices: &[u32],
    codebook: &Codebook,
    grid: (usize, usize, usize),
    cond: Option<&[f64]>,
) -> Result<CodedPayload> {
    encode_grid_with_bits(model, params, indices, codebook, grid, cond).map(|(p, _)| p)
}

/// Like [`encode_grid`], also reporting each site's cost in bits under the
/// quantized PMFs; the payload length is within a small constant of their sum.
pub fn encode_grid_with_bits(
    model: &ContextModel,
    params: &ParamSet,
    indices: &[u32],
    codebook: &Codebook,
    grid: (usize, usize, usize),
    cond: Option<&[f64]>,
) -> Result<(CodedPayload, Vec<f64>)> {
    let (d, h, w) = grid;
    let n = d * h * w;
    if indices.len() != n {
        return Err(Error::shape(&[n], &[indices.len()], "encode symbol count"));
    }
    if model.levels != codebook.levels() {
        return Err(Error::shape(&[model.levels], &[codebook.levels()], "model vs codebook levels"));
    }
    let checksum = symbols_checksum(indices);
    if n == 0 {
        return Ok((CodedPayload::from_body(0, Vec::new(), checksum), Vec::new()));
    }
    let values = codebook.dequantize(indices)?;
    let pmfs = model.predict_pmfs(params, &values, grid, cond)?;
    let mut enc = RangeEncoder::new();
    let mut site_bits = Vec::with_capacity(n);
    for (site, &sym) in indices.iter().enumerate() {
        if sym as usize >= model.levels {
            return Err(Error::Format(format!("symbol {sym} out of range at site {site}")));
        }
        let freqs = quantize_pmf(pmfs.pmf(site))?;
        let cum = cumulative(&freqs);
        enc.encode(cum[sym as usize], freqs[sym as usize]);
        site_bits.push(-((freqs[sym as usize] as f64) / FREQ_TOTAL as f64).log2());
    }
    Ok((CodedPayload::from_body(n as u64, enc.finish(), checksum), site_bits))
}

/// Decode a payload back into symbol indices.
///
/// Runs the context model one site at a time, never touching the encoder's
/// symbols; the trailing checksum catches corrupted or mismatched streams.
pub fn decode_grid(
    payload: &CodedPayload,
    model: &ContextModel,
    params: &ParamSet,
    codebook: &Codebook,
    grid: (usize, usize, usize),
    cond: Option<&[f64]>,
) -> Result<Vec<u32>> {
    let (d, h, w) = grid;
    let n = d * h * w;
    if payload.symbol_count != n as u64 {
        return Err(Error::Format(format!(
            "payload holds {} symbols, grid wants {n}",
            payload.symbol_count
        )));
    }
    if model.levels != codebook.levels() {
        return Err(Error::shape(&[model.levels], &[codebook.levels()], "model vs codebook levels"));
    }
    let mut out = Vec::with_capacity(n);
    if n > 0 {
        let centers = &codebook.centers;
        let mut seq = SequentialEvaluator::new(model, params, grid, cond)?;
        let mut dec = RangeDecoder::new(&payload.body);
        for site in 0..n {
            let pmf = seq.pmf_at(site);
            let freqs = quantize_pmf(&pmf)?;
            let cum = cumulative(&freqs);
            let target = dec.decode_target();
            let mut sym = model.levels - 1;
            for s in 0..model.levels {
                if target < cum[s + 1] {
                    sym = s;
                    break;
                }
            }
            dec.advance(cum[sym], freqs[sym]);
            seq.write_symbol(site, centers[sym]);
            out.push(sym as u32);
        }
    }
    let computed = symbols_checksum(&out);
    if computed != payload.checksum {
        return Err(Error::ChecksumMismatch { stored: payload.checksum, computed });
    }
    Ok(out)
}

/// Ideal code length in bits under the quantized frequency tables.
pub fn ideal_bits(pmfs: &crate::context::PmfGrid, indices: &[u32]) -> Result<f64> {
    let mut bits = 0.0;
    for (site, &sym) in indices.iter().enumerate() {
        let freqs = quantize_pmf(pmfs.pmf(site))?;
        bits -= (freqs[sym as usize] as f64 / FREQ_TOTAL as f64).log2();
    }
    Ok(bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::ContextModel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn raw_roundtrip(freq_tables: &[Vec<u32>], symbols: &[usize]) -> (Vec<u8>, Vec<usize>) {
        let mut enc = RangeEncoder::new();
        for (t, &s) in freq_tables.iter().zip(symbols) {
            let cum = cumulative(t);
            enc.encode(cum[s], t[s]);
        }
        let body = enc.finish();
        let mut dec = RangeDecoder::new(&body);
        let mut out = Vec::new();
        for t in freq_tables {
            let cum = cumulative(t);
            let target = dec.decode_target();
            let mut sym = t.len() - 1;
            for s in 0..t.len() {
                if target < cum[s + 1] {
                    sym = s;
                    break;
                }
            }
            dec.advance(cum[sym], t[sym]);
            out.push(sym);
        }
        (body, out)
    }

    #[test]
    fn raw_coder_round_trips_random_tables() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for trial in 0..200 {
            let n = rng.gen_range(1..400);
            let l = rng.gen_range(2..17usize);
            let mut tables = Vec::with_capacity(n);
            let mut symbols = Vec::with_capacity(n);
            for _ in 0..n {
                let mut pmf: Vec<f64> = (0..l).map(|_| rng.gen_range(0.01..1.0)).collect();
                let s: f64 = pmf.iter().sum();
                for p in pmf.iter_mut() {
                    *p /= s;
                }
                tables.push(quantize_pmf(&pmf).unwrap());
                symbols.push(rng.gen_range(0..l));
            }
            let (_, decoded) = raw_roundtrip(&tables, &symbols);
            assert_eq!(decoded, symbols, "trial {trial}");
        }
    }

    #[test]
    fn uniform_four_symbols_cost_two_bits_each() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let n = 300;
        let table = vec![16384u32; 4];
        let tables: Vec<Vec<u32>> = (0..n).map(|_| table.clone()).collect();
        let symbols: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
        let (body, decoded) = raw_roundtrip(&tables, &symbols);
        assert_eq!(decoded, symbols);
        let bits = body.len() * 8;
        assert!(bits >= 2 * n - 7, "body {bits} bits for {n} symbols"); // last-byte trim
        assert!(bits <= 2 * n + 32, "body {bits} bits for {n} symbols");
    }

    #[test]
    fn near_certain_symbol_costs_almost_nothing() {
        let mut pmf = vec![1.0 / FREQ_TOTAL as f64; 2];
        pmf[1] = 1.0 - pmf[0];
        let table = quantize_pmf(&pmf).unwrap();
        assert_eq!(table, vec![1, 65535]);
        let (body, decoded) = raw_roundtrip(&[table], &[1]);
        assert_eq!(decoded, vec![1]);
        assert!(body.len() * 8 <= 32, "unexpected {} bytes", body.len());
    }

    #[test]
    fn carry_propagation_survives_adversarial_tables() {
        // skewed two-symbol tables drive long 0xFF cache runs
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        for trial in 0..50 {
            let n = rng.gen_range(200..600);
            let table = vec![65535u32, 1];
            let mut tables = Vec::new();
            let mut symbols = Vec::new();
            for _ in 0..n {
                tables.push(table.clone());
                // mostly the huge symbol, occasionally the tiny one
                symbols.push(if rng.gen_range(0..50) == 0 { 1 } else { 0 });
            }
            let (_, decoded) = raw_roundtrip(&tables, &symbols);
            assert_eq!(decoded, symbols, "trial {trial}");
        }
    }

    #[test]
    fn quantized_frequencies_sum_and_respect_minimum() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        for _ in 0..500 {
            let l = rng.gen_range(2..33usize);
            let mut pmf: Vec<f64> = (0..l).map(|_| rng.gen_range(0.0..1.0f64).powi(4)).collect();
            let s: f64 = pmf.iter().sum();
            for p in pmf.iter_mut() {
                *p /= s.max(1e-300);
            }
            let f = quantize_pmf(&pmf).unwrap();
            assert_eq!(f.iter().map(|&x| x as u64).sum::<u64>(), FREQ_TOTAL as u64);
            assert!(f.iter().all(|&x| x >= 1));
        }
    }

    #[test]
    fn quantization_is_order_preserving_enough() {
        let pmf = vec![0.7, 0.2, 0.1];
        let f = quantize_pmf(&pmf).unwrap();
        assert!(f[0] > f[1] && f[1] > f[2]);
        assert_eq!(f.iter().sum::<u32>(), FREQ_TOTAL);
    }

    #[test]
    fn payload_serialization_round_trips() {
        let p = CodedPayload::from_body(7, vec![0x12, 0x34, 0x80], 0xDEADBEEF);
        assert_eq!(p.declared_bits, 17);
        let mut buf = vec![0xAAu8; 3]; // leading junk the parser never sees
        let start = buf.len();
        p.serialize(&mut buf);
        let (q, used) = CodedPayload::deserialize(&buf[start..]).unwrap();
        assert_eq!(q, p);
        assert_eq!(used, buf.len() - start);
    }

    #[test]
    fn truncated_payload_is_an_error_not_a_panic() {
        let p = CodedPayload::from_body(3, vec![0xAB, 0xCD], 123);
        let mut buf = Vec::new();
        p.serialize(&mut buf);
        for cut in 0..buf.len() {
            assert!(CodedPayload::deserialize(&buf[..cut]).is_err(), "cut at {cut} must fail");
        }
    }

    fn test_model(levels: usize, cond: usize, seed: u64) -> (ContextModel, ParamSet) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let m = ContextModel::new(&mut ps, &mut rng, "ctx", levels, 8, 3, cond, 3).unwrap();
        // zero head would make every PMF uniform; randomize for realism
        let head = format!("ctx.w{}", m.layers() - 1);
        for p in ps.params.iter_mut() {
            if p.name == head {
                for v in p.value.iter_mut() {
                    *v = rng.gen_range(-0.4..0.4);
                }
            }
        }
        (m, ps)
    }

    #[test]
    fn grid_round_trip_with_and_without_conditioning() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        for trial in 0..30 {
            let cond_c = if trial % 2 == 0 { 0 } else { 2 };
            let levels = [2, 6, 16][trial % 3];
            let (m, ps) = test_model(levels, cond_c, 100 + trial as u64);
            let cb = Codebook::evenly_spaced(levels, 1.0).unwrap();
            let d = rng.gen_range(1..4);
            let h = rng.gen_range(1..5);
            let w = rng.gen_range(1..5);
            let n = d * h * w;
            let indices: Vec<u32> = (0..n).map(|_| rng.gen_range(0..levels) as u32).collect();
            let cond: Option<Vec<f64>> = if cond_c > 0 {
                Some((0..cond_c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())
            } else {
                None
            };
            let payload = encode_grid(&m, &ps, &indices, &cb, (d, h, w), cond.as_deref()).unwrap();
            let decoded = decode_grid(&payload, &m, &ps, &cb, (d, h, w), cond.as_deref()).unwrap();
            assert_eq!(decoded, indices, "trial {trial}");
        }
    }

    #[test]
    fn empty_grid_codes_to_header_only() {
        let (m, ps) = test_model(6, 0, 3);
        let cb = Codebook::evenly_spaced(6, 1.0).unwrap();
        let payload = encode_grid(&m, &ps, &[], &cb, (0, 4, 4), None).unwrap();
        assert_eq!(payload.symbol_count, 0);
        assert_eq!(payload.declared_bits, 0);
        assert!(payload.body.is_empty());
        let decoded = decode_grid(&payload, &m, &ps, &cb, (0, 4, 4), None).unwrap();
        assert!(decoded.is_empty());
    }

    #[test]
    fn corrupted_body_reports_checksum_mismatch() {
        let mut rng = ChaCha12Rng::seed_from_u64(33);
        let (m, ps) = test_model(6, 0, 8);
        let cb = Codebook::evenly_spaced(6, 1.0).unwrap();
        let grid = (2, 3, 3);
        let indices: Vec<u32> = (0..18).map(|_| rng.gen_range(0..6) as u32).collect();
        let payload = encode_grid(&m, &ps, &indices, &cb, grid, None).unwrap();
        let mut bad = payload.clone();
        assert!(!bad.body.is_empty());
        bad.body[0] ^= 0x40;
        match decode_grid(&bad, &m, &ps, &cb, grid, None) {
            Err(Error::ChecksumMismatch { .. }) => {}
            other => panic!("expected checksum mismatch, got {other:?}"),
        }
    }

    #[test]
    fn measured_bits_stay_close_to_ideal() {
        let mut rng = ChaCha12Rng::seed_from_u64(55);
        for trial in 0..10 {
            let (m, ps) = test_model(6, 0, 200 + trial);
            let cb = Codebook::evenly_spaced(6, 1.0).unwrap();
            let grid = (4, 6, 6);
            let n = 144;
            let indices: Vec<u32> = (0..n).map(|_| rng.gen_range(0..6) as u32).collect();
            let values = cb.dequantize(&indices).unwrap();
            let pmfs = m.predict_pmfs(&ps, &values, grid, None).unwrap();
            let ideal = ideal_bits(&pmfs, &indices).unwrap();
            let payload = encode_grid(&m, &ps, &indices, &cb, grid, None).unwrap();
            let measured = payload.declared_bits as f64;
            assert!(
                measured - ideal <= 32.0,
                "trial {trial}: measured {measured} ideal {ideal}"
            );
        }
    }
}
