//! Feature stream: per-channel frequency tables driving the range coder.
//!
//! Layout: `u32 LE symbol count | u32 LE CRC-32C of payload | payload`.
//! A symbol outside its channel range is sent as the escape symbol followed
//! by its 32-bit two's-complement value as two raw 16-bit words.

use super::factorized::FactorizedModel;
use super::range::{RangeDecoder, RangeEncoder, PRECISION};
use crate::error::{Error, Result};

const TOTAL: u32 = 1 << PRECISION;

/// Header size of a feature stream in bytes.
pub const FEATURE_HEADER_BYTES: usize = 8;

/// Quantized cumulative frequencies for one channel: symbols `lo..=hi`
/// followed by the escape symbol.
#[derive(Clone, Debug, PartialEq)]
pub struct CdfTable {
    lo: i32,
    hi: i32,
    cum: Vec<u32>,
}

impl CdfTable {
    pub fn from_model(model: &FactorizedModel, c: usize) -> CdfTable {
        let (lo, hi) = model.ranges()[c];
        let n = (hi - lo + 1) as usize;
        let mut probs: Vec<f64> = (lo..=hi).map(|k| model.pmf(c, k as f64)).collect();
        let inside: f64 = probs.iter().sum();
        probs.push((1.0 - inside).max(0.0));
        let budget = TOTAL as usize - (n + 1);
        let mut freq: Vec<u32> = probs.iter().map(|p| 1 + (p * budget as f64).floor() as u32).collect();
        let used: u32 = freq.iter().sum();
        let peak = (0..freq.len()).max_by(|&a, &b| probs[a].total_cmp(&probs[b]).then(b.cmp(&a))).unwrap();
        freq[peak] += TOTAL - used;
        let mut cum = Vec::with_capacity(freq.len() + 1);
        let mut acc = 0;
        cum.push(0);
        for f in freq {
            acc += f;
            cum.push(acc);
        }
        debug_assert_eq!(acc, TOTAL);
        CdfTable { lo, hi, cum }
    }

    fn escape(&self) -> usize {
        (self.hi - self.lo + 1) as usize
    }

    /// Table slot of `v` (escape slot when out of range).
    fn slot(&self, v: i32) -> usize {
        if v < self.lo || v > self.hi {
            self.escape()
        } else {
            (v - self.lo) as usize
        }
    }

    fn find(&self, target: u32) -> usize {
        self.cum.partition_point(|&c| c <= target) - 1
    }

    /// Coding cost of `v` in bits under the quantized table, excluding any
    /// escape payload.
    pub fn cost_bits(&self, v: i32) -> f64 {
        let s = self.slot(v);
        (TOTAL as f64 / (self.cum[s + 1] - self.cum[s]) as f64).log2()
    }

    pub fn total(&self) -> u32 {
        *self.cum.last().unwrap()
    }

    pub fn frequencies(&self) -> Vec<u32> {
        self.cum.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

pub fn build_tables(model: &FactorizedModel) -> Vec<CdfTable> {
    (0..model.channels()).map(|c| CdfTable::from_model(model, c)).collect()
}

/// Encodes integer symbols laid out row-major with `model.channels()` columns.
pub fn encode_features(symbols: &[i32], model: &FactorizedModel) -> Result<Vec<u8>> {
    let ch = model.channels();
    if ch == 0 || !symbols.len().is_multiple_of(ch) {
        return Err(Error::Contract(format!(
            "{} symbols do not fill rows of {} channels",
            symbols.len(),
            ch
        )));
    }
    let count = u32::try_from(symbols.len()).map_err(|_| Error::Contract("too many symbols".into()))?;
    let tables = build_tables(model);
    let mut enc = RangeEncoder::new();
    for (i, &v) in symbols.iter().enumerate() {
        let t = &tables[i % ch];
        let s = t.slot(v);
        enc.encode(t.cum[s], t.cum[s + 1] - t.cum[s], PRECISION);
        if s == t.escape() {
            let raw = v as u32;
            enc.encode_bits(raw >> 16, 16);
            enc.encode_bits(raw & 0xffff, 16);
        }
    }
    let payload = enc.finish();
    let mut out = Vec::with_capacity(FEATURE_HEADER_BYTES + payload.len());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&crc32c::crc32c(&payload).to_le_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Inverse of [`encode_features`]; `count` rows of `channels` symbols.
pub fn decode_features(bytes: &[u8], model: &FactorizedModel, count: usize, channels: usize) -> Result<Vec<i32>> {
    if channels != model.channels() {
        return Err(Error::Decode(format!(
            "stream has {} channels, model has {}",
            channels,
            model.channels()
        )));
    }
    if bytes.len() < FEATURE_HEADER_BYTES {
        return Err(Error::Decode("feature stream shorter than its header".into()));
    }
    let stored = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let crc = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let payload = &bytes[FEATURE_HEADER_BYTES..];
    if crc32c::crc32c(payload) != crc {
        return Err(Error::Decode("feature stream checksum mismatch".into()));
    }
    let expected = count
        .checked_mul(channels)
        .ok_or_else(|| Error::Decode("symbol count overflow".into()))?;
    if stored != expected {
        return Err(Error::Decode(format!(
            "feature stream holds {stored} symbols, expected {expected}"
        )));
    }
    let tables = build_tables(model);
    let mut dec = RangeDecoder::new(payload);
    let mut out = Vec::with_capacity(expected);
    for i in 0..expected {
        let t = &tables[i % channels];
        let target = dec.peek(PRECISION);
        let s = t.find(target);
        dec.consume(t.cum[s], t.cum[s + 1] - t.cum[s]);
        let v = if s == t.escape() {
            let hi = dec.decode_bits(16);
            let lo = dec.decode_bits(16);
            ((hi << 16) | lo) as i32
        } else {
            t.lo + s as i32
        };
        out.push(v);
        if dec.overrun() > 8 {
            return Err(Error::Decode("feature stream truncated".into()));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_stream_is_header_only() {
        let m = FactorizedModel::new(3, 10.0, 0);
        let bytes = encode_features(&[], &m).unwrap();
        assert_eq!(bytes.len(), FEATURE_HEADER_BYTES);
        assert!(decode_features(&bytes, &m, 0, 3).unwrap().is_empty());
    }

    #[test]
    fn tables_are_strict_and_full() {
        let m = FactorizedModel::new(2, 2.0, 3);
        for t in build_tables(&m) {
            assert_eq!(t.total(), TOTAL);
            assert!(t.frequencies().iter().all(|&f| f >= 1));
        }
    }

    #[test]
    fn escapes_round_trip() {
        let m = FactorizedModel::new(2, 1.0, 3);
        let syms = vec![0, 1, i32::MAX, i32::MIN, -40_000, 3, 7, -2];
        let bytes = encode_features(&syms, &m).unwrap();
        assert_eq!(decode_features(&bytes, &m, 4, 2).unwrap(), syms);
    }

    #[test]
    fn corruption_is_detected() {
        let m = FactorizedModel::new(2, 5.0, 3);
        let syms: Vec<i32> = (0..200).map(|i| (i % 9) - 4).collect();
        let mut bytes = encode_features(&syms, &m).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        assert!(matches!(decode_features(&bytes, &m, 100, 2), Err(Error::Decode(_))));
        assert!(decode_features(&bytes[..5], &m, 100, 2).is_err());
    }

    #[test]
    fn shannon_bound_on_model_samples() {
        let m = FactorizedModel::new(4, 3.0, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let syms: Vec<i32> = (0..20_000).map(|i| m.sample(i % 4, &mut rng)).collect();
        let y: Vec<f64> = syms.iter().map(|&v| v as f64).collect();
        let shannon = m.bits(&y, None);
        let bytes = encode_features(&syms, &m).unwrap();
        let bits = bytes.len() as f64 * 8.0;
        assert!(bits <= shannon * 1.01 + 64.0, "{bits} vs {shannon}");
        assert_eq!(decode_features(&bytes, &m, 5000, 4).unwrap(), syms);
    }

    proptest! {
        #[test]
        fn random_symbols_round_trip(syms in proptest::collection::vec(-300i32..300, 0..300)) {
            let m = FactorizedModel::new(3, 8.0, 1);
            let n = syms.len() / 3 * 3;
            let syms = &syms[..n];
            let bytes = encode_features(syms, &m).unwrap();
            prop_assert_eq!(decode_features(&bytes, &m, n / 3, 3).unwrap(), syms.to_vec());
        }
    }
}
