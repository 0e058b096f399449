//! Container format.
//!
//! ```text
//! "PGPC" | u8 version | u8 precision | u8 scales | u32 model id
//! | u32 config digest | u64 seed | u8 prior flag | varint aligned samples
//! | varint N^0 .. N^L
//! then three substreams (parameters, coordinates, residual features),
//! each: varint length | bytes | u32 CRC-32C of the bytes
//! ```
//!
//! Integers are little endian; varints are unsigned LEB128.

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PGPC";
pub const VERSION: u8 = 1;
/// Bytes of a substream's trailing checksum.
const CRC_BYTES: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub precision: u8,
    pub scales: u8,
    pub model_id: u32,
    pub config_digest: u32,
    pub seed: u64,
    pub prior: bool,
    /// Number of surface samples drawn on the prior mesh.
    pub aligned_samples: u64,
    /// Occupied-voxel counts `N^0..=N^L`.
    pub counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub header: Header,
    pub params: Vec<u8>,
    pub coords: Vec<u8>,
    pub features: Vec<u8>,
}

fn varint(out: &mut Vec<u8>, v: u64) {
    leb128::write::unsigned(out, v).expect("writing to a vector cannot fail");
}

fn varint_len(v: u64) -> usize {
    let mut out = Vec::new();
    varint(&mut out, v);
    out.len()
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::at_byte(self.bytes.len(), format!("stream ends inside {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn varint(&mut self, what: &str) -> Result<u64> {
        let start = self.pos;
        let mut rest = &self.bytes[self.pos..];
        let before = rest.len();
        let v = leb128::read::unsigned(&mut rest).map_err(|_| Error::at_byte(start, format!("bad varint in {what}")))?;
        self.pos += before - rest.len();
        Ok(v)
    }

    fn substream(&mut self, what: &str) -> Result<Vec<u8>> {
        let start = self.pos;
        let len = self.varint(what)?;
        let len = usize::try_from(len)
            .ok()
            .filter(|&l| l <= self.bytes.len())
            .ok_or_else(|| Error::at_byte(start, format!("{what} length {len} exceeds the stream")))?;
        let data = self.take(len, what)?.to_vec();
        let crc = self.u32(what)?;
        if crc32c::crc32c(&data) != crc {
            return Err(Error::Decode(format!("{what} checksum mismatch")));
        }
        Ok(data)
    }
}

impl Header {
    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.precision);
        out.push(self.scales);
        out.extend_from_slice(&self.model_id.to_le_bytes());
        out.extend_from_slice(&self.config_digest.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.push(self.prior as u8);
        varint(out, self.aligned_samples);
        for &n in &self.counts {
            varint(out, n);
        }
    }

    /// Size of the header in bytes.
    pub fn len(&self) -> usize {
        let mut out = Vec::new();
        self.write(&mut out);
        out.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl Bitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.header.write(&mut out);
        for s in [&self.params, &self.coords, &self.features] {
            varint(&mut out, s.len() as u64);
            out.extend_from_slice(s);
            out.extend_from_slice(&crc32c::crc32c(s).to_le_bytes());
        }
        out
    }

    /// Parses a container. Never panics; any malformed input is an error.
    pub fn parse(bytes: &[u8]) -> Result<Bitstream> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(4, "magic")? != MAGIC {
            return Err(Error::Decode("not a PGPC bitstream".into()));
        }
        let version = c.u8("header")?;
        if version != VERSION {
            return Err(Error::Decode(format!("unsupported bitstream version {version}")));
        }
        let precision = c.u8("header")?;
        if !(1..=16).contains(&precision) {
            return Err(Error::Decode(format!("precision {precision} out of range")));
        }
        let scales = c.u8("header")?;
        if scales == 0 || scales > 8 {
            return Err(Error::Decode(format!("scale count {scales} out of range")));
        }
        let model_id = c.u32("header")?;
        let config_digest = c.u32("header")?;
        let seed = u64::from_le_bytes(c.take(8, "header")?.try_into().unwrap());
        let prior = match c.u8("header")? {
            0 => false,
            1 => true,
            f => return Err(Error::Decode(format!("bad prior flag {f}"))),
        };
        let aligned_samples = c.varint("header")?;
        let counts = (0..=scales)
            .map(|_| c.varint("header"))
            .collect::<Result<Vec<_>>>()?;
        let header = Header {
            precision,
            scales,
            model_id,
            config_digest,
            seed,
            prior,
            aligned_samples,
            counts,
        };
        let params = c.substream("parameter substream")?;
        let coords = c.substream("coordinate substream")?;
        let features = c.substream("feature substream")?;
        if c.pos != bytes.len() {
            return Err(Error::at_byte(c.pos, "trailing bytes after the last substream"));
        }
        Ok(Bitstream {
            header,
            params,
            coords,
            features,
        })
    }

    /// Bytes spent on substream length prefixes and checksums.
    pub fn framing_bytes(&self) -> usize {
        [&self.params, &self.coords, &self.features]
            .iter()
            .map(|s| varint_len(s.len() as u64) + CRC_BYTES)
            .sum()
    }

    pub fn len(&self) -> usize {
        self.header.len() + self.framing_bytes() + self.params.len() + self.coords.len() + self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Bit accounting of a bitstream.
#[derive(Clone, Debug, PartialEq)]
pub struct Composition {
    pub total_bits: u64,
    pub header_bits: u64,
    pub framing_bits: u64,
    pub param_bits: u64,
    pub coord_bits: u64,
    pub feature_bits: u64,
    /// Percentages of the three substreams within their sum.
    pub param_share: f64,
    pub coord_share: f64,
    pub feature_share: f64,
    pub points: u64,
    /// Total bits over `N^0`.
    pub bpp: f64,
}

pub fn bitstream_report(bs: &Bitstream) -> Composition {
    let bits = |n: usize| 8 * n as u64;
    let (p, c, f) = (bits(bs.params.len()), bits(bs.coords.len()), bits(bs.features.len()));
    let payload = (p + c + f).max(1) as f64;
    let total = bits(bs.len());
    let points = bs.header.counts.first().copied().unwrap_or(0);
    Composition {
        total_bits: total,
        header_bits: bits(bs.header.len()),
        framing_bits: bits(bs.framing_bytes()),
        param_bits: p,
        coord_bits: c,
        feature_bits: f,
        param_share: 100.0 * p as f64 / payload,
        coord_share: 100.0 * c as f64 / payload,
        feature_share: 100.0 * f as f64 / payload,
        points,
        bpp: if points == 0 { 0.0 } else { total as f64 / points as f64 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Bitstream {
        Bitstream {
            header: Header {
                precision: 7,
                scales: 3,
                model_id: 0xdead_beef,
                config_digest: 42,
                seed: 9,
                prior: true,
                aligned_samples: 300,
                counts: vec![1000, 300, 80, 20],
            },
            params: vec![1; 176],
            coords: vec![2, 3, 4],
            features: vec![5; 40],
        }
    }

    #[test]
    fn round_trip_and_accounting() {
        let bs = sample();
        let bytes = bs.to_bytes();
        assert_eq!(Bitstream::parse(&bytes).unwrap(), bs);
        assert_eq!(bs.len(), bytes.len());
        let r = bitstream_report(&bs);
        assert_eq!(
            r.header_bits + r.framing_bits + r.param_bits + r.coord_bits + r.feature_bits,
            8 * bytes.len() as u64
        );
        assert!((r.param_share + r.coord_share + r.feature_share - 100.0).abs() < 1e-9);
        assert_eq!(r.param_bits, 1408);
        assert_eq!(r.bpp, 8.0 * bytes.len() as f64 / 1000.0);
    }

    #[test]
    fn corruption_is_reported() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 10] ^= 1;
        assert!(matches!(Bitstream::parse(&bad), Err(Error::Decode(_))));
        for cut in 0..bytes.len() {
            assert!(Bitstream::parse(&bytes[..cut]).is_err());
        }
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(Bitstream::parse(&v2), Err(Error::Decode(_))));
    }
}
