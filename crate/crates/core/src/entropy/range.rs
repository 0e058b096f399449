//! 64-bit carry-less range coder with byte-wise renormalization.
//!
//! Frequencies are expressed against a power-of-two total of at most
//! 2^16. When the interval straddles a top-byte boundary and has shrunk
//! below `BOT`, it is truncated so the pending byte is final; this trades a
//! negligible amount of efficiency for never having to propagate a carry.

const TOP: u64 = 1 << 56;
const BOT: u64 = 1 << 48;

/// Probability precision of frequency tables.
pub const PRECISION: u32 = 16;

#[derive(Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u64::MAX,
            out: Vec::new(),
        }
    }

    /// Encodes the sub-interval `[cum, cum + freq)` of `[0, 2^total_bits)`.
    #[inline]
    pub fn encode(&mut self, cum: u32, freq: u32, total_bits: u32) {
        debug_assert!(freq > 0 && total_bits <= PRECISION);
        debug_assert!((cum as u64 + freq as u64) <= 1u64 << total_bits);
        let r = self.range >> total_bits;
        self.low = self.low.wrapping_add(r * cum as u64);
        self.range = r * freq as u64;
        self.normalize();
    }

    /// Writes `nbits <= 16` raw bits.
    pub fn encode_bits(&mut self, value: u32, nbits: u32) {
        self.encode(value & ((1 << nbits) - 1), 1, nbits);
    }

    #[inline]
    fn normalize(&mut self) {
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) < TOP {
                // top byte settled
            } else if self.range < BOT {
                self.range = self.low.wrapping_neg() & (BOT - 1);
            } else {
                break;
            }
            self.out.push((self.low >> 56) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    /// Emits the fewest bytes that pin a value inside the final interval.
    /// The decoder treats missing trailing bytes as zeros.
    pub fn finish(mut self) -> Vec<u8> {
        for k in 0..=8u32 {
            let shift = 64 - 8 * k;
            let v = if shift == 64 {
                if self.low == 0 {
                    Some(0u64)
                } else {
                    None
                }
            } else {
                let mask = (1u64 << shift) - 1;
                self.low.checked_add(mask).map(|x| x & !mask)
            };
            if let Some(v) = v {
                if v.wrapping_sub(self.low) < self.range {
                    for b in 0..k {
                        self.out.push((v >> (56 - 8 * b)) as u8);
                    }
                    return self.out;
                }
            }
        }
        unreachable!("eight bytes always identify the interval")
    }
}

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    low: u64,
    range: u64,
    code: u64,
    r: u64,
    data: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        let mut d = RangeDecoder {
            low: 0,
            range: u64::MAX,
            code: 0,
            r: 0,
            data,
            pos: 0,
        };
        for _ in 0..8 {
            d.code = (d.code << 8) | d.next_byte() as u64;
        }
        d
    }

    #[inline]
    fn next_byte(&mut self) -> u8 {
        let b = self.data.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// Cumulative frequency of the next symbol, in `[0, 2^total_bits)`.
    #[inline]
    pub fn peek(&mut self, total_bits: u32) -> u32 {
        self.r = self.range >> total_bits;
        let v = self.code.wrapping_sub(self.low) / self.r;
        v.min((1u64 << total_bits) - 1) as u32
    }

    /// Consumes the symbol found through [`RangeDecoder::peek`].
    #[inline]
    pub fn consume(&mut self, cum: u32, freq: u32) {
        self.low = self.low.wrapping_add(self.r * cum as u64);
        self.range = self.r * freq as u64;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) < TOP {
            } else if self.range < BOT {
                self.range = self.low.wrapping_neg() & (BOT - 1);
            } else {
                break;
            }
            self.code = (self.code << 8) | self.next_byte() as u64;
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    pub fn decode_bits(&mut self, nbits: u32) -> u32 {
        let v = self.peek(nbits);
        self.consume(v, 1);
        v
    }

    /// Bytes read past the end of the input, a sign of a truncated stream.
    pub fn overrun(&self) -> usize {
        self.pos.saturating_sub(self.data.len())
    }
}

/// Adaptive binary probability with 16-bit precision.
#[derive(Clone, Copy, Debug)]
pub struct AdaptiveBit {
    p1: u32,
}

impl Default for AdaptiveBit {
    fn default() -> Self {
        AdaptiveBit { p1: 1 << 15 }
    }
}

impl AdaptiveBit {
    const RATE: u32 = 5;
    const MIN: u32 = 32;

    fn update(&mut self, bit: bool) {
        if bit {
            self.p1 += ((1 << PRECISION) - self.p1) >> Self::RATE;
        } else {
            self.p1 -= self.p1 >> Self::RATE;
        }
        self.p1 = self.p1.clamp(Self::MIN, (1 << PRECISION) - Self::MIN);
    }

    pub fn encode(&mut self, enc: &mut RangeEncoder, bit: bool) {
        let p0 = (1 << PRECISION) - self.p1;
        if bit {
            enc.encode(p0, self.p1, PRECISION);
        } else {
            enc.encode(0, p0, PRECISION);
        }
        self.update(bit);
    }

    pub fn decode(&mut self, dec: &mut RangeDecoder<'_>) -> bool {
        let p0 = (1 << PRECISION) - self.p1;
        let v = dec.peek(PRECISION);
        let bit = v >= p0;
        if bit {
            dec.consume(p0, self.p1);
        } else {
            dec.consume(0, p0);
        }
        self.update(bit);
        bit
    }
}
