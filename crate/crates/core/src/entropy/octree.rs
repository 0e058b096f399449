//! Lossless coordinate coder: breadth-first octree occupancy bytes, each bit
//! coded with an adaptive binary model indexed by its position in the byte.
//!
//! Layout: `u8 depth | LEB128 point count | range-coded occupancy bits`.
//! Child `i = (xbit << 2) | (ybit << 1) | zbit` is bit `7 - i` of its
//! parent's occupancy byte.

use super::range::{AdaptiveBit, RangeDecoder, RangeEncoder};
use crate::error::{Error, Result};
use crate::sparse::Coord3;

/// Largest supported octree depth.
pub const MAX_DEPTH: u8 = 20;
/// Largest point count a stream may announce.
pub const MAX_POINTS: u64 = 1 << 28;

/// Breadth-first occupancy bytes of the octree over `[0, 2^depth)^3`.
pub fn occupancy_bytes(coords: &[Coord3], depth: u8) -> Result<Vec<u8>> {
    let bound = 1i64 << depth;
    for c in coords {
        if [c.x, c.y, c.z].iter().any(|&v| (v as i64) < 0 || (v as i64) >= bound) {
            return Err(Error::Contract(format!("coordinate {c:?} outside [0, 2^{depth})")));
        }
    }
    let mut sorted = coords.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != coords.len() {
        return Err(Error::Contract("duplicate coordinates".into()));
    }
    // Morton-style keys make each level's nodes contiguous and ordered.
    let mut keys: Vec<u64> = sorted.iter().map(|c| morton(*c, depth)).collect();
    keys.sort_unstable();
    let mut bytes = Vec::new();
    let mut level: Vec<u64> = vec![0];
    let mut spans: Vec<(usize, usize)> = vec![(0, keys.len())];
    if keys.is_empty() {
        return Ok(bytes);
    }
    for d in (0..depth).rev() {
        let mut next_level = Vec::new();
        let mut next_spans = Vec::new();
        for (node, &(start, end)) in level.iter().zip(&spans) {
            let mut byte = 0u8;
            let mut s = start;
            while s < end {
                let child = ((keys[s] >> (3 * d as u32)) & 7) as u8;
                let mut e = s;
                while e < end && ((keys[e] >> (3 * d as u32)) & 7) as u8 == child {
                    e += 1;
                }
                byte |= 0x80 >> child;
                next_level.push((node << 3) | child as u64);
                next_spans.push((s, e));
                s = e;
            }
            bytes.push(byte);
        }
        level = next_level;
        spans = next_spans;
    }
    Ok(bytes)
}

fn morton(c: Coord3, depth: u8) -> u64 {
    let mut k = 0u64;
    for b in (0..depth).rev() {
        let child = (((c.x >> b) & 1) << 2) | (((c.y >> b) & 1) << 1) | ((c.z >> b) & 1);
        k = (k << 3) | child as u64;
    }
    k
}

fn unmorton(k: u64, depth: u8) -> Coord3 {
    let (mut x, mut y, mut z) = (0, 0, 0);
    for b in 0..depth {
        let child = (k >> (3 * b as u32)) & 7;
        x |= (((child >> 2) & 1) as i32) << b;
        y |= (((child >> 1) & 1) as i32) << b;
        z |= ((child & 1) as i32) << b;
    }
    Coord3::new(x, y, z)
}

/// Encodes a unique coordinate set inside `[0, 2^depth)^3`.
pub fn encode_coords(coords: &[Coord3], depth: u8) -> Result<Vec<u8>> {
    if depth > MAX_DEPTH {
        return Err(Error::Contract(format!("octree depth {depth} exceeds {MAX_DEPTH}")));
    }
    let occupancy = occupancy_bytes(coords, depth)?;
    let mut out = vec![depth];
    leb128::write::unsigned(&mut out, coords.len() as u64).expect("vec write");
    let mut enc = RangeEncoder::new();
    let mut models = [AdaptiveBit::default(); 8];
    for byte in occupancy {
        for (bit, m) in models.iter_mut().enumerate() {
            m.encode(&mut enc, byte & (0x80 >> bit) != 0);
        }
    }
    out.extend(enc.finish());
    Ok(out)
}

/// Decodes a coordinate stream; returns the coordinates sorted and the depth.
pub fn decode_coords(bytes: &[u8]) -> Result<(Vec<Coord3>, u8)> {
    let (&depth, mut rest) = bytes
        .split_first()
        .ok_or_else(|| Error::Decode("empty coordinate stream".into()))?;
    if depth > MAX_DEPTH {
        return Err(Error::Decode(format!("octree depth {depth} exceeds {MAX_DEPTH}")));
    }
    let count = leb128::read::unsigned(&mut rest).map_err(|e| Error::Decode(format!("point count: {e}")))?;
    if count > MAX_POINTS || count > 1u64 << (3 * depth as u32).min(62) {
        return Err(Error::Decode(format!("implausible point count {count}")));
    }
    if count == 0 {
        return Ok((Vec::new(), depth));
    }
    let count = count as usize;
    let mut dec = RangeDecoder::new(rest);
    let mut models = [AdaptiveBit::default(); 8];
    let mut level: Vec<u64> = vec![0];
    for _ in 0..depth {
        let mut next = Vec::with_capacity(level.len() * 2);
        for &node in &level {
            let mut any = false;
            for (bit, m) in models.iter_mut().enumerate() {
                if m.decode(&mut dec) {
                    next.push((node << 3) | bit as u64);
                    any = true;
                }
            }
            if !any {
                return Err(Error::Decode("empty occupancy byte".into()));
            }
            if next.len() > count {
                return Err(Error::Decode("octree has more nodes than points".into()));
            }
            if dec.overrun() > 16 {
                return Err(Error::Decode("coordinate stream truncated".into()));
            }
        }
        level = next;
    }
    if level.len() != count {
        return Err(Error::Decode(format!(
            "octree yields {} points, header says {count}",
            level.len()
        )));
    }
    let mut coords: Vec<Coord3> = level.into_iter().map(|k| unmorton(k, depth)).collect();
    coords.sort_unstable();
    Ok((coords, depth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_point_path() {
        let bytes = occupancy_bytes(&[Coord3::ORIGIN], 4).unwrap();
        assert_eq!(bytes, vec![0b1000_0000; 4]);
        let enc = encode_coords(&[Coord3::ORIGIN], 4).unwrap();
        assert_eq!(decode_coords(&enc).unwrap().0, vec![Coord3::ORIGIN]);
    }

    #[test]
    fn full_cube_saturates() {
        let mut all = Vec::new();
        for x in 0..4 {
            for y in 0..4 {
                for z in 0..4 {
                    all.push(Coord3::new(x, y, z));
                }
            }
        }
        let bytes = occupancy_bytes(&all, 2).unwrap();
        assert_eq!(bytes.len(), 9);
        assert!(bytes.iter().all(|&b| b == 0xff));
        assert_eq!(decode_coords(&encode_coords(&all, 2).unwrap()).unwrap().0, all);
    }

    #[test]
    fn child_bit_order() {
        // (1,0,0) is child 4 -> bit 3.
        assert_eq!(occupancy_bytes(&[Coord3::new(1, 0, 0)], 1).unwrap(), vec![0b0000_1000]);
        assert_eq!(occupancy_bytes(&[Coord3::new(0, 0, 1)], 1).unwrap(), vec![0b0100_0000]);
    }

    #[test]
    fn out_of_range_is_rejected() {
        assert!(matches!(
            encode_coords(&[Coord3::new(16, 0, 0)], 4),
            Err(Error::Contract(_))
        ));
        assert!(matches!(encode_coords(&[Coord3::new(-1, 0, 0)], 4), Err(Error::Contract(_))));
    }

    #[test]
    fn empty_and_depth_zero() {
        let e = encode_coords(&[], 5).unwrap();
        assert_eq!(decode_coords(&e).unwrap(), (vec![], 5));
        let e = encode_coords(&[Coord3::ORIGIN], 0).unwrap();
        assert_eq!(decode_coords(&e).unwrap(), (vec![Coord3::ORIGIN], 0));
    }

    proptest! {
        #[test]
        fn round_trip(raw in proptest::collection::btree_set((0i32..64, 0i32..64, 0i32..64), 0..200)) {
            let coords: Vec<Coord3> = raw.into_iter().map(|(x, y, z)| Coord3::new(x, y, z)).collect();
            let bytes = encode_coords(&coords, 6).unwrap();
            let (back, depth) = decode_coords(&bytes).unwrap();
            prop_assert_eq!(depth, 6);
            prop_assert_eq!(back, coords);
        }

        #[test]
        fn garbage_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = decode_coords(&bytes);
        }
    }
}
