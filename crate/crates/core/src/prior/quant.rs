//! Three-decimal parameter quantization, the fixed 176-byte parameter
//! layout and the `name = value` text format.
//!
//! Byte layout: 86 little-endian `i16` (value x 1000, stream order of
//! [`PriorParams::coded_values`]) followed by the scale as a little-endian
//! `u32` in 16.16 fixed point.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::{PriorParams, CODED_PARAMS};

/// Size of an encoded parameter set.
pub const PARAM_BYTES: usize = 2 * CODED_PARAMS + 4;
const SCALE_ONE: f64 = 65536.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuantizedParams {
    pub values: [i16; CODED_PARAMS],
    /// Scale in 16.16 fixed point.
    pub scale: u32,
}

/// Rounds every coded value half away from zero to three decimals and the
/// scale to 16.16 fixed point.
pub fn quantize_params(params: &PriorParams) -> Result<QuantizedParams> {
    let mut values = [0i16; CODED_PARAMS];
    for (i, (&v, q)) in params.coded_values().iter().zip(values.iter_mut()).enumerate() {
        let r = (v * 1000.0).round();
        if !(r >= i16::MIN as f64 && r <= i16::MAX as f64) {
            return Err(Error::Range {
                name: PriorParams::value_name(i),
                value: v,
            });
        }
        *q = r as i16;
    }
    let s = (params.scale * SCALE_ONE).round();
    if !(s >= 1.0 && s <= u32::MAX as f64) {
        return Err(Error::Range {
            name: "scale".into(),
            value: params.scale,
        });
    }
    Ok(QuantizedParams {
        values,
        scale: s as u32,
    })
}

pub fn dequantize_params(q: &QuantizedParams) -> PriorParams {
    let mut values = [0.0; CODED_PARAMS];
    for (v, &i) in values.iter_mut().zip(&q.values) {
        *v = i as f64 / 1000.0;
    }
    PriorParams::from_coded_values(&values, q.scale as f64 / SCALE_ONE)
}

pub fn encode_params(q: &QuantizedParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(PARAM_BYTES);
    for v in q.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&q.scale.to_le_bytes());
    out
}

pub fn decode_params(bytes: &[u8]) -> Result<QuantizedParams> {
    if bytes.len() < PARAM_BYTES {
        return Err(Error::at_byte(bytes.len(), "parameter stream truncated"));
    }
    if bytes.len() > PARAM_BYTES {
        return Err(Error::at_byte(PARAM_BYTES, "trailing bytes after parameters"));
    }
    let mut values = [0i16; CODED_PARAMS];
    for (i, v) in values.iter_mut().enumerate() {
        *v = i16::from_le_bytes([bytes[2 * i], bytes[2 * i + 1]]);
    }
    let scale = u32::from_le_bytes(bytes[2 * CODED_PARAMS..].try_into().unwrap());
    if scale == 0 {
        return Err(Error::at_byte(2 * CODED_PARAMS, "zero scale"));
    }
    Ok(QuantizedParams { values, scale })
}

/// One `name = value` line per parameter.
pub fn write_params_text(params: &PriorParams) -> String {
    let mut out = String::new();
    for (i, v) in params.coded_values().iter().enumerate() {
        let _ = writeln!(out, "{} = {v}", PriorParams::value_name(i));
    }
    let _ = writeln!(out, "scale = {}", params.scale);
    out
}

/// Parses the text format. Blank lines and `#` comments are skipped;
/// missing values default to zero (scale to one).
pub fn parse_params_text(text: &str) -> Result<PriorParams> {
    let mut values = [0.0; CODED_PARAMS];
    let mut scale = 1.0;
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (name, value) = line
            .split_once('=')
            .ok_or_else(|| Error::at_line(n + 1, "expected `name = value`"))?;
        let name = name.trim();
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| Error::at_line(n + 1, format!("`{}` is not a number", value.trim())))?;
        if !value.is_finite() {
            return Err(Error::at_line(n + 1, "non-finite value"));
        }
        if name == "scale" {
            scale = value;
        } else if let Some(i) = (0..CODED_PARAMS).find(|&i| PriorParams::value_name(i) == name) {
            values[i] = value;
        } else {
            return Err(Error::at_line(n + 1, format!("unknown parameter `{name}`")));
        }
    }
    Ok(PriorParams::from_coded_values(&values, scale))
}

pub fn read_params_file(path: impl AsRef<Path>) -> Result<PriorParams> {
    parse_params_text(&fs::read_to_string(path)?)
}

pub fn write_params_file(path: impl AsRef<Path>, params: &PriorParams) -> Result<()> {
    crate::io::write_atomic(path, write_params_text(params).as_bytes())
}

#[cfg(test)]
#[allow(clippy::approx_constant)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn three_decimal_rounding() {
        let mut p = PriorParams::default();
        p.pose[0] = 0.12345;
        p.pose[1] = -3.1416;
        p.shape[2] = 0.0005;
        p.gender = -0.0005;
        let q = quantize_params(&p).unwrap();
        assert_eq!(q.values[0], 123);
        assert_eq!(q.values[1], -3142);
        assert_eq!(q.values[71], 1);
        assert_eq!(q.values[85], -1);
        let d = dequantize_params(&q);
        assert_eq!(d.pose[0], 0.123);
        assert_eq!(d.pose[1], -3.142);
    }

    #[test]
    fn fixed_size_layout() {
        let q = quantize_params(&PriorParams::default()).unwrap();
        let bytes = encode_params(&q);
        assert_eq!(bytes.len(), 176);
        assert_eq!(bytes.len() * 8, 1376 + 32);
        assert!(bytes[..172].iter().all(|&b| b == 0));
        assert_eq!(&bytes[172..], &65536u32.to_le_bytes());
        assert_eq!(decode_params(&bytes).unwrap(), q);
    }

    #[test]
    fn truncation_and_range_errors() {
        let bytes = encode_params(&quantize_params(&PriorParams::default()).unwrap());
        match decode_params(&bytes[..175]) {
            Err(Error::Parse { unit: "byte", position, .. }) => assert_eq!(position, 175),
            other => panic!("{other:?}"),
        }
        let mut p = PriorParams::default();
        p.translation[1] = 40.0;
        match quantize_params(&p) {
            Err(Error::Range { name, .. }) => assert_eq!(name, "translation.1"),
            other => panic!("{other:?}"),
        }
        p.translation[1] = 0.0;
        p.scale = 0.0;
        assert!(matches!(quantize_params(&p), Err(Error::Range { .. })));
    }

    #[test]
    fn text_round_trip() {
        let mut p = PriorParams::default();
        p.pose[68] = -1.25;
        p.shape[3] = 0.5;
        p.scale = 33.5;
        p.gender = 1.0;
        assert_eq!(parse_params_text(&write_params_text(&p)).unwrap(), p);
        let err = parse_params_text("# header\nscale = 2\nbogus = 1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { unit: "line", position: 3, .. }));
    }

    proptest! {
        #[test]
        fn bytes_round_trip(vals in proptest::collection::vec(any::<i16>(), CODED_PARAMS), scale in 1u32..) {
            let mut values = [0i16; CODED_PARAMS];
            values.copy_from_slice(&vals);
            let q = QuantizedParams { values, scale };
            prop_assert_eq!(decode_params(&encode_params(&q)).unwrap(), q);
            prop_assert_eq!(quantize_params(&dequantize_params(&q)).unwrap(), q);
        }

        #[test]
        fn quantization_is_idempotent(vals in proptest::collection::vec(-32.0f64..32.0, CODED_PARAMS), s in 0.01f64..1000.0) {
            let mut a = [0.0; CODED_PARAMS];
            a.copy_from_slice(&vals);
            let p = PriorParams::from_coded_values(&a, s);
            let once = dequantize_params(&quantize_params(&p).unwrap());
            let twice = dequantize_params(&quantize_params(&once).unwrap());
            prop_assert_eq!(once, twice);
            for (x, y) in p.coded_values().iter().zip(once.coded_values().iter()) {
                prop_assert!((x - y).abs() <= 0.0005 + 1e-12);
            }
        }
    }
}
