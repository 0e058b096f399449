use rand::Rng;

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    /// Additive `U(-0.5, 0.5)` noise, the differentiable proxy for rounding.
    Train,
    /// Round half away from zero.
    Infer,
}

/// Rounds half away from zero.
#[inline]
pub fn round_half_away(v: f64) -> f64 {
    v.round()
}

/// Quantizes features. `rng` is only drawn from in train mode.
pub fn quantize_features<T: Scalar, R: Rng>(feats: &[T], mode: QuantMode, rng: &mut R) -> Vec<T> {
    match mode {
        QuantMode::Infer => feats.iter().map(|v| T::from_f64(round_half_away(v.to_f64()))).collect(),
        QuantMode::Train => feats.iter().map(|&v| v + T::from_f64(rng.random_range(-0.5..0.5))).collect(),
    }
}

/// Integer symbols of already-rounded features.
pub fn to_symbols<T: Scalar>(feats: &[T]) -> Vec<i32> {
    feats
        .iter()
        .map(|v| round_half_away(v.to_f64()).clamp(i32::MIN as f64, i32::MAX as f64) as i32)
        .collect()
}
