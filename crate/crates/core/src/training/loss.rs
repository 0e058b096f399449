//! Rate and distortion terms evaluated outside a graph.

use crate::entropy::FactorizedModel;
use crate::error::{Error, Result};
use crate::graph::BCE_EPS;

/// One step's loss terms: `total = lambda * rate + distortion`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub lambda: f64,
    /// Residual-feature bits per input point.
    pub rate: f64,
    /// Sum over scales of the mean binary cross entropy (nats).
    pub distortion: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(lambda: f64, rate: f64, distortion: f64) -> Self {
        LossBreakdown {
            lambda,
            rate,
            distortion,
            total: lambda * rate + distortion,
        }
    }

    /// `step, lambda, R, D, total`.
    pub fn log_line(&self, step: usize) -> String {
        format!(
            "{step},{},{:.6},{:.6},{:.6}",
            self.lambda, self.rate, self.distortion, self.total
        )
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sum over scales of the mean cross entropy between candidate logits and
/// occupancy.
pub fn bce_multiscale(logits: &[Vec<f64>], occupied: &[Vec<bool>]) -> Result<f64> {
    if logits.len() != occupied.len() {
        return Err(Error::Contract(format!(
            "{} logit scales for {} occupancy scales",
            logits.len(),
            occupied.len()
        )));
    }
    let mut total = 0.0;
    for (z, x) in logits.iter().zip(occupied) {
        if z.len() != x.len() {
            return Err(Error::Contract(format!("{} logits for {} candidates", z.len(), x.len())));
        }
        if z.is_empty() {
            continue;
        }
        let mut sum = 0.0;
        for (&zi, &xi) in z.iter().zip(x) {
            let p = sigmoid(zi).clamp(BCE_EPS, 1.0 - BCE_EPS);
            sum -= if xi { p.ln() } else { (1.0 - p).ln() };
        }
        total += sum / z.len() as f64;
    }
    Ok(total)
}

/// Bits per point of (noisy) residual values under `model`.
pub fn rate_term(values: &[f64], model: &FactorizedModel, points: usize) -> f64 {
    if values.is_empty() || points == 0 {
        return 0.0;
    }
    model.bits(values, None) / points as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    #[test]
    fn cross_entropy_closed_forms() {
        let occ = vec![vec![true, false, true], vec![false; 5]];
        let perfect = vec![vec![20.0, -20.0, 20.0], vec![-20.0; 5]];
        assert!(bce_multiscale(&perfect, &occ).unwrap() < 1e-6);
        let flat = vec![vec![0.0; 3], vec![0.0; 5]];
        assert!((bce_multiscale(&flat, &occ).unwrap() - 2.0 * LN_2).abs() < 1e-12);
        assert!((bce_multiscale(&[vec![0.0]], &[vec![true]]).unwrap() - LN_2).abs() < 1e-12);
        assert!(bce_multiscale(&flat, &occ[..1]).is_err());
        assert!(bce_multiscale(&[vec![0.0; 2]], &[vec![true]]).is_err());
    }

    #[test]
    fn rate_closed_forms() {
        let model = FactorizedModel::new(2, 1.0, 0);
        assert_eq!(rate_term(&[], &model, 10), 0.0);
        // A value far outside the support sits at the likelihood floor of 2^-16.
        let r = rate_term(&[1e6, 1e6, 1e6, 1e6], &model, 2);
        assert!((r - 32.0).abs() < 1e-9);
    }

    #[test]
    fn rate_matches_model_entropy() {
        let model = FactorizedModel::new(1, 3.0, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 20000;
        let symbols: Vec<f64> = (0..n).map(|_| model.sample(0, &mut rng) as f64).collect();
        let (lo, hi) = model.ranges()[0];
        let entropy: f64 = (lo..=hi)
            .map(|k| model.pmf(0, k as f64))
            .filter(|&p| p > 0.0)
            .map(|p| -p * p.log2())
            .sum();
        let r = rate_term(&symbols, &model, n);
        assert!((r / entropy - 1.0).abs() < 0.02, "{r} vs {entropy}");
    }
}
