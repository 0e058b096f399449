//! Bjøntegaard delta rate and PSNR.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// One operating point of an RD curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdPoint {
    /// Bits per input point.
    pub rate: f64,
    /// dB.
    pub psnr: f64,
}

/// Least-squares cubic `y(x)` on the affine variable `(x - shift) / scale`.
struct Cubic {
    coef: [f64; 4],
    shift: f64,
    scale: f64,
}

impl Cubic {
    fn fit(x: &[f64], y: &[f64]) -> Result<Cubic> {
        let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let shift = (lo + hi) / 2.0;
        let scale = ((hi - lo) / 2.0).max(f64::MIN_POSITIVE);
        let a = DMatrix::from_fn(x.len(), 4, |r, c| ((x[r] - shift) / scale).powi(c as i32));
        let b = DVector::from_column_slice(y);
        let sol = a
            .svd(true, true)
            .solve(&b, 1e-12)
            .map_err(|e| Error::Evaluation(format!("cubic fit failed: {e}")))?;
        Ok(Cubic {
            coef: [sol[0], sol[1], sol[2], sol[3]],
            shift,
            scale,
        })
    }

    /// `integral of y dx` from `a` to `b`.
    fn integral(&self, a: f64, b: f64) -> f64 {
        let prim = |x: f64| {
            let t = (x - self.shift) / self.scale;
            self.scale * self.coef.iter().enumerate().map(|(k, c)| c * t.powi(k as i32 + 1) / (k + 1) as f64).sum::<f64>()
        };
        prim(b) - prim(a)
    }
}

fn check(curve: &[RdPoint], name: &str) -> Result<()> {
    if curve.len() < 4 {
        return Err(Error::Evaluation(format!("{name} has {} points, need at least 4", curve.len())));
    }
    if curve.iter().any(|p| !(p.rate.is_finite() && p.rate > 0.0 && p.psnr.is_finite())) {
        return Err(Error::Evaluation(format!("{name} has a non-positive rate or non-finite PSNR")));
    }
    Ok(())
}

/// Mean difference `g_b - g_a` of two fitted curves over their common `x` range.
fn mean_gap(xa: &[f64], ya: &[f64], xb: &[f64], yb: &[f64]) -> Result<f64> {
    let range = |x: &[f64]| {
        (
            x.iter().copied().fold(f64::INFINITY, f64::min),
            x.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        )
    };
    let (a0, a1) = range(xa);
    let (b0, b1) = range(xb);
    let (lo, hi) = (a0.max(b0), a1.min(b1));
    if hi <= lo {
        return Err(Error::Evaluation("the curves do not overlap".into()));
    }
    let fa = Cubic::fit(xa, ya)?;
    let fb = Cubic::fit(xb, yb)?;
    Ok((fb.integral(lo, hi) - fa.integral(lo, hi)) / (hi - lo))
}

/// Average rate change of `b` against `a` at equal PSNR, in percent.
pub fn bd_rate(a: &[RdPoint], b: &[RdPoint]) -> Result<f64> {
    check(a, "curve A")?;
    check(b, "curve B")?;
    let split = |c: &[RdPoint]| -> (Vec<f64>, Vec<f64>) { c.iter().map(|p| (p.psnr, p.rate.log10())).unzip() };
    let (xa, ya) = split(a);
    let (xb, yb) = split(b);
    Ok((10f64.powf(mean_gap(&xa, &ya, &xb, &yb)?) - 1.0) * 100.0)
}

/// Average PSNR change of `b` against `a` at equal rate, in dB.
pub fn bd_psnr(a: &[RdPoint], b: &[RdPoint]) -> Result<f64> {
    check(a, "curve A")?;
    check(b, "curve B")?;
    let split = |c: &[RdPoint]| -> (Vec<f64>, Vec<f64>) { c.iter().map(|p| (p.rate.log10(), p.psnr)).unzip() };
    let (xa, ya) = split(a);
    let (xb, yb) = split(b);
    mean_gap(&xa, &ya, &xb, &yb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve() -> Vec<RdPoint> {
        [(0.1, 55.0), (0.25, 60.5), (0.5, 64.0), (1.0, 67.2), (2.0, 69.9)]
            .iter()
            .map(|&(rate, psnr)| RdPoint { rate, psnr })
            .collect()
    }

    #[test]
    fn analytic_shifts() {
        let a = curve();
        assert!(bd_rate(&a, &a).unwrap().abs() < 1e-9);
        assert!(bd_psnr(&a, &a).unwrap().abs() < 1e-9);
        let doubled: Vec<RdPoint> = a.iter().map(|p| RdPoint { rate: 2.0 * p.rate, ..*p }).collect();
        assert!((bd_rate(&a, &doubled).unwrap() - 100.0).abs() < 1e-6);
        let up: Vec<RdPoint> = a.iter().map(|p| RdPoint { psnr: p.psnr + 1.0, ..*p }).collect();
        assert!((bd_psnr(&a, &up).unwrap() - 1.0).abs() < 1e-9);
        assert!((bd_psnr(&up, &a).unwrap() + 1.0).abs() < 1e-9);
    }

    #[test]
    fn cubic_integral_matches_quadrature() {
        let x = [0.0, 1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|&t: &f64| 1.0 - 2.0 * t + 0.5 * t.powi(3)).collect();
        let c = Cubic::fit(&x, &y).unwrap();
        // Antiderivative t - t^2 + t^4 / 8 on [0.5, 3.5].
        let exact = |t: f64| t - t * t + t.powi(4) / 8.0;
        assert!((c.integral(0.5, 3.5) - (exact(3.5) - exact(0.5))).abs() < 1e-9);
    }

    #[test]
    fn errors() {
        let a = curve();
        assert!(bd_rate(&a[..3], &a).is_err());
        let far: Vec<RdPoint> = a.iter().map(|p| RdPoint { psnr: p.psnr + 100.0, ..*p }).collect();
        assert!(matches!(bd_rate(&a, &far), Err(Error::Evaluation(_))));
        let mut bad = a.clone();
        bad[0].rate = 0.0;
        assert!(bd_psnr(&bad, &a).is_err());
    }
}
