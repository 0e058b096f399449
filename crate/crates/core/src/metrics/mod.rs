//! Geometry distortion, PSNR and Bjøntegaard deltas.

mod bd;
mod nn;
mod normals;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};

pub use bd::{bd_psnr, bd_rate, RdPoint};
pub use nn::NearestGrid;
pub use normals::{estimate_normals, NormalField, DEFAULT_NORMAL_K};

/// PSNR reported for zero error.
pub const PSNR_CAP: f64 = 999.0;

/// Header of the RD results CSV.
pub const CSV_HEADER: &str = "sequence,lambda,bpp,d1_psnr,d2_psnr";

fn non_empty(points: &[[f64; 3]], what: &str) -> Result<()> {
    if points.is_empty() {
        return Err(Error::Degenerate(format!("{what} cloud is empty")));
    }
    Ok(())
}

/// Deterministic mean of per-point values computed in parallel.
fn mean_of(test: &[[f64; 3]], f: impl Fn(&[f64; 3]) -> f64 + Sync + Send) -> f64 {
    let values: Vec<f64> = test.par_iter().map(f).collect();
    values.iter().sum::<f64>() / values.len() as f64
}

/// Point-to-point error: mean squared distance from each test point to its
/// nearest reference point.
pub fn d1_mse(test: &[[f64; 3]], reference: &[[f64; 3]]) -> Result<f64> {
    non_empty(test, "test")?;
    non_empty(reference, "reference")?;
    let grid = NearestGrid::new(reference);
    Ok(mean_of(test, |p| grid.nearest(p).1))
}

/// Point-to-plane error: squared projection of each test point's offset
/// onto the normal of its nearest reference point.
pub fn d2_mse(test: &[[f64; 3]], reference: &[[f64; 3]], normals: &NormalField) -> Result<f64> {
    non_empty(test, "test")?;
    non_empty(reference, "reference")?;
    if normals.len() != reference.len() {
        return Err(Error::Contract(format!(
            "{} normals for {} reference points",
            normals.len(),
            reference.len()
        )));
    }
    let grid = NearestGrid::new(reference);
    Ok(mean_of(test, |p| {
        let (i, _) = grid.nearest(p);
        let (r, n) = (&reference[i], &normals.normals[i]);
        let dot = (p[0] - r[0]) * n[0] + (p[1] - r[1]) * n[1] + (p[2] - r[2]) * n[2];
        dot * dot
    }))
}

/// `10 log10(3 (2^p - 1)^2 / mse)`, capped at [`PSNR_CAP`].
pub fn psnr(mse: f64, precision: u8) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    let peak = ((1u64 << precision) - 1) as f64;
    (10.0 * (3.0 * peak * peak / mse).log10()).min(PSNR_CAP)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    D1,
    D2,
}

/// How the two directions of a symmetric PSNR combine.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SymmetricMode {
    /// PSNR of the larger of the two errors.
    #[default]
    MaxError,
    /// The larger of the two PSNRs.
    MaxPsnr,
}

impl FromStr for SymmetricMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max-error" => Ok(SymmetricMode::MaxError),
            "max-psnr" => Ok(SymmetricMode::MaxPsnr),
            _ => Err(Error::Config(format!("unknown symmetric mode `{s}` (max-error or max-psnr)"))),
        }
    }
}

impl fmt::Display for SymmetricMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SymmetricMode::MaxError => "max-error",
            SymmetricMode::MaxPsnr => "max-psnr",
        })
    }
}

fn normals_for(points: &[[f64; 3]]) -> Result<NormalField> {
    estimate_normals(points, DEFAULT_NORMAL_K.min(points.len().max(3)))
}

fn combine(ab: f64, ba: f64, precision: u8, mode: SymmetricMode) -> f64 {
    match mode {
        SymmetricMode::MaxError => psnr(ab.max(ba), precision),
        SymmetricMode::MaxPsnr => psnr(ab, precision).max(psnr(ba, precision)),
    }
}

/// PSNR over both directions (`a` against `b` and `b` against `a`).
pub fn symmetric_psnr(a: &[[f64; 3]], b: &[[f64; 3]], precision: u8, metric: Metric, mode: SymmetricMode) -> Result<f64> {
    let (ab, ba) = match metric {
        Metric::D1 => (d1_mse(a, b)?, d1_mse(b, a)?),
        Metric::D2 => (d2_mse(a, b, &normals_for(b)?)?, d2_mse(b, a, &normals_for(a)?)?),
    };
    Ok(combine(ab, ba, precision, mode))
}

/// Both distortions of a decoded cloud against its source.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quality {
    pub d1_mse: f64,
    pub d2_mse: f64,
    pub d1_psnr: f64,
    pub d2_psnr: f64,
}

/// Symmetric D1 and D2 with normals estimated once per cloud.
pub fn evaluate(decoded: &[[f64; 3]], source: &[[f64; 3]], precision: u8, mode: SymmetricMode) -> Result<Quality> {
    let n_src = normals_for(source)?;
    let n_dec = normals_for(decoded)?;
    let d1 = (d1_mse(decoded, source)?, d1_mse(source, decoded)?);
    let d2 = (d2_mse(decoded, source, &n_src)?, d2_mse(source, decoded, &n_dec)?);
    let pick = |(ab, ba): (f64, f64)| match mode {
        SymmetricMode::MaxError => ab.max(ba),
        SymmetricMode::MaxPsnr => {
            if psnr(ab, precision) >= psnr(ba, precision) {
                ab
            } else {
                ba
            }
        }
    };
    Ok(Quality {
        d1_mse: pick(d1),
        d2_mse: pick(d2),
        d1_psnr: combine(d1.0, d1.1, precision, mode),
        d2_psnr: combine(d2.0, d2.1, precision, mode),
    })
}

/// One CSV row matching [`CSV_HEADER`].
pub fn csv_row(sequence: &str, lambda: f64, bpp: f64, quality: &Quality) -> String {
    format!(
        "{},{},{:.6},{:.4},{:.4}",
        sequence.replace(',', "_"),
        lambda,
        bpp,
        quality.d1_psnr,
        quality.d2_psnr
    )
}

#[cfg(test)]
mod tests;
