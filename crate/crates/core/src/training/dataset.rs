//! Procedurally posed toy clouds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::{lattice_points, sample_surface_uniform};
use crate::prior::{posed_mesh, PriorParams, TemplateModel, SHAPE_DIM};
use crate::sparse::Coord3;

/// A voxelized training or evaluation cloud with the parameters that
/// generated it.
#[derive(Clone, Debug)]
pub struct Sample {
    pub voxels: Vec<Coord3>,
    pub params: PriorParams,
    pub precision: u8,
}

/// Joints given random rotations, with the per-axis amplitude in radians.
const POSED_JOINTS: [(usize, f64); 10] = [
    (1, 0.5),
    (2, 0.5),
    (4, 0.6),
    (5, 0.6),
    (3, 0.2),
    (12, 0.3),
    (16, 0.6),
    (17, 0.6),
    (18, 0.7),
    (19, 0.7),
];

/// Random pose and shape with identity similarity.
pub fn random_body<R: Rng>(rng: &mut R) -> PriorParams {
    let mut p = PriorParams::default();
    for (j, amp) in POSED_JOINTS {
        for k in 0..3 {
            p.pose[3 * (j - 1) + k] = rng.random_range(-amp..amp);
        }
    }
    for s in 0..SHAPE_DIM {
        p.shape[s] = rng.random_range(-1.5..1.5);
    }
    p.rotation = [0.0, rng.random_range(-std::f64::consts::PI..std::f64::consts::PI), 0.0];
    p
}

/// Sets scale and translation so the posed body's largest extent spans
/// `fill` of the `precision`-bit cube, centred.
pub fn fit_to_cube(template: &TemplateModel, params: &PriorParams, precision: u8, fill: f64) -> Result<PriorParams> {
    let mut p = *params;
    p.translation = [0.0; 3];
    p.scale = 1.0;
    let mesh = posed_mesh(template, &p)?;
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for v in &mesh.vertices {
        for k in 0..3 {
            lo[k] = lo[k].min(v[k]);
            hi[k] = hi[k].max(v[k]);
        }
    }
    let extent = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
    let side = (1u32 << precision) as f64;
    p.scale = fill * side / extent;
    for k in 0..3 {
        p.translation[k] = side / 2.0 / p.scale - (lo[k] + hi[k]) / 2.0;
    }
    Ok(p)
}

/// Dense voxelization of the posed, scaled body surface.
pub fn surface_voxels(template: &TemplateModel, params: &PriorParams, precision: u8, seed: u64) -> Result<Vec<Coord3>> {
    let mesh = posed_mesh(template, params)?.scaled(params.scale);
    let n = ((4.0 * mesh.total_area()).ceil() as usize).clamp(64, 1 << 21);
    let points: Vec<[f64; 3]> = sample_surface_uniform(&mesh, n, seed)?.into_iter().map(|s| s.point).collect();
    let mut v = lattice_points(&points, 1 << precision);
    v.sort_unstable();
    v.dedup();
    Ok(v)
}

/// `count` toy clouds alternating between `precisions`.
pub fn toy_dataset(template: &TemplateModel, count: usize, precisions: &[u8], seed: u64) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let precision = precisions[i % precisions.len()];
            let body = random_body(&mut rng);
            let params = fit_to_cube(template, &body, precision, 0.9)?;
            let voxels = surface_voxels(template, &params, precision, rng.random())?;
            Ok(Sample {
                voxels,
                params,
                precision,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clouds_fill_the_cube() {
        let t = TemplateModel::toy_humanoid();
        let data = toy_dataset(&t, 4, &[6, 7], 1).unwrap();
        for s in &data {
            let side = 1 << s.precision;
            assert!(s.voxels.iter().all(|c| c.in_cube(side)));
            let span = |f: fn(&Coord3) -> i32| {
                let v: Vec<i32> = s.voxels.iter().map(f).collect();
                v.iter().max().unwrap() - v.iter().min().unwrap()
            };
            let largest = span(|c| c.x).max(span(|c| c.y)).max(span(|c| c.z));
            assert!(largest as f64 > 0.8 * side as f64, "span {largest} of {side}");
            assert!(s.voxels.len() > 200);
        }
        let again = toy_dataset(&t, 4, &[6, 7], 1).unwrap();
        assert_eq!(again[3].voxels, data[3].voxels);
    }
}
