//! Surface sampling of triangle meshes: area-weighted uniform samples and
//! blue-noise samples by greedy sample elimination.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustc_hash::FxHashMap;

use crate::error::{Error, Result};

use super::{dist2, Mesh, PointCloud};

/// Candidates drawn per requested sample.
pub const CANDIDATE_RATIO: usize = 4;
const WEIGHT_EXPONENT: i32 = 8;

/// A point on a mesh with the triangle and barycentric weights it came from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceSample {
    pub face: u32,
    pub bary: [f64; 3],
    pub point: [f64; 3],
}

fn area_cdf(mesh: &Mesh) -> Result<Vec<f64>> {
    let mut cdf = Vec::with_capacity(mesh.faces.len());
    let mut acc = 0.0;
    for f in 0..mesh.faces.len() {
        acc += mesh.face_area(f);
        cdf.push(acc);
    }
    if !(acc > 0.0 && acc.is_finite()) {
        return Err(Error::Degenerate(format!("mesh surface area is {acc}")));
    }
    Ok(cdf)
}

/// `n` independent area-weighted uniform samples.
pub fn sample_surface_uniform(mesh: &Mesh, n: usize, seed: u64) -> Result<Vec<SurfaceSample>> {
    let cdf = area_cdf(mesh)?;
    let total = *cdf.last().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let t = rng.random::<f64>() * total;
            let f = cdf.partition_point(|&c| c <= t).min(cdf.len() - 1);
            let (r1, r2): (f64, f64) = (rng.random(), rng.random());
            let s = r1.sqrt();
            let bary = [1.0 - s, s * (1.0 - r2), s * r2];
            let [a, b, c] = mesh.faces[f].map(|i| mesh.vertices[i as usize]);
            let point = std::array::from_fn(|k| bary[0] * a[k] + bary[1] * b[k] + bary[2] * c[k]);
            SurfaceSample {
                face: f as u32,
                bary,
                point,
            }
        })
        .collect())
}

#[derive(PartialEq)]
struct Entry {
    weight: f64,
    index: usize,
    stamp: u32,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Heaviest first; ties go to the higher index so results are fixed.
        self.weight.total_cmp(&other.weight).then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Exactly `n` samples with blue-noise spacing: draws `4n` uniform
/// candidates and greedily removes the one with the largest accumulated
/// neighbor weight `w(d) = (1 - d / 2r)^8`, where `r` is the packing radius
/// of `n` disks on the surface.
pub fn sample_surface_poisson(mesh: &Mesh, n: usize, seed: u64) -> Result<PointCloud> {
    Ok(PointCloud::new(
        sample_surface_poisson_detailed(mesh, n, seed)?
            .into_iter()
            .map(|s| s.point)
            .collect(),
    ))
}

/// [`sample_surface_poisson`] keeping the face and barycentric weights.
pub fn sample_surface_poisson_detailed(mesh: &Mesh, n: usize, seed: u64) -> Result<Vec<SurfaceSample>> {
    if n == 0 {
        return Err(Error::Contract("sample count must be at least 1".into()));
    }
    let area = mesh.total_area();
    let candidates = sample_surface_uniform(mesh, n.saturating_mul(CANDIDATE_RATIO).max(n), seed)?;
    let r_max = (area / (2.0 * 3f64.sqrt() * n as f64)).sqrt();
    let reach = 2.0 * r_max;
    if !(reach > 0.0) {
        return Ok(candidates.into_iter().take(n).collect());
    }

    let cell = |p: [f64; 3]| p.map(|v| (v / reach).floor() as i64);
    let mut grid: FxHashMap<[i64; 3], Vec<usize>> = FxHashMap::default();
    for (i, s) in candidates.iter().enumerate() {
        grid.entry(cell(s.point)).or_default().push(i);
    }
    let m = candidates.len();
    let mut neighbors: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m];
    let mut weight = vec![0.0; m];
    for (i, s) in candidates.iter().enumerate() {
        let c = cell(s.point);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(list) = grid.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) else { continue };
                    for &j in list {
                        if j == i {
                            continue;
                        }
                        let d = dist2(s.point, candidates[j].point).sqrt();
                        if d < reach {
                            let w = (1.0 - d / reach).powi(WEIGHT_EXPONENT);
                            neighbors[i].push((j, w));
                            weight[i] += w;
                        }
                    }
                }
            }
        }
    }

    let mut stamp = vec![0u32; m];
    let mut alive = vec![true; m];
    let mut heap: BinaryHeap<Entry> = (0..m)
        .map(|i| Entry {
            weight: weight[i],
            index: i,
            stamp: 0,
        })
        .collect();
    let mut remaining = m;
    while remaining > n {
        let Some(top) = heap.pop() else { break };
        if !alive[top.index] || top.stamp != stamp[top.index] {
            continue;
        }
        alive[top.index] = false;
        remaining -= 1;
        for &(j, w) in &neighbors[top.index] {
            if alive[j] {
                weight[j] -= w;
                stamp[j] += 1;
                heap.push(Entry {
                    weight: weight[j],
                    index: j,
                    stamp: stamp[j],
                });
            }
        }
    }
    Ok(candidates
        .into_iter()
        .zip(alive)
        .filter_map(|(s, a)| a.then_some(s))
        .collect())
}
