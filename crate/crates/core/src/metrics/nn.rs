//! Exact nearest-neighbour queries on a uniform grid.

use rustc_hash::FxHashMap;

type Cell = [i64; 3];

pub(crate) fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Bucketed reference points. Queries visit cells in rings of growing
/// Chebyshev radius and stop once no unvisited cell can hold a closer point,
/// so results equal a brute-force scan.
pub struct NearestGrid<'a> {
    points: &'a [[f64; 3]],
    origin: [f64; 3],
    side: f64,
    cells: FxHashMap<Cell, Vec<u32>>,
    lo: Cell,
    hi: Cell,
}

impl<'a> NearestGrid<'a> {
    /// `points` must be non-empty and finite.
    pub fn new(points: &'a [[f64; 3]]) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let extent = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
        // About two points per occupied cell for surface-like clouds.
        let side = if extent > 0.0 {
            (extent / (points.len() as f64 / 2.0).sqrt().max(1.0)).max(extent * 1e-9)
        } else {
            1.0
        };
        let mut grid = NearestGrid {
            points,
            origin: lo,
            side,
            cells: FxHashMap::default(),
            lo: [i64::MAX; 3],
            hi: [i64::MIN; 3],
        };
        for (i, p) in points.iter().enumerate() {
            let c = grid.cell(p);
            for k in 0..3 {
                grid.lo[k] = grid.lo[k].min(c[k]);
                grid.hi[k] = grid.hi[k].max(c[k]);
            }
            grid.cells.entry(c).or_default().push(i as u32);
        }
        grid
    }

    fn cell(&self, p: &[f64; 3]) -> Cell {
        std::array::from_fn(|k| ((p[k] - self.origin[k]) / self.side).floor() as i64)
    }

    /// Largest ring radius that can still reach an occupied cell from `c`.
    fn max_ring(&self, c: &Cell) -> i64 {
        (0..3)
            .map(|k| (c[k] - self.lo[k]).abs().max((self.hi[k] - c[k]).abs()))
            .max()
            .unwrap_or(0)
    }

    /// Visits every reference index in the cells of ring `r` around `c`.
    fn ring(&self, c: &Cell, r: i64, mut f: impl FnMut(u32)) {
        for dx in -r..=r {
            for dy in -r..=r {
                let edge = dx.abs() == r || dy.abs() == r;
                let dzs: Box<dyn Iterator<Item = i64>> = if edge {
                    Box::new(-r..=r)
                } else if r == 0 {
                    Box::new(std::iter::once(0))
                } else {
                    Box::new([-r, r].into_iter())
                };
                for dz in dzs {
                    if let Some(ids) = self.cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                        ids.iter().for_each(|&i| f(i));
                    }
                }
            }
        }
    }

    /// True when ring `r` has more cells than the grid has occupied ones,
    /// making a linear scan cheaper (far-away queries).
    fn ring_is_costly(&self, r: i64) -> bool {
        r > 2 && (24 * r * r) as usize > self.cells.len()
    }

    /// The `k` smallest `dist(i)` over all points, ordered by (distance, index).
    fn scan(&self, dist: impl Fn(usize) -> f64, k: usize) -> Vec<(usize, f64)> {
        let mut all: Vec<(usize, f64)> = (0..self.points.len()).map(|i| (i, dist(i))).collect();
        all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    /// Index and squared distance of the nearest reference point; ties go to
    /// the smaller index.
    pub fn nearest(&self, q: &[f64; 3]) -> (usize, f64) {
        let c = self.cell(q);
        let mut best = (usize::MAX, f64::INFINITY);
        let last = self.max_ring(&c);
        let mut r = 0;
        loop {
            if self.ring_is_costly(r) {
                return self.scan(|i| sq_dist(q, &self.points[i]), 1)[0];
            }
            self.ring(&c, r, |i| {
                let d = sq_dist(q, &self.points[i as usize]);
                if d < best.1 || (d == best.1 && (i as usize) < best.0) {
                    best = (i as usize, d);
                }
            });
            let reach = r as f64 * self.side;
            if (best.0 != usize::MAX && best.1 < reach * reach) || r >= last {
                return best;
            }
            r += 1;
        }
    }

    /// The `k` nearest reference points ordered by (distance, index).
    pub fn k_nearest(&self, q: &[f64; 3], k: usize) -> Vec<(usize, f64)> {
        let k = k.min(self.points.len());
        let c = self.cell(q);
        let last = self.max_ring(&c);
        let mut found: Vec<(usize, f64)> = Vec::new();
        let mut r = 0;
        loop {
            if self.ring_is_costly(r) {
                return self.scan(|i| sq_dist(q, &self.points[i]), k);
            }
            self.ring(&c, r, |i| found.push((i as usize, sq_dist(q, &self.points[i as usize]))));
            found.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            found.truncate(k);
            let reach = r as f64 * self.side;
            if (found.len() == k && found[k - 1].1 < reach * reach) || r >= last {
                return found;
            }
            r += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(points: &[[f64; 3]], q: &[f64; 3]) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for (i, p) in points.iter().enumerate() {
            let d = sq_dist(q, p);
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for case in 0..20 {
            let n = rng.random_range(1..400);
            let span = if case % 2 == 0 { 64.0 } else { 1.0 };
            let pts: Vec<[f64; 3]> = (0..n)
                .map(|_| std::array::from_fn(|_| (rng.random_range(0.0..span) as f64).floor()))
                .collect();
            let grid = NearestGrid::new(&pts);
            for _ in 0..100 {
                let q: [f64; 3] = std::array::from_fn(|_| rng.random_range(-20.0..90.0));
                assert_eq!(grid.nearest(&q), brute(&pts, &q));
                let knn = grid.k_nearest(&q, 5);
                let mut all: Vec<(usize, f64)> = pts.iter().enumerate().map(|(i, p)| (i, sq_dist(&q, p))).collect();
                all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
                all.truncate(5);
                assert_eq!(knn, all);
            }
        }
    }
}
