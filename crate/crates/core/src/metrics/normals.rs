//! Surface normals from local covariance.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;

use super::nn::NearestGrid;
use crate::error::{Error, Result};

/// Neighbourhood size used when none is given.
pub const DEFAULT_NORMAL_K: usize = 12;

/// One unit normal per point.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalField {
    pub normals: Vec<[f64; 3]>,
}

impl NormalField {
    pub fn len(&self) -> usize {
        self.normals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normals.is_empty()
    }
}

/// Flips `n` so its first nonzero component is positive.
fn fix_sign(n: Vector3<f64>) -> Vector3<f64> {
    let first = n.iter().copied().find(|v| v.abs() > 1e-12).unwrap_or(0.0);
    if first < 0.0 {
        -n
    } else {
        n
    }
}

/// Unit vector orthogonal to `d`, built from the axis least aligned with it.
fn orthogonal(d: &Vector3<f64>) -> Vector3<f64> {
    let a = d.iamin();
    let mut axis = Vector3::zeros();
    axis[a] = 1.0;
    d.cross(&axis).normalize()
}

fn normal_of(points: &[[f64; 3]], ids: &[(usize, f64)]) -> [f64; 3] {
    let n = ids.len() as f64;
    let mut mean = Vector3::zeros();
    for &(i, _) in ids {
        mean += Vector3::from(points[i]);
    }
    mean /= n;
    let mut cov = Matrix3::zeros();
    for &(i, _) in ids {
        let d = Vector3::from(points[i]) - mean;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov / n);
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (l0, l1, l2) = (
        eig.eigenvalues[order[0]],
        eig.eigenvalues[order[1]],
        eig.eigenvalues[order[2]],
    );
    let scale = l2.abs().max(f64::MIN_POSITIVE);
    let normal = if l2 <= 0.0 {
        Vector3::z()
    } else if (l1 - l0) <= 1e-9 * scale {
        // Collinear (or isotropic) neighbourhood: the smallest eigenvector is
        // not unique, so pick a deterministic direction off the dominant one.
        orthogonal(&eig.eigenvectors.column(order[2]).into_owned())
    } else {
        eig.eigenvectors.column(order[0]).into_owned()
    };
    fix_sign(normal.normalize()).into()
}

/// Normal of every point from its `k` nearest neighbours (itself included).
pub fn estimate_normals(points: &[[f64; 3]], k: usize) -> Result<NormalField> {
    if k < 3 {
        return Err(Error::Config(format!("normal estimation needs k >= 3, got {k}")));
    }
    if points.len() < k {
        return Err(Error::Degenerate(format!(
            "{} points cannot supply {k} neighbours",
            points.len()
        )));
    }
    let grid = NearestGrid::new(points);
    let normals = points
        .par_iter()
        .map(|p| normal_of(points, &grid.k_nearest(p, k)))
        .collect();
    Ok(NormalField { normals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn plane_normals_point_up() {
        let pts: Vec<[f64; 3]> = (0..100).map(|i| [(i % 10) as f64, (i / 10) as f64, 3.0]).collect();
        let n = estimate_normals(&pts, 12).unwrap();
        for v in &n.normals {
            assert!((v[0].abs() + v[1].abs()) < 1e-9 && (v[2] - 1.0).abs() < 1e-9, "{v:?}");
        }
    }

    #[test]
    fn sphere_normals_are_radial() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = 1000.0;
        let pts: Vec<[f64; 3]> = (0..2000)
            .map(|_| {
                let theta: f64 = rng.random_range(0.0..0.3);
                let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                [r * theta.sin() * phi.cos(), r * theta.sin() * phi.sin(), r * theta.cos()]
            })
            .collect();
        let n = estimate_normals(&pts, 12).unwrap();
        for (p, v) in pts.iter().zip(&n.normals) {
            let radial = Vector3::from(*p).normalize();
            let cos = radial.dot(&Vector3::from(*v)).abs();
            assert!(cos > 5f64.to_radians().cos(), "{cos}");
        }
    }

    #[test]
    fn unit_norm_and_collinear_fallback() {
        let line: Vec<[f64; 3]> = (0..20).map(|i| [i as f64, 2.0 * i as f64, 0.0]).collect();
        let n = estimate_normals(&line, 5).unwrap();
        for (v, p) in n.normals.iter().zip(&line) {
            let v = Vector3::from(*v);
            assert!((v.norm() - 1.0).abs() < 1e-6);
            assert!(v.dot(&Vector3::new(1.0, 2.0, 0.0)).abs() < 1e-9, "{p:?}");
        }
    }

    #[test]
    fn too_few_points() {
        let pts = vec![[0.0; 3]; 5];
        assert!(matches!(estimate_normals(&pts, 12), Err(Error::Degenerate(_))));
        assert!(estimate_normals(&pts, 2).is_err());
    }
}
