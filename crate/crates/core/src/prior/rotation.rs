//! Axis-angle rotations on plain 3x3 arrays.

use std::f64::consts::PI;

pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Rotation matrix of an axis-angle vector (Rodrigues' formula).
pub fn rodrigues(v: [f64; 3]) -> Mat3 {
    let theta = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    // sin(t)/t and (1-cos(t))/t^2, with series forms near zero.
    let (a, b) = if theta < 1e-6 {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / (theta * theta))
    };
    let k = [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]];
    let k2 = mul(&k, &k);
    let mut r = IDENTITY;
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] += a * k[i][j] + b * k2[i][j];
        }
    }
    r
}

/// Axis-angle vector of a rotation matrix, magnitude in `[0, pi]`.
pub fn log_map(r: &Mat3) -> [f64; 3] {
    let q = nalgebra::UnitQuaternion::from_matrix(&to_na(r));
    let v = q.scaled_axis();
    [v.x, v.y, v.z]
}

/// Wraps an axis-angle vector so its magnitude is at most `pi` while
/// describing the same rotation.
pub fn canonicalize(v: [f64; 3]) -> [f64; 3] {
    let theta = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if theta <= PI || !theta.is_finite() {
        return v;
    }
    let mut t = theta.rem_euclid(2.0 * PI);
    if t > PI {
        t -= 2.0 * PI;
    }
    let k = t / theta;
    [v[0] * k, v[1] * k, v[2] * k]
}

pub fn mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn apply(r: &Mat3, v: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| r[i][0] * v[0] + r[i][1] * v[1] + r[i][2] * v[2])
}

pub fn transpose(r: &Mat3) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| r[j][i]))
}

pub fn to_na(r: &Mat3) -> nalgebra::Matrix3<f64> {
    nalgebra::Matrix3::from_fn(|i, j| r[i][j])
}

pub fn from_na(m: &nalgebra::Matrix3<f64>) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Vector3};

    fn close(a: &Mat3, b: &Mat3, tol: f64) -> bool {
        (0..3).all(|i| (0..3).all(|j| (a[i][j] - b[i][j]).abs() < tol))
    }

    #[test]
    fn matches_nalgebra() {
        for v in [[0.3, -1.2, 0.7], [1e-9, 0.0, 2e-9], [0.0, 0.0, PI], [2.0, 1.0, -0.5]] {
            let ours = rodrigues(v);
            let theirs = from_na(Rotation3::new(Vector3::from(v)).matrix());
            assert!(close(&ours, &theirs, 1e-12), "{v:?}");
        }
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = rodrigues([0.0, 0.0, PI / 2.0]);
        let p = apply(&r, [1.0, 0.0, 0.0]);
        assert!((p[0]).abs() < 1e-12 && (p[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_inverts_rodrigues() {
        for v in [[0.3, -1.2, 0.7], [0.0, 0.0, 0.0], [0.0, 3.0, 0.0]] {
            let back = log_map(&rodrigues(v));
            assert!(close(&rodrigues(back), &rodrigues(v), 1e-9));
            assert!((0..3).all(|k| (back[k] - v[k]).abs() < 1e-9));
        }
    }

    #[test]
    fn canonical_form_keeps_rotation() {
        for v in [[0.0, 0.0, 4.0], [5.0, -3.0, 1.0], [10.0, 0.0, 0.0], [0.1, 0.2, 0.3]] {
            let c = canonicalize(v);
            let n = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
            assert!(n <= PI + 1e-12);
            assert!(close(&rodrigues(c), &rodrigues(v), 1e-9), "{v:?}");
        }
    }
}
