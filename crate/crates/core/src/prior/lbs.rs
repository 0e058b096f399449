//! Blendshapes and linear blend skinning.

use crate::error::{Error, Result};
use crate::geometry::Mesh;

use super::rotation::{apply, mul, rodrigues, Mat3, IDENTITY};
use super::template::TemplateModel;
use super::PriorParams;

/// Mean mesh plus shape deviations only.
pub fn shaped_vertices(template: &TemplateModel, params: &PriorParams) -> Vec<[f64; 3]> {
    let n = template.n_shape;
    template
        .mean
        .iter()
        .enumerate()
        .map(|(v, m)| {
            std::array::from_fn(|k| {
                let row = &template.shape_basis[(v * 3 + k) * n..(v * 3 + k + 1) * n];
                m[k] + row.iter().zip(&params.shape).map(|(b, s)| b * s).sum::<f64>()
            })
        })
        .collect()
}

/// Pose features: `R(pose_j) - I`, row-major, for every non-root joint.
pub fn pose_features(template: &TemplateModel, params: &PriorParams) -> Vec<f64> {
    let mut out = Vec::with_capacity(9 * template.n_joints().saturating_sub(1));
    for j in 1..template.n_joints() {
        let r = rodrigues(params.joint_rotation(j));
        for (a, row) in r.iter().enumerate() {
            for (b, &x) in row.iter().enumerate() {
                out.push(x - IDENTITY[a][b]);
            }
        }
    }
    out
}

/// Mean mesh plus shape and pose deviations, in rest pose.
pub fn apply_blendshapes(template: &TemplateModel, params: &PriorParams) -> Result<Vec<[f64; 3]>> {
    template.validate()?;
    let mut v = shaped_vertices(template, params);
    if template.n_pose > 0 {
        let feats = pose_features(template, params);
        if feats.len() != template.n_pose {
            return Err(Error::Config("pose basis does not match the skeleton".into()));
        }
        let n = template.n_pose;
        for (vi, p) in v.iter_mut().enumerate() {
            for (k, c) in p.iter_mut().enumerate() {
                let row = &template.pose_basis[(vi * 3 + k) * n..(vi * 3 + k + 1) * n];
                *c += row.iter().zip(&feats).map(|(b, f)| b * f).sum::<f64>();
            }
        }
    }
    Ok(v)
}

/// Joint locations regressed from the given vertices.
pub fn joint_positions(template: &TemplateModel, vertices: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let nv = template.n_vertices();
    (0..template.n_joints())
        .map(|j| {
            let row = &template.joint_regressor[j * nv..(j + 1) * nv];
            let mut acc = [0.0; 3];
            for (w, v) in row.iter().zip(vertices) {
                if *w != 0.0 {
                    for k in 0..3 {
                        acc[k] += w * v[k];
                    }
                }
            }
            acc
        })
        .collect()
}

/// Per-joint affine maps `x -> R x + o` from rest space to posed space.
fn joint_transforms(template: &TemplateModel, joints: &[[f64; 3]], params: &PriorParams) -> Vec<(Mat3, [f64; 3])> {
    let mut out: Vec<(Mat3, [f64; 3])> = Vec::with_capacity(joints.len());
    for j in 0..joints.len() {
        let local = rodrigues(params.joint_rotation(j));
        if j == 0 {
            // The root turns about the model origin.
            out.push((local, [0.0; 3]));
        } else {
            let (rp, op) = out[template.parents[j] as usize];
            // The joint itself follows its parent; its subtree turns about it.
            let r = mul(&rp, &local);
            let at = apply(&rp, joints[j]);
            let turned = apply(&r, joints[j]);
            out.push((r, std::array::from_fn(|k| at[k] + op[k] - turned[k])));
        }
    }
    out
}

/// Poses blendshaped vertices `vertices` with linear blend skinning: each
/// joint rotates its vertices about the joint's rest position, rotations
/// compose down the skeleton, and the translation is added last. Joint
/// rest positions come from the shape-only vertices.
pub fn skin(template: &TemplateModel, vertices: &[[f64; 3]], params: &PriorParams) -> Result<Mesh> {
    if vertices.len() != template.n_vertices() {
        return Err(Error::Config(format!(
            "{} vertices for a template with {}",
            vertices.len(),
            template.n_vertices()
        )));
    }
    let joints = joint_positions(template, &shaped_vertices(template, params));
    let transforms = joint_transforms(template, &joints, params);
    let nj = template.n_joints();
    let posed = vertices
        .iter()
        .enumerate()
        .map(|(vi, v)| {
            // Blend the affine maps first, then apply the blend once.
            let mut m = [[0.0; 3]; 3];
            let mut o = [0.0; 3];
            for (j, &w) in template.weights[vi * nj..(vi + 1) * nj].iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let (r, t) = &transforms[j];
                for a in 0..3 {
                    for b in 0..3 {
                        m[a][b] += w * r[a][b];
                    }
                    o[a] += w * t[a];
                }
            }
            let p = apply(&m, *v);
            std::array::from_fn(|k| (p[k] + o[k]) + params.translation[k])
        })
        .collect();
    Ok(Mesh {
        vertices: posed,
        faces: template.faces.clone(),
    })
}

/// Blendshapes followed by skinning, in model units.
pub fn posed_mesh(template: &TemplateModel, params: &PriorParams) -> Result<Mesh> {
    let v = apply_blendshapes(template, params)?;
    skin(template, &v, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::rotation::rodrigues;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn random_params(seed: u64, scale: f64) -> PriorParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = PriorParams::default();
        p.pose.iter_mut().for_each(|x| *x = rng.random_range(-scale..scale));
        p.shape.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
        p.rotation = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        p.translation = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        p
    }

    fn max_diff(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
        a.iter()
            .zip(b)
            .flat_map(|(x, y)| (0..3).map(move |k| (x[k] - y[k]).abs()))
            .fold(0.0, f64::max)
    }

    #[test]
    fn zero_params_reproduce_template() {
        let t = TemplateModel::toy_humanoid();
        let p = PriorParams::default();
        let v = apply_blendshapes(&t, &p).unwrap();
        assert_eq!(v, t.mean);
        assert_eq!(skin(&t, &v, &p).unwrap().vertices, t.mean);
    }

    #[test]
    fn one_hot_shape() {
        let t = TemplateModel::toy_humanoid();
        let mut p = PriorParams::default();
        p.shape[0] = 1.0;
        let v = apply_blendshapes(&t, &p).unwrap();
        for (i, x) in v.iter().enumerate() {
            for k in 0..3 {
                assert_eq!(x[k], t.mean[i][k] + t.shape_basis[(i * 3 + k) * 10]);
            }
        }
    }

    #[test]
    fn blendshapes_match_dense_evaluation() {
        // Builds the full (3V x (10 + 9)) basis matrix and multiplies it by
        // the stacked coefficient vector with nalgebra.
        let t = TemplateModel::toy_two_joint(4);
        let p = random_params(9, 1.0);
        let nv = t.n_vertices();
        let basis = nalgebra::DMatrix::from_fn(3 * nv, 19, |r, c| {
            if c < 10 {
                t.shape_basis[r * 10 + c]
            } else {
                t.pose_basis[r * 9 + c - 10]
            }
        });
        let r1 = nalgebra::Rotation3::new(nalgebra::Vector3::new(p.pose[0], p.pose[1], p.pose[2]));
        let mut coef = nalgebra::DVector::zeros(19);
        for k in 0..10 {
            coef[k] = p.shape[k];
        }
        for a in 0..3 {
            for b in 0..3 {
                coef[10 + 3 * a + b] = r1[(a, b)] - if a == b { 1.0 } else { 0.0 };
            }
        }
        let dense = basis * coef;
        let ours = apply_blendshapes(&t, &p).unwrap();
        for v in 0..nv {
            for k in 0..3 {
                assert!((ours[v][k] - t.mean[v][k] - dense[3 * v + k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn quarter_turn_of_a_child_joint() {
        // Joint 1 sits at the centroid of the third vertex column, x = 1.
        // A vertex fully bound to it one unit further along x swings to +y.
        let mut t = TemplateModel::toy_two_joint(0);
        t.shape_basis.iter_mut().for_each(|x| *x = 0.0);
        t.pose_basis.iter_mut().for_each(|x| *x = 0.0);
        let mut p = PriorParams::default();
        p.pose[2] = FRAC_PI_2;
        let joints = joint_positions(&t, &t.mean);
        assert!((joints[1][0] - 1.0).abs() < 1e-12);
        let mesh = skin(&t, &t.mean, &p).unwrap();
        // Vertex 6 = (1.5, 0, 0.1) has weight 1 on joint 1; a quarter turn
        // about z maps its offset (a, b, c) from the joint to (-b, a, c).
        let v = t.mean[6];
        let (a, b, c) = (v[0] - joints[1][0], v[1] - joints[1][1], v[2] - joints[1][2]);
        let expect = [joints[1][0] - b, joints[1][1] + a, joints[1][2] + c];
        assert!(max_diff(&[mesh.vertices[6]], &[expect]) < 1e-6, "{:?}", mesh.vertices[6]);
    }

    #[test]
    fn single_joint_quarter_turn() {
        let t = TemplateModel {
            mean: vec![[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            faces: vec![[0, 1, 2]],
            shape_basis: vec![0.0; 90],
            pose_basis: vec![],
            joint_regressor: vec![0.0, 1.0, 0.0],
            weights: vec![1.0; 3],
            parents: vec![-1],
            n_shape: 10,
            n_pose: 0,
        };
        let mut p = PriorParams::default();
        p.rotation = [0.0, 0.0, FRAC_PI_2];
        let m = skin(&t, &t.mean, &p).unwrap();
        assert!(max_diff(&m.vertices[..1], &[[0.0, 1.0, 0.0]]) < 1e-6);
    }

    #[test]
    fn pure_translation() {
        let t = TemplateModel::toy_humanoid();
        let mut p = PriorParams::default();
        p.translation = [0.0, 0.0, 1.0];
        let m = posed_mesh(&t, &p).unwrap();
        for (a, b) in m.vertices.iter().zip(&t.mean) {
            assert_eq!(*a, [b[0], b[1], b[2] + 1.0]);
        }
    }

    #[test]
    fn single_joint_weights_are_rigid() {
        let mut t = TemplateModel::toy_humanoid();
        let nj = t.n_joints();
        for row in t.weights.chunks_mut(nj) {
            row.iter_mut().for_each(|w| *w = 0.0);
            row[5] = 1.0;
        }
        let mut p = PriorParams::default();
        p.translation = [0.3, -0.2, 0.1];
        let m = posed_mesh(&t, &p).unwrap();
        let shifted: Vec<[f64; 3]> = t.mean.iter().map(|v| [v[0] + 0.3, v[1] - 0.2, v[2] + 0.1]).collect();
        assert!(max_diff(&m.vertices, &shifted) < 1e-12);
    }

    #[test]
    fn rigid_equivariance() {
        let t = TemplateModel::toy_humanoid();
        for seed in 0..5 {
            let p = random_params(seed, 0.4);
            let extra = rodrigues([0.4, -1.1, 0.3]);
            let base = posed_mesh(&t, &PriorParams {
                translation: [0.0; 3],
                ..p
            })
            .unwrap();
            let mut q = p;
            q.translation = [0.0; 3];
            q.rotation = super::super::rotation::log_map(&mul(&extra, &rodrigues(p.rotation)));
            let turned = posed_mesh(&t, &q).unwrap();
            let expect: Vec<[f64; 3]> = base.vertices.iter().map(|v| apply(&extra, *v)).collect();
            assert!(max_diff(&turned.vertices, &expect) < 1e-6);
        }
    }
}
