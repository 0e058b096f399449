//! Iterative prior fitting: similarity alignment by ICP followed by
//! finite-difference coordinate descent on shape, then pose.

use nalgebra::{Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{dist2, sample_surface_uniform, SurfaceSample};

use super::lbs::posed_mesh;
use super::rotation::{from_na, log_map, rodrigues, to_na, Mat3};
use super::template::TemplateModel;
use super::{PriorParams, POSE_DIM, SHAPE_DIM};

#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    /// Coordinate-descent steps after the similarity alignment.
    pub steps: usize,
    /// Finite-difference step for shape and pose coordinates.
    pub fd_step: f64,
    /// Points sampled on the template surface.
    pub model_samples: usize,
    /// Target points kept after subsampling.
    pub target_samples: usize,
    /// ICP iterations per rotation candidate.
    pub icp_iters: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            steps: 200,
            fd_step: 1e-2,
            model_samples: 600,
            target_samples: 1500,
            icp_iters: 12,
            seed: 0,
        }
    }
}

/// Symmetric Chamfer distance: mean squared nearest-neighbour distance from
/// `a` to `b` plus from `b` to `a`. Brute force.
pub fn chamfer(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    let one = |x: &[[f64; 3]], y: &[[f64; 3]]| {
        x.iter()
            .map(|p| y.iter().map(|q| dist2(*p, *q)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / x.len() as f64
    };
    one(a, b) + one(b, a)
}

fn nearest(p: [f64; 3], set: &[[f64; 3]]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, q) in set.iter().enumerate() {
        let d = dist2(p, *q);
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// Least-squares similarity `y = c R x + t` (Umeyama).
fn umeyama(pairs: &[([f64; 3], [f64; 3])]) -> Option<(f64, Mat3, [f64; 3])> {
    let n = pairs.len() as f64;
    let mx = pairs.iter().fold(Vector3::zeros(), |a, (x, _)| a + Vector3::from(*x)) / n;
    let my = pairs.iter().fold(Vector3::zeros(), |a, (_, y)| a + Vector3::from(*y)) / n;
    let mut cov = Matrix3::zeros();
    let mut var_x = 0.0;
    for (x, y) in pairs {
        let dx = Vector3::from(*x) - mx;
        let dy = Vector3::from(*y) - my;
        cov += dy * dx.transpose();
        var_x += dx.norm_squared();
    }
    cov /= n;
    var_x /= n;
    if var_x <= 0.0 {
        return None;
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * vt;
    let c = (svd.singular_values.component_mul(&d.diagonal())).sum() / var_x;
    let t = my - c * r * mx;
    Some((c, from_na(&r), [t.x, t.y, t.z]))
}

#[derive(Clone, Copy, Debug)]
struct Similarity {
    c: f64,
    r: Mat3,
    t: [f64; 3],
}

impl Similarity {
    fn apply(&self, x: [f64; 3]) -> [f64; 3] {
        let rx = super::rotation::apply(&self.r, x);
        std::array::from_fn(|k| self.c * rx[k] + self.t[k])
    }
}

/// Fitting state: template samples and the subsampled target.
struct Problem<'a> {
    template: &'a TemplateModel,
    samples: Vec<SurfaceSample>,
    target: Vec<[f64; 3]>,
}

impl Problem<'_> {
    /// Sample points of the posed model (no root rotation, translation or
    /// scale) in model units.
    fn articulated(&self, params: &PriorParams) -> Result<Vec<[f64; 3]>> {
        let mut p = *params;
        p.rotation = [0.0; 3];
        p.translation = [0.0; 3];
        let mesh = posed_mesh(self.template, &p)?;
        Ok(self
            .samples
            .iter()
            .map(|s| {
                let [a, b, c] = mesh.faces[s.face as usize].map(|i| mesh.vertices[i as usize]);
                std::array::from_fn(|k| s.bary[0] * a[k] + s.bary[1] * b[k] + s.bary[2] * c[k])
            })
            .collect())
    }

    fn to_voxel(&self, params: &PriorParams, pts: &[[f64; 3]]) -> Vec<[f64; 3]> {
        let r = rodrigues(params.rotation);
        pts.iter()
            .map(|x| {
                let rx = super::rotation::apply(&r, *x);
                std::array::from_fn(|k| params.scale * (rx[k] + params.translation[k]))
            })
            .collect()
    }

    fn cost(&self, params: &PriorParams) -> Result<f64> {
        let pts = self.articulated(params)?;
        Ok(chamfer(&self.to_voxel(params, &pts), &self.target))
    }

    /// ICP from an initial similarity, using correspondences both ways.
    fn icp(&self, model: &[[f64; 3]], mut sim: Similarity, iters: usize) -> (Similarity, f64) {
        for _ in 0..iters {
            let moved: Vec<[f64; 3]> = model.iter().map(|x| sim.apply(*x)).collect();
            let mut pairs: Vec<([f64; 3], [f64; 3])> = Vec::with_capacity(model.len() + self.target.len());
            for (x, m) in model.iter().zip(&moved) {
                pairs.push((*x, self.target[nearest(*m, &self.target)]));
            }
            for y in &self.target {
                pairs.push((model[nearest(*y, &moved)], *y));
            }
            match umeyama(&pairs) {
                Some((c, r, t)) if c > 0.0 && c.is_finite() => sim = Similarity { c, r, t },
                _ => break,
            }
        }
        let moved: Vec<[f64; 3]> = model.iter().map(|x| sim.apply(*x)).collect();
        (sim, chamfer(&moved, &self.target))
    }

    fn with_similarity(params: &PriorParams, sim: &Similarity) -> PriorParams {
        let mut p = *params;
        p.scale = sim.c;
        p.rotation = log_map(&sim.r);
        p.translation = sim.t.map(|v| v / sim.c);
        p
    }
}

fn centroid(pts: &[[f64; 3]]) -> [f64; 3] {
    let n = pts.len() as f64;
    let mut c = [0.0; 3];
    for p in pts {
        for k in 0..3 {
            c[k] += p[k] / n;
        }
    }
    c
}

fn spread(pts: &[[f64; 3]], c: [f64; 3]) -> f64 {
    pts.iter().map(|p| dist2(*p, c)).sum::<f64>() / pts.len() as f64
}

/// Principal axes as matrix columns, ordered by decreasing variance.
fn principal_axes(pts: &[[f64; 3]]) -> Matrix3<f64> {
    let c = Vector3::from(centroid(pts));
    let mut cov = Matrix3::zeros();
    for p in pts {
        let d = Vector3::from(*p) - c;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    Matrix3::from_columns(&order.map(|i| eig.eigenvectors.column(i).into_owned()))
}

/// The 24 rotations of the cube.
fn cube_rotations() -> Vec<Mat3> {
    let mut out = Vec::new();
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    for perm in perms {
        for signs in 0..8 {
            let mut m = [[0.0; 3]; 3];
            for (row, &col) in perm.iter().enumerate() {
                m[row][col] = if signs >> row & 1 == 1 { -1.0 } else { 1.0 };
            }
            if to_na(&m).determinant() > 0.0 {
                out.push(m);
            }
        }
    }
    out
}

/// Fits prior parameters to a target cloud given in voxel units.
///
/// Stage one aligns the rest-pose template by similarity ICP from every
/// cube rotation and both principal-axis frames, keeping the best. Stage
/// two runs `config.steps` coordinate-descent steps (Newton steps on
/// central differences) over shape, then pose, re-aligning the similarity
/// after every sweep. Returns the best parameters seen, canonicalized.
pub fn fit_params(target: &[[f64; 3]], template: &TemplateModel, config: &FitConfig) -> Result<PriorParams> {
    fit_detailed(target, template, config).map(|(p, _, _)| p)
}

/// Fit plus the sampled Chamfer cost after alignment and at the end.
fn fit_detailed(
    target: &[[f64; 3]],
    template: &TemplateModel,
    config: &FitConfig,
) -> Result<(PriorParams, f64, f64)> {
    if target.len() < 100 {
        return Err(Error::Fitting(format!("target has {} points, need at least 100", target.len())));
    }
    if target.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(Error::Fitting("target has non-finite points".into()));
    }
    let tc = centroid(target);
    let radius2 = tc.iter().map(|v| v * v).sum::<f64>();
    if spread(target, tc) <= 1e-18 * (1.0 + radius2) {
        return Err(Error::Fitting("all target points coincide".into()));
    }
    template.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let target: Vec<[f64; 3]> = if target.len() > config.target_samples {
        let mut idx = sample(&mut rng, target.len(), config.target_samples).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| target[i]).collect()
    } else {
        target.to_vec()
    };
    let samples = sample_surface_uniform(&template.rest_mesh(), config.model_samples.max(3), config.seed ^ 0x5eed)?;
    let problem = Problem {
        template,
        samples,
        target,
    };

    // Stage one: similarity alignment of the rest-pose model.
    let mut params = PriorParams::default();
    let rest = problem.articulated(&params)?;
    let (mc, tc) = (centroid(&rest), centroid(&problem.target));
    let c0 = (spread(&problem.target, tc) / spread(&rest, mc)).sqrt();
    let mut candidates = cube_rotations();
    let (am, at) = (principal_axes(&rest), principal_axes(&problem.target));
    for flip in [[1.0, 1.0, 1.0], [-1.0, -1.0, 1.0], [-1.0, 1.0, -1.0], [1.0, -1.0, -1.0]] {
        let mut a = at;
        for (k, f) in flip.iter().enumerate() {
            a.column_mut(k).scale_mut(*f);
        }
        let r = a * am.transpose();
        if r.determinant() > 0.0 {
            candidates.push(from_na(&r));
        } else {
            let mut a2 = a;
            a2.column_mut(2).scale_mut(-1.0);
            candidates.push(from_na(&(a2 * am.transpose())));
        }
    }
    let mut best: Option<(Similarity, f64)> = None;
    for r in candidates {
        let rm = super::rotation::apply(&r, mc);
        let init = Similarity {
            c: c0,
            r,
            t: std::array::from_fn(|k| tc[k] - c0 * rm[k]),
        };
        let (sim, cost) = problem.icp(&rest, init, config.icp_iters);
        if best.is_none_or(|(_, b)| cost < b) {
            best = Some((sim, cost));
        }
    }
    let (sim, _) = best.expect("at least one rotation candidate");
    params = Problem::with_similarity(&params, &sim);
    let mut best_cost = problem.cost(&params)?;
    let initial_cost = best_cost;
    if config.steps == 0 {
        return Ok((params.canonicalized(), initial_cost, best_cost));
    }

    // Stage two: coordinate descent on shape, then pose, with a similarity
    // refresh after every sweep.
    let coords: Vec<usize> = (0..SHAPE_DIM).chain(SHAPE_DIM..SHAPE_DIM + POSE_DIM).collect();
    let h = config.fd_step;
    let get = |p: &PriorParams, i: usize| if i < SHAPE_DIM { p.shape[i] } else { p.pose[i - SHAPE_DIM] };
    let set = |p: &mut PriorParams, i: usize, v: f64| {
        if i < SHAPE_DIM {
            p.shape[i] = v
        } else {
            p.pose[i - SHAPE_DIM] = v
        }
    };
    let limit = |i: usize| if i < SHAPE_DIM { 3.0 } else { std::f64::consts::PI };
    let mut step = 0;
    while step < config.steps {
        for &i in &coords {
            if step >= config.steps {
                break;
            }
            step += 1;
            let x = get(&params, i);
            let trial = |v: f64| -> Result<(f64, PriorParams)> {
                let mut p = params;
                set(&mut p, i, v.clamp(-limit(i), limit(i)));
                Ok((problem.cost(&p)?, p))
            };
            let (fp, pp) = trial(x + h)?;
            let (fm, pm) = trial(x - h)?;
            let g = (fp - fm) / (2.0 * h);
            let curv = (fp - 2.0 * best_cost + fm) / (h * h);
            let delta = if curv > 1e-12 { -g / curv } else { -g.signum() * 4.0 * h };
            let (fn_, pn) = trial(x + delta.clamp(-0.5, 0.5))?;
            for (f, p) in [(fp, pp), (fm, pm), (fn_, pn)] {
                if f < best_cost {
                    best_cost = f;
                    params = p;
                }
            }
        }
        let model = problem.articulated(&params)?;
        let current = Similarity {
            c: params.scale,
            r: rodrigues(params.rotation),
            t: params.translation.map(|v| v * params.scale),
        };
        let (sim, cost) = problem.icp(&model, current, 3);
        if cost < best_cost {
            best_cost = cost;
            params = Problem::with_similarity(&params, &sim);
        }
    }
    Ok((params.canonicalized(), initial_cost, best_cost))
}
