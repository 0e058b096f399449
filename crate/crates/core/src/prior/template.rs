//! Template body model and its binary file format.
//!
//! File layout (little-endian): magic `PGT1`, five `u32` counts
//! `V F J n_shape n_pose`, then `f32` arrays `mean (V*3)`,
//! `shape_basis (V*3*n_shape)`, `pose_basis (V*3*n_pose)`,
//! `joint_regressor (J*V)`, `weights (V*J)`, then `u32` faces `(F*3)` and
//! `i32` parents `(J)`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Mesh;

use super::{POSE_DIM, SHAPE_DIM};

const MAGIC: &[u8; 4] = b"PGT1";
/// Joints of the standard body skeleton.
pub const STANDARD_JOINTS: usize = 24;
/// Parent of each joint in the standard skeleton; the root has none.
pub const STANDARD_PARENTS: [i32; STANDARD_JOINTS] =
    [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21];

/// Mean mesh, blendshape bases, joint regressor, skinning weights and
/// skeleton of a parametric body.
///
/// Basis layouts: `shape_basis[(v * 3 + k) * n_shape + s]` and
/// `pose_basis[(v * 3 + k) * n_pose + m]`; `joint_regressor[j * V + v]`;
/// `weights[v * J + j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateModel {
    pub mean: Vec<[f64; 3]>,
    pub faces: Vec<[u32; 3]>,
    pub shape_basis: Vec<f64>,
    pub pose_basis: Vec<f64>,
    pub joint_regressor: Vec<f64>,
    pub weights: Vec<f64>,
    pub parents: Vec<i32>,
    pub n_shape: usize,
    pub n_pose: usize,
}

impl TemplateModel {
    pub fn n_vertices(&self) -> usize {
        self.mean.len()
    }

    pub fn n_joints(&self) -> usize {
        self.parents.len()
    }

    /// Checks array sizes, face indices, weight normalization and the
    /// skeleton (every parent precedes its child).
    pub fn validate(&self) -> Result<()> {
        let v = self.n_vertices();
        let j = self.n_joints();
        let cfg = |m: String| Err(Error::Config(m));
        if j == 0 || j > STANDARD_JOINTS {
            return cfg(format!("template has {j} joints, expected 1..={STANDARD_JOINTS}"));
        }
        if self.n_shape != SHAPE_DIM {
            return cfg(format!("template has {} shape components, expected {SHAPE_DIM}", self.n_shape));
        }
        if self.n_pose != 0 && self.n_pose != 9 * (j - 1) {
            return cfg(format!("pose basis width {} is neither 0 nor 9 x {}", self.n_pose, j - 1));
        }
        if 9 * (j - 1) > 3 * POSE_DIM {
            return cfg("skeleton larger than the pose vector".into());
        }
        let sizes = [
            ("shape basis", self.shape_basis.len(), v * 3 * self.n_shape),
            ("pose basis", self.pose_basis.len(), v * 3 * self.n_pose),
            ("joint regressor", self.joint_regressor.len(), j * v),
            ("skinning weights", self.weights.len(), v * j),
        ];
        for (name, got, want) in sizes {
            if got != want {
                return cfg(format!("{name} has {got} values, expected {want}"));
            }
        }
        if let Some(f) = self.faces.iter().find(|f| f.iter().any(|&i| i as usize >= v)) {
            return cfg(format!("face {f:?} indexes past {v} vertices"));
        }
        if self.parents[0] != -1 {
            return cfg("joint 0 must be the root".into());
        }
        for (k, &p) in self.parents.iter().enumerate().skip(1) {
            if p < 0 || p as usize >= k {
                return cfg(format!("joint {k} has parent {p}; parents must precede children"));
            }
        }
        for (vi, row) in self.weights.chunks(j).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&w| w < 0.0) || (sum - 1.0).abs() > 1e-6 {
                return cfg(format!("skinning weights of vertex {vi} sum to {sum}"));
            }
        }
        let all = self
            .mean
            .iter()
            .flatten()
            .chain(&self.shape_basis)
            .chain(&self.pose_basis)
            .chain(&self.joint_regressor);
        if all.into_iter().any(|x| !x.is_finite()) {
            return cfg("template holds non-finite values".into());
        }
        Ok(())
    }

    pub fn rest_mesh(&self) -> Mesh {
        Mesh {
            vertices: self.mean.clone(),
            faces: self.faces.clone(),
        }
    }

    /// Rounds every real value through `f32`, the precision of the file format.
    pub fn round_to_f32(&mut self) {
        let r = |x: &mut f64| *x = *x as f32 as f64;
        self.mean.iter_mut().flatten().for_each(r);
        self.shape_basis.iter_mut().for_each(r);
        self.pose_basis.iter_mut().for_each(r);
        self.joint_regressor.iter_mut().for_each(r);
        self.weights.iter_mut().for_each(r);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        for n in [self.mean.len(), self.faces.len(), self.parents.len(), self.n_shape, self.n_pose] {
            out.extend_from_slice(&(n as u32).to_le_bytes());
        }
        let reals = self
            .mean
            .iter()
            .flatten()
            .chain(&self.shape_basis)
            .chain(&self.pose_basis)
            .chain(&self.joint_regressor)
            .chain(&self.weights);
        for &x in reals {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
        for &i in self.faces.iter().flatten() {
            out.extend_from_slice(&i.to_le_bytes());
        }
        for &p in &self.parents {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<TemplateModel> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::at_byte(0, "not a template file"));
        }
        let mut counts = [0usize; 5];
        for c in &mut counts {
            *c = r.u32()? as usize;
        }
        let [v, f, j, n_shape, n_pose] = counts;
        let expected = v
            .checked_mul(3 * (1 + n_shape + n_pose) + 2 * j)
            .and_then(|n| n.checked_add(3 * f + j))
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(24));
        if expected != Some(bytes.len()) {
            return Err(Error::at_byte(4, "template counts do not match the file size"));
        }
        let mut floats = |n: usize| -> Result<Vec<f64>> { (0..n).map(|_| r.f32().map(|x| x as f64)).collect() };
        let flat = floats(v * 3)?;
        let shape_basis = floats(v * 3 * n_shape)?;
        let pose_basis = floats(v * 3 * n_pose)?;
        let joint_regressor = floats(j * v)?;
        let weights = floats(v * j)?;
        let mut faces = Vec::with_capacity(f);
        for _ in 0..f {
            faces.push([r.u32()?, r.u32()?, r.u32()?]);
        }
        let parents = (0..j).map(|_| r.u32().map(|x| x as i32)).collect::<Result<Vec<_>>>()?;
        let t = TemplateModel {
            mean: flat.chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
            faces,
            shape_basis,
            pose_basis,
            joint_regressor,
            weights,
            parents,
            n_shape,
            n_pose,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<TemplateModel> {
        TemplateModel::from_bytes(&fs::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::at_byte(self.bytes.len(), "template file truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Picks the template for a gender value: the second template when
/// `gender >= 0.5` and one is available, otherwise the first.
pub fn select_template(templates: &[TemplateModel], gender: f64) -> Option<&TemplateModel> {
    if gender >= 0.5 && templates.len() > 1 {
        templates.get(1)
    } else {
        templates.first()
    }
}

// ---------------------------------------------------------------------------
// Procedural templates

/// Rest joint positions of the toy body (metres, y up, facing +z, body's
/// left at +x, arms spread).
const TOY_JOINTS: [[f64; 3]; STANDARD_JOINTS] = [
    [0.0, 0.95, 0.0],
    [0.09, 0.88, 0.0],
    [-0.09, 0.88, 0.0],
    [0.0, 1.05, -0.01],
    [0.10, 0.50, 0.01],
    [-0.10, 0.50, 0.01],
    [0.0, 1.18, -0.01],
    [0.10, 0.09, -0.01],
    [-0.10, 0.09, -0.01],
    [0.0, 1.30, -0.01],
    [0.11, 0.03, 0.12],
    [-0.11, 0.03, 0.12],
    [0.0, 1.50, 0.0],
    [0.07, 1.42, -0.01],
    [-0.07, 1.42, -0.01],
    [0.0, 1.60, 0.01],
    [0.18, 1.42, -0.01],
    [-0.18, 1.42, -0.01],
    [0.44, 1.42, -0.01],
    [-0.44, 1.42, -0.01],
    [0.68, 1.42, -0.01],
    [-0.68, 1.42, -0.01],
    [0.78, 1.42, 0.0],
    [-0.78, 1.42, 0.0],
];

const TOY_RADII: [f64; STANDARD_JOINTS] = [
    0.15, 0.08, 0.08, 0.14, 0.06, 0.06, 0.15, 0.045, 0.045, 0.16, 0.04, 0.04, 0.06, 0.06, 0.06, 0.07, 0.055, 0.055,
    0.045, 0.045, 0.035, 0.035, 0.03, 0.03,
];

const RING: usize = 8;

#[derive(Clone, Copy, PartialEq)]
enum Part {
    Torso,
    Leg,
    Arm,
    Head,
}

fn part_of(joint: usize) -> Part {
    match joint {
        1 | 2 | 4 | 5 | 7 | 8 | 10 | 11 => Part::Leg,
        15 => Part::Head,
        13 | 14 | 16..=23 => Part::Arm,
        _ => Part::Torso,
    }
}

struct Builder {
    mean: Vec<[f64; 3]>,
    faces: Vec<[u32; 3]>,
    weights: Vec<[f64; STANDARD_JOINTS]>,
    /// Closest point on the bone axis, per vertex.
    axis: Vec<[f64; 3]>,
    part: Vec<Part>,
    /// First ring generated around each joint.
    joint_ring: [Option<usize>; STANDARD_JOINTS],
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn frame(d: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let helper = if d[1].abs() < 0.9 { [0.0, 1.0, 0.0] } else { [0.0, 0.0, 1.0] };
    let u = normalize(crate::geometry::cross3(d, helper));
    let w = crate::geometry::cross3(d, u);
    (u, w)
}

impl Builder {
    /// Tube from `a` to `b` with one ring per `(t, radius, weight of joint
    /// ja)`; the remaining weight goes to `jb`. Optionally closes the far end.
    fn tube(&mut self, a: [f64; 3], b: [f64; 3], ja: usize, jb: usize, rings: &[(f64, f64, f64)], cap: bool) {
        let d = normalize(crate::geometry::sub3(b, a));
        let (u, w) = frame(d);
        let first = self.mean.len();
        for &(t, r, wa) in rings {
            let c: [f64; 3] = std::array::from_fn(|k| a[k] + t * (b[k] - a[k]));
            for s in 0..RING {
                let ang = 2.0 * std::f64::consts::PI * s as f64 / RING as f64;
                let (sn, cs) = ang.sin_cos();
                self.mean.push(std::array::from_fn(|k| c[k] + r * (cs * u[k] + sn * w[k])));
                let mut wt = [0.0; STANDARD_JOINTS];
                wt[ja] += wa;
                wt[jb] += 1.0 - wa;
                self.weights.push(wt);
                self.axis.push(c);
                self.part.push(part_of(ja));
            }
        }
        if self.joint_ring[ja].is_none() {
            self.joint_ring[ja] = Some(first);
        }
        for ring in 0..rings.len() - 1 {
            let r0 = first + ring * RING;
            let r1 = r0 + RING;
            for s in 0..RING {
                let s1 = (s + 1) % RING;
                let (p, q, m, n) = ((r0 + s) as u32, (r0 + s1) as u32, (r1 + s) as u32, (r1 + s1) as u32);
                self.faces.push([p, q, n]);
                self.faces.push([p, n, m]);
            }
        }
        if cap {
            let last = first + (rings.len() - 1) * RING;
            let tip = self.mean.len() as u32;
            self.mean.push(b);
            let mut wt = [0.0; STANDARD_JOINTS];
            wt[ja] += rings.last().unwrap().2;
            wt[jb] += 1.0 - rings.last().unwrap().2;
            self.weights.push(wt);
            self.axis.push(b);
            self.part.push(part_of(ja));
            for s in 0..RING {
                let s1 = (s + 1) % RING;
                self.faces.push([(last + s) as u32, (last + s1) as u32, tip]);
            }
        }
    }
}

/// Smooth per-vertex displacement fields used as the toy shape basis.
fn toy_shape_field(k: usize, p: [f64; 3], axis: [f64; 3], part: Part) -> [f64; 3] {
    let radial = crate::geometry::sub3(p, axis);
    let pelvis = TOY_JOINTS[0];
    match k {
        // Overall size about the pelvis.
        0 => std::array::from_fn(|i| 0.05 * (p[i] - pelvis[i])),
        // Girth.
        1 => radial.map(|r| 0.15 * r),
        // Leg length: lower points move further down.
        2 => [0.0, -0.05 * ((pelvis[1] - p[1]).max(0.0) / pelvis[1]), 0.0],
        // Arm span.
        3 => {
            let reach = (p[0].abs() - 0.18).max(0.0) / 0.6;
            [0.05 * p[0].signum() * reach, 0.0, 0.0]
        }
        // Shoulder width.
        4 => {
            let upper = ((p[1] - 1.2) / 0.3).clamp(0.0, 1.0);
            [0.03 * upper * (p[0] / 0.2).clamp(-1.0, 1.0), 0.0, 0.0]
        }
        // Belly.
        5 if part == Part::Torso => {
            let band = (1.0 - ((p[1] - 1.1) / 0.2).abs()).max(0.0);
            [0.0, 0.0, 0.05 * band * (radial[2] / 0.15).max(0.0)]
        }
        // Hip width.
        6 => {
            let band = (1.0 - ((p[1] - 0.9) / 0.15).abs()).max(0.0);
            [0.03 * band * (p[0] / 0.15).clamp(-1.0, 1.0), 0.0, 0.0]
        }
        // Head size.
        7 if part == Part::Head => {
            let c = [0.0, 1.7, 0.01];
            std::array::from_fn(|i| 0.1 * (p[i] - c[i]))
        }
        // Torso length: everything above the pelvis rises.
        8 => [0.0, 0.04 * ((p[1] - 1.0) / 0.3).clamp(0.0, 1.0), 0.0],
        // Limb thickness.
        9 if matches!(part, Part::Arm | Part::Leg) => radial.map(|r| 0.2 * r),
        _ => [0.0; 3],
    }
}

impl TemplateModel {
    /// Procedural 24-joint humanoid (about 700 vertices) with ten smooth
    /// shape fields and no pose blendshapes. Values are `f32`-exact, so
    /// the model survives a file round trip unchanged.
    pub fn toy_humanoid() -> TemplateModel {
        let mut b = Builder {
            mean: Vec::new(),
            faces: Vec::new(),
            weights: Vec::new(),
            axis: Vec::new(),
            part: Vec::new(),
            joint_ring: [None; STANDARD_JOINTS],
        };
        let j = TOY_JOINTS;
        let r = TOY_RADII;
        for child in 1..STANDARD_JOINTS {
            let parent = STANDARD_PARENTS[child] as usize;
            let rings = [
                (0.0, r[parent], 1.0),
                (0.5, 0.5 * (r[parent] + r[child]), 0.875),
                (1.0, r[child], 0.5),
            ];
            b.tube(j[parent], j[child], parent, child, &rings, false);
        }
        // End pieces: toes, fingers and the head.
        for (jt, tip) in [(10, [0.11, 0.02, 0.19]), (11, [-0.11, 0.02, 0.19]), (22, [0.86, 1.42, 0.0]), (23, [-0.86, 1.42, 0.0])] {
            let rings = [(0.0, r[jt], 1.0), (0.6, 0.8 * r[jt], 1.0)];
            b.tube(j[jt], tip, jt, jt, &rings, true);
        }
        let crown = [0.0, 1.82, 0.01];
        b.tube(j[15], crown, 15, 15, &[(0.0, 0.07, 1.0), (0.3, 0.1, 1.0), (0.7, 0.095, 1.0), (0.92, 0.05, 1.0)], true);

        let v = b.mean.len();
        let mut shape_basis = vec![0.0; v * 3 * SHAPE_DIM];
        for vi in 0..v {
            for k in 0..SHAPE_DIM {
                let d = toy_shape_field(k, b.mean[vi], b.axis[vi], b.part[vi]);
                for c in 0..3 {
                    shape_basis[(vi * 3 + c) * SHAPE_DIM + k] = d[c];
                }
            }
        }
        let mut joint_regressor = vec![0.0; STANDARD_JOINTS * v];
        for (jt, ring) in b.joint_ring.iter().enumerate() {
            let start = ring.expect("every joint starts a tube");
            for s in 0..RING {
                joint_regressor[jt * v + start + s] = 1.0 / RING as f64;
            }
        }
        let mut t = TemplateModel {
            mean: b.mean,
            faces: b.faces,
            shape_basis,
            pose_basis: Vec::new(),
            joint_regressor,
            weights: b.weights.into_iter().flatten().collect(),
            parents: STANDARD_PARENTS.to_vec(),
            n_shape: SHAPE_DIM,
            n_pose: 0,
        };
        t.round_to_f32();
        t
    }

    /// Eight-vertex, two-joint bar with random bases, for checking the
    /// model formulas against direct evaluation.
    pub fn toy_two_joint(seed: u64) -> TemplateModel {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut mean = Vec::new();
        for x in 0..4 {
            for y in 0..2 {
                mean.push([x as f64 * 0.5, y as f64 * 0.3, 0.1 * (x % 2) as f64]);
            }
        }
        let v = mean.len();
        let mut rand_vec = |n: usize, s: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(-s..s)).collect() };
        let shape_basis = rand_vec(v * 3 * SHAPE_DIM, 0.1);
        let pose_basis = rand_vec(v * 3 * 9, 0.1);
        let mut joint_regressor = vec![0.0; 2 * v];
        // Joint 0 at the centroid of the first column, joint 1 of the third.
        for vi in 0..2 {
            joint_regressor[vi] = 0.5;
            joint_regressor[v + 4 + vi] = 0.5;
        }
        let mut weights = Vec::new();
        for vi in 0..v {
            let x = vi / 2;
            let w1 = [0.0, 0.25, 0.75, 1.0][x];
            weights.extend_from_slice(&[1.0 - w1, w1]);
        }
        let faces = vec![[0, 2, 3], [0, 3, 1], [2, 4, 5], [2, 5, 3], [4, 6, 7], [4, 7, 5]];
        let mut t = TemplateModel {
            mean,
            faces,
            shape_basis,
            pose_basis,
            joint_regressor,
            weights,
            parents: vec![-1, 0],
            n_shape: SHAPE_DIM,
            n_pose: 9,
        };
        t.round_to_f32();
        t
    }
}
