//! Point clouds, meshes, PLY files, voxelization and surface sampling.

pub mod ply;
pub mod sampling;
pub mod voxel;

pub use ply::{read_ply, read_ply_bytes, write_ply, write_ply_bytes, PlyData, PlyFormat};
pub use sampling::{sample_surface_poisson, sample_surface_poisson_detailed, sample_surface_uniform, SurfaceSample};
pub use voxel::{lattice_points, voxelize, voxelize_in_box, VoxelBox};

use crate::error::{Error, Result};
use crate::sparse::Coord3;

/// A set of 3D points. When `precision` is set the points are lattice
/// coordinates in `[0, 2^precision)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub precision: Option<u8>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        PointCloud { points, precision: None }
    }

    /// Lattice cloud from integer coordinates.
    pub fn from_coords(coords: &[Coord3], precision: u8) -> Self {
        PointCloud {
            points: coords.iter().map(|c| [c.x as f64, c.y as f64, c.z as f64]).collect(),
            precision: Some(precision),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// True when every component is an integer.
    pub fn is_integral(&self) -> bool {
        self.points.iter().all(|p| p.iter().all(|v| v.fract() == 0.0 && v.is_finite()))
    }

    /// Integer coordinates; fails when any component is fractional or
    /// outside the 32-bit range.
    pub fn to_coords(&self) -> Result<Vec<Coord3>> {
        self.points
            .iter()
            .map(|p| {
                if p.iter().all(|v| v.fract() == 0.0 && v.abs() < i32::MAX as f64) {
                    Ok(Coord3::new(p[0] as i32, p[1] as i32, p[2] as i32))
                } else {
                    Err(Error::Contract(format!("point {p:?} is not a lattice coordinate")))
                }
            })
            .collect()
    }

    /// Axis-aligned bounds `(min, max)`; `None` for an empty cloud.
    pub fn bounds(&self) -> Option<([f64; 3], [f64; 3])> {
        let first = *self.points.first()?;
        let mut lo = first;
        let mut hi = first;
        for p in &self.points {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        Some((lo, hi))
    }
}

/// Triangle mesh.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[u32; 3]>,
}

impl Mesh {
    /// Validates face indices and drops zero-area faces.
    pub fn new(vertices: Vec<[f64; 3]>, faces: Vec<[u32; 3]>) -> Result<Self> {
        let n = vertices.len() as u32;
        if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i >= n)) {
            return Err(Error::Contract(format!("face {f:?} indexes past {n} vertices")));
        }
        let mut mesh = Mesh { vertices, faces };
        mesh.faces.retain(|f| {
            let [a, b, c] = f.map(|i| mesh.vertices[i as usize]);
            triangle_area(a, b, c) > 0.0
        });
        Ok(mesh)
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.faces[f].map(|i| self.vertices[i as usize]);
        triangle_area(a, b, c)
    }

    pub fn total_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    pub fn scaled(&self, s: f64) -> Mesh {
        Mesh {
            vertices: self.vertices.iter().map(|v| [v[0] * s, v[1] * s, v[2] * s]).collect(),
            faces: self.faces.clone(),
        }
    }
}

pub(crate) fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub(crate) fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = sub3(a, b);
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

pub fn triangle_area(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> f64 {
    let n = cross3(sub3(b, a), sub3(c, a));
    0.5 * (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt()
}

/// Axis-aligned unit cube `[0,1]^3` as 12 triangles.
pub fn unit_cube_mesh() -> Mesh {
    let mut vertices = Vec::new();
    for x in 0..2 {
        for y in 0..2 {
            for z in 0..2 {
                vertices.push([x as f64, y as f64, z as f64]);
            }
        }
    }
    // vertex index = 4x + 2y + z
    let quads = [
        [0, 1, 3, 2], // x = 0
        [4, 6, 7, 5], // x = 1
        [0, 4, 5, 1], // y = 0
        [2, 3, 7, 6], // y = 1
        [0, 2, 6, 4], // z = 0
        [1, 5, 7, 3], // z = 1
    ];
    let faces = quads
        .iter()
        .flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]])
        .collect();
    Mesh { vertices, faces }
}
