use crate::error::{Error, Result};
use crate::sparse::Coord3;

use super::PointCloud;

/// Keeps the largest real coordinate strictly below `2^p` after scaling.
const EDGE_EPS: f64 = 1e-6;

/// Normalization box: a corner and one isotropic edge length.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoxelBox {
    pub min: [f64; 3],
    pub extent: f64,
}

impl VoxelBox {
    /// Tightest isotropic box around the cloud.
    pub fn around(cloud: &PointCloud) -> Result<VoxelBox> {
        let (lo, hi) = cloud
            .bounds()
            .ok_or_else(|| Error::Degenerate("cannot voxelize an empty cloud".into()))?;
        let extent = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
        if !(extent > 0.0 && extent.is_finite()) {
            return Err(Error::Degenerate(format!("cloud extent is {extent}")));
        }
        Ok(VoxelBox { min: lo, extent })
    }
}

fn check_precision(p: u8) -> Result<()> {
    if !(1..=16).contains(&p) {
        return Err(Error::Config(format!("precision {p} outside [1, 16]")));
    }
    Ok(())
}

/// Quantizes a cloud onto the `2^p` lattice, sorted and deduplicated.
/// Integral clouds already inside `[0, 2^p)` keep their coordinates.
pub fn voxelize(cloud: &PointCloud, p: u8) -> Result<PointCloud> {
    check_precision(p)?;
    let bound = (1u32 << p) as f64;
    let in_range = cloud
        .points
        .iter()
        .all(|q| q.iter().all(|&v| v.fract() == 0.0 && (0.0..bound).contains(&v)));
    if in_range && !cloud.is_empty() {
        let coords = cloud.to_coords()?;
        return Ok(PointCloud::from_coords(&sort_dedup(coords), p));
    }
    voxelize_in_box(cloud, p, &VoxelBox::around(cloud)?)
}

/// Quantizes with a caller-supplied box; points outside it are clamped to
/// the boundary voxels.
pub fn voxelize_in_box(cloud: &PointCloud, p: u8, bbox: &VoxelBox) -> Result<PointCloud> {
    check_precision(p)?;
    if !(bbox.extent > 0.0 && bbox.extent.is_finite()) {
        return Err(Error::Degenerate(format!("box extent is {}", bbox.extent)));
    }
    let top = (1i64 << p) - 1;
    let scale = ((1u32 << p) as f64 - EDGE_EPS) / bbox.extent;
    let coords = cloud
        .points
        .iter()
        .map(|q| {
            let v = |k: usize| (((q[k] - bbox.min[k]) * scale).floor() as i64).clamp(0, top) as i32;
            Coord3::new(v(0), v(1), v(2))
        })
        .collect();
    Ok(PointCloud::from_coords(&sort_dedup(coords), p))
}

/// Floors real points that are already in lattice units, dropping those
/// outside `[0, bound)^3`.
pub fn lattice_points(points: &[[f64; 3]], bound: i32) -> Vec<Coord3> {
    let coords = points
        .iter()
        .filter_map(|q| {
            let f = q.map(|v| v.floor());
            if f.iter().all(|&v| v >= 0.0 && v < bound as f64) {
                Some(Coord3::new(f[0] as i32, f[1] as i32, f[2] as i32))
            } else {
                None
            }
        })
        .collect();
    sort_dedup(coords)
}

fn sort_dedup(mut coords: Vec<Coord3>) -> Vec<Coord3> {
    coords.sort_unstable();
    coords.dedup();
    coords
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn floor_arithmetic() {
        let cloud = PointCloud::new(vec![[0.3, 0.7, 0.1], [0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]);
        let v = voxelize(&cloud, 2).unwrap();
        assert_eq!(
            v.to_coords().unwrap(),
            vec![Coord3::new(0, 0, 0), Coord3::new(1, 2, 0), Coord3::new(3, 3, 3)]
        );
        assert_eq!(v.precision, Some(2));
    }

    #[test]
    fn duplicates_collapse() {
        let cloud = PointCloud::new(vec![[0.0, 0.0, 0.0], [0.01, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert_eq!(voxelize(&cloud, 2).unwrap().len(), 2);
    }

    #[test]
    fn isotropic_extent() {
        // y spans 2 units, x and z only 0.5; all axes share the y extent.
        let cloud = PointCloud::new(vec![[0.0, 0.0, 0.0], [0.5, 2.0, 0.5]]);
        let v = voxelize(&cloud, 3).unwrap().to_coords().unwrap();
        assert_eq!(v, vec![Coord3::new(0, 0, 0), Coord3::new(1, 7, 1)]);
    }

    #[test]
    fn degenerate_inputs() {
        let one = PointCloud::new(vec![[0.5, 0.5, 0.5]; 3]);
        assert!(matches!(voxelize(&one, 4), Err(Error::Degenerate(_))));
        assert!(matches!(voxelize(&PointCloud::default(), 4), Err(Error::Degenerate(_))));
        assert!(matches!(voxelize(&one, 0), Err(Error::Config(_))));
        assert!(matches!(voxelize(&one, 17), Err(Error::Config(_))));
    }

    #[test]
    fn integral_cloud_passes_through() {
        let cloud = PointCloud::new(vec![[5.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        let v = voxelize(&cloud, 3).unwrap();
        assert_eq!(v.to_coords().unwrap(), vec![Coord3::new(0, 0, 0), Coord3::new(5, 0, 0)]);
    }

    #[test]
    fn lattice_points_floor_and_clip() {
        let c = lattice_points(&[[1.5, 2.9, 0.0], [-0.1, 0.0, 0.0], [8.0, 1.0, 1.0], [1.2, 2.1, 0.7]], 8);
        assert_eq!(c, vec![Coord3::new(1, 2, 0)]);
    }

    proptest! {
        #[test]
        fn idempotent(pts in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0), 2..100), p in 1u8..10) {
            let cloud = PointCloud::new(pts.into_iter().map(|(x, y, z)| [x, y, z]).collect());
            prop_assume!(VoxelBox::around(&cloud).is_ok());
            let once = voxelize(&cloud, p).unwrap();
            let twice = voxelize(&once, p).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
