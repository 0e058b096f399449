//! Coordinate-indexed sparse 3D tensors and the convolution primitives
//! built on them.
//!
//! A [`SparseTensor`] stores only occupied lattice coordinates, kept sorted
//! lexicographically, with one feature row per coordinate. Coordinate sets
//! are reference counted so that stride-1 layers share them with their
//! inputs.

mod map;
mod ops;

pub use map::KernelMap;
pub use ops::{concat_features, conv_on_coords, prune_topk, sparse_conv, topk_rows, transposed_conv, UnionMap};

use std::sync::Arc;

use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Integer lattice coordinate. Ordering is lexicographic on (x, y, z).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Coord3 {
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

impl Coord3 {
    pub const ORIGIN: Coord3 = Coord3 { x: 0, y: 0, z: 0 };

    #[inline]
    pub const fn new(x: i32, y: i32, z: i32) -> Self {
        Coord3 { x, y, z }
    }

    /// Componentwise floor division by two.
    #[inline]
    pub fn halve(self) -> Self {
        Coord3::new(self.x >> 1, self.y >> 1, self.z >> 1)
    }

    #[inline]
    pub fn double(self) -> Self {
        Coord3::new(self.x * 2, self.y * 2, self.z * 2)
    }

    #[inline]
    pub fn offset(self, o: Coord3) -> Self {
        Coord3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    /// True when every component lies in `[0, bound)`.
    #[inline]
    pub fn in_cube(self, bound: i32) -> bool {
        (0..bound).contains(&self.x) && (0..bound).contains(&self.y) && (0..bound).contains(&self.z)
    }

    pub fn to_array(self) -> [i32; 3] {
        [self.x, self.y, self.z]
    }
}

impl From<[i32; 3]> for Coord3 {
    fn from(a: [i32; 3]) -> Self {
        Coord3::new(a[0], a[1], a[2])
    }
}

/// Sorted, duplicate-free coordinate list with a hash index from coordinate
/// to row.
#[derive(Clone, Debug, Default)]
pub struct CoordSet {
    coords: Vec<Coord3>,
    index: FxHashMap<Coord3, u32>,
}

impl PartialEq for CoordSet {
    fn eq(&self, other: &Self) -> bool {
        self.coords == other.coords
    }
}

impl CoordSet {
    /// Sorts and deduplicates.
    pub fn from_unsorted(mut coords: Vec<Coord3>) -> Self {
        coords.sort_unstable();
        coords.dedup();
        Self::from_sorted_unique(coords)
    }

    /// `coords` must already be strictly increasing.
    pub fn from_sorted_unique(coords: Vec<Coord3>) -> Self {
        debug_assert!(coords.windows(2).all(|w| w[0] < w[1]));
        let mut index = FxHashMap::with_capacity_and_hasher(coords.len(), Default::default());
        for (i, c) in coords.iter().enumerate() {
            index.insert(*c, i as u32);
        }
        CoordSet { coords, index }
    }

    pub fn empty() -> Self {
        CoordSet::default()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    #[inline]
    pub fn get(&self, c: &Coord3) -> Option<usize> {
        self.index.get(c).map(|&i| i as usize)
    }

    #[inline]
    pub fn contains(&self, c: &Coord3) -> bool {
        self.index.contains_key(c)
    }

    pub fn as_slice(&self) -> &[Coord3] {
        &self.coords
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Coord3> {
        self.coords.iter()
    }

    /// The set `{ floor(c / 2) }`.
    pub fn downsample(&self) -> CoordSet {
        CoordSet::from_unsorted(self.coords.iter().map(|c| c.halve()).collect())
    }

    pub fn into_vec(self) -> Vec<Coord3> {
        self.coords
    }
}

/// Kernel offsets `[-1, 0, 1]^3` in lexicographic order.
pub fn cube_offsets() -> Vec<Coord3> {
    let mut v = Vec::with_capacity(27);
    for x in -1..=1 {
        for y in -1..=1 {
            for z in -1..=1 {
                v.push(Coord3::new(x, y, z));
            }
        }
    }
    v
}

/// Kernel offsets `{0, 1}^3`, the 8-to-1 downsampling footprint.
pub fn pair_offsets() -> Vec<Coord3> {
    let mut v = Vec::with_capacity(8);
    for x in 0..=1 {
        for y in 0..=1 {
            for z in 0..=1 {
                v.push(Coord3::new(x, y, z));
            }
        }
    }
    v
}

/// The single offset `(0, 0, 0)`.
pub fn point_offsets() -> Vec<Coord3> {
    vec![Coord3::ORIGIN]
}

/// Coordinate set plus a row-major feature matrix.
#[derive(Clone, Debug)]
pub struct SparseTensor<T: Scalar = f32> {
    coords: Arc<CoordSet>,
    feats: Vec<T>,
    channels: usize,
    scale: u32,
}

impl<T: Scalar> PartialEq for SparseTensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.channels == other.channels
            && self.scale == other.scale
            && self.coords.as_slice() == other.coords.as_slice()
            && self.feats == other.feats
    }
}

impl<T: Scalar> SparseTensor<T> {
    /// Builds a tensor from possibly unsorted rows. Duplicate coordinates and
    /// non-finite features are rejected.
    pub fn new(coords: Vec<Coord3>, feats: Vec<T>, channels: usize, scale: u32) -> Result<Self> {
        if feats.len() != coords.len() * channels {
            return Err(Error::Config(format!(
                "{} feature values for {} coordinates x {} channels",
                feats.len(),
                coords.len(),
                channels
            )));
        }
        if feats.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("non-finite feature value".into()));
        }
        let mut order: Vec<usize> = (0..coords.len()).collect();
        order.sort_unstable_by_key(|&i| coords[i]);
        if order.windows(2).any(|w| coords[w[0]] == coords[w[1]]) {
            return Err(Error::Contract("duplicate coordinate in sparse tensor".into()));
        }
        let sorted: Vec<Coord3> = order.iter().map(|&i| coords[i]).collect();
        let mut f = Vec::with_capacity(feats.len());
        for &i in &order {
            f.extend_from_slice(&feats[i * channels..(i + 1) * channels]);
        }
        Ok(SparseTensor {
            coords: Arc::new(CoordSet::from_sorted_unique(sorted)),
            feats: f,
            channels,
            scale,
        })
    }

    /// Wraps an existing coordinate set; `feats` rows follow its order.
    pub fn from_parts(coords: Arc<CoordSet>, feats: Vec<T>, channels: usize, scale: u32) -> Result<Self> {
        if feats.len() != coords.len() * channels {
            return Err(Error::Config(format!(
                "{} feature values for {} coordinates x {} channels",
                feats.len(),
                coords.len(),
                channels
            )));
        }
        Ok(SparseTensor {
            coords,
            feats,
            channels,
            scale,
        })
    }

    /// Every coordinate carries the constant feature `value`.
    pub fn filled(coords: Arc<CoordSet>, channels: usize, scale: u32, value: T) -> Self {
        let feats = vec![value; coords.len() * channels];
        SparseTensor {
            coords,
            feats,
            channels,
            scale,
        }
    }

    pub fn empty(channels: usize, scale: u32) -> Self {
        SparseTensor {
            coords: Arc::new(CoordSet::empty()),
            feats: Vec::new(),
            channels,
            scale,
        }
    }

    pub fn coords(&self) -> &[Coord3] {
        self.coords.as_slice()
    }

    pub fn coord_set(&self) -> &Arc<CoordSet> {
        &self.coords
    }

    pub fn feats(&self) -> &[T] {
        &self.feats
    }

    pub fn feats_mut(&mut self) -> &mut [T] {
        &mut self.feats
    }

    pub fn into_feats(self) -> Vec<T> {
        self.feats
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.feats[i * self.channels..(i + 1) * self.channels]
    }

    /// Feature row at `c`, if occupied.
    pub fn feature_at(&self, c: &Coord3) -> Option<&[T]> {
        self.coords.get(c).map(|i| self.row(i))
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn scale(&self) -> u32 {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Convolution weights: one `in_channels x out_channels` matrix per offset,
/// stored offset-major then row-major (`weights[(k * in + i) * out + o]`).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel<T: Scalar = f32> {
    pub offsets: Vec<Coord3>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: Vec<T>,
    pub bias: Option<Vec<T>>,
    pub stride: u32,
}

impl<T: Scalar> ConvKernel<T> {
    /// Zero-initialized kernel.
    pub fn zeros(offsets: Vec<Coord3>, in_channels: usize, out_channels: usize, stride: u32, bias: bool) -> Self {
        let n = offsets.len() * in_channels * out_channels;
        ConvKernel {
            offsets,
            in_channels,
            out_channels,
            weights: vec![T::ZERO; n],
            bias: bias.then(|| vec![T::ZERO; out_channels]),
            stride,
        }
    }

    /// Single-offset identity map (`in == out` required by callers).
    pub fn identity(channels: usize) -> Self {
        let mut k = ConvKernel::zeros(point_offsets(), channels, channels, 1, false);
        for c in 0..channels {
            k.weights[c * channels + c] = T::ONE;
        }
        k
    }

    pub fn matrix(&self, k: usize) -> &[T] {
        let n = self.in_channels * self.out_channels;
        &self.weights[k * n..(k + 1) * n]
    }

    pub fn matrix_mut(&mut self, k: usize) -> &mut [T] {
        let n = self.in_channels * self.out_channels;
        &mut self.weights[k * n..(k + 1) * n]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.stride == 1 || self.stride == 2) {
            return Err(Error::Config(format!("stride {} not in {{1, 2}}", self.stride)));
        }
        if self.offsets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("kernel offsets must be unique and sorted".into()));
        }
        if self.weights.len() != self.offsets.len() * self.in_channels * self.out_channels {
            return Err(Error::Config("weight count does not match offsets x channels".into()));
        }
        if let Some(b) = &self.bias {
            if b.len() != self.out_channels {
                return Err(Error::Config("bias length does not match out channels".into()));
            }
        }
        Ok(())
    }
}
