//! The three sub-networks: multiscale feature extraction, feature warping
//! onto the source's coarse coordinates, and occupancy-driven propagation
//! back to full resolution.

mod file;
pub(crate) mod forward;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::scalar::{cast_vec, Scalar};
use crate::sparse::{cube_offsets, pair_offsets, point_offsets, ConvKernel, Coord3, CoordSet, SparseTensor};

pub use file::{Model, MODEL_MAGIC};
pub use forward::Prune;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Number of scales `L`.
    pub scales: usize,
    /// Width of each scale `1..=L`.
    pub channels: Vec<usize>,
    pub latent_channels: usize,
    /// Whether blocks carry a VRN unit.
    pub vrn: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            scales: 3,
            channels: vec![16, 32, 64],
            latent_channels: 8,
            vrn: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Cube,
    Pair,
    Point,
}

impl Shape {
    fn offsets(self) -> Vec<Coord3> {
        match self {
            Shape::Cube => cube_offsets(),
            Shape::Pair => pair_offsets(),
            Shape::Point => point_offsets(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct LayerSpec {
    pub name: String,
    shape: Shape,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: u32,
    pub bias: bool,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales == 0 || self.scales > 8 {
            return Err(Error::Config(format!("scale count {} not in 1..=8", self.scales)));
        }
        if self.channels.len() != self.scales {
            return Err(Error::Config(format!(
                "{} widths for {} scales",
                self.channels.len(),
                self.scales
            )));
        }
        if self.channels.iter().chain([&self.latent_channels]).any(|&c| c == 0 || c > 4096) {
            return Err(Error::Config("widths must be in 1..=4096".into()));
        }
        if self.vrn {
            if let Some(c) = self.channels.iter().find(|&&c| c % 2 == 1) {
                return Err(Error::Config(format!("VRN units need even widths, got {c}")));
            }
        }
        Ok(())
    }

    /// Channels of the extractor's output at scale `l` (1-based).
    pub fn scale_channels(&self, l: usize) -> usize {
        if l == self.scales {
            self.latent_channels
        } else {
            self.channels[l - 1]
        }
    }

    /// Channels of the warping chain after block `l`.
    fn warp_channels(&self, l: usize) -> usize {
        if l == 1 {
            self.scale_channels(1)
        } else {
            self.channels[l - 1] + self.scale_channels(l)
        }
    }

    pub(crate) fn layers(&self) -> Vec<LayerSpec> {
        let mut out = Vec::new();
        let mut push = |name: String, shape, in_channels, out_channels, stride, bias| {
            out.push(LayerSpec {
                name,
                shape,
                in_channels,
                out_channels,
                stride,
                bias,
            })
        };
        let vrn = |prefix: &str, c: usize, push: &mut dyn FnMut(String, Shape, usize, usize, u32, bool)| {
            let h = c / 2;
            push(format!("{prefix}.vrn.a1"), Shape::Cube, c, h, 1, true);
            push(format!("{prefix}.vrn.a2"), Shape::Cube, h, h, 1, true);
            push(format!("{prefix}.vrn.b1"), Shape::Point, c, h, 1, true);
            push(format!("{prefix}.vrn.b2"), Shape::Cube, h, h, 1, true);
            push(format!("{prefix}.vrn.b3"), Shape::Point, h, h, 1, true);
        };
        let l_max = self.scales;
        for l in 1..=l_max {
            let c = self.channels[l - 1];
            let input = if l == 1 { 1 } else { self.scale_channels(l - 1) };
            push(format!("ext.{l}.down"), Shape::Pair, input, c, 2, true);
            if self.vrn {
                vrn(&format!("ext.{l}"), c, &mut push);
            }
            push(format!("ext.{l}.conv"), Shape::Cube, c, self.scale_channels(l), 1, true);
        }
        for l in 2..=l_max {
            push(
                format!("warp.{l}.down"),
                Shape::Pair,
                self.warp_channels(l - 1),
                self.channels[l - 1],
                2,
                true,
            );
        }
        push(
            "warp.out".into(),
            Shape::Cube,
            self.warp_channels(l_max),
            self.latent_channels,
            1,
            false,
        );
        for l in (1..=l_max).rev() {
            let c = self.channels[l - 1];
            let input = if l == l_max { self.latent_channels } else { self.channels[l] };
            push(format!("prop.{l}.up"), Shape::Cube, input, c, 2, true);
            if self.vrn {
                vrn(&format!("prop.{l}"), c, &mut push);
            }
            push(format!("prop.{l}.cls"), Shape::Cube, c, 1, 1, true);
        }
        out
    }
}

/// Named convolution kernels for every layer of a [`NetworkConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkWeights<T: Scalar = f32> {
    config: NetworkConfig,
    layers: BTreeMap<String, ConvKernel<T>>,
}

impl<T: Scalar> NetworkWeights<T> {
    /// All-zero weights.
    pub fn zeros(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layers()
            .into_iter()
            .map(|s| {
                let k = ConvKernel::zeros(s.shape.offsets(), s.in_channels, s.out_channels, s.stride, s.bias);
                (s.name, k)
            })
            .collect();
        Ok(NetworkWeights {
            config: config.clone(),
            layers,
        })
    }

    /// Uniform He initialization, zero biases.
    pub fn init(config: &NetworkConfig, seed: u64) -> Result<Self> {
        let mut w = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for k in w.layers.values_mut() {
            let fan_in = (k.offsets.len() * k.in_channels) as f64;
            let a = (6.0 / fan_in).sqrt();
            for v in &mut k.weights {
                *v = T::from_f64(rng.random_range(-a..a));
            }
        }
        Ok(w)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layer(&self, name: &str) -> Result<&ConvKernel<T>> {
        self.layers
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing layer `{name}`")))
    }

    pub fn layer_mut(&mut self, name: &str) -> Result<&mut ConvKernel<T>> {
        self.layers
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing layer `{name}`")))
    }

    /// Layers in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &ConvKernel<T>)> {
        self.layers.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ConvKernel<T>)> {
        self.layers.iter_mut()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .values()
            .map(|k| k.weights.len() + k.bias.as_ref().map_or(0, Vec::len))
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> NetworkWeights<U> {
        NetworkWeights {
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|(n, k)| {
                    let k2 = ConvKernel {
                        offsets: k.offsets.clone(),
                        in_channels: k.in_channels,
                        out_channels: k.out_channels,
                        weights: cast_vec(&k.weights),
                        bias: k.bias.as_deref().map(cast_vec),
                        stride: k.stride,
                    };
                    (n.clone(), k2)
                })
                .collect(),
        }
    }

    /// Checks completeness against the config and that every value is finite.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let specs = self.config.layers();
        if specs.len() != self.layers.len() {
            return Err(Error::Config(format!(
                "{} layers present, config needs {}",
                self.layers.len(),
                specs.len()
            )));
        }
        for s in specs {
            let k = self.layer(&s.name)?;
            k.validate()?;
            if k.offsets != s.shape.offsets()
                || k.in_channels != s.in_channels
                || k.out_channels != s.out_channels
                || k.stride != s.stride
                || k.bias.is_some() != s.bias
            {
                return Err(Error::Config(format!("layer `{}` has the wrong shape", s.name)));
            }
            if k.weights.iter().chain(k.bias.iter().flatten()).any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("layer `{}` has non-finite weights", s.name)));
            }
        }
        Ok(())
    }
}

/// Extractor outputs at scales `1..=L` plus the occupied-voxel count of the
/// source at every scale `0..=L`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleStack<T: Scalar = f32> {
    pub tensors: Vec<SparseTensor<T>>,
    pub counts: Vec<usize>,
}

impl<T: Scalar> ScaleStack<T> {
    /// Stack of an empty cloud: no coordinates at any scale.
    pub fn empty(config: &NetworkConfig) -> Self {
        ScaleStack {
            tensors: (1..=config.scales)
                .map(|l| SparseTensor::empty(config.scale_channels(l), l as u32))
                .collect(),
            counts: vec![0; config.scales + 1],
        }
    }

    pub fn scales(&self) -> usize {
        self.tensors.len()
    }
}

/// Coordinate sets of `voxels` at scales `0..=scales`, each the floor-halving
/// of the previous.
pub fn scale_coords(voxels: &[Coord3], scales: usize) -> Vec<Arc<CoordSet>> {
    let mut out = vec![Arc::new(CoordSet::from_unsorted(voxels.to_vec()))];
    for l in 1..=scales {
        let next = out[l - 1].downsample();
        out.push(Arc::new(next));
    }
    out
}

/// One VRN unit applied to `t`; `prefix` names the unit's layers
/// (for example `ext.1`).
pub fn vrn_unit<T: Scalar>(t: &SparseTensor<T>, weights: &NetworkWeights<T>, prefix: &str) -> Result<SparseTensor<T>> {
    if t.channels() % 2 == 1 {
        return Err(Error::Config(format!("VRN unit on {} channels", t.channels())));
    }
    let mut g = Graph::new();
    let bound = forward::bind(&mut g, weights);
    let x = g.leaf(t.feats().to_vec(), t.channels());
    let mut cache = forward::MapCache::default();
    let y = forward::vrn(&mut g, &bound, weights, prefix, x, t.coord_set(), &mut cache)?;
    SparseTensor::from_parts(t.coord_set().clone(), g.take_value(y), t.channels(), t.scale())
}

/// Runs the extractor on a voxel set.
pub fn extract_features<T: Scalar>(voxels: &[Coord3], weights: &NetworkWeights<T>) -> Result<ScaleStack<T>> {
    if voxels.is_empty() {
        return Err(Error::Degenerate("cannot extract features of an empty cloud".into()));
    }
    let config = weights.config();
    let voxels = Arc::new(CoordSet::from_unsorted(voxels.to_vec()));
    let mut g = Graph::new();
    let bound = forward::bind(&mut g, weights);
    let mut cache = forward::MapCache::default();
    let vars = forward::extract(&mut g, &bound, weights, &voxels, &mut cache)?;
    let mut counts = vec![voxels.len()];
    let tensors = vars
        .into_iter()
        .enumerate()
        .map(|(i, (c, v))| {
            let l = i + 1;
            counts.push(c.len());
            SparseTensor::from_parts(c, g.take_value(v), config.scale_channels(l), l as u32)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScaleStack { tensors, counts })
}

/// Warps aligned features onto `target`, the source's scale-`L` coordinates.
pub fn warp_features<T: Scalar>(
    aligned: &ScaleStack<T>,
    target: &[Coord3],
    weights: &NetworkWeights<T>,
) -> Result<SparseTensor<T>> {
    let config = weights.config();
    if aligned.scales() != config.scales {
        return Err(Error::Config(format!(
            "aligned stack has {} scales, network has {}",
            aligned.scales(),
            config.scales
        )));
    }
    for (i, t) in aligned.tensors.iter().enumerate() {
        if t.channels() != config.scale_channels(i + 1) {
            return Err(Error::Config(format!("aligned scale {} has the wrong width", i + 1)));
        }
    }
    let mut g = Graph::new();
    let bound = forward::bind(&mut g, weights);
    let inputs: Vec<_> = aligned
        .tensors
        .iter()
        .map(|t| (t.coord_set().clone(), g.leaf(t.feats().to_vec(), t.channels())))
        .collect();
    let target = Arc::new(CoordSet::from_unsorted(target.to_vec()));
    let mut cache = forward::MapCache::default();
    let y = forward::warp(&mut g, &bound, weights, &inputs, target.clone(), &mut cache)?;
    SparseTensor::from_parts(target, g.take_value(y), config.latent_channels, config.scales as u32)
}

fn same_layout<T: Scalar>(a: &SparseTensor<T>, b: &SparseTensor<T>) -> Result<()> {
    if a.channels() != b.channels() || a.coords() != b.coords() {
        return Err(Error::Contract("residual operands differ in coordinates or channels".into()));
    }
    Ok(())
}

/// `source - warped` on shared coordinates.
pub fn residual<T: Scalar>(source: &SparseTensor<T>, warped: &SparseTensor<T>) -> Result<SparseTensor<T>> {
    same_layout(source, warped)?;
    let f = source.feats().iter().zip(warped.feats()).map(|(&a, &b)| a - b).collect();
    SparseTensor::from_parts(source.coord_set().clone(), f, source.channels(), source.scale())
}

/// `warped + residual`, the inverse of [`residual`].
pub fn add_residual<T: Scalar>(warped: &SparseTensor<T>, delta: &SparseTensor<T>) -> Result<SparseTensor<T>> {
    same_layout(warped, delta)?;
    let f = warped.feats().iter().zip(delta.feats()).map(|(&a, &b)| a + b).collect();
    SparseTensor::from_parts(warped.coord_set().clone(), f, warped.channels(), warped.scale())
}

/// Decoded coordinates and the pre-pruning candidates of every block.
#[derive(Clone, Debug)]
pub struct Propagation {
    pub coords: Vec<Coord3>,
    /// Per block, from scale `L - 1` down to 0: candidates and their logits.
    pub candidates: Vec<(Vec<Coord3>, Vec<f64>)>,
    /// Set when a requested count exceeded its candidate count.
    pub clamped: bool,
}

/// Upsamples `latent` back to scale 0. `counts[l]` is the number of points
/// kept at scale `l` for `l` in `0..L`; `precision` bounds the lattice.
pub fn propagate<T: Scalar>(
    latent: &SparseTensor<T>,
    counts: &[usize],
    precision: u8,
    weights: &NetworkWeights<T>,
) -> Result<Propagation> {
    let config = weights.config();
    if counts.len() != config.scales {
        return Err(Error::Config(format!(
            "{} counts for {} scales",
            counts.len(),
            config.scales
        )));
    }
    if latent.channels() != config.latent_channels {
        return Err(Error::Config("latent width differs from the network".into()));
    }
    if latent.scale() as usize != config.scales {
        return Err(Error::Config(format!(
            "latent at scale {}, network expects {}",
            latent.scale(),
            config.scales
        )));
    }
    let mut g = Graph::new();
    let bound = forward::bind(&mut g, weights);
    let x = g.leaf(latent.feats().to_vec(), latent.channels());
    let mut cache = forward::MapCache::default();
    let out = forward::propagate(
        &mut g,
        &bound,
        weights,
        x,
        latent.coord_set().clone(),
        precision,
        Prune::TopK(counts),
        &mut cache,
    )?;
    let candidates = out
        .blocks
        .iter()
        .map(|b| {
            let logits = g.value(b.logits).iter().map(|v| v.to_f64()).collect();
            (b.candidates.as_slice().to_vec(), logits)
        })
        .collect();
    Ok(Propagation {
        coords: out.kept.as_slice().to_vec(),
        candidates,
        clamped: out.clamped,
    })
}
