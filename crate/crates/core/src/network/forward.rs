//! Graph builders shared by inference and training.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::sparse::{topk_rows, Coord3, CoordSet, KernelMap, UnionMap};

use super::NetworkWeights;

/// Graph leaves holding every layer's weights and bias.
pub(crate) struct Bound {
    vars: HashMap<String, (Var, Option<Var>)>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<(Var, Option<Var>)> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing layer `{name}`")))
    }
}

pub(crate) fn bind<T: Scalar>(g: &mut Graph<T>, weights: &NetworkWeights<T>) -> Bound {
    let mut vars = HashMap::new();
    for (name, k) in weights.iter() {
        let w = g.leaf(k.weights.clone(), k.out_channels);
        let b = k.bias.as_ref().map(|b| g.leaf(b.clone(), b.len()));
        vars.insert(name.clone(), (w, b));
    }
    Bound { vars }
}

#[derive(Clone, Debug, PartialEq)]
enum Kind {
    Conv(u32),
    Transposed(i32),
    OnCoords(Arc<CoordSet>),
}

/// Kernel maps keyed by input coordinate set, offsets and kind. Keeping a
/// cache alive across passes over the same clouds skips map construction.
#[derive(Default)]
pub(crate) struct MapCache {
    entries: Vec<(Arc<CoordSet>, Vec<Coord3>, Kind, Arc<KernelMap>)>,
}

impl MapCache {
    fn get(&mut self, input: &Arc<CoordSet>, offsets: &[Coord3], kind: Kind) -> Arc<KernelMap> {
        let hit = self.entries.iter().find(|(i, o, k, _)| {
            Arc::ptr_eq(i, input)
                && o.as_slice() == offsets
                && match (k, &kind) {
                    (Kind::OnCoords(a), Kind::OnCoords(b)) => Arc::ptr_eq(a, b),
                    (a, b) => a == b,
                }
        });
        if let Some(e) = hit {
            return e.3.clone();
        }
        let map = Arc::new(match &kind {
            Kind::Conv(s) => KernelMap::conv(input, offsets, *s),
            Kind::Transposed(clip) => KernelMap::transposed(input, offsets, Some(*clip)),
            Kind::OnCoords(t) => KernelMap::on_coords(input, offsets, t.clone()),
        });
        self.entries.push((input.clone(), offsets.to_vec(), kind, map.clone()));
        map
    }
}

fn layer<T: Scalar>(
    g: &mut Graph<T>,
    bound: &Bound,
    weights: &NetworkWeights<T>,
    name: &str,
    x: Var,
    map: Arc<KernelMap>,
) -> Result<Var> {
    let k = weights.layer(name)?;
    if g.cols(x) != k.in_channels {
        return Err(Error::Config(format!(
            "layer `{name}` expects {} channels, got {}",
            k.in_channels,
            g.cols(x)
        )));
    }
    let (w, b) = bound.get(name)?;
    g.conv(x, w, b, map, k.out_channels)
}

/// Stride-1 convolution on `coords`.
fn same<T: Scalar>(
    g: &mut Graph<T>,
    bound: &Bound,
    weights: &NetworkWeights<T>,
    name: &str,
    x: Var,
    coords: &Arc<CoordSet>,
    cache: &mut MapCache,
) -> Result<Var> {
    let map = cache.get(coords, &weights.layer(name)?.offsets, Kind::Conv(1));
    layer(g, bound, weights, name, x, map)
}

/// Stride-2 downsampling convolution; returns the output and its coordinates.
fn down<T: Scalar>(
    g: &mut Graph<T>,
    bound: &Bound,
    weights: &NetworkWeights<T>,
    name: &str,
    x: Var,
    coords: &Arc<CoordSet>,
    cache: &mut MapCache,
) -> Result<(Var, Arc<CoordSet>)> {
    let map = cache.get(coords, &weights.layer(name)?.offsets, Kind::Conv(2));
    let out = map.out_coords().clone();
    Ok((layer(g, bound, weights, name, x, map)?, out))
}

pub(crate) fn vrn<T: Scalar>(
    g: &mut Graph<T>,
    bound: &Bound,
    weights: &NetworkWeights<T>,
    prefix: &str,
    x: Var,
    coords: &Arc<CoordSet>,
    cache: &mut MapCache,
) -> Result<Var> {
    let mut branch = |names: &[&str], g: &mut Graph<T>| -> Result<Var> {
        let mut h = x;
        for n in names {
            let y = same(g, bound, weights, &format!("{prefix}.vrn.{n}"), h, coords, cache)?;
            h = g.relu(y);
        }
        Ok(h)
    };
    let a = branch(&["a1", "a2"], g)?;
    let b = branch(&["b1", "b2", "b3"], g)?;
    let union = Arc::new(UnionMap::new(coords, coords));
    let cat = g.concat(a, b, union);
    g.add(x, cat)
}

/// Extractor over the scale-0 voxel set; returns per-scale coordinates and
/// feature nodes for scales `1..=L`.
pub(crate) fn extract<T: Scalar>(
    g: &mut Graph<T>,
    bound: &Bound,
    weights: &NetworkWeights<T>,
    voxels: &Arc<CoordSet>,
    cache: &mut MapCache,
) -> Result<Vec<(Arc<CoordSet>, Var)>> {
    let config = weights.config();
    let mut x = g.leaf(vec![T::ONE; voxels.len()], 1);
    let mut coords = voxels.clone();
    let mut out = Vec::with_capacity(config.scales);
    for l in 1..=config.scales {
        let (h, c) = down(g, bound, weights, &format!("ext.{l}.down"), x, &coords, cache)?;
        coords = c;
        let mut h = g.relu(h);
        if config.vrn {
            h = vrn(g, bound, weights, &format!("ext.{l}"), h, &coords, cache)?;
        }
        let y = same(g, bound, weights, &format!("ext.{l}.conv"), h, &coords, cache)?;
        x = if l < config.scales { g.relu(y) } else { y };
        out.push((coords.clone(), x));
    }
    Ok(out)
}

/// Warping chain over aligned scale features; output rows follow `target`.
pub(crate) fn warp<T: Scalar>(
    g: &mut Graph<T>,
    bound: &Bound,
    weights: &NetworkWeights<T>,
    aligned: &[(Arc<CoordSet>, Var)],
    target: Arc<CoordSet>,
    cache: &mut MapCache,
) -> Result<Var> {
    let config = weights.config();
    if aligned.len() != config.scales {
        return Err(Error::Config(format!(
            "{} aligned scales for a {}-scale network",
            aligned.len(),
            config.scales
        )));
    }
    let (mut coords, mut x) = aligned[0].clone();
    for l in 2..=config.scales {
        let (d, dc) = down(g, bound, weights, &format!("warp.{l}.down"), x, &coords, cache)?;
        let d = g.relu(d);
        let (pc, pv) = &aligned[l - 1];
        let union = Arc::new(UnionMap::new(&dc, pc));
        coords = union.out.clone();
        x = g.concat(d, *pv, union);
    }
    let map = cache.get(&coords, &weights.layer("warp.out")?.offsets, Kind::OnCoords(target));
    layer(g, bound, weights, "warp.out", x, map)
}

/// How candidates are pruned between propagation blocks.
#[derive(Clone, Copy, Debug)]
pub enum Prune<'a> {
    /// Keep the `counts[l]` highest logits at scale `l`.
    TopK(&'a [usize]),
    /// Keep exactly the candidates present in `truth[l]`, the source's
    /// coordinates at scale `l`.
    Truth(&'a [Arc<CoordSet>]),
}

pub(crate) struct Block {
    pub candidates: Arc<CoordSet>,
    pub logits: Var,
}

pub(crate) struct PropagateOut {
    /// Blocks from scale `L - 1` down to 0.
    pub blocks: Vec<Block>,
    pub kept: Arc<CoordSet>,
    pub clamped: bool,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn propagate<T: Scalar>(
    g: &mut Graph<T>,
    bound: &Bound,
    weights: &NetworkWeights<T>,
    latent: Var,
    latent_coords: Arc<CoordSet>,
    precision: u8,
    prune: Prune<'_>,
    cache: &mut MapCache,
) -> Result<PropagateOut> {
    let config = weights.config();
    let mut x = latent;
    let mut coords = latent_coords;
    let mut blocks = Vec::with_capacity(config.scales);
    let mut clamped = false;
    for l in (1..=config.scales).rev() {
        let up_name = format!("prop.{l}.up");
        let clip = 1i32 << (precision as i32 - l as i32 + 1).clamp(0, 30);
        let map = cache.get(&coords, &weights.layer(&up_name)?.offsets, Kind::Transposed(clip));
        let cand = map.out_coords().clone();
        let h = layer(g, bound, weights, &up_name, x, map)?;
        let mut h = g.relu(h);
        if config.vrn {
            h = vrn(g, bound, weights, &format!("prop.{l}"), h, &cand, cache)?;
        }
        let logits = same(g, bound, weights, &format!("prop.{l}.cls"), h, &cand, cache)?;
        let (rows, kept) = match prune {
            Prune::TopK(counts) => {
                let k = counts[l - 1];
                if k > cand.len() {
                    log::warn!(
                        "scale {}: {} points requested, {} candidates",
                        l - 1,
                        k,
                        cand.len()
                    );
                    clamped = true;
                }
                let scores: Vec<f64> = g.value(logits).iter().map(|v| v.to_f64()).collect();
                let rows = topk_rows(&scores, k);
                let kept: Vec<Coord3> = rows.iter().map(|&r| cand.as_slice()[r]).collect();
                (rows, Arc::new(CoordSet::from_sorted_unique(kept)))
            }
            Prune::Truth(truth) => {
                let t = &truth[l - 1];
                let rows: Vec<usize> = t.iter().filter_map(|c| cand.get(c)).collect();
                if rows.len() == t.len() {
                    (rows, t.clone())
                } else {
                    let kept: Vec<Coord3> = rows.iter().map(|&r| cand.as_slice()[r]).collect();
                    (rows, Arc::new(CoordSet::from_sorted_unique(kept)))
                }
            }
        };
        blocks.push(Block {
            candidates: cand,
            logits,
        });
        x = g.gather(h, Arc::new(rows));
        coords = kept;
    }
    Ok(PropagateOut {
        blocks,
        kept: coords,
        clamped,
    })
}
