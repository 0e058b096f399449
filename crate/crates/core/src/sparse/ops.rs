use std::sync::Arc;

use super::{ConvKernel, Coord3, CoordSet, KernelMap, SparseTensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn check_channels<T: Scalar>(input: &SparseTensor<T>, kernel: &ConvKernel<T>) -> Result<()> {
    kernel.validate()?;
    if kernel.in_channels != input.channels() {
        return Err(Error::Config(format!(
            "kernel expects {} input channels, tensor has {}",
            kernel.in_channels,
            input.channels()
        )));
    }
    Ok(())
}

fn run<T: Scalar>(map: &KernelMap, input: &SparseTensor<T>, kernel: &ConvKernel<T>, scale: u32) -> SparseTensor<T> {
    let feats = map.apply(
        input.feats(),
        kernel.in_channels,
        &kernel.weights,
        kernel.bias.as_deref(),
        kernel.out_channels,
    );
    SparseTensor::from_parts(map.out_coords().clone(), feats, kernel.out_channels, scale)
        .expect("kernel map produced consistent shapes")
}

/// Sparse convolution. Stride 1 keeps the coordinate set; stride 2 maps it to
/// `{ floor(c / 2) }` one scale coarser.
pub fn sparse_conv<T: Scalar>(input: &SparseTensor<T>, kernel: &ConvKernel<T>) -> Result<SparseTensor<T>> {
    check_channels(input, kernel)?;
    let map = KernelMap::conv(input.coord_set(), &kernel.offsets, kernel.stride);
    let scale = input.scale() + kernel.stride - 1;
    Ok(run(&map, input, kernel, scale))
}

/// Stride-2 transposed convolution: each input `c` generates `2c + offset`,
/// overlapping contributions are summed. `clip` bounds the output cube
/// `[0, clip)^3` of the finer scale.
pub fn transposed_conv<T: Scalar>(
    input: &SparseTensor<T>,
    kernel: &ConvKernel<T>,
    clip: Option<i32>,
) -> Result<SparseTensor<T>> {
    check_channels(input, kernel)?;
    if kernel.stride != 2 {
        return Err(Error::Config(format!(
            "transposed convolution needs stride 2, got {}",
            kernel.stride
        )));
    }
    if input.scale() == 0 {
        return Err(Error::Contract("cannot upsample below scale 0".into()));
    }
    let map = KernelMap::transposed(input.coord_set(), &kernel.offsets, clip);
    Ok(run(&map, input, kernel, input.scale() - 1))
}

/// Convolution whose output coordinate set is exactly `target`.
pub fn conv_on_coords<T: Scalar>(
    input: &SparseTensor<T>,
    kernel: &ConvKernel<T>,
    target: &[Coord3],
) -> Result<SparseTensor<T>> {
    check_channels(input, kernel)?;
    if kernel.stride != 1 {
        return Err(Error::Config("conv_on_coords requires stride 1".into()));
    }
    let target = Arc::new(CoordSet::from_unsorted(target.to_vec()));
    let map = KernelMap::on_coords(input.coord_set(), &kernel.offsets, target);
    Ok(run(&map, input, kernel, input.scale()))
}

/// Row indices of the `k` highest logits, ties resolved toward the smaller
/// coordinate, returned in ascending row order.
pub fn topk_rows(logits: &[f64], k: usize) -> Vec<usize> {
    if k >= logits.len() {
        return (0..logits.len()).collect();
    }
    // Rows are already in coordinate order, so the row index is the tie key.
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.select_nth_unstable_by(k, |&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    let mut kept = order[..k].to_vec();
    kept.sort_unstable();
    kept
}

/// Keeps the `k` coordinates with the highest logits.
pub fn prune_topk<T: Scalar>(tensor: &SparseTensor<T>, logits: &[f64], k: usize) -> Result<SparseTensor<T>> {
    if logits.len() != tensor.len() {
        return Err(Error::Contract(format!(
            "{} logits for {} coordinates",
            logits.len(),
            tensor.len()
        )));
    }
    let rows = topk_rows(logits, k);
    Ok(gather_rows(tensor, &rows))
}

pub(crate) fn gather_rows<T: Scalar>(tensor: &SparseTensor<T>, rows: &[usize]) -> SparseTensor<T> {
    let coords: Vec<Coord3> = rows.iter().map(|&r| tensor.coords()[r]).collect();
    let mut feats = Vec::with_capacity(rows.len() * tensor.channels());
    for &r in rows {
        feats.extend_from_slice(tensor.row(r));
    }
    SparseTensor::from_parts(
        Arc::new(CoordSet::from_sorted_unique(coords)),
        feats,
        tensor.channels(),
        tensor.scale(),
    )
    .expect("row gather keeps shapes")
}

/// Row correspondence of a coordinate-set union.
#[derive(Clone, Debug)]
pub struct UnionMap {
    pub out: Arc<CoordSet>,
    pub left: Vec<Option<u32>>,
    pub right: Vec<Option<u32>>,
}

impl UnionMap {
    pub fn new(a: &Arc<CoordSet>, b: &Arc<CoordSet>) -> UnionMap {
        if Arc::ptr_eq(a, b) || a.as_slice() == b.as_slice() {
            let n = a.len() as u32;
            return UnionMap {
                out: a.clone(),
                left: (0..n).map(Some).collect(),
                right: (0..n).map(Some).collect(),
            };
        }
        let (xs, ys) = (a.as_slice(), b.as_slice());
        let (mut i, mut j) = (0, 0);
        let mut coords = Vec::with_capacity(xs.len().max(ys.len()));
        let (mut left, mut right) = (Vec::new(), Vec::new());
        while i < xs.len() || j < ys.len() {
            let take_left = j >= ys.len() || (i < xs.len() && xs[i] <= ys[j]);
            let take_right = i >= xs.len() || (j < ys.len() && ys[j] <= xs[i]);
            if take_left && take_right {
                coords.push(xs[i]);
                left.push(Some(i as u32));
                right.push(Some(j as u32));
                i += 1;
                j += 1;
            } else if take_left {
                coords.push(xs[i]);
                left.push(Some(i as u32));
                right.push(None);
                i += 1;
            } else {
                coords.push(ys[j]);
                left.push(None);
                right.push(Some(j as u32));
                j += 1;
            }
        }
        UnionMap {
            out: Arc::new(CoordSet::from_sorted_unique(coords)),
            left,
            right,
        }
    }

    /// Columnwise concatenation, zero-filling absent rows.
    pub fn apply<T: Scalar>(&self, a: &[T], ca: usize, b: &[T], cb: usize) -> Vec<T> {
        let c = ca + cb;
        let mut out = vec![T::ZERO; self.out.len() * c];
        for (u, row) in out.chunks_mut(c).enumerate() {
            if let Some(i) = self.left[u] {
                let i = i as usize;
                row[..ca].copy_from_slice(&a[i * ca..(i + 1) * ca]);
            }
            if let Some(j) = self.right[u] {
                let j = j as usize;
                row[ca..].copy_from_slice(&b[j * cb..(j + 1) * cb]);
            }
        }
        out
    }
}

/// Union of the two coordinate sets with channels stacked `[primary | auxiliary]`.
pub fn concat_features<T: Scalar>(primary: &SparseTensor<T>, auxiliary: &SparseTensor<T>) -> Result<SparseTensor<T>> {
    if primary.scale() != auxiliary.scale() {
        return Err(Error::Config(format!(
            "cannot concatenate scale {} with scale {}",
            primary.scale(),
            auxiliary.scale()
        )));
    }
    let map = UnionMap::new(primary.coord_set(), auxiliary.coord_set());
    let feats = map.apply(
        primary.feats(),
        primary.channels(),
        auxiliary.feats(),
        auxiliary.channels(),
    );
    SparseTensor::from_parts(
        map.out.clone(),
        feats,
        primary.channels() + auxiliary.channels(),
        primary.scale(),
    )
}
