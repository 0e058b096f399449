use std::sync::Arc;

use rayon::prelude::*;

use super::{Coord3, CoordSet};
use crate::scalar::Scalar;

/// Rows below this count are processed on the calling thread.
const PAR_ROWS: usize = 2048;

/// Precomputed gather structure of a sparse convolution: for every output
/// row, the `(offset index, input row)` pairs that contribute to it, in the
/// fixed accumulation order.
///
/// Coordinates never depend on features, so a map can be built once and
/// reused for the forward pass, the backward pass and repeated weights.
#[derive(Clone, Debug)]
pub struct KernelMap {
    out: Arc<CoordSet>,
    starts: Vec<u32>,
    pairs: Vec<(u32, u32)>,
    n_in: usize,
    n_offsets: usize,
}

impl KernelMap {
    /// Stride 1: output coordinates equal the input's. Stride 2: output is
    /// `{ floor(c / 2) }` and `u` gathers from `2u + offset`.
    pub fn conv(input: &Arc<CoordSet>, offsets: &[Coord3], stride: u32) -> KernelMap {
        let out = if stride == 1 {
            input.clone()
        } else {
            Arc::new(input.downsample())
        };
        Self::gather(input, offsets, out, stride)
    }

    /// Output coordinates are exactly `target`, gathering from `u + offset`.
    pub fn on_coords(input: &CoordSet, offsets: &[Coord3], target: Arc<CoordSet>) -> KernelMap {
        Self::gather(input, offsets, target, 1)
    }

    fn gather(input: &CoordSet, offsets: &[Coord3], out: Arc<CoordSet>, stride: u32) -> KernelMap {
        let mut starts = Vec::with_capacity(out.len() + 1);
        let mut pairs = Vec::with_capacity(out.len() * offsets.len().min(8));
        starts.push(0);
        for u in out.iter() {
            let base = if stride == 1 { *u } else { u.double() };
            for (k, o) in offsets.iter().enumerate() {
                if let Some(i) = input.get(&base.offset(*o)) {
                    pairs.push((k as u32, i as u32));
                }
            }
            starts.push(pairs.len() as u32);
        }
        KernelMap {
            out,
            starts,
            pairs,
            n_in: input.len(),
            n_offsets: offsets.len(),
        }
    }

    /// Generative stride-2 upsampling: every input `c` scatters to
    /// `2c + offset`. Outputs outside `[0, clip)^3` are dropped when `clip`
    /// is given. Contributions to a shared output are ordered by
    /// (input row, offset).
    pub fn transposed(input: &CoordSet, offsets: &[Coord3], clip: Option<i32>) -> KernelMap {
        let mut triples: Vec<(Coord3, u32, u32)> = Vec::with_capacity(input.len() * offsets.len());
        for (i, c) in input.iter().enumerate() {
            let base = c.double();
            for (k, o) in offsets.iter().enumerate() {
                let u = base.offset(*o);
                if clip.is_none_or(|b| u.in_cube(b)) {
                    triples.push((u, i as u32, k as u32));
                }
            }
        }
        triples.sort_unstable();
        let mut coords = Vec::new();
        let mut starts = vec![0u32];
        let mut pairs = Vec::with_capacity(triples.len());
        for (n, (u, i, k)) in triples.iter().enumerate() {
            if n > 0 && triples[n - 1].0 != *u {
                starts.push(pairs.len() as u32);
            }
            if n == 0 || triples[n - 1].0 != *u {
                coords.push(*u);
            }
            pairs.push((*k, *i));
        }
        if !triples.is_empty() {
            starts.push(pairs.len() as u32);
        }
        KernelMap {
            out: Arc::new(CoordSet::from_sorted_unique(coords)),
            starts,
            pairs,
            n_in: input.len(),
            n_offsets: offsets.len(),
        }
    }

    pub fn out_coords(&self) -> &Arc<CoordSet> {
        &self.out
    }

    pub fn n_out(&self) -> usize {
        self.out.len()
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_offsets(&self) -> usize {
        self.n_offsets
    }

    /// Number of (output, offset, input) contributions.
    pub fn n_pairs(&self) -> usize {
        self.pairs.len()
    }

    #[inline]
    fn row_pairs(&self, u: usize) -> &[(u32, u32)] {
        &self.pairs[self.starts[u] as usize..self.starts[u + 1] as usize]
    }

    /// Forward evaluation: `out[u] = sum_k W_k^T in[row] + bias`.
    pub fn apply<T: Scalar>(
        &self,
        feats: &[T],
        in_ch: usize,
        weights: &[T],
        bias: Option<&[T]>,
        out_ch: usize,
    ) -> Vec<T> {
        debug_assert_eq!(feats.len(), self.n_in * in_ch);
        debug_assert_eq!(weights.len(), self.n_offsets * in_ch * out_ch);
        let mut out = vec![T::ZERO; self.n_out() * out_ch];
        if out_ch == 0 {
            return out;
        }
        let job = Gemv {
            map: self,
            x: feats,
            x_ch: in_ch,
            w: weights,
        };
        let row = |(u, acc): (usize, &mut [T])| {
            by_width!(out_ch, job.forward_row::<>(u, acc));
            if let Some(b) = bias {
                for (a, &bv) in acc.iter_mut().zip(b) {
                    *a += bv;
                }
            }
        };
        if self.n_out() >= PAR_ROWS {
            out.par_chunks_mut(out_ch).enumerate().for_each(row);
        } else {
            out.chunks_mut(out_ch).enumerate().for_each(row);
        }
        out
    }

    /// Adjoint of [`KernelMap::apply`]; accumulates into whichever gradient
    /// buffers are provided.
    #[allow(clippy::too_many_arguments)]
    pub fn backward<T: Scalar>(
        &self,
        feats: &[T],
        in_ch: usize,
        weights: &[T],
        out_ch: usize,
        grad_out: &[T],
        grad_in: Option<&mut [T]>,
        grad_w: Option<&mut [T]>,
        grad_b: Option<&mut [T]>,
    ) {
        let block = in_ch * out_ch;
        if let Some(gi) = grad_in {
            // Per offset, W_k with rows indexed by output channel.
            let mut t = vec![T::ZERO; weights.len()];
            for k in 0..self.n_offsets {
                for c in 0..in_ch {
                    for o in 0..out_ch {
                        t[k * block + o * in_ch + c] = weights[k * block + c * out_ch + o];
                    }
                }
            }
            let job = Gemv {
                map: self,
                x: grad_out,
                x_ch: out_ch,
                w: &t,
            };
            by_width!(in_ch, job.scatter_input::<>(gi));
        }
        if let Some(gw) = grad_w {
            by_width!(out_ch, self.weight_grad::<T>(feats, in_ch, grad_out, gw));
        }
        if let Some(gb) = grad_b {
            for u in 0..self.n_out() {
                for (slot, &gv) in gb.iter_mut().zip(&grad_out[u * out_ch..(u + 1) * out_ch]) {
                    *slot += gv;
                }
            }
        }
    }

    /// `dW_k += in[i] g[u]^T` over all pairs, output width `N` (0: any).
    fn weight_grad<T: Scalar, const N: usize>(&self, feats: &[T], in_ch: usize, grad_out: &[T], gw: &mut [T]) {
        let out_ch = width::<N>(grad_out.len() / self.n_out().max(1));
        let block = in_ch * out_ch;
        for u in 0..self.n_out() {
            let g = &grad_out[u * out_ch..(u + 1) * out_ch];
            if g.iter().all(|&v| v == T::ZERO) {
                continue;
            }
            for &(k, i) in self.row_pairs(u) {
                let (k, i) = (k as usize, i as usize);
                let gw = &mut gw[k * block..(k + 1) * block];
                let f = &feats[i * in_ch..(i + 1) * in_ch];
                for (c, &fc) in f.iter().enumerate() {
                    if fc != T::ZERO {
                        axpy::<T, N>(&mut gw[c * out_ch..(c + 1) * out_ch], fc, g);
                    }
                }
            }
        }
    }
}

/// Runtime width, or the compile-time one when `N > 0`.
#[inline(always)]
fn width<const N: usize>(n: usize) -> usize {
    if N == 0 {
        n
    } else {
        N
    }
}

/// `acc += a * x` over the first `width::<N>(acc.len())` entries.
#[inline(always)]
fn axpy<T: Scalar, const N: usize>(acc: &mut [T], a: T, x: &[T]) {
    let n = width::<N>(acc.len());
    let (acc, x) = (&mut acc[..n], &x[..n]);
    for j in 0..n {
        acc[j] += a * x[j];
    }
}

/// Calls `$call` with its const width parameter set to `$n` when `$n` is a
/// common channel count, otherwise with 0 (runtime width).
macro_rules! by_width {
    ($n:expr, $recv:ident . $f:ident :: <$($t:ty),*> ( $($arg:expr),* )) => {
        match $n {
            1 => $recv.$f::<$($t,)* 1>($($arg),*),
            2 => $recv.$f::<$($t,)* 2>($($arg),*),
            4 => $recv.$f::<$($t,)* 4>($($arg),*),
            8 => $recv.$f::<$($t,)* 8>($($arg),*),
            16 => $recv.$f::<$($t,)* 16>($($arg),*),
            32 => $recv.$f::<$($t,)* 32>($($arg),*),
            64 => $recv.$f::<$($t,)* 64>($($arg),*),
            _ => $recv.$f::<$($t,)* 0>($($arg),*),
        }
    };
}
use by_width;

/// Row-gather products of a map against `x` (`x_ch` columns) and per-offset
/// weight blocks `w` of shape `x_ch x n` (row-major).
struct Gemv<'a, T> {
    map: &'a KernelMap,
    x: &'a [T],
    x_ch: usize,
    w: &'a [T],
}

impl<T: Scalar> Gemv<'_, T> {
    /// `acc += sum_{(k,i) in row u} x[i] W_k`, width `N` (0: any).
    #[inline]
    fn forward_row<const N: usize>(&self, u: usize, acc: &mut [T]) {
        let n = width::<N>(acc.len());
        let block = self.x_ch * n;
        for &(k, i) in self.map.row_pairs(u) {
            let w = &self.w[k as usize * block..(k as usize + 1) * block];
            let f = &self.x[i as usize * self.x_ch..(i as usize + 1) * self.x_ch];
            for (c, &fc) in f.iter().enumerate() {
                if fc != T::ZERO {
                    axpy::<T, N>(acc, fc, &w[c * n..(c + 1) * n]);
                }
            }
        }
    }

    /// `dst[i] += x[u] W_k` for every pair `(k, i)` of every row `u`; `dst`
    /// has width `N` (0: any).
    fn scatter_input<const N: usize>(&self, dst: &mut [T]) {
        let n = width::<N>(dst.len() / self.map.n_in.max(1));
        let block = self.x_ch * n;
        for u in 0..self.map.n_out() {
            let g = &self.x[u * self.x_ch..(u + 1) * self.x_ch];
            if g.iter().all(|&v| v == T::ZERO) {
                continue;
            }
            for &(k, i) in self.map.row_pairs(u) {
                let (k, i) = (k as usize, i as usize);
                let w = &self.w[k * block..(k + 1) * block];
                let d = &mut dst[i * n..(i + 1) * n];
                for (o, &go) in g.iter().enumerate() {
                    if go != T::ZERO {
                        axpy::<T, N>(d, go, &w[o * n..(o + 1) * n]);
                    }
                }
            }
        }
    }
}
