//! Reverse-mode differentiation over feature matrices.
//!
//! Every node holds a row-major matrix. Coordinates never depend on
//! features, so sparse layers enter the graph through a prebuilt
//! [`KernelMap`] or [`UnionMap`] and only their feature algebra is recorded.
//! The same graph runs the codec's inference pass (in `f32`, without ever
//! calling [`Graph::backward`]) and the training pass (in `f64`).

use std::sync::Arc;

use crate::entropy::factorized::{FactorizedModel, PARAMS_PER_CHANNEL};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sparse::{KernelMap, UnionMap};

/// Handle to a graph node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        map: Arc<KernelMap>,
        in_ch: usize,
        out_ch: usize,
    },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// `x + noise`; the adjoint is the identity.
    StraightThrough(Var),
    Concat {
        a: Var,
        b: Var,
        map: Arc<UnionMap>,
    },
    Gather {
        x: Var,
        rows: Arc<Vec<usize>>,
    },
    /// Mean binary cross entropy of logits against occupancy targets.
    Bce {
        logits: Var,
        targets: Arc<Vec<bool>>,
    },
    /// Total `-log2` likelihood under a factorized model whose parameters
    /// are the node `params`.
    Bits {
        y: Var,
        params: Var,
        channels: usize,
    },
    LinComb(Vec<(Var, f64)>),
}

#[derive(Clone, Debug)]
struct Node<T: Scalar> {
    value: Vec<T>,
    cols: usize,
    op: Op,
}

/// Probability clamp for the cross-entropy terms.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Debug, Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Vec<T>, cols: usize, op: Op) -> Var {
        self.nodes.push(Node { value, cols, op });
        Var(self.nodes.len() - 1)
    }

    /// Parameter or constant input.
    pub fn leaf(&mut self, value: Vec<T>, cols: usize) -> Var {
        debug_assert!(cols == 0 || value.len().is_multiple_of(cols));
        self.push(value, cols, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0].to_f64()
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].cols
    }

    pub fn rows(&self, v: Var) -> usize {
        let n = &self.nodes[v.0];
        if n.cols == 0 {
            0
        } else {
            n.value.len() / n.cols
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn take_value(&mut self, v: Var) -> Vec<T> {
        std::mem::take(&mut self.nodes[v.0].value)
    }

    /// Sparse convolution over a prebuilt map. `w` holds
    /// `n_offsets x in_ch x out_ch` values, `b` holds `out_ch`.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, map: Arc<KernelMap>, out_ch: usize) -> Result<Var> {
        let in_ch = self.cols(x);
        if self.rows(x) != map.n_in() && !(in_ch == 0 && map.n_in() == 0) {
            return Err(Error::Config(format!(
                "kernel map expects {} input rows, got {}",
                map.n_in(),
                self.rows(x)
            )));
        }
        if self.value(w).len() != map.n_offsets() * in_ch * out_ch {
            return Err(Error::Config(format!(
                "weight node has {} values, expected {} x {} x {}",
                self.value(w).len(),
                map.n_offsets(),
                in_ch,
                out_ch
            )));
        }
        if let Some(b) = b {
            if self.value(b).len() != out_ch {
                return Err(Error::Config("bias length does not match output channels".into()));
            }
        }
        let value = map.apply(
            self.value(x),
            in_ch,
            self.value(w),
            b.map(|b| self.value(b)),
            out_ch,
        );
        Ok(self.push(
            value,
            out_ch,
            Op::Conv {
                x,
                w,
                b,
                map,
                in_ch,
                out_ch,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| if v > T::ZERO { v } else { T::ZERO }).collect();
        let cols = self.cols(x);
        self.push(value, cols, Op::Relu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let cols = self.cols(a);
        Ok(self.push(value, cols, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        let cols = self.cols(a);
        Ok(self.push(value, cols, Op::Sub(a, b)))
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.value(a).len() != self.value(b).len() || self.cols(a) != self.cols(b) {
            return Err(Error::Contract(format!(
                "shape mismatch: {}x{} vs {}x{}",
                self.rows(a),
                self.cols(a),
                self.rows(b),
                self.cols(b)
            )));
        }
        Ok(())
    }

    /// Adds constant `noise` in the forward pass, identity in the backward pass.
    pub fn straight_through(&mut self, x: Var, noise: &[T]) -> Var {
        debug_assert_eq!(noise.len(), self.value(x).len());
        let value = self.value(x).iter().zip(noise).map(|(&v, &n)| v + n).collect();
        let cols = self.cols(x);
        self.push(value, cols, Op::StraightThrough(x))
    }

    pub fn concat(&mut self, a: Var, b: Var, map: Arc<UnionMap>) -> Var {
        let (ca, cb) = (self.cols(a), self.cols(b));
        let value = map.apply(self.value(a), ca, self.value(b), cb);
        self.push(value, ca + cb, Op::Concat { a, b, map })
    }

    pub fn gather(&mut self, x: Var, rows: Arc<Vec<usize>>) -> Var {
        let c = self.cols(x);
        let src = self.value(x);
        let mut value = Vec::with_capacity(rows.len() * c);
        for &r in rows.iter() {
            value.extend_from_slice(&src[r * c..(r + 1) * c]);
        }
        self.push(value, c, Op::Gather { x, rows })
    }

    /// Mean BCE over the rows of a one-column logit node.
    pub fn bce(&mut self, logits: Var, targets: Arc<Vec<bool>>) -> Result<Var> {
        if self.cols(logits) != 1 || self.value(logits).len() != targets.len() {
            return Err(Error::Contract(format!(
                "{} logits for {} occupancy targets",
                self.value(logits).len(),
                targets.len()
            )));
        }
        let n = targets.len().max(1) as f64;
        let mut total = 0.0;
        for (&z, &t) in self.value(logits).iter().zip(targets.iter()) {
            let p = sigmoid(z.to_f64()).clamp(BCE_EPS, 1.0 - BCE_EPS);
            total -= if t { p.ln() } else { (1.0 - p).ln() };
        }
        Ok(self.push(vec![T::from_f64(total / n)], 1, Op::Bce { logits, targets }))
    }

    /// Sum of `-log2 p(y)` over all entries of `y` under the factorized
    /// model whose flattened parameters are `params`.
    pub fn bits(&mut self, y: Var, params: Var, channels: usize) -> Result<Var> {
        let model = self.model_from(params, channels)?;
        if !self.value(y).is_empty() && self.cols(y) != channels {
            return Err(Error::Contract("rate input channels differ from the model".into()));
        }
        let yv: Vec<f64> = self.value(y).iter().map(|v| v.to_f64()).collect();
        let total = model.bits(&yv, None);
        Ok(self.push(vec![T::from_f64(total)], 1, Op::Bits { y, params, channels }))
    }

    fn model_from(&self, params: Var, channels: usize) -> Result<FactorizedModel> {
        let p: Vec<f64> = self.value(params).iter().map(|v| v.to_f64()).collect();
        if p.len() != channels * PARAMS_PER_CHANNEL {
            return Err(Error::Config("entropy parameter node has the wrong size".into()));
        }
        FactorizedModel::from_parts(channels, p, vec![(0, 0); channels])
    }

    /// `sum_i c_i * s_i` over scalar nodes.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Var {
        let v: f64 = terms.iter().map(|&(x, c)| c * self.scalar(x)).sum();
        self.push(vec![T::from_f64(v)], 1, Op::LinComb(terms.to_vec()))
    }

    /// Gradients of the scalar `loss` with respect to every node that feeds it.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::ONE; self.nodes[loss.0].value.len()]);

        fn acc<'a, T: Scalar>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> &'a mut Vec<T> {
            grads[v.0].get_or_insert_with(|| vec![T::ZERO; nodes[v.0].value.len()])
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Conv {
                    x,
                    w,
                    b,
                    map,
                    in_ch,
                    out_ch,
                } => {
                    let mut gx = vec![T::ZERO; self.nodes[x.0].value.len()];
                    let mut gw = vec![T::ZERO; self.nodes[w.0].value.len()];
                    let mut gb = b.map(|_| vec![T::ZERO; *out_ch]);
                    map.backward(
                        &self.nodes[x.0].value,
                        *in_ch,
                        &self.nodes[w.0].value,
                        *out_ch,
                        &g,
                        Some(&mut gx),
                        Some(&mut gw),
                        gb.as_deref_mut(),
                    );
                    add_into(acc(&mut grads, &self.nodes, *x), &gx);
                    add_into(acc(&mut grads, &self.nodes, *w), &gw);
                    if let (Some(b), Some(gb)) = (b, gb) {
                        add_into(acc(&mut grads, &self.nodes, *b), &gb);
                    }
                }
                Op::Relu(x) => {
                    let out = &node.value;
                    let gx = acc(&mut grads, &self.nodes, *x);
                    for ((s, &gv), &o) in gx.iter_mut().zip(&g).zip(out) {
                        if o > T::ZERO {
                            *s += gv;
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut grads, &self.nodes, *a), &g);
                    add_into(acc(&mut grads, &self.nodes, *b), &g);
                }
                Op::Sub(a, b) => {
                    add_into(acc(&mut grads, &self.nodes, *a), &g);
                    let gb = acc(&mut grads, &self.nodes, *b);
                    for (s, &gv) in gb.iter_mut().zip(&g) {
                        *s -= gv;
                    }
                }
                Op::StraightThrough(x) => add_into(acc(&mut grads, &self.nodes, *x), &g),
                Op::Concat { a, b, map } => {
                    let (ca, cb) = (self.nodes[a.0].cols, self.nodes[b.0].cols);
                    let c = ca + cb;
                    {
                        let ga = acc(&mut grads, &self.nodes, *a);
                        for (u, row) in map.left.iter().enumerate() {
                            if let Some(i) = row {
                                let i = *i as usize;
                                for k in 0..ca {
                                    ga[i * ca + k] += g[u * c + k];
                                }
                            }
                        }
                    }
                    let gb = acc(&mut grads, &self.nodes, *b);
                    for (u, row) in map.right.iter().enumerate() {
                        if let Some(j) = row {
                            let j = *j as usize;
                            for k in 0..cb {
                                gb[j * cb + k] += g[u * c + ca + k];
                            }
                        }
                    }
                }
                Op::Gather { x, rows } => {
                    let c = node.cols;
                    let gx = acc(&mut grads, &self.nodes, *x);
                    for (u, &r) in rows.iter().enumerate() {
                        for k in 0..c {
                            gx[r * c + k] += g[u * c + k];
                        }
                    }
                }
                Op::Bce { logits, targets } => {
                    let n = targets.len().max(1) as f64;
                    let scale = g[0].to_f64() / n;
                    let z = &self.nodes[logits.0].value;
                    let mut local = vec![T::ZERO; z.len()];
                    for ((s, &zv), &t) in local.iter_mut().zip(z).zip(targets.iter()) {
                        let p = sigmoid(zv.to_f64());
                        // The clamp only bites where p saturates; its gradient is zero there.
                        let clamped = p <= BCE_EPS || p >= 1.0 - BCE_EPS;
                        let d = if clamped { 0.0 } else { p - if t { 1.0 } else { 0.0 } };
                        *s = T::from_f64(scale * d);
                    }
                    add_into(acc(&mut grads, &self.nodes, *logits), &local);
                }
                Op::Bits { y, params, channels } => {
                    let model = self.model_from(*params, *channels).expect("validated at construction");
                    let yv: Vec<f64> = self.nodes[y.0].value.iter().map(|v| v.to_f64()).collect();
                    let mut gy = vec![0.0; yv.len()];
                    let mut gp = vec![0.0; model.params().len()];
                    model.bits(&yv, Some((&mut gy, &mut gp)));
                    let s = g[0].to_f64();
                    let gy: Vec<T> = gy.iter().map(|v| T::from_f64(v * s)).collect();
                    let gp: Vec<T> = gp.iter().map(|v| T::from_f64(v * s)).collect();
                    add_into(acc(&mut grads, &self.nodes, *y), &gy);
                    add_into(acc(&mut grads, &self.nodes, *params), &gp);
                }
                Op::LinComb(terms) => {
                    for &(x, c) in terms {
                        let gx = acc(&mut grads, &self.nodes, x);
                        gx[0] += T::from_f64(c) * g[0];
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Largest relative discrepancy between reverse-mode gradients and central
/// finite differences (`h = 1e-4`) of a scalar function of the given
/// parameter vectors. `build` records the loss on a fresh graph from the
/// supplied leaves and returns it.
///
/// The relative error of each component is `|a - n| / max(|a|, |n|, floor)`;
/// `floor` keeps components whose true gradient is numerically zero from
/// dominating.
pub fn grad_check<F>(params: &[(Vec<f64>, usize)], floor: f64, build: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    const H: f64 = 1e-4;
    let eval = |ps: &[(Vec<f64>, usize)]| -> f64 {
        let mut g = Graph::new();
        let leaves: Vec<Var> = ps.iter().map(|(p, c)| g.leaf(p.clone(), *c)).collect();
        let out = build(&mut g, &leaves);
        g.scalar(out)
    };
    let mut g = Graph::new();
    let leaves: Vec<Var> = params.iter().map(|(p, c)| g.leaf(p.clone(), *c)).collect();
    let out = build(&mut g, &leaves);
    let grads = g.backward(out);
    let mut worst: f64 = 0.0;
    let mut work = params.to_vec();
    for (pi, (p, _)) in params.iter().enumerate() {
        let analytic = grads.get(leaves[pi]).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; p.len()]);
        for j in 0..p.len() {
            work[pi].0[j] = p[j] + H;
            let up = eval(&work);
            work[pi].0[j] = p[j] - H;
            let down = eval(&work);
            work[pi].0[j] = p[j];
            let numeric = (up - down) / (2.0 * H);
            let a = analytic[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(err);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::{cube_offsets, pair_offsets, Coord3, CoordSet};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const TOL: f64 = 1e-3;

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn blob(seed: u64, n: usize, bound: i32) -> Arc<CoordSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..n)
            .map(|_| {
                Coord3::new(
                    rng.random_range(0..bound),
                    rng.random_range(0..bound),
                    rng.random_range(0..bound),
                )
            })
            .collect();
        Arc::new(CoordSet::from_unsorted(v))
    }

    /// Reduces a matrix node to a scalar through a fixed random projection so
    /// every output entry reaches the loss with a distinct weight.
    fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
        let rows = g.rows(x);
        let cols = g.cols(x);
        let w = random(cols, seed);
        let wv = g.leaf(w, 1);
        let map = Arc::new(point_map(rows));
        let y = g.conv(x, wv, None, map, 1).unwrap();
        sum_rows(g, y)
    }

    /// Identity kernel map over `rows` distinct points.
    fn point_map(rows: usize) -> KernelMap {
        let coords: Vec<Coord3> = (0..rows as i32).map(|i| Coord3::new(i, 0, 0)).collect();
        KernelMap::conv(&Arc::new(CoordSet::from_sorted_unique(coords)), &[Coord3::ORIGIN], 1)
    }

    fn sum_rows(g: &mut Graph<f64>, y: Var) -> Var {
        let n = g.rows(y);
        let ones = g.leaf(vec![1.0; n], 1);
        let map = Arc::new(single_sink_map(n));
        let s = g.conv(ones, y, None, map, 1);
        // `y` acts as weights here: sum_i 1 * y_i over a map that sends every
        // input to one output through one offset each.
        s.unwrap()
    }

    /// Map with `n` offsets, all sending input row `k` to output 0.
    fn single_sink_map(n: usize) -> KernelMap {
        let coords: Vec<Coord3> = (0..n as i32).map(|i| Coord3::new(i, 0, 0)).collect();
        let input = CoordSet::from_sorted_unique(coords.clone());
        let target = Arc::new(CoordSet::from_sorted_unique(vec![Coord3::ORIGIN]));
        KernelMap::on_coords(&input, &coords, target)
    }

    #[test]
    fn conv_gradients() {
        let coords = blob(1, 30, 5);
        let n = coords.len();
        let map = Arc::new(KernelMap::conv(&coords, &cube_offsets(), 1));
        let err = grad_check(
            &[(random(n * 2, 2), 2), (random(27 * 2 * 3, 3), 3), (random(3, 4), 3)],
            1e-6,
            |g, l| {
                let y = g.conv(l[0], l[1], Some(l[2]), map.clone(), 3).unwrap();
                project(g, y, 5)
            },
        );
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn strided_and_transposed_conv_gradients() {
        let coords = blob(7, 25, 8);
        let n = coords.len();
        let down = Arc::new(KernelMap::conv(&coords, &pair_offsets(), 2));
        let up = Arc::new(KernelMap::transposed(down.out_coords(), &cube_offsets(), Some(8)));
        let m = down.n_out();
        let err = grad_check(
            &[(random(n * 2, 8), 2), (random(8 * 2 * 2, 9), 2), (random(27 * 2, 10), 1)],
            1e-6,
            |g, l| {
                let h = g.conv(l[0], l[1], None, down.clone(), 2).unwrap();
                let h = g.relu(h);
                let y = g.conv(h, l[2], None, up.clone(), 1).unwrap();
                project(g, y, 11)
            },
        );
        assert!(m > 0);
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn elementwise_and_structural_gradients() {
        let a = blob(3, 20, 4);
        let b = blob(4, 20, 4);
        let union = Arc::new(UnionMap::new(&a, &b));
        let (na, nb) = (a.len(), b.len());
        let rows = Arc::new(vec![0usize, 2, 2, 1]);
        let noise = random(na * 2, 12);
        let err = grad_check(&[(random(na * 2, 13), 2), (random(na * 2, 14), 2), (random(nb, 15), 1)], 1e-6, |g, l| {
            let s = g.add(l[0], l[1]).unwrap();
            let d = g.sub(s, l[1]).unwrap();
            let d = g.sub(d, l[1]).unwrap();
            let r = g.relu(d);
            let t = g.straight_through(r, &noise);
            let c = g.concat(t, l[2], union.clone());
            let c = g.gather(c, rows.clone());
            let p = project(g, c, 16);
            let q = project(g, t, 17);
            g.lin_comb(&[(p, 0.7), (q, -1.3)])
        });
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn bce_gradient() {
        let targets = Arc::new(vec![true, false, true, true, false]);
        let err = grad_check(&[(vec![0.3, -1.2, 2.0, -0.1, 0.8], 1)], 1e-6, |g, l| g.bce(l[0], targets.clone()).unwrap());
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn bce_matches_closed_form() {
        // -[ln s(2) + ln(1 - s(-1))] / 2 with s the logistic function.
        let mut g = Graph::<f64>::new();
        let z = g.leaf(vec![2.0, -1.0], 1);
        let l = g.bce(z, Arc::new(vec![true, false])).unwrap();
        let s = |x: f64| 1.0 / (1.0 + (-x).exp());
        let expect = -(s(2.0).ln() + (1.0 - s(-1.0)).ln()) / 2.0;
        assert!((g.scalar(l) - expect).abs() < 1e-12);
    }

    #[test]
    fn bits_gradients() {
        let model = FactorizedModel::new(2, 3.0, 5);
        let y = vec![0.3, -1.7, 2.2, 0.05, -0.4, 4.1];
        let err = grad_check(&[(y, 2), (model.params().to_vec(), 1)], 1e-4, |g, l| g.bits(l[0], l[1], 2).unwrap());
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn tiny_network_gradient() {
        let coords = blob(21, 12, 4);
        let n = coords.len();
        let map = Arc::new(KernelMap::conv(&coords, &cube_offsets(), 1));
        let pm = Arc::new(point_map(n));
        let targets = Arc::new((0..n).map(|i| i % 3 == 0).collect::<Vec<_>>());
        let model = FactorizedModel::new(2, 2.0, 1);
        let noise = random(n * 2, 30);
        // 27*1*4 + 4 + 4*2 + 4*1 = 124 weights plus the entropy parameters.
        let err = grad_check(
            &[
                (random(27 * 4, 22), 4),
                (random(4, 23), 4),
                (random(8, 24), 2),
                (random(4, 25), 1),
                (model.params().to_vec(), 1),
            ],
            1e-5,
            |g, l| {
                let x = g.leaf(vec![1.0; n], 1);
                let h = g.conv(x, l[0], Some(l[1]), map.clone(), 4).unwrap();
                let h = g.relu(h);
                let y = g.conv(h, l[2], None, pm.clone(), 2).unwrap();
                let yq = g.straight_through(y, &noise);
                let r = g.bits(yq, l[4], 2).unwrap();
                let z = g.conv(h, l[3], None, pm.clone(), 1).unwrap();
                let d = g.bce(z, targets.clone()).unwrap();
                g.lin_comb(&[(r, 0.01 / n as f64), (d, 1.0)])
            },
        );
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn zero_input_gives_zero_weight_gradient() {
        let coords = blob(5, 10, 4);
        let n = coords.len();
        let map = Arc::new(KernelMap::conv(&coords, &cube_offsets(), 1));
        let mut g = Graph::<f64>::new();
        let x = g.leaf(vec![0.0; n * 2], 2);
        let w = g.leaf(random(27 * 2 * 2, 1), 2);
        let y = g.conv(x, w, None, map, 2).unwrap();
        let loss = project(&mut g, y, 3);
        let grads = g.backward(loss);
        assert!(grads.get(w).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn loss_derivative_in_lambda_is_rate() {
        let mut g = Graph::<f64>::new();
        let r = g.leaf(vec![3.25], 1);
        let d = g.leaf(vec![0.5], 1);
        let lam = 0.02;
        let total = g.lin_comb(&[(r, lam), (d, 1.0)]);
        let h = 1e-6;
        let plus = (lam + h) * 3.25 + 0.5;
        let minus = (lam - h) * 3.25 + 0.5;
        assert!(((plus - minus) / (2.0 * h) - 3.25).abs() < 1e-6);
        assert!((g.scalar(total) - (lam * 3.25 + 0.5)).abs() < 1e-12);
        let grads = g.backward(total);
        assert_eq!(grads.get(r).unwrap()[0], lam);
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(vec![1.0; 4], 2);
        let b = g.leaf(vec![1.0; 6], 3);
        assert!(g.add(a, b).is_err());
        let z = g.leaf(vec![0.0; 3], 1);
        assert!(g.bce(z, Arc::new(vec![true])).is_err());
    }
}
