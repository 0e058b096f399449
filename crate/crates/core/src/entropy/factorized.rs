//! Per-channel learned univariate density.
//!
//! Each channel owns a monotone scalar network `f: R -> R` built from four
//! stages of widths 1 -> 3 -> 3 -> 3 -> 1. Stage matrices pass through
//! softplus (nonnegative), hidden stages add a `tanh(a) * tanh(z)` gate with
//! `tanh(a) > -1`, so every stage is increasing. The CDF is `sigmoid(f(x))`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Smallest likelihood assigned to any integer symbol.
pub const LIKELIHOOD_FLOOR: f64 = 1.0 / 65536.0;

/// Number of trainable values per channel.
pub const PARAMS_PER_CHANNEL: usize = 43;

const WIDTHS: [usize; 5] = [1, 3, 3, 3, 1];
const MAT_OFF: [usize; 4] = [0, 3, 12, 21];
const BIAS_OFF: [usize; 4] = [24, 27, 30, 33];
const GATE_OFF: [usize; 3] = [34, 37, 40];

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Cached intermediate values of one evaluation of `f`.
#[derive(Clone, Copy, Default)]
struct Trace {
    // Input of each stage (padded to width 3) and pre-gate outputs.
    inputs: [[f64; 3]; 4],
    pre: [[f64; 3]; 4],
    out: f64,
}

fn forward(p: &[f64], x: f64) -> Trace {
    let mut t = Trace::default();
    let mut v = [x, 0.0, 0.0];
    for k in 0..4 {
        let (n_in, n_out) = (WIDTHS[k], WIDTHS[k + 1]);
        t.inputs[k] = v;
        let mut z = [0.0; 3];
        for i in 0..n_out {
            let mut s = p[BIAS_OFF[k] + i];
            for j in 0..n_in {
                s += softplus(p[MAT_OFF[k] + i * n_in + j]) * v[j];
            }
            z[i] = s;
        }
        t.pre[k] = z;
        if k < 3 {
            for i in 0..n_out {
                v[i] = z[i] + p[GATE_OFF[k] + i].tanh() * z[i].tanh();
            }
        } else {
            v = z;
        }
    }
    t.out = v[0];
    t
}

/// Accumulates `g * d f / d params` into `gp` and returns `g * d f / dx`.
fn backward(p: &[f64], t: &Trace, g: f64, gp: &mut [f64]) -> f64 {
    let mut gv = [g, 0.0, 0.0];
    for k in (0..4).rev() {
        let (n_in, n_out) = (WIDTHS[k], WIDTHS[k + 1]);
        let mut gz = [0.0; 3];
        for i in 0..n_out {
            if k < 3 {
                let ta = p[GATE_OFF[k] + i].tanh();
                let tz = t.pre[k][i].tanh();
                gz[i] = gv[i] * (1.0 + ta * (1.0 - tz * tz));
                gp[GATE_OFF[k] + i] += gv[i] * tz * (1.0 - ta * ta);
            } else {
                gz[i] = gv[i];
            }
        }
        let mut gin = [0.0; 3];
        for i in 0..n_out {
            gp[BIAS_OFF[k] + i] += gz[i];
            for j in 0..n_in {
                let raw = p[MAT_OFF[k] + i * n_in + j];
                gp[MAT_OFF[k] + i * n_in + j] += gz[i] * t.inputs[k][j] * sigmoid(raw);
                gin[j] += softplus(raw) * gz[i];
            }
        }
        gv = gin;
    }
    gv[0]
}

/// Interval mass of `[y - 0.5, y + 0.5]` computed on the side of the
/// distribution with the smaller tail, plus the partials with respect to
/// the two endpoint logits.
fn interval(lower: f64, upper: f64) -> (f64, f64, f64) {
    let s = if lower + upper > 0.0 { -1.0 } else { 1.0 };
    let (su, sl) = (sigmoid(s * upper), sigmoid(s * lower));
    let p = s * (su - sl);
    (p, su * (1.0 - su), -sl * (1.0 - sl))
}

/// Independent learned density per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedModel {
    channels: usize,
    params: Vec<f64>,
    ranges: Vec<(i32, i32)>,
}

impl FactorizedModel {
    /// Symmetric initialization: each channel starts as a logistic
    /// distribution of scale `init_scale`; stage weights are jittered by a
    /// seeded generator so hidden units differ, biases and gates start at 0.
    pub fn new(channels: usize, init_scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stage_scale = init_scale.powf(1.0 / 4.0);
        let mut params = vec![0.0; channels * PARAMS_PER_CHANNEL];
        for c in 0..channels {
            let p = &mut params[c * PARAMS_PER_CHANNEL..(c + 1) * PARAMS_PER_CHANNEL];
            for k in 0..4 {
                let fan_in = WIDTHS[k] as f64;
                let init = (1.0 / stage_scale / fan_in).exp_m1().ln();
                for m in 0..WIDTHS[k] * WIDTHS[k + 1] {
                    p[MAT_OFF[k] + m] = init + rng.random_range(-0.1..0.1);
                }
            }
        }
        let mut model = FactorizedModel {
            channels,
            params,
            ranges: vec![(0, 0); channels],
        };
        model.ranges = (0..channels).map(|c| model.tail_range(c, 1e-4)).collect();
        model
    }

    pub fn from_parts(channels: usize, params: Vec<f64>, ranges: Vec<(i32, i32)>) -> Result<Self> {
        if params.len() != channels * PARAMS_PER_CHANNEL || ranges.len() != channels {
            return Err(Error::Config("factorized model shape mismatch".into()));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("non-finite entropy model parameter".into()));
        }
        if ranges.iter().any(|&(lo, hi)| lo > hi || (hi as i64 - lo as i64) >= MAX_RANGE_WIDTH) {
            return Err(Error::Config("invalid symbol range".into()));
        }
        Ok(FactorizedModel {
            channels,
            params,
            ranges,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn ranges(&self) -> &[(i32, i32)] {
        &self.ranges
    }

    fn channel_params(&self, c: usize) -> &[f64] {
        &self.params[c * PARAMS_PER_CHANNEL..(c + 1) * PARAMS_PER_CHANNEL]
    }

    /// The monotone logit `f_c(x)`.
    pub fn logit(&self, c: usize, x: f64) -> f64 {
        forward(self.channel_params(c), x).out
    }

    pub fn cdf(&self, c: usize, x: f64) -> f64 {
        sigmoid(self.logit(c, x))
    }

    /// Unfloored interval mass `CDF(y + 0.5) - CDF(y - 0.5)`.
    pub fn pmf(&self, c: usize, y: f64) -> f64 {
        let p = self.channel_params(c);
        interval(forward(p, y - 0.5).out, forward(p, y + 0.5).out).0
    }

    /// Interval mass floored at [`LIKELIHOOD_FLOOR`].
    pub fn likelihood(&self, c: usize, y: f64) -> f64 {
        self.pmf(c, y).max(LIKELIHOOD_FLOOR)
    }

    /// Smallest symbol interval holding all but `tail` of the mass on each side.
    pub fn tail_range(&self, c: usize, tail: f64) -> (i32, i32) {
        let limit = (MAX_RANGE_WIDTH / 2 - 1) as i32;
        let mut lo = 0;
        while lo > -limit && self.cdf(c, lo as f64 - 0.5) > tail {
            lo -= 1;
        }
        let mut hi = 0;
        while hi < limit && 1.0 - self.cdf(c, hi as f64 + 0.5) > tail {
            hi += 1;
        }
        (lo, hi)
    }

    /// Sets coding ranges to `+-ceil(max|y| + 4 sigma)` per channel from
    /// observed rounded symbols (row-major, `channels` columns).
    pub fn fit_ranges(&mut self, symbols: &[i32]) {
        let n = symbols.len() / self.channels.max(1);
        for c in 0..self.channels {
            let (mut max_abs, mut sum, mut sum2) = (0f64, 0f64, 0f64);
            for r in 0..n {
                let v = symbols[r * self.channels + c] as f64;
                max_abs = max_abs.max(v.abs());
                sum += v;
                sum2 += v * v;
            }
            let sigma = if n > 0 {
                let mean = sum / n as f64;
                (sum2 / n as f64 - mean * mean).max(0.0).sqrt()
            } else {
                0.0
            };
            let half = ((max_abs + 4.0 * sigma).ceil() as i64).clamp(1, MAX_RANGE_WIDTH / 2 - 1) as i32;
            self.ranges[c] = (-half, half);
        }
    }

    /// Sum of `-log2 likelihood` over noisy or integer values `y`
    /// (row-major, `channels` columns). When `grads` is given, accumulates
    /// `d bits / d y` into `grads.0` and `d bits / d params` into `grads.1`.
    ///
    /// Floored entries still pass the gradient that raises their likelihood.
    pub fn bits(&self, y: &[f64], grads: Option<(&mut [f64], &mut [f64])>) -> f64 {
        let ch = self.channels;
        let inv_ln2 = std::f64::consts::LOG2_E;
        let mut total = 0.0;
        match grads {
            None => {
                for (i, &v) in y.iter().enumerate() {
                    total -= self.likelihood(i % ch, v).log2();
                }
            }
            Some((gy, gp)) => {
                for (i, &v) in y.iter().enumerate() {
                    let c = i % ch;
                    let p = self.channel_params(c);
                    let lo = forward(p, v - 0.5);
                    let up = forward(p, v + 0.5);
                    let (mass, du, dl) = interval(lo.out, up.out);
                    let bounded = mass.max(LIKELIHOOD_FLOOR);
                    total -= bounded.log2();
                    let g = -inv_ln2 / bounded;
                    let gpc = &mut gp[c * PARAMS_PER_CHANNEL..(c + 1) * PARAMS_PER_CHANNEL];
                    let gx_u = backward(p, &up, g * du, gpc);
                    let gx_l = backward(p, &lo, g * dl, gpc);
                    gy[i] += gx_u + gx_l;
                }
            }
        }
        total
    }

    /// Draws one symbol of channel `c` by inverse-CDF search within its range.
    pub fn sample<R: Rng>(&self, c: usize, rng: &mut R) -> i32 {
        let u: f64 = rng.random();
        let (lo, hi) = self.ranges[c];
        let mut acc = self.cdf(c, lo as f64 - 0.5);
        for k in lo..hi {
            acc += self.pmf(c, k as f64);
            if u < acc {
                return k;
            }
        }
        hi
    }
}

/// Upper bound on the width of a per-channel symbol range.
pub const MAX_RANGE_WIDTH: i64 = 4096;
