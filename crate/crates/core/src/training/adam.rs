//! Adam with L2 weight decay folded into the gradient.

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    /// One moment buffer per parameter group of the given sizes.
    pub fn new(sizes: &[usize], weight_decay: f64) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Advances the step counter; call once before updating the groups.
    pub fn tick(&mut self) {
        self.t += 1;
    }

    /// Updates group `k` in place. `decay` selects whether weight decay
    /// applies to this group.
    pub fn update(&mut self, k: usize, params: &mut [f64], grad: &[f64], lr: f64, decay: bool) {
        let t = self.t.max(1) as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let wd = if decay { self.weight_decay } else { 0.0 };
        let (m, v) = (&mut self.m[k], &mut self.v[k]);
        for i in 0..params.len() {
            let g = grad[i] + wd * params[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            params[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_the_learning_rate() {
        let mut opt = Adam::new(&[3], 0.0);
        let mut p = vec![1.0, -2.0, 0.5];
        opt.tick();
        opt.update(0, &mut p, &[4.0, -0.01, 0.0], 0.1, true);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 1.9).abs() < 1e-4);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut opt = Adam::new(&[2], 0.0);
        let mut p = vec![3.0, -4.0];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.0), 2.0 * (p[1] + 0.5)];
            opt.tick();
            opt.update(0, &mut p, &g, 0.05, false);
        }
        assert!((p[0] - 1.0).abs() < 1e-3 && (p[1] + 0.5).abs() < 1e-3, "{p:?}");
    }

    #[test]
    fn decay_shrinks_idle_weights() {
        let mut opt = Adam::new(&[1, 1], 0.1);
        let (mut a, mut b) = (vec![1.0], vec![1.0]);
        for _ in 0..50 {
            opt.tick();
            opt.update(0, &mut a, &[0.0], 0.01, true);
            opt.update(1, &mut b, &[0.0], 0.01, false);
        }
        assert!(a[0] < 0.7);
        assert_eq!(b[0], 1.0);
    }
}
