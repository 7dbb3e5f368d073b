use serde::{Deserialize, Serialize};

use super::Tensor;

/// Optimiser settings shared by every trainer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
    /// Linear warmup length in steps.
    pub warmup: usize,
    /// Cosine decay after warmup ends at `learning_rate * final_lr_fraction`
    /// on step `steps`. `1` keeps the rate constant.
    pub final_lr_fraction: f64,
    pub seed: u64,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-3,
            steps: 1000,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            warmup: 50,
            final_lr_fraction: 0.1,
            seed: 17,
        }
    }
}

/// Adam with bias correction, linear warmup, and optional global-norm clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: OptConfig,
    t: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: OptConfig, shapes: impl IntoIterator<Item = [usize; 2]>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = shapes
            .into_iter()
            .map(|[r, c]| (Tensor::zeros(r, c), Tensor::zeros(r, c)))
            .unzip();
        Self { cfg, t: 0, m, v }
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    /// Learning rate used on (1-based) update `t`.
    pub fn rate_at(&self, t: usize) -> f64 {
        let (w, n) = (self.cfg.warmup, self.cfg.steps);
        let warm = if w > 0 { (t as f64 / w as f64).min(1.0) } else { 1.0 };
        let decay = if t <= w || n <= w {
            1.0
        } else {
            let progress = ((t - w) as f64 / (n - w) as f64).min(1.0);
            let f = self.cfg.final_lr_fraction;
            f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        };
        self.cfg.learning_rate * warm * decay
    }

    /// Applies one update. `grads[i]` belongs to `params[i]`; returns the
    /// pre-clip global gradient norm.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> f64 {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let norm = grads.iter().map(Tensor::sum_squares).sum::<f64>().sqrt();
        let clip = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        let lr = self.rate_at(self.t);
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j] * clip;
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *w -= lr * mh / (vh.sqrt() + self.cfg.eps);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_weights_untouched() {
        let mut w = Tensor::row_vector(vec![0.5, -0.25]);
        let mut adam = Adam::new(OptConfig::default(), [w.shape()]);
        for _ in 0..5 {
            adam.step(&mut [&mut w], &[Tensor::zeros(1, 2)]);
        }
        assert_eq!(w.data(), &[0.5, -0.25]);
    }

    #[test]
    fn warmup_then_cosine_schedule() {
        let cfg = OptConfig {
            learning_rate: 1.0,
            steps: 12,
            warmup: 2,
            final_lr_fraction: 0.1,
            ..OptConfig::default()
        };
        let adam = Adam::new(cfg, []);
        assert_eq!(adam.rate_at(1), 0.5);
        assert_eq!(adam.rate_at(2), 1.0);
        assert!((adam.rate_at(7) - 0.55).abs() < 1e-12);
        assert!((adam.rate_at(12) - 0.1).abs() < 1e-12);
        assert!((adam.rate_at(40) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn minimises_a_quadratic() {
        let cfg = OptConfig {
            learning_rate: 0.05,
            warmup: 0,
            clip_norm: 0.0,
            ..OptConfig::default()
        };
        let mut w = Tensor::row_vector(vec![3.0, -2.0]);
        let mut adam = Adam::new(cfg, [w.shape()]);
        for _ in 0..2000 {
            let mut g = w.clone();
            g.scale(2.0);
            adam.step(&mut [&mut w], &[g]);
        }
        assert!(w.data().iter().all(|v| v.abs() < 1e-3), "{:?}", w.data());
    }
}
