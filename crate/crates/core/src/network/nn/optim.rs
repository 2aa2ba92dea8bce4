//! AdamW with decoupled weight decay, warmup + cosine-annealing learning
//! rate, and an exponential moving average of the weights for sampling.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::{ParamStore, Scalar};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Total steps for the cosine annealing horizon.
    pub total_steps: usize,
    /// Final learning rate as a fraction of `lr`.
    pub lr_floor_fraction: f64,
    /// Gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 5.0e-5,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 100,
            total_steps: 10_000,
            lr_floor_fraction: 0.1,
            grad_clip: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW<F: Scalar> {
    pub cfg: AdamWConfig,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
    step: usize,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(cfg: AdamWConfig, ps: &ParamStore<F>) -> Self {
        let m = ps.ids().map(|id| ArrayD::zeros(ps.value(id).raw_dim())).collect();
        let v = ps.ids().map(|id| ArrayD::zeros(ps.value(id).raw_dim())).collect();
        AdamW { cfg, m, v, step: 0 }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Warmup then cosine annealing to `lr * lr_floor_fraction`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let c = &self.cfg;
        if c.warmup_steps > 0 && step < c.warmup_steps {
            return c.lr * (step + 1) as f64 / c.warmup_steps as f64;
        }
        let total = c.total_steps.max(c.warmup_steps + 1);
        let progress =
            ((step - c.warmup_steps) as f64 / (total - c.warmup_steps) as f64).clamp(0.0, 1.0);
        let floor = c.lr * c.lr_floor_fraction;
        floor + (c.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    /// Apply one update from the accumulated gradients, then zero them.
    pub fn update(&mut self, ps: &mut ParamStore<F>) {
        if self.cfg.grad_clip > 0.0 {
            let mut norm_sq = 0.0f64;
            for id in ps.ids() {
                for &g in ps.grad(id).iter() {
                    let gf = g.to_f64().unwrap();
                    norm_sq += gf * gf;
                }
            }
            let norm = norm_sq.sqrt();
            if norm > self.cfg.grad_clip {
                let scale = F::from_f64(self.cfg.grad_clip / norm);
                for id in ps.ids() {
                    ps.grad_mut(id).mapv_inplace(|g| g * scale);
                }
            }
        }

        let lr = self.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let b1 = F::from_f64(self.cfg.beta1);
        let b2 = F::from_f64(self.cfg.beta2);
        let one = F::one();
        let eps = F::from_f64(self.cfg.eps);
        let bias1 = 1.0 - self.cfg.beta1.powi(t);
        let bias2 = 1.0 - self.cfg.beta2.powi(t);
        let step_size = F::from_f64(lr / bias1);
        let bias2_sqrt = F::from_f64(bias2.sqrt());
        let decay = F::from_f64(lr * self.cfg.weight_decay);

        for id in ps.ids() {
            let idx = id.0;
            let grad = ps.grad(id).clone();
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            ndarray::Zip::from(m.view_mut()).and(grad.view()).for_each(|m, &g| {
                *m = b1 * *m + (one - b1) * g;
            });
            ndarray::Zip::from(v.view_mut()).and(grad.view()).for_each(|v, &g| {
                *v = b2 * *v + (one - b2) * g * g;
            });
            let value = ps.value_mut(id);
            ndarray::Zip::from(value.view_mut())
                .and(m.view())
                .and(v.view())
                .for_each(|w, &m, &v| {
                    let denom = v.sqrt() / bias2_sqrt + eps;
                    *w = *w - step_size * m / denom - decay * *w;
                });
        }
        ps.zero_grads();
    }
}

/// Exponential moving average of the parameter vector.
#[derive(Debug, Clone)]
pub struct Ema<F: Scalar> {
    pub decay: f64,
    shadow: Vec<ArrayD<F>>,
}

impl<F: Scalar> Ema<F> {
    pub fn new(decay: f64, ps: &ParamStore<F>) -> Self {
        Ema { decay, shadow: ps.ids().map(|id| ps.value(id).clone()).collect() }
    }

    pub fn update(&mut self, ps: &ParamStore<F>) {
        let d = F::from_f64(self.decay);
        let one = F::one();
        for (idx, id) in ps.ids().enumerate() {
            ndarray::Zip::from(self.shadow[idx].view_mut())
                .and(ps.value(id).view())
                .for_each(|s, &w| {
                    *s = d * *s + (one - d) * w;
                });
        }
    }

    /// Copy the averaged weights into a parameter store.
    pub fn apply_to(&self, ps: &mut ParamStore<F>) {
        for (idx, id) in ps.ids().enumerate() {
            ps.value_mut(id).assign(&self.shadow[idx]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn adamw_decreases_quadratic() {
        // Minimize f(w) = 0.5 * |w - 3|^2 elementwise.
        let mut ps = ParamStore::<f64>::new();
        let id = ps.register("w", ArrayD::zeros(IxDyn(&[4])));
        let cfg = AdamWConfig {
            lr: 0.1,
            warmup_steps: 5,
            total_steps: 400,
            weight_decay: 0.0,
            grad_clip: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &ps);
        for _ in 0..400 {
            let w = ps.value(id).clone();
            let grad = w.mapv(|x| x - 3.0);
            ps.grad_mut(id).assign(&grad);
            opt.update(&mut ps);
        }
        for &w in ps.value(id).iter() {
            assert!((w - 3.0).abs() < 1e-2, "w = {w}");
        }
    }

    #[test]
    fn lr_schedule_shape() {
        let cfg = AdamWConfig {
            lr: 1.0,
            warmup_steps: 10,
            total_steps: 110,
            lr_floor_fraction: 0.1,
            ..AdamWConfig::default()
        };
        let ps = ParamStore::<f64>::new();
        let opt = AdamW::new(cfg, &ps);
        assert!((opt.lr_at(0) - 0.1).abs() < 1e-12);
        assert!((opt.lr_at(9) - 1.0).abs() < 1e-12);
        assert!(opt.lr_at(60) < 1.0 && opt.lr_at(60) > 0.1);
        assert!((opt.lr_at(109) - 0.1).abs() < 1e-2);
    }

    #[test]
    fn ema_tracks_weights() {
        let mut ps = ParamStore::<f64>::new();
        let id = ps.register("w", ArrayD::zeros(IxDyn(&[1])));
        let mut ema = Ema::new(0.5, &ps);
        ps.value_mut(id).fill(1.0);
        ema.update(&ps); // shadow = 0.5
        ema.update(&ps); // shadow = 0.75
        let mut out = ps.clone();
        ema.apply_to(&mut out);
        assert!((out.value(id)[[0]] - 0.75).abs() < 1e-12);
    }
}
