use serde::{Deserialize, Serialize};

use super::params::ParamSet;

/// Linear warmup followed by cosine decay to zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        let warm = self.warmup_steps.min(self.total_steps);
        if step < warm {
            return self.base_lr * (step + 1) as f64 / warm as f64;
        }
        let span = self.total_steps.saturating_sub(warm).max(1);
        let t = ((step - warm) as f64 / span as f64).min(1.0);
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Adam with decoupled weight decay, applied only to segments flagged `decay`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(len: usize, weight_decay: f64) -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update at learning rate `lr`. Returns `false`, leaving parameters
    /// and moments untouched, when any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[f64], lr: f64) -> bool {
        assert_eq!(grads.len(), params.len(), "gradient length");
        if grads.iter().any(|g| !g.is_finite()) {
            log::warn!("skipping optimizer step {}: non-finite gradient", self.t);
            return false;
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let shrink = 1.0 - lr * self.weight_decay;
        for seg in &params.segments {
            if !seg.trainable {
                continue;
            }
            for i in seg.range() {
                let g = grads[i];
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                let mut p = params.values[i];
                if seg.decay {
                    p *= shrink;
                }
                let update = (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + self.eps);
                params.values[i] = p - lr * update;
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ParamSet {
        let mut p = ParamSet::new();
        p.add("w", &[3], true, true, vec![1.0, -2.0, 0.5]);
        p.add("c", &[2], false, true, vec![0.3, 0.4]);
        p
    }

    #[test]
    fn zero_gradients() {
        let mut p = params();
        let before = p.clone();
        let mut opt = AdamW::new(p.len(), 0.0);
        assert!(opt.step(&mut p, &[0.0; 5], 0.1));
        assert_eq!(p, before);

        let mut opt = AdamW::new(p.len(), 0.03);
        assert!(opt.step(&mut p, &[0.0; 5], 0.1));
        for i in 0..3 {
            assert_eq!(p.values[i], before.values[i] * (1.0 - 0.1 * 0.03));
        }
        assert_eq!(&p.values[3..], &before.values[3..]);
    }

    #[test]
    fn non_finite_gradient_skips() {
        let mut p = params();
        let before = p.clone();
        let mut opt = AdamW::new(p.len(), 0.0);
        assert!(!opt.step(&mut p, &[f64::NAN, 0.0, 0.0, 0.0, 0.0], 0.1));
        assert_eq!(p, before);
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = params();
        let mut opt = AdamW::new(p.len(), 0.0);
        opt.step(&mut p, &[1.0, -1.0, 0.0, 2.0, 0.0], 0.01);
        assert!((p.values[0] - 0.99).abs() < 1e-9);
        assert!((p.values[1] + 1.99).abs() < 1e-9);
    }

    #[test]
    fn schedule_shape() {
        let s = LrSchedule { base_lr: 1.0, warmup_steps: 4, total_steps: 14 };
        assert_eq!(s.lr(0), 0.25);
        assert_eq!(s.lr(3), 1.0);
        assert_eq!(s.lr(4), 1.0);
        assert!((s.lr(9) - 0.5).abs() < 1e-12);
        assert!(s.lr(13) < 0.03);
        let short = LrSchedule { base_lr: 1.0, warmup_steps: 10, total_steps: 2 };
        assert_eq!(short.lr(1), 1.0);
    }
}
