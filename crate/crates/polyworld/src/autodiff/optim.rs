//! Adam optimizer over parameter tensors.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moment estimates.
#[derive(Debug, Clone)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

pub struct Adam {
    pub config: AdamConfig,
    /// Global step counter (bias correction), shared by all slots.
    pub step_count: u64,
    slots: Vec<AdamSlot>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Adam {
        let slots = params
            .iter()
            .map(|p| AdamSlot {
                m: vec![0.0; p.numel()],
                v: vec![0.0; p.numel()],
            })
            .collect();
        Adam {
            config,
            step_count: 0,
            slots,
        }
    }

    /// One Adam update across all parameters. Missing gradients count as
    /// zero (the moment estimates still decay, so bias-correction
    /// bookkeeping advances deterministically).
    pub fn step(&mut self, params: &[Tensor]) -> Result<()> {
        if params.len() != self.slots.len() {
            return Err(Error::contract("parameter count changed under Adam"));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (p, slot) in params.iter().zip(self.slots.iter_mut()) {
            if p.numel() != slot.m.len() {
                return Err(Error::contract("parameter shape changed under Adam"));
            }
            let grad = p.grad();
            let mut data = p.to_vec();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                slot.m[i] = c.beta1 * slot.m[i] + (1.0 - c.beta1) * g;
                slot.v[i] = c.beta2 * slot.v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                data[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
            p.set_data(&data);
        }
        Ok(())
    }

    pub fn slots(&self) -> &[AdamSlot] {
        &self.slots
    }

    /// Restore optimizer state (checkpoint resume).
    pub fn restore(&mut self, step_count: u64, slots: Vec<AdamSlot>) -> Result<()> {
        if slots.len() != self.slots.len() {
            return Err(Error::contract("Adam slot count mismatch on restore"));
        }
        for (new, old) in slots.iter().zip(&self.slots) {
            if new.m.len() != old.m.len() || new.v.len() != old.v.len() {
                return Err(Error::contract("Adam slot shape mismatch on restore"));
            }
        }
        self.step_count = step_count;
        self.slots = slots;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{backward, Tape};

    fn quadratic_step(x: &Tensor, adam: &mut Adam) -> f64 {
        x.zero_grad();
        let tape = Tape::new();
        let w = tape.watch(x);
        let loss = w.mul(&w).sum_all();
        backward(&loss).unwrap();
        adam.step(std::slice::from_ref(x)).unwrap();
        loss.value()
    }

    #[test]
    fn one_step_decreases_magnitude() {
        let x = Tensor::param(vec![1], vec![1.0]).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), std::slice::from_ref(&x));
        quadratic_step(&x, &mut adam);
        let v = x.to_vec()[0];
        assert!(v.abs() < 1.0 && v > 0.0);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let x = Tensor::param(vec![2], vec![0.5, -0.25]).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), std::slice::from_ref(&x));
        // No backward pass: gradient is absent, update must be a no-op on
        // the data while the step counter still advances.
        adam.step(std::slice::from_ref(&x)).unwrap();
        assert_eq!(x.to_vec(), vec![0.5, -0.25]);
        assert_eq!(adam.step_count, 1);
    }

    #[test]
    fn two_hundred_steps_reach_quadratic_minimum() {
        // Closed-form minimum of x^2 is 0.
        let x = Tensor::param(vec![1], vec![1.0]).unwrap();
        let cfg = AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, std::slice::from_ref(&x));
        for _ in 0..200 {
            quadratic_step(&x, &mut adam);
        }
        assert!(
            x.to_vec()[0].abs() < 1e-3,
            "final x = {}",
            x.to_vec()[0]
        );
    }

    #[test]
    fn deterministic_given_same_inputs() {
        let run = || {
            let x = Tensor::param(vec![3], vec![0.3, -0.9, 1.4]).unwrap();
            let cfg = AdamConfig {
                lr: 0.01,
                ..AdamConfig::default()
            };
            let mut adam = Adam::new(cfg, std::slice::from_ref(&x));
            for _ in 0..50 {
                quadratic_step(&x, &mut adam);
            }
            x.to_vec()
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
