//! Adam optimizer.
//!
//! Moment slots are matched to parameters by visitation order, so the model
//! must enumerate parameters in the same order every step (the visitor im-
//! plementations guarantee that). Frozen parameters and zero learning rates
//! consume a slot but skip the update entirely, leaving both the parameter
//! bits and the slot's moments and step count untouched; a parameter that
//! thaws later starts its bias correction fresh.

use crate::nn::{Param, Scalar};

#[derive(Debug, Clone)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    slots: Vec<Slot>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new(0.9, 0.999, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        assert!((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0);
        Adam {
            beta1,
            beta2,
            eps,
            slots: Vec::new(),
        }
    }

    /// Apply one update. `for_each` must enumerate every parameter with its
    /// name; `lr_of` maps the name to this step's learning rate (0 skips).
    pub fn step<R: Scalar>(
        &mut self,
        lr_of: impl Fn(&str) -> f64,
        for_each: impl FnOnce(&mut dyn FnMut(String, &mut Param<R>)),
    ) {
        let slots = &mut self.slots;
        let (beta1, beta2, eps) = (self.beta1, self.beta2, self.eps);
        let mut idx = 0usize;
        for_each(&mut |name: String, p: &mut Param<R>| {
            if idx == slots.len() {
                slots.push(Slot {
                    m: vec![0.0; p.numel()],
                    v: vec![0.0; p.numel()],
                    step: 0,
                });
            }
            let slot = &mut slots[idx];
            assert_eq!(
                slot.m.len(),
                p.numel(),
                "parameter order changed between steps at '{name}'"
            );
            idx += 1;
            let lr = lr_of(&name);
            if !p.trainable || lr == 0.0 {
                return;
            }
            slot.step += 1;
            let bc1 = 1.0 - beta1.powi(slot.step as i32);
            let bc2 = 1.0 - beta2.powi(slot.step as i32);
            for i in 0..p.data.len() {
                let g = p.grad[i].to_f64();
                slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * g;
                slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * g * g;
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                let delta = lr * m_hat / (v_hat.sqrt() + eps);
                p.data[i] = R::from_f64(p.data[i].to_f64() - delta);
            }
        });
    }
}
