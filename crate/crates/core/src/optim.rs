//! AdamW with decoupled weight decay and the cosine schedule with warm restarts.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{real, to_f64, Real, Tensor};

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, weight_decay: f64) -> Self {
        let zeros = || store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        AdamW { lr, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. `grads` are in store order; a parameter whose gradient is
    /// `None` only receives weight decay.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Invalid(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        for ((name, p), g) in store.iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::Invalid(format!("gradient for {name} has shape {:?}, parameter {:?}", g.shape(), p.shape())));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay: T = real(1.0 - self.lr * self.weight_decay);
        let (b1, b2): (T, T) = (real(self.beta1), real(self.beta2));
        let (one, lr, eps) = (T::one(), self.lr, self.eps);
        for (k, ((_, p), g)) in store.iter_mut().zip(grads).enumerate() {
            for x in p.data_mut() {
                *x *= decay;
            }
            let Some(g) = g else { continue };
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let m_hat = to_f64(*mi) / bc1;
                let v_hat = to_f64(*vi) / bc2;
                *x -= real(lr * m_hat / (v_hat.sqrt() + eps));
            }
        }
        Ok(())
    }
}

/// Cosine annealing with warm restarts: cycles of length `t0`, `t0 * t_mult`,
/// `t0 * t_mult²`, ...
pub fn lr_at(epoch: f64, base_lr: f64, t0: usize, t_mult: usize, eta_min: f64) -> f64 {
    let mut start = 0.0;
    let mut len = t0 as f64;
    if t_mult > 1 {
        while epoch >= start + len {
            start += len;
            len *= t_mult as f64;
        }
    } else {
        start = (epoch / len).floor() * len;
    }
    let cur = epoch - start;
    eta_min + 0.5 * (base_lr - eta_min) * (1.0 + (PI * cur / len).cos())
}
