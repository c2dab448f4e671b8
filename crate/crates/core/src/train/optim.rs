//! AdamW, cosine annealing with warm restarts, class weighting and the
//! early-stopping rule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::error::{Error, Result};

/// `w_c = n / (2·n_c)`, so a balanced set gets unit weights.
pub fn class_weights(labels: &[u8]) -> Result<(f64, f64)> {
    let n1 = labels.iter().filter(|&&l| l == 1).count();
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Data(format!("label {l} is not binary")));
    }
    let n0 = labels.len() - n1;
    if n0 == 0 || n1 == 0 {
        return Err(Error::Data("class weights need both classes in the training split".into()));
    }
    let n = labels.len() as f64;
    Ok((n / (2.0 * n0 as f64), n / (2.0 * n1 as f64)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Moments for one parameter tensor plus its own step count.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T = f32> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Real> Moments<T> {
    pub fn zeros(len: usize) -> Self {
        Moments { m: vec![T::zero(); len], v: vec![T::zero(); len], t: 0 }
    }
}

impl AdamW {
    /// One decoupled-decay step:
    /// `θ ← θ − lr·(m̂/(√v̂ + ε) + wd·θ)`.
    pub fn step<T: Real>(&self, theta: &mut [T], grad: &[T], state: &mut Moments<T>, lr: f64) -> Result<()> {
        if theta.len() != grad.len() || theta.len() != state.m.len() || theta.len() != state.v.len() {
            return Err(Error::shape(format!(
                "adamw: {} params, {} grads, {} moments",
                theta.len(),
                grad.len(),
                state.m.len()
            )));
        }
        state.t += 1;
        let b1 = T::lit(self.beta1);
        let b2 = T::lit(self.beta2);
        let c1 = T::lit(1.0 - self.beta1.powi(state.t as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(state.t as i32));
        let (eps, wd, lr) = (T::lit(self.eps), T::lit(self.weight_decay), T::lit(lr));
        let one = T::one();
        for i in 0..theta.len() {
            let g = grad[i];
            state.m[i] = b1 * state.m[i] + (one - b1) * g;
            state.v[i] = b2 * state.v[i] + (one - b2) * g * g;
            let m_hat = state.m[i] / c1;
            let v_hat = state.v[i] / c2;
            theta[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * theta[i]);
        }
        Ok(())
    }
}

/// `η_min + ½(η_max − η_min)(1 + cos(π·t_cur/t_i))`.
pub fn cosine_lr(t_cur: f64, t_i: f64, eta_max: f64, eta_min: f64) -> f64 {
    eta_min + 0.5 * (eta_max - eta_min) * (1.0 + (PI * t_cur / t_i).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CosineWarmRestarts {
    pub t0: usize,
    pub t_mult: usize,
}

impl CosineWarmRestarts {
    pub fn new(t0: usize, t_mult: usize) -> Result<Self> {
        if t0 == 0 || t_mult == 0 {
            return Err(Error::Config(format!("schedule needs T0 ≥ 1 and T_mult ≥ 1, got {t0}, {t_mult}")));
        }
        Ok(CosineWarmRestarts { t0, t_mult })
    }

    /// `(T_cur, T_i)` for a 0-based epoch.
    pub fn position(&self, epoch: usize) -> (usize, usize) {
        let mut start = 0;
        let mut len = self.t0;
        while epoch >= start + len {
            start += len;
            len *= self.t_mult;
        }
        (epoch - start, len)
    }

    pub fn lr(&self, epoch: usize, eta_max: f64, eta_min: f64) -> f64 {
        let (t_cur, t_i) = self.position(epoch);
        cosine_lr(t_cur as f64, t_i as f64, eta_max, eta_min)
    }
}

/// True once the best AUC so far has gone `patience` consecutive epochs
/// without an improvement larger than `min_delta`. Undefined AUCs count as
/// no improvement.
pub fn early_stop(aucs: &[Option<f64>], patience: usize, min_delta: f64) -> bool {
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0;
    for a in aucs {
        match a {
            Some(a) if *a > best + min_delta => {
                best = *a;
                stale = 0;
            }
            _ => stale += 1,
        }
    }
    patience > 0 && stale >= patience
}
