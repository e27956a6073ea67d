//! AdamW with latent clipping, and cosine annealing with warm restarts.

use crate::error::{Error, Result};
use crate::net::{ParamKind, ShadowModel};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied to latent weights only.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// First and second moments for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub step: u64,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn new(model: &ShadowModel<F>) -> Self {
        let zeros: Vec<Vec<F>> = model.params().iter().map(|p| vec![F::zero(); p.values.len()]).collect();
        Self { step: 0, m: zeros.clone(), v: zeros }
    }
}

/// One AdamW update. Latent weights are clipped to `[-1, 1]` afterwards.
pub fn adamw_step<F: Real>(
    model: &mut ShadowModel<F>,
    state: &mut AdamState<F>,
    grads: &[Vec<F>],
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grads.len() != model.params().len() {
        return Err(Error::config("gradient list does not match the parameters"));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.len() != model.params()[i].values.len() {
            return Err(Error::config(format!("gradient {i} has the wrong length")));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: format!("gradient of parameter {i}"), step: state.step });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (F::of(cfg.beta1), F::of(cfg.beta2));
    let one = F::one();
    let c1 = F::of(1.0 - cfg.beta1.powi(t));
    let c2 = F::of(1.0 - cfg.beta2.powi(t));
    let lr_f = F::of(lr);
    let eps = F::of(cfg.eps);
    let decay = F::of(1.0 - lr * cfg.weight_decay);
    for (i, p) in model.params_mut().iter_mut().enumerate() {
        let latent = p.kind == ParamKind::Latent;
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.values.iter_mut().enumerate() {
            let g = grads[i][j];
            m[j] = b1 * m[j] + (one - b1) * g;
            v[j] = b2 * v[j] + (one - b2) * g * g;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            if latent {
                *w = *w * decay;
            }
            *w = *w - lr_f * mhat / (vhat.sqrt() + eps);
            if latent {
                *w = w.max(-one).min(one);
            }
        }
    }
    Ok(())
}

/// Cosine annealing with warm restarts, in optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    /// Length of the first period in steps.
    pub first_period: u64,
    /// Each period is this many times longer than the previous one.
    pub period_mult: u64,
}

impl LrSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        let mut t = step;
        let mut period = self.first_period.max(1);
        while t >= period {
            t -= period;
            period = period.saturating_mul(self.period_mult.max(1));
        }
        let frac = t as f64 / period as f64;
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}
