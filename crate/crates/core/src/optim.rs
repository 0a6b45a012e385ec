//! AdamW with decoupled weight decay, gradient clipping and weight averaging.

use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, ParamGrads};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    /// Number of updates taken so far.
    pub t: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: AdamWConfig) -> Self {
        let zeros: Vec<Mat> = store.iter().map(|(_, e)| Mat::zeros(e.value.raw_dim())).collect();
        Self {
            cfg,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. Frozen parameters and parameters without a gradient keep
    /// both their value and their moments.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (id, g) in grads.iter() {
            let (decay, frozen) = {
                let e = store.entry(id);
                (e.decay, e.frozen)
            };
            if frozen {
                continue;
            }
            let i = id.index();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            m.zip_mut_with(g, |m, &g| *m = c.beta1 * *m + (1.0 - c.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = c.beta2 * *v + (1.0 - c.beta2) * g * g);
            let p = store.get_mut(id);
            if decay && c.weight_decay != 0.0 {
                let shrink = 1.0 - c.lr * c.weight_decay;
                p.mapv_inplace(|x| x * shrink);
            }
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= c.lr * (m / bc1) / ((v / bc2).sqrt() + c.eps);
            });
        }
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut ParamGrads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// `ema ← decay·ema + (1 − decay)·params`, parameter by parameter.
pub fn ema_update(ema: &mut ParamStore, params: &ParamStore, decay: f64) {
    for id in params.ids() {
        let src = params.get(id);
        ema.get_mut(id)
            .zip_mut_with(src, |e, &p| *e = decay * *e + (1.0 - decay) * p);
    }
}
