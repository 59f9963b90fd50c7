use std::collections::{BTreeMap, BTreeSet};

use super::TrainConfig;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Adam with decoupled weight decay. Moment buffers are created lazily per
/// parameter name; frozen names never get one.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter not in `frozen`. Each of them must have
    /// a gradient of matching length.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Vec<f64>>,
        frozen: &BTreeSet<String>,
        lr: f64,
    ) -> Result<()> {
        for (name, t) in params.iter() {
            if frozen.contains(name) {
                continue;
            }
            match grads.get(name) {
                None => return Err(Error::contract(format!("no gradient for trainable parameter `{name}`"))),
                Some(g) if g.len() != t.numel() => {
                    return Err(Error::Shape { op: "optimizer_step", lhs: t.shape().to_vec(), rhs: vec![g.len()] })
                }
                _ => {}
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, param) in params.iter_mut() {
            if frozen.contains(name) {
                continue;
            }
            let g = &grads[name];
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((w, gi), mi), vi) in param.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + self.eps) + self.weight_decay * *w;
                *w -= lr * update;
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub(crate) fn clip_grad_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: Option<f64>) -> f64 {
    let norm = grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if let Some(max) = max_norm {
        if norm > max {
            let s = max / norm;
            grads.values_mut().flatten().for_each(|g| *g *= s);
        }
    }
    norm
}
