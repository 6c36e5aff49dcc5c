//! Adam with global-norm gradient clipping and weight decay.

use crate::error::{AutogradError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightDecay {
    /// `p -= lr * wd * p` applied outside the adaptive update (AdamW).
    Decoupled,
    /// `g += wd * p` before the moment updates (classic L2).
    Coupled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay_mode: WeightDecay,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
            decay_mode: WeightDecay::Decoupled,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub pre_clip_norm: f64,
    pub post_clip_norm: f64,
    pub clipped: bool,
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(|g| g.norm_sq()).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns `(pre, post)` norms.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> (f64, f64) {
    let pre = global_norm(grads);
    if pre > max_norm && pre > 0.0 {
        let s = max_norm / pre;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
        (pre, global_norm(grads))
    } else {
        (pre, pre)
    }
}

impl OptimizerState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::new(t.shape().to_vec(), vec![0.0; t.numel()]).unwrap())
            .collect();
        OptimizerState {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Clips, then applies one Adam update. Nothing is modified when any
    /// gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore, mut grads: Vec<Tensor>, max_norm: f64) -> Result<StepReport> {
        if grads.len() != params.len() {
            return Err(AutogradError::InvalidArgument {
                op: "optimizer_step",
                reason: format!("{} gradients for {} parameters", grads.len(), params.len()),
            });
        }
        for (id, g) in params.ids().zip(&grads) {
            if g.shape() != params.get(id).shape() {
                return Err(AutogradError::ShapeMismatch {
                    op: "optimizer_step",
                    lhs: params.get(id).shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(AutogradError::NonFiniteGradient {
                    param: params.name(id).to_string(),
                });
            }
        }
        let (pre, post) = clip_global_norm(&mut grads, max_norm);
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (k, (p, g)) in params.tensors_mut().iter_mut().zip(&grads).enumerate() {
            let m = self.first[k].data_mut();
            let v = self.second[k].data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let mut gv = gv;
                if c.decay_mode == WeightDecay::Coupled {
                    gv += c.weight_decay * *pv;
                }
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                let update = (*mv / bc1) / ((*vv / bc2).sqrt() + c.eps);
                if c.decay_mode == WeightDecay::Decoupled {
                    *pv -= c.lr * c.weight_decay * *pv;
                }
                *pv -= c.lr * update;
            }
        }
        Ok(StepReport {
            pre_clip_norm: pre,
            post_clip_norm: post,
            clipped: pre > max_norm,
        })
    }
}
