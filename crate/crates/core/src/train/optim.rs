//! AdamW with global-norm clipping and linear warmup.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            clip_norm: 2.0,
        }
    }
}

/// Moments shaped like their parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimState<T> {
    pub fn new<'a, I: IntoIterator<Item = &'a Tensor<T>>>(params: I) -> Self {
        let m: Vec<Tensor<T>> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Global norm before clipping.
    pub grad_norm: f64,
    /// Global norm of the gradient actually applied.
    pub applied_norm: f64,
}

/// `lr · step / warmup` while `step < warmup` (1-based steps), then `lr`.
pub fn warmup_lr(lr: f64, step: u64, warmup: u64) -> f64 {
    if step < warmup {
        lr * step as f64 / warmup as f64
    } else {
        lr
    }
}

/// Rescales `grads` in place to global norm at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g.sum_sq()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }
    norm
}

/// One decoupled-weight-decay Adam step. Parameters whose gradient is
/// `None` did not take part in the loss and are left untouched.
pub fn adamw_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    mut grads: Vec<Option<Tensor<T>>>,
    state: &mut OptimState<T>,
    lr: f64,
    opt: &AdamW,
) -> Result<StepStats> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Dimension(format!(
            "{} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if g.shape() != params[i].shape() {
                return Err(Error::Dimension(format!(
                    "gradient {i} has shape {:?}, parameter {:?}",
                    g.shape(),
                    params[i].shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {i}")));
            }
        }
    }
    let grad_norm = clip_global_norm(&mut grads, opt.clip_norm);
    let applied_norm = grads.iter().flatten().map(|g| g.sum_sq()).sum::<f64>().sqrt();
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(opt.beta1), T::lit(opt.beta2));
    let c1 = T::lit(1.0 - opt.beta1.powi(t));
    let c2 = T::lit(1.0 - opt.beta2.powi(t));
    let (lr_t, eps, decay) = (T::lit(lr), T::lit(opt.eps), T::lit(lr * opt.weight_decay));
    let one = T::one();
    for (i, g) in grads.into_iter().enumerate() {
        let Some(g) = g else { continue };
        let p = params[i].data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((pj, mj), vj), &gj) in p.iter_mut().zip(m).zip(v).zip(g.data()) {
            *mj = b1 * *mj + (one - b1) * gj;
            *vj = b2 * *vj + (one - b2) * gj * gj;
            let mh = *mj / c1;
            let vh = *vj / c2;
            *pj -= decay * *pj + lr_t * mh / (vh.sqrt() + eps);
        }
    }
    Ok(StepStats {
        grad_norm,
        applied_norm,
    })
}
