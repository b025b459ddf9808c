//! Adam with decoupled weight decay. Decay multiplies the parameter down
//! before the moment-based delta is applied, so it never leaks into the
//! moment estimates.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub struct AdamState<E: Scalar> {
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
}

impl<E: Scalar> AdamState<E> {
    /// Fresh zeroed moments aligned to `params` (order is significant and
    /// must stay stable across steps and checkpoints).
    pub fn new(params: &[Tensor<E>], beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(Error::Param(format!(
                "adam betas must be in [0,1), got ({beta1}, {beta2})"
            )));
        }
        if eps <= 0.0 {
            return Err(Error::Param(format!("adam eps must be > 0, got {eps}")));
        }
        Ok(AdamState {
            t: 0,
            beta1,
            beta2,
            eps,
            m: params.iter().map(|p| vec![E::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![E::zero(); p.numel()]).collect(),
        })
    }

    /// Rebuild from checkpointed moments.
    pub fn from_parts(
        t: u64,
        m: Vec<Vec<E>>,
        v: Vec<Vec<E>>,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) -> Result<Self> {
        if m.len() != v.len() {
            return Err(Error::Dim(format!(
                "moment lists disagree: {} vs {}",
                m.len(),
                v.len()
            )));
        }
        let mut state = AdamState::new(&[], beta1, beta2, eps)?;
        state.t = t;
        state.m = m;
        state.v = v;
        Ok(state)
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn m(&self) -> &[Vec<E>] {
        &self.m
    }

    pub fn v(&self) -> &[Vec<E>] {
        &self.v
    }
}

/// One optimizer step over `params`, consuming the gradients accumulated on
/// them (missing gradients are treated as zero). Weight decay is decoupled:
/// p <- p - lr*wd*p happens before the Adam delta.
pub fn adam_step<E: Scalar>(
    state: &mut AdamState<E>,
    params: &[Tensor<E>],
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::Dim(format!(
            "adam_step got {} params for state tracking {}",
            params.len(),
            state.m.len()
        )));
    }
    if lr < 0.0 || weight_decay < 0.0 {
        return Err(Error::Param(
            "adam_step lr and weight_decay must be non-negative".into(),
        ));
    }
    state.t += 1;
    let b1 = E::from_f64(state.beta1);
    let b2 = E::from_f64(state.beta2);
    let one_b1 = E::from_f64(1.0 - state.beta1);
    let one_b2 = E::from_f64(1.0 - state.beta2);
    let bc1 = E::from_f64(1.0 / (1.0 - state.beta1.powi(state.t as i32)));
    let bc2 = E::from_f64(1.0 / (1.0 - state.beta2.powi(state.t as i32)));
    let lr_e = E::from_f64(lr);
    let decay = E::from_f64(1.0 - lr * weight_decay);
    let eps_e = E::from_f64(state.eps);

    for (i, p) in params.iter().enumerate() {
        let grad = p.take_grad();
        if p.numel() != state.m[i].len() {
            return Err(Error::Dim(format!(
                "param {i} has {} elements, moments have {}",
                p.numel(),
                state.m[i].len()
            )));
        }
        let mut data = p.data_mut();
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for j in 0..data.len() {
            let g = grad.as_ref().map_or(E::zero(), |g| g[j]);
            if weight_decay != 0.0 {
                data[j] *= decay;
            }
            m[j] = b1 * m[j] + one_b1 * g;
            v[j] = b2 * v[j] + one_b2 * g * g;
            let mhat = m[j] * bc1;
            let vhat = v[j] * bc2;
            data[j] -= lr_e * mhat / (vhat.sqrt() + eps_e);
        }
    }
    Ok(())
}
