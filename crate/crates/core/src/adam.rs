use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update on every trainable parameter. Frozen
/// parameters are skipped. Gradients are left in place for the caller to zero.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    for (name, t) in params.iter() {
        if t.requires_grad && t.grad().is_none() {
            return Err(Error::MissingGrad(name.to_string()));
        }
    }
    if state.first.is_empty() {
        state.first = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        state.second = state.first.clone();
    } else if state.first.len() != params.len() {
        return Err(Error::InvalidArgument(
            "optimizer state belongs to a different parameter set".into(),
        ));
    }
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for ((_, t), (m, v)) in params
        .iter_mut()
        .zip(state.first.iter_mut().zip(state.second.iter_mut()))
    {
        if !t.requires_grad {
            continue;
        }
        if m.len() != t.numel() {
            return Err(Error::shape(
                "adam_step",
                "moment shape differs from parameter",
            ));
        }
        let g = t.grad().expect("checked above").to_vec();
        for (((p, gi), mi), vi) in t
            .data_mut()
            .iter_mut()
            .zip(&g)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    params.bump_version();
    Ok(())
}
