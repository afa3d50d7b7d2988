use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Gradients, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

/// First and second moments, shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub steps: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        AdamState {
            steps: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update. Parameters are left untouched if any
/// gradient is non-finite.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
    hyper: &AdamHyper,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape("gradient/moment count does not match parameters"));
    }
    for (id, g) in grads.iter() {
        if g.shape() != params.get(id).shape() {
            return Err(Error::shape(format!("gradient shape for `{}`", params.name(id))));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(params.name(id).to_string()));
        }
    }
    state.steps += 1;
    let t = state.steps as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for (i, (id, g)) in grads.iter().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params.get_mut(id).data_mut();
        for j in 0..p.len() {
            let gj = g.data()[j];
            m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * gj;
            v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * gj * gj;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            p[j] -= lr * mh / (vh.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then linear decay to 0 at `total`.
pub fn lr_at_step(step: usize, warmup: usize, total: usize, peak: f64) -> Result<f64> {
    if step > total {
        return Err(Error::config(format!("step {step} beyond schedule end {total}")));
    }
    if warmup >= total {
        return Err(Error::config("warmup must be shorter than the schedule"));
    }
    Ok(if step <= warmup {
        if warmup == 0 {
            peak
        } else {
            peak * step as f64 / warmup as f64
        }
    } else {
        peak * (total - step) as f64 / (total - warmup) as f64
    })
}
