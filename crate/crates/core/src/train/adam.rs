use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Module, Tensor2D};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Bias-corrected Adam moments, one pair per parameter in visiting order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    #[serde(skip)]
    pub first: Vec<Tensor2D>,
    #[serde(skip)]
    pub second: Vec<Tensor2D>,
}

impl OptimizerState {
    pub fn new<M: Module + ?Sized>(model: &M) -> Self {
        let mut first = Vec::new();
        model.visit_params(&mut |p| first.push(Tensor2D::zeros(p.value.rows(), p.value.cols())));
        let second = first.clone();
        Self { step: 0, first, second }
    }
}

/// Applies one Adam update to every parameter. Gradients are left untouched.
pub fn adam_step<M: Module + ?Sized>(model: &mut M, state: &mut OptimizerState, lr: f64) -> Result<()> {
    let mut bad = None;
    let mut idx = 0;
    model.visit_params(&mut |p| {
        if bad.is_none() && !p.grad.is_finite() {
            bad = Some(p.name.clone());
        }
        if state.first.get(idx).map(|m| m.shape()) != Some(p.shape()) {
            bad.get_or_insert_with(|| format!("{} (optimizer state shape mismatch)", p.name));
        }
        idx += 1;
    });
    if idx != state.first.len() {
        return Err(Error::Config(format!(
            "optimizer state holds {} tensors, model has {idx}",
            state.first.len()
        )));
    }
    if let Some(name) = bad {
        return Err(Error::Divergence(name));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    let mut idx = 0;
    let (first, second) = (&mut state.first, &mut state.second);
    model.visit_params_mut(&mut |p| {
        let m = first[idx].data_mut();
        let v = second[idx].data_mut();
        let g = p.grad.data();
        for (k, w) in p.value.data_mut().iter_mut().enumerate() {
            m[k] = BETA1 * m[k] + (1.0 - BETA1) * g[k];
            v[k] = BETA2 * v[k] + (1.0 - BETA2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
        idx += 1;
    });
    Ok(())
}
