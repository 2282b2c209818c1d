//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub config: AdamWConfig,
}

impl OptimizerState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, config: AdamWConfig) -> Self {
        let first_moment: Vec<Vec<f64>> = params.into_iter().map(|p| vec![0.0; p.len()]).collect();
        let second_moment = first_moment.clone();
        OptimizerState {
            step: 0,
            first_moment,
            second_moment,
            config,
        }
    }
}

/// One AdamW update: `p -= lr·wd·p`, then the bias-corrected Adam step.
/// Gradients are zeroed afterwards.
pub fn adamw_step(params: &mut [&mut Tensor], state: &mut OptimizerState) -> Result<()> {
    if params.len() != state.first_moment.len() {
        return Err(Error::InvalidShape(format!(
            "optimizer tracks {} parameters, got {}",
            state.first_moment.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if p.grad.is_none() {
            return Err(Error::MissingGrad(i));
        }
        if p.len() != state.first_moment[i].len() {
            return Err(Error::ShapeMismatch {
                op: "adamw_step",
                left: p.shape().to_vec(),
                right: vec![state.first_moment[i].len()],
            });
        }
    }
    let c = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let grad = p.grad.take().expect("checked above");
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        let data = p.data_mut();
        for j in 0..data.len() {
            let g = grad[j];
            data[j] -= c.learning_rate * c.weight_decay * data[j];
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            data[j] -= c.learning_rate * mhat / (vhat.sqrt() + c.epsilon);
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: "adamw_step" });
        }
        p.grad = Some(vec![0.0; grad.len()]);
    }
    Ok(())
}
