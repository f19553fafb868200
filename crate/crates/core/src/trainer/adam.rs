use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of a flat parameter buffer at step `t`
/// (1-based). Moments are updated in place; the new parameters are returned.
pub fn adam_step(param: &[f64], grad: &[f64], m: &mut [f64], v: &mut [f64], cfg: &AdamConfig, t: u64) -> Result<Vec<f64>> {
    if grad.len() != param.len() || m.len() != param.len() || v.len() != param.len() {
        return Err(Error::shape("adam_step", &[param.len()], &[grad.len(), m.len(), v.len()]));
    }
    if t == 0 {
        return Err(Error::invalid("adam step counter starts at 1"));
    }
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    let mut out = Vec::with_capacity(param.len());
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        out.push(param[i] - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps));
    }
    Ok(out)
}

/// Adam state for every parameter of one [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore<f64>) -> Self {
        let zeros: BTreeMap<String, Vec<f64>> = params.iter().map(|(k, t)| (k.to_string(), vec![0.0; t.numel()])).collect();
        Adam {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update; `grads` are in the store's name order. Updated
    /// parameters are fresh leaves, so graphs built before the step keep
    /// referring to the old values.
    pub fn step(&mut self, params: &mut ParamStore<f64>, grads: &[Tensor<f64>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::invalid(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        self.t += 1;
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for (name, g) in names.iter().zip(grads) {
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape("adam", p.shape(), g.shape()));
            }
            let (m, v) = match (self.m.get_mut(name), self.v.get_mut(name)) {
                (Some(m), Some(v)) => (m, v),
                _ => return Err(Error::invalid(format!("no optimizer state for {name}"))),
            };
            let updated = adam_step(p.data(), g.data(), m, v, &self.config, self.t)?;
            let shape = p.shape().to_vec();
            params.replace(name, Tensor::parameter(updated, &shape)?)?;
        }
        Ok(())
    }
}
