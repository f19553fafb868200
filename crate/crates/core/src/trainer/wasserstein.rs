//! Earth-mover distance between two 1-D point sets estimated by training a
//! small WGAN-GP critic, for comparison against the exact value.

use rand::Rng;

use super::Adam;
use super::AdamConfig;
use crate::error::{Error, Result};
use crate::models::seeded;
use crate::nn::{glorot_bound, ParamStore};
use crate::objectives::{gradient_penalty, wgan_critic_loss};
use crate::tensor::{grad, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct W1Config {
    pub hidden: usize,
    pub steps: usize,
    pub lambda_gp: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for W1Config {
    fn default() -> Self {
        W1Config {
            hidden: 32,
            steps: 2000,
            lambda_gp: 10.0,
            adam: AdamConfig { lr: 1e-2, beta1: 0.5, beta2: 0.9, eps: 1e-8 },
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct W1Estimate {
    /// `mean D(a) - mean D(b)`, the negated critic loss.
    pub estimate: f64,
    pub gradient_penalty: f64,
}

/// Three-layer leaky-relu MLP on scalars.
struct Mlp {
    params: ParamStore<f64>,
}

impl Mlp {
    fn new(hidden: usize, seed: u64) -> Result<Self> {
        let mut rng = seeded(seed, 0x1d);
        let mut params = ParamStore::new();
        for (name, fan_in, fan_out) in [("l1", 1, hidden), ("l2", hidden, hidden), ("l3", hidden, 1)] {
            let bound = glorot_bound(fan_in, fan_out);
            // a zero output layer starts the critic at D = 0, where the
            // penalty has no parameter gradient and the loss alone picks the
            // sign of the slope; otherwise a 1-D critic can lock into the
            // wrong sign
            let w = if name == "l3" {
                vec![0.0; fan_in * fan_out]
            } else {
                (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect()
            };
            params.insert(format!("{name}.weight"), Tensor::parameter(w, &[fan_in, fan_out])?)?;
            params.insert(format!("{name}.bias"), Tensor::parameter(vec![0.0; fan_out], &[fan_out])?)?;
        }
        Ok(Mlp { params })
    }

    /// `(N, 1)` points to `(N,)` scores.
    fn score(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let p = |n: &str| self.params.get(n);
        let h = x.matmul(p("l1.weight")?)?.add(p("l1.bias")?)?.leaky_relu(0.2);
        let h = h.matmul(p("l2.weight")?)?.add(p("l2.bias")?)?.leaky_relu(0.2);
        let out = h.matmul(p("l3.weight")?)?.add(p("l3.bias")?)?;
        out.reshape(&[x.shape()[0]])
    }
}

/// Trains a critic to separate `a` (real) from `b` (fake) with the gradient
/// penalty, then reports `-critic loss` on the full sets.
pub fn estimate_w1_1d(a: &[f64], b: &[f64], cfg: &W1Config) -> Result<W1Estimate> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid(format!("point sets of sizes {} and {}", a.len(), b.len())));
    }
    let n = a.len();
    let real = Tensor::from_vec(a.to_vec(), &[n, 1])?;
    let fake = Tensor::from_vec(b.to_vec(), &[n, 1])?;
    let mut mlp = Mlp::new(cfg.hidden, cfg.seed)?;
    let mut opt = Adam::new(cfg.adam, &mlp.params);
    let mut rng = seeded(cfg.seed, 0x1e);
    let mut gp_value = 0.0;
    for _ in 0..cfg.steps {
        let t: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let hat: Vec<f64> = a.iter().zip(b).zip(&t).map(|((x, y), t)| (1.0 - t) * x + t * y).collect();
        let hat = Tensor::from_vec(hat, &[n, 1])?.into_leaf(true);
        let loss = wgan_critic_loss(&mlp.score(&real)?, &mlp.score(&fake)?)?;
        let gp = gradient_penalty(&|x: &Tensor<f64>| mlp.score(x), &hat, cfg.lambda_gp)?;
        gp_value = gp.item()?;
        let total = loss.add(&gp)?;
        let grads = grad(&total, &mlp.params.tensors(), false)?;
        opt.step(&mut mlp.params, &grads)?;
    }
    let loss = wgan_critic_loss(&mlp.score(&real)?, &mlp.score(&fake)?)?.item()?;
    Ok(W1Estimate { estimate: -loss, gradient_penalty: gp_value })
}
