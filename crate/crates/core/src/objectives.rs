//! Loss functions: the classic GAN value, WGAN critic/generator losses, the
//! gradient penalty, the l1 content loss and the combined generator objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Critic;
use crate::tensor::{grad, Element, Tensor};

/// Added under the square root of the gradient norm so its derivative stays
/// finite when the critic gradient vanishes.
const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the depth l1 term in the content loss.
    pub alpha: f64,
    /// Gradient-penalty coefficient.
    pub lambda_gp: f64,
    /// Weight of the adversarial terms in the generator objective.
    pub beta_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            lambda_gp: 10.0,
            beta_adv: 0.001,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.alpha, self.lambda_gp, self.beta_adv].iter().all(|v| v.is_finite() && *v >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("loss weights must be finite and >= 0: {self:?}")))
        }
    }
}

/// `E[log D(x)] + E[log(1 - D(G(z)))]` for discriminator probabilities.
pub fn vanilla_gan_value<T: Element>(d_real: &Tensor<T>, d_fake: &Tensor<T>) -> Result<Tensor<T>> {
    let in_open_unit = |t: &Tensor<T>| t.data().iter().all(|v| *v > T::zero() && *v < T::one());
    if !in_open_unit(d_real) || !in_open_unit(d_fake) {
        return Err(Error::Domain {
            op: "vanilla_gan_value",
            detail: "discriminator outputs must lie in (0, 1)".into(),
        });
    }
    let real = d_real.log()?.mean_all();
    let fake = d_fake.neg().add_scalar(T::one()).log()?.mean_all();
    real.add(&fake)
}

/// `mean(d_fake) - mean(d_real)`; the critic minimizes this.
pub fn wgan_critic_loss<T: Element>(d_real: &Tensor<T>, d_fake: &Tensor<T>) -> Result<Tensor<T>> {
    d_fake.mean_all().sub(&d_real.mean_all())
}

/// `-mean(d_fake)`.
pub fn wgan_generator_loss<T: Element>(d_fake: &Tensor<T>) -> Tensor<T> {
    d_fake.mean_all().neg()
}

/// Per-sample convex combination `(1 - t) x + t x_tilde`, `t` of shape `(B,)`.
pub fn interpolate_samples<T: Element>(x: &Tensor<T>, x_tilde: &Tensor<T>, t: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != x_tilde.shape() {
        return Err(Error::shape("interpolate_samples", x.shape(), x_tilde.shape()));
    }
    let batch = x.shape().first().copied().unwrap_or(0);
    if t.shape() != [batch] {
        return Err(Error::shape("interpolate_samples", t.shape(), &[batch]));
    }
    if t.data().iter().any(|v| !(*v >= T::zero() && *v <= T::one())) {
        return Err(Error::Domain {
            op: "interpolate_samples",
            detail: "t must lie in [0, 1]".into(),
        });
    }
    let mut bshape = vec![1; x.rank()];
    bshape[0] = batch;
    let t = t.reshape(&bshape)?;
    let one_minus = t.neg().add_scalar(T::one());
    x.mul(&one_minus)?.add(&x_tilde.mul(&t)?)
}

/// `lambda * mean_b (||grad_x D(x_hat)_b||_2 - 1)^2`.
///
/// `x_hat` must require grad. The result is differentiable with respect to
/// the critic's parameters (the inner gradient is built with `create_graph`).
pub fn gradient_penalty<T: Element, C: Critic<T> + ?Sized>(critic: &C, x_hat: &Tensor<T>, lambda_gp: T) -> Result<Tensor<T>> {
    if !x_hat.requires_grad() {
        return Err(Error::invalid("gradient_penalty needs an x_hat that requires grad"));
    }
    let batch = x_hat.shape().first().copied().unwrap_or(0);
    if batch == 0 {
        return Err(Error::invalid("gradient_penalty of an empty batch"));
    }
    let scores = critic.score(x_hat)?;
    // samples are independent, so the gradient of the summed score holds
    // each sample's own input gradient
    let g = grad(&scores.sum_all(), std::slice::from_ref(x_hat), true)?.remove(0);
    let flat = g.reshape(&[batch, x_hat.numel() / batch])?;
    let norms = flat.mul(&flat)?.sum_axes(&[1], false)?.add_scalar(T::of(NORM_EPS)).sqrt()?;
    let dev = norms.add_scalar(-T::one());
    Ok(dev.mul(&dev)?.mean_all().scale(lambda_gp))
}

/// l1 reconstruction terms on the raw generator output over the full image.
#[derive(Clone, Debug)]
pub struct ContentLoss<T: Element> {
    pub l1_rgb: Tensor<T>,
    pub l1_depth: Tensor<T>,
    /// `l1_rgb + alpha * l1_depth`.
    pub total: Tensor<T>,
}

pub fn content_loss<T: Element>(
    raw_rgb: &Tensor<T>,
    x_c: &Tensor<T>,
    raw_depth: &Tensor<T>,
    x_d: &Tensor<T>,
    alpha: T,
) -> Result<ContentLoss<T>> {
    if raw_rgb.shape() != x_c.shape() {
        return Err(Error::shape("content_loss", raw_rgb.shape(), x_c.shape()));
    }
    if raw_depth.shape() != x_d.shape() {
        return Err(Error::shape("content_loss", raw_depth.shape(), x_d.shape()));
    }
    let l1_rgb = raw_rgb.sub(x_c)?.abs().mean_all();
    let l1_depth = raw_depth.sub(x_d)?.abs().mean_all();
    let total = if alpha == T::zero() {
        l1_rgb.clone()
    } else {
        l1_rgb.add(&l1_depth.scale(alpha))?
    };
    Ok(ContentLoss { l1_rgb, l1_depth, total })
}

/// `content + beta_adv * (adv_global + adv_local)`.
pub fn generator_objective<T: Element>(
    content: &Tensor<T>,
    adv_global: &Tensor<T>,
    adv_local: &Tensor<T>,
    beta_adv: T,
) -> Result<Tensor<T>> {
    if beta_adv == T::zero() {
        return Ok(content.clone());
    }
    content.add(&adv_global.add(adv_local)?.scale(beta_adv))
}
