//! Parametric distributions: log-density, plain sampling, reparameterized
//! sampling, and closed-form KL where available.
//!
//! Parameters are tensors and may sit on a gradient tape; log_prob and
//! rsample then produce tracked results, while sample always detaches.

use std::f64::consts::TAU;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Elementwise (diagonal) Gaussian. `scale` is the standard deviation.
#[derive(Clone, Debug)]
pub struct NormalDiag {
    loc: Tensor,
    scale: Tensor,
}

impl NormalDiag {
    pub fn new(loc: Tensor, scale: Tensor) -> Result<NormalDiag> {
        Tensor::bshape(loc.shape(), scale.shape())?;
        if !scale.data().iter().all(|&s| s.is_finite() && s > 0.0) {
            return Err(Error::InvalidParameter {
                what: "NormalDiag scale must be finite and strictly positive".into(),
            });
        }
        Ok(NormalDiag { loc, scale })
    }

    pub fn standard(shape: &[usize]) -> NormalDiag {
        NormalDiag {
            loc: Tensor::zeros(shape),
            scale: Tensor::ones(shape),
        }
    }

    pub fn loc(&self) -> &Tensor {
        &self.loc
    }

    pub fn scale(&self) -> &Tensor {
        &self.scale
    }

    pub fn param_shape(&self) -> Vec<usize> {
        Tensor::bshape(self.loc.shape(), self.scale.shape()).expect("validated at construction")
    }

    /// Elementwise −½log(2π) − log σ − (v−μ)²/(2σ²).
    pub fn log_prob(&self, value: &Tensor) -> Result<Tensor> {
        let d = value.sub(&self.loc)?;
        let two_var = self.scale.square().mul_scalar(2.0);
        let quad = d.square().div(&two_var)?;
        Ok(self
            .scale
            .log()
            .add(&quad)?
            .neg()
            .add_scalar(-0.5 * TAU.ln()))
    }

    /// Detached draw of shape `sample_shape + param_shape`.
    pub fn sample(&self, rng: &mut Rng, sample_shape: &[usize]) -> Tensor {
        let full = concat_shape(sample_shape, &self.param_shape());
        let eps = rng.standard_normal_tensor(&full);
        self.loc
            .detach()
            .add(&self.scale.detach().mul(&eps).expect("eps has full shape"))
            .expect("params broadcast into full shape")
    }

    /// μ + σ·ε with fresh ε ~ N(0,1); gradients flow into μ and σ.
    pub fn rsample(&self, rng: &mut Rng) -> Tensor {
        let eps = rng.standard_normal_tensor(&self.param_shape());
        self.rsample_with_eps(&eps)
    }

    /// The reparameterized draw with caller-supplied noise. Freezing ε makes
    /// the draw a deterministic differentiable function of μ and σ.
    pub fn rsample_with_eps(&self, eps: &Tensor) -> Tensor {
        self.loc
            .add(&self.scale.mul(eps).expect("eps matches param shape"))
            .expect("params broadcast")
    }
}

/// KL(q ‖ p) elementwise: log(σp/σq) + (σq² + (μq−μp)²)/(2σp²) − ½.
pub fn kl_normal_normal(q: &NormalDiag, p: &NormalDiag) -> Result<Tensor> {
    let log_ratio = p.scale.log().sub(&q.scale.log())?;
    let num = q.scale.square().add(&q.loc.sub(&p.loc)?.square())?;
    let den = p.scale.square().mul_scalar(2.0);
    Ok(log_ratio.add(&num.div(&den)?)?.add_scalar(-0.5))
}

/// Bernoulli over {0,1}, stored as logits for stable log-densities.
#[derive(Clone, Debug)]
pub struct Bernoulli {
    logits: Tensor,
}

impl Bernoulli {
    pub fn from_logits(logits: Tensor) -> Bernoulli {
        Bernoulli { logits }
    }

    pub fn from_probs(probs: Tensor) -> Result<Bernoulli> {
        if !probs.data().iter().all(|&p| p > 0.0 && p < 1.0) {
            return Err(Error::InvalidParameter {
                what: "Bernoulli probs must lie strictly inside (0,1)".into(),
            });
        }
        // logit(p) = log(p / (1-p)), on-tape when probs is tracked.
        let one_minus = probs.neg().add_scalar(1.0);
        Ok(Bernoulli {
            logits: probs.div(&one_minus)?.log(),
        })
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn probs(&self) -> Tensor {
        self.logits.sigmoid()
    }

    pub fn param_shape(&self) -> Vec<usize> {
        self.logits.shape().to_vec()
    }

    /// v·ℓ − softplus(ℓ), the stable form of v·log p + (1−v)·log(1−p).
    pub fn log_prob(&self, value: &Tensor) -> Result<Tensor> {
        value.mul(&self.logits)?.sub(&self.logits.softplus())
    }

    /// Detached draw of shape `sample_shape + param_shape`.
    pub fn sample(&self, rng: &mut Rng, sample_shape: &[usize]) -> Tensor {
        let full = concat_shape(sample_shape, &self.param_shape());
        let probs = Tensor::zeros(&full)
            .add(&self.probs().detach())
            .expect("params broadcast into full shape");
        let u = rng.uniform_vec(probs.numel());
        let data: Vec<f64> = probs
            .data()
            .iter()
            .zip(&u)
            .map(|(&p, &ui)| if ui < p { 1.0 } else { 0.0 })
            .collect();
        Tensor::from_vec(full, data).expect("shape matches draw count")
    }
}

/// Either supported distribution, as attached to a random variable.
#[derive(Clone, Debug)]
pub enum Dist {
    Normal(NormalDiag),
    Bernoulli(Bernoulli),
}

impl Dist {
    pub fn name(&self) -> &'static str {
        match self {
            Dist::Normal(_) => "Normal",
            Dist::Bernoulli(_) => "Bernoulli",
        }
    }

    pub fn param_shape(&self) -> Vec<usize> {
        match self {
            Dist::Normal(d) => d.param_shape(),
            Dist::Bernoulli(d) => d.param_shape(),
        }
    }

    pub fn log_prob(&self, value: &Tensor) -> Result<Tensor> {
        match self {
            Dist::Normal(d) => d.log_prob(value),
            Dist::Bernoulli(d) => d.log_prob(value),
        }
    }

    pub fn sample(&self, rng: &mut Rng, sample_shape: &[usize]) -> Tensor {
        match self {
            Dist::Normal(d) => d.sample(rng, sample_shape),
            Dist::Bernoulli(d) => d.sample(rng, sample_shape),
        }
    }

    /// Reparameterized draw; only the Gaussian supports one.
    pub fn rsample(&self, rng: &mut Rng) -> Result<Tensor> {
        match self {
            Dist::Normal(d) => Ok(d.rsample(rng)),
            Dist::Bernoulli(_) => Err(Error::UnsupportedReparameterization { dist: "Bernoulli" }),
        }
    }
}

fn concat_shape(sample_shape: &[usize], param_shape: &[usize]) -> Vec<usize> {
    let mut full = sample_shape.to_vec();
    full.extend_from_slice(param_shape);
    full
}
