//! Dense layers, a Sequential container, and a mean-field Bayesian dense
//! layer whose weights are random variables with a KL penalty.
//!
//! Layers do not own their weights. They register named tensors in a
//! [`ParamStore`] at construction and read them back through [`BoundParams`]
//! on every forward pass, so the same layer object serves training (params
//! watched on a tape) and evaluation (params detached).

use indexmap::IndexMap;

use crate::dist::{kl_normal_normal, NormalDiag};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

/// Inverse of softplus: the ρ with softplus(ρ) = y.
pub fn softplus_inv(y: f64) -> f64 {
    y.exp_m1().ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
    Softplus,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Tensor {
        match self {
            Activation::Identity => x.clone(),
            Activation::Relu => x.relu(),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => x.sigmoid(),
            Activation::Softplus => x.softplus(),
        }
    }
}

/// Registry of named trainable tensors (plain values, never on a tape).
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
    trained: bool,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::DuplicateParameter { name: name.into() });
        }
        self.params.insert(name.into(), value.detach());
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParameter { name: name.into() })
    }

    /// Replace a parameter's value; the shape is part of its identity.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let current = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter { name: name.into() })?;
        if current.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_param",
                lhs: current.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        *current = value.detach();
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Called by the optimizer at the first update; re-initialization is
    /// rejected afterwards.
    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }
}

/// One evaluation's view of a [`ParamStore`]: every parameter either watched
/// on a tape (training) or detached (sampling, diagnostics).
#[derive(Debug, Default)]
pub struct BoundParams {
    bound: IndexMap<String, Tensor>,
}

impl BoundParams {
    pub fn empty() -> BoundParams {
        BoundParams::default()
    }

    pub fn watch(store: &ParamStore, tape: &Tape) -> BoundParams {
        BoundParams {
            bound: store
                .iter()
                .map(|(k, v)| (k.to_string(), tape.watch(v)))
                .collect(),
        }
    }

    pub fn detach(store: &ParamStore) -> BoundParams {
        BoundParams {
            bound: store
                .iter()
                .map(|(k, v)| (k.to_string(), v.detach()))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        self.bound
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnknownParameter { name: name.into() })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.bound.iter().map(|(k, v)| (k.as_str(), v))
    }
}

/// Execution context for a forward pass: bound parameters plus the random
/// stream Bayesian layers draw their weights from.
pub struct Exec<'a> {
    pub params: &'a BoundParams,
    pub rng: Rng,
}

impl<'a> Exec<'a> {
    pub fn new(params: &'a BoundParams, rng: Rng) -> Exec<'a> {
        Exec { params, rng }
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    w_name: String,
    b_name: String,
    in_width: usize,
    out_width: usize,
    activation: Activation,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_width: usize,
        out_width: usize,
        activation: Activation,
    ) -> Result<Dense> {
        let w_name = format!("{prefix}.w");
        let b_name = format!("{prefix}.b");
        store.register(&w_name, Tensor::zeros(&[in_width, out_width]))?;
        store.register(&b_name, Tensor::zeros(&[out_width]))?;
        Ok(Dense {
            w_name,
            b_name,
            in_width,
            out_width,
            activation,
        })
    }

    fn forward(&self, x: &Tensor, exec: &mut Exec) -> Result<Tensor> {
        let w = exec.params.get(&self.w_name)?;
        let b = exec.params.get(&self.b_name)?;
        Ok(self.activation.apply(&x.matmul(&w)?.add(&b)?))
    }

    fn init(&self, store: &mut ParamStore, rng: &Rng) -> Result<()> {
        let std = (2.0 / (self.in_width + self.out_width) as f64).sqrt();
        let w = rng
            .split(&self.w_name)
            .standard_normal_tensor(&[self.in_width, self.out_width])
            .mul_scalar(std);
        store.set(&self.w_name, w)?;
        store.set(&self.b_name, Tensor::zeros(&[self.out_width]))
    }
}

/// Mean-field Gaussian posterior over every weight, N(0,1) prior, fresh
/// reparameterized weight draw per forward pass.
#[derive(Clone, Debug)]
pub struct BayesianDense {
    w_loc: String,
    w_rho: String,
    b_loc: String,
    b_rho: String,
    in_width: usize,
    out_width: usize,
    activation: Activation,
}

impl BayesianDense {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_width: usize,
        out_width: usize,
        activation: Activation,
    ) -> Result<BayesianDense> {
        let layer = BayesianDense {
            w_loc: format!("{prefix}.w_loc"),
            w_rho: format!("{prefix}.w_rho"),
            b_loc: format!("{prefix}.b_loc"),
            b_rho: format!("{prefix}.b_rho"),
            in_width,
            out_width,
            activation,
        };
        store.register(&layer.w_loc, Tensor::zeros(&[in_width, out_width]))?;
        store.register(&layer.w_rho, Tensor::full(&[in_width, out_width], softplus_inv(0.01)))?;
        store.register(&layer.b_loc, Tensor::zeros(&[out_width]))?;
        store.register(&layer.b_rho, Tensor::full(&[out_width], softplus_inv(0.01)))?;
        Ok(layer)
    }

    /// w = loc + softplus(ρ)·ε, the reparameterized draw.
    fn draw(&self, loc_name: &str, rho_name: &str, shape: &[usize], exec: &mut Exec) -> Result<Tensor> {
        let loc = exec.params.get(loc_name)?;
        let scale = exec.params.get(rho_name)?.softplus();
        let eps = exec.rng.standard_normal_tensor(shape);
        loc.add(&scale.mul(&eps)?)
    }

    fn forward(&self, x: &Tensor, exec: &mut Exec) -> Result<Tensor> {
        let w = self.draw(&self.w_loc, &self.w_rho, &[self.in_width, self.out_width], exec)?;
        let b = self.draw(&self.b_loc, &self.b_rho, &[self.out_width], exec)?;
        Ok(self.activation.apply(&x.matmul(&w)?.add(&b)?))
    }

    fn kl(&self, params: &BoundParams) -> Result<Tensor> {
        let mut total = Tensor::scalar(0.0);
        for (loc_name, rho_name) in [(&self.w_loc, &self.w_rho), (&self.b_loc, &self.b_rho)] {
            let loc = params.get(loc_name)?;
            let scale = params.get(rho_name)?.softplus();
            let shape = loc.shape().to_vec();
            let q = NormalDiag::new(loc, scale)?;
            let p = NormalDiag::standard(&shape);
            total = total.add(&kl_normal_normal(&q, &p)?.sum())?;
        }
        Ok(total)
    }

    fn init(&self, store: &mut ParamStore, rng: &Rng) -> Result<()> {
        let std = (2.0 / (self.in_width + self.out_width) as f64).sqrt();
        let loc = rng
            .split(&self.w_loc)
            .standard_normal_tensor(&[self.in_width, self.out_width])
            .mul_scalar(std);
        store.set(&self.w_loc, loc)?;
        store.set(&self.w_rho, Tensor::full(&[self.in_width, self.out_width], softplus_inv(0.01)))?;
        store.set(&self.b_loc, Tensor::zeros(&[self.out_width]))?;
        store.set(&self.b_rho, Tensor::full(&[self.out_width], softplus_inv(0.01)))
    }
}

#[derive(Clone, Debug)]
pub enum Layer {
    Dense(Dense),
    Bayesian(BayesianDense),
}

impl Layer {
    pub fn dense(
        store: &mut ParamStore,
        prefix: &str,
        in_width: usize,
        out_width: usize,
        activation: Activation,
    ) -> Result<Layer> {
        Ok(Layer::Dense(Dense::new(store, prefix, in_width, out_width, activation)?))
    }

    pub fn bayesian(
        store: &mut ParamStore,
        prefix: &str,
        in_width: usize,
        out_width: usize,
        activation: Activation,
    ) -> Result<Layer> {
        Ok(Layer::Bayesian(BayesianDense::new(
            store, prefix, in_width, out_width, activation,
        )?))
    }

    pub fn in_width(&self) -> usize {
        match self {
            Layer::Dense(l) => l.in_width,
            Layer::Bayesian(l) => l.in_width,
        }
    }

    pub fn out_width(&self) -> usize {
        match self {
            Layer::Dense(l) => l.out_width,
            Layer::Bayesian(l) => l.out_width,
        }
    }

    fn forward(&self, x: &Tensor, exec: &mut Exec) -> Result<Tensor> {
        match self {
            Layer::Dense(l) => l.forward(x, exec),
            Layer::Bayesian(l) => l.forward(x, exec),
        }
    }

    fn parameter_names(&self) -> Vec<&str> {
        match self {
            Layer::Dense(l) => vec![&l.w_name, &l.b_name],
            Layer::Bayesian(l) => vec![&l.w_loc, &l.w_rho, &l.b_loc, &l.b_rho],
        }
    }
}

/// Ordered composition of layers.
#[derive(Clone, Debug)]
pub struct Sequential {
    layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Sequential {
        Sequential { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Compose the layers over `x` of shape [batch, in]. Bayesian layers
    /// consume `exec.rng`; deterministic layers ignore it.
    pub fn forward(&self, x: &Tensor, exec: &mut Exec) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            if h.rank() != 2 || h.shape()[1] != layer.in_width() {
                return Err(Error::LayerWidth {
                    layer: i,
                    expected: layer.in_width(),
                    got: h.shape().to_vec(),
                });
            }
            h = layer.forward(&h, exec)?;
        }
        Ok(h)
    }

    /// Σ KL(N(loc, softplus(ρ)) ‖ N(0,1)) over all Bayesian-layer weights;
    /// zero for purely deterministic networks. Independent of any input.
    pub fn kl_penalty(&self, params: &BoundParams) -> Result<Tensor> {
        let mut total = Tensor::scalar(0.0);
        for layer in &self.layers {
            if let Layer::Bayesian(l) = layer {
                total = total.add(&l.kl(params)?)?;
            }
        }
        Ok(total)
    }

    /// Glorot-style init: W (and W_loc) ~ N(0, 2/(in+out)), biases zero,
    /// Bayesian ρ set so the initial posterior σ is 0.01. Each tensor draws
    /// from its own name-keyed stream, so layer order does not matter.
    pub fn init_parameters(&self, store: &mut ParamStore, rng: &Rng) -> Result<()> {
        if store.is_trained() {
            return Err(Error::InitAfterTraining);
        }
        for layer in &self.layers {
            match layer {
                Layer::Dense(l) => l.init(store, rng)?,
                Layer::Bayesian(l) => l.init(store, rng)?,
            }
        }
        Ok(())
    }

    pub fn parameter_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .flat_map(|l| l.parameter_names().into_iter().map(str::to_string))
            .collect()
    }

    pub fn has_bayesian(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Layer::Bayesian(_)))
    }
}
