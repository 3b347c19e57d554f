//! The two built-in example models.
//!
//! gaussian_mean: z ~ N(0,1); per row x | z ~ N(z, 1) with D = 1; free
//! mean-field q(z) = N(loc, softplus(rho)).
//!
//! vae: per row z ~ N(0, I_L) and x | z from a decoder network; amortized
//! q(z | x) from an encoder. Encoder: Dense(D->hidden, relu) then two
//! Dense(hidden->L) heads for loc and rho with sigma = softplus(rho).
//! Decoder mirrors it: Dense(L->hidden, relu) then likelihood heads, either
//! two Normal heads (loc, rho) or one Bernoulli logits head. The
//! bayesian_decoder flag swaps every decoder layer for BayesianDense.

use platedvi::dist::{Bernoulli, Dist, NormalDiag};
use platedvi::model::ModelDefinition;
use platedvi::nn::{softplus_inv, Activation, Exec, Layer, ParamStore, Sequential};
use platedvi::{Error, Result, Rng, Tensor};

pub const GAUSSIAN_MEAN: &str = "gaussian_mean";
pub const VAE: &str = "vae";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelId {
    GaussianMean,
    Vae,
}

impl ModelId {
    pub fn parse(s: &str) -> Option<ModelId> {
        match s {
            GAUSSIAN_MEAN => Some(ModelId::GaussianMean),
            VAE => Some(ModelId::Vae),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelId::GaussianMean => GAUSSIAN_MEAN,
            ModelId::Vae => VAE,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Likelihood {
    Normal,
    Bernoulli,
}

impl Likelihood {
    pub fn parse(s: &str) -> Option<Likelihood> {
        match s {
            "normal" => Some(Likelihood::Normal),
            "bernoulli" => Some(Likelihood::Bernoulli),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Likelihood::Normal => "normal",
            Likelihood::Bernoulli => "bernoulli",
        }
    }
}

/// Everything needed to rebuild a model pair identically, as persisted in
/// a checkpoint. gaussian_mean ignores the network hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub model: ModelId,
    pub data_dim: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub likelihood: Likelihood,
    pub bayesian_decoder: bool,
}

impl ModelSpec {
    pub fn gaussian_mean() -> ModelSpec {
        ModelSpec {
            model: ModelId::GaussianMean,
            data_dim: 1,
            latent_dim: 0,
            hidden_dim: 0,
            likelihood: Likelihood::Normal,
            bayesian_decoder: false,
        }
    }
}

pub struct ModelPair {
    pub p: ModelDefinition,
    pub q: ModelDefinition,
}

/// Softplus with a small floor, used for network-predicted scales so a
/// confident head cannot drive a likelihood scale to zero.
fn floored_scale(raw: &Tensor) -> Tensor {
    raw.softplus().add_scalar(1e-6)
}

fn gaussian_mean_pair() -> ModelPair {
    let p = ModelDefinition::new(|ctx| {
        let z = ctx.rv(
            "z",
            Dist::Normal(NormalDiag::new(Tensor::scalar(0.0), Tensor::scalar(1.0))?),
        )?;
        ctx.plate(|pl| {
            // Per-replica shape [1]: rows arrive as single-column vectors.
            let loc = Tensor::ones(&[1]).mul(&z)?;
            pl.rv("x", Dist::Normal(NormalDiag::new(loc, Tensor::ones(&[1]))?))?;
            Ok(())
        })
    });

    let mut store = ParamStore::new();
    store.register("z.loc", Tensor::scalar(0.0)).expect("fresh store");
    store
        .register("z.rho", Tensor::scalar(softplus_inv(1.0)))
        .expect("fresh store");
    let q = ModelDefinition::with_params(
        |ctx| {
            let loc = ctx.param("z.loc")?;
            let scale = ctx.param("z.rho")?.softplus();
            ctx.rv("z", Dist::Normal(NormalDiag::new(loc, scale)?))?;
            Ok(())
        },
        store,
    );
    ModelPair { p, q }
}

fn decoder_layer(
    store: &mut ParamStore,
    bayesian: bool,
    prefix: &str,
    in_width: usize,
    out_width: usize,
    activation: Activation,
) -> Result<Layer> {
    if bayesian {
        Layer::bayesian(store, prefix, in_width, out_width, activation)
    } else {
        Layer::dense(store, prefix, in_width, out_width, activation)
    }
}

fn vae_pair(spec: &ModelSpec) -> Result<ModelPair> {
    let (d, l, h) = (spec.data_dim, spec.latent_dim, spec.hidden_dim);
    if d == 0 || l == 0 || h == 0 {
        return Err(Error::InvalidParameter {
            what: format!("vae dimensions must be positive, got D={d} latent={l} hidden={h}"),
        });
    }

    // Decoder (p side).
    let mut p_store = ParamStore::new();
    let bay = spec.bayesian_decoder;
    let trunk = Sequential::new(vec![decoder_layer(
        &mut p_store,
        bay,
        "dec.trunk",
        l,
        h,
        Activation::Relu,
    )?]);
    let head_loc = Sequential::new(vec![decoder_layer(
        &mut p_store,
        bay,
        "dec.loc",
        h,
        d,
        Activation::Identity,
    )?]);
    let likelihood = spec.likelihood;
    let (head_extra, mut networks) = match likelihood {
        Likelihood::Normal => {
            let head_rho = Sequential::new(vec![decoder_layer(
                &mut p_store,
                bay,
                "dec.rho",
                h,
                d,
                Activation::Identity,
            )?]);
            (Some(head_rho.clone()), vec![trunk.clone(), head_loc.clone(), head_rho])
        }
        Likelihood::Bernoulli => (None, vec![trunk.clone(), head_loc.clone()]),
    };
    let networks_p = std::mem::take(&mut networks);
    let (latent, t, hl, he) = (l, trunk, head_loc, head_extra);
    let p = ModelDefinition::with_networks(
        move |ctx| {
            ctx.plate(|pl| {
                let z = pl.rv(
                    "z",
                    Dist::Normal(NormalDiag::new(Tensor::zeros(&[latent]), Tensor::ones(&[latent]))?),
                )?;
                let mut exec = Exec::new(pl.params(), pl.nn_rng("decoder"));
                let hidden = t.forward(&z, &mut exec)?;
                let loc = hl.forward(&hidden, &mut exec)?;
                match likelihood {
                    Likelihood::Normal => {
                        let raw = he
                            .as_ref()
                            .expect("normal likelihood has a scale head")
                            .forward(&hidden, &mut exec)?;
                        pl.rv_batched("x", Dist::Normal(NormalDiag::new(loc, floored_scale(&raw))?))?;
                    }
                    Likelihood::Bernoulli => {
                        pl.rv_batched("x", Dist::Bernoulli(Bernoulli::from_logits(loc)))?;
                    }
                }
                Ok(())
            })
        },
        p_store,
        networks_p,
    );

    // Encoder (q side), always deterministic.
    let mut q_store = ParamStore::new();
    let enc_trunk = Sequential::new(vec![Layer::dense(
        &mut q_store,
        "enc.trunk",
        d,
        h,
        Activation::Relu,
    )?]);
    let enc_loc = Sequential::new(vec![Layer::dense(
        &mut q_store,
        "enc.loc",
        h,
        l,
        Activation::Identity,
    )?]);
    let enc_rho = Sequential::new(vec![Layer::dense(
        &mut q_store,
        "enc.rho",
        h,
        l,
        Activation::Identity,
    )?]);
    let networks_q = vec![enc_trunk.clone(), enc_loc.clone(), enc_rho.clone()];
    let q = ModelDefinition::with_networks(
        move |ctx| {
            ctx.plate(|pl| {
                let x = pl.data("x")?;
                let mut exec = Exec::new(pl.params(), pl.nn_rng("encoder"));
                let hidden = enc_trunk.forward(&x, &mut exec)?;
                let loc = enc_loc.forward(&hidden, &mut exec)?;
                let raw = enc_rho.forward(&hidden, &mut exec)?;
                pl.rv_batched("z", Dist::Normal(NormalDiag::new(loc, floored_scale(&raw))?))?;
                Ok(())
            })
        },
        q_store,
        networks_q,
    );

    Ok(ModelPair { p, q })
}

/// Build the p/q pair for a model spec, parameters at registration values.
pub fn build(spec: &ModelSpec) -> Result<ModelPair> {
    match spec.model {
        ModelId::GaussianMean => {
            if spec.data_dim != 1 {
                return Err(Error::InvalidParameter {
                    what: format!("gaussian_mean expects 1-column data, got {}", spec.data_dim),
                });
            }
            Ok(gaussian_mean_pair())
        }
        ModelId::Vae => vae_pair(spec),
    }
}

/// Randomize network parameters. Initialization is keyed by parameter name
/// under the given seed, so it is independent of layer registration order.
pub fn init_parameters(pair: &ModelPair, seed: u64) -> Result<()> {
    let root = Rng::from_seed(seed).split("init");
    for (label, model) in [("p", &pair.p), ("q", &pair.q)] {
        let rng = root.split(label);
        let mut store = model.store().lock().unwrap();
        for net in model.networks() {
            net.init_parameters(&mut store, &rng)?;
        }
    }
    Ok(())
}
