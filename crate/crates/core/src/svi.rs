//! Stochastic variational inference: Monte Carlo ELBO with minibatch
//! scaling, Adam ascent over the p- and q-model parameter stores, and
//! posterior / posterior-predictive sampling from the fitted pair.
//!
//! The ELBO estimated on a batch B of a size-N dataset is
//!   E_q[ (log p - log q)_global + (N/|B|) (log p - log q)_plate ]
//! minus the analytic weight-KL of any Bayesian layers. Because in-plate
//! noise is keyed by global row id, averaging batch estimates over a
//! partition of the rows reproduces the full-data estimate exactly.
//!
//! Randomness derivation contract (everything hangs off the fit seed):
//!   shuffle for epoch e (0-based):   root.split("shuffle").split_index(e)
//!   step noise, epoch e step s:      root.split("step").split_index(e).split_index(s)
//!   per-epoch eval, epoch k (1-based): root.split("full-eval").split_index(k)
//! Inside one ELBO evaluation, MC draw k uses rng.split_index(k), with "q"
//! and "p" sub-streams for the two traces. Checkpoint replay relies on
//! these derivations staying fixed.

use std::time::Instant;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::model::{match_q_to_p, ModelDefinition, ModelTrace, TraceSpec};
use crate::nn::BoundParams;
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

/// Optimizer and schedule settings for [`fit`].
#[derive(Clone, Debug)]
pub struct SviConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub mc_samples: usize,
    pub seed: u64,
    /// Print `epoch=<k> elbo=<float> wall_ms=<int>` per epoch.
    pub verbose: bool,
}

impl Default for SviConfig {
    fn default() -> Self {
        SviConfig {
            epochs: 100,
            batch_size: 32,
            lr: 0.001,
            mc_samples: 1,
            seed: 0,
            verbose: false,
        }
    }
}

/// Adam in ascent form over raw parameter vectors: values move along
/// +lr * mhat / (sqrt(vhat) + eps) because the objective is the ELBO.
struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    slots: IndexMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    fn new(lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            slots: IndexMap::new(),
        }
    }

    fn begin_step(&mut self) {
        self.t += 1;
    }

    fn update(&mut self, key: &str, value: &[f64], grad: &[f64]) -> Vec<f64> {
        let (m, v) = self
            .slots
            .entry(key.to_string())
            .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut out = Vec::with_capacity(value.len());
        for i in 0..value.len() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            out.push(value[i] + self.lr * mhat / (vhat.sqrt() + self.eps));
        }
        out
    }
}

fn probe_trace(model: &ModelDefinition) -> Result<ModelTrace> {
    model.trace_with(TraceSpec::new(1, Rng::from_seed(0)))
}

fn plate_size_or_one(p: &ModelDefinition, observations: &IndexMap<String, Tensor>) -> Result<usize> {
    match p.detect_plate_size(observations) {
        Ok(n) => Ok(n),
        Err(Error::PlateUndetermined) => Ok(1),
        Err(e) => Err(e),
    }
}

/// Restrict per-row entries of `map` to the given dataset rows. An entry is
/// per-row when the p-model declares it in-plate, or (for pure covariates
/// the model never declares) when its leading axis matches the dataset.
fn gather_rows_of(
    map: &IndexMap<String, Tensor>,
    probe: &ModelTrace,
    rows: &[u64],
    full_n: usize,
) -> Result<IndexMap<String, Tensor>> {
    let identity = rows.len() == full_n && rows.iter().enumerate().all(|(i, &r)| r as usize == i);
    let idx: Vec<usize> = rows.iter().map(|&r| r as usize).collect();
    let mut out = IndexMap::new();
    for (name, t) in map {
        let per_row = match probe.get(name) {
            Some(var) => var.in_plate(),
            None => full_n > 1 && t.rank() >= 1 && t.shape()[0] == full_n,
        };
        let value = if per_row && !identity {
            t.gather_rows(&idx)?
        } else {
            t.clone()
        };
        out.insert(name.clone(), value);
    }
    Ok(out)
}

/// One differentiable ELBO estimate on a batch. `batch_obs` must already be
/// restricted to `rows`; parameters come pre-bound so the caller controls
/// whether the estimate is tracked.
fn elbo_core(
    p: &ModelDefinition,
    q: &ModelDefinition,
    batch_obs: &IndexMap<String, Tensor>,
    rows: &[u64],
    full_n: usize,
    p_params: &BoundParams,
    q_params: &BoundParams,
    mc_samples: usize,
    rng: &Rng,
) -> Result<Tensor> {
    let m = rows.len();
    let mc = mc_samples.max(1);
    let scale = full_n as f64 / m as f64;
    let mut acc = Tensor::scalar(0.0);
    for k in 0..mc {
        let draw = rng.split_index(k as u64);
        let q_trace = q.trace_with(TraceSpec {
            row_ids: Some(rows),
            data: Some(batch_obs),
            params: Some(q_params),
            ..TraceSpec::new(m, draw.split("q"))
        })?;
        let injected: IndexMap<String, Tensor> = q_trace
            .variables()
            .iter()
            .map(|v| (v.name().to_string(), v.value().clone()))
            .collect();
        let p_trace = p.trace_with(TraceSpec {
            row_ids: Some(rows),
            observations: Some(batch_obs),
            injected: Some(&injected),
            params: Some(p_params),
            ..TraceSpec::new(m, draw.split("p"))
        })?;
        match_q_to_p(&p_trace, &q_trace)?;
        let (pg, pp) = p_trace.log_joint_split()?;
        let (qg, qp) = q_trace.log_joint_split()?;
        let plate_term = pp.sub(&qp)?.mul_scalar(scale);
        acc = acc.add(&pg.sub(&qg)?.add(&plate_term)?)?;
    }
    let mut elbo = acc.mul_scalar(1.0 / mc as f64);
    for net in p.networks() {
        elbo = elbo.sub(&net.kl_penalty(p_params)?)?;
    }
    for net in q.networks() {
        elbo = elbo.sub(&net.kl_penalty(q_params)?)?;
    }
    Ok(elbo)
}

fn elbo_rows_impl(
    p: &ModelDefinition,
    q: &ModelDefinition,
    observations: &IndexMap<String, Tensor>,
    rows: &[u64],
    full_n: usize,
    mc_samples: usize,
    rng: &Rng,
) -> Result<f64> {
    let probe = probe_trace(p)?;
    let batch_obs = gather_rows_of(observations, &probe, rows, full_n)?;
    let p_params = BoundParams::detach(&p.store().lock().unwrap());
    let q_params = BoundParams::detach(&q.store().lock().unwrap());
    Ok(elbo_core(
        p, q, &batch_obs, rows, full_n, &p_params, &q_params, mc_samples, rng,
    )?
    .item())
}

/// Detached full-data ELBO estimate (no gradients recorded).
pub fn elbo_estimate(
    p: &ModelDefinition,
    q: &ModelDefinition,
    observations: &IndexMap<String, Tensor>,
    mc_samples: usize,
    rng: &Rng,
) -> Result<f64> {
    let full_n = plate_size_or_one(p, observations)?;
    let rows: Vec<u64> = (0..full_n as u64).collect();
    elbo_rows_impl(p, q, observations, &rows, full_n, mc_samples, rng)
}

/// A full-data ELBO estimate together with its gradients with respect to
/// every p- and q-store parameter, keyed by parameter name.
#[derive(Debug)]
pub struct ElboGrad {
    pub value: f64,
    pub p_grads: IndexMap<String, Tensor>,
    pub q_grads: IndexMap<String, Tensor>,
}

/// Differentiate one full-data ELBO estimate. The estimator and randomness
/// derivation are identical to [`elbo_estimate`], so with the same `rng`
/// the returned value matches it exactly and the gradients are the exact
/// derivatives of that mapping from parameter values to estimate.
pub fn elbo_gradients(
    p: &ModelDefinition,
    q: &ModelDefinition,
    observations: &IndexMap<String, Tensor>,
    mc_samples: usize,
    rng: &Rng,
) -> Result<ElboGrad> {
    let full_n = plate_size_or_one(p, observations)?;
    let rows: Vec<u64> = (0..full_n as u64).collect();
    let probe = probe_trace(p)?;
    let batch_obs = gather_rows_of(observations, &probe, &rows, full_n)?;
    let tape = Tape::new();
    let p_params = BoundParams::watch(&p.store().lock().unwrap(), &tape);
    let q_params = BoundParams::watch(&q.store().lock().unwrap(), &tape);
    let elbo = elbo_core(
        p, q, &batch_obs, &rows, full_n, &p_params, &q_params, mc_samples, rng,
    )?;
    let value = elbo.item();
    let grads = tape.backward(&elbo)?;
    let collect = |bound: &BoundParams| {
        bound
            .iter()
            .map(|(name, leaf)| {
                let g = grads.wrt(leaf).expect("watched leaf has a gradient");
                (name.to_string(), g.clone())
            })
            .collect::<IndexMap<String, Tensor>>()
    };
    Ok(ElboGrad {
        value,
        p_grads: collect(&p_params),
        q_grads: collect(&q_params),
    })
}

/// Detached ELBO estimate over a row subset of the full dataset, scaled by
/// N/|rows|. `observations` stays the full-data map; rows index into it.
pub fn elbo_estimate_rows(
    p: &ModelDefinition,
    q: &ModelDefinition,
    observations: &IndexMap<String, Tensor>,
    rows: &[u64],
    full_n: usize,
    mc_samples: usize,
    rng: &Rng,
) -> Result<f64> {
    elbo_rows_impl(p, q, observations, rows, full_n, mc_samples, rng)
}

/// A fitted p/q pair: the models (whose stores now hold trained values),
/// the data they were fitted on, and the per-epoch ELBO trajectory.
#[derive(Clone, Debug)]
pub struct VariationalState {
    p: ModelDefinition,
    q: ModelDefinition,
    observations: IndexMap<String, Tensor>,
    full_n: usize,
    seed: u64,
    epochs_run: usize,
    elbo_history: Vec<f64>,
}

impl VariationalState {
    pub fn p(&self) -> &ModelDefinition {
        &self.p
    }

    pub fn q(&self) -> &ModelDefinition {
        &self.q
    }

    pub fn observations(&self) -> &IndexMap<String, Tensor> {
        &self.observations
    }

    pub fn plate_size(&self) -> usize {
        self.full_n
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn epochs_run(&self) -> usize {
        self.epochs_run
    }

    /// Full-data ELBO estimate recorded at the end of each epoch.
    pub fn elbo_history(&self) -> &[f64] {
        &self.elbo_history
    }

    pub fn posterior(&self, name: &str, n: usize, rng: &Rng) -> Result<Tensor> {
        posterior_sample(&self.q, &self.observations, self.full_n, name, n, rng)
    }

    pub fn posterior_predictive(&self, name: &str, n: usize, rng: &Rng) -> Result<Tensor> {
        self.posterior_predictive_with(name, n, &PredictiveOpts::default(), rng)
    }

    pub fn posterior_predictive_with(
        &self,
        name: &str,
        n: usize,
        opts: &PredictiveOpts<'_>,
        rng: &Rng,
    ) -> Result<Tensor> {
        posterior_predictive_sample(
            &self.p,
            &self.q,
            &self.observations,
            self.full_n,
            name,
            n,
            opts,
            rng,
        )
    }
}

/// Run SVI: per epoch, shuffle the rows, take ceil(N/M) Adam steps on
/// minibatch ELBO gradients, then record a full-data ELBO estimate.
pub fn fit(
    p: &ModelDefinition,
    q: &ModelDefinition,
    observations: &IndexMap<String, Tensor>,
    config: &SviConfig,
) -> Result<VariationalState> {
    let full_n = plate_size_or_one(p, observations)?;
    let m = config.batch_size.clamp(1, full_n);
    let probe = probe_trace(p)?;
    let root = Rng::from_seed(config.seed);
    let mut adam = Adam::new(config.lr);
    let mut elbo_history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut perm: Vec<u64> = (0..full_n as u64).collect();
        root.split("shuffle").split_index(epoch as u64).shuffle(&mut perm);

        let steps = full_n.div_ceil(m);
        for step in 0..steps {
            let rows = &perm[step * m..((step + 1) * m).min(full_n)];
            let batch_obs = gather_rows_of(observations, &probe, rows, full_n)?;
            let tape = Tape::new();
            let p_params = BoundParams::watch(&p.store().lock().unwrap(), &tape);
            let q_params = BoundParams::watch(&q.store().lock().unwrap(), &tape);
            let step_rng = root
                .split("step")
                .split_index(epoch as u64)
                .split_index(step as u64);
            let elbo = elbo_core(
                p,
                q,
                &batch_obs,
                rows,
                full_n,
                &p_params,
                &q_params,
                config.mc_samples,
                &step_rng,
            )?;
            if elbo.item().is_nan() {
                return Err(Error::NumericFault {
                    context: format!("elbo is NaN at epoch {} step {step}", epoch + 1),
                });
            }
            let grads = tape.backward(&elbo).map_err(|e| match e {
                Error::NumericFault { context } => Error::NumericFault {
                    context: format!("epoch {} step {step}: {context}", epoch + 1),
                },
                other => other,
            })?;
            adam.begin_step();
            for (prefix, model, bound) in [("p", p, &p_params), ("q", q, &q_params)] {
                let mut store = model.store().lock().unwrap();
                for (name, leaf) in bound.iter() {
                    let grad = grads.wrt(leaf).expect("watched leaf has a gradient");
                    let next =
                        adam.update(&format!("{prefix}:{name}"), leaf.data(), grad.data());
                    store.set(name, Tensor::from_vec(leaf.shape().to_vec(), next)?)?;
                }
            }
        }

        let eval_rng = root.split("full-eval").split_index(epoch as u64 + 1);
        let value = elbo_estimate(p, q, observations, config.mc_samples, &eval_rng)?;
        elbo_history.push(value);
        if config.verbose {
            // A hung-up log consumer must not abort a training run, so
            // write errors (EPIPE from `... | head`) are swallowed here.
            use std::io::Write;
            let _ = writeln!(
                std::io::stdout(),
                "epoch={} elbo={} wall_ms={}",
                epoch + 1,
                value,
                started.elapsed().as_millis()
            );
        }
    }

    if config.epochs > 0 {
        p.store().lock().unwrap().mark_trained();
        q.store().lock().unwrap().mark_trained();
    }
    Ok(VariationalState {
        p: p.clone(),
        q: q.clone(),
        observations: observations.clone(),
        full_n,
        seed: config.seed,
        epochs_run: config.epochs,
        elbo_history,
    })
}

fn stack_draws(draws: Vec<Tensor>, trailing: &[usize]) -> Tensor {
    let mut shape = vec![draws.len()];
    shape.extend_from_slice(trailing);
    let mut data = Vec::with_capacity(draws.len() * trailing.iter().product::<usize>());
    for d in draws {
        data.extend_from_slice(d.data());
    }
    Tensor::from_vec(shape, data).expect("stacked draw sizes agree")
}

/// Draw `n` posterior samples of a q variable. Each draw executes the
/// q-model once over the full dataset rows, so an amortized (in-plate)
/// variable yields shape [n, N, ...] and a global one [n, ...].
pub fn posterior_sample(
    q: &ModelDefinition,
    data: &IndexMap<String, Tensor>,
    plate_size: usize,
    name: &str,
    n: usize,
    rng: &Rng,
) -> Result<Tensor> {
    let trace_once = |r: Rng| {
        q.trace_with(TraceSpec {
            data: Some(data),
            ..TraceSpec::new(plate_size, r)
        })
    };
    let probe = trace_once(Rng::from_seed(0))?;
    let var = probe.get(name).ok_or_else(|| Error::UnknownVariable {
        name: name.into(),
    })?;
    let trailing = var.value().shape().to_vec();
    let mut draws = Vec::with_capacity(n);
    for j in 0..n {
        let trace = trace_once(rng.split_index(j as u64))?;
        draws.push(trace.get(name).expect("probe verified the name").value().detach());
    }
    Ok(stack_draws(draws, &trailing))
}

/// Options for [`posterior_predictive_sample`].
pub struct PredictiveOpts<'a> {
    /// Skip the q-model: every latent is drawn from its prior.
    pub from_prior: bool,
    /// Conditioning data override; defaults to the fitted observations.
    pub data: Option<&'a IndexMap<String, Tensor>>,
}

impl Default for PredictiveOpts<'_> {
    fn default() -> Self {
        PredictiveOpts {
            from_prior: false,
            data: None,
        }
    }
}

/// Draw `n` independent predictive samples of a p variable: per draw, the
/// latents come from q (conditioned on dataset row j mod N when amortized)
/// or from the prior, and the target is drawn from the p-model given them.
/// An in-plate target yields [n, ...per-replica], a global one [n, ...].
pub fn posterior_predictive_sample(
    p: &ModelDefinition,
    q: &ModelDefinition,
    observations: &IndexMap<String, Tensor>,
    full_n: usize,
    name: &str,
    n: usize,
    opts: &PredictiveOpts<'_>,
    rng: &Rng,
) -> Result<Tensor> {
    let probe = probe_trace(p)?;
    let var = probe.get(name).ok_or_else(|| Error::UnknownVariable {
        name: name.into(),
    })?;
    let in_plate = var.in_plate();
    let trailing: Vec<usize> = if in_plate {
        var.value().shape()[1..].to_vec()
    } else {
        var.value().shape().to_vec()
    };
    let data = opts.data.unwrap_or(observations);

    let mut draws = Vec::with_capacity(n);
    for j in 0..n {
        let draw = rng.split_index(j as u64);
        let noise_rows = [j as u64];
        let injected: IndexMap<String, Tensor> = if opts.from_prior {
            IndexMap::new()
        } else {
            let data_row = [(j % full_n.max(1)) as u64];
            let row_data = gather_rows_of(data, &probe, &data_row, full_n)?;
            let q_trace = q.trace_with(TraceSpec {
                row_ids: Some(&noise_rows),
                data: Some(&row_data),
                ..TraceSpec::new(1, draw.split("q"))
            })?;
            q_trace
                .variables()
                .iter()
                .map(|v| (v.name().to_string(), v.value().detach()))
                .collect()
        };
        let p_trace = p.trace_with(TraceSpec {
            row_ids: Some(&noise_rows),
            injected: Some(&injected),
            ..TraceSpec::new(1, draw.split("p"))
        })?;
        draws.push(p_trace.get(name).expect("probe verified the name").value().detach());
    }
    Ok(stack_draws(draws, &trailing))
}
