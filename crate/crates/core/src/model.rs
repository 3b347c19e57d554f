//! Trace-based model definition: executing a model function records named
//! random variables and plate structure, supporting observation binding,
//! value injection, and log-joint evaluation.
//!
//! A model is an ordinary closure over a [`ModelCtx`]. Variables declared
//! directly on the context are global; variables declared inside the single
//! `plate` block are replicated per data row. In-plate noise is keyed by the
//! global row id, not the position within the batch, so a minibatch trace
//! draws exactly the noise the full-data trace would for those rows.

use std::sync::{Arc, Mutex, OnceLock};

use indexmap::IndexMap;

use crate::dist::Dist;
use crate::error::{Error, Result};
use crate::nn::{BoundParams, ParamStore, Sequential};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One recorded random variable of a trace.
#[derive(Clone, Debug)]
pub struct RandomVariable {
    name: String,
    dist: Dist,
    in_plate: bool,
    observed: bool,
    value: Tensor,
}

impl RandomVariable {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dist(&self) -> &Dist {
        &self.dist
    }

    pub fn in_plate(&self) -> bool {
        self.in_plate
    }

    pub fn is_observed(&self) -> bool {
        self.observed
    }

    /// The value the trace proceeded with: the observation when observed,
    /// the injected value when injected, otherwise a draw.
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn observed_value(&self) -> Option<&Tensor> {
        self.observed.then_some(&self.value)
    }
}

/// The ordered record of one model execution.
#[derive(Clone, Debug)]
pub struct ModelTrace {
    variables: Vec<RandomVariable>,
    plate_size: usize,
}

impl ModelTrace {
    pub fn variables(&self) -> &[RandomVariable] {
        &self.variables
    }

    pub fn get(&self, name: &str) -> Option<&RandomVariable> {
        self.variables.iter().find(|v| v.name == name)
    }

    pub fn plate_size(&self) -> usize {
        self.plate_size
    }

    /// Σ over variables of the fully-summed log-density at the trace value.
    /// The result is on the active tape when parameters or latents are.
    pub fn log_joint(&self) -> Result<Tensor> {
        let (global, plate) = self.log_joint_split()?;
        global.add(&plate)
    }

    /// Log-joint separated into (global terms, in-plate terms); the split
    /// lets inference scale the plate part by N/M under minibatching.
    pub fn log_joint_split(&self) -> Result<(Tensor, Tensor)> {
        let mut global = Tensor::scalar(0.0);
        let mut plate = Tensor::scalar(0.0);
        for v in &self.variables {
            let term = v.dist.log_prob(&v.value)?.sum();
            if v.in_plate {
                plate = plate.add(&term)?;
            } else {
                global = global.add(&term)?;
            }
        }
        Ok((global, plate))
    }
}

fn empty_map() -> &'static IndexMap<String, Tensor> {
    static EMPTY: OnceLock<IndexMap<String, Tensor>> = OnceLock::new();
    EMPTY.get_or_init(IndexMap::new)
}

/// Everything one trace execution may consume.
///
/// `injected` forces latent values (typically q draws, tape links intact)
/// into the matching p variables; names absent from the model are ignored
/// here because [`match_q_to_p`] reports them with the proper error.
pub struct TraceSpec<'a> {
    pub plate_size: usize,
    /// Global dataset row ids backing the plate rows; defaults to 0..plate_size.
    pub row_ids: Option<&'a [u64]>,
    pub observations: Option<&'a IndexMap<String, Tensor>>,
    /// Amortization inputs read via `ctx.data(name)`; not random variables.
    pub data: Option<&'a IndexMap<String, Tensor>>,
    pub injected: Option<&'a IndexMap<String, Tensor>>,
    /// Pre-bound parameters; `None` binds the model's store detached.
    pub params: Option<&'a BoundParams>,
    pub rng: Rng,
}

impl<'a> TraceSpec<'a> {
    pub fn new(plate_size: usize, rng: Rng) -> TraceSpec<'a> {
        TraceSpec {
            plate_size,
            row_ids: None,
            observations: None,
            data: None,
            injected: None,
            params: None,
            rng,
        }
    }
}

/// A probabilistic model: a builder closure plus the registry of trainable
/// tensors it reads and the networks contributing weight-KL penalties.
#[derive(Clone)]
pub struct ModelDefinition {
    builder: Arc<dyn Fn(&mut ModelCtx<'_>) -> Result<()> + Send + Sync>,
    store: Arc<Mutex<ParamStore>>,
    networks: Vec<Sequential>,
}

impl std::fmt::Debug for ModelDefinition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "ModelDefinition{{params: {}, networks: {}}}",
            self.store.lock().unwrap().len(),
            self.networks.len()
        )
    }
}

impl ModelDefinition {
    pub fn new(
        builder: impl Fn(&mut ModelCtx<'_>) -> Result<()> + Send + Sync + 'static,
    ) -> ModelDefinition {
        ModelDefinition::with_params(builder, ParamStore::new())
    }

    pub fn with_params(
        builder: impl Fn(&mut ModelCtx<'_>) -> Result<()> + Send + Sync + 'static,
        store: ParamStore,
    ) -> ModelDefinition {
        ModelDefinition::with_networks(builder, store, Vec::new())
    }

    /// `networks` are the Sequentials whose Bayesian layers add analytic KL
    /// penalties to the ELBO; deterministic networks are harmless to list.
    pub fn with_networks(
        builder: impl Fn(&mut ModelCtx<'_>) -> Result<()> + Send + Sync + 'static,
        store: ParamStore,
        networks: Vec<Sequential>,
    ) -> ModelDefinition {
        ModelDefinition {
            builder: Arc::new(builder),
            store: Arc::new(Mutex::new(store)),
            networks,
        }
    }

    pub fn store(&self) -> &Arc<Mutex<ParamStore>> {
        &self.store
    }

    pub fn networks(&self) -> &[Sequential] {
        &self.networks
    }

    /// Simple trace: detached parameters, default row ids, no injection.
    pub fn trace(
        &self,
        plate_size: usize,
        observations: &IndexMap<String, Tensor>,
        rng: Rng,
    ) -> Result<ModelTrace> {
        self.trace_with(TraceSpec {
            observations: Some(observations),
            ..TraceSpec::new(plate_size, rng)
        })
    }

    pub fn trace_with(&self, spec: TraceSpec<'_>) -> Result<ModelTrace> {
        if spec.plate_size == 0 {
            return Err(Error::InvalidParameter {
                what: "plate size must be positive".into(),
            });
        }
        if let Some(ids) = spec.row_ids {
            if ids.len() != spec.plate_size {
                return Err(Error::InvalidParameter {
                    what: format!(
                        "{} row ids for plate size {}",
                        ids.len(),
                        spec.plate_size
                    ),
                });
            }
        }
        let detached;
        let params = match spec.params {
            Some(p) => p,
            None => {
                detached = BoundParams::detach(&self.store.lock().unwrap());
                &detached
            }
        };
        let mut ctx = ModelCtx {
            plate_size: spec.plate_size,
            row_ids: spec.row_ids,
            observations: spec.observations.unwrap_or_else(|| empty_map()),
            data: spec.data.unwrap_or_else(|| empty_map()),
            injected: spec.injected.unwrap_or_else(|| empty_map()),
            params,
            rng: spec.rng,
            vars: Vec::new(),
            plate_done: false,
        };
        (self.builder)(&mut ctx)?;
        for name in ctx.observations.keys() {
            if !ctx.vars.iter().any(|v| &v.name == name) {
                return Err(Error::UnknownObservation { name: name.clone() });
            }
        }
        Ok(ModelTrace {
            variables: ctx.vars,
            plate_size: ctx.plate_size,
        })
    }

    /// The shared leading-axis extent of all observed in-plate variables,
    /// discovered from a cheap probe execution at plate size 1.
    pub fn detect_plate_size(&self, observations: &IndexMap<String, Tensor>) -> Result<usize> {
        let probe = self.trace_with(TraceSpec::new(1, Rng::from_seed(0)))?;
        let mut found: Option<usize> = None;
        for (name, obs) in observations {
            let var = probe
                .get(name)
                .ok_or_else(|| Error::UnknownObservation { name: name.clone() })?;
            if !var.in_plate() {
                continue;
            }
            let got = *obs.shape().first().ok_or_else(|| Error::InvalidParameter {
                what: format!("observation for in-plate `{name}` must have a leading plate axis"),
            })?;
            match found {
                None => found = Some(got),
                Some(prev) if prev == got => {}
                Some(prev) => return Err(Error::PlateConflict { a: prev, b: got }),
            }
        }
        found.ok_or(Error::PlateUndetermined)
    }
}

/// How every p-model variable is covered during inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VarRole {
    Observed,
    QMatched,
}

/// Name-based pairing of a p-trace with a q-trace.
#[derive(Clone, Debug)]
pub struct Pairing {
    roles: IndexMap<String, VarRole>,
}

impl Pairing {
    pub fn role(&self, name: &str) -> Option<VarRole> {
        self.roles.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, VarRole)> {
        self.roles.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Pair variables by exact name. Every p latent must be covered by a q
/// factor or an observation: SVI optimizes over the full posterior, so a
/// latent without either has no variational treatment and is an error.
pub fn match_q_to_p(p_trace: &ModelTrace, q_trace: &ModelTrace) -> Result<Pairing> {
    for qv in q_trace.variables() {
        let pv = p_trace
            .get(qv.name())
            .ok_or_else(|| Error::UnmatchedVariable {
                name: qv.name().into(),
            })?;
        if pv.is_observed() {
            return Err(Error::InvalidParameter {
                what: format!(
                    "q-model declares a factor for observed variable `{}`",
                    qv.name()
                ),
            });
        }
        if pv.in_plate() != qv.in_plate() {
            return Err(Error::InvalidParameter {
                what: format!(
                    "`{}` is {} in the p-model but {} in the q-model",
                    qv.name(),
                    side(pv.in_plate()),
                    side(qv.in_plate()),
                ),
            });
        }
    }
    let mut roles = IndexMap::new();
    for pv in p_trace.variables() {
        let role = if pv.is_observed() {
            VarRole::Observed
        } else if q_trace.get(pv.name()).is_some() {
            VarRole::QMatched
        } else {
            return Err(Error::UncoveredLatent {
                name: pv.name().into(),
            });
        };
        roles.insert(pv.name().to_string(), role);
    }
    Ok(Pairing { roles })
}

fn side(in_plate: bool) -> &'static str {
    if in_plate {
        "in-plate"
    } else {
        "global"
    }
}

/// Execution context a model builder runs against.
pub struct ModelCtx<'a> {
    plate_size: usize,
    row_ids: Option<&'a [u64]>,
    observations: &'a IndexMap<String, Tensor>,
    data: &'a IndexMap<String, Tensor>,
    injected: &'a IndexMap<String, Tensor>,
    params: &'a BoundParams,
    rng: Rng,
    vars: Vec<RandomVariable>,
    plate_done: bool,
}

impl<'a> ModelCtx<'a> {
    /// Declare a global random variable (shared across all replications).
    pub fn rv(&mut self, name: &str, dist: Dist) -> Result<Tensor> {
        if self.plate_done {
            return Err(Error::GlobalAfterPlate { name: name.into() });
        }
        self.check_new(name)?;
        let expected = dist.param_shape();
        let (value, observed) = if let Some(obs) = self.observations.get(name) {
            if obs.shape() != expected.as_slice() {
                return Err(Error::ObservationShape {
                    name: name.into(),
                    expected,
                    got: obs.shape().to_vec(),
                });
            }
            (obs.detach(), true)
        } else if let Some(inj) = self.injected.get(name) {
            if inj.shape() != expected.as_slice() {
                return Err(Error::InvalidParameter {
                    what: format!(
                        "injected value for `{name}` has shape {:?}, expected {expected:?}",
                        inj.shape()
                    ),
                });
            }
            (inj.clone(), false)
        } else {
            let mut rng = self.var_rng(name);
            let value = match &dist {
                Dist::Normal(d) => d.rsample(&mut rng),
                Dist::Bernoulli(_) => dist.sample(&mut rng, &[]),
            };
            (value, false)
        };
        self.vars.push(RandomVariable {
            name: name.into(),
            dist,
            in_plate: false,
            observed,
            value: value.clone(),
        });
        Ok(value)
    }

    /// The model's single replication block. Nested plates cannot be
    /// expressed: the closure only receives a [`PlateCtx`].
    pub fn plate<F>(&mut self, f: F) -> Result<()>
    where
        F: FnOnce(&mut PlateCtx<'_, 'a>) -> Result<()>,
    {
        if self.plate_done {
            return Err(Error::MultiplePlates);
        }
        f(&mut PlateCtx { ctx: self })?;
        self.plate_done = true;
        Ok(())
    }

    /// Amortization input bound through `TraceSpec::data`.
    pub fn data(&self, name: &str) -> Result<Tensor> {
        self.data
            .get(name)
            .cloned()
            .ok_or_else(|| Error::MissingData {
                name: name.into(),
                hint: "bind it through TraceSpec::data".into(),
            })
    }

    /// Bound trainable parameter.
    pub fn param(&self, name: &str) -> Result<Tensor> {
        self.params.get(name)
    }

    pub fn params(&self) -> &'a BoundParams {
        self.params
    }

    /// Random stream for a network's weight draws, keyed by label.
    pub fn nn_rng(&self, label: &str) -> Rng {
        self.rng.split("nn").split(label)
    }

    pub fn plate_size(&self) -> usize {
        self.plate_size
    }

    fn check_new(&self, name: &str) -> Result<()> {
        if self.vars.iter().any(|v| v.name == name) {
            return Err(Error::DuplicateVariable { name: name.into() });
        }
        Ok(())
    }

    fn var_rng(&self, name: &str) -> Rng {
        self.rng.split("rv").split(name)
    }

    fn row_id(&self, i: usize) -> u64 {
        self.row_ids.map_or(i as u64, |ids| ids[i])
    }

    /// Per-row noise for an in-plate draw, keyed by global row id so the
    /// same row receives the same noise in any batch containing it.
    fn keyed_rows(&self, name: &str, per_row: usize, normal: bool) -> Vec<f64> {
        let base = self.var_rng(name);
        let mut out = Vec::with_capacity(self.plate_size * per_row);
        for i in 0..self.plate_size {
            let mut rng = base.split_index(self.row_id(i));
            if normal {
                out.extend(rng.standard_normal_vec(per_row));
            } else {
                out.extend(rng.uniform_vec(per_row));
            }
        }
        out
    }

    fn declare_in_plate(&mut self, name: &str, dist: Dist, batched: bool) -> Result<Tensor> {
        self.check_new(name)?;
        let m = self.plate_size;
        let param_shape = dist.param_shape();
        // Replicated: params describe one replica, the value gains a leading
        // plate axis. Batched: params already carry the plate axis.
        let expected: Vec<usize> = if batched {
            if param_shape.first() != Some(&m) {
                return Err(Error::PlateAxis {
                    name: name.into(),
                    expected: m,
                    got: param_shape.first().copied().unwrap_or(0),
                });
            }
            param_shape.clone()
        } else {
            let mut s = vec![m];
            s.extend_from_slice(&param_shape);
            s
        };
        let per_row: usize = expected[1..].iter().product();

        let (value, observed) = if let Some(obs) = self.observations.get(name) {
            if obs.shape().first() != Some(&m) {
                return Err(Error::PlateAxis {
                    name: name.into(),
                    expected: m,
                    got: obs.shape().first().copied().unwrap_or(0),
                });
            }
            if obs.shape() != expected.as_slice() {
                return Err(Error::ObservationShape {
                    name: name.into(),
                    expected,
                    got: obs.shape().to_vec(),
                });
            }
            (obs.detach(), true)
        } else if let Some(inj) = self.injected.get(name) {
            if inj.shape() != expected.as_slice() {
                return Err(Error::InvalidParameter {
                    what: format!(
                        "injected value for `{name}` has shape {:?}, expected {expected:?}",
                        inj.shape()
                    ),
                });
            }
            (inj.clone(), false)
        } else {
            let value = match &dist {
                Dist::Normal(d) => {
                    let eps = Tensor::from_vec(
                        expected.clone(),
                        self.keyed_rows(name, per_row, true),
                    )
                    .expect("noise length matches shape");
                    d.rsample_with_eps(&eps)
                }
                Dist::Bernoulli(b) => {
                    let probs = Tensor::zeros(&expected)
                        .add(&b.probs().detach())
                        .expect("params broadcast into plate shape");
                    let u = self.keyed_rows(name, per_row, false);
                    let data: Vec<f64> = probs
                        .data()
                        .iter()
                        .zip(&u)
                        .map(|(&p, &ui)| if ui < p { 1.0 } else { 0.0 })
                        .collect();
                    Tensor::from_vec(expected.clone(), data).expect("draw count matches shape")
                }
            };
            (value, false)
        };
        self.vars.push(RandomVariable {
            name: name.into(),
            dist,
            in_plate: true,
            observed,
            value: value.clone(),
        });
        Ok(value)
    }
}

/// Context inside the plate block.
pub struct PlateCtx<'m, 'a> {
    ctx: &'m mut ModelCtx<'a>,
}

impl<'m, 'a> PlateCtx<'m, 'a> {
    /// Replicated variable: `dist` parameterizes a single replica; the value
    /// is drawn i.i.d. per row with a leading plate axis.
    pub fn rv(&mut self, name: &str, dist: Dist) -> Result<Tensor> {
        self.ctx.declare_in_plate(name, dist, false)
    }

    /// Batched variable: `dist`'s parameters already carry the plate axis
    /// (for example a network output of shape [plate, dim]).
    pub fn rv_batched(&mut self, name: &str, dist: Dist) -> Result<Tensor> {
        self.ctx.declare_in_plate(name, dist, true)
    }

    pub fn data(&self, name: &str) -> Result<Tensor> {
        self.ctx.data(name)
    }

    pub fn param(&self, name: &str) -> Result<Tensor> {
        self.ctx.param(name)
    }

    pub fn params(&self) -> &'a BoundParams {
        self.ctx.params
    }

    pub fn nn_rng(&self, label: &str) -> Rng {
        self.ctx.nn_rng(label)
    }

    pub fn size(&self) -> usize {
        self.ctx.plate_size
    }
}
