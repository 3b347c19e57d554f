//! Checkpoint serialization.
//!
//! The format is a line-oriented text file:
//!
//! ```text
//! platedvi-checkpoint v1
//! model=vae
//! data_dim=4
//! latent_dim=2
//! hidden_dim=16
//! likelihood=normal
//! bayesian_decoder=0
//! seed=7
//! epochs=300
//! mc_samples=1
//! final_elbo=-1234.5
//! params_p=6
//! params_q=6
//! p dec.trunk.w 2 2 16 <base64 of little-endian f64s>
//! ...
//! q enc.rho.b 1 2 <base64>
//! end
//! ```
//!
//! Parameter lines are `<side> <name> <rank> <dims...> <payload>`. Floats in
//! the header use shortest round-trip formatting and payloads are raw bits,
//! so save -> load -> save reproduces the file byte for byte.

use std::fmt::Write as _;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use platedvi::Tensor;

use crate::models::{Likelihood, ModelId, ModelPair, ModelSpec};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "platedvi-checkpoint";

#[derive(Clone, Debug, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub seed: u64,
    pub epochs_run: usize,
    pub mc_samples: usize,
    pub final_elbo: f64,
    pub p_params: Vec<ParamRecord>,
    pub q_params: Vec<ParamRecord>,
}

fn dump_store(model: &platedvi::model::ModelDefinition) -> Vec<ParamRecord> {
    let store = model.store().lock().unwrap();
    store
        .iter()
        .map(|(name, t)| ParamRecord {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            values: t.to_vec(),
        })
        .collect()
}

impl Checkpoint {
    /// Snapshot the current parameter values of a model pair.
    pub fn from_pair(
        spec: &ModelSpec,
        pair: &ModelPair,
        seed: u64,
        epochs_run: usize,
        mc_samples: usize,
        final_elbo: f64,
    ) -> Checkpoint {
        Checkpoint {
            spec: spec.clone(),
            seed,
            epochs_run,
            mc_samples,
            final_elbo,
            p_params: dump_store(&pair.p),
            q_params: dump_store(&pair.q),
        }
    }

    /// Load the stored values into a freshly built pair. The stored names
    /// and shapes must match the model registry exactly.
    pub fn apply(&self, pair: &ModelPair) -> Result<(), String> {
        for (side, records, model) in [
            ("p", &self.p_params, &pair.p),
            ("q", &self.q_params, &pair.q),
        ] {
            let mut store = model.store().lock().unwrap();
            let registry: Vec<String> = store.names().map(str::to_string).collect();
            let stored: Vec<String> = records.iter().map(|r| r.name.clone()).collect();
            if registry != stored {
                return Err(format!(
                    "{side}-parameters {stored:?} do not match the model registry {registry:?}"
                ));
            }
            for r in records {
                let expected = store.get(&r.name).expect("name just checked").shape();
                if expected != r.shape.as_slice() {
                    return Err(format!(
                        "{side}-parameter {} has shape {:?} in the model registry, checkpoint holds {:?}",
                        r.name, expected, r.shape
                    ));
                }
            }
            for r in records {
                let tensor = Tensor::from_vec(r.shape.clone(), r.values.clone())
                    .map_err(|e| format!("parameter {}: {e}", r.name))?;
                store
                    .set(&r.name, tensor)
                    .map_err(|e| format!("parameter {}: {e}", r.name))?;
            }
            store.mark_trained();
        }
        Ok(())
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{MAGIC} v{FORMAT_VERSION}");
        let _ = writeln!(out, "model={}", self.spec.model.as_str());
        let _ = writeln!(out, "data_dim={}", self.spec.data_dim);
        let _ = writeln!(out, "latent_dim={}", self.spec.latent_dim);
        let _ = writeln!(out, "hidden_dim={}", self.spec.hidden_dim);
        let _ = writeln!(out, "likelihood={}", self.spec.likelihood.as_str());
        let _ = writeln!(
            out,
            "bayesian_decoder={}",
            if self.spec.bayesian_decoder { 1 } else { 0 }
        );
        let _ = writeln!(out, "seed={}", self.seed);
        let _ = writeln!(out, "epochs={}", self.epochs_run);
        let _ = writeln!(out, "mc_samples={}", self.mc_samples);
        let _ = writeln!(out, "final_elbo={}", self.final_elbo);
        let _ = writeln!(out, "params_p={}", self.p_params.len());
        let _ = writeln!(out, "params_q={}", self.q_params.len());
        for (side, records) in [("p", &self.p_params), ("q", &self.q_params)] {
            for r in records {
                let mut bytes = Vec::with_capacity(r.values.len() * 8);
                for v in &r.values {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                let dims = r
                    .shape
                    .iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join(" ");
                let sep = if dims.is_empty() { "" } else { " " };
                let _ = writeln!(
                    out,
                    "{side} {} {}{sep}{dims} {}",
                    r.name,
                    r.shape.len(),
                    B64.encode(&bytes)
                );
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn deserialize(text: &str) -> Result<Checkpoint, String> {
        let mut lines = text.lines();
        let first = lines.next().ok_or("empty checkpoint file")?;
        let expected = format!("{MAGIC} v{FORMAT_VERSION}");
        if first != expected {
            return Err(format!("bad checkpoint header `{first}`, expected `{expected}`"));
        }

        let mut kv = indexmap::IndexMap::new();
        let mut param_lines = Vec::new();
        let mut saw_end = false;
        for line in lines.by_ref() {
            if line == "end" {
                saw_end = true;
                break;
            }
            if line.starts_with("p ") || line.starts_with("q ") {
                param_lines.push(line);
            } else if let Some((k, v)) = line.split_once('=') {
                kv.insert(k.to_string(), v.to_string());
            } else {
                return Err(format!("unparseable checkpoint line `{line}`"));
            }
        }
        if !saw_end {
            return Err("truncated checkpoint: missing `end` line".into());
        }

        let field = |name: &str| -> Result<&String, String> {
            kv.get(name).ok_or(format!("checkpoint missing field `{name}`"))
        };
        let parse_usize = |name: &str| -> Result<usize, String> {
            field(name)?
                .parse::<usize>()
                .map_err(|_| format!("checkpoint field `{name}` is not an integer"))
        };

        let spec = ModelSpec {
            model: ModelId::parse(field("model")?)
                .ok_or_else(|| format!("unknown model `{}`", kv["model"]))?,
            data_dim: parse_usize("data_dim")?,
            latent_dim: parse_usize("latent_dim")?,
            hidden_dim: parse_usize("hidden_dim")?,
            likelihood: Likelihood::parse(field("likelihood")?)
                .ok_or_else(|| format!("unknown likelihood `{}`", kv["likelihood"]))?,
            bayesian_decoder: match field("bayesian_decoder")?.as_str() {
                "0" => false,
                "1" => true,
                other => return Err(format!("bad bayesian_decoder flag `{other}`")),
            },
        };
        let seed = field("seed")?
            .parse::<u64>()
            .map_err(|_| "checkpoint field `seed` is not an integer".to_string())?;
        let final_elbo = field("final_elbo")?
            .parse::<f64>()
            .map_err(|_| "checkpoint field `final_elbo` is not a float".to_string())?;

        let mut p_params = Vec::new();
        let mut q_params = Vec::new();
        for line in param_lines {
            let mut parts = line.split(' ');
            let side = parts.next().unwrap();
            let name = parts.next().ok_or("parameter line missing name")?.to_string();
            let rank: usize = parts
                .next()
                .and_then(|r| r.parse().ok())
                .ok_or_else(|| format!("parameter {name}: bad rank"))?;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(
                    parts
                        .next()
                        .and_then(|d| d.parse().ok())
                        .ok_or_else(|| format!("parameter {name}: bad dims"))?,
                );
            }
            let payload = parts
                .next()
                .ok_or_else(|| format!("parameter {name}: missing payload"))?;
            if parts.next().is_some() {
                return Err(format!("parameter {name}: trailing fields"));
            }
            let bytes = B64
                .decode(payload)
                .map_err(|e| format!("parameter {name}: bad base64: {e}"))?;
            if bytes.len() % 8 != 0 {
                return Err(format!("parameter {name}: payload is not whole f64s"));
            }
            let values: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let expected: usize = shape.iter().product();
            if values.len() != expected {
                return Err(format!(
                    "parameter {name}: {} values for shape {shape:?}",
                    values.len()
                ));
            }
            let record = ParamRecord { name, shape, values };
            if side == "p" {
                p_params.push(record);
            } else {
                q_params.push(record);
            }
        }
        if p_params.len() != parse_usize("params_p")? || q_params.len() != parse_usize("params_q")? {
            return Err("parameter count does not match header".into());
        }

        Ok(Checkpoint {
            spec,
            seed,
            epochs_run: parse_usize("epochs")?,
            mc_samples: parse_usize("mc_samples")?,
            final_elbo,
            p_params,
            q_params,
        })
    }
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<(), String> {
    std::fs::write(path, ck.serialize())
        .map_err(|e| format!("cannot write {}: {e}", path.display()))
}

pub fn load(path: &Path) -> Result<Checkpoint, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    Checkpoint::deserialize(&text)
}
