//! Experiment configuration schema and its validation.
//!
//! The schema is format-agnostic serde; the CLI reads it from TOML. Unknown
//! keys are rejected, and [`ExperimentConfig::resolve`] checks every runtime
//! precondition before any pruning starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregation::AggregatorMode;
use crate::calib::{ClientDataSpec, DataDistribution};
use crate::checkpoint::load_checkpoint;
use crate::error::{Error, Result};
use crate::model::{Activation, LayeredModel, SparsityTarget};
use crate::orchestrator::FederationConfig;
use crate::pruner::{Damping, SaliencyCriterion, SaliencyKind};
use crate::sampler::ClientResource;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelBlock,
    pub federation: FederationBlock,
    pub data: DataBlock,
    #[serde(default)]
    pub eval: Option<EvalBlock>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    #[serde(default = "default_model_name")]
    pub name: String,
    /// Feature widths before/after each layer: `dims.len() - 1` layers.
    #[serde(default)]
    pub dims: Option<Vec<usize>>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub init_seed: u64,
    /// Load the dense model from a `.fspa` file instead; relative to the config file.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationBlock {
    pub clients: usize,
    #[serde(default = "one")]
    pub rounds: usize,
    pub sparsity: f64,
    #[serde(default = "default_criterion")]
    pub criterion: SaliencyKind,
    #[serde(default)]
    pub criterion_damping: Damping,
    #[serde(default)]
    pub ridge: Damping,
    /// Capacity per client; all equal when omitted.
    #[serde(default)]
    pub resources: Option<Vec<f64>>,
    #[serde(default = "one_f64")]
    pub max_layer_fraction: f64,
    /// Objective weights per client; uniform when omitted.
    #[serde(default)]
    pub alpha: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub aggregator: AggregatorMode,
    /// Worker threads for client pruning; 0 uses all cores.
    #[serde(default)]
    pub jobs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    /// Same Gaussian for every client (IID), centred at the shared offset.
    Gaussian,
    /// Client `i` centred at `b + heterogeneity · z_i`, `z_i ~ N(0, I)`,
    /// where `b ~ N(0, shared_offset² I)` is common to all clients.
    ShiftedGaussian,
    /// One component per client at `b + heterogeneity · z_c`; client `i`
    /// draws its own component with probability `dominance`.
    Mixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataBlock {
    #[serde(default = "default_data_name")]
    pub name: String,
    #[serde(default = "default_kind")]
    pub kind: DataKind,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    #[serde(default = "one_f64")]
    pub scale: f64,
    #[serde(default = "one_f64")]
    pub heterogeneity: f64,
    #[serde(default = "default_dominance")]
    pub dominance: f64,
    /// Scale of a mean offset shared by every client, added to all centres.
    #[serde(default)]
    pub shared_offset: f64,
    #[serde(default)]
    pub seed: u64,
    /// Give every client the first client's data.
    #[serde(default)]
    pub identical: bool,
    /// Explicit per-client distributions, overriding `kind`.
    #[serde(default)]
    pub clients: Option<Vec<DataDistribution>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalBlock {
    #[serde(default = "default_heldout")]
    pub heldout_samples: usize,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_grid")]
    pub sparsity_grid: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for EvalBlock {
    fn default() -> Self {
        EvalBlock {
            heldout_samples: default_heldout(),
            trials: default_trials(),
            sparsity_grid: default_grid(),
            seed: 0,
        }
    }
}

fn default_model_name() -> String {
    "toy".into()
}
fn default_activation() -> Activation {
    Activation::Relu
}
fn one() -> usize {
    1
}
fn one_f64() -> f64 {
    1.0
}
fn default_criterion() -> SaliencyKind {
    SaliencyKind::ObsDiag
}
fn default_data_name() -> String {
    "synthetic".into()
}
fn default_kind() -> DataKind {
    DataKind::ShiftedGaussian
}
fn default_samples() -> usize {
    32
}
fn default_dominance() -> f64 {
    0.7
}
fn default_heldout() -> usize {
    256
}
fn default_trials() -> usize {
    200
}
fn default_grid() -> Vec<f64> {
    vec![0.5, 0.6, 0.7, 0.8]
}

/// A fully validated experiment.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub dense: LayeredModel,
    pub federation: FederationConfig,
    pub data_name: String,
    pub eval: EvalBlock,
    /// Whether the config carried an `[eval]` block.
    pub has_eval_block: bool,
    pub sparsity_grid: Vec<SparsityTarget>,
}

/// Overrides applied on top of the file contents.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
}

impl DataBlock {
    fn client_specs(&self, n_clients: usize, feature_dim: usize) -> Result<Vec<ClientDataSpec>> {
        if self.n_samples == 0 {
            return Err(Error::config("data.n_samples", "must be >= 1"));
        }
        for (field, v) in [
            ("data.scale", self.scale),
            ("data.heterogeneity", self.heterogeneity),
            ("data.shared_offset", self.shared_offset),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(field, format!("must be finite and >= 0, got {v}")));
            }
        }
        if !(self.dominance.is_finite() && (0.0..=1.0).contains(&self.dominance)) {
            return Err(Error::config("data.dominance", format!("must lie in [0, 1], got {}", self.dominance)));
        }

        let normal = |tags: &[u64], scale: f64| -> Vec<f64> {
            use rand_distr::{Distribution, StandardNormal};
            let mut rng = seed::rng(self.seed, tags);
            (0..feature_dim)
                .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect()
        };
        let base = normal(&[4], self.shared_offset);
        let draw = |tag: u64, idx: usize| -> Vec<f64> {
            normal(&[tag, idx as u64], self.heterogeneity)
                .into_iter()
                .zip(&base)
                .map(|(z, b)| b + z)
                .collect()
        };
        let distributions: Vec<DataDistribution> = match &self.clients {
            Some(explicit) => {
                if explicit.len() != n_clients {
                    return Err(Error::config(
                        "data.clients",
                        format!("{} distributions for {n_clients} clients", explicit.len()),
                    ));
                }
                explicit.clone()
            }
            None => match self.kind {
                DataKind::Gaussian => vec![
                    DataDistribution::Gaussian {
                        mean: base.clone(),
                        scale: self.scale,
                    };
                    n_clients
                ],
                DataKind::ShiftedGaussian => (0..n_clients)
                    .map(|i| DataDistribution::ShiftedGaussian {
                        offset: draw(1, i),
                        scale: self.scale,
                    })
                    .collect(),
                DataKind::Mixture => {
                    let centers: Vec<Vec<f64>> = (0..n_clients).map(|c| draw(2, c)).collect();
                    let rest = if n_clients > 1 { (1.0 - self.dominance) / (n_clients - 1) as f64 } else { 0.0 };
                    (0..n_clients)
                        .map(|i| DataDistribution::Mixture {
                            centers: centers.clone(),
                            weights: (0..n_clients)
                                .map(|c| if c == i { if n_clients > 1 { self.dominance } else { 1.0 } } else { rest })
                                .collect(),
                            scale: self.scale,
                        })
                        .collect()
                }
            },
        };

        let mut specs: Vec<ClientDataSpec> = distributions
            .into_iter()
            .enumerate()
            .map(|(i, distribution)| ClientDataSpec {
                client_id: i,
                n_samples: self.n_samples,
                feature_dim,
                distribution,
                seed: seed::derive_seed(self.seed, &[3, i as u64]),
            })
            .collect();
        if self.identical {
            let first = specs[0].clone();
            for (i, s) in specs.iter_mut().enumerate() {
                *s = ClientDataSpec { client_id: i, ..first.clone() };
            }
        }
        for (i, s) in specs.iter().enumerate() {
            s.validate().map_err(|e| match e {
                Error::Config { field, message } => Error::config(format!("{field} (client {i})"), message),
                other => other,
            })?;
        }
        Ok(specs)
    }
}

impl ExperimentConfig {
    /// Validates everything and builds the dense model. `base_dir` anchors
    /// relative checkpoint paths.
    pub fn resolve(&self, base_dir: &Path, overrides: Overrides) -> Result<Experiment> {
        let dense = match (&self.model.dims, &self.model.checkpoint) {
            (Some(_), Some(_)) => {
                return Err(Error::config("model", "set either `dims` or `checkpoint`, not both"));
            }
            (None, None) => return Err(Error::config("model", "one of `dims` or `checkpoint` is required")),
            (Some(dims), None) => {
                LayeredModel::random(self.model.name.clone(), dims, self.model.activation, self.model.init_seed)?
            }
            (None, Some(path)) => {
                let path = base_dir.join(path);
                let bytes = std::fs::read(&path)
                    .map_err(|e| Error::config("model.checkpoint", format!("{}: {e}", path.display())))?;
                load_checkpoint(&bytes)
                    .map_err(|e| Error::config("model.checkpoint", format!("{}: {e}", path.display())))?
                    .0
            }
        };

        let f = &self.federation;
        if f.clients == 0 {
            return Err(Error::config("federation.clients", "must be >= 1"));
        }
        let sparsity = SparsityTarget::new(f.sparsity).map_err(|_| {
            Error::config("federation.sparsity", format!("must lie strictly between 0 and 1, got {}", f.sparsity))
        })?;
        let capacities = f.resources.clone().unwrap_or_else(|| vec![1.0; f.clients]);
        if capacities.len() != f.clients {
            return Err(Error::config(
                "federation.resources",
                format!("{} capacities for {} clients", capacities.len(), f.clients),
            ));
        }
        let alpha = f.alpha.clone().unwrap_or_else(|| vec![1.0 / f.clients as f64; f.clients]);
        let data = self.data.client_specs(f.clients, dense.input_dim())?;

        let federation = FederationConfig {
            rounds: f.rounds,
            sparsity,
            criterion: SaliencyCriterion {
                kind: f.criterion,
                damping: f.criterion_damping,
            },
            ridge: f.ridge,
            resources: capacities
                .iter()
                .enumerate()
                .map(|(i, &capacity)| ClientResource { client_id: i, capacity })
                .collect(),
            max_layer_fraction: f.max_layer_fraction,
            data,
            seed: overrides.seed.unwrap_or(f.seed),
            alpha,
            aggregator: f.aggregator,
            jobs: overrides.jobs.unwrap_or(f.jobs),
        };
        federation.validate(&dense)?;

        let eval = self.eval.clone().unwrap_or_default();
        if eval.heldout_samples == 0 {
            return Err(Error::config("eval.heldout_samples", "must be >= 1"));
        }
        if eval.trials == 0 {
            return Err(Error::config("eval.trials", "must be >= 1"));
        }
        if eval.sparsity_grid.is_empty() {
            return Err(Error::config("eval.sparsity_grid", "must not be empty"));
        }
        let sparsity_grid = eval
            .sparsity_grid
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                SparsityTarget::new(s).map_err(|_| {
                    Error::config(format!("eval.sparsity_grid[{i}]"), format!("sparsity must lie strictly between 0 and 1, got {s}"))
                })
            })
            .collect::<Result<Vec<_>>>()?;

        Ok(Experiment {
            dense,
            federation,
            data_name: self.data.name.clone(),
            has_eval_block: self.eval.is_some(),
            eval,
            sparsity_grid,
        })
    }
}
