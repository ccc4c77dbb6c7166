//! Federated pruning rounds.
//!
//! Each round the server samples a layer plan, ships the sampled layers,
//! every client prunes its assigned layers against its own dense cache and
//! calibration data, and the server merges the returned sparse layers with
//! ℓ0 averaging plus mask expansion. Clients always prune from the cached
//! dense model, so every round is a fresh one-shot prune.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate_layer_with, AggregatedLayer, AggregatorMode, ClientLayerUpdate};
use crate::calib::{all_layer_inputs, generate, CalibrationSet, ClientDataSpec};
use crate::error::{Error, Result};
use crate::model::{apply_mask, LayeredModel, PruneMask, SparsityTarget};
use crate::pruner::{prune_layer, Damping, LayerPruneResult, SaliencyCriterion, SaliencyKind};
use crate::sampler::{check_coverage, round_seed, sample_round_scaled, ClientResource, RoundPlan};
use crate::transport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub rounds: usize,
    pub sparsity: SparsityTarget,
    pub criterion: SaliencyCriterion,
    pub ridge: Damping,
    /// One entry per client; client ids must be `0..N` in order.
    pub resources: Vec<ClientResource>,
    pub max_layer_fraction: f64,
    pub data: Vec<ClientDataSpec>,
    pub seed: u64,
    /// Client weights of the federated objective. Reported, not used by aggregation.
    pub alpha: Vec<f64>,
    pub aggregator: AggregatorMode,
    /// Worker threads for client simulation; 0 lets rayon decide.
    pub jobs: usize,
}

impl FederationConfig {
    pub fn n_clients(&self) -> usize {
        self.resources.len()
    }

    /// Equal capacities, uniform α, default damping.
    pub fn homogeneous(data: Vec<ClientDataSpec>, sparsity: SparsityTarget, seed: u64) -> Self {
        let n = data.len();
        FederationConfig {
            rounds: 1,
            sparsity,
            criterion: SaliencyCriterion::obs_diag(Damping::default()),
            ridge: Damping::default(),
            resources: (0..n).map(|i| ClientResource { client_id: i, capacity: 1.0 }).collect(),
            max_layer_fraction: 1.0,
            data,
            seed,
            alpha: vec![1.0 / n.max(1) as f64; n],
            aggregator: AggregatorMode::L0Expand,
            jobs: 0,
        }
    }

    pub fn validate(&self, model: &LayeredModel) -> Result<()> {
        let n = self.n_clients();
        if n == 0 {
            return Err(Error::config("federation.clients", "must be >= 1"));
        }
        if self.rounds == 0 {
            return Err(Error::config("federation.rounds", "must be >= 1"));
        }
        for (i, r) in self.resources.iter().enumerate() {
            if r.client_id != i {
                return Err(Error::config(
                    format!("federation.resources[{i}]"),
                    format!("client id {} out of order", r.client_id),
                ));
            }
        }
        check_coverage(&self.resources, model.num_layers(), self.max_layer_fraction)
            .map_err(|e| Error::config("federation.resources", e.to_string()))?;
        if self.data.len() != n {
            return Err(Error::config("data", format!("{} client specs for {n} clients", self.data.len())));
        }
        for (i, d) in self.data.iter().enumerate() {
            if d.client_id != i {
                return Err(Error::config(format!("data.clients[{i}]"), format!("client id {} out of order", d.client_id)));
            }
            if d.feature_dim != model.input_dim() {
                return Err(Error::config(
                    format!("data.clients[{i}].feature_dim"),
                    format!("{} != model input dim {}", d.feature_dim, model.input_dim()),
                ));
            }
            d.validate()?;
        }
        if self.alpha.len() != n {
            return Err(Error::config("federation.alpha", format!("{} weights for {n} clients", self.alpha.len())));
        }
        if self.alpha.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::config("federation.alpha", "weights must be finite and >= 0"));
        }
        let sum: f64 = self.alpha.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config("federation.alpha", format!("weights must sum to 1, got {sum}")));
        }
        self.ridge.validate("federation.ridge")?;
        self.criterion.damping.validate("federation.criterion_damping")?;

        // undamped normal equations need at least as many samples as layer inputs
        let widest = model.layers().iter().map(|w| w.cols()).max().unwrap();
        let fewest = self.data.iter().map(|d| d.n_samples).min().unwrap();
        let undamped = |d: Damping| matches!(d, Damping::Absolute(v) | Damping::Relative(v) if v == 0.0);
        if fewest < widest {
            if undamped(self.ridge) {
                return Err(Error::config(
                    "federation.ridge",
                    format!("ridge 0 with {fewest} calibration samples for {widest} layer inputs makes the normal equations singular"),
                ));
            }
            if self.criterion.kind == SaliencyKind::ObsDiag && undamped(self.criterion.damping) {
                return Err(Error::config(
                    "federation.criterion_damping",
                    format!("damping 0 with {fewest} calibration samples for {widest} layer inputs makes XXᵀ singular"),
                ));
            }
        }
        Ok(())
    }
}

/// Client-side state: the cached dense model and private calibration data.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    dense: Arc<LayeredModel>,
    calibration: CalibrationSet,
    layer_inputs: Arc<Vec<Array2<f64>>>,
    pub last_received: Vec<usize>,
}

impl ClientState {
    pub fn new(dense: Arc<LayeredModel>, spec: &ClientDataSpec) -> Result<Self> {
        let calibration = generate(spec)?;
        Self::with_data(dense, calibration)
    }

    pub fn with_data(dense: Arc<LayeredModel>, calibration: CalibrationSet) -> Result<Self> {
        let layer_inputs = Arc::new(all_layer_inputs(&dense, &calibration)?);
        Ok(ClientState {
            client_id: calibration.client_id,
            dense,
            calibration,
            layer_inputs,
            last_received: Vec::new(),
        })
    }

    pub fn dense(&self) -> &LayeredModel {
        &self.dense
    }

    pub fn calibration(&self) -> &CalibrationSet {
        &self.calibration
    }

    pub fn layer_inputs(&self, layer: usize) -> &Array2<f64> {
        &self.layer_inputs[layer]
    }

    /// Prunes one dense layer with this client's data.
    pub fn prune(&self, layer: usize, cfg: &FederationConfig) -> Result<LayerPruneResult> {
        prune_layer(
            layer,
            self.dense.layer(layer)?,
            &self.layer_inputs[layer],
            cfg.sparsity,
            &cfg.criterion,
            cfg.ridge,
        )
    }

    /// The client's own fully pruned model, built without the server.
    pub fn standalone(&self, cfg: &FederationConfig) -> Result<PrunedModel> {
        let results = (0..self.dense.num_layers())
            .map(|j| self.prune(j, cfg))
            .collect::<Result<Vec<_>>>()?;
        let (layers, masks) = results.into_iter().map(|r| (r.weights, r.mask)).unzip();
        Ok(PrunedModel {
            model: self.dense.with_layers(layers)?,
            masks: Some(masks),
        })
    }
}

/// A model together with the masks that define its sparsity (none when dense).
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedModel {
    pub model: LayeredModel,
    pub masks: Option<Vec<PruneMask>>,
}

impl PrunedModel {
    pub fn dense(model: LayeredModel) -> Self {
        PrunedModel { model, masks: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRoundStats {
    pub layer_index: usize,
    pub participants: usize,
    pub weights: usize,
    pub zeros: usize,
    pub target_zeros: usize,
    pub sparsity: f64,
    pub expansion_size: usize,
    pub expansion_trace: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundStats {
    pub client_id: usize,
    pub layers: Vec<usize>,
    pub recon_errors: Vec<f64>,
    pub criterion_fallbacks: usize,
    pub bytes_down: u64,
    pub bytes_up: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round_index: usize,
    pub plan: RoundPlan,
    pub layers: Vec<LayerRoundStats>,
    pub clients: Vec<ClientRoundStats>,
    /// Server → clients, sampled layers only.
    pub bytes_down: u64,
    /// Clients → server, pruned layers plus packed masks.
    pub bytes_up: u64,
    /// Downlink size had every client received the whole model.
    pub bytes_down_full_model: u64,
    /// `Σ_i α_i Σ_{j∈L_i} recon_error_ij`
    pub weighted_recon_error: f64,
    pub wall_time_ms: f64,
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::config("jobs", e.to_string()))
}

struct ClientOutcome {
    uplink: Vec<u8>,
    stats: ClientRoundStats,
}

/// One round. Inputs are not modified unless the round succeeds, in which
/// case only `last_received` of each client changes.
pub fn run_round(
    global: &PrunedModel,
    clients: &mut [ClientState],
    cfg: &FederationConfig,
    round_index: usize,
) -> Result<(PrunedModel, RoundReport)> {
    let started = Instant::now();
    let m = global.model.num_layers();
    let plan = sample_round_scaled(
        &cfg.resources,
        m,
        cfg.max_layer_fraction,
        round_seed(cfg.seed, round_index),
        round_index,
    )?;

    let layers = global.model.layers();
    let full_down: u64 = clients
        .iter()
        .map(|c| transport::encode_downlink(round_index, c.client_id, layers.iter().enumerate()).len() as u64)
        .sum();

    let threads = pool(cfg.jobs)?;
    let outcomes: Vec<(Vec<usize>, ClientOutcome)> = threads.install(|| {
        clients
            .par_iter()
            .map(|client| -> Result<_> {
                let assigned = &plan.assignments[&client.client_id];
                let down = transport::encode_downlink(round_index, client.client_id, assigned.iter().map(|&j| (j, &layers[j])));
                let received: Vec<usize> = transport::decode_downlink(&down)?.into_iter().map(|(j, _)| j).collect();

                let results = assigned.iter().map(|&j| client.prune(j, cfg)).collect::<Result<Vec<_>>>()?;
                let payload: Vec<_> = results
                    .iter()
                    .map(|r| apply_mask(&r.weights, &r.mask).map(|w| (r.layer_index, w, &r.mask)))
                    .collect::<Result<_>>()?;
                let refs: Vec<_> = payload.iter().map(|(j, w, mk)| (*j, w, *mk)).collect();
                let uplink = transport::encode_uplink(round_index, client.client_id, &refs);

                let stats = ClientRoundStats {
                    client_id: client.client_id,
                    layers: assigned.clone(),
                    recon_errors: results.iter().map(|r| r.recon_error).collect(),
                    criterion_fallbacks: results.iter().filter(|r| r.criterion_fallback).count(),
                    bytes_down: down.len() as u64,
                    bytes_up: uplink.len() as u64,
                };
                Ok((received, ClientOutcome { uplink, stats }))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    // server side
    let mut by_layer: BTreeMap<usize, Vec<ClientLayerUpdate>> = BTreeMap::new();
    for (_, outcome) in &outcomes {
        let (_, updates) = transport::decode_uplink(&outcome.uplink)?;
        for u in updates {
            by_layer.entry(u.layer_index).or_default().push(u);
        }
    }
    let aggregated: Vec<AggregatedLayer> = (0..m)
        .map(|j| {
            let updates = by_layer.get(&j).ok_or(Error::CoverageInfeasible { required: m, available: by_layer.len() })?;
            aggregate_layer_with(updates, cfg.sparsity, cfg.aggregator)
        })
        .collect::<Result<_>>()?;

    let layer_stats = aggregated
        .iter()
        .map(|a| LayerRoundStats {
            layer_index: a.layer_index,
            participants: a.participants,
            weights: a.mask.len(),
            zeros: a.mask.zero_count(),
            target_zeros: cfg.sparsity.zeros_for(a.mask.len()),
            sparsity: a.mask.sparsity(),
            expansion_size: a.expansion_trace.len(),
            expansion_trace: a.expansion_trace.clone(),
        })
        .collect();
    let (new_layers, masks): (Vec<_>, Vec<_>) = aggregated.into_iter().map(|a| (a.weights, a.mask)).unzip();
    let next = PrunedModel {
        model: global.model.with_layers(new_layers)?,
        masks: Some(masks),
    };

    let client_stats: Vec<ClientRoundStats> = outcomes.iter().map(|(_, o)| o.stats.clone()).collect();
    let weighted_recon_error = client_stats
        .iter()
        .zip(&cfg.alpha)
        .map(|(s, a)| a * s.recon_errors.iter().sum::<f64>())
        .sum();
    let report = RoundReport {
        round_index,
        bytes_down: client_stats.iter().map(|s| s.bytes_down).sum(),
        bytes_up: client_stats.iter().map(|s| s.bytes_up).sum(),
        bytes_down_full_model: full_down,
        plan,
        layers: layer_stats,
        clients: client_stats,
        weighted_recon_error,
        wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
    };

    for (client, (received, _)) in clients.iter_mut().zip(outcomes) {
        client.last_received = received;
    }
    Ok((next, report))
}

/// A validated federation: the dense model and all client states.
pub struct Federation {
    cfg: FederationConfig,
    dense: Arc<LayeredModel>,
    clients: Vec<ClientState>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub final_model: PrunedModel,
    pub reports: Vec<RoundReport>,
}

impl Federation {
    pub fn new(dense: LayeredModel, cfg: FederationConfig) -> Result<Self> {
        cfg.validate(&dense)?;
        let dense = Arc::new(dense);
        let clients = cfg
            .data
            .iter()
            .map(|spec| ClientState::new(dense.clone(), spec))
            .collect::<Result<Vec<_>>>()?;
        Ok(Federation { cfg, dense, clients })
    }

    /// Uses the given calibration sets instead of generating them from `cfg.data`.
    pub fn with_calibration(dense: LayeredModel, cfg: FederationConfig, data: Vec<CalibrationSet>) -> Result<Self> {
        cfg.validate(&dense)?;
        if data.len() != cfg.n_clients() {
            return Err(Error::config("data", format!("{} calibration sets for {} clients", data.len(), cfg.n_clients())));
        }
        let dense = Arc::new(dense);
        let clients = data
            .into_iter()
            .map(|d| ClientState::with_data(dense.clone(), d))
            .collect::<Result<Vec<_>>>()?;
        Ok(Federation { cfg, dense, clients })
    }

    pub fn config(&self) -> &FederationConfig {
        &self.cfg
    }

    pub fn dense(&self) -> &LayeredModel {
        &self.dense
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn run_round(&mut self, global: &PrunedModel, round_index: usize) -> Result<(PrunedModel, RoundReport)> {
        run_round(global, &mut self.clients, &self.cfg, round_index)
    }

    pub fn run_experiment(&mut self) -> Result<ExperimentOutcome> {
        let mut global = PrunedModel::dense((*self.dense).clone());
        let mut reports = Vec::with_capacity(self.cfg.rounds);
        for t in 0..self.cfg.rounds {
            let (next, report) = self.run_round(&global, t)?;
            log::info!(
                "round {t}: {} layers aggregated, {} B down, {} B up",
                report.layers.len(),
                report.bytes_down,
                report.bytes_up
            );
            global = next;
            reports.push(report);
        }
        Ok(ExperimentOutcome {
            final_model: global,
            reports,
        })
    }

    pub fn standalone_models(&self) -> Result<Vec<PrunedModel>> {
        let threads = pool(self.cfg.jobs)?;
        threads.install(|| self.clients.par_iter().map(|c| c.standalone(&self.cfg)).collect())
    }

    /// Every client prunes every layer; aggregate without sampling.
    pub fn full_participation(&self) -> Result<PrunedModel> {
        let threads = pool(self.cfg.jobs)?;
        let per_client: Vec<Vec<LayerPruneResult>> = threads.install(|| {
            self.clients
                .par_iter()
                .map(|c| (0..self.dense.num_layers()).map(|j| c.prune(j, &self.cfg)).collect())
                .collect::<Result<_>>()
        })?;
        aggregate_full(&self.dense, &per_client, &self.cfg)
    }
}

/// Aggregates per-client results where `per_client[i][j]` is client `i`'s result for layer `j`.
pub(crate) fn aggregate_full(
    dense: &LayeredModel,
    per_client: &[Vec<LayerPruneResult>],
    cfg: &FederationConfig,
) -> Result<PrunedModel> {
    let mut layers = Vec::with_capacity(dense.num_layers());
    let mut masks = Vec::with_capacity(dense.num_layers());
    for j in 0..dense.num_layers() {
        let updates = per_client
            .iter()
            .enumerate()
            .map(|(i, rs)| {
                let r = &rs[j];
                ClientLayerUpdate::new(i, j, apply_mask(&r.weights, &r.mask)?, r.mask.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        let agg = aggregate_layer_with(&updates, cfg.sparsity, cfg.aggregator)?;
        layers.push(agg.weights);
        masks.push(agg.mask);
    }
    Ok(PrunedModel {
        model: dense.with_layers(layers)?,
        masks: Some(masks),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::DataDistribution;
    use crate::model::Activation;

    fn specs(n: usize, dim: usize, samples: usize) -> Vec<ClientDataSpec> {
        (0..n)
            .map(|i| ClientDataSpec {
                client_id: i,
                n_samples: samples,
                feature_dim: dim,
                distribution: DataDistribution::ShiftedGaussian {
                    offset: vec![0.3 * i as f64; dim],
                    scale: 1.0,
                },
                seed: 100 + i as u64,
            })
            .collect()
    }

    fn s(v: f64) -> SparsityTarget {
        SparsityTarget::new(v).unwrap()
    }

    #[test]
    fn validate_rejects_inconsistent_configs() {
        let model = LayeredModel::random("m", &[4, 4, 3], Activation::Relu, 1).unwrap();
        let ok = FederationConfig::homogeneous(specs(2, 4, 8), s(0.5), 0);
        ok.validate(&model).unwrap();

        let mut c = ok.clone();
        c.alpha = vec![0.6, 0.6];
        assert!(c.validate(&model).unwrap_err().to_string().contains("federation.alpha"));

        let mut c = ok.clone();
        c.resources.swap(0, 1);
        assert!(c.validate(&model).is_err());

        let mut c = ok.clone();
        c.data[1].feature_dim = 5;
        assert!(c.validate(&model).unwrap_err().to_string().contains("feature_dim"));

        let mut c = ok.clone();
        c.data.pop();
        assert!(c.validate(&model).is_err());

        let mut c = ok;
        c.rounds = 0;
        assert!(c.validate(&model).is_err());
    }

    #[test]
    fn single_client_round_equals_standalone() {
        let model = LayeredModel::random("m", &[5, 6, 4], Activation::Relu, 3).unwrap();
        let cfg = FederationConfig::homogeneous(specs(1, 5, 12), s(0.5), 9);
        let mut fed = Federation::new(model.clone(), cfg.clone()).unwrap();
        let standalone = fed.clients()[0].standalone(&cfg).unwrap();
        let out = fed.run_experiment().unwrap();
        assert_eq!(out.final_model, standalone);
        assert_eq!(fed.clients()[0].last_received, vec![0, 1]);
        assert_eq!(*fed.dense(), model);
    }

    #[test]
    fn round_reports_are_consistent() {
        let model = LayeredModel::random("m", &[4, 4, 4, 4, 4], Activation::Relu, 5).unwrap();
        let mut cfg = FederationConfig::homogeneous(specs(4, 4, 10), s(0.5), 2);
        cfg.max_layer_fraction = 0.5;
        cfg.jobs = 2;
        let mut fed = Federation::new(model, cfg).unwrap();
        let global = PrunedModel::dense(fed.dense().clone());
        let (next, report) = fed.run_round(&global, 0).unwrap();
        assert!(report.plan.is_covering(4));
        for l in &report.layers {
            assert_eq!(l.zeros, l.target_zeros);
            assert_eq!(l.participants, report.plan.submitters(l.layer_index).len());
        }
        for c in &report.clients {
            assert_eq!(c.layers.len(), 2);
            assert_eq!(c.bytes_down, 16 + 2 * (12 + 8 * 16));
            assert_eq!(c.bytes_up, 16 + 2 * (12 + 8 * 16 + 2));
        }
        assert_eq!(report.bytes_down_full_model, 4 * (16 + 4 * (12 + 8 * 16)));
        let masks = next.masks.unwrap();
        assert!(masks.iter().all(|m| m.zero_count() == 8));
    }

    #[test]
    fn failed_round_leaves_clients_untouched() {
        let model = LayeredModel::random("m", &[3, 3], Activation::Identity, 1).unwrap();
        let cfg = FederationConfig::homogeneous(specs(2, 3, 6), s(0.5), 0);
        let mut fed = Federation::new(model, cfg.clone()).unwrap();
        let global = PrunedModel::dense(fed.dense().clone());
        fed.run_round(&global, 0).unwrap();
        let before: Vec<_> = fed.clients().iter().map(|c| c.last_received.clone()).collect();

        // a global model with the wrong layer count cannot be sampled against the clients' caches
        let wrong = PrunedModel::dense(LayeredModel::random("w", &[3, 3, 3], Activation::Identity, 2).unwrap());
        let mut clients = fed.clients().to_vec();
        let mut bad = cfg;
        bad.ridge = Damping::Absolute(-1.0);
        assert!(run_round(&wrong, &mut clients, &bad, 1).is_err());
        let after: Vec<_> = clients.iter().map(|c| c.last_received.clone()).collect();
        assert_eq!(before, after);
    }
}
