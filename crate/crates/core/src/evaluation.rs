//! Held-out metrics and executable checks of the protocol's guarantees.
//!
//! The loss of a model is its mean squared deviation from the dense
//! model's outputs on held-out inputs; `exp(loss)` is reported as a
//! perplexity-style proxy. It is a monotone transform, so it only supports
//! comparisons between models, never absolute perplexity claims.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calib::ClientDataSpec;
use crate::error::{Error, Result};
use crate::model::{apply_mask, LayeredModel, PruneMask, SparsityTarget};
use crate::orchestrator::{aggregate_full, ClientState, Federation, FederationConfig, PrunedModel, RoundReport};
use crate::pruner::LayerPruneResult;
use crate::aggregation::{aggregate_layer_with, ClientLayerUpdate};
use crate::sampler::{check_coverage, round_seed, sample_round_scaled};
use crate::seed;

/// Held-out inputs and the dense model's outputs on them.
#[derive(Debug, Clone, PartialEq)]
pub struct HeldoutSet {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
}

impl HeldoutSet {
    /// `n` columns from the equal-weight mixture of the client distributions.
    pub fn sample(dense: &LayeredModel, specs: &[ClientDataSpec], n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty("held-out samples"));
        }
        if specs.is_empty() {
            return Err(Error::Empty("client data specs"));
        }
        let dim = dense.input_dim();
        for s in specs {
            s.validate()?;
            if s.feature_dim != dim {
                return Err(Error::dim("held-out feature dim", dim, s.feature_dim));
            }
        }
        let mut rng = seed::rng(seed, &[0x4845_4C44]);
        let mut inputs = Array2::zeros((dim, n));
        for mut col in inputs.columns_mut() {
            let spec = &specs[rng.random_range(0..specs.len())];
            col.assign(&spec.distribution.sample(dim, 1, &mut rng).column(0));
        }
        let targets = dense.forward(&inputs)?;
        Ok(HeldoutSet { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.ncols() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub loss: f64,
    pub perplexity_proxy: f64,
    /// `‖W_dense·X_j − W_j·X_j‖²` per layer, with `X_j` the dense-model inputs of layer `j`.
    pub layer_recon_errors: Vec<f64>,
    /// Mask sparsity per layer; empty for a dense model.
    pub layer_sparsity: Vec<f64>,
}

pub fn evaluate(model: &PrunedModel, dense: &LayeredModel, heldout: &HeldoutSet) -> Result<EvalReport> {
    if heldout.is_empty() {
        return Err(Error::Empty("held-out samples"));
    }
    if model.model.num_layers() != dense.num_layers() {
        return Err(Error::dim("evaluated model layers", dense.num_layers(), model.model.num_layers()));
    }
    let out = model.model.forward(&heldout.inputs)?;
    if out.dim() != heldout.targets.dim() {
        return Err(Error::dim("held-out targets", format!("{:?}", out.dim()), format!("{:?}", heldout.targets.dim())));
    }
    let loss = (&out - &heldout.targets).mapv(|v| v * v).mean().expect("non-empty");

    let mut x = heldout.inputs.clone();
    let mut layer_recon_errors = Vec::with_capacity(dense.num_layers());
    for (j, (wd, wp)) in dense.layers().iter().zip(model.model.layers()).enumerate() {
        let diff = wd.values() - wp.values();
        layer_recon_errors.push(diff.dot(&x).mapv(|v| v * v).sum());
        if j + 1 < dense.num_layers() {
            x = dense.forward_prefix(&heldout.inputs, j + 1)?;
        }
    }
    let layer_sparsity = model
        .masks
        .as_ref()
        .map(|ms| ms.iter().map(PruneMask::sparsity).collect())
        .unwrap_or_default();
    Ok(EvalReport {
        loss,
        perplexity_proxy: loss.exp(),
        layer_recon_errors,
        layer_sparsity,
    })
}

/// Uniformly random masks with exactly `ceil(s·d)` zeros per layer, applied
/// to the dense weights without reconstruction.
pub fn random_baseline(dense: &LayeredModel, s: SparsityTarget, seed: u64) -> Result<PrunedModel> {
    let mut rng = seed::rng(seed, &[0x5241_4E44]);
    let mut layers = Vec::with_capacity(dense.num_layers());
    let mut masks = Vec::with_capacity(dense.num_layers());
    for w in dense.layers() {
        let d = w.len();
        let mut flat = vec![true; d];
        flat[..s.zeros_for(d)].iter_mut().for_each(|b| *b = false);
        flat.shuffle(&mut rng);
        let mask = PruneMask::new(Array2::from_shape_vec(w.dim(), flat).expect("d entries"))?;
        layers.push(apply_mask(w, &mask)?);
        masks.push(mask);
    }
    Ok(PrunedModel {
        model: dense.with_layers(layers)?,
        masks: Some(masks),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAudit {
    pub round_index: Option<usize>,
    pub layer_index: usize,
    pub zeros: usize,
    pub expected_zeros: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityAudit {
    pub layers_checked: usize,
    pub failures: Vec<LayerAudit>,
}

impl SparsityAudit {
    pub fn passed(&self) -> bool {
        self.layers_checked > 0 && self.failures.is_empty()
    }

    fn check(&mut self, round_index: Option<usize>, layer_index: usize, mask: &PruneMask, s: SparsityTarget) {
        self.layers_checked += 1;
        let expected = s.zeros_for(mask.len());
        if mask.zero_count() != expected {
            self.failures.push(LayerAudit {
                round_index,
                layer_index,
                zeros: mask.zero_count(),
                expected_zeros: expected,
            });
        }
    }
}

/// Every layer must carry exactly `ceil(s·d)` mask zeros.
pub fn audit_model(model: &PrunedModel, s: SparsityTarget) -> SparsityAudit {
    let mut audit = SparsityAudit {
        layers_checked: 0,
        failures: Vec::new(),
    };
    match &model.masks {
        Some(masks) => {
            for (j, m) in masks.iter().enumerate() {
                audit.check(None, j, m, s);
            }
        }
        None => {
            for (j, w) in model.model.layers().iter().enumerate() {
                audit.check(None, j, &PruneMask::ones(w.rows(), w.cols()), s);
            }
        }
    }
    audit
}

/// Audits the per-round layer statistics.
pub fn audit_reports(reports: &[RoundReport]) -> SparsityAudit {
    let mut audit = SparsityAudit {
        layers_checked: 0,
        failures: Vec::new(),
    };
    for r in reports {
        for l in &r.layers {
            audit.layers_checked += 1;
            if l.zeros != l.target_zeros {
                audit.failures.push(LayerAudit {
                    round_index: Some(r.round_index),
                    layer_index: l.layer_index,
                    zeros: l.zeros,
                    expected_zeros: l.target_zeros,
                });
            }
        }
    }
    audit
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub sparsity: f64,
    pub standalone_losses: Vec<f64>,
    pub standalone_mean_loss: f64,
    pub federated_loss: f64,
    pub random_loss: f64,
}

/// Standalone clients against the federated global model and a random-mask
/// baseline, one row per sparsity level.
pub fn standalone_vs_federated(
    dense: &LayeredModel,
    cfg: &FederationConfig,
    heldout: &HeldoutSet,
    grid: &[SparsityTarget],
) -> Result<Vec<ComparisonRow>> {
    grid.iter()
        .map(|&s| {
            let cfg = FederationConfig { sparsity: s, ..cfg.clone() };
            let mut fed = Federation::new(dense.clone(), cfg.clone())?;
            let standalone = fed.standalone_models()?;
            let standalone_losses = standalone
                .iter()
                .map(|m| evaluate(m, dense, heldout).map(|e| e.loss))
                .collect::<Result<Vec<_>>>()?;
            let federated = fed.run_experiment()?.final_model;
            let random = random_baseline(dense, s, cfg.seed)?;
            Ok(ComparisonRow {
                sparsity: s.value(),
                standalone_mean_loss: standalone_losses.iter().sum::<f64>() / standalone_losses.len() as f64,
                standalone_losses,
                federated_loss: evaluate(&federated, dense, heldout)?.loss,
                random_loss: evaluate(&random, dense, heldout)?.loss,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorDeviation {
    /// `max |mean − reference|` over all weights.
    pub max_abs_deviation: f64,
    /// Root mean square of `mean − reference` over all weights.
    pub rms_deviation: f64,
    /// Largest `|mean − reference| / SE` over weights with nonzero SE.
    pub max_z: f64,
    /// Fraction of weights with `|mean − reference| ≤ 4·SE + 1e-12`.
    pub within_4se_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnbiasednessReport {
    pub trials: usize,
    pub clients: usize,
    pub layers: usize,
    pub layer_budget: Vec<usize>,
    /// Global model produced by the protocol, one sampled round per trial.
    pub aggregated: EstimatorDeviation,
    /// `Σ_i 1[j ∈ L_i]·W_i[L_j] / E[Σ_i 1[j ∈ L_i]]`, the per-client sampling
    /// estimator whose expectation is the full-participation model.
    pub sampled: EstimatorDeviation,
    pub passed: bool,
}

/// Absolute slack added to `4·SE` for floating-point rounding of the averages.
pub const UNBIASEDNESS_FP_FLOOR: f64 = 1e-12;

struct RunningMoments {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl RunningMoments {
    fn new(n: usize) -> Self {
        RunningMoments {
            sum: vec![0.0; n],
            sum_sq: vec![0.0; n],
        }
    }

    /// Accumulates `values − reference`, so trials that hit the reference
    /// exactly contribute exact zeros.
    fn push(&mut self, values: impl Iterator<Item = f64>, reference: &[f64]) {
        for (((s, q), v), r) in self.sum.iter_mut().zip(self.sum_sq.iter_mut()).zip(values).zip(reference) {
            let d = v - r;
            *s += d;
            *q += d * d;
        }
    }

    fn deviation(&self, trials: usize) -> EstimatorDeviation {
        let t = trials as f64;
        let mut max_abs: f64 = 0.0;
        let mut sq = 0.0;
        let mut max_z: f64 = 0.0;
        let mut within = 0usize;
        for (s, q) in self.sum.iter().zip(&self.sum_sq) {
            let mean = s / t;
            let var = ((q / t - mean * mean) * t / (t - 1.0).max(1.0)).max(0.0);
            let se = (var / t).sqrt();
            let dev = mean.abs();
            max_abs = max_abs.max(dev);
            sq += dev * dev;
            if se > 0.0 {
                max_z = max_z.max(dev / se);
            }
            if dev <= 4.0 * se + UNBIASEDNESS_FP_FLOOR {
                within += 1;
            }
        }
        EstimatorDeviation {
            max_abs_deviation: max_abs,
            rms_deviation: (sq / self.sum.len() as f64).sqrt(),
            max_z,
            within_4se_fraction: within as f64 / self.sum.len() as f64,
        }
    }
}

fn flatten(model: &LayeredModel) -> Vec<f64> {
    model.layers().iter().flat_map(|w| w.values().iter().copied()).collect()
}

/// Monte Carlo check that layer sampling does not bias the global model.
///
/// Requires equal client capacities. Every client is given the first
/// client's calibration data so that layer sampling is the only source of
/// randomness; the reference is the model obtained when every client prunes
/// every layer.
pub fn unbiasedness_test(dense: &LayeredModel, cfg: &FederationConfig, trials: usize, seed: u64) -> Result<UnbiasednessReport> {
    if trials < 2 {
        return Err(Error::config("eval.trials", format!("need at least 2 trials, got {trials}")));
    }
    let first = cfg.resources.first().ok_or(Error::Empty("client resources"))?.capacity;
    if cfg.resources.iter().any(|r| r.capacity != first) {
        return Err(Error::config(
            "federation.resources",
            "unbiasedness test needs equal capacities so every layer is equally likely to be sampled",
        ));
    }
    let shared = cfg.data.first().ok_or(Error::Empty("client data specs"))?;
    let data: Vec<ClientDataSpec> = (0..cfg.n_clients())
        .map(|i| ClientDataSpec {
            client_id: i,
            ..shared.clone()
        })
        .collect();
    let cfg = FederationConfig { data, ..cfg.clone() };
    cfg.validate(dense)?;

    // pruning is a pure function of (dense layer, client data): do it once
    let dense_arc = std::sync::Arc::new(dense.clone());
    let clients = cfg
        .data
        .iter()
        .map(|spec| ClientState::new(dense_arc.clone(), spec))
        .collect::<Result<Vec<_>>>()?;
    let m = dense.num_layers();
    let per_client: Vec<Vec<LayerPruneResult>> = clients
        .par_iter()
        .map(|c| (0..m).map(|j| c.prune(j, &cfg)).collect())
        .collect::<Result<_>>()?;
    let reference = aggregate_full(dense, &per_client, &cfg)?;
    let reference_flat = flatten(&reference.model);
    let updates: Vec<Vec<ClientLayerUpdate>> = per_client
        .iter()
        .enumerate()
        .map(|(i, rs)| {
            rs.iter()
                .map(|r| ClientLayerUpdate::new(i, r.layer_index, apply_mask(&r.weights, &r.mask)?, r.mask.clone()))
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;

    let k = check_coverage(&cfg.resources, m, cfg.max_layer_fraction)?;
    // E[#clients holding layer j]; exact for every j because sampling and
    // repair treat layers exchangeably
    let expected_holders = k.iter().sum::<usize>() as f64 / m as f64;
    let n_weights = reference_flat.len();

    let mut aggregated = RunningMoments::new(n_weights);
    let mut sampled = RunningMoments::new(n_weights);
    let mut agg_flat = Vec::with_capacity(n_weights);
    let mut ht_flat = Vec::with_capacity(n_weights);
    for t in 0..trials {
        let plan = sample_round_scaled(&cfg.resources, m, cfg.max_layer_fraction, round_seed(seed, t), t)?;
        agg_flat.clear();
        ht_flat.clear();
        for j in 0..m {
            let batch: Vec<ClientLayerUpdate> = plan.submitters(j).into_iter().map(|i| updates[i][j].clone()).collect();
            let agg = aggregate_layer_with(&batch, cfg.sparsity, cfg.aggregator)?;
            agg_flat.extend(agg.weights.values().iter().copied());

            let mut sum = Array2::<f64>::zeros(dense.layers()[j].dim());
            for u in &batch {
                sum += u.weights.values();
            }
            ht_flat.extend(sum.iter().map(|v| v / expected_holders));
        }
        aggregated.push(agg_flat.iter().copied(), &reference_flat);
        sampled.push(ht_flat.iter().copied(), &reference_flat);
    }

    let aggregated = aggregated.deviation(trials);
    let sampled = sampled.deviation(trials);
    let passed = aggregated.within_4se_fraction == 1.0 && sampled.within_4se_fraction == 1.0;
    Ok(UnbiasednessReport {
        trials,
        clients: cfg.n_clients(),
        layers: m,
        layer_budget: k,
        aggregated,
        sampled,
        passed,
    })
}
