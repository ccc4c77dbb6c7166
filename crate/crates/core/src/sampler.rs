//! Resource-proportional layer sampling with guaranteed coverage.
//!
//! Client `i` prunes `k_i = clamp(round(f · m · r_i / max_j r_j), 1, m)`
//! layers drawn uniformly without replacement, where `f ∈ (0, 1]` is the
//! share of the model the strongest client takes (1 by default). A repair pass then hands every
//! uncovered layer to a client, swapping out one of that client's
//! duplicated layers so that `|L_i| = k_i` still holds.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientResource {
    pub client_id: usize,
    pub capacity: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairSwap {
    pub layer: usize,
    pub client_id: usize,
    pub replaced: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub round_index: usize,
    pub seed: u64,
    /// Sorted layer indices per client, after repair.
    pub assignments: BTreeMap<usize, Vec<usize>>,
    /// Uniform draws before repair, kept for sampling statistics.
    #[serde(skip)]
    pub pre_repair: BTreeMap<usize, Vec<usize>>,
    pub repairs: Vec<RepairSwap>,
}

impl RoundPlan {
    /// Clients assigned to `layer`, ascending.
    pub fn submitters(&self, layer: usize) -> Vec<usize> {
        self.assignments
            .iter()
            .filter(|(_, ls)| ls.binary_search(&layer).is_ok())
            .map(|(&c, _)| c)
            .collect()
    }

    pub fn coverage_counts(&self, m: usize) -> Vec<usize> {
        let mut counts = vec![0; m];
        for ls in self.assignments.values() {
            for &l in ls {
                counts[l] += 1;
            }
        }
        counts
    }

    pub fn is_covering(&self, m: usize) -> bool {
        self.coverage_counts(m).iter().all(|&c| c > 0)
    }
}

fn validate(resources: &[ClientResource], m: usize) -> Result<()> {
    if resources.is_empty() {
        return Err(Error::Empty("client resources"));
    }
    if m == 0 {
        return Err(Error::Empty("model layers"));
    }
    for (i, r) in resources.iter().enumerate() {
        if !(r.capacity.is_finite() && r.capacity > 0.0) {
            return Err(Error::config(
                format!("federation.resources[{i}]"),
                format!("capacity must be finite and > 0, got {}", r.capacity),
            ));
        }
    }
    let mut ids: Vec<usize> = resources.iter().map(|r| r.client_id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::config("federation.resources", "duplicate client id"));
    }
    Ok(())
}

/// Layer budget per client, in input order, with the strongest client taking the whole model.
pub fn quota(resources: &[ClientResource], m: usize) -> Result<Vec<usize>> {
    quota_scaled(resources, m, 1.0)
}

/// Layer budget per client when the strongest client takes `max_fraction` of the model.
pub fn quota_scaled(resources: &[ClientResource], m: usize, max_fraction: f64) -> Result<Vec<usize>> {
    validate(resources, m)?;
    if !(max_fraction > 0.0 && max_fraction <= 1.0) {
        return Err(Error::config(
            "federation.max_layer_fraction",
            format!("must lie in (0, 1], got {max_fraction}"),
        ));
    }
    let max = resources.iter().map(|r| r.capacity).fold(f64::MIN, f64::max);
    Ok(resources
        .iter()
        .map(|r| ((max_fraction * m as f64 * r.capacity / max).round() as usize).clamp(1, m))
        .collect())
}

/// Fails with the shortfall when the budgets cannot cover `m` layers.
pub fn check_coverage(resources: &[ClientResource], m: usize, max_fraction: f64) -> Result<Vec<usize>> {
    let k = quota_scaled(resources, m, max_fraction)?;
    let available: usize = k.iter().sum();
    if available < m {
        return Err(Error::CoverageInfeasible { required: m, available });
    }
    Ok(k)
}

/// Seed used for round `round_index` of an experiment seeded with `base`.
pub fn round_seed(base: u64, round_index: usize) -> u64 {
    seed::derive_seed(base, &[0x5A4D_504C, round_index as u64])
}

pub fn sample_round(resources: &[ClientResource], m: usize, seed: u64) -> Result<RoundPlan> {
    sample_round_scaled(resources, m, 1.0, seed, 0)
}

pub fn sample_round_scaled(
    resources: &[ClientResource],
    m: usize,
    max_fraction: f64,
    seed: u64,
    round_index: usize,
) -> Result<RoundPlan> {
    let k = check_coverage(resources, m, max_fraction)?;
    let mut rng = seed::rng(seed, &[]);

    let mut lists: Vec<Vec<usize>> = k
        .iter()
        .map(|&ki| {
            let mut v = index::sample(&mut rng, m, ki).into_vec();
            v.sort_unstable();
            v
        })
        .collect();
    let pre_repair = resources
        .iter()
        .zip(&lists)
        .map(|(r, l)| (r.client_id, l.clone()))
        .collect();

    let mut cover = vec![0usize; m];
    for l in &lists {
        for &j in l {
            cover[j] += 1;
        }
    }
    let mut uncovered: Vec<usize> = (0..m).filter(|&j| cover[j] == 0).collect();
    uncovered.shuffle(&mut rng);

    let mut repairs = Vec::new();
    for layer in uncovered {
        // largest budget among clients holding a duplicated layer; lowest id on ties
        let donor = (0..lists.len())
            .filter(|&i| lists[i].iter().any(|&j| cover[j] >= 2))
            .max_by(|&a, &b| k[a].cmp(&k[b]).then(resources[b].client_id.cmp(&resources[a].client_id)))
            .expect("sum of budgets >= m leaves a duplicated layer while one is uncovered");
        let top = lists[donor].iter().map(|&j| cover[j]).max().unwrap();
        let tied: Vec<usize> = lists[donor].iter().copied().filter(|&j| cover[j] == top).collect();
        let replaced = tied[rng.random_range(0..tied.len())];

        let list = &mut lists[donor];
        let pos = list.binary_search(&replaced).unwrap();
        list.remove(pos);
        let ins = list.binary_search(&layer).unwrap_err();
        list.insert(ins, layer);
        cover[replaced] -= 1;
        cover[layer] += 1;
        repairs.push(RepairSwap {
            layer,
            client_id: resources[donor].client_id,
            replaced,
        });
    }
    if !repairs.is_empty() {
        log::debug!("round {round_index}: coverage repair swapped {} layer(s)", repairs.len());
    }

    Ok(RoundPlan {
        round_index,
        seed,
        assignments: resources.iter().zip(lists).map(|(r, l)| (r.client_id, l)).collect(),
        pre_repair,
        repairs,
    })
}

/// Monte Carlo estimate of `P(layer ∈ L_client)` over `trials` independent plans.
pub fn inclusion_probability(
    resources: &[ClientResource],
    m: usize,
    max_fraction: f64,
    layer_index: usize,
    client_id: usize,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    if trials == 0 {
        return Err(Error::config("trials", "must be >= 1"));
    }
    if layer_index >= m {
        return Err(Error::IndexOutOfRange {
            what: "layer",
            index: layer_index,
            len: m,
        });
    }
    if !resources.iter().any(|r| r.client_id == client_id) {
        return Err(Error::config("client_id", format!("no client {client_id} among resources")));
    }
    let mut hits = 0usize;
    for t in 0..trials {
        let plan = sample_round_scaled(resources, m, max_fraction, round_seed(seed, t), t)?;
        if plan.assignments[&client_id].binary_search(&layer_index).is_ok() {
            hits += 1;
        }
    }
    Ok(hits as f64 / trials as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn res(caps: &[f64]) -> Vec<ClientResource> {
        caps.iter()
            .enumerate()
            .map(|(i, &c)| ClientResource { client_id: i, capacity: c })
            .collect()
    }

    #[test]
    fn quota_examples() {
        assert_eq!(quota(&res(&[1.0, 1.0, 2.0]), 8).unwrap(), vec![4, 4, 8]);
        assert_eq!(quota(&res(&[3.0, 3.0, 3.0]), 5).unwrap(), vec![5, 5, 5]);
        assert_eq!(quota(&res(&[0.5]), 6).unwrap(), vec![6]);
        // floor of one layer even for a tiny client
        assert_eq!(quota(&res(&[0.001, 1.0]), 4).unwrap(), vec![1, 4]);
        assert!(quota(&[], 4).is_err());
        assert!(quota(&res(&[1.0, 0.0]), 4).is_err());
    }

    #[test]
    fn scaled_quota() {
        assert_eq!(quota_scaled(&res(&[1.0; 4]), 8, 0.5).unwrap(), vec![4; 4]);
        assert_eq!(quota_scaled(&res(&[1.0, 1.0, 2.0]), 8, 0.5).unwrap(), vec![2, 2, 4]);
        assert!(quota_scaled(&res(&[1.0]), 8, 0.0).is_err());
        assert!(quota_scaled(&res(&[1.0]), 8, 1.5).is_err());
    }

    #[test]
    fn infeasible_coverage_names_shortfall() {
        let err = check_coverage(&res(&[1.0, 1.0]), 8, 0.25).unwrap_err();
        assert!(matches!(err, Error::CoverageInfeasible { required: 8, available: 4 }));
        assert!(err.to_string().contains("short by 4"));
        assert!(sample_round_scaled(&res(&[1.0, 1.0]), 8, 0.25, 1, 0).is_err());
    }

    #[test]
    fn single_client_gets_everything() {
        let plan = sample_round(&res(&[2.0]), 6, 1).unwrap();
        assert_eq!(plan.assignments[&0], (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn full_budgets_give_full_lists() {
        let plan = sample_round(&res(&[1.0, 1.0, 1.0]), 5, 9).unwrap();
        for l in plan.assignments.values() {
            assert_eq!(l, &(0..5).collect::<Vec<_>>());
        }
        assert!(plan.repairs.is_empty());
    }

    #[test]
    fn deterministic_in_seed() {
        let r = res(&[1.0, 2.0, 4.0, 4.0]);
        assert_eq!(sample_round(&r, 12, 77).unwrap(), sample_round(&r, 12, 77).unwrap());
        assert_ne!(sample_round(&r, 12, 77).unwrap(), sample_round(&r, 12, 78).unwrap());
    }

    #[test]
    fn repair_restores_coverage_and_budgets() {
        let r = res(&[1.0, 1.0, 1.0, 1.0, 2.0]);
        let k = quota_scaled(&r, 10, 0.4).unwrap();
        assert_eq!(k, vec![2, 2, 2, 2, 4]);
        let mut repaired = 0;
        for s in 0..500 {
            let plan = sample_round_scaled(&r, 10, 0.4, s, 0).unwrap();
            assert!(plan.is_covering(10), "seed {s}");
            for (i, (c, l)) in plan.assignments.iter().enumerate() {
                assert_eq!(l.len(), k[i]);
                assert!(l.windows(2).all(|w| w[0] < w[1]), "client {c} list not strictly sorted");
            }
            repaired += usize::from(!plan.repairs.is_empty());
        }
        assert!(repaired > 0, "expected at least one repair in 500 seeds");
    }

    #[test]
    fn inclusion_probability_edges() {
        let r = res(&[1.0, 1.0]);
        assert_eq!(inclusion_probability(&r, 4, 1.0, 2, 1, 50, 3).unwrap(), 1.0);
        assert!(inclusion_probability(&r, 4, 1.0, 2, 1, 0, 3).is_err());
        assert!(inclusion_probability(&r, 4, 1.0, 4, 1, 10, 3).is_err());
        assert!(inclusion_probability(&r, 4, 1.0, 1, 9, 10, 3).is_err());
    }
}
