//! Server-side merge of sparse client layers.
//!
//! Two steps per layer:
//!
//! 1. ℓ0 averaging: each weight is averaged over the clients that kept it,
//!    so a weight kept by one client is not diluted by the others' zeros.
//!    Weights pruned by every submitter stay exactly zero.
//! 2. Mask expansion: the intersection of client masks prunes no more than
//!    any single client did, so it falls short of the target. The server counts how many
//!    submitters pruned each position (`C_j`) and additionally prunes
//!    `k = ceil(s·d) − #{j : C_j = N_j}` positions, most-agreed first, so the
//!    layer lands exactly on `ceil(s·d)` zeros.
//!
//! `N_j` is the number of clients that submitted this layer in the round,
//! which under layer sampling is usually fewer than all clients.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PruneMask, SparsityTarget, WeightMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct ClientLayerUpdate {
    pub client_id: usize,
    pub layer_index: usize,
    pub weights: WeightMatrix,
    pub mask: PruneMask,
}

impl ClientLayerUpdate {
    pub fn new(client_id: usize, layer_index: usize, weights: WeightMatrix, mask: PruneMask) -> Result<Self> {
        let u = ClientLayerUpdate {
            client_id,
            layer_index,
            weights,
            mask,
        };
        u.validate()?;
        Ok(u)
    }

    fn validate(&self) -> Result<()> {
        if self.weights.dim() != self.mask.dim() {
            return Err(Error::dim(
                "client update mask",
                format!("{:?}", self.weights.dim()),
                format!("{:?}", self.mask.dim()),
            ));
        }
        let leak = self
            .weights
            .values()
            .indexed_iter()
            .find(|&((r, c), &v)| !self.mask.is_kept(r, c) && v != 0.0);
        if let Some(((r, c), v)) = leak {
            return Err(Error::InvalidUpdate(format!(
                "client {} layer {}: weight ({r},{c}) = {v} is nonzero but masked out",
                self.client_id, self.layer_index
            )));
        }
        Ok(())
    }
}

/// Per-position count of submitters that pruned it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ZeroCountMap {
    pub counts: Array2<usize>,
    pub participants: usize,
}

impl ZeroCountMap {
    /// Positions pruned by every participant.
    pub fn full_agreement(&self) -> usize {
        self.counts.iter().filter(|&&c| c == self.participants).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedLayer {
    pub layer_index: usize,
    pub weights: WeightMatrix,
    pub mask: PruneMask,
    pub participants: usize,
    /// Positions pruned by the expansion step, in selection order.
    pub expansion_trace: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorMode {
    /// ℓ0 averaging followed by mask expansion.
    #[default]
    L0Expand,
    /// ℓ0 averaging only; the mask is the intersection of client masks.
    /// Misses the sparsity target and exists as a negative control.
    NoExpansion,
}

/// ℓ0-norm average of masked client weights.
///
/// Kept values are summed in sorted order around the smallest one, which
/// makes the result independent of client order and returns `v` exactly when
/// every contributor sent `v`.
pub fn l0_aggregate(updates: &[ClientLayerUpdate]) -> Result<(WeightMatrix, ZeroCountMap)> {
    let first = updates.first().ok_or(Error::Empty("client updates"))?;
    let dim = first.weights.dim();
    for u in updates {
        if u.layer_index != first.layer_index {
            return Err(Error::dim("update layer index", first.layer_index, u.layer_index));
        }
        if u.weights.dim() != dim {
            return Err(Error::dim("update shape", format!("{dim:?}"), format!("{:?}", u.weights.dim())));
        }
        u.validate()?;
    }

    let n = updates.len();
    let mut out = Array2::<f64>::zeros(dim);
    let mut counts = Array2::<usize>::zeros(dim);
    let mut kept = Vec::with_capacity(n);
    for ((r, c), slot) in out.indexed_iter_mut() {
        kept.clear();
        kept.extend(
            updates
                .iter()
                .filter(|u| u.mask.is_kept(r, c))
                .map(|u| u.weights.get(r, c)),
        );
        counts[[r, c]] = n - kept.len();
        if kept.is_empty() {
            continue;
        }
        kept.sort_by(f64::total_cmp);
        let pivot = kept[0];
        let shift: f64 = kept.iter().map(|v| v - pivot).sum();
        *slot = pivot + shift / kept.len() as f64;
    }
    Ok((
        WeightMatrix::new(out)?,
        ZeroCountMap {
            counts,
            participants: n,
        },
    ))
}

/// `k = ceil(s·d) − #{j : C_j = N}`, clamped at zero.
pub fn expansion_size(counts: &ZeroCountMap, s: SparsityTarget) -> usize {
    s.zeros_for(counts.counts.len()).saturating_sub(counts.full_agreement())
}

/// Starts from the intersection mask and prunes `k` more positions, ordered
/// by zero count (descending), then aggregated `|w|` (ascending), then
/// `(row, col)`.
pub fn expand_mask(layer_index: usize, weights: &WeightMatrix, counts: &ZeroCountMap, s: SparsityTarget) -> AggregatedLayer {
    assert_eq!(weights.dim(), counts.counts.dim(), "weights and counts disagree on shape");
    let k = expansion_size(counts, s);
    let n = counts.participants;
    let wv = weights.values();

    let mut candidates: Vec<(usize, usize)> = counts
        .counts
        .indexed_iter()
        .filter(|&(_, &c)| c < n)
        .map(|(pos, _)| pos)
        .collect();
    assert!(k <= candidates.len(), "expansion needs {k} positions, only {} remain", candidates.len());
    candidates.sort_by(|&a, &b| {
        counts.counts[b]
            .cmp(&counts.counts[a])
            .then(wv[a].abs().total_cmp(&wv[b].abs()))
            .then(a.cmp(&b))
    });
    candidates.truncate(k);

    let mut bits = counts.counts.mapv(|c| c < n);
    let mut out = wv.clone();
    for &pos in &candidates {
        bits[pos] = false;
        out[pos] = 0.0;
    }
    // intersection positions already aggregate to exactly zero
    AggregatedLayer {
        layer_index,
        weights: WeightMatrix::new(out).expect("finite aggregate"),
        mask: PruneMask::new(bits).expect("non-empty"),
        participants: n,
        expansion_trace: candidates,
    }
}

pub fn aggregate_layer(updates: &[ClientLayerUpdate], s: SparsityTarget) -> Result<AggregatedLayer> {
    aggregate_layer_with(updates, s, AggregatorMode::L0Expand)
}

pub fn aggregate_layer_with(updates: &[ClientLayerUpdate], s: SparsityTarget, mode: AggregatorMode) -> Result<AggregatedLayer> {
    let (weights, counts) = l0_aggregate(updates)?;
    let layer_index = updates[0].layer_index;
    Ok(match mode {
        AggregatorMode::L0Expand => expand_mask(layer_index, &weights, &counts, s),
        AggregatorMode::NoExpansion => AggregatedLayer {
            layer_index,
            mask: PruneMask::new(counts.counts.mapv(|c| c < counts.participants)).expect("non-empty"),
            weights,
            participants: counts.participants,
            expansion_trace: Vec::new(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::apply_mask;
    use ndarray::array;

    fn update(client: usize, w: Array2<f64>, m: &[&[u8]]) -> ClientLayerUpdate {
        let mask = PruneMask::from_rows(m).unwrap();
        let w = apply_mask(&WeightMatrix::new(w).unwrap(), &mask).unwrap();
        ClientLayerUpdate::new(client, 0, w, mask).unwrap()
    }

    fn half() -> SparsityTarget {
        SparsityTarget::new(0.5).unwrap()
    }

    #[test]
    fn single_client_passthrough() {
        let u = update(0, array![[1.5, -2.0, 0.25, 3.0]], &[&[1, 0, 1, 1]]);
        let (w, c) = l0_aggregate(std::slice::from_ref(&u)).unwrap();
        assert_eq!(w, u.weights);
        assert_eq!(c.counts, array![[0, 1, 0, 0]]);
        let agg = aggregate_layer(&[u.clone()], SparsityTarget::new(0.25).unwrap()).unwrap();
        assert_eq!(agg.mask, u.mask);
        assert!(agg.expansion_trace.is_empty());
    }

    #[test]
    fn averages_only_over_keepers() {
        let a = update(0, array![[2.0, 9.0, 1.0]], &[&[1, 0, 0]]);
        let b = update(1, array![[6.0, 6.0, 1.0]], &[&[1, 1, 0]]);
        let (w, c) = l0_aggregate(&[a, b]).unwrap();
        assert_eq!(w.values(), &array![[4.0, 6.0, 0.0]]);
        assert_eq!(c.counts, array![[0, 1, 2]]);
        assert_eq!(c.participants, 2);
    }

    #[test]
    fn worked_expansion_example() {
        // M1 = [0,1,1,0], M2 = [1,1,0,0]; |w| at j1, j3 = 5.0, 0.2
        let m1 = update(0, array![[9.0, 1.0, 0.2, 9.0]], &[&[0, 1, 1, 0]]);
        let m2 = update(1, array![[5.0, 1.0, 9.0, 9.0]], &[&[1, 1, 0, 0]]);
        let (w, c) = l0_aggregate(&[m1.clone(), m2.clone()]).unwrap();
        assert_eq!(c.counts, array![[1, 0, 1, 2]]);
        assert_eq!(c.full_agreement(), 1);
        assert_eq!(expansion_size(&c, half()), 1);
        assert_eq!(w.values(), &array![[5.0, 1.0, 0.2, 0.0]]);

        let agg = expand_mask(0, &w, &c, half());
        assert_eq!(agg.expansion_trace, vec![(0, 2)]);
        assert_eq!(agg.mask, PruneMask::from_rows(&[[1, 1, 0, 0]]).unwrap());
        assert_eq!(agg.weights.values(), &array![[5.0, 1.0, 0.0, 0.0]]);
        assert_eq!(agg.mask.sparsity(), 0.5);
        assert_eq!(aggregate_layer(&[m2, m1], half()).unwrap(), agg);
    }

    #[test]
    fn expansion_size_edges() {
        let agree = ZeroCountMap {
            counts: array![[3, 3, 0, 0]],
            participants: 3,
        };
        assert_eq!(expansion_size(&agree, half()), 0);
        let disjoint = ZeroCountMap {
            counts: array![[1, 1, 1, 0]],
            participants: 3,
        };
        assert_eq!(expansion_size(&disjoint, half()), 2);
    }

    #[test]
    fn identical_updates_are_a_fixed_point() {
        let u = update(0, array![[0.1, 0.2, 0.3], [0.7, -0.4, 1e-3]], &[&[1, 0, 1], &[0, 1, 0]]);
        let many: Vec<_> = (0..7)
            .map(|i| ClientLayerUpdate {
                client_id: i,
                ..u.clone()
            })
            .collect();
        let agg = aggregate_layer(&many, half()).unwrap();
        assert_eq!(agg.weights, u.weights);
        assert_eq!(agg.mask, u.mask);
    }

    #[test]
    fn no_expansion_mode_keeps_intersection() {
        let a = update(0, array![[1.0, 2.0, 3.0, 4.0]], &[&[0, 0, 1, 1]]);
        let b = update(1, array![[1.0, 2.0, 3.0, 4.0]], &[&[1, 1, 0, 0]]);
        let agg = aggregate_layer_with(&[a, b], half(), AggregatorMode::NoExpansion).unwrap();
        assert_eq!(agg.mask.zero_count(), 0);
    }

    #[test]
    fn rejects_bad_batches() {
        assert!(matches!(l0_aggregate(&[]), Err(Error::Empty(_))));
        let a = update(0, array![[1.0, 2.0]], &[&[1, 1]]);
        let b = update(1, array![[1.0], [2.0]], &[&[1], &[1]]);
        assert!(l0_aggregate(&[a.clone(), b]).is_err());
        let leaky = ClientLayerUpdate {
            mask: PruneMask::from_rows(&[[1, 0]]).unwrap(),
            ..a.clone()
        };
        assert!(matches!(l0_aggregate(&[a, leaky]), Err(Error::InvalidUpdate(_))));
    }
}
