//! Client-side layer pruning: saliency-driven mask selection followed by
//! fixed-mask least-squares reconstruction of the surviving weights.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gram, Cholesky};
use crate::model::{PruneMask, SparsityTarget, WeightMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyKind {
    /// `|w|`
    Magnitude,
    /// `|w| · ‖x_c‖₂`
    ActivationAware,
    /// `w² / [(XXᵀ + λI)⁻¹]_cc`
    ObsDiag,
}

/// Diagonal damping, either absolute or as a fraction of the mean diagonal
/// of `XXᵀ`. A relative damping on all-zero inputs (a dead layer) uses a unit
/// scale instead, so it stays positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Damping {
    Absolute(f64),
    Relative(f64),
}

impl Default for Damping {
    fn default() -> Self {
        Damping::Relative(1e-2)
    }
}

impl Damping {
    pub fn validate(self, field: &str) -> Result<()> {
        let v = match self {
            Damping::Absolute(v) | Damping::Relative(v) => v,
        };
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::config(field, format!("must be finite and >= 0, got {v}")));
        }
        Ok(())
    }

    fn resolve_with_gram(self, g: &Array2<f64>) -> f64 {
        match self {
            Damping::Absolute(v) => v,
            Damping::Relative(f) => {
                let n = g.nrows().max(1) as f64;
                let mean_diag = g.diag().sum() / n;
                f * if mean_diag > 0.0 { mean_diag } else { 1.0 }
            }
        }
    }

    /// Absolute ridge for calibration inputs `x`.
    pub fn resolve(self, x: &Array2<f64>) -> f64 {
        self.resolve_with_gram(&gram(x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaliencyCriterion {
    pub kind: SaliencyKind,
    /// Hessian damping, only read by [`SaliencyKind::ObsDiag`].
    #[serde(default)]
    pub damping: Damping,
}

impl SaliencyCriterion {
    pub fn magnitude() -> Self {
        SaliencyCriterion {
            kind: SaliencyKind::Magnitude,
            damping: Damping::default(),
        }
    }

    pub fn activation_aware() -> Self {
        SaliencyCriterion {
            kind: SaliencyKind::ActivationAware,
            damping: Damping::default(),
        }
    }

    pub fn obs_diag(damping: Damping) -> Self {
        SaliencyCriterion {
            kind: SaliencyKind::ObsDiag,
            damping,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSelection {
    pub mask: PruneMask,
    /// Set when activation-aware scoring saw all-zero inputs and used magnitude instead.
    pub fell_back_to_magnitude: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerPruneResult {
    pub layer_index: usize,
    pub mask: PruneMask,
    /// Reconstructed weights, exactly zero wherever `mask` prunes.
    pub weights: WeightMatrix,
    /// `‖W·X − Ŵ·X‖²_F`
    pub recon_error: f64,
    pub ridge: f64,
    pub criterion_fallback: bool,
}

fn check_inputs(w: &WeightMatrix, x: &Array2<f64>) -> Result<()> {
    if x.nrows() != w.cols() {
        return Err(Error::dim("calibration inputs (rows = layer input dim)", w.cols(), x.nrows()));
    }
    if x.ncols() == 0 {
        return Err(Error::Empty("calibration samples"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("calibration inputs"));
    }
    Ok(())
}

/// Per-weight saliency; larger means more important. The flag reports a
/// magnitude fallback.
pub fn saliency_scores(w: &WeightMatrix, x: &Array2<f64>, crit: &SaliencyCriterion) -> Result<(Array2<f64>, bool)> {
    check_inputs(w, x)?;
    let magnitude = || w.values().mapv(f64::abs);
    match crit.kind {
        SaliencyKind::Magnitude => Ok((magnitude(), false)),
        SaliencyKind::ActivationAware => {
            let norms = x.map_axis(Axis(1), |row| row.dot(&row).sqrt());
            if norms.iter().all(|&n| n == 0.0) {
                log::warn!("activation-aware saliency: all calibration inputs are zero, using magnitude");
                return Ok((magnitude(), true));
            }
            Ok((magnitude() * &norms.insert_axis(Axis(0)), false))
        }
        SaliencyKind::ObsDiag => {
            crit.damping.validate("criterion.damping")?;
            let mut g = gram(x);
            let lambda = crit.damping.resolve_with_gram(&g);
            g.diag_mut().mapv_inplace(|v| v + lambda);
            let inv_diag = Cholesky::factor(&g)?.inverse_diagonal();
            let sq = w.values().mapv(|v| v * v);
            Ok((sq / &inv_diag.insert_axis(Axis(0)), false))
        }
    }
}

/// Prunes exactly `ceil(s·d)` weights with the smallest scores; ties go to
/// the lower `(row, col)` index first.
pub fn mask_from_scores(scores: &Array2<f64>, s: SparsityTarget) -> PruneMask {
    let (rows, cols) = scores.dim();
    let flat: Vec<f64> = scores.iter().copied().collect();
    let mut order: Vec<usize> = (0..flat.len()).collect();
    order.sort_by(|&a, &b| flat[a].total_cmp(&flat[b]).then(a.cmp(&b)));
    let mut bits = Array2::from_elem((rows, cols), true);
    for &k in &order[..s.zeros_for(flat.len())] {
        bits[[k / cols, k % cols]] = false;
    }
    PruneMask::new(bits).expect("non-empty scores")
}

pub fn select_mask(
    w: &WeightMatrix,
    x: &Array2<f64>,
    s: SparsityTarget,
    crit: &SaliencyCriterion,
) -> Result<MaskSelection> {
    let (scores, fell_back_to_magnitude) = saliency_scores(w, x, crit)?;
    Ok(MaskSelection {
        mask: mask_from_scores(&scores, s),
        fell_back_to_magnitude,
    })
}

/// `‖(W − Ŵ)·X‖²_F`
pub fn recon_error(w: &WeightMatrix, w_hat: &WeightMatrix, x: &Array2<f64>) -> f64 {
    let diff = w.values() - w_hat.values();
    diff.dot(x).mapv(|v| v * v).sum()
}

/// Re-fits the kept weights of every row by least squares against the dense
/// layer output on `x`, with the mask held fixed.
///
/// Row `r` solves `(G_SS + λI) ŵ_S = G_S· w_r + λ w_S` where `G = XXᵀ` and `S`
/// is the kept support. The ridge pulls `ŵ_S` toward the original weights,
/// so a full mask returns `W` and the result never scores worse than plain
/// masking.
pub fn reconstruct(w: &WeightMatrix, mask: &PruneMask, x: &Array2<f64>, ridge: f64) -> Result<(WeightMatrix, f64)> {
    if w.dim() != mask.dim() {
        return Err(Error::dim("reconstruct mask", format!("{:?}", w.dim()), format!("{:?}", mask.dim())));
    }
    check_inputs(w, x)?;
    if !(ridge.is_finite() && ridge >= 0.0) {
        return Err(Error::config("ridge", format!("must be finite and >= 0, got {ridge}")));
    }
    let g = gram(x);
    let (rows, cols) = w.dim();
    let wv = w.values();
    let mut out = Array2::<f64>::zeros((rows, cols));
    for r in 0..rows {
        let support: Vec<usize> = (0..cols).filter(|&c| mask.is_kept(r, c)).collect();
        if support.len() == cols {
            out.row_mut(r).assign(&wv.row(r));
            continue;
        }
        if support.is_empty() {
            continue;
        }
        let k = support.len();
        let w_row = wv.row(r);
        let mut h = Array2::<f64>::zeros((k, k));
        let mut rhs = Array1::<f64>::zeros(k);
        for (a, &ca) in support.iter().enumerate() {
            for (b, &cb) in support.iter().enumerate() {
                h[[a, b]] = g[[ca, cb]];
            }
            h[[a, a]] += ridge;
            rhs[a] = g.row(ca).dot(&w_row) + ridge * w_row[ca];
        }
        let sol = Cholesky::factor(&h)?.solve(rhs.view());
        for (a, &c) in support.iter().enumerate() {
            out[[r, c]] = sol[a];
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("reconstructed weights"));
    }
    let w_hat = WeightMatrix::new(out)?;
    let err = recon_error(w, &w_hat, x);
    Ok((w_hat, err))
}

pub fn prune_layer(
    layer_index: usize,
    w: &WeightMatrix,
    x: &Array2<f64>,
    s: SparsityTarget,
    crit: &SaliencyCriterion,
    ridge: Damping,
) -> Result<LayerPruneResult> {
    ridge.validate("ridge")?;
    let selection = select_mask(w, x, s, crit)?;
    let lambda = ridge.resolve(x);
    let (weights, recon_error) = reconstruct(w, &selection.mask, x, lambda)?;
    Ok(LayerPruneResult {
        layer_index,
        mask: selection.mask,
        weights,
        recon_error,
        ridge: lambda,
        criterion_fallback: selection.fell_back_to_magnitude,
    })
}
