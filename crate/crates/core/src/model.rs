//! Dense layered models, binary prune masks and exact sparsity accounting.
//!
//! A layer is a single weight matrix with `rows` output neurons and `cols`
//! input features. Inputs are column-sample matrices (`features × samples`),
//! so a layer maps `X` to `W · X`. Layers carry no bias.

use ndarray::{Array2, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    fn apply(self, x: &mut Array2<f64>) {
        if self == Activation::Relu {
            x.mapv_inplace(|v| v.max(0.0));
        }
    }
}

/// Dense weights of one layer, row = output neuron, col = input feature.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix(Array2<f64>);

impl WeightMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::dim("weight matrix", "rows, cols >= 1", format!("{:?}", values.dim())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("weight matrix"));
        }
        Ok(WeightMatrix(values))
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        let len = values.len();
        let arr = Array2::from_shape_vec((rows, cols), values)
            .map_err(|_| Error::dim("weight matrix", rows * cols, len))?;
        Self::new(arr)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0);
        WeightMatrix(Array2::zeros((rows, cols)))
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    /// Total number of weights, `d` in the sparsity formulas.
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.0[[row, col]]
    }

    pub fn max_abs_diff(&self, other: &WeightMatrix) -> f64 {
        Zip::from(&self.0)
            .and(&other.0)
            .fold(0.0f64, |acc, a, b| acc.max((a - b).abs()))
    }
}

/// Binary keep-mask aligned to one layer: `true` keeps a weight, `false` prunes it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask(Array2<bool>);

impl PruneMask {
    pub fn new(bits: Array2<bool>) -> Result<Self> {
        if bits.nrows() == 0 || bits.ncols() == 0 {
            return Err(Error::dim("prune mask", "rows, cols >= 1", format!("{:?}", bits.dim())));
        }
        Ok(PruneMask(bits))
    }

    /// Builds a mask from 0/1 rows; any nonzero entry counts as kept.
    pub fn from_rows<R: AsRef<[u8]>>(rows: &[R]) -> Result<Self> {
        let ncols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut bits = Vec::with_capacity(rows.len() * ncols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != ncols {
                return Err(Error::dim("prune mask row", ncols, r.len()));
            }
            bits.extend(r.iter().map(|&b| b != 0));
        }
        let arr = Array2::from_shape_vec((rows.len(), ncols), bits)
            .map_err(|_| Error::dim("prune mask", "rectangular rows", "ragged"))?;
        Self::new(arr)
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0);
        PruneMask(Array2::from_elem((rows, cols), true))
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &Array2<bool> {
        &self.0
    }

    pub fn is_kept(&self, row: usize, col: usize) -> bool {
        self.0[[row, col]]
    }

    pub fn zero_count(&self) -> usize {
        self.0.iter().filter(|&&b| !b).count()
    }

    /// Exact fraction of pruned entries.
    pub fn sparsity(&self) -> f64 {
        self.zero_count() as f64 / self.len() as f64
    }

    /// Mask marking exactly the nonzero weights as kept.
    pub fn from_nonzeros(w: &WeightMatrix) -> Self {
        PruneMask(w.values().mapv(|v| v != 0.0))
    }
}

/// Target fraction of pruned weights, applied independently to every layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct SparsityTarget(f64);

impl SparsityTarget {
    pub fn new(s: f64) -> Result<Self> {
        if !(s > 0.0 && s < 1.0) {
            return Err(Error::config("sparsity", format!("must lie strictly between 0 and 1, got {s}")));
        }
        Ok(SparsityTarget(s))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// `ceil(s·d)`: number of zeros a layer of `d` weights must carry.
    ///
    /// A 1e-9 guard keeps products such as `0.7 * 30` from rounding up past
    /// an integral count.
    pub fn zeros_for(self, d: usize) -> usize {
        ((self.0 * d as f64 - 1e-9).ceil().max(0.0) as usize).min(d)
    }

    /// The exact sparsity a layer of `d` weights ends up with.
    pub fn achieved_for(self, d: usize) -> f64 {
        self.zeros_for(d) as f64 / d as f64
    }
}

impl TryFrom<f64> for SparsityTarget {
    type Error = Error;
    fn try_from(s: f64) -> Result<Self> {
        SparsityTarget::new(s)
    }
}

impl From<SparsityTarget> for f64 {
    fn from(s: SparsityTarget) -> f64 {
        s.0
    }
}

pub fn apply_mask(w: &WeightMatrix, m: &PruneMask) -> Result<WeightMatrix> {
    if w.dim() != m.dim() {
        return Err(Error::dim("apply_mask", format!("{:?}", w.dim()), format!("{:?}", m.dim())));
    }
    let out = Zip::from(w.values())
        .and(m.bits())
        .map_collect(|&v, &keep| if keep { v } else { 0.0 });
    Ok(WeightMatrix(out))
}

pub fn measure_sparsity(m: &PruneMask) -> f64 {
    m.sparsity()
}

/// Ordered stack of weight matrices with one activation between layers.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredModel {
    name: String,
    activation: Activation,
    layers: Vec<WeightMatrix>,
}

impl LayeredModel {
    pub fn new(name: impl Into<String>, activation: Activation, layers: Vec<WeightMatrix>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("model layers"));
        }
        for (j, pair) in layers.windows(2).enumerate() {
            if pair[0].rows() != pair[1].cols() {
                return Err(Error::dim(
                    "adjacent layers",
                    format!("layer {} input dim {}", j + 1, pair[0].rows()),
                    pair[1].cols(),
                ));
            }
        }
        Ok(LayeredModel {
            name: name.into(),
            activation,
            layers,
        })
    }

    /// Gaussian init with variance `1/fan_in`. `dims` lists the feature width
    /// before and after every layer, so `dims.len() - 1` layers are built.
    pub fn random(name: impl Into<String>, dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::config("model.dims", "need at least an input and an output width"));
        }
        if let Some(pos) = dims.iter().position(|&d| d == 0) {
            return Err(Error::config(format!("model.dims[{pos}]"), "widths must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|p| {
                let (cols, rows) = (p[0], p[1]);
                let normal = Normal::new(0.0, (1.0 / cols as f64).sqrt()).expect("finite std");
                WeightMatrix(Array2::from_shape_simple_fn((rows, cols), || normal.sample(&mut rng)))
            })
            .collect();
        LayeredModel::new(name, activation, layers)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[WeightMatrix] {
        &self.layers
    }

    pub fn layer(&self, index: usize) -> Result<&WeightMatrix> {
        self.layers.get(index).ok_or(Error::IndexOutOfRange {
            what: "layer",
            index,
            len: self.layers.len(),
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].rows()
    }

    /// Total number of weights.
    pub fn num_weights(&self) -> usize {
        self.layers.iter().map(WeightMatrix::len).sum()
    }

    /// Replaces every layer at once; shapes must match the current ones.
    pub fn with_layers(&self, layers: Vec<WeightMatrix>) -> Result<Self> {
        if layers.len() != self.layers.len() {
            return Err(Error::dim("replacement layers", self.layers.len(), layers.len()));
        }
        for (old, new) in self.layers.iter().zip(&layers) {
            if old.dim() != new.dim() {
                return Err(Error::dim("replacement layer", format!("{:?}", old.dim()), format!("{:?}", new.dim())));
            }
        }
        LayeredModel::new(self.name.clone(), self.activation, layers)
    }

    pub fn forward(&self, inputs: &Array2<f64>) -> Result<Array2<f64>> {
        self.forward_prefix(inputs, self.layers.len())
    }

    /// Applies layers `0..upto`. The activation follows every layer except the last
    /// one of the whole model.
    pub fn forward_prefix(&self, inputs: &Array2<f64>, upto: usize) -> Result<Array2<f64>> {
        if upto > self.layers.len() {
            return Err(Error::IndexOutOfRange {
                what: "layer",
                index: upto,
                len: self.layers.len(),
            });
        }
        if inputs.nrows() != self.input_dim() {
            return Err(Error::dim("forward inputs (rows = features)", self.input_dim(), inputs.nrows()));
        }
        let last = self.layers.len() - 1;
        let mut h = inputs.to_owned();
        for (j, w) in self.layers[..upto].iter().enumerate() {
            h = w.values().dot(&h);
            if j != last {
                self.activation.apply(&mut h);
            }
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("forward activations"));
        }
        Ok(h)
    }
}
