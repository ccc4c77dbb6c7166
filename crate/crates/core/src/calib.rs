//! Synthetic per-client calibration data.
//!
//! Each client draws `n_samples` feature columns from its own distribution;
//! a per-client mean shift is the heterogeneity knob.

use ndarray::Array2;
use rand::Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LayeredModel;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataDistribution {
    /// Isotropic Gaussian, `N(mean, scale²·I)`.
    Gaussian { mean: Vec<f64>, scale: f64 },
    /// Zero-centred Gaussian shifted by a client-specific offset.
    ShiftedGaussian { offset: Vec<f64>, scale: f64 },
    /// Gaussian mixture with shared `scale`; each column picks a component by `weights`.
    Mixture {
        centers: Vec<Vec<f64>>,
        weights: Vec<f64>,
        scale: f64,
    },
}

impl DataDistribution {
    /// Expected value of one sample.
    pub fn mean(&self) -> Vec<f64> {
        match self {
            DataDistribution::Gaussian { mean, .. } => mean.clone(),
            DataDistribution::ShiftedGaussian { offset, .. } => offset.clone(),
            DataDistribution::Mixture { centers, weights, .. } => {
                let total: f64 = weights.iter().sum();
                let mut m = vec![0.0; centers[0].len()];
                for (c, w) in centers.iter().zip(weights) {
                    for (acc, v) in m.iter_mut().zip(c) {
                        *acc += v * w / total;
                    }
                }
                m
            }
        }
    }

    pub fn scale(&self) -> f64 {
        match self {
            DataDistribution::Gaussian { scale, .. }
            | DataDistribution::ShiftedGaussian { scale, .. }
            | DataDistribution::Mixture { scale, .. } => *scale,
        }
    }

    fn validate(&self, feature_dim: usize) -> Result<()> {
        let scale = self.scale();
        if !(scale.is_finite() && scale >= 0.0) {
            return Err(Error::config("data.scale", format!("must be finite and >= 0, got {scale}")));
        }
        let check_len = |field: &str, v: &[f64]| -> Result<()> {
            if v.len() != feature_dim {
                return Err(Error::config(field, format!("length {} != feature_dim {feature_dim}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::config(field, "entries must be finite"));
            }
            Ok(())
        };
        match self {
            DataDistribution::Gaussian { mean, .. } => check_len("data.mean", mean),
            DataDistribution::ShiftedGaussian { offset, .. } => check_len("data.offset", offset),
            DataDistribution::Mixture { centers, weights, .. } => {
                if centers.is_empty() || centers.len() != weights.len() {
                    return Err(Error::config(
                        "data.weights",
                        format!("{} centers but {} weights", centers.len(), weights.len()),
                    ));
                }
                for c in centers {
                    check_len("data.centers", c)?;
                }
                if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || weights.iter().sum::<f64>() <= 0.0 {
                    return Err(Error::config("data.weights", "must be >= 0 with a positive sum"));
                }
                Ok(())
            }
        }
    }

    /// Draws `n` columns.
    pub(crate) fn sample<R: Rng>(&self, feature_dim: usize, n: usize, rng: &mut R) -> Array2<f64> {
        let mut out = Array2::zeros((feature_dim, n));
        let picker = match self {
            DataDistribution::Mixture { weights, .. } => Some(WeightedIndex::new(weights).expect("validated weights")),
            _ => None,
        };
        for mut col in out.columns_mut() {
            let center: &[f64] = match self {
                DataDistribution::Gaussian { mean, .. } => mean,
                DataDistribution::ShiftedGaussian { offset, .. } => offset,
                DataDistribution::Mixture { centers, .. } => &centers[picker.as_ref().unwrap().sample(rng)],
            };
            let scale = self.scale();
            for (v, mu) in col.iter_mut().zip(center) {
                let z: f64 = StandardNormal.sample(rng);
                *v = mu + scale * z;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataSpec {
    pub client_id: usize,
    pub n_samples: usize,
    pub feature_dim: usize,
    pub distribution: DataDistribution,
    pub seed: u64,
}

impl ClientDataSpec {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::config("data.feature_dim", "must be >= 1"));
        }
        if self.n_samples == 0 {
            return Err(Error::config("data.n_samples", "must be >= 1"));
        }
        self.distribution.validate(self.feature_dim)
    }
}

/// Calibration inputs of one client, `feature_dim × n_samples`.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub client_id: usize,
    pub samples: Array2<f64>,
}

impl CalibrationSet {
    pub fn n_samples(&self) -> usize {
        self.samples.ncols()
    }

    pub fn feature_dim(&self) -> usize {
        self.samples.nrows()
    }
}

pub fn generate(spec: &ClientDataSpec) -> Result<CalibrationSet> {
    spec.validate()?;
    let mut rng = seed::rng(spec.seed, &[]);
    let samples = spec.distribution.sample(spec.feature_dim, spec.n_samples, &mut rng);
    Ok(CalibrationSet {
        client_id: spec.client_id,
        samples,
    })
}

/// Inputs seen by layer `layer_index` when the dense model runs on `data`.
pub fn layer_inputs(model: &LayeredModel, data: &CalibrationSet, layer_index: usize) -> Result<Array2<f64>> {
    if layer_index >= model.num_layers() {
        return Err(Error::IndexOutOfRange {
            what: "layer",
            index: layer_index,
            len: model.num_layers(),
        });
    }
    model.forward_prefix(&data.samples, layer_index)
}

/// Inputs for every layer of the dense model.
pub fn all_layer_inputs(model: &LayeredModel, data: &CalibrationSet) -> Result<Vec<Array2<f64>>> {
    (0..model.num_layers()).map(|j| layer_inputs(model, data, j)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, WeightMatrix};
    use ndarray::{array, Axis};

    fn spec(distribution: DataDistribution, seed: u64) -> ClientDataSpec {
        ClientDataSpec {
            client_id: 0,
            n_samples: 32,
            feature_dim: 16,
            distribution,
            seed,
        }
    }

    #[test]
    fn deterministic_and_shaped() {
        let s = spec(
            DataDistribution::Gaussian {
                mean: vec![0.0; 16],
                scale: 1.0,
            },
            7,
        );
        let a = generate(&s).unwrap();
        let b = generate(&s).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.samples.dim(), (16, 32));
        assert!(a.samples.iter().all(|v| v.is_finite()));
        let c = generate(&ClientDataSpec { seed: 8, ..s }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn shifted_mean_within_lln_bound() {
        // per-coordinate sample mean ~ N(mu, sigma²/n): 3σ/√n band
        let offset: Vec<f64> = (0..16).map(|i| i as f64 * 0.25 - 2.0).collect();
        let sigma = 1.5;
        let mut s = spec(
            DataDistribution::ShiftedGaussian {
                offset: offset.clone(),
                scale: sigma,
            },
            3,
        );
        s.n_samples = 400;
        let data = generate(&s).unwrap();
        let mean = data.samples.mean_axis(Axis(1)).unwrap();
        let bound = 3.0 * sigma / (400f64).sqrt();
        let inside = mean.iter().zip(&offset).filter(|(m, mu)| (*m - *mu).abs() <= bound).count();
        // 16 coordinates at 99.7% each: allow one excursion
        assert!(inside >= 15, "{inside}/16 coordinates inside the 3σ/√n band");
    }

    #[test]
    fn distinct_offsets_give_distinct_means() {
        let a = generate(&spec(
            DataDistribution::ShiftedGaussian {
                offset: vec![1.0; 16],
                scale: 1.0,
            },
            1,
        ))
        .unwrap();
        let b = generate(&spec(
            DataDistribution::ShiftedGaussian {
                offset: vec![-1.0; 16],
                scale: 1.0,
            },
            2,
        ))
        .unwrap();
        let ma = a.samples.mean_axis(Axis(1)).unwrap();
        let mb = b.samples.mean_axis(Axis(1)).unwrap();
        assert!((&ma - &mb).mapv(|v| v * v).sum().sqrt() > 0.0);
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = spec(
            DataDistribution::Gaussian {
                mean: vec![],
                scale: 1.0,
            },
            1,
        );
        s.feature_dim = 0;
        assert!(generate(&s).is_err());
        let s = spec(
            DataDistribution::Gaussian {
                mean: vec![0.0; 3],
                scale: 1.0,
            },
            1,
        );
        assert!(generate(&s).is_err());
        let s = spec(
            DataDistribution::Mixture {
                centers: vec![vec![0.0; 16]],
                weights: vec![0.0],
                scale: 1.0,
            },
            1,
        );
        assert!(generate(&s).is_err());
    }

    #[test]
    fn layer_inputs_chain() {
        let model = LayeredModel::random("m", &[4, 3, 5, 2], Activation::Identity, 5).unwrap();
        let data = generate(&ClientDataSpec {
            client_id: 1,
            n_samples: 6,
            feature_dim: 4,
            distribution: DataDistribution::Gaussian {
                mean: vec![0.5; 4],
                scale: 1.0,
            },
            seed: 2,
        })
        .unwrap();
        assert_eq!(layer_inputs(&model, &data, 0).unwrap(), data.samples);
        let w0 = model.layers()[0].values();
        let w1 = model.layers()[1].values();
        let x1 = layer_inputs(&model, &data, 1).unwrap();
        assert!((&x1 - &w0.dot(&data.samples)).iter().all(|v| v.abs() < 1e-12));

        // scalar triple loop for W1·(W0·X)
        let x2 = layer_inputs(&model, &data, 2).unwrap();
        for r in 0..5 {
            for s in 0..6 {
                let mut acc = 0.0;
                for k in 0..3 {
                    for c in 0..4 {
                        acc += w1[[r, k]] * w0[[k, c]] * data.samples[[c, s]];
                    }
                }
                assert!((x2[[r, s]] - acc).abs() < 1e-12);
            }
        }
        assert!(layer_inputs(&model, &data, 3).is_err());
    }

    #[test]
    fn layer_inputs_ignore_later_pruning() {
        let model = LayeredModel::new(
            "m",
            Activation::Relu,
            vec![
                WeightMatrix::new(array![[1.0, -1.0], [2.0, 0.5]]).unwrap(),
                WeightMatrix::new(array![[1.0, 1.0]]).unwrap(),
            ],
        )
        .unwrap();
        let data = CalibrationSet {
            client_id: 0,
            samples: array![[1.0, 0.0], [0.0, 1.0]],
        };
        let before = layer_inputs(&model, &data, 1).unwrap();
        let pruned = model
            .with_layers(vec![model.layers()[0].clone(), WeightMatrix::zeros(1, 2)])
            .unwrap();
        assert_eq!(layer_inputs(&pruned, &data, 1).unwrap(), before);
        assert_eq!(before, array![[1.0, 0.0], [2.0, 0.5]]);
    }
}
