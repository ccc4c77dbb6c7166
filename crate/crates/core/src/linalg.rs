//! Small dense symmetric positive-definite solves via Cholesky.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};

/// Pivots below this fraction of the largest diagonal entry count as singular.
const PIVOT_REL_TOL: f64 = 1e-12;

/// Lower-triangular Cholesky factor `L` with `A = L·Lᵀ`.
pub(crate) struct Cholesky {
    l: Array2<f64>,
}

impl Cholesky {
    pub(crate) fn factor(a: &Array2<f64>) -> Result<Self> {
        let n = a.nrows();
        debug_assert_eq!(n, a.ncols());
        let scale = a.diag().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        let mut l = Array2::<f64>::zeros((n, n));
        for j in 0..n {
            let mut d = a[[j, j]];
            for k in 0..j {
                d -= l[[j, k]] * l[[j, k]];
            }
            if !(d > PIVOT_REL_TOL * scale) {
                return Err(Error::Singular { index: j, pivot: d });
            }
            let d = d.sqrt();
            l[[j, j]] = d;
            for i in j + 1..n {
                let mut s = a[[i, j]];
                for k in 0..j {
                    s -= l[[i, k]] * l[[j, k]];
                }
                l[[i, j]] = s / d;
            }
        }
        Ok(Cholesky { l })
    }

    pub(crate) fn solve(&self, b: ArrayView1<'_, f64>) -> Array1<f64> {
        let n = self.l.nrows();
        let mut y = b.to_owned();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.l[[i, k]] * y[k];
            }
            y[i] = s / self.l[[i, i]];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= self.l[[k, i]] * y[k];
            }
            y[i] = s / self.l[[i, i]];
        }
        y
    }

    /// Diagonal of `A⁻¹`, i.e. the squared column norms of `L⁻¹`.
    pub(crate) fn inverse_diagonal(&self) -> Array1<f64> {
        let n = self.l.nrows();
        let mut diag = Array1::zeros(n);
        let mut col = vec![0.0; n];
        for e in 0..n {
            // forward-substitute L·col = e_e; entries above e stay zero
            col.iter_mut().for_each(|v| *v = 0.0);
            for i in e..n {
                let mut s = if i == e { 1.0 } else { 0.0 };
                for k in e..i {
                    s -= self.l[[i, k]] * col[k];
                }
                col[i] = s / self.l[[i, i]];
            }
            // A⁻¹ = L⁻ᵀ·L⁻¹, so (A⁻¹)_ee = ‖L⁻¹ e_e‖²
            diag[e] = col[e..].iter().map(|v| v * v).sum();
        }
        diag
    }
}

/// `X·Xᵀ` for a column-sample matrix.
pub(crate) fn gram(x: &Array2<f64>) -> Array2<f64> {
    x.dot(&x.t())
}
