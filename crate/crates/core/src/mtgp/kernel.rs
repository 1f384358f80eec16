//! ARD RBF kernel, jittered Cholesky, and the Gaussian KL divergence.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Used when the configured jitter alone does not make the matrix PD.
pub const RETRY_JITTER: f64 = 1e-4;

/// RBF hyperparameters of one latent function, stored as logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelHyper {
    pub log_lengthscales: Vec<f64>,
    pub log_variance: f64,
}

impl KernelHyper {
    pub fn new(lengthscales: &[f64], variance: f64) -> Self {
        KernelHyper {
            log_lengthscales: lengthscales.iter().map(|l| l.ln()).collect(),
            log_variance: variance.ln(),
        }
    }

    pub fn dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    pub fn variance(&self) -> f64 {
        self.log_variance.exp()
    }

    pub fn lengthscales(&self) -> Vec<f64> {
        self.log_lengthscales.iter().map(|l| l.exp()).collect()
    }

    /// `1 / l_j^2` per dimension.
    pub fn inv_sq_lengthscales(&self) -> Vec<f64> {
        self.log_lengthscales
            .iter()
            .map(|l| (-2.0 * l).exp())
            .collect()
    }
}

/// `s^2 exp(-1/2 sum_j (x_j - x'_j)^2 / l_j^2)`.
pub fn rbf_kernel(hyper: &KernelHyper, x: &[f64], x2: &[f64]) -> Result<f64> {
    if x.len() != hyper.dim() || x2.len() != hyper.dim() {
        return Err(Error::DimensionMismatch {
            expected: hyper.dim(),
            got: if x.len() != hyper.dim() {
                x.len()
            } else {
                x2.len()
            },
        });
    }
    Ok(rbf_unchecked(
        hyper.variance(),
        &hyper.inv_sq_lengthscales(),
        x,
        x2,
    ))
}

#[inline]
pub(crate) fn rbf_unchecked(variance: f64, inv_sq: &[f64], x: &[f64], x2: &[f64]) -> f64 {
    let mut r2 = 0.0;
    for ((a, b), w) in x.iter().zip(x2).zip(inv_sq) {
        let d = a - b;
        r2 += d * d * w;
    }
    variance * (-0.5 * r2).exp()
}

/// Kernel matrix between the rows of `a` (`n × f`) and the rows of `b` (`m × f`).
pub fn kernel_matrix(hyper: &KernelHyper, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let var = hyper.variance();
    let inv_sq = hyper.inv_sq_lengthscales();
    let f = hyper.dim();
    let mut out = DMatrix::zeros(a.nrows(), b.nrows());
    let mut xa = vec![0.0; f];
    let mut xb = vec![0.0; f];
    for j in 0..b.nrows() {
        for d in 0..f {
            xb[d] = b[(j, d)];
        }
        for i in 0..a.nrows() {
            for d in 0..f {
                xa[d] = a[(i, d)];
            }
            out[(i, j)] = rbf_unchecked(var, &inv_sq, &xa, &xb);
        }
    }
    out
}

/// Cholesky of `k + jitter I`, retrying once with [`RETRY_JITTER`].
pub fn jittered_cholesky(k: &DMatrix<f64>, jitter: f64) -> Result<Cholesky<f64, Dyn>> {
    let attempt = |j: f64| {
        let mut m = k.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += j;
        }
        Cholesky::new(m)
    };
    if let Some(c) = attempt(jitter) {
        return Ok(c);
    }
    let retry = RETRY_JITTER.max(jitter * 100.0);
    log::debug!("cholesky failed at jitter {jitter}, retrying at {retry}");
    attempt(retry).ok_or_else(|| {
        Error::CholeskyFailure(format!(
            "{}x{} matrix not positive definite even with jitter {retry}",
            k.nrows(),
            k.ncols()
        ))
    })
}

/// `KL(N(m, L L^T) || N(0, P))` where `prior_chol` is the Cholesky factor of `P`.
pub fn kl_gaussians(
    mean: &DVector<f64>,
    chol: &DMatrix<f64>,
    prior_chol: &DMatrix<f64>,
) -> Result<f64> {
    let m = mean.len();
    if chol.shape() != (m, m) || prior_chol.shape() != (m, m) {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: chol.nrows(),
        });
    }
    let lk = prior_chol;
    let solved = lk
        .solve_lower_triangular(&chol.lower_triangle())
        .ok_or_else(|| Error::CholeskyFailure("singular prior factor".into()))?;
    let alpha = lk
        .solve_lower_triangular(mean)
        .ok_or_else(|| Error::CholeskyFailure("singular prior factor".into()))?;
    let trace = solved.norm_squared();
    let maha = alpha.norm_squared();
    let logdet_prior: f64 = (0..m).map(|i| lk[(i, i)].ln()).sum::<f64>() * 2.0;
    let logdet_q: f64 = (0..m).map(|i| chol[(i, i)].abs().ln()).sum::<f64>() * 2.0;
    Ok(0.5 * (trace + maha - m as f64 + logdet_prior - logdet_q))
}
