//! Independent exact GP per residual task, single-step only. This is the
//! slow comparison point for the multi-task model.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use super::kernel::{jittered_cholesky, kernel_matrix, rbf_unchecked, KernelHyper};
use super::predict::ResidualPrediction;
use crate::dataset::{
    denormalize, normalize, NormalizationStats, ResidualDataset, FEATURE_DIM, TARGET_DIM,
};
use crate::error::{Error, Result};

/// Fixed hyperparameters shared by the three task GPs (normalized space).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    #[serde(default = "default_lengthscale")]
    pub lengthscale: f64,
    #[serde(default = "default_signal")]
    pub signal_variance: f64,
    #[serde(default = "default_noise")]
    pub noise_variance: f64,
}

fn default_lengthscale() -> f64 {
    1.5
}

fn default_signal() -> f64 {
    1.0
}

fn default_noise() -> f64 {
    0.01
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            lengthscale: default_lengthscale(),
            signal_variance: default_signal(),
            noise_variance: default_noise(),
        }
    }
}

/// Exact GP regression on normalized inputs for one scalar target.
#[derive(Debug, Clone)]
pub struct ExactGp {
    hyper: KernelHyper,
    noise_variance: f64,
    /// Training inputs, one row per point.
    inputs: DMatrix<f64>,
    alpha: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl ExactGp {
    /// Factorizes `K + noise I` and solves for the weights: O(N^3).
    pub fn fit(
        hyper: KernelHyper,
        noise_variance: f64,
        inputs: DMatrix<f64>,
        targets: &DVector<f64>,
    ) -> Result<Self> {
        if inputs.nrows() != targets.len() {
            return Err(Error::LengthMismatch {
                left: inputs.nrows(),
                right: targets.len(),
            });
        }
        if inputs.nrows() == 0 {
            return Err(Error::InsufficientData("exact GP needs data".into()));
        }
        let k = kernel_matrix(&hyper, &inputs, &inputs);
        let chol = jittered_cholesky(&k, noise_variance)?;
        let alpha = chol.solve(targets);
        Ok(ExactGp {
            hyper,
            noise_variance,
            inputs,
            alpha,
            chol,
        })
    }

    fn cross(&self, x: &[f64]) -> DVector<f64> {
        let var = self.hyper.variance();
        let inv_sq = self.hyper.inv_sq_lengthscales();
        let f = x.len();
        let mut row = vec![0.0; f];
        DVector::from_fn(self.inputs.nrows(), |j, _| {
            for (d, r) in row.iter_mut().enumerate() {
                *r = self.inputs[(j, d)];
            }
            rbf_unchecked(var, &inv_sq, x, &row)
        })
    }

    /// Posterior mean: O(N).
    pub fn predict_mean(&self, x: &[f64]) -> f64 {
        self.cross(x).dot(&self.alpha)
    }

    /// Posterior mean and latent variance: O(N^2).
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let k = self.cross(x);
        let mean = k.dot(&self.alpha);
        let v = self.chol.solve(&k);
        (mean, self.hyper.variance() - k.dot(&v))
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }
}

/// Three independent [`ExactGp`]s trained on single-step residuals.
#[derive(Debug, Clone)]
pub struct PerTaskExactGp {
    tasks: Vec<ExactGp>,
    input_stats: NormalizationStats,
    target_stats: NormalizationStats,
}

pub fn per_task_baseline_train(
    train_set: &ResidualDataset,
    config: &BaselineConfig,
) -> Result<PerTaskExactGp> {
    if train_set.horizon != 1 {
        return Err(Error::InvalidArgument(format!(
            "the per-task baseline is single-step; got horizon {}",
            train_set.horizon
        )));
    }
    let n = train_set.len();
    if n == 0 {
        return Err(Error::InsufficientData("empty training set".into()));
    }
    let inputs = DMatrix::from_fn(n, FEATURE_DIM, |i, d| train_set.samples[i].input[d]);
    let hyper = KernelHyper::new(&[config.lengthscale; FEATURE_DIM], config.signal_variance);
    let tasks = (0..TARGET_DIM)
        .map(|t| {
            let y = DVector::from_fn(n, |i, _| train_set.samples[i].target[t]);
            ExactGp::fit(hyper.clone(), config.noise_variance, inputs.clone(), &y)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PerTaskExactGp {
        tasks,
        input_stats: train_set.input_stats.clone(),
        target_stats: train_set.target_stats.clone(),
    })
}

impl PerTaskExactGp {
    pub fn tasks(&self) -> &[ExactGp] {
        &self.tasks
    }

    /// Mean correction at a raw input; variances are left as NaN so the
    /// per-query cost stays O(N).
    pub fn predict(&self, d: &[f64]) -> Result<ResidualPrediction> {
        let x = normalize(d, &self.input_stats)?;
        let mean_n: [f64; TARGET_DIM] = std::array::from_fn(|t| self.tasks[t].predict_mean(&x));
        let mean = denormalize(&mean_n, &self.target_stats)?;
        Ok(ResidualPrediction {
            mean_normalized: mean_n,
            var_normalized: [f64::NAN; TARGET_DIM],
            mean: [mean[0], mean[1], mean[2]],
            variance: [f64::NAN; TARGET_DIM],
        })
    }
}

pub fn per_task_baseline_predict(model: &PerTaskExactGp, d: &[f64]) -> Result<ResidualPrediction> {
    model.predict(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_free_interpolation() {
        let xs = [-2.0, -0.7, 0.1, 1.0, 2.4];
        let inputs = DMatrix::from_column_slice(5, 1, &xs);
        let y = DVector::from_iterator(5, xs.iter().map(|x: &f64| x.sin()));
        let gp = ExactGp::fit(KernelHyper::new(&[1.0], 1.0), 1e-10, inputs, &y).unwrap();
        for (i, x) in xs.iter().enumerate() {
            assert!((gp.predict_mean(&[*x]) - y[i]).abs() < 1e-6);
            let (m, v) = gp.predict(&[*x]);
            assert!((m - y[i]).abs() < 1e-6);
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn fit_rejects_mismatched_lengths() {
        let inputs = DMatrix::zeros(3, 1);
        let y = DVector::zeros(2);
        assert!(ExactGp::fit(KernelHyper::new(&[1.0], 1.0), 0.1, inputs, &y).is_err());
    }
}
