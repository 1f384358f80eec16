use nalgebra::{DMatrix, DVector};

use super::kernel::{jittered_cholesky, kernel_matrix, rbf_unchecked};
use super::DkmgpModel;
use crate::dataset::{denormalize, normalize, FEATURE_DIM, TARGET_DIM};
use crate::deep_kernel::mlp_forward;
use crate::error::{Error, Result};

/// Predictive marginals for the three residual tasks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualPrediction {
    /// Mean in normalized target space.
    pub mean_normalized: [f64; TARGET_DIM],
    /// Variance in normalized target space, observation noise included.
    pub var_normalized: [f64; TARGET_DIM],
    /// Mean in physical units, ready to add to `(vx, vy, omega)`.
    pub mean: [f64; TARGET_DIM],
    /// Variance in physical units; NaN when the model does not provide one.
    pub variance: [f64; TARGET_DIM],
}

struct PreparedLatent {
    alpha: DVector<f64>,
    /// `K^-1 S K^-1 - K^-1`.
    var_form: DMatrix<f64>,
    variance: f64,
    inv_sq: Vec<f64>,
}

/// A model with the per-latent solves cached for repeated queries.
pub struct PreparedModel {
    model: DkmgpModel,
    latents: Vec<PreparedLatent>,
}

impl PreparedModel {
    pub fn new(model: DkmgpModel) -> Result<Self> {
        if model.num_tasks() != TARGET_DIM {
            return Err(Error::DimensionMismatch {
                expected: TARGET_DIM,
                got: model.num_tasks(),
            });
        }
        let z = &model.variational.inducing;
        let mut latents = Vec::with_capacity(model.num_latents());
        for q in 0..model.num_latents() {
            let hyper = &model.kernels[q];
            let kzz = kernel_matrix(hyper, z, z);
            let kinv = jittered_cholesky(&kzz, model.jitter)?.inverse();
            let lq = &model.variational.chols[q];
            let s = lq * lq.transpose();
            let alpha = &kinv * &model.variational.means[q];
            let var_form = &kinv * s * &kinv - &kinv;
            latents.push(PreparedLatent {
                alpha,
                var_form,
                variance: hyper.variance(),
                inv_sq: hyper.inv_sq_lengthscales(),
            });
        }
        Ok(PreparedModel { model, latents })
    }

    pub fn model(&self) -> &DkmgpModel {
        &self.model
    }

    pub fn horizon(&self) -> usize {
        self.model.horizon
    }

    /// Latent means and variances at one deep feature vector.
    fn latent_marginals(&self, feature: &[f64]) -> Vec<(f64, f64)> {
        let z = &self.model.variational.inducing;
        let m = z.nrows();
        let mut zrow = vec![0.0; feature.len()];
        self.latents
            .iter()
            .map(|lat| {
                let k = DVector::from_fn(m, |j, _| {
                    for (d, v) in zrow.iter_mut().enumerate() {
                        *v = z[(j, d)];
                    }
                    rbf_unchecked(lat.variance, &lat.inv_sq, feature, &zrow)
                });
                let mean = k.dot(&lat.alpha);
                let var = lat.variance + k.dot(&(&lat.var_form * &k));
                (mean, var.max(0.0))
            })
            .collect()
    }

    /// Predictive distribution at a raw (unnormalized) input `d = (s, u)`.
    pub fn predict(&self, d: &[f64]) -> Result<ResidualPrediction> {
        if d.len() != FEATURE_DIM {
            return Err(Error::DimensionMismatch {
                expected: FEATURE_DIM,
                got: d.len(),
            });
        }
        let x = normalize(d, &self.model.input_stats)?;
        let feature = mlp_forward(&self.model.mlp, &x)?;
        let marginals = self.latent_marginals(feature.as_slice());
        let mix = &self.model.lmc.mixing;
        let mut mean_n = [0.0; TARGET_DIM];
        let mut var_n = [0.0; TARGET_DIM];
        for t in 0..TARGET_DIM {
            for (q, (mu, v)) in marginals.iter().enumerate() {
                mean_n[t] += mix[(t, q)] * mu;
                var_n[t] += mix[(t, q)] * mix[(t, q)] * v;
            }
            var_n[t] += self.model.noise.variance(t);
        }
        let mean = denormalize(&mean_n, &self.model.target_stats)?;
        let std = &self.model.target_stats.std;
        Ok(ResidualPrediction {
            mean_normalized: mean_n,
            var_normalized: var_n,
            mean: [mean[0], mean[1], mean[2]],
            variance: std::array::from_fn(|t| var_n[t] * std[t] * std[t]),
        })
    }
}

/// One-off prediction; prefer [`PreparedModel`] for repeated queries.
pub fn predictive_distribution(model: &DkmgpModel, d: &[f64]) -> Result<ResidualPrediction> {
    PreparedModel::new(model.clone())?.predict(d)
}

/// Prior covariance `sum_q a[t, q] a[t2, q] k_q(g(d_i), g(d_j))` between two
/// tasks at two normalized inputs.
pub fn lmc_cross_covariance(
    model: &DkmgpModel,
    task: usize,
    task2: usize,
    d_i: &[f64],
    d_j: &[f64],
) -> Result<f64> {
    let t = model.num_tasks();
    if task >= t || task2 >= t {
        return Err(Error::InvalidArgument(format!(
            "task index out of range 0..{t}"
        )));
    }
    let fi = mlp_forward(&model.mlp, d_i)?;
    let fj = mlp_forward(&model.mlp, d_j)?;
    let mix = &model.lmc.mixing;
    let mut cov = 0.0;
    for (q, hyper) in model.kernels.iter().enumerate() {
        let k = rbf_unchecked(
            hyper.variance(),
            &hyper.inv_sq_lengthscales(),
            fi.as_slice(),
            fj.as_slice(),
        );
        cov += mix[(task, q)] * mix[(task2, q)] * k;
    }
    Ok(cov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mtgp::test_support::random_model;

    const D1: [f64; 9] = [0.1, -0.4, 1.2, 0.0, 0.3, -0.1, 0.5, 0.9, -1.0];
    const D2: [f64; 9] = [-0.6, 0.2, 0.4, 0.7, -1.1, 0.0, 0.2, -0.3, 0.8];

    #[test]
    fn zero_mean_model_predicts_zero() {
        let mut model = random_model(&[9, 4, 3], 2, 5, 3);
        model.variational.means.iter_mut().for_each(|m| m.fill(0.0));
        let p = predictive_distribution(&model, &D1).unwrap();
        assert_eq!(p.mean_normalized, [0.0; 3]);
        assert_eq!(p.mean, [0.0; 3]);
    }

    #[test]
    fn variance_includes_noise() {
        let model = random_model(&[9, 4, 3], 2, 5, 4);
        let prepared = PreparedModel::new(model.clone()).unwrap();
        for d in [D1, D2] {
            let p = prepared.predict(&d).unwrap();
            for t in 0..3 {
                assert!(p.var_normalized[t] >= model.noise.variance(t));
            }
        }
        assert!(prepared.predict(&[0.0; 8]).is_err());
    }

    #[test]
    fn cross_covariance_single_task_mixing() {
        let mut model = random_model(&[9, 3], 1, 3, 5);
        model.lmc.mixing = DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]);
        assert!(lmc_cross_covariance(&model, 0, 0, &D1, &D2).unwrap() > 0.0);
        for (a, b) in [(0, 1), (1, 1), (2, 0), (1, 2)] {
            assert_eq!(lmc_cross_covariance(&model, a, b, &D1, &D2).unwrap(), 0.0);
        }
        assert!(lmc_cross_covariance(&model, 3, 0, &D1, &D2).is_err());
    }

    #[test]
    fn cross_covariance_symmetry() {
        let model = random_model(&[9, 4, 3], 2, 3, 6);
        let a = lmc_cross_covariance(&model, 0, 2, &D1, &D2).unwrap();
        let b = lmc_cross_covariance(&model, 2, 0, &D2, &D1).unwrap();
        assert!((a - b).abs() < 1e-15);
    }
}
