//! Multi-task sparse variational GP with a linear model of coregionalization
//! over deep-kernel features.
//!
//! Each task `tau` is `f_tau(d) = sum_q a[tau, q] h_q(g(d, w))`, where the `h_q`
//! are independent GPs with ARD RBF kernels sharing one set of inducing inputs
//! `Z` in feature space. Every `h_q` carries its own non-whitened variational
//! posterior `q(u_q) = N(m_q, L_q L_q^T)` over `h_q(Z)`.

pub mod baseline;
pub mod checkpoint;
pub mod elbo;
pub mod kernel;
pub mod predict;
pub mod train;

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{NormalizationStats, ResidualDataset, FEATURE_DIM, TARGET_DIM};
use crate::deep_kernel::{mlp_init, MlpConfig, MlpParams};
use crate::error::{Error, Result};

pub use elbo::{elbo, elbo_gradients, ElboValue};
pub use kernel::{jittered_cholesky, kernel_matrix, kl_gaussians, rbf_kernel, KernelHyper};
pub use predict::{
    lmc_cross_covariance, predictive_distribution, PreparedModel, ResidualPrediction,
};
pub use train::{train, EpochRecord, TrainOptions, Trainable};

/// Number of residual tasks: `(eps_vx, eps_vy, eps_omega)`.
pub const NUM_TASKS: usize = TARGET_DIM;

pub const DEFAULT_JITTER: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MtgpConfig {
    /// Latent functions `Q`.
    #[serde(default = "default_latents")]
    pub num_latents: usize,
    /// Inducing inputs `M`.
    #[serde(default = "default_inducing")]
    pub num_inducing: usize,
    #[serde(default = "default_jitter")]
    pub jitter: f64,
}

fn default_latents() -> usize {
    3
}

fn default_inducing() -> usize {
    100
}

fn default_jitter() -> f64 {
    DEFAULT_JITTER
}

impl Default for MtgpConfig {
    fn default() -> Self {
        MtgpConfig {
            num_latents: default_latents(),
            num_inducing: default_inducing(),
            jitter: default_jitter(),
        }
    }
}

/// Mixing coefficients `a` (`T × Q`); `A_q = a[:, q] a[:, q]^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct LmcStructure {
    pub mixing: DMatrix<f64>,
}

impl LmcStructure {
    pub fn num_tasks(&self) -> usize {
        self.mixing.nrows()
    }

    pub fn num_latents(&self) -> usize {
        self.mixing.ncols()
    }

    pub fn coregionalization(&self, q: usize) -> DMatrix<f64> {
        let col = self.mixing.column(q);
        col * col.transpose()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariationalParams {
    /// Inducing inputs, one row per point (`M × f`).
    pub inducing: DMatrix<f64>,
    pub means: Vec<DVector<f64>>,
    /// Lower-triangular factors with positive diagonals.
    pub chols: Vec<DMatrix<f64>>,
}

impl VariationalParams {
    pub fn num_inducing(&self) -> usize {
        self.inducing.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseParams {
    pub log_variance: Vec<f64>,
}

impl NoiseParams {
    pub fn variance(&self, task: usize) -> f64 {
        self.log_variance[task].exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DkmgpModel {
    pub mlp: MlpParams,
    pub kernels: Vec<KernelHyper>,
    pub lmc: LmcStructure,
    pub variational: VariationalParams,
    pub noise: NoiseParams,
    pub input_stats: NormalizationStats,
    pub target_stats: NormalizationStats,
    /// Correction horizon `n` the residual targets were built for.
    pub horizon: usize,
    pub jitter: f64,
}

/// Parameter blocks, in flattening order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Mlp,
    Kernel,
    Mixing,
    Inducing,
    VariationalMean,
    VariationalChol,
    Noise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSegment {
    pub group: ParamGroup,
    pub name: String,
    pub range: Range<usize>,
}

/// Names the entries of [`DkmgpModel::flatten`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub segments: Vec<ParamSegment>,
    pub len: usize,
}

impl ParamLayout {
    pub fn locate(&self, index: usize) -> Option<&ParamSegment> {
        self.segments.iter().find(|s| s.range.contains(&index))
    }

    pub fn group_mask(&self, include: impl Fn(ParamGroup) -> bool) -> Vec<bool> {
        let mut mask = vec![false; self.len];
        for s in &self.segments {
            if include(s.group) {
                mask[s.range.clone()].iter_mut().for_each(|m| *m = true);
            }
        }
        mask
    }
}

impl DkmgpModel {
    /// Builds an untrained model.
    ///
    /// Lengthscales and signal variances start at 1, noise variances at 0.01,
    /// mixing entries are drawn from `N(0, 0.5^2)`, `Z` is the deep features of
    /// a random subset of `train`, `m_q = 0` and `L_q = I`.
    pub fn new(
        mlp_config: &MlpConfig,
        config: &MtgpConfig,
        train: &ResidualDataset,
        seed: u64,
    ) -> Result<Self> {
        if config.num_latents == 0 || config.num_inducing == 0 {
            return Err(Error::InvalidArgument(
                "num_latents and num_inducing must be >= 1".into(),
            ));
        }
        if train.len() < config.num_inducing {
            return Err(Error::InsufficientData(format!(
                "{} training samples cannot seed {} inducing points",
                train.len(),
                config.num_inducing
            )));
        }
        let mlp = mlp_init(mlp_config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picks = sample(&mut rng, train.len(), config.num_inducing).into_vec();
        picks.sort_unstable();
        let mut inputs = DMatrix::zeros(FEATURE_DIM, picks.len());
        for (c, &i) in picks.iter().enumerate() {
            inputs
                .column_mut(c)
                .copy_from_slice(&train.samples[i].input);
        }
        let features = mlp.forward_batch(&inputs)?.output().transpose();

        let mixing_dist = Normal::new(0.0, 0.5).expect("valid std");
        let mixing = DMatrix::from_fn(NUM_TASKS, config.num_latents, |_, _| {
            mixing_dist.sample(&mut rng)
        });
        Self::from_parts(
            mlp,
            features,
            LmcStructure { mixing },
            config.jitter,
            train.input_stats.clone(),
            train.target_stats.clone(),
            train.horizon,
        )
    }

    /// Model with default hyperparameters around the given MLP, inducing
    /// inputs and mixing matrix.
    pub fn from_parts(
        mlp: MlpParams,
        inducing: DMatrix<f64>,
        lmc: LmcStructure,
        jitter: f64,
        input_stats: NormalizationStats,
        target_stats: NormalizationStats,
        horizon: usize,
    ) -> Result<Self> {
        let f = mlp.output_dim();
        if inducing.ncols() != f {
            return Err(Error::DimensionMismatch {
                expected: f,
                got: inducing.ncols(),
            });
        }
        let q = lmc.num_latents();
        let m = inducing.nrows();
        let tasks = lmc.num_tasks();
        if target_stats.dim() != tasks {
            return Err(Error::DimensionMismatch {
                expected: tasks,
                got: target_stats.dim(),
            });
        }
        Ok(DkmgpModel {
            mlp,
            kernels: vec![KernelHyper::new(&vec![1.0; f], 1.0); q],
            lmc,
            variational: VariationalParams {
                inducing,
                means: vec![DVector::zeros(m); q],
                chols: vec![DMatrix::identity(m, m); q],
            },
            noise: NoiseParams {
                log_variance: vec![0.01f64.ln(); tasks],
            },
            input_stats,
            target_stats,
            horizon,
            jitter,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.lmc.num_tasks()
    }

    pub fn num_latents(&self) -> usize {
        self.lmc.num_latents()
    }

    pub fn num_inducing(&self) -> usize {
        self.variational.num_inducing()
    }

    pub fn feature_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    /// Deep features of normalized inputs given as columns; returns rows.
    pub fn features(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.mlp.forward_batch(inputs)?.output().transpose())
    }

    pub fn layout(&self) -> ParamLayout {
        let mut segments = Vec::new();
        let mut at = 0;
        let mut push = |group, name: String, len: usize| {
            segments.push(ParamSegment {
                group,
                name,
                range: at..at + len,
            });
            at += len;
        };
        for (i, l) in self.mlp.layers.iter().enumerate() {
            push(ParamGroup::Mlp, format!("mlp.{i}.weights"), l.weights.len());
            push(ParamGroup::Mlp, format!("mlp.{i}.bias"), l.bias.len());
        }
        for (q, k) in self.kernels.iter().enumerate() {
            push(
                ParamGroup::Kernel,
                format!("kernel.{q}.log_lengthscales"),
                k.dim(),
            );
            push(ParamGroup::Kernel, format!("kernel.{q}.log_variance"), 1);
        }
        push(ParamGroup::Mixing, "mixing".into(), self.lmc.mixing.len());
        push(
            ParamGroup::Inducing,
            "inducing".into(),
            self.variational.inducing.len(),
        );
        let m = self.num_inducing();
        for q in 0..self.num_latents() {
            push(ParamGroup::VariationalMean, format!("mean.{q}"), m);
        }
        for q in 0..self.num_latents() {
            push(
                ParamGroup::VariationalChol,
                format!("chol.{q}"),
                m * (m + 1) / 2,
            );
        }
        push(
            ParamGroup::Noise,
            "noise.log_variance".into(),
            self.num_tasks(),
        );
        ParamLayout { segments, len: at }
    }

    /// All trainable values in [`ParamLayout`] order. Cholesky diagonals
    /// appear as logs so the vector is unconstrained.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.mlp.flatten();
        for k in &self.kernels {
            out.extend_from_slice(&k.log_lengthscales);
            out.push(k.log_variance);
        }
        out.extend_from_slice(self.lmc.mixing.as_slice());
        out.extend_from_slice(self.variational.inducing.as_slice());
        for m in &self.variational.means {
            out.extend_from_slice(m.as_slice());
        }
        for l in &self.variational.chols {
            push_lower(l, true, &mut out);
        }
        out.extend_from_slice(&self.noise.log_variance);
        out
    }

    pub fn unflatten(&mut self, values: &[f64]) -> Result<()> {
        let expected = self.layout().len;
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: values.len(),
            });
        }
        let mut k = self.mlp.unflatten(values);
        for h in &mut self.kernels {
            let f = h.dim();
            h.log_lengthscales.copy_from_slice(&values[k..k + f]);
            h.log_variance = values[k + f];
            k += f + 1;
        }
        let n = self.lmc.mixing.len();
        self.lmc
            .mixing
            .as_mut_slice()
            .copy_from_slice(&values[k..k + n]);
        k += n;
        let n = self.variational.inducing.len();
        self.variational
            .inducing
            .as_mut_slice()
            .copy_from_slice(&values[k..k + n]);
        k += n;
        for m in &mut self.variational.means {
            let n = m.len();
            m.as_mut_slice().copy_from_slice(&values[k..k + n]);
            k += n;
        }
        for l in &mut self.variational.chols {
            k += read_lower(l, &values[k..]);
        }
        let t = self.noise.log_variance.len();
        self.noise.log_variance.copy_from_slice(&values[k..k + t]);
        Ok(())
    }
}

/// Lower triangle column by column; diagonal as `ln` when `log_diag`.
pub(crate) fn push_lower(l: &DMatrix<f64>, log_diag: bool, out: &mut Vec<f64>) {
    let m = l.nrows();
    for c in 0..m {
        for r in c..m {
            let v = l[(r, c)];
            out.push(if r == c && log_diag { v.ln() } else { v });
        }
    }
}

fn read_lower(l: &mut DMatrix<f64>, values: &[f64]) -> usize {
    let m = l.nrows();
    let mut k = 0;
    l.fill(0.0);
    for c in 0..m {
        for r in c..m {
            l[(r, c)] = if r == c { values[k].exp() } else { values[k] };
            k += 1;
        }
    }
    k
}
