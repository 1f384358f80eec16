//! Joint Adam training of MLP, kernel, mixing, variational and noise parameters.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::elbo::{elbo, elbo_gradients};
use super::{DkmgpModel, ParamGroup};
use crate::dataset::{ResidualDataset, ResidualSample};
use crate::error::{Error, Result};

/// Which parameter blocks receive updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trainable {
    pub mlp: bool,
    pub kernel: bool,
    pub mixing: bool,
    pub inducing: bool,
    pub variational: bool,
    pub noise: bool,
}

impl Default for Trainable {
    fn default() -> Self {
        Trainable {
            mlp: true,
            kernel: true,
            mixing: true,
            inducing: true,
            variational: true,
            noise: true,
        }
    }
}

impl Trainable {
    fn includes(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Mlp => self.mlp,
            ParamGroup::Kernel => self.kernel,
            ParamGroup::Mixing => self.mixing,
            ParamGroup::Inducing => self.inducing,
            ParamGroup::VariationalMean | ParamGroup::VariationalChol => self.variational,
            ParamGroup::Noise => self.noise,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Learning rate at the last epoch as a fraction of `learning_rate`,
    /// reached by cosine annealing. 1 keeps the rate constant.
    #[serde(default = "default_final_lr_fraction")]
    pub final_lr_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub trainable: Trainable,
}

fn default_lr() -> f64 {
    0.0064
}

fn default_batch() -> usize {
    144
}

fn default_epochs() -> usize {
    1140
}

fn default_final_lr_fraction() -> f64 {
    1.0
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            learning_rate: default_lr(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            final_lr_fraction: default_final_lr_fraction(),
            seed: 0,
            trainable: Trainable::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Full-dataset ELBO after the epoch's updates.
    pub elbo: f64,
    pub wall_ms: f64,
}

/// Adam ascent on a flat parameter vector (beta1 0.9, beta2 0.999, eps 1e-8).
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn new(len: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    /// Moves `params` along `grad` (maximization); masked-out entries stay put.
    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64], mask: &[bool]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for i in 0..params.len() {
            if !mask[i] {
                continue;
            }
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] += self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Cosine-annealed rate for a 1-based `epoch`.
pub fn epoch_learning_rate(opt: &TrainOptions, epoch: usize) -> f64 {
    let f = opt.final_lr_fraction;
    if opt.epochs <= 1 || f == 1.0 {
        return opt.learning_rate;
    }
    let progress = (epoch - 1) as f64 / (opt.epochs - 1) as f64;
    let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    opt.learning_rate * (f + (1.0 - f) * cosine)
}

/// Trains `model` on `train_set` with seeded minibatch shuffling.
pub fn train(
    mut model: DkmgpModel,
    train_set: &ResidualDataset,
    opt: &TrainOptions,
) -> Result<(DkmgpModel, Vec<EpochRecord>)> {
    if train_set.is_empty() {
        return Err(Error::InsufficientData("empty training set".into()));
    }
    if opt.batch_size == 0 || !(opt.learning_rate > 0.0) {
        return Err(Error::InvalidArgument(
            "batch_size and learning_rate must be positive".into(),
        ));
    }
    if !(opt.final_lr_fraction > 0.0 && opt.final_lr_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "final_lr_fraction must lie in (0, 1], got {}",
            opt.final_lr_fraction
        )));
    }
    let n = train_set.len();
    let mask = model.layout().group_mask(|g| opt.trainable.includes(g));
    let mut params = model.flatten();
    let mut adam = Adam::new(params.len(), opt.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(opt.epochs);
    let mut batch: Vec<ResidualSample> = Vec::with_capacity(opt.batch_size);

    for epoch in 1..=opt.epochs {
        let started = Instant::now();
        adam.set_learning_rate(epoch_learning_rate(opt, epoch));
        order.shuffle(&mut rng);
        for chunk in order.chunks(opt.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train_set.samples[i].clone()));
            let (value, grad) = elbo_gradients(&model, &batch, n)?;
            if !value.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch });
            }
            adam.ascend(&mut params, &grad, &mask);
            model.unflatten(&params)?;
        }
        let full = elbo(&model, &train_set.samples, n)?.total;
        if !full.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        let wall_ms = started.elapsed().as_secs_f64() * 1e3;
        log::debug!("epoch {epoch}: elbo {full:.4}");
        history.push(EpochRecord {
            epoch,
            elbo: full,
            wall_ms,
        });
    }
    Ok((model, history))
}

/// Writes `epoch,elbo,wall_ms`.
pub fn write_history_csv(history: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("epoch,elbo,wall_ms\n");
    for r in history {
        out.push_str(&format!("{},{},{:.3}\n", r.epoch, r.elbo, r.wall_ms));
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes())
        .map_err(|e| Error::io(path, e))
}
