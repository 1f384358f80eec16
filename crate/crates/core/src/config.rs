//! TOML run configuration and seed derivation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{ManeuverSegment, ManeuverSpec};
use crate::deep_kernel::{Activation, MlpConfig};
use crate::dynamics::{PacejkaAxleParams, VehicleParams, VehicleState, DEFAULT_DT};
use crate::error::{Error, Result};
use crate::mtgp::baseline::BaselineConfig;
use crate::mtgp::{MtgpConfig, TrainOptions, Trainable};
use crate::predictor::AchThresholds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TireConfig {
    pub front: PacejkaAxleParams,
    pub rear: PacejkaAxleParams,
}

impl Default for TireConfig {
    fn default() -> Self {
        TireConfig {
            front: PacejkaAxleParams {
                b: 10.0,
                c: 1.5,
                d: 7000.0,
                e: 0.6,
                svy: 0.0,
                shy: 0.0,
            },
            rear: PacejkaAxleParams {
                b: 14.0,
                c: 1.5,
                d: 9000.0,
                e: 0.6,
                svy: 0.0,
                shy: 0.0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_duration")]
    pub duration: f64,
    #[serde(default = "default_maneuver")]
    pub maneuver: ManeuverSpec,
}

fn default_dt() -> f64 {
    DEFAULT_DT
}

fn default_duration() -> f64 {
    60.0
}

fn seg(duration: f64, ax: f64, delta_dot: f64) -> ManeuverSegment {
    ManeuverSegment {
        duration,
        ax,
        delta_dot,
    }
}

/// Half of a closed oval lap, cycled: a straight, a short brake, then a
/// constant-radius left turn of roughly pi radians and a powered exit.
pub fn default_maneuver() -> ManeuverSpec {
    ManeuverSpec {
        initial: VehicleState {
            x: 0.0,
            y: 0.0,
            vx: 37.0,
            vy: 0.0,
            psi: 0.0,
            delta: 0.0,
            omega: 0.0,
        },
        segments: vec![
            seg(4.0, 0.2, 0.0),
            seg(0.6, -3.0, 0.0),
            seg(1.0, 0.0, 0.03),
            seg(9.7, 0.04, 0.0),
            seg(1.0, 0.6, -0.03),
        ],
        noise_std: [0.0; 7],
        wrap_heading: true,
    }
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            dt: default_dt(),
            duration: default_duration(),
            maneuver: default_maneuver(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default = "default_horizons")]
    pub horizons: Vec<usize>,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
}

fn default_horizons() -> Vec<usize> {
    vec![3, 5, 10, 15]
}

fn default_train_fraction() -> f64 {
    0.7
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            horizons: default_horizons(),
            train_fraction: default_train_fraction(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSection {
    #[serde(default = "default_layers")]
    pub layer_sizes: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

fn default_layers() -> Vec<usize> {
    MlpConfig::default().layer_sizes
}

impl Default for MlpSection {
    fn default() -> Self {
        MlpSection {
            layer_sizes: default_layers(),
            activation: Activation::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Cosine-annealing floor as a fraction of `learning_rate`; 1 disables it.
    #[serde(default = "default_final_lr_fraction")]
    pub final_lr_fraction: f64,
    #[serde(default)]
    pub trainable: Trainable,
}

fn default_lr() -> f64 {
    TrainOptions::default().learning_rate
}

fn default_batch() -> usize {
    TrainOptions::default().batch_size
}

fn default_epochs() -> usize {
    TrainOptions::default().epochs
}

fn default_final_lr_fraction() -> f64 {
    TrainOptions::default().final_lr_fraction
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            learning_rate: default_lr(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            final_lr_fraction: default_final_lr_fraction(),
            trainable: Trainable::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictConfig {
    /// Steps per rollout.
    #[serde(default = "default_m")]
    pub horizon: usize,
    #[serde(default = "default_stride")]
    pub anchor_stride: usize,
}

fn default_m() -> usize {
    43
}

fn default_stride() -> usize {
    1
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            horizon: default_m(),
            anchor_stride: default_stride(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    /// Rollouts timed per repeat.
    #[serde(default = "default_bench_anchors")]
    pub anchors: usize,
    #[serde(default = "default_true")]
    pub include_baseline: bool,
    /// The baseline is timed on fewer rollouts.
    #[serde(default = "default_baseline_anchors")]
    pub baseline_anchors: usize,
}

fn default_repeats() -> usize {
    5
}

fn default_bench_anchors() -> usize {
    50
}

fn default_baseline_anchors() -> usize {
    5
}

fn default_true() -> bool {
    true
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            repeats: default_repeats(),
            anchors: default_bench_anchors(),
            include_baseline: true,
            baseline_anchors: default_baseline_anchors(),
        }
    }
}

/// Everything one pipeline run needs. Every section is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Output directory; relative paths resolve against the working directory.
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub vehicle: VehicleParams,
    #[serde(default)]
    pub tire: TireConfig,
    #[serde(default)]
    pub simulate: SimulateConfig,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub mlp: MlpSection,
    #[serde(default)]
    pub mtgp: MtgpConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub ach: AchThresholds,
    #[serde(default)]
    pub predict: PredictConfig,
    #[serde(default)]
    pub baseline: BaselineConfig,
    #[serde(default)]
    pub bench: BenchConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)
            .map_err(|e| Error::ConfigError(e.to_string().lines().collect::<Vec<_>>().join(" ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::ConfigError(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |key: &str, msg: String| Err(Error::ConfigError(format!("{key}: {msg}")));
        let wrap =
            |key: &str, r: Result<()>| r.map_err(|e| Error::ConfigError(format!("{key}: {e}")));
        wrap("vehicle", self.vehicle.validate())?;
        wrap("tire.front", self.tire.front.validate())?;
        wrap("tire.rear", self.tire.rear.validate())?;
        if !(self.simulate.dt > 0.0) {
            return cfg_err("simulate.dt", "must be positive".into());
        }
        if !(self.simulate.duration >= self.simulate.dt) {
            return cfg_err("simulate.duration", "must be at least dt".into());
        }
        if self.simulate.maneuver.segments.is_empty() {
            return cfg_err("simulate.maneuver.segments", "must not be empty".into());
        }
        if self.dataset.horizons.is_empty() || self.dataset.horizons.contains(&0) {
            return cfg_err(
                "dataset.horizons",
                "must be a nonempty list of n >= 1".into(),
            );
        }
        let tf = self.dataset.train_fraction;
        if !(tf > 0.0 && tf < 1.0) {
            return cfg_err(
                "dataset.train_fraction",
                format!("must lie in (0, 1), got {tf}"),
            );
        }
        wrap("mlp.layer_sizes", self.mlp_config(0).validate())?;
        if self.mtgp.num_latents == 0 {
            return cfg_err("mtgp.num_latents", "must be >= 1".into());
        }
        if self.mtgp.num_inducing == 0 {
            return cfg_err("mtgp.num_inducing", "must be >= 1".into());
        }
        if !(self.mtgp.jitter > 0.0) {
            return cfg_err("mtgp.jitter", "must be positive".into());
        }
        if !(self.train.learning_rate > 0.0) {
            return cfg_err("train.learning_rate", "must be positive".into());
        }
        let f = self.train.final_lr_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return cfg_err(
                "train.final_lr_fraction",
                format!("must lie in (0, 1], got {f}"),
            );
        }
        if self.train.batch_size == 0 {
            return cfg_err("train.batch_size", "must be >= 1".into());
        }
        wrap("ach", self.ach.validate())?;
        if self.predict.horizon == 0 {
            return cfg_err("predict.horizon", "must be >= 1".into());
        }
        if self.predict.anchor_stride == 0 {
            return cfg_err("predict.anchor_stride", "must be >= 1".into());
        }
        let b = &self.baseline;
        if !(b.lengthscale > 0.0 && b.signal_variance > 0.0 && b.noise_variance > 0.0) {
            return cfg_err("baseline", "hyperparameters must be positive".into());
        }
        if self.bench.repeats == 0 || self.bench.anchors == 0 || self.bench.baseline_anchors == 0 {
            return cfg_err("bench", "repeats and anchor counts must be >= 1".into());
        }
        Ok(())
    }

    pub fn mlp_config(&self, seed: u64) -> MlpConfig {
        MlpConfig {
            layer_sizes: self.mlp.layer_sizes.clone(),
            activation: self.mlp.activation,
            seed,
        }
    }

    pub fn train_options(&self, seed: u64) -> TrainOptions {
        TrainOptions {
            learning_rate: self.train.learning_rate,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            final_lr_fraction: self.train.final_lr_fraction,
            seed,
            trainable: self.train.trainable,
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    /// First log index used for evaluation rollouts: past every training
    /// target of every horizon.
    pub fn first_eval_anchor(&self, log_len: usize) -> usize {
        let max_n = self.dataset.horizons.iter().copied().max().unwrap_or(0);
        (self.dataset.train_fraction * log_len as f64).floor() as usize + max_n
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Seed for the named component: SplitMix64 of `seed XOR FNV-1a(name)`.
///
/// Names used by the pipeline: `simulate`, `mlp/n<h>`, `init/n<h>`,
/// `train/n<h>`.
pub fn sub_seed(seed: u64, name: &str) -> u64 {
    let mut h = FNV_OFFSET;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    let mut z = (seed ^ h).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
