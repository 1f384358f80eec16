//! Versioned JSON checkpoints. Float arrays are base64 of little-endian f64
//! bytes, so a save/load cycle is bit-exact.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::kernel::KernelHyper;
use super::{DkmgpModel, LmcStructure, NoiseParams, VariationalParams};
use crate::dataset::NormalizationStats;
use crate::deep_kernel::{Activation, Layer, MlpParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

/// Column-major matrix payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayRecord {
    pub rows: usize,
    pub cols: usize,
    pub data: String,
}

impl ArrayRecord {
    pub fn encode(rows: usize, cols: usize, values: &[f64]) -> Self {
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        ArrayRecord {
            rows,
            cols,
            data: STANDARD.encode(bytes),
        }
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        Self::encode(m.nrows(), m.ncols(), m.as_slice())
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::encode(v.len(), 1, v)
    }

    pub fn decode(&self, what: &str) -> Result<Vec<f64>> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| Error::SchemaError(format!("{what}: invalid base64: {e}")))?;
        if bytes.len() != self.rows * self.cols * 8 {
            return Err(Error::SchemaError(format!(
                "{what}: expected {} values, found {} bytes",
                self.rows * self.cols,
                bytes.len()
            )));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }

    pub fn to_matrix(&self, what: &str) -> Result<DMatrix<f64>> {
        Ok(DMatrix::from_vec(self.rows, self.cols, self.decode(what)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRecord {
    weights: ArrayRecord,
    bias: ArrayRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KernelRecord {
    log_lengthscales: ArrayRecord,
    log_variance: ArrayRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StatsRecord {
    mean: ArrayRecord,
    std: ArrayRecord,
    degenerate: Vec<bool>,
}

impl StatsRecord {
    fn from_stats(s: &NormalizationStats) -> Self {
        StatsRecord {
            mean: ArrayRecord::from_slice(&s.mean),
            std: ArrayRecord::from_slice(&s.std),
            degenerate: s.degenerate.clone(),
        }
    }

    fn to_stats(&self, what: &str) -> Result<NormalizationStats> {
        let mean = self.mean.decode(what)?;
        let std = self.std.decode(what)?;
        if std.len() != mean.len() || self.degenerate.len() != mean.len() {
            return Err(Error::SchemaError(format!("{what}: inconsistent lengths")));
        }
        Ok(NormalizationStats {
            mean,
            std,
            degenerate: self.degenerate.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    schema_version: u32,
    horizon: usize,
    jitter: ArrayRecord,
    activation: Activation,
    mlp: Vec<LayerRecord>,
    kernels: Vec<KernelRecord>,
    mixing: ArrayRecord,
    inducing: ArrayRecord,
    variational_means: Vec<ArrayRecord>,
    variational_chols: Vec<ArrayRecord>,
    noise_log_variance: ArrayRecord,
    input_stats: StatsRecord,
    target_stats: StatsRecord,
}

pub fn to_json(model: &DkmgpModel) -> Result<String> {
    let file = CheckpointFile {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        horizon: model.horizon,
        jitter: ArrayRecord::from_slice(&[model.jitter]),
        activation: model.mlp.activation,
        mlp: model
            .mlp
            .layers
            .iter()
            .map(|l| LayerRecord {
                weights: ArrayRecord::from_matrix(&l.weights),
                bias: ArrayRecord::from_slice(l.bias.as_slice()),
            })
            .collect(),
        kernels: model
            .kernels
            .iter()
            .map(|k| KernelRecord {
                log_lengthscales: ArrayRecord::from_slice(&k.log_lengthscales),
                log_variance: ArrayRecord::from_slice(&[k.log_variance]),
            })
            .collect(),
        mixing: ArrayRecord::from_matrix(&model.lmc.mixing),
        inducing: ArrayRecord::from_matrix(&model.variational.inducing),
        variational_means: model
            .variational
            .means
            .iter()
            .map(|m| ArrayRecord::from_slice(m.as_slice()))
            .collect(),
        variational_chols: model
            .variational
            .chols
            .iter()
            .map(ArrayRecord::from_matrix)
            .collect(),
        noise_log_variance: ArrayRecord::from_slice(&model.noise.log_variance),
        input_stats: StatsRecord::from_stats(&model.input_stats),
        target_stats: StatsRecord::from_stats(&model.target_stats),
    };
    serde_json::to_string_pretty(&file)
        .map_err(|e| Error::SchemaError(format!("cannot encode checkpoint: {e}")))
}

fn scalar(rec: &ArrayRecord, what: &str) -> Result<f64> {
    match rec.decode(what)?.as_slice() {
        [v] => Ok(*v),
        _ => Err(Error::SchemaError(format!("{what}: expected a scalar"))),
    }
}

pub fn from_json(text: &str) -> Result<DkmgpModel> {
    let probe: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::SchemaError(e.to_string()))?;
    let version = probe
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::SchemaError("missing schema_version".into()))?;
    if version != CHECKPOINT_SCHEMA_VERSION as u64 {
        return Err(Error::VersionMismatch {
            found: version as u32,
            supported: CHECKPOINT_SCHEMA_VERSION,
        });
    }
    let file: CheckpointFile =
        serde_json::from_value(probe).map_err(|e| Error::SchemaError(e.to_string()))?;

    let layers = file
        .mlp
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let weights = l.weights.to_matrix(&format!("mlp.{i}.weights"))?;
            let bias = DVector::from_vec(l.bias.decode(&format!("mlp.{i}.bias"))?);
            if bias.len() != weights.nrows() {
                return Err(Error::SchemaError(format!(
                    "mlp.{i}: bias/weight shape mismatch"
                )));
            }
            Ok(Layer { weights, bias })
        })
        .collect::<Result<Vec<_>>>()?;
    if layers.is_empty() {
        return Err(Error::SchemaError("checkpoint has no mlp layers".into()));
    }
    let mlp = MlpParams {
        layers,
        activation: file.activation,
    };
    let kernels = file
        .kernels
        .iter()
        .enumerate()
        .map(|(q, k)| {
            Ok(KernelHyper {
                log_lengthscales: k.log_lengthscales.decode(&format!("kernel.{q}"))?,
                log_variance: scalar(&k.log_variance, &format!("kernel.{q}.log_variance"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mixing = file.mixing.to_matrix("mixing")?;
    let inducing = file.inducing.to_matrix("inducing")?;
    let means = file
        .variational_means
        .iter()
        .map(|m| Ok(DVector::from_vec(m.decode("variational_means")?)))
        .collect::<Result<Vec<_>>>()?;
    let chols = file
        .variational_chols
        .iter()
        .map(|c| c.to_matrix("variational_chols"))
        .collect::<Result<Vec<_>>>()?;

    let model = DkmgpModel {
        mlp,
        kernels,
        lmc: LmcStructure { mixing },
        variational: VariationalParams {
            inducing,
            means,
            chols,
        },
        noise: NoiseParams {
            log_variance: file.noise_log_variance.decode("noise_log_variance")?,
        },
        input_stats: file.input_stats.to_stats("input_stats")?,
        target_stats: file.target_stats.to_stats("target_stats")?,
        horizon: file.horizon,
        jitter: scalar(&file.jitter, "jitter")?,
    };
    check_shapes(&model)?;
    Ok(model)
}

fn check_shapes(model: &DkmgpModel) -> Result<()> {
    let f = model.feature_dim();
    let q = model.lmc.num_latents();
    let m = model.variational.inducing.nrows();
    let bad = |what: &str| Err(Error::SchemaError(format!("inconsistent shape: {what}")));
    if model.variational.inducing.ncols() != f {
        return bad("inducing columns vs feature dim");
    }
    if model.kernels.len() != q || model.kernels.iter().any(|k| k.dim() != f) {
        return bad("kernels");
    }
    if model.variational.means.len() != q || model.variational.means.iter().any(|v| v.len() != m) {
        return bad("variational means");
    }
    if model.variational.chols.len() != q
        || model.variational.chols.iter().any(|c| c.shape() != (m, m))
    {
        return bad("variational cholesky factors");
    }
    if model.noise.log_variance.len() != model.lmc.num_tasks()
        || model.target_stats.dim() != model.lmc.num_tasks()
    {
        return bad("task count");
    }
    for w in model.mlp.layers.windows(2) {
        if w[0].weights.nrows() != w[1].weights.ncols() {
            return bad("mlp layer chain");
        }
    }
    if model.input_stats.dim() != model.mlp.input_dim() {
        return bad("input stats");
    }
    Ok(())
}

pub fn save_checkpoint(model: &DkmgpModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_json(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<DkmgpModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text)
}
