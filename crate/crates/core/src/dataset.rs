//! Trajectory logs (CSV or synthetic) and n-step residual datasets.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    propagate, rk4_step, ControlInput, DynamicsModel, PacejkaAxleParams, VehicleParams,
    VehicleState, STATE_DIM,
};
use crate::error::{Error, Result};

/// Residual-model input: the seven state fields followed by the two inputs.
pub const FEATURE_DIM: usize = 9;
/// Residual targets: `(vx, vy, omega)`.
pub const TARGET_DIM: usize = 3;

pub const DATASET_SCHEMA_VERSION: u32 = 1;

const SPACING_TOLERANCE: f64 = 1e-6;
const LOG_COLUMNS: [&str; 10] = [
    "t",
    "x",
    "y",
    "vx",
    "vy",
    "psi",
    "delta",
    "omega",
    "ax",
    "delta_dot",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogSample {
    pub t: f64,
    pub state: VehicleState,
    pub input: ControlInput,
    pub bank_theta: Option<f64>,
}

/// A uniformly sampled sequence of states and inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    samples: Vec<LogSample>,
    dt: f64,
}

impl TrajectoryLog {
    pub fn new(samples: Vec<LogSample>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "a log needs at least 2 samples, got {}",
                samples.len()
            )));
        }
        let dt = samples[1].t - samples[0].t;
        if !(dt > 0.0) {
            return Err(Error::NonUniformSampling {
                row: 2,
                spacing: dt,
                expected: dt,
            });
        }
        for (i, pair) in samples.windows(2).enumerate() {
            let spacing = pair[1].t - pair[0].t;
            if (spacing - dt).abs() > SPACING_TOLERANCE {
                return Err(Error::NonUniformSampling {
                    row: i + 2,
                    spacing,
                    expected: dt,
                });
            }
        }
        for (i, s) in samples.iter().enumerate() {
            if !(s.t.is_finite() && s.state.is_finite() && s.input.is_finite()) {
                return Err(Error::ParseError {
                    row: i + 1,
                    msg: "non-finite value".into(),
                });
            }
        }
        Ok(TrajectoryLog { samples, dt })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn samples(&self) -> &[LogSample] {
        &self.samples
    }

    pub fn state(&self, i: usize) -> &VehicleState {
        &self.samples[i].state
    }

    pub fn states(&self) -> Vec<VehicleState> {
        self.samples.iter().map(|s| s.state).collect()
    }

    pub fn inputs(&self) -> Vec<ControlInput> {
        self.samples.iter().map(|s| s.input).collect()
    }

    /// Model input vector `d_i = (s_i, u_i)`.
    pub fn feature(&self, i: usize) -> [f64; FEATURE_DIM] {
        feature_vector(&self.samples[i].state, &self.samples[i].input)
    }
}

pub fn feature_vector(s: &VehicleState, u: &ControlInput) -> [f64; FEATURE_DIM] {
    let a = s.to_array();
    [a[0], a[1], a[2], a[3], a[4], a[5], a[6], u.ax, u.delta_dot]
}

fn parse_field(record: &csv::StringRecord, idx: usize, row: usize, name: &str) -> Result<f64> {
    let raw = record.get(idx).ok_or_else(|| Error::ParseError {
        row,
        msg: format!("missing field {name}"),
    })?;
    let v: f64 = raw.trim().parse().map_err(|_| Error::ParseError {
        row,
        msg: format!("cannot parse {name} = {raw:?}"),
    })?;
    if !v.is_finite() {
        return Err(Error::ParseError {
            row,
            msg: format!("{name} is not finite"),
        });
    }
    Ok(v)
}

/// Reads a log in the `t,x,y,vx,vy,psi,delta,omega,ax,delta_dot[,bank_theta]` schema.
pub fn load_log_csv(path: impl AsRef<Path>) -> Result<TrajectoryLog> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(BufReader::new(file));
    let headers = reader
        .headers()
        .map_err(|e| Error::SchemaError(format!("unreadable header: {e}")))?
        .clone();
    let position = |name: &str| headers.iter().position(|h| h.trim() == name);
    let mut idx = [0usize; 10];
    for (slot, name) in idx.iter_mut().zip(LOG_COLUMNS) {
        *slot =
            position(name).ok_or_else(|| Error::SchemaError(format!("missing column {name}")))?;
    }
    let bank_idx = position("bank_theta");

    let mut samples = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::ParseError {
            row,
            msg: e.to_string(),
        })?;
        let mut v = [0.0; 10];
        for (k, name) in LOG_COLUMNS.iter().enumerate() {
            v[k] = parse_field(&record, idx[k], row, name)?;
        }
        let bank_theta = match bank_idx {
            Some(b) => Some(parse_field(&record, b, row, "bank_theta")?),
            None => None,
        };
        samples.push(LogSample {
            t: v[0],
            state: VehicleState::from_array([v[1], v[2], v[3], v[4], v[5], v[6], v[7]]),
            input: ControlInput::new(v[8], v[9]),
            bank_theta,
        });
    }
    TrajectoryLog::new(samples)
}

pub fn write_log_csv(log: &TrajectoryLog, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let with_bank = log.samples.iter().any(|s| s.bank_theta.is_some());
    let mut header = LOG_COLUMNS.join(",");
    if with_bank {
        header.push_str(",bank_theta");
    }
    let mut out = header;
    out.push('\n');
    for s in &log.samples {
        let a = s.state.to_array();
        let mut line = format!(
            "{},{},{},{},{},{},{},{},{},{}",
            s.t, a[0], a[1], a[2], a[3], a[4], a[5], a[6], s.input.ax, s.input.delta_dot
        );
        if with_bank {
            line.push_str(&format!(",{}", s.bank_theta.unwrap_or(0.0)));
        }
        out.push_str(&line);
        out.push('\n');
    }
    w.write_all(out.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// One constant-input piece of a scripted maneuver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManeuverSegment {
    /// Seconds; rounded to a whole number of steps.
    pub duration: f64,
    pub ax: f64,
    pub delta_dot: f64,
}

/// A cyclic input program plus the starting state and measurement noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManeuverSpec {
    pub initial: VehicleState,
    pub segments: Vec<ManeuverSegment>,
    /// Gaussian measurement noise std per state field, added to the logged states.
    #[serde(default)]
    pub noise_std: [f64; STATE_DIM],
    /// Keep the logged heading in (-pi, pi].
    #[serde(default = "default_true")]
    pub wrap_heading: bool,
}

fn default_true() -> bool {
    true
}

impl ManeuverSpec {
    /// Constant inputs from `initial` for the whole run.
    pub fn constant(initial: VehicleState, input: ControlInput) -> Self {
        ManeuverSpec {
            initial,
            segments: vec![ManeuverSegment {
                duration: 1.0,
                ax: input.ax,
                delta_dot: input.delta_dot,
            }],
            noise_std: [0.0; STATE_DIM],
            wrap_heading: true,
        }
    }

    /// Input sequence of `n_steps` samples, cycling through the segments.
    pub fn input_schedule(&self, n_steps: usize, dt: f64) -> Result<Vec<ControlInput>> {
        let lengths: Vec<usize> = self
            .segments
            .iter()
            .map(|s| (s.duration / dt).round().max(0.0) as usize)
            .collect();
        let cycle: usize = lengths.iter().sum();
        if cycle == 0 {
            return Err(Error::InvalidArgument(
                "maneuver needs at least one segment of positive duration".into(),
            ));
        }
        let mut out = Vec::with_capacity(n_steps);
        for k in 0..n_steps {
            let mut pos = k % cycle;
            for (seg, &len) in self.segments.iter().zip(&lengths) {
                if pos < len {
                    out.push(ControlInput::new(seg.ax, seg.delta_dot));
                    break;
                }
                pos -= len;
            }
        }
        Ok(out)
    }
}

pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r == -PI {
        PI
    } else {
        r
    }
}

/// Ground truth from the single-track model under a scripted input program.
pub fn generate_synthetic_log(
    vp: &VehicleParams,
    pf: &PacejkaAxleParams,
    pr: &PacejkaAxleParams,
    maneuver: &ManeuverSpec,
    duration: f64,
    dt: f64,
    seed: u64,
) -> Result<TrajectoryLog> {
    if !(dt > 0.0 && duration >= dt) {
        return Err(Error::InvalidArgument(format!(
            "need duration >= dt > 0, got duration {duration}, dt {dt}"
        )));
    }
    let steps = (duration / dt).round() as usize;
    let inputs = maneuver.input_schedule(steps + 1, dt)?;
    let model = DynamicsModel::SingleTrack {
        vehicle: *vp,
        front: *pf,
        rear: *pr,
    };

    let mut truth = Vec::with_capacity(steps + 1);
    let mut s = maneuver.initial;
    if maneuver.wrap_heading {
        s.psi = wrap_angle(s.psi);
    }
    truth.push(s);
    for u in &inputs[..steps] {
        s = rk4_step(&model, &s, u, dt)?;
        if maneuver.wrap_heading {
            s.psi = wrap_angle(s.psi);
        }
        truth.push(s);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<Option<Normal<f64>>> = maneuver
        .noise_std
        .iter()
        .map(|&sd| {
            if sd > 0.0 {
                Normal::new(0.0, sd).ok()
            } else {
                None
            }
        })
        .collect();

    let samples = truth
        .iter()
        .zip(&inputs)
        .enumerate()
        .map(|(k, (s, u))| {
            let mut a = s.to_array();
            for (v, dist) in a.iter_mut().zip(&noise) {
                if let Some(d) = dist {
                    *v += d.sample(&mut rng);
                }
            }
            LogSample {
                t: k as f64 * dt,
                state: VehicleState::from_array(a),
                input: *u,
                bank_theta: None,
            }
        })
        .collect();
    TrajectoryLog::new(samples)
}

/// Per-dimension z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Dimensions whose spread was zero; their std is stored as 1.
    pub degenerate: Vec<bool>,
}

const DEGENERATE_STD: f64 = 1e-12;

impl NormalizationStats {
    /// Mean and population standard deviation of `rows`.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::InsufficientData("no rows to normalize".into()))?;
        let dim = first.as_ref().len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: r.len(),
                });
            }
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((acc, v), m) in var.iter_mut().zip(r.as_ref()).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let mut std = Vec::with_capacity(dim);
        let mut degenerate = Vec::with_capacity(dim);
        for v in var {
            let sd = (v / n).sqrt();
            if sd > DEGENERATE_STD {
                std.push(sd);
                degenerate.push(false);
            } else {
                std.push(1.0);
                degenerate.push(true);
            }
        }
        Ok(NormalizationStats {
            mean,
            std,
            degenerate,
        })
    }

    pub fn identity(dim: usize) -> Self {
        NormalizationStats {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
            degenerate: vec![false; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn normalize(v: &[f64], stats: &NormalizationStats) -> Result<Vec<f64>> {
    if v.len() != stats.dim() {
        return Err(Error::DimensionMismatch {
            expected: stats.dim(),
            got: v.len(),
        });
    }
    Ok(v.iter()
        .zip(&stats.mean)
        .zip(&stats.std)
        .map(|((x, m), s)| (x - m) / s)
        .collect())
}

pub fn denormalize(v: &[f64], stats: &NormalizationStats) -> Result<Vec<f64>> {
    if v.len() != stats.dim() {
        return Err(Error::DimensionMismatch {
            expected: stats.dim(),
            got: v.len(),
        });
    }
    Ok(v.iter()
        .zip(&stats.mean)
        .zip(&stats.std)
        .map(|((x, m), s)| x * s + m)
        .collect())
}

/// A normalized (input, target) pair for horizon `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSample {
    pub input: [f64; FEATURE_DIM],
    pub target: [f64; TARGET_DIM],
    pub horizon: usize,
}

/// Where a dataset's anchors came from in the source log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSource {
    /// Log index of the first sample's anchor; anchors are contiguous.
    pub first_anchor: usize,
    pub log_len: usize,
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualDataset {
    pub schema_version: u32,
    pub horizon: usize,
    pub input_stats: NormalizationStats,
    pub target_stats: NormalizationStats,
    pub source: DatasetSource,
    pub samples: Vec<ResidualSample>,
    pub raw_inputs: Vec<[f64; FEATURE_DIM]>,
    pub raw_targets: Vec<[f64; TARGET_DIM]>,
}

impl ResidualDataset {
    /// Normalizes raw rows with the given statistics.
    pub fn from_raw(
        horizon: usize,
        source: DatasetSource,
        raw_inputs: Vec<[f64; FEATURE_DIM]>,
        raw_targets: Vec<[f64; TARGET_DIM]>,
        input_stats: NormalizationStats,
        target_stats: NormalizationStats,
    ) -> Result<Self> {
        let mut samples = Vec::with_capacity(raw_inputs.len());
        for (d, e) in raw_inputs.iter().zip(&raw_targets) {
            let input = normalize(d, &input_stats)?;
            let target = normalize(e, &target_stats)?;
            samples.push(ResidualSample {
                input: input.try_into().expect("feature dim"),
                target: target.try_into().expect("target dim"),
                horizon,
            });
        }
        Ok(ResidualDataset {
            schema_version: DATASET_SCHEMA_VERSION,
            horizon,
            input_stats,
            target_stats,
            source,
            samples,
            raw_inputs,
            raw_targets,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)
            .map_err(|e| Error::SchemaError(format!("cannot encode dataset: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ds: ResidualDataset = serde_json::from_str(&text)
            .map_err(|e| Error::SchemaError(format!("{}: {e}", path.display())))?;
        if ds.schema_version != DATASET_SCHEMA_VERSION {
            return Err(Error::VersionMismatch {
                found: ds.schema_version,
                supported: DATASET_SCHEMA_VERSION,
            });
        }
        Ok(ds)
    }
}

/// Unnormalized inputs and targets, one row per anchor.
pub type RawRows = (Vec<[f64; FEATURE_DIM]>, Vec<[f64; TARGET_DIM]>);

/// Raw n-step residual `s_{t+n} - ekin^n(s_t)` on the base states, for every anchor.
pub fn raw_residuals(log: &TrajectoryLog, n: usize, vp: &VehicleParams) -> Result<RawRows> {
    if n == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    if log.len() <= n {
        return Err(Error::InsufficientData(format!(
            "log of length {} cannot support horizon {n}",
            log.len()
        )));
    }
    let model = DynamicsModel::Ekin { vehicle: *vp };
    let inputs = log.inputs();
    let count = log.len() - n;
    let mut feats = Vec::with_capacity(count);
    let mut targets = Vec::with_capacity(count);
    for t in 0..count {
        let traj = propagate(&model, log.state(t), &inputs[t..t + n], log.dt())?;
        let pred = traj[n].base();
        let truth = log.state(t + n).base();
        feats.push(log.feature(t));
        targets.push([truth[0] - pred[0], truth[1] - pred[1], truth[2] - pred[2]]);
    }
    Ok((feats, targets))
}

pub fn build_residual_dataset(
    log: &TrajectoryLog,
    n: usize,
    vp: &VehicleParams,
) -> Result<ResidualDataset> {
    let (feats, targets) = raw_residuals(log, n, vp)?;
    let input_stats = NormalizationStats::from_rows(&feats)?;
    let target_stats = NormalizationStats::from_rows(&targets)?;
    ResidualDataset::from_raw(
        n,
        DatasetSource {
            first_anchor: 0,
            log_len: log.len(),
            dt: log.dt(),
        },
        feats,
        targets,
        input_stats,
        target_stats,
    )
}

/// Splits in order; both halves are normalized with statistics of the first.
pub fn split_contiguous(
    ds: &ResidualDataset,
    train_fraction: f64,
) -> Result<(ResidualDataset, ResidualDataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let cut = (train_fraction * ds.len() as f64).floor() as usize;
    if cut == 0 || cut >= ds.len() {
        return Err(Error::InsufficientData(format!(
            "split of {} samples at {train_fraction} leaves an empty side",
            ds.len()
        )));
    }
    let input_stats = NormalizationStats::from_rows(&ds.raw_inputs[..cut])?;
    let target_stats = NormalizationStats::from_rows(&ds.raw_targets[..cut])?;
    let part = |range: std::ops::Range<usize>| {
        ResidualDataset::from_raw(
            ds.horizon,
            DatasetSource {
                first_anchor: ds.source.first_anchor + range.start,
                ..ds.source.clone()
            },
            ds.raw_inputs[range.clone()].to_vec(),
            ds.raw_targets[range].to_vec(),
            input_stats.clone(),
            target_stats.clone(),
        )
    };
    Ok((part(0..cut)?, part(cut..ds.len())?))
}
