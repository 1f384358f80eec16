//! Multi-step E-kin rollouts with residual corrections every `n` steps, under
//! a fixed or adaptive correction horizon.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{feature_vector, TrajectoryLog, TARGET_DIM};
use crate::dynamics::{propagate, ControlInput, DynamicsModel, VehicleParams, VehicleState};
use crate::error::{Error, Result};
use crate::mtgp::baseline::PerTaskExactGp;
use crate::mtgp::{PreparedModel, ResidualPrediction};

/// Driving aggressiveness, ordered from calm to aggressive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DrivingCondition {
    Cruising,
    Controlled,
    Pushing,
    Aggressive,
}

impl DrivingCondition {
    pub const ALL: [DrivingCondition; 4] = [
        DrivingCondition::Cruising,
        DrivingCondition::Controlled,
        DrivingCondition::Pushing,
        DrivingCondition::Aggressive,
    ];

    fn from_level(level: usize) -> Self {
        Self::ALL[level.min(3)]
    }

    pub fn level(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            DrivingCondition::Cruising => "cruising",
            DrivingCondition::Controlled => "controlled",
            DrivingCondition::Pushing => "pushing",
            DrivingCondition::Aggressive => "aggressive",
        }
    }
}

impl FromStr for DrivingCondition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown driving condition {s:?}")))
    }
}

/// Breakpoints between consecutive conditions and the horizon per condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AchThresholds {
    /// Longitudinal speed, m/s.
    pub vx: [f64; 3],
    /// |ax|, m/s².
    pub ax: [f64; 3],
    /// |steering-wheel angle|, degrees.
    pub delta_w: [f64; 3],
    /// Correction horizon for Cruising, Controlled, Pushing, Aggressive.
    pub horizons: [usize; 4],
}

impl Default for AchThresholds {
    fn default() -> Self {
        AchThresholds {
            vx: [40.0, 50.0, 60.0],
            ax: [0.5, 1.0, 3.0],
            delta_w: [4.5, 7.5, 11.5],
            horizons: [15, 10, 5, 3],
        }
    }
}

impl AchThresholds {
    pub fn validate(&self) -> Result<()> {
        let increasing = |b: &[f64; 3]| b[0] < b[1] && b[1] < b[2];
        if !(increasing(&self.vx) && increasing(&self.ax) && increasing(&self.delta_w)) {
            return Err(Error::InvalidArgument(
                "ACH breakpoints must be strictly increasing".into(),
            ));
        }
        let h = &self.horizons;
        if !(h[0] > h[1] && h[1] > h[2] && h[2] > h[3] && h[3] >= 1) {
            return Err(Error::InvalidArgument(
                "ACH horizons must be strictly decreasing and >= 1".into(),
            ));
        }
        Ok(())
    }
}

fn level(value: f64, breaks: &[f64; 3]) -> usize {
    breaks.iter().filter(|&&b| value >= b).count()
}

/// Most aggressive of the per-variable classes; ranges are `[lo, hi)`.
pub fn classify_condition(vx: f64, ax: f64, delta_w: f64, th: &AchThresholds) -> DrivingCondition {
    let lv = level(vx, &th.vx)
        .max(level(ax.abs(), &th.ax))
        .max(level(delta_w.abs(), &th.delta_w));
    DrivingCondition::from_level(lv)
}

pub fn ach_horizon(cond: DrivingCondition, th: &AchThresholds) -> usize {
    th.horizons[cond.level()]
}

/// Road-wheel angle (rad) to steering-wheel angle (degrees).
pub fn steering_wheel_degrees(delta: f64, vp: &VehicleParams) -> f64 {
    (delta * vp.steering_ratio).to_degrees()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HorizonPolicy {
    Fixed(usize),
    Adaptive(AchThresholds),
}

impl HorizonPolicy {
    /// Parses `fixed:<n>` or `ach` (default thresholds).
    pub fn parse(s: &str) -> Result<Self> {
        if s == "ach" {
            return Ok(HorizonPolicy::Adaptive(AchThresholds::default()));
        }
        let n = s
            .strip_prefix("fixed:")
            .and_then(|n| n.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .ok_or_else(|| {
                Error::InvalidArgument(format!("policy must be fixed:<n>=1..> or ach, got {s:?}"))
            })?;
        Ok(HorizonPolicy::Fixed(n))
    }

    pub fn tag(&self) -> String {
        match self {
            HorizonPolicy::Fixed(n) => format!("fixed{n}"),
            HorizonPolicy::Adaptive(_) => "ach".into(),
        }
    }
}

impl fmt::Display for HorizonPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HorizonPolicy::Fixed(n) => write!(f, "fixed:{n}"),
            HorizonPolicy::Adaptive(_) => write!(f, "ach"),
        }
    }
}

/// Anything that predicts the `(vx, vy, omega)` residual from a raw `d = (s, u)`.
pub trait ResidualModel: Send + Sync {
    fn predict_residual(&self, d: &[f64]) -> Result<ResidualPrediction>;
}

impl ResidualModel for PreparedModel {
    fn predict_residual(&self, d: &[f64]) -> Result<ResidualPrediction> {
        self.predict(d)
    }
}

impl ResidualModel for PerTaskExactGp {
    fn predict_residual(&self, d: &[f64]) -> Result<ResidualPrediction> {
        self.predict(d)
    }
}

/// Residual models keyed by the correction horizon they were trained for.
#[derive(Default)]
pub struct ModelSet {
    models: BTreeMap<usize, Box<dyn ResidualModel>>,
}

impl ModelSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, horizon: usize, model: impl ResidualModel + 'static) -> Self {
        self.insert(horizon, model);
        self
    }

    pub fn insert(&mut self, horizon: usize, model: impl ResidualModel + 'static) {
        self.models.insert(horizon, Box::new(model));
    }

    pub fn horizons(&self) -> Vec<usize> {
        self.models.keys().copied().collect()
    }

    pub fn get(&self, horizon: usize) -> Option<&dyn ResidualModel> {
        self.models.get(&horizon).map(|m| m.as_ref())
    }

    pub fn contains(&self, horizon: usize) -> bool {
        self.models.contains_key(&horizon)
    }

    /// Exact match, otherwise the closest registered horizon (ties go low).
    fn for_steps(&self, steps: usize) -> Option<&dyn ResidualModel> {
        self.models
            .iter()
            .min_by_key(|(&h, _)| (h.abs_diff(steps), h))
            .map(|(_, m)| m.as_ref())
    }
}

/// One correction cycle: `n` steps from `start`, corrected at `start + n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleEntry {
    pub start: usize,
    pub n: usize,
    pub condition: Option<DrivingCondition>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTrace {
    /// Log index of the anchor state, when the rollout came from a log.
    pub anchor: usize,
    /// `m + 1` states; index 0 is the anchor.
    pub states: Vec<VehicleState>,
    pub corrected: Vec<bool>,
    /// Predictive variance at corrected steps, physical units.
    pub variances: Vec<Option<[f64; TARGET_DIM]>>,
    pub schedule: Vec<ScheduleEntry>,
}

impl PredictionTrace {
    pub fn horizon(&self) -> usize {
        self.states.len() - 1
    }

    pub fn queries(&self) -> usize {
        self.schedule.len()
    }

    /// Schedule entry covering step `k` (step 0 maps to the first entry).
    pub fn entry_for_step(&self, k: usize) -> Option<&ScheduleEntry> {
        self.schedule
            .iter()
            .find(|e| k > e.start && k <= e.start + e.n)
            .or_else(|| if k == 0 { self.schedule.first() } else { None })
    }
}

/// Corrected `m`-step prediction from `s0` with `m = inputs.len()`.
pub fn multistep_predict(
    models: &ModelSet,
    s0: &VehicleState,
    inputs: &[ControlInput],
    policy: &HorizonPolicy,
    vp: &VehicleParams,
    dt: f64,
) -> Result<PredictionTrace> {
    let m = inputs.len();
    if m == 0 {
        return Err(Error::InvalidArgument(
            "prediction horizon must be >= 1".into(),
        ));
    }
    if let HorizonPolicy::Fixed(0) = policy {
        return Err(Error::InvalidArgument("fixed horizon must be >= 1".into()));
    }
    let ekin = DynamicsModel::Ekin { vehicle: *vp };
    let mut states = Vec::with_capacity(m + 1);
    let mut corrected = Vec::with_capacity(m + 1);
    let mut variances = Vec::with_capacity(m + 1);
    let mut schedule = Vec::new();
    states.push(*s0);
    corrected.push(false);
    variances.push(None);

    let mut k = 0;
    let mut anchor = *s0;
    while k < m {
        let (selected, condition) = match policy {
            HorizonPolicy::Fixed(n) => (*n, None),
            HorizonPolicy::Adaptive(th) => {
                let cond = classify_condition(
                    anchor.vx,
                    inputs[k].ax,
                    steering_wheel_degrees(anchor.delta, vp),
                    th,
                );
                (ach_horizon(cond, th), Some(cond))
            }
        };
        if !models.contains(selected) {
            return Err(Error::MissingHorizonModel(selected));
        }
        let n = selected.min(m - k);
        let model = models.for_steps(n).ok_or(Error::MissingHorizonModel(n))?;
        let traj = propagate(&ekin, &anchor, &inputs[k..k + n], dt)?;
        let pred = model.predict_residual(&feature_vector(&anchor, &inputs[k]))?;
        let end = traj[n].corrected(pred.mean);

        for s in &traj[1..n] {
            states.push(*s);
            corrected.push(false);
            variances.push(None);
        }
        states.push(end);
        corrected.push(true);
        variances.push(Some(pred.variance));
        schedule.push(ScheduleEntry {
            start: k,
            n,
            condition,
        });
        anchor = end;
        k += n;
    }
    Ok(PredictionTrace {
        anchor: 0,
        states,
        corrected,
        variances,
        schedule,
    })
}

/// Rollout from log index `anchor` using the logged inputs.
pub fn predict_from_log(
    models: &ModelSet,
    log: &TrajectoryLog,
    anchor: usize,
    m: usize,
    policy: &HorizonPolicy,
    vp: &VehicleParams,
) -> Result<PredictionTrace> {
    if anchor + m >= log.len() {
        return Err(Error::InsufficientData(format!(
            "anchor {anchor} + horizon {m} exceeds log length {}",
            log.len()
        )));
    }
    let inputs: Vec<ControlInput> = log.samples()[anchor..anchor + m]
        .iter()
        .map(|s| s.input)
        .collect();
    let mut trace = multistep_predict(models, log.state(anchor), &inputs, policy, vp, log.dt())?;
    trace.anchor = anchor;
    Ok(trace)
}

/// Uncorrected E-kin rollout in trace form.
pub fn ekin_trace_from_log(
    log: &TrajectoryLog,
    anchor: usize,
    m: usize,
    vp: &VehicleParams,
) -> Result<PredictionTrace> {
    if anchor + m >= log.len() {
        return Err(Error::InsufficientData(format!(
            "anchor {anchor} + horizon {m} exceeds log length {}",
            log.len()
        )));
    }
    let inputs: Vec<ControlInput> = log.samples()[anchor..anchor + m]
        .iter()
        .map(|s| s.input)
        .collect();
    let states = propagate(
        &DynamicsModel::Ekin { vehicle: *vp },
        log.state(anchor),
        &inputs,
        log.dt(),
    )?;
    Ok(PredictionTrace {
        anchor,
        corrected: vec![false; states.len()],
        variances: vec![None; states.len()],
        schedule: vec![ScheduleEntry {
            start: 0,
            n: m,
            condition: None,
        }],
        states,
    })
}

/// Anchors `first, first + stride, ...` that leave room for `m` steps.
pub fn anchor_indices(log_len: usize, first: usize, stride: usize, m: usize) -> Vec<usize> {
    let stride = stride.max(1);
    (first..log_len)
        .step_by(stride)
        .take_while(|a| a + m < log_len)
        .collect()
}

/// Median rate (complete `m`-step predictions per second) over `repeats`
/// timed passes across all anchors. Single-threaded.
pub fn bench_inference(
    models: &ModelSet,
    log: &TrajectoryLog,
    anchors: &[usize],
    m: usize,
    policy: &HorizonPolicy,
    vp: &VehicleParams,
    repeats: usize,
) -> Result<f64> {
    let case = BenchCase {
        models,
        anchors,
        policy: *policy,
    };
    Ok(bench_interleaved(&[case], log, m, vp, repeats)?[0])
}

/// One policy to time in [`bench_interleaved`].
#[derive(Clone, Copy)]
pub struct BenchCase<'a> {
    pub models: &'a ModelSet,
    pub anchors: &'a [usize],
    pub policy: HorizonPolicy,
}

/// Median rollouts per second for each case. Every repeat times all cases
/// once in turn, so a slow period on the host hits every case alike.
pub fn bench_interleaved(
    cases: &[BenchCase<'_>],
    log: &TrajectoryLog,
    m: usize,
    vp: &VehicleParams,
    repeats: usize,
) -> Result<Vec<f64>> {
    if repeats == 0 || cases.iter().any(|c| c.anchors.is_empty()) {
        return Err(Error::InvalidArgument(
            "benchmark needs anchors and repeats >= 1".into(),
        ));
    }
    for c in cases {
        predict_from_log(c.models, log, c.anchors[0], m, &c.policy, vp)?;
    }
    let mut rates = vec![Vec::with_capacity(repeats); cases.len()];
    for _ in 0..repeats {
        for (c, r) in cases.iter().zip(&mut rates) {
            let started = Instant::now();
            for &a in c.anchors {
                std::hint::black_box(predict_from_log(c.models, log, a, m, &c.policy, vp)?);
            }
            let secs = started.elapsed().as_secs_f64().max(1e-12);
            r.push(c.anchors.len() as f64 / secs);
        }
    }
    Ok(rates
        .into_iter()
        .map(|mut r| {
            r.sort_by(f64::total_cmp);
            r[r.len() / 2]
        })
        .collect())
}

pub const TRACE_HEADER: &str =
    "step,x,y,vx,vy,psi,delta,omega,corrected,n_used,condition,var_vx,var_vy,var_omega";

pub fn write_trace_csv(trace: &PredictionTrace, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for (k, s) in trace.states.iter().enumerate() {
        let entry = trace.entry_for_step(k);
        let n_used = entry.map_or(0, |e| e.n);
        let cond = entry.and_then(|e| e.condition).map_or("", |c| c.name());
        let var = trace.variances[k].unwrap_or([f64::NAN; TARGET_DIM]);
        out.push_str(&format!(
            "{k},{},{},{},{},{},{},{},{},{n_used},{cond},{},{},{}\n",
            s.x,
            s.y,
            s.vx,
            s.vy,
            s.psi,
            s.delta,
            s.omega,
            u8::from(trace.corrected[k]),
            var[0],
            var[1],
            var[2]
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_trace_csv(path: impl AsRef<Path>, anchor: usize) -> Result<PredictionTrace> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::SchemaError(e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::SchemaError(e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>().join(",") != TRACE_HEADER {
        return Err(Error::SchemaError(format!(
            "{}: unexpected trace header",
            path.display()
        )));
    }
    let mut states = Vec::new();
    let mut corrected = Vec::new();
    let mut variances = Vec::new();
    let mut schedule = Vec::new();
    let mut seg_start = 0;
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::ParseError {
            row,
            msg: e.to_string(),
        })?;
        let num = |c: usize| -> Result<f64> {
            rec.get(c)
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| Error::ParseError {
                    row,
                    msg: format!("bad value in column {c}"),
                })
        };
        let mut a = [0.0; 7];
        for (j, v) in a.iter_mut().enumerate() {
            *v = num(j + 1)?;
        }
        states.push(VehicleState::from_array(a));
        let is_corrected = num(8)? != 0.0;
        corrected.push(is_corrected);
        let n_used = num(9)? as usize;
        let condition = match rec.get(10) {
            Some("") | None => None,
            Some(c) => Some(c.parse()?),
        };
        if is_corrected {
            variances.push(Some([num(11)?, num(12)?, num(13)?]));
            schedule.push(ScheduleEntry {
                start: seg_start,
                n: i - seg_start,
                condition,
            });
            debug_assert!(n_used == 0 || n_used == i - seg_start);
            seg_start = i;
        } else {
            variances.push(None);
        }
    }
    if states.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{}: trace needs at least two rows",
            path.display()
        )));
    }
    let last = states.len() - 1;
    if seg_start < last {
        schedule.push(ScheduleEntry {
            start: seg_start,
            n: last - seg_start,
            condition: None,
        });
    }
    Ok(PredictionTrace {
        anchor,
        states,
        corrected,
        variances,
        schedule,
    })
}
