//! Error metrics and model comparison reports.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{TrajectoryLog, TARGET_DIM};
use crate::error::{Error, Result};
use crate::predictor::PredictionTrace;

pub const TARGET_NAMES: [&str; TARGET_DIM] = ["vx", "vy", "omega"];
pub const DEFAULT_SECTION_SECONDS: f64 = 2.0;

fn check_pair(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::InsufficientData(
            "metric over an empty series".into(),
        ));
    }
    Ok(())
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    let sum: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum();
    Ok(sum / pred.len() as f64)
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    let sum: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    Ok((sum / pred.len() as f64).sqrt())
}

/// Distance from `p` to segment `[a, b]`, projection clamped to the endpoints.
pub fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = if t >= 1.0 {
        b
    } else {
        (a.0 + t * dx, a.1 + t * dy)
    };
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Distance from each predicted point to the nearest segment of the truth
/// polyline.
pub fn cross_track_error(pred: &[(f64, f64)], truth: &[(f64, f64)]) -> Result<Vec<f64>> {
    if truth.len() < 2 {
        return Err(Error::InsufficientData(
            "cross-track error needs a truth polyline of at least two points".into(),
        ));
    }
    Ok(pred
        .iter()
        .map(|&p| {
            truth
                .windows(2)
                .map(|w| point_segment_distance(p, w[0], w[1]))
                .fold(f64::INFINITY, f64::min)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionMean {
    pub index: usize,
    pub start_time: f64,
    pub samples: usize,
    pub mean: f64,
    /// Set on a trailing section shorter than the nominal length.
    pub partial: bool,
}

/// Mean CTE over consecutive time sections of `section_seconds`.
pub fn sectional_cte(cte: &[f64], dt: f64, section_seconds: f64) -> Result<Vec<SectionMean>> {
    if cte.is_empty() {
        return Err(Error::InsufficientData(
            "sectional CTE of an empty series".into(),
        ));
    }
    if !(dt > 0.0 && section_seconds > 0.0) {
        return Err(Error::InvalidArgument(
            "dt and section length must be positive".into(),
        ));
    }
    let per = ((section_seconds / dt).round() as usize).max(1);
    Ok(cte
        .chunks(per)
        .enumerate()
        .map(|(i, c)| SectionMean {
            index: i,
            start_time: (i * per) as f64 * dt,
            samples: c.len(),
            mean: c.iter().sum::<f64>() / c.len() as f64,
            partial: c.len() < per,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub policy: String,
    pub horizon: usize,
    pub anchors: usize,
    pub mae: [f64; TARGET_DIM],
    pub rmse: [f64; TARGET_DIM],
    /// Mean CTE over all anchors and steps.
    pub cte_mean: f64,
    /// Mean CTE per prediction step `1..=horizon` across anchors.
    pub cte: Vec<f64>,
    pub scte: Vec<SectionMean>,
}

/// A named set of rollouts to score against the truth log.
#[derive(Debug, Clone)]
pub struct NamedTraces {
    pub model: String,
    pub policy: String,
    pub traces: Vec<PredictionTrace>,
}

fn report_for(truth: &TrajectoryLog, named: &NamedTraces) -> Result<MetricReport> {
    let first = named
        .traces
        .first()
        .ok_or_else(|| Error::InsufficientData(format!("model {:?} has no traces", named.model)))?;
    let m = first.horizon();
    let mut pred: [Vec<f64>; TARGET_DIM] = Default::default();
    let mut real: [Vec<f64>; TARGET_DIM] = Default::default();
    let mut cte_sum = vec![0.0; m];
    for tr in &named.traces {
        if tr.horizon() != m {
            return Err(Error::LengthMismatch {
                left: tr.horizon(),
                right: m,
            });
        }
        if tr.anchor + m >= truth.len() {
            return Err(Error::LengthMismatch {
                left: tr.anchor + m + 1,
                right: truth.len(),
            });
        }
        for k in 1..=m {
            let p = tr.states[k].base();
            let t = truth.state(tr.anchor + k).base();
            for j in 0..TARGET_DIM {
                pred[j].push(p[j]);
                real[j].push(t[j]);
            }
        }
        let path: Vec<(f64, f64)> = (tr.anchor..=tr.anchor + m)
            .map(|i| {
                let s = truth.state(i);
                (s.x, s.y)
            })
            .collect();
        let pts: Vec<(f64, f64)> = tr.states[1..].iter().map(|s| (s.x, s.y)).collect();
        for (acc, c) in cte_sum.iter_mut().zip(cross_track_error(&pts, &path)?) {
            *acc += c;
        }
    }
    let count = named.traces.len() as f64;
    let cte: Vec<f64> = cte_sum.iter().map(|c| c / count).collect();
    let cte_mean = cte.iter().sum::<f64>() / m as f64;
    let mut mae_v = [0.0; TARGET_DIM];
    let mut rmse_v = [0.0; TARGET_DIM];
    for j in 0..TARGET_DIM {
        mae_v[j] = mae(&pred[j], &real[j])?;
        rmse_v[j] = rmse(&pred[j], &real[j])?;
    }
    Ok(MetricReport {
        model: named.model.clone(),
        policy: named.policy.clone(),
        horizon: m,
        anchors: named.traces.len(),
        mae: mae_v,
        rmse: rmse_v,
        cte_mean,
        scte: sectional_cte(&cte, truth.dt(), DEFAULT_SECTION_SECONDS)?,
        cte,
    })
}

/// One report per named trace set, sorted by model name.
pub fn compare_models(truth: &TrajectoryLog, models: &[NamedTraces]) -> Result<Vec<MetricReport>> {
    let mut reports = models
        .iter()
        .map(|n| report_for(truth, n))
        .collect::<Result<Vec<_>>>()?;
    reports.sort_by(|a, b| a.model.cmp(&b.model));
    Ok(reports)
}

/// Rows of `model,metric,target,value`.
pub fn report_csv(reports: &[MetricReport]) -> String {
    let mut out = String::from("model,metric,target,value\n");
    for r in reports {
        for (j, name) in TARGET_NAMES.iter().enumerate() {
            let _ = writeln!(out, "{},mae,{name},{}", r.model, r.mae[j]);
        }
        for (j, name) in TARGET_NAMES.iter().enumerate() {
            let _ = writeln!(out, "{},rmse,{name},{}", r.model, r.rmse[j]);
        }
        let _ = writeln!(out, "{},cte_mean,position,{}", r.model, r.cte_mean);
        for s in &r.scte {
            let _ = writeln!(out, "{},scte,section_{},{}", r.model, s.index, s.mean);
        }
    }
    out
}

#[derive(Serialize)]
struct ReportDocument<'a> {
    schema_version: u32,
    section_seconds: f64,
    reports: &'a [MetricReport],
}

pub fn report_json(reports: &[MetricReport]) -> Result<String> {
    serde_json::to_string_pretty(&ReportDocument {
        schema_version: 1,
        section_seconds: DEFAULT_SECTION_SECONDS,
        reports,
    })
    .map_err(|e| Error::SchemaError(e.to_string()))
}

/// Fixed-width text table for terminals.
pub fn report_table(reports: &[MetricReport]) -> String {
    let mut out = format!(
        "{:<20} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}\n",
        "model", "mae_vx", "mae_vy", "mae_omega", "rmse_vx", "rmse_vy", "rmse_omega", "cte_mean"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<20} {:>10.5} {:>10.5} {:>10.5} {:>10.5} {:>10.5} {:>10.5} {:>10.5}",
            r.model, r.mae[0], r.mae[1], r.mae[2], r.rmse[0], r.rmse[1], r.rmse[2], r.cte_mean
        );
    }
    out
}

/// Writes `report.csv` and `report.json` into `dir`.
pub fn write_reports(reports: &[MetricReport], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("report.csv");
    std::fs::write(&csv_path, report_csv(reports)).map_err(|e| Error::io(&csv_path, e))?;
    let json_path = dir.join("report.json");
    std::fs::write(&json_path, report_json(reports)?).map_err(|e| Error::io(&json_path, e))
}
