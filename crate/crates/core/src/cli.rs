//! Pipeline commands behind the `dkmgp` binary. Each command reads the
//! artifacts of the previous stage from the output directory:
//!
//! ```text
//! <out>/log.csv
//! <out>/datasets/n<h>/{train,test}.json
//! <out>/checkpoints/n<h>.json
//! <out>/history/n<h>.csv
//! <out>/traces/<policy>/anchor_<index>.csv
//! <out>/report/report.{csv,json}
//! <out>/bench.csv
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::{sub_seed, RunConfig};
use crate::dataset::{
    build_residual_dataset, generate_synthetic_log, load_log_csv, split_contiguous, write_log_csv,
    ResidualDataset, TrajectoryLog,
};
use crate::error::{Error, Result};
use crate::eval::{compare_models, report_table, write_reports, MetricReport, NamedTraces};
use crate::mtgp::baseline::per_task_baseline_train;
use crate::mtgp::checkpoint::{load_checkpoint, save_checkpoint};
use crate::mtgp::train::{write_history_csv, EpochRecord};
use crate::mtgp::{train, DkmgpModel, PreparedModel};
use crate::predictor::{
    anchor_indices, bench_interleaved, ekin_trace_from_log, predict_from_log, read_trace_csv,
    write_trace_csv, BenchCase, HorizonPolicy, ModelSet,
};

/// Artifact locations under one output root.
#[derive(Debug, Clone)]
pub struct Paths {
    pub root: PathBuf,
}

impl Paths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Paths { root: root.into() }
    }

    pub fn log(&self) -> PathBuf {
        self.root.join("log.csv")
    }

    pub fn dataset_dir(&self, n: usize) -> PathBuf {
        self.root.join("datasets").join(format!("n{n}"))
    }

    pub fn checkpoint(&self, n: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("n{n}.json"))
    }

    pub fn history(&self, n: usize) -> PathBuf {
        self.root.join("history").join(format!("n{n}.csv"))
    }

    pub fn traces_root(&self) -> PathBuf {
        self.root.join("traces")
    }

    pub fn traces(&self, policy: &HorizonPolicy) -> PathBuf {
        self.traces_root().join(policy.tag())
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn bench(&self) -> PathBuf {
        self.root.join("bench.csv")
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        mkdir(parent)?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<TrajectoryLog> {
    let paths = Paths::new(cfg.out_dir());
    let log = generate_synthetic_log(
        &cfg.vehicle,
        &cfg.tire.front,
        &cfg.tire.rear,
        &cfg.simulate.maneuver,
        cfg.simulate.duration,
        cfg.simulate.dt,
        sub_seed(cfg.seed, "simulate"),
    )?;
    mkdir(&paths.root)?;
    write_log_csv(&log, paths.log())?;
    log::info!(
        "simulate: {} samples -> {}",
        log.len(),
        paths.log().display()
    );
    Ok(log)
}

/// Per-horizon sample counts of the written datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetSummary {
    pub horizon: usize,
    pub total: usize,
    pub train: usize,
    pub test: usize,
}

pub fn cmd_dataset(cfg: &RunConfig) -> Result<Vec<DatasetSummary>> {
    let paths = Paths::new(cfg.out_dir());
    let log = load_log_csv(paths.log())?;
    let mut out = Vec::new();
    for &n in &cfg.dataset.horizons {
        let ds = build_residual_dataset(&log, n, &cfg.vehicle)?;
        let (tr, te) = split_contiguous(&ds, cfg.dataset.train_fraction)?;
        let dir = paths.dataset_dir(n);
        mkdir(&dir)?;
        tr.save_json(dir.join("train.json"))?;
        te.save_json(dir.join("test.json"))?;
        log::info!("dataset n={n}: {} train, {} test", tr.len(), te.len());
        out.push(DatasetSummary {
            horizon: n,
            total: ds.len(),
            train: tr.len(),
            test: te.len(),
        });
    }
    Ok(out)
}

/// Trains one model on an already-split training set with the configured
/// seeds for horizon `n`.
pub fn train_horizon(
    cfg: &RunConfig,
    train_set: &ResidualDataset,
) -> Result<(DkmgpModel, Vec<EpochRecord>)> {
    let n = train_set.horizon;
    let model = DkmgpModel::new(
        &cfg.mlp_config(sub_seed(cfg.seed, &format!("mlp/n{n}"))),
        &cfg.mtgp,
        train_set,
        sub_seed(cfg.seed, &format!("init/n{n}")),
    )?;
    let opts = cfg.train_options(sub_seed(cfg.seed, &format!("train/n{n}")));
    train(model, train_set, &opts)
}

/// Trains every configured horizon; returns `(n, final ELBO)` pairs.
pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<(usize, f64)>> {
    let paths = Paths::new(cfg.out_dir());
    let mut out = Vec::new();
    for &n in &cfg.dataset.horizons {
        let train_set = ResidualDataset::load_json(paths.dataset_dir(n).join("train.json"))?;
        let (model, history) = train_horizon(cfg, &train_set)?;
        let final_elbo = history.last().map_or(f64::NAN, |r| r.elbo);
        for path in [paths.checkpoint(n), paths.history(n)] {
            mkdir(path.parent().unwrap_or(&paths.root))?;
        }
        save_checkpoint(&model, paths.checkpoint(n))?;
        write_history_csv(&history, paths.history(n))?;
        log::info!(
            "train n={n}: {} epochs, final elbo {final_elbo:.4}",
            history.len()
        );
        out.push((n, final_elbo));
    }
    Ok(out)
}

/// Horizons whose models a policy needs.
pub fn required_horizons(policy: &HorizonPolicy) -> Vec<usize> {
    let mut hs = match policy {
        HorizonPolicy::Fixed(n) => vec![*n],
        HorizonPolicy::Adaptive(th) => th.horizons.to_vec(),
    };
    hs.sort_unstable();
    hs.dedup();
    hs
}

pub fn load_model_set(paths: &Paths, horizons: &[usize]) -> Result<ModelSet> {
    let mut set = ModelSet::new();
    for &n in horizons {
        let model = load_checkpoint(paths.checkpoint(n))?;
        if model.horizon != n {
            return Err(Error::SchemaError(format!(
                "checkpoint {} holds a horizon-{} model",
                paths.checkpoint(n).display(),
                model.horizon
            )));
        }
        set.insert(n, PreparedModel::new(model)?);
    }
    Ok(set)
}

/// Anchors of the held-out part of the log.
pub fn eval_anchors(cfg: &RunConfig, log_len: usize) -> Vec<usize> {
    anchor_indices(
        log_len,
        cfg.first_eval_anchor(log_len),
        cfg.predict.anchor_stride,
        cfg.predict.horizon,
    )
}

/// Resolves the configured ACH thresholds into a parsed policy.
pub fn resolve_policy(cfg: &RunConfig, policy: HorizonPolicy) -> HorizonPolicy {
    match policy {
        HorizonPolicy::Adaptive(_) => HorizonPolicy::Adaptive(cfg.ach),
        fixed => fixed,
    }
}

pub fn cmd_predict(cfg: &RunConfig, policy: HorizonPolicy) -> Result<usize> {
    let policy = resolve_policy(cfg, policy);
    let paths = Paths::new(cfg.out_dir());
    let log = load_log_csv(paths.log())?;
    let models = load_model_set(&paths, &required_horizons(&policy))?;
    let anchors = eval_anchors(cfg, log.len());
    if anchors.is_empty() {
        return Err(Error::InsufficientData(
            "no evaluation anchors leave room for the prediction horizon".into(),
        ));
    }
    let dir = paths.traces(&policy);
    clear_traces(&dir)?;
    mkdir(&dir)?;
    for &a in &anchors {
        let trace = predict_from_log(&models, &log, a, cfg.predict.horizon, &policy, &cfg.vehicle)?;
        write_trace_csv(&trace, dir.join(trace_file_name(a)))?;
    }
    log::info!(
        "predict {policy}: {} traces -> {}",
        anchors.len(),
        dir.display()
    );
    Ok(anchors.len())
}

fn trace_file_name(anchor: usize) -> String {
    format!("anchor_{anchor:06}.csv")
}

fn parse_trace_file_name(name: &str) -> Option<usize> {
    name.strip_prefix("anchor_")?
        .strip_suffix(".csv")?
        .parse()
        .ok()
}

fn clear_traces(dir: &Path) -> Result<()> {
    if !dir.is_dir() {
        return Ok(());
    }
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        if parse_trace_file_name(&name.to_string_lossy()).is_some() {
            std::fs::remove_file(entry.path()).map_err(|e| Error::io(entry.path(), e))?;
        }
    }
    Ok(())
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// Reads every `anchor_*.csv` trace under one policy directory.
pub fn read_trace_dir(dir: &Path) -> Result<Vec<crate::predictor::PredictionTrace>> {
    let mut traces = Vec::new();
    for path in sorted_entries(dir)? {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned());
        if let Some(anchor) = name.as_deref().and_then(parse_trace_file_name) {
            traces.push(read_trace_csv(&path, anchor)?);
        }
    }
    Ok(traces)
}

/// Scores every trace directory plus the uncorrected E-kin rollout from the
/// same anchors.
pub fn cmd_eval(cfg: &RunConfig) -> Result<Vec<MetricReport>> {
    let paths = Paths::new(cfg.out_dir());
    let log = load_log_csv(paths.log())?;
    let root = paths.traces_root();
    if !root.is_dir() {
        return Err(Error::InsufficientData(format!(
            "no traces under {}; run predict first",
            root.display()
        )));
    }
    let mut named = Vec::new();
    for dir in sorted_entries(&root)?.into_iter().filter(|p| p.is_dir()) {
        let traces = read_trace_dir(&dir)?;
        if traces.is_empty() {
            continue;
        }
        let tag = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        named.push(NamedTraces {
            model: format!("dkmgp_{tag}"),
            policy: tag,
            traces,
        });
    }
    let first = named.first().ok_or_else(|| {
        Error::InsufficientData(format!("no trace files under {}", root.display()))
    })?;
    let ekin = first
        .traces
        .iter()
        .map(|t| ekin_trace_from_log(&log, t.anchor, t.horizon(), &cfg.vehicle))
        .collect::<Result<Vec<_>>>()?;
    named.push(NamedTraces {
        model: "ekin".into(),
        policy: "none".into(),
        traces: ekin,
    });
    let reports = compare_models(&log, &named)?;
    write_reports(&reports, paths.report_dir())?;
    log::info!(
        "eval: {} reports -> {}",
        reports.len(),
        paths.report_dir().display()
    );
    print!("{}", report_table(&reports));
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub model: String,
    pub policy: String,
    pub rate_hz: f64,
}

/// Inference rates of every trained horizon, ACH when all its horizons
/// exist, and the single-step per-task baseline.
pub fn cmd_bench(cfg: &RunConfig) -> Result<Vec<BenchRow>> {
    let paths = Paths::new(cfg.out_dir());
    let log = load_log_csv(paths.log())?;
    let m = cfg.predict.horizon;
    let all = eval_anchors(cfg, log.len());
    if all.is_empty() {
        return Err(Error::InsufficientData(
            "no anchors for benchmarking".into(),
        ));
    }
    let anchors: Vec<usize> = all.iter().copied().take(cfg.bench.anchors).collect();
    let mut horizons: Vec<usize> = cfg
        .dataset
        .horizons
        .iter()
        .copied()
        .filter(|&n| paths.checkpoint(n).is_file())
        .collect();
    horizons.sort_unstable();
    horizons.dedup();
    let models = load_model_set(&paths, &horizons)?;
    let mut cases: Vec<(&str, BenchCase)> = horizons
        .iter()
        .rev()
        .map(|&n| {
            let case = BenchCase {
                models: &models,
                anchors: &anchors,
                policy: HorizonPolicy::Fixed(n),
            };
            ("dkmgp", case)
        })
        .collect();
    let ach = HorizonPolicy::Adaptive(cfg.ach);
    if required_horizons(&ach).iter().all(|n| models.contains(*n)) {
        let case = BenchCase {
            models: &models,
            anchors: &anchors,
            policy: ach,
        };
        cases.push(("dkmgp", case));
    }
    let baseline_set;
    let few: Vec<usize> = anchors
        .iter()
        .copied()
        .take(cfg.bench.baseline_anchors)
        .collect();
    if cfg.bench.include_baseline {
        let ds = build_residual_dataset(&log, 1, &cfg.vehicle)?;
        let (tr, _) = split_contiguous(&ds, cfg.dataset.train_fraction)?;
        let baseline = per_task_baseline_train(&tr, &cfg.baseline)?;
        baseline_set = ModelSet::new().with(1, baseline);
        let case = BenchCase {
            models: &baseline_set,
            anchors: &few,
            policy: HorizonPolicy::Fixed(1),
        };
        cases.push(("per_task_exact_gp", case));
    }
    let only: Vec<BenchCase> = cases.iter().map(|(_, c)| *c).collect();
    let rates = bench_interleaved(&only, &log, m, &cfg.vehicle, cfg.bench.repeats)?;
    let rows: Vec<BenchRow> = cases
        .iter()
        .zip(rates)
        .map(|((model, c), rate_hz)| BenchRow {
            model: (*model).into(),
            policy: c.policy.to_string(),
            rate_hz,
        })
        .collect();
    let mut csv = String::from("model,policy,rate_hz\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{:.3}", r.model, r.policy, r.rate_hz);
    }
    write_file(&paths.bench(), &csv)?;
    print!("{csv}");
    Ok(rows)
}
