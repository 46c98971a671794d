//! Training, evaluation and single-window identification over a generated
//! dataset.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::data::{app1_library, app2_train_rows, level_dir, load_dataset, App1Data, App2Data, App3Data, Dataset};
use super::{App1Spec, App2Spec, App3Spec, ExperimentConfig, SystemSpec, SCHEMA_VERSION};
use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::eval::{
    forecast, percentile, r2, summarize_forecasts, weighted_r2, ErrorMetric, ForecastOptions, ForecastResult,
    OutlierPolicy,
};
use crate::models::{ModelConfig, SetModel};
use crate::signal::{make_windows, Window, WindowMode};
use crate::sindy::{identify_local, Stlsq};
use crate::tensor::{json_hash, Checkpoint, Tensor};
use crate::train::{
    assemble_app1, assemble_app3, coefficient_names, lorenz_prefix_windows, train, window_features, LabeledWindow,
    LorenzTarget, PrefixSpec, TrainReport, TrainingPlan,
};

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

/// `[t_rel, x, y, c]` rows to the flattened next-window Ξ.
pub fn app1_model_config(cfg: &ExperimentConfig, s: &App1Spec) -> ModelConfig {
    ModelConfig {
        features: names(&["t", "x", "y", "c"]),
        targets: coefficient_names(&app1_library(s), &["x", "y"]),
        seed: cfg.seed,
        architecture: cfg.model.clone(),
    }
}

/// `[t, x, y, z]` rows to one Lorenz parameter.
pub fn app2_model_config(cfg: &ExperimentConfig, target: LorenzTarget) -> ModelConfig {
    ModelConfig {
        features: names(&["t", "x", "y", "z"]),
        targets: vec![target.name().to_string()],
        seed: cfg.seed,
        architecture: cfg.model.clone(),
    }
}

/// Interleaved `(z, t, T)` probe rows to `[G, ratio, α_ref]`.
pub fn app3_model_config(cfg: &ExperimentConfig) -> ModelConfig {
    ModelConfig {
        features: names(&["z", "t", "T"]),
        targets: names(&["G", "ratio", "alpha_ref"]),
        seed: cfg.seed,
        architecture: cfg.model.clone(),
    }
}

fn spec1(cfg: &ExperimentConfig) -> Result<&App1Spec> {
    match &cfg.system {
        SystemSpec::App1(s) => Ok(s),
        other => Err(Error::usage(format!(
            "expected an app1 configuration, got {}",
            other.kind()
        ))),
    }
}

fn spec2(cfg: &ExperimentConfig) -> Result<&App2Spec> {
    match &cfg.system {
        SystemSpec::App2(s) => Ok(s),
        other => Err(Error::usage(format!(
            "expected an app2 configuration, got {}",
            other.kind()
        ))),
    }
}

fn spec3(cfg: &ExperimentConfig) -> Result<&App3Spec> {
    match &cfg.system {
        SystemSpec::App3(s) => Ok(s),
        other => Err(Error::usage(format!(
            "expected an app3 configuration, got {}",
            other.kind()
        ))),
    }
}

fn select(windows: Vec<LabeledWindow>, sources: &[usize]) -> Vec<LabeledWindow> {
    windows.into_iter().filter(|w| sources.contains(&w.source)).collect()
}

/// One example per row for single-row models. The ODE residual rides on the
/// last row only, so each window contributes it once.
fn per_row(windows: Vec<LabeledWindow>) -> Vec<LabeledWindow> {
    let mut out = Vec::new();
    for w in windows {
        let n = w.inputs.rows();
        for i in 0..n {
            out.push(LabeledWindow {
                source: w.source,
                index: w.index,
                inputs: Tensor::row(w.inputs.row_slice(i)),
                target: w.target.clone(),
                ode: if i + 1 == n { w.ode.clone() } else { None },
            });
        }
    }
    out
}

/// Training and validation examples for local identification.
pub fn app1_examples(s: &App1Spec, d: &App1Data, single_row: bool) -> Result<(Vec<LabeledWindow>, Vec<LabeledWindow>)> {
    let all = assemble_app1(&d.trajectories, &d.labels, &s.derivative)?;
    let (tr, va) = (
        select(all.windows.clone(), &d.splits.train),
        select(all.windows, &d.splits.valid),
    );
    Ok(if single_row {
        (per_row(tr), per_row(va))
    } else {
        (tr, va)
    })
}

fn target_index(t: LorenzTarget) -> usize {
    match t {
        LorenzTarget::Sigma => 0,
        LorenzTarget::Rho => 1,
        LorenzTarget::Beta => 2,
    }
}

/// Training windows cover the whole training section (the window policy
/// draws prefixes); validation windows are the evaluation prefixes of the
/// held-out systems. Both carry the dataset labels of noise level `k`.
pub fn app2_examples(
    s: &App2Spec,
    d: &App2Data,
    k: usize,
    target: LorenzTarget,
) -> Result<(Vec<LabeledWindow>, Vec<LabeledWindow>)> {
    let j = target_index(target);
    let build = |sources: &[usize], sizes: Vec<usize>| -> Result<Vec<LabeledWindow>> {
        let spec = PrefixSpec { start: 0, sizes };
        let mut out = Vec::new();
        for &i in sources {
            if let Some(l) = d.labels[k][i] {
                out.extend(lorenz_prefix_windows(i, &d.trajectories[k][i], &[l[j]], &spec)?);
            }
        }
        Ok(out)
    };
    Ok((
        build(&d.splits.train, vec![app2_train_rows(s)])?,
        build(&d.splits.valid, s.prefix_sizes.clone())?,
    ))
}

/// Training examples use the longest window; validation examples every
/// evaluation size.
pub fn app3_examples(s: &App3Spec, d: &App3Data, k: usize) -> Result<(Vec<LabeledWindow>, Vec<LabeledWindow>)> {
    let runs = &d.probes[k][..s.runs];
    let longest = s.steps.iter().copied().max().unwrap_or(1);
    Ok((
        select(assemble_app3(runs, &[longest])?.windows, &d.splits.train),
        select(assemble_app3(runs, &s.steps)?.windows, &d.splits.valid),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    /// Model key, e.g. `xi_0.02/rho`.
    pub name: String,
    /// Checkpoint path relative to the run directory.
    pub checkpoint: String,
    pub param_count: usize,
    pub train_windows: usize,
    pub valid_windows: usize,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_valid_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub kind: String,
    pub name: String,
    pub config_hash: String,
    /// Covers the dataset, model and training sections only, so evaluation
    /// settings can change without retraining.
    pub train_hash: String,
    pub data_hash: String,
    pub models: Vec<TrainedModel>,
}

fn train_hash(cfg: &ExperimentConfig) -> String {
    json_hash(&serde_json::json!({
        "data": cfg.data_hash(),
        "model": cfg.model,
        "training": cfg.training,
    }))
}

/// Keeps the rows of an earlier `curves.csv` up to `epoch` and appends the
/// rows of the resumed run.
fn merge_curves(old: &str, resumed_from: usize, new: &str) -> String {
    let mut lines = old.lines();
    let mut out = String::new();
    if let Some(h) = lines.next() {
        out.push_str(h);
        out.push('\n');
    }
    for l in lines {
        let epoch = l.split(',').next().and_then(|e| e.parse::<usize>().ok());
        if epoch.is_some_and(|e| e <= resumed_from) {
            out.push_str(l);
            out.push('\n');
        }
    }
    for l in new.lines().skip(1) {
        out.push_str(l);
        out.push('\n');
    }
    out
}

/// Trains one model into `dir`; with `resume`, continues from `best.json`
/// there (weights and scaling; the optimizer restarts).
fn fit(
    name: String,
    config: ModelConfig,
    mut plan: TrainingPlan,
    train_set: &[LabeledWindow],
    valid_set: &[LabeledWindow],
    run_dir: &Path,
    resume: bool,
) -> Result<TrainedModel> {
    let dir = run_dir.join(&name);
    let ck_path = dir.join("best.json");
    let mut model = SetModel::new(config.clone())?;
    let mut old_curves = None;
    if resume && ck_path.exists() {
        let ck = Checkpoint::load(&ck_path)?;
        if ck.config != serde_json::to_value(&config)? {
            return Err(Error::Incompatible(format!(
                "{} was trained with another model configuration",
                ck_path.display()
            )));
        }
        model = SetModel::from_checkpoint(&ck)?;
        plan.resume_epoch = ck.metadata.get("epoch").and_then(Value::as_u64).unwrap_or(0) as usize;
        plan.resume_best = ck.metadata.get("valid_loss").and_then(Value::as_f64);
        old_curves = std::fs::read_to_string(dir.join("curves.csv")).ok();
        log::info!("{name}: resuming after epoch {}", plan.resume_epoch);
    }
    log::info!(
        "{name}: {} parameters, {} training / {} validation windows",
        model.param_count(),
        train_set.len(),
        valid_set.len()
    );
    let report: TrainReport = train(&mut model, &plan, train_set, valid_set, Some(&dir))?;
    if let Some(old) = old_curves {
        std::fs::write(
            dir.join("curves.csv"),
            merge_curves(&old, plan.resume_epoch, &report.curves_csv()),
        )?;
    }
    if !ck_path.exists() {
        // No epoch ran (e.g. resuming a finished ladder with no checkpoint).
        model.save(&ck_path)?;
    }
    let ck = Checkpoint::load(&ck_path)?;
    Ok(TrainedModel {
        checkpoint: format!("{name}/best.json"),
        param_count: model.param_count(),
        train_windows: train_set.len(),
        valid_windows: valid_set.len(),
        epochs_run: report.curves.len(),
        best_epoch: ck.metadata.get("epoch").and_then(Value::as_u64).map(|e| e as usize),
        best_valid_loss: ck.metadata.get("valid_loss").and_then(Value::as_f64),
        name,
    })
}

pub fn train_app1(cfg: &ExperimentConfig, d: &App1Data, run_dir: &Path, resume: bool) -> Result<TrainedModel> {
    let s = spec1(cfg)?;
    let config = app1_model_config(cfg, s);
    let single_row = SetModel::new(config.clone())?.single_row();
    let (tr, va) = app1_examples(s, d, single_row)?;
    fit(
        "local".into(),
        config,
        cfg.training.plan(cfg.seed),
        &tr,
        &va,
        run_dir,
        resume,
    )
}

/// Model key of a Lorenz model.
pub fn app2_model_name(level: f64, target: LorenzTarget) -> String {
    format!("{}/{}", level_dir(level), target.name())
}

/// One model per noise level and target.
pub fn train_app2(cfg: &ExperimentConfig, d: &App2Data, run_dir: &Path, resume: bool) -> Result<Vec<TrainedModel>> {
    let s = spec2(cfg)?;
    let mut out = Vec::new();
    for (k, &level) in d.levels.iter().enumerate() {
        for &target in &s.targets {
            let (tr, va) = app2_examples(s, d, k, target)?;
            let config = app2_model_config(cfg, target);
            out.push(fit(
                app2_model_name(level, target),
                config,
                cfg.training.plan(cfg.seed),
                &tr,
                &va,
                run_dir,
                resume,
            )?);
        }
    }
    Ok(out)
}

/// One model per noise level.
pub fn train_app3(cfg: &ExperimentConfig, d: &App3Data, run_dir: &Path, resume: bool) -> Result<Vec<TrainedModel>> {
    let s = spec3(cfg)?;
    let mut out = Vec::new();
    for (k, &level) in d.levels.iter().enumerate() {
        let (tr, va) = app3_examples(s, d, k)?;
        out.push(fit(
            level_dir(level),
            app3_model_config(cfg),
            cfg.training.plan(cfg.seed),
            &tr,
            &va,
            run_dir,
            resume,
        )?);
    }
    Ok(out)
}

/// Trains every model of an experiment on the dataset in `data_dir` and
/// writes `run.json` into `run_dir`. An existing run is only replaced with
/// `force` or continued with `resume`.
pub fn train_run(
    cfg: &ExperimentConfig,
    data_dir: &Path,
    run_dir: &Path,
    force: bool,
    resume: bool,
) -> Result<RunManifest> {
    let manifest_path = run_dir.join("run.json");
    if manifest_path.exists() && !force && !resume {
        return Err(Error::usage(format!(
            "{} already holds a trained run; pass --force to overwrite or --resume to continue",
            run_dir.display()
        )));
    }
    if resume && manifest_path.exists() {
        let old: RunManifest = serde_json::from_slice(&std::fs::read(&manifest_path)?)?;
        if old.train_hash != train_hash(cfg) {
            return Err(Error::Stale(format!(
                "{} was trained with a different configuration; cannot resume",
                run_dir.display()
            )));
        }
    }
    let data = load_dataset(cfg, data_dir)?;
    std::fs::create_dir_all(run_dir)?;
    std::fs::write(run_dir.join("config.json"), cfg.to_json()?)?;
    let models = match &data {
        Dataset::App1(d) => vec![train_app1(cfg, d, run_dir, resume)?],
        Dataset::App2(d) => train_app2(cfg, d, run_dir, resume)?,
        Dataset::App3(d) => train_app3(cfg, d, run_dir, resume)?,
    };
    let run = RunManifest {
        schema_version: SCHEMA_VERSION,
        kind: cfg.system.kind().into(),
        name: cfg.name.clone(),
        config_hash: cfg.hash(),
        train_hash: train_hash(cfg),
        data_hash: cfg.data_hash(),
        models,
    };
    std::fs::write(&manifest_path, serde_json::to_vec_pretty(&run)?)?;
    Ok(run)
}

/// Forecast error summary for one (width, horizon, channel, method, metric).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub window: usize,
    pub horizon: usize,
    pub channel: String,
    pub method: String,
    pub metric: ErrorMetric,
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub p90: f64,
    pub divergence_pct: f64,
    pub outliers_removed: usize,
}

/// R² of one target over the test set. `scope` is a window size in rows,
/// `weighted` (inverse-size weighted mean of the per-size scores) or
/// `pooled` (one R² over every window).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct R2Row {
    pub level: f64,
    pub target: String,
    pub section: String,
    pub scope: String,
    pub count: usize,
    pub r2: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub level: f64,
    pub target: String,
    pub section: String,
    pub source: usize,
    pub size: usize,
    pub truth: f64,
    pub predicted: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub kind: String,
    pub config_hash: String,
    pub data_hash: String,
    pub forecasts: Vec<ResultRow>,
    pub r2: Vec<R2Row>,
    #[serde(default)]
    pub predictions: Vec<PredictionRow>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v}"))
}

impl Evaluation {
    pub fn forecasts_csv(&self) -> String {
        let mut s = String::from(
            "window,horizon,channel,method,metric,count,mean,median,p90,divergence_pct,outliers_removed\n",
        );
        for r in &self.forecasts {
            let metric = match r.metric {
                ErrorMetric::Mape => "mape",
                ErrorMetric::Smape => "smape",
            };
            let _ = writeln!(
                s,
                "{},{},{},{},{metric},{},{},{},{},{},{}",
                r.window,
                r.horizon,
                r.channel,
                r.method,
                r.count,
                r.mean,
                r.median,
                r.p90,
                r.divergence_pct,
                r.outliers_removed
            );
        }
        s
    }

    pub fn r2_csv(&self) -> String {
        let mut s = String::from("level,target,section,scope,count,r2\n");
        for r in &self.r2 {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.level,
                r.target,
                r.section,
                r.scope,
                r.count,
                opt(r.r2)
            );
        }
        s
    }

    pub fn predictions_csv(&self) -> String {
        let mut s = String::from("level,target,section,source,size,truth,predicted\n");
        for r in &self.predictions {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.level, r.target, r.section, r.source, r.size, r.truth, r.predicted
            );
        }
        s
    }

    /// Writes `evaluation.json` and the CSV tables that have rows.
    pub fn write(&self, dir: &Path, force: bool) -> Result<()> {
        let path = dir.join("evaluation.json");
        if path.exists() && !force {
            return Err(Error::usage(format!(
                "{} exists; pass --force to overwrite",
                path.display()
            )));
        }
        std::fs::create_dir_all(dir)?;
        std::fs::write(&path, serde_json::to_vec_pretty(self)?)?;
        if !self.forecasts.is_empty() {
            std::fs::write(dir.join("forecasts.csv"), self.forecasts_csv())?;
        }
        if !self.r2.is_empty() {
            std::fs::write(dir.join("r2.csv"), self.r2_csv())?;
        }
        if !self.predictions.is_empty() {
            std::fs::write(dir.join("predictions.csv"), self.predictions_csv())?;
        }
        Ok(())
    }

    /// Plain-text tables for the terminal.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        if !self.forecasts.is_empty() {
            let _ = writeln!(
                s,
                "{:>6} {:>7} {:>7} {:<12} {:<6} {:>10} {:>10} {:>8}",
                "window", "horizon", "channel", "method", "metric", "mean", "p90", "diverged"
            );
            for r in &self.forecasts {
                let metric = if r.metric == ErrorMetric::Mape { "mape" } else { "smape" };
                let _ = writeln!(
                    s,
                    "{:>6} {:>7} {:>7} {:<12} {:<6} {:>10.3} {:>10.3} {:>7.1}%",
                    r.window, r.horizon, r.channel, r.method, metric, r.mean, r.p90, r.divergence_pct
                );
            }
        }
        if !self.r2.is_empty() {
            let _ = writeln!(
                s,
                "{:>6} {:<10} {:<14} {:>9} {:>6} {:>9}",
                "noise", "target", "section", "scope", "count", "R2"
            );
            for r in &self.r2 {
                let v = r.r2.map_or("undefined".to_string(), |v| format!("{v:.4}"));
                let _ = writeln!(
                    s,
                    "{:>6} {:<10} {:<14} {:>9} {:>6} {:>9}",
                    r.level, r.target, r.section, r.scope, r.count, v
                );
            }
        }
        s
    }
}

/// Predictions for many windows, batched by row count.
pub fn predict_windows(model: &SetModel, windows: &[LabeledWindow]) -> Result<Vec<Vec<f64>>> {
    let mut out = vec![Vec::new(); windows.len()];
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.sort_by_key(|&i| windows[i].inputs.rows());
    for group in order.chunk_by(|&a, &b| windows[a].inputs.rows() == windows[b].inputs.rows()) {
        for chunk in group.chunks(32) {
            let refs: Vec<&Tensor> = chunk.iter().map(|&i| &windows[i].inputs).collect();
            let p = model.predict_batch(&refs)?;
            for (r, &i) in chunk.iter().enumerate() {
                out[i] = p.row_slice(r).to_vec();
            }
        }
    }
    Ok(out)
}

fn r2_or_none(pred: &[f64], truth: &[f64]) -> Option<f64> {
    match r2(pred, truth) {
        Ok(v) => Some(v),
        Err(e) => {
            log::warn!("{e}");
            None
        }
    }
}

/// Per-size, inverse-size weighted and pooled R² rows for one target.
fn r2_rows(level: f64, target: &str, section: &str, points: &[(usize, f64, f64)]) -> Vec<R2Row> {
    let mut by_size: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for &(size, t, p) in points {
        let e = by_size.entry(size).or_default();
        e.0.push(p);
        e.1.push(t);
    }
    let row = |scope: String, count: usize, r2: Option<f64>| R2Row {
        level,
        target: target.to_string(),
        section: section.to_string(),
        scope,
        count,
        r2,
    };
    let mut rows = Vec::new();
    let mut scores = Vec::new();
    let mut sizes = Vec::new();
    for (&size, (p, t)) in &by_size {
        let v = r2_or_none(p, t);
        if let Some(v) = v {
            scores.push(v);
            sizes.push(size);
        }
        rows.push(row(size.to_string(), p.len(), v));
    }
    let complete = scores.len() == by_size.len() && !scores.is_empty();
    let weighted = if complete {
        weighted_r2(&scores, &sizes).ok()
    } else {
        None
    };
    rows.push(row("weighted".into(), points.len(), weighted));
    let (p, t): (Vec<f64>, Vec<f64>) = points.iter().map(|&(_, t, p)| (p, t)).unzip();
    rows.push(row("pooled".into(), points.len(), r2_or_none(&p, &t)));
    rows
}

fn model_input(model: &SetModel, tr: &Trajectory, w: &Window) -> Result<Tensor> {
    let x = window_features(tr, w)?;
    Ok(if model.single_row() {
        Tensor::row(x.row_slice(x.rows() - 1))
    } else {
        x
    })
}

/// Forecast errors on the test trajectories for every evaluation width and
/// horizon, from the model's Ξ and from a fit on the forecast window itself
/// (the label the model was trained to reproduce).
pub fn evaluate_app1(cfg: &ExperimentConfig, d: &App1Data, model: &SetModel) -> Result<Vec<ResultRow>> {
    let s = spec1(cfg)?;
    let lib = app1_library(s);
    let regressor = Stlsq(s.stlsq);
    let opts = ForecastOptions {
        divergence_factor: cfg.evaluation.divergence_factor,
        ode: s.integrator,
    };
    let mut rows = Vec::new();
    for &width in &cfg.evaluation.windows {
        for &multiple in &cfg.evaluation.horizons {
            let mut by_model: Vec<ForecastResult> = Vec::new();
            let mut by_oracle: Vec<ForecastResult> = Vec::new();
            for &i in &d.splits.test {
                let tr = &d.trajectories[i];
                for w in make_windows(i, tr.len(), width, WindowMode::Fixed, width) {
                    if w.end() + multiple * width > tr.len() {
                        continue;
                    }
                    let xi = model.predict(&model_input(model, tr, &w)?)?;
                    by_model.push(forecast(&xi, &lib, tr, &w, multiple, &opts)?);
                    let next = Window {
                        source: i,
                        start: w.end(),
                        len: width,
                        mode: WindowMode::Fixed,
                    };
                    match identify_local(tr, &next, 0, &lib, &regressor, &s.derivative) {
                        Ok(c) => by_oracle.push(forecast(c.coefficients.data(), &lib, tr, &w, multiple, &opts)?),
                        Err(e) => log::warn!("trajectory {i}: {e}"),
                    }
                }
            }
            for (method, results) in [("model", &by_model), ("label-oracle", &by_oracle)] {
                if results.is_empty() {
                    continue;
                }
                for (c, channel) in ["x", "y"].iter().enumerate() {
                    for metric in [ErrorMetric::Mape, ErrorMetric::Smape] {
                        let policy = match metric {
                            ErrorMetric::Mape => OutlierPolicy::LogZScore {
                                threshold: cfg.evaluation.outlier_z,
                            },
                            ErrorMetric::Smape => OutlierPolicy::Keep,
                        };
                        match summarize_forecasts(results, metric, c, policy) {
                            Ok(m) => rows.push(ResultRow {
                                window: width,
                                horizon: multiple,
                                channel: channel.to_string(),
                                method: method.into(),
                                metric,
                                count: m.count,
                                mean: m.mean,
                                median: m.median,
                                p90: m.p90,
                                divergence_pct: m.divergence_pct,
                                outliers_removed: m.outliers_removed,
                            }),
                            Err(Error::UndefinedMetric(e)) => log::warn!("{method} w={width} h={multiple}: {e}"),
                            Err(e) => return Err(e),
                        }
                    }
                }
            }
        }
    }
    Ok(rows)
}

/// R² against the true parameters on the held-out systems, for prefixes of
/// the training section (interpolation) and of the section after it
/// (extrapolation). `models` is keyed by [`app2_model_name`].
pub fn evaluate_app2(
    cfg: &ExperimentConfig,
    d: &App2Data,
    models: &BTreeMap<String, SetModel>,
) -> Result<(Vec<R2Row>, Vec<PredictionRow>)> {
    let s = spec2(cfg)?;
    let n_train = app2_train_rows(s);
    let mut rows = Vec::new();
    let mut predictions = Vec::new();
    for (k, &level) in d.levels.iter().enumerate() {
        for &target in &s.targets {
            let Some(model) = models.get(&app2_model_name(level, target)) else {
                log::warn!("no model for {}", app2_model_name(level, target));
                continue;
            };
            for (section, start) in [("interpolation", 0), ("extrapolation", n_train)] {
                let spec = PrefixSpec {
                    start,
                    sizes: s.prefix_sizes.clone(),
                };
                let mut windows = Vec::new();
                for &i in &d.splits.test {
                    let tr = &d.trajectories[k][i];
                    let truth = tr
                        .provenance
                        .parameters
                        .get(target.name())
                        .copied()
                        .ok_or_else(|| Error::config(format!("system {i} lacks parameter {}", target.name())))?;
                    windows.extend(lorenz_prefix_windows(i, tr, &[truth], &spec)?);
                }
                if windows.is_empty() {
                    continue;
                }
                let pred = predict_windows(model, &windows)?;
                let points: Vec<(usize, f64, f64)> = windows
                    .iter()
                    .zip(&pred)
                    .map(|(w, p)| (w.inputs.rows(), w.target[0], p[0]))
                    .collect();
                for (w, &(size, truth, predicted)) in windows.iter().zip(&points) {
                    predictions.push(PredictionRow {
                        level,
                        target: target.name().into(),
                        section: section.into(),
                        source: w.source,
                        size,
                        truth,
                        predicted,
                    });
                }
                rows.extend(r2_rows(level, target.name(), section, &points));
            }
        }
    }
    Ok((rows, predictions))
}

/// R² per target and window length on the test runs; `models` is keyed by
/// noise level directory name (`xi_0`, …).
pub fn evaluate_app3(
    cfg: &ExperimentConfig,
    d: &App3Data,
    models: &BTreeMap<String, SetModel>,
) -> Result<(Vec<R2Row>, Vec<PredictionRow>)> {
    let s = spec3(cfg)?;
    let mut rows = Vec::new();
    let mut predictions = Vec::new();
    for (k, &level) in d.levels.iter().enumerate() {
        let Some(model) = models.get(&level_dir(level)) else {
            log::warn!("no model for {}", level_dir(level));
            continue;
        };
        let test: Vec<Trajectory> = d.splits.test.iter().map(|&i| d.probes[k][i].clone()).collect();
        let windows = assemble_app3(&test, &s.steps)?.windows;
        if windows.is_empty() {
            continue;
        }
        let pred = predict_windows(model, &windows)?;
        for (j, name) in model.config().targets.iter().enumerate() {
            let points: Vec<(usize, f64, f64)> = windows
                .iter()
                .zip(&pred)
                .map(|(w, p)| (w.inputs.rows(), w.target[j], p[j]))
                .collect();
            for (w, &(size, truth, predicted)) in windows.iter().zip(&points) {
                predictions.push(PredictionRow {
                    level,
                    target: name.clone(),
                    section: "test".into(),
                    source: d.splits.test[w.source],
                    size,
                    truth,
                    predicted,
                });
            }
            rows.extend(r2_rows(level, name, "test", &points));
        }
    }
    Ok((rows, predictions))
}

/// Loads a trained run and evaluates it on its dataset's test split.
pub fn evaluate(cfg: &ExperimentConfig, data_dir: &Path, run_dir: &Path) -> Result<Evaluation> {
    let run_path = run_dir.join("run.json");
    if !run_path.exists() {
        return Err(Error::Stale(format!(
            "{} holds no trained run; run train first",
            run_dir.display()
        )));
    }
    let run: RunManifest = serde_json::from_slice(&std::fs::read(&run_path)?)?;
    if run.train_hash != train_hash(cfg) {
        return Err(Error::Stale(format!(
            "run in {} was trained with a different configuration",
            run_dir.display()
        )));
    }
    let data = load_dataset(cfg, data_dir)?;
    let mut models = BTreeMap::new();
    for m in &run.models {
        models.insert(m.name.clone(), SetModel::load(&run_dir.join(&m.checkpoint))?);
    }
    let mut out = Evaluation {
        kind: cfg.system.kind().into(),
        config_hash: cfg.hash(),
        data_hash: cfg.data_hash(),
        ..Default::default()
    };
    match &data {
        Dataset::App1(d) => {
            let model = models
                .get("local")
                .ok_or_else(|| Error::Incompatible("run has no local model".into()))?;
            out.forecasts = evaluate_app1(cfg, d, model)?;
        }
        Dataset::App2(d) => (out.r2, out.predictions) = evaluate_app2(cfg, d, &models)?,
        Dataset::App3(d) => (out.r2, out.predictions) = evaluate_app3(cfg, d, &models)?,
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Identification {
    pub model: String,
    pub config_hash: String,
    pub window: String,
    pub window_sha256: String,
    pub rows: usize,
    pub outputs: BTreeMap<String, f64>,
    /// Median wall time of one forward pass over the warm repeats.
    pub latency_ms: f64,
    pub latency_p90_ms: f64,
    pub repeats: usize,
}

/// Parses a window CSV whose header must list exactly the model features.
pub fn read_window_csv(text: &str, features: &[String]) -> Result<Tensor> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::usage("window CSV is empty"))?
        .split(',')
        .map(|h| h.trim().to_string())
        .collect();
    if header != features {
        return Err(Error::config(format!(
            "window columns [{}] do not match the model features [{}]",
            header.join(", "),
            features.join(", ")
        )));
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let row = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::config(format!("window row {}: {e}", n + 1)))?;
        if row.len() != features.len() {
            return Err(Error::config(format!("window row {} has {} values", n + 1, row.len())));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("window row {} is not finite", n + 1)));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::usage("window CSV has no rows"));
    }
    Tensor::from_rows(&rows)
}

/// Runs a checkpoint on one window and times it: one warm-up pass, then
/// `repeats` timed passes.
pub fn identify_window(checkpoint: &Path, window_csv: &Path, repeats: usize) -> Result<Identification> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = SetModel::from_checkpoint(&ck)?;
    let text = std::fs::read_to_string(window_csv)?;
    let mut x = read_window_csv(&text, &model.config().features)?;
    if model.single_row() && x.rows() > 1 {
        log::info!("single-row model: using the last of {} rows", x.rows());
        x = Tensor::row(x.row_slice(x.rows() - 1));
    }
    let mut out = model.predict(&x)?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        out = model.predict(&x)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    let (median, p90) = if times.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        (percentile(&times, 50.0), percentile(&times, 90.0))
    };
    Ok(Identification {
        model: model.config().kind().into(),
        config_hash: ck.config_hash.clone(),
        window: window_csv.display().to_string(),
        window_sha256: hex::encode(Sha256::digest(text.as_bytes())),
        rows: x.rows(),
        outputs: model.config().targets.iter().cloned().zip(out).collect(),
        latency_ms: median,
        latency_p90_ms: p90,
        repeats,
    })
}
