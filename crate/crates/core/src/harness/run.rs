//! Single runs, training-stage sweeps and parallel grid sweeps.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use super::config::{derive_seed, RawConfig, ScenarioConfig, Schedule, Topology, Vantage};
use super::data::{Batch, Dataset};
use super::io;
use super::sim::{Federation, Observation, Round};
use crate::attack::{dlg_attack, dlg_attack_batched, recover_tokens, AttackConfig, AttackResult, GroundTruth};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::metrics::{judge_defendability, match_samples, match_tokens, mse_slices, EvalReport};
use crate::models::{init_params, GradSet, ParamSet, EMBEDDING};

/// What one attack produced, scored against the private batch.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub report: EvalReport,
    pub round: usize,
    pub samples: usize,
    pub final_distance: f64,
    /// Attack iterations actually run.
    pub iterations: usize,
    /// First iteration whose matched MSE fell below the configured level.
    pub iterations_to_reach: Option<usize>,
    pub converged: bool,
    pub stalls: usize,
    pub overflow: usize,
    pub failure: Option<String>,
    /// Recovered and true sentences, in matched order, for token models.
    pub tokens: Option<(Vec<Vec<usize>>, Vec<Vec<usize>>)>,
}

pub fn build_federation(cfg: &ScenarioConfig) -> Result<Federation> {
    let dataset = Dataset::load(&cfg.data, &cfg.model, derive_seed(cfg.seed, "data", 0))?;
    let params = init_params(&cfg.model, derive_seed(cfg.seed, "init", 0))?;
    Federation::new(
        cfg.model.clone(),
        dataset,
        params,
        cfg.workers,
        cfg.batch,
        cfg.topology,
        cfg.vantage,
        cfg.defense.clone(),
        cfg.train_lr,
        derive_seed(cfg.seed, "defense", 0),
    )
}

pub fn attack_config(cfg: &ScenarioConfig) -> AttackConfig {
    AttackConfig {
        seed: derive_seed(cfg.seed, "attack", 0),
        ..cfg.attack.clone()
    }
}

/// The observation named by `cfg.target`.
pub fn target(cfg: &ScenarioConfig, round: &Round) -> Result<Observation> {
    round.observed.get(cfg.target).cloned().ok_or_else(|| {
        Error::InvalidArgument(format!(
            "target {} but the attacker observes {} gradients",
            cfg.target,
            round.observed.len()
        ))
    })
}

/// Attack `grads` taken at weights `params`; `batch` is used only for
/// scoring.
pub fn attack_gradients(
    cfg: &ScenarioConfig,
    params: &ParamSet,
    grads: &GradSet,
    batch: &Batch,
) -> Result<(AttackResult, EvalReport, Option<(Vec<Vec<usize>>, Vec<Vec<usize>>)>)> {
    let spec = &cfg.model;
    let truth = GroundTruth {
        x: batch.truth(params)?,
        labels: batch.labels.clone(),
        clamp: spec.is_image(),
    };
    let acfg = attack_config(cfg);
    let result = match cfg.schedule {
        Schedule::Joint => dlg_attack(spec, params, grads, batch.len(), &acfg, Some(&truth))?,
        Schedule::Cyclic => dlg_attack_batched(spec, params, grads, batch.len(), &acfg, Some(&truth))?,
    };
    let (report, tokens) = evaluate(cfg, params, batch, &truth, &result)?;
    Ok((result, report, tokens))
}

fn evaluate(
    cfg: &ScenarioConfig,
    params: &ParamSet,
    batch: &Batch,
    truth: &GroundTruth,
    result: &AttackResult,
) -> Result<(EvalReport, Option<(Vec<Vec<usize>>, Vec<Vec<usize>>)>)> {
    let n = batch.len();
    let (permutation, per_sample_mse) = if n == 1 {
        (vec![0], vec![mse_slices(result.x.data(), truth.x.data(), truth.clamp)])
    } else {
        let m = match_samples(&result.x, &truth.x, truth.clamp)?;
        (m.perm, m.per_sample)
    };
    let mse = per_sample_mse.iter().sum::<f64>() / n as f64;
    let hits = (0..n).filter(|&i| result.labels[i] == batch.labels[permutation[i]]).count();
    let mut token_match_rate = None;
    let mut tokens = None;
    if let Some(true_tokens) = batch.tokens() {
        let table = params
            .get(EMBEDDING)
            .ok_or_else(|| Error::KeyMismatch(format!("missing `{EMBEDDING}`")))?;
        let flat = recover_tokens(&result.x, table)?;
        let len = flat.len() / n;
        let recovered: Vec<Vec<usize>> = flat.chunks(len).map(<[usize]>::to_vec).collect();
        let matched: Vec<Vec<usize>> = permutation.iter().map(|&j| true_tokens[j].clone()).collect();
        let rec: Vec<usize> = recovered.concat();
        token_match_rate = Some(match_tokens(&rec, &matched.concat())?);
        tokens = Some((recovered, matched));
    }
    let report = EvalReport {
        per_sample_mse,
        mse,
        layer_distance: result.final_layers.clone(),
        token_match_rate,
        verdict: judge_defendability(mse, cfg.threshold),
        permutation,
        label_accuracy: hits as f64 / n as f64,
    };
    Ok((report, tokens))
}

fn summarize(
    cfg: &ScenarioConfig,
    round: usize,
    overflow: usize,
    result: &AttackResult,
    report: EvalReport,
    tokens: Option<(Vec<Vec<usize>>, Vec<Vec<usize>>)>,
) -> RunSummary {
    RunSummary {
        samples: report.per_sample_mse.len(),
        report,
        round,
        final_distance: result.final_distance,
        iterations: result.trace.len() - 1,
        iterations_to_reach: result.iterations_to(cfg.reach),
        converged: result.converged,
        stalls: result.stalls,
        overflow,
        failure: result.failure.clone(),
        tokens,
    }
}

/// Train to the configured stage, observe one round, attack it. Writes
/// images to `image_dir` when enabled.
pub fn run_scenario(cfg: &ScenarioConfig, image_dir: Option<&Path>) -> Result<(RunSummary, AttackResult)> {
    let mut fed = build_federation(cfg)?;
    fed.train_until(cfg.attack_round())?;
    let round = fed.simulate_round()?;
    let obs = target(cfg, &round)?;
    let (result, report, tokens) = attack_gradients(cfg, &round.params, &obs.grads, &obs.batch)?;
    if let Some(dir) = image_dir.filter(|_| cfg.write_images) {
        write_images(cfg, &result, &obs.batch, dir)?;
    }
    Ok((summarize(cfg, round.index, round.overflow, &result, report, tokens), result))
}

fn write_images(cfg: &ScenarioConfig, result: &AttackResult, batch: &Batch, dir: &Path) -> Result<()> {
    let (Some(dims), Some(truth)) = (cfg.model.image_dims(), batch_images(batch)) else {
        return Ok(());
    };
    let per: usize = dims.iter().product();
    for i in 0..batch.len() {
        let rec = Tensor::new(dims.to_vec(), result.x.data()[i * per..(i + 1) * per].to_vec())?;
        let tru = Tensor::new(dims.to_vec(), truth.data()[i * per..(i + 1) * per].to_vec())?;
        io::write_image(&rec, &dir.join(format!("recovered-{i}.{}", ext(dims))))?;
        io::write_image(&tru, &dir.join(format!("truth-{i}.{}", ext(dims))))?;
    }
    Ok(())
}

fn ext(dims: [usize; 3]) -> &'static str {
    if dims[0] == 3 {
        "ppm"
    } else {
        "pgm"
    }
}

fn batch_images(batch: &Batch) -> Option<&Tensor> {
    match &batch.input {
        super::data::BatchInput::Images(x) => Some(x),
        super::data::BatchInput::Tokens(_) => None,
    }
}

/// A saved observation: the weights and gradient of one round.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub stage: f64,
    pub round: usize,
    pub overflow: usize,
    pub params_path: PathBuf,
    pub grads_path: PathBuf,
    /// Private batch, kept for scoring only.
    pub batch: Batch,
}

/// Train once, saving `(W, observed gradient)` at each stage of
/// `train.steps` under `out_dir/stage-<round>/`. The saved round is exactly
/// the round a live run at that stage attacks.
pub fn snapshot_stages(cfg: &ScenarioConfig, stages: &[f64]) -> Result<Vec<Snapshot>> {
    if stages.is_empty() {
        return Err(Error::InvalidArgument("no training stages given".into()));
    }
    if let Some(s) = stages.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::InvalidArgument(format!("stage {s} is not in [0, 1]")));
    }
    let rounds: Vec<usize> = stages
        .iter()
        .map(|&s| (s * cfg.train_steps as f64).round() as usize)
        .collect();
    let mut order: Vec<usize> = (0..stages.len()).collect();
    order.sort_by_key(|&i| rounds[i]);

    let mut fed = build_federation(cfg)?;
    let mut saved: BTreeMap<usize, Snapshot> = BTreeMap::new();
    for &i in &order {
        let r = rounds[i];
        if saved.contains_key(&r) {
            continue;
        }
        fed.train_until(r)?;
        let round = fed.simulate_round()?;
        let obs = target(cfg, &round)?;
        let dir = cfg.out_dir.join(format!("stage-{r:05}"));
        let snap = Snapshot {
            stage: stages[i],
            round: r,
            overflow: round.overflow,
            params_path: dir.join("params.glpk"),
            grads_path: dir.join("grads.glpk"),
            batch: obs.batch,
        };
        io::save_tensors(&round.params, &snap.params_path)?;
        io::save_tensors(&obs.grads, &snap.grads_path)?;
        saved.insert(r, snap);
    }
    Ok(rounds
        .iter()
        .zip(stages)
        .map(|(r, &s)| Snapshot {
            stage: s,
            ..saved[r].clone()
        })
        .collect())
}

/// Snapshot every stage, then attack each snapshot from disk.
pub fn run_training_stage_sweep(cfg: &ScenarioConfig, stages: &[f64]) -> Result<Vec<(Snapshot, RunSummary)>> {
    snapshot_stages(cfg, stages)?
        .into_iter()
        .map(|snap| {
            let params = io::load_tensors(&snap.params_path)?;
            let grads = io::load_tensors(&snap.grads_path)?;
            let (result, report, tokens) = attack_gradients(cfg, &params, &grads, &snap.batch)?;
            let summary = summarize(cfg, snap.round, snap.overflow, &result, report, tokens);
            Ok((snap, summary))
        })
        .collect()
}

/// One row of a sweep.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub index: usize,
    /// Axis values of this grid point, in axis order.
    pub point: Vec<(String, String)>,
    pub config: ScenarioConfig,
    pub outcome: std::result::Result<RunSummary, String>,
    pub elapsed_ms: f64,
}

const LEADING: &[&str] = &["run", "seed"];
const TRAILING: &[&str] = &[
    "model",
    "defense",
    "workers",
    "topology",
    "observe",
    "batch",
    "round",
    "samples",
    "mse",
    "mse_max",
    "label_accuracy",
    "token_match",
    "verdict",
    "final_distance",
    "iterations",
    "iterations_to_reach",
    "converged",
    "stalls",
    "overflow",
];

/// Column names: run index and seed, the sweep axes other than `seed`,
/// fixed summary columns, two columns per layer, `error`, then
/// `elapsed_ms` if timed.
pub fn csv_header(axes: &[String], layers: &[String], timing: bool) -> Vec<String> {
    let mut h: Vec<String> = LEADING.iter().map(|s| s.to_string()).collect();
    h.extend(axes.iter().cloned());
    h.extend(TRAILING.iter().map(|s| s.to_string()));
    for l in layers {
        h.push(format!("layer.{l}.mse"));
        h.push(format!("layer.{l}.sum"));
    }
    h.push("error".into());
    if timing {
        h.push("elapsed_ms".into());
    }
    h
}

fn num(v: f64) -> String {
    format!("{v:e}")
}

impl RunRecord {
    pub fn csv_row(&self, layers: &[String], timing: bool) -> Vec<String> {
        let c = &self.config;
        let mut row = vec![self.index.to_string(), c.seed.to_string()];
        row.extend(self.point.iter().filter(|(k, _)| k != "seed").map(|(_, v)| v.clone()));
        let model = match c.model.kind {
            crate::models::ModelKind::Mlp { .. } => "mlp",
            crate::models::ModelKind::ConvNet { .. } => "convnet",
            crate::models::ModelKind::EmbedClassifier { .. } => "embed",
        };
        row.extend([
            model.to_string(),
            c.defense.name().to_string(),
            c.workers.to_string(),
            match c.topology {
                Topology::Centralized => "centralized",
                Topology::Ring => "ring",
            }
            .to_string(),
            match c.vantage {
                Vantage::PerWorker => "per-worker",
                Vantage::Average => "average",
            }
            .to_string(),
            c.batch.to_string(),
        ]);
        let error = match &self.outcome {
            Ok(s) => {
                let r = &s.report;
                row.extend([
                    s.round.to_string(),
                    s.samples.to_string(),
                    num(r.mse),
                    num(r.per_sample_mse.iter().cloned().fold(0.0, f64::max)),
                    num(r.label_accuracy),
                    r.token_match_rate.map(num).unwrap_or_default(),
                    r.verdict.to_string(),
                    num(s.final_distance),
                    s.iterations.to_string(),
                    s.iterations_to_reach.map(|i| i.to_string()).unwrap_or_default(),
                    s.converged.to_string(),
                    s.stalls.to_string(),
                    s.overflow.to_string(),
                ]);
                for l in layers {
                    match r.layer_distance.get(l) {
                        Some(d) => row.extend([num(d.mse), num(d.sum)]),
                        None => row.extend([String::new(), String::new()]),
                    }
                }
                s.failure.clone().unwrap_or_default()
            }
            Err(e) => {
                row.extend(std::iter::repeat(String::new()).take(TRAILING.len() - 6 + 2 * layers.len()));
                e.clone()
            }
        };
        row.push(error);
        if timing {
            row.push(format!("{:.3}", self.elapsed_ms));
        }
        row
    }
}

/// Worker threads for sweeps: `GRADLEAK_THREADS` if set (0 means serial),
/// else the available parallelism.
pub fn thread_count() -> usize {
    match std::env::var("GRADLEAK_THREADS").ok().and_then(|v| v.trim().parse().ok()) {
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    }
}

fn execute(index: usize, point: Vec<(String, String)>, config: ScenarioConfig) -> RunRecord {
    let start = Instant::now();
    let dir = config.out_dir.join(format!("run-{index:04}"));
    let outcome = run_scenario(&config, Some(&dir)).map(|(s, _)| s).map_err(|e| e.to_string());
    RunRecord {
        index,
        point,
        config,
        outcome,
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    }
}

/// Run the cartesian product of the sweep axes and write one CSV row per
/// point to `csv_path`, in grid order, flushing each row as soon as every
/// earlier row is written. Invalid grid points fail before anything runs;
/// failing runs are recorded in the `error` column.
pub fn run_sweep(raw: &RawConfig, csv_path: &Path, threads: usize) -> Result<Vec<RunRecord>> {
    let axes: Vec<String> = raw
        .axes()
        .map(|(k, _)| k.to_string())
        .filter(|k| k != "seed")
        .collect();
    let points = raw
        .expand()
        .into_iter()
        .map(|(point, r)| Ok((point, ScenarioConfig::from_raw(&r)?)))
        .collect::<Result<Vec<_>>>()?;
    let timing = points.first().is_some_and(|(_, c)| c.timing);
    let mut layers: Vec<String> = Vec::new();
    for (_, c) in &points {
        for name in c.model.shared_param_names() {
            if !layers.contains(&name) {
                layers.push(name);
            }
        }
    }

    if let Some(dir) = csv_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut writer = csv::Writer::from_path(csv_path)?;
    writer.write_record(csv_header(&axes, &layers, timing))?;
    writer.flush().map_err(|e| Error::io(csv_path, e))?;

    let total = points.len();
    let mut records: Vec<RunRecord> = Vec::with_capacity(total);
    let mut emit = |rec: RunRecord, writer: &mut csv::Writer<std::fs::File>| -> Result<()> {
        writer.write_record(rec.csv_row(&layers, timing))?;
        writer.flush().map_err(|e| Error::io(csv_path, e))?;
        records.push(rec);
        Ok(())
    };

    if threads == 0 || total <= 1 {
        for (i, (point, config)) in points.into_iter().enumerate() {
            emit(execute(i, point, config), &mut writer)?;
        }
    } else {
        let next = AtomicUsize::new(0);
        let (tx, rx) = mpsc::channel();
        let points = &points;
        std::thread::scope(|scope| -> Result<()> {
            for _ in 0..threads.min(total) {
                let tx = tx.clone();
                let next = &next;
                scope.spawn(move || loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= total {
                        break;
                    }
                    let (point, config) = points[i].clone();
                    if tx.send(execute(i, point, config)).is_err() {
                        break;
                    }
                });
            }
            drop(tx);
            let mut pending = BTreeMap::new();
            let mut written = 0;
            for rec in rx {
                pending.insert(rec.index, rec);
                while let Some(rec) = pending.remove(&written) {
                    emit(rec, &mut writer)?;
                    written += 1;
                }
            }
            Ok(())
        })?;
    }
    Ok(records)
}
