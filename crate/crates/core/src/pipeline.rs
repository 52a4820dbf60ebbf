//! The command pipeline: synth/prepare → train → generate → eval → report.
//!
//! A run directory holds everything one configuration produces:
//!
//! ```text
//! run/
//!   config.toml        resolved configuration
//!   split.json         held-out and training conditions
//!   record.json        per-epoch losses, rewritten after every epoch
//!   checkpoint.bin     parameters as little-endian f64, in name order
//!   checkpoint.json    parameter names, shapes and offsets
//!   pred/              predicted cells in shard format
//!   report.json        metric report
//!   report.csv
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::celleval::{evaluate, MetricReport, PerturbationGroup};
use crate::config::RunConfig;
use crate::datastore::{
    preprocess, select_hvg, synth_generate, write_atomic, write_dataset, write_truth_csv,
    Condition, Dataset, DenseData, Manifest, Sampler, SparseBlock, Store, ValueSpace,
};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, train, EpochRecord, Model};
use crate::ndmath::{ParamSet, Tensor};
use crate::setenc::CellSetBatch;
use crate::transport::ConditionBatch;

pub const CONFIG_FILE: &str = "config.toml";
pub const SPLIT_FILE: &str = "split.json";
pub const RECORD_FILE: &str = "record.json";
pub const CHECKPOINT_STEM: &str = "checkpoint";
pub const PRED_DIR: &str = "pred";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const TRUTH_FILE: &str = "truth.csv";

/// Independent random streams derived from the run seed.
mod streams {
    pub const INIT: u64 = 0;
    pub const SPLIT: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const GENERATE: u64 = 3;
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn sub_seed(seed: u64, stream: u64) -> u64 {
    use rand::Rng;
    rng_for(seed, stream).random()
}

/// Writes a synthetic dataset and its planted-effect table into `out`.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    let synth = synth_generate(&cfg.synth)?;
    let manifest = write_dataset(&synth.dataset, out)?;
    write_truth_csv(&out.join(TRUTH_FILE), &synth)?;
    info!(
        "wrote {} groups and {} control shards to {}",
        manifest.groups.len(),
        manifest.controls.len(),
        out.display()
    );
    Ok(manifest)
}

/// Normalizes counts (log data passes through) and optionally keeps the top variable genes.
pub fn cmd_prepare(cfg: &RunConfig, input: &Path, out: &Path) -> Result<Manifest> {
    let store = Store::open(input)?;
    let mut data = store.load()?;
    if data.space == ValueSpace::Counts {
        for b in data.groups.values_mut().chain(data.controls.values_mut()) {
            *b = preprocess(b, &cfg.preprocess)?;
        }
        data.space = ValueSpace::Log;
    }
    let kept = match cfg.hvg {
        Some(keep) => {
            let all = stack_blocks(data.groups.values().chain(data.controls.values()), data.genes.len());
            let kept = select_hvg(&all, keep)?;
            for b in data.groups.values_mut().chain(data.controls.values_mut()) {
                *b = b.select_columns(&kept)?;
            }
            data.genes = kept.iter().map(|&g| data.genes[g].clone()).collect();
            Some(kept)
        }
        None => None,
    };
    let manifest = write_dataset(&data, out)?;
    let truth = input.join(TRUTH_FILE);
    if truth.is_file() {
        copy_truth(&truth, &out.join(TRUTH_FILE), &data.genes)?;
    }
    info!(
        "prepared {} genes{}",
        data.genes.len(),
        if kept.is_some() { " after variance selection" } else { "" }
    );
    Ok(manifest)
}

fn stack_blocks<'a>(blocks: impl Iterator<Item = &'a SparseBlock>, genes: usize) -> Tensor {
    let mut data = Vec::new();
    let mut rows = 0;
    for b in blocks {
        rows += b.rows();
        data.extend(b.to_dense().into_data());
    }
    Tensor::new(&[rows, genes], data).expect("blocks share the gene count")
}

fn copy_truth(from: &Path, to: &Path, genes: &[String]) -> Result<()> {
    let keep: BTreeSet<&str> = genes.iter().map(String::as_str).collect();
    let mut r = csv::Reader::from_path(from)?;
    let mut w = csv::Writer::from_path(to)?;
    w.write_record(r.headers()?)?;
    for rec in r.records() {
        let rec = rec?;
        if rec.get(1).is_some_and(|g| keep.contains(g)) {
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::io(to, e))
}

/// Conditions used for training and those held out for evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<Condition>,
    pub holdout: Vec<Condition>,
}

/// Holds out (cell type, perturbation) combinations: the configured labels, or
/// `holdout_count` random combinations with distinct perturbations.
pub fn split_conditions(cfg: &RunConfig, manifest: &Manifest) -> Result<Split> {
    let all = manifest.conditions();
    let combos: BTreeSet<(usize, usize)> = all.iter().map(|c| (c.cell_type, c.perturbation)).collect();
    let held: BTreeSet<(usize, usize)> = if cfg.data.holdout.is_empty() {
        let mut pool: Vec<(usize, usize)> = combos.iter().copied().collect();
        pool.shuffle(&mut rng_for(cfg.seed, streams::SPLIT));
        let mut seen = BTreeSet::new();
        let picked: BTreeSet<(usize, usize)> = pool
            .into_iter()
            .filter(|&(_, p)| seen.insert(p))
            .take(cfg.data.holdout_count)
            .collect();
        if picked.len() < cfg.data.holdout_count {
            return Err(Error::Config(format!(
                "cannot hold out {} combinations with distinct perturbations",
                cfg.data.holdout_count
            )));
        }
        picked
    } else {
        cfg.data
            .holdout
            .iter()
            .map(|label| parse_combo(manifest, label))
            .collect::<Result<_>>()?
    };
    let (holdout, train): (Vec<Condition>, Vec<Condition>) =
        all.into_iter().partition(|c| held.contains(&(c.cell_type, c.perturbation)));
    if train.is_empty() {
        return Err(Error::Config("every condition is held out".into()));
    }
    Ok(Split { train, holdout })
}

fn label_index(labels: &[String], what: &str, name: &str) -> Result<usize> {
    labels
        .iter()
        .position(|l| l == name)
        .ok_or_else(|| Error::Lookup(format!("unknown {what} {name:?}")))
}

/// `"cell_type|perturbation"` to ids.
fn parse_combo(m: &Manifest, label: &str) -> Result<(usize, usize)> {
    let (c, p) = label
        .split_once('|')
        .ok_or_else(|| Error::Config(format!("held-out combination {label:?} is not \"type|perturbation\"")))?;
    Ok((label_index(&m.cell_types, "cell type", c)?, label_index(&m.perturbations, "perturbation", p)?))
}

/// `"cell_type|perturbation|batch"` to a condition of the manifest's vocabulary.
pub fn parse_condition(m: &Manifest, label: &str) -> Result<Condition> {
    let parts: Vec<&str> = label.split('|').collect();
    let [c, p, b] = parts[..] else {
        return Err(Error::Argument(format!(
            "condition {label:?} is not \"type|perturbation|batch\""
        )));
    };
    Ok(Condition {
        cell_type: label_index(&m.cell_types, "cell type", c)?,
        perturbation: label_index(&m.perturbations, "perturbation", p)?,
        batch: label_index(&m.batches, "batch", b)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub epochs: Vec<EpochRecord>,
    pub checkpoint: PathBuf,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn open_log_store(dir: &Path) -> Result<Store> {
    let store = Store::open(dir)?;
    if store.manifest.space != ValueSpace::Log {
        return Err(Error::Ingestion(format!(
            "{} holds raw counts; run prepare first",
            dir.display()
        )));
    }
    Ok(store)
}

fn build_model(cfg: &RunConfig, manifest: &Manifest) -> Result<(Model, ParamSet)> {
    Model::init(
        manifest.genes.len(),
        manifest.vocab(),
        &cfg.encoder,
        &cfg.transport,
        sub_seed(cfg.seed, streams::INIT),
    )
}

/// Trains on every non-held-out condition and writes the run directory.
pub fn cmd_train(cfg: &RunConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let store = open_log_store(&cfg.data.dir)?;
    let split = split_conditions(cfg, &store.manifest)?;
    let out = &cfg.out;
    write_atomic(&out.join(CONFIG_FILE), cfg.to_toml()?.as_bytes())?;
    write_json(&out.join(SPLIT_FILE), &split)?;

    let data = load_dense(&store, &split.train)?;
    let sampler = Sampler::new(&data, &split.train, cfg.train.sampling)?;
    let (model, mut ps) = build_model(cfg, &store.manifest)?;
    info!(
        "training {} parameters on {} conditions, {} held out",
        ps.num_scalars(),
        split.train.len(),
        split.holdout.len()
    );

    let checkpoint = out.join(CHECKPOINT_STEM);
    let mut record = RunRecord {
        config: cfg.clone(),
        epochs: Vec::with_capacity(cfg.train.epochs),
        checkpoint: checkpoint.clone(),
    };
    let record_path = out.join(RECORD_FILE);
    let mut write_err = None;
    train(
        &model,
        &mut ps,
        &data,
        &sampler,
        &cfg.train,
        sub_seed(cfg.seed, streams::TRAIN),
        |e| {
            info!(
                "epoch {:>3} {:?}: total {:.5} mse {:.5} mmd {:.5} flow {:.5} ({:.1}s)",
                e.epoch, e.phase, e.total, e.mse, e.mmd, e.flow, e.seconds
            );
            record.epochs.push(e.clone());
            if write_err.is_none() {
                write_err = write_json(&record_path, &record).err();
            }
        },
    )?;
    if let Some(e) = write_err {
        return Err(e);
    }
    save_checkpoint(&ps, &checkpoint)?;
    Ok(record)
}

/// Groups of `conditions` plus their matched controls.
fn load_dense(store: &Store, conditions: &[Condition]) -> Result<DenseData> {
    let mut groups = BTreeMap::new();
    let mut controls = BTreeMap::new();
    for c in conditions {
        groups.insert(*c, store.read_group(c)?.to_dense());
        let k = c.control_key();
        if let std::collections::btree_map::Entry::Vacant(v) = controls.entry(k) {
            if store.manifest.control(&k).is_some() {
                v.insert(store.read_controls(&k)?.to_dense());
            }
        }
    }
    Ok(DenseData {
        genes: store.manifest.genes.len(),
        groups,
        controls,
    })
}

/// The first `n` control cells, cycling when there are fewer.
pub fn matched_controls(ctrl: &Tensor, n: usize) -> Result<Tensor> {
    let rows = ctrl.shape()[0];
    if rows == 0 {
        return Err(Error::Lookup("control group is empty".into()));
    }
    let g = ctrl.shape()[1];
    let mut data = Vec::with_capacity(n * g);
    for i in 0..n {
        data.extend_from_slice(ctrl.row(i % rows));
    }
    Tensor::new(&[n, g], data)
}

/// Number of cells to predict: the observed group size when known, otherwise every control.
fn target_cells(store: &Store, c: &Condition, controls: usize) -> usize {
    store.manifest.group(c).map(|g| g.shard.cells as usize).unwrap_or(controls)
}

/// Predicts one population per condition from its matched controls, in sets of `cfg.train.cells`.
pub fn predict(
    cfg: &RunConfig,
    model: &Model,
    ps: &ParamSet,
    store: &Store,
    conditions: &[Condition],
) -> Result<Dataset> {
    let vocab = store.manifest.vocab();
    let mut groups = BTreeMap::new();
    let mut controls = BTreeMap::new();
    for (i, c) in conditions.iter().enumerate() {
        let mut cond = ConditionBatch::default();
        cond.push(c.cell_type, c.perturbation, c.batch);
        cond.validate(&vocab)?;
        let k = c.control_key();
        let ctrl_block = store.read_controls(&k)?;
        let n = target_cells(store, c, ctrl_block.rows());
        let x0 = matched_controls(&ctrl_block.to_dense(), n)?;
        let mut rng = rng_for(sub_seed(cfg.seed, streams::GENERATE), i as u64);
        let pred = predict_cells(model, ps, &x0, c, cfg.train.cells, cfg.transport.steps, &mut rng)?;
        groups.insert(*c, SparseBlock::from_dense(n, x0.shape()[1], pred.data())?);
        controls.insert(k, ctrl_block);
    }
    let m = &store.manifest;
    Ok(Dataset {
        space: ValueSpace::Log,
        genes: m.genes.clone(),
        cell_types: m.cell_types.clone(),
        perturbations: m.perturbations.clone(),
        batches: m.batches.clone(),
        groups,
        controls,
    })
}

/// Splits `x0` into near-equal sets of at most `set_size` cells and transports each.
fn predict_cells(
    model: &Model,
    ps: &ParamSet,
    x0: &Tensor,
    c: &Condition,
    set_size: usize,
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let (n, g) = (x0.shape()[0], x0.shape()[1]);
    let chunks = n.div_ceil(set_size.max(1)).max(1);
    let mut out = Vec::with_capacity(n * g);
    let mut start = 0;
    for k in 0..chunks {
        let len = n / chunks + usize::from(k < n % chunks);
        if len == 0 {
            continue;
        }
        let x = CellSetBatch::new(x0.narrow(0, start, len).reshape(&[1, len, g])?)?;
        let mut cond = ConditionBatch::default();
        cond.push(c.cell_type, c.perturbation, c.batch);
        let pred = model.generate(ps, &x, &cond, steps, rng)?;
        out.extend(pred.into_tensor().into_data());
        start += len;
    }
    Tensor::new(&[n, g], out)
}

/// Loads the trained model of a run directory.
pub fn load_model(cfg: &RunConfig, manifest: &Manifest) -> Result<(Model, ParamSet)> {
    let (model, mut ps) = build_model(cfg, manifest)?;
    load_checkpoint(&mut ps, &cfg.out.join(CHECKPOINT_STEM))?;
    Ok((model, ps))
}

/// Writes predictions for `conditions` (the held-out split when `None`) into `run/pred`.
pub fn cmd_generate(cfg: &RunConfig, conditions: Option<&[Condition]>) -> Result<Manifest> {
    cfg.validate()?;
    let store = open_log_store(&cfg.data.dir)?;
    let (model, ps) = load_model(cfg, &store.manifest)?;
    let held;
    let conditions = match conditions {
        Some(c) => c,
        None => {
            let split: Split = read_json(&cfg.out.join(SPLIT_FILE))?;
            held = split.holdout;
            &held
        }
    };
    if conditions.is_empty() {
        return Err(Error::Argument("no conditions to generate".into()));
    }
    let pred = predict(cfg, &model, &ps, &store, conditions)?;
    let manifest = write_dataset(&pred, &cfg.out.join(PRED_DIR))?;
    info!("generated {} groups", manifest.groups.len());
    Ok(manifest)
}

/// Builds evaluation groups for every predicted condition against the observed data.
pub fn eval_groups(pred: &Store, truth: &Store) -> Result<Vec<PerturbationGroup>> {
    if pred.manifest.genes != truth.manifest.genes {
        return Err(Error::Ingestion(format!(
            "predictions cover {} genes, observed data {}; gene lists differ",
            pred.manifest.genes.len(),
            truth.manifest.genes.len()
        )));
    }
    let mut groups = Vec::new();
    for entry in &pred.manifest.groups {
        let c = entry.condition;
        let name = pred.manifest.condition_name(&c);
        let t = truth_condition(truth, &pred.manifest, &c)?;
        let pert = truth.read_group(&t)?.to_dense();
        let ctrl = matched_controls(&truth.read_controls(&t.control_key())?.to_dense(), pert.shape()[0])?;
        let pred_cells = pred.read_group(&c)?.to_dense();
        groups.push(PerturbationGroup {
            name,
            pert,
            ctrl,
            pred: pred_cells,
        });
    }
    Ok(groups)
}

/// Maps a condition between manifests by label.
fn truth_condition(truth: &Store, from: &Manifest, c: &Condition) -> Result<Condition> {
    parse_condition(&truth.manifest, &from.condition_name(c))
}

/// Scores `pred_dir` against `truth_dir` and writes the JSON and CSV reports into `out`.
pub fn cmd_eval(cfg: &RunConfig, pred_dir: &Path, truth_dir: &Path, out: &Path) -> Result<MetricReport> {
    let pred = Store::open(pred_dir)?;
    let truth = Store::open(truth_dir)?;
    let groups = eval_groups(&pred, &truth)?;
    let report = evaluate(&groups, &cfg.eval)?;
    report.write_json(&out.join(REPORT_JSON))?;
    report.write_csv(&out.join(REPORT_CSV))?;
    info!(
        "PDCorr {:.4}, DEOver {}",
        report.mean.pdcorr,
        report.mean.de_over.map_or("n/a".into(), |v| format!("{v:.4}"))
    );
    Ok(report)
}

/// The baselines the trained model is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    /// Predicts the matched controls unchanged.
    ControlCopy,
    /// Adds the mean training effect (perturbed minus control pseudobulk) to the matched controls.
    TrainMean,
}

/// Writes baseline predictions for the held-out conditions of a split into `out`.
pub fn write_baseline(store: &Store, split: &Split, kind: Baseline, out: &Path) -> Result<Manifest> {
    let genes = store.manifest.genes.len();
    let shift = match kind {
        Baseline::ControlCopy => vec![0.0; genes],
        Baseline::TrainMean => {
            let mut acc = vec![0.0; genes];
            for c in &split.train {
                let pert = store.read_group(c)?.to_dense();
                let ctrl = store.read_controls(&c.control_key())?.to_dense();
                for ((a, p), q) in acc.iter_mut().zip(col_means(&pert)).zip(col_means(&ctrl)) {
                    *a += p - q;
                }
            }
            let k = split.train.len().max(1) as f64;
            acc.iter().map(|v| v / k).collect()
        }
    };
    let m = &store.manifest;
    let mut data = Dataset {
        space: ValueSpace::Log,
        genes: m.genes.clone(),
        cell_types: m.cell_types.clone(),
        perturbations: m.perturbations.clone(),
        batches: m.batches.clone(),
        groups: BTreeMap::new(),
        controls: BTreeMap::new(),
    };
    for c in &split.holdout {
        let ctrl_block = store.read_controls(&c.control_key())?;
        let n = target_cells(store, c, ctrl_block.rows());
        let mut x = matched_controls(&ctrl_block.to_dense(), n)?;
        for row in x.data_mut().chunks_mut(genes) {
            for (v, s) in row.iter_mut().zip(&shift) {
                *v = (*v + s).max(0.0);
            }
        }
        data.groups.insert(*c, SparseBlock::from_dense(n, genes, x.data())?);
        data.controls.insert(c.control_key(), ctrl_block);
    }
    write_dataset(&data, out)
}

fn col_means(m: &Tensor) -> Vec<f64> {
    let (n, g) = (m.shape()[0], m.shape()[1]);
    let mut out = vec![0.0; g];
    for i in 0..n {
        for (o, v) in out.iter_mut().zip(m.row(i)) {
            *o += v;
        }
    }
    out.iter().map(|v| v / n.max(1) as f64).collect()
}

/// One row of the cross-run comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub run: String,
    pub variant: String,
    pub pooling: String,
    pub prior: String,
    #[serde(rename = "PDCorr")]
    pub pdcorr: f64,
    #[serde(rename = "DEOver")]
    pub de_over: Option<f64>,
    #[serde(rename = "DEPrec")]
    pub de_prec: Option<f64>,
    #[serde(rename = "DirAgr")]
    pub dir_agr: Option<f64>,
    #[serde(rename = "LFCSpear")]
    pub lfc_spear: Option<f64>,
    #[serde(rename = "MSE")]
    pub mse: f64,
    #[serde(rename = "MAE")]
    pub mae: f64,
}

fn report_row(dir: &Path) -> Result<ReportRow> {
    let cfg = RunConfig::load(&dir.join(CONFIG_FILE))?;
    let report: MetricReport = read_json(&dir.join(REPORT_JSON))?;
    let m = report.mean;
    Ok(ReportRow {
        run: dir.display().to_string(),
        variant: cfg.transport.variant.name().into(),
        pooling: cfg.transport.pooling.name().into(),
        prior: cfg.transport.prior.name().into(),
        pdcorr: m.pdcorr,
        de_over: m.de_over,
        de_prec: m.de_prec,
        dir_agr: m.dir_agr,
        lfc_spear: m.lfc_spear,
        mse: m.mse,
        mae: m.mae,
    })
}

/// Collects one row per run directory, best PDCorr first; unreadable runs are skipped with a warning.
pub fn collect_reports(runs: &[PathBuf]) -> Vec<ReportRow> {
    let mut rows: Vec<ReportRow> = runs
        .iter()
        .filter_map(|dir| match report_row(dir) {
            Ok(r) => Some(r),
            Err(e) => {
                warn!("skipping {}: {e}", dir.display());
                None
            }
        })
        .collect();
    rows.sort_by(|a, b| b.pdcorr.total_cmp(&a.pdcorr).then_with(|| a.run.cmp(&b.run)));
    rows
}

pub fn report_csv(rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record([
            "run", "variant", "pooling", "prior", "PDCorr", "DEOver", "DEPrec", "DirAgr", "LFCSpear",
            "MSE", "MAE",
        ])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Evaluation(format!("csv buffer: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Merges the reports of `runs` into one CSV table, written to `out` when given.
pub fn cmd_report(runs: &[PathBuf], out: Option<&Path>) -> Result<String> {
    if runs.is_empty() {
        return Err(Error::Argument("report needs at least one run directory".into()));
    }
    let text = report_csv(&collect_reports(runs))?;
    if let Some(path) = out {
        write_atomic(path, text.as_bytes())?;
    }
    Ok(text)
}
