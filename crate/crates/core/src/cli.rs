//! Experiment orchestration behind the `elmix` binary.
//!
//! Every subcommand reads one JSON config. `run` parses arguments and maps
//! the outcome to an exit code: 0 success, 1 usage or config error, 2 some
//! runs failed, 3 nothing succeeded.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    bucket_transition, dolan_more_profile, friedman_statistic, summary_stats, tau_grid, AccuracyTable, BUCKET_NAMES,
};
use crate::data::{load_csv, make_blobs, split, write_csv, CsvSchema, Dataset, SplitSpec, Splits};
use crate::error::{invalid, Error, Result};
use crate::escape::{
    escape_study, estimate_and_simulate, DoubleWell, EscapeRow, EscapeStudyConfig, Landscape, Quadratic, StudyNoise,
    PARAM_CAP,
};
use crate::losses::{LossSpec, MixWeights};
use crate::math::RandomSource;
use crate::model::{Architecture, ClassifierModel};
use crate::trainer::{lr_sweep, train, volume_matched_ce_lr, Objective, RunReport, TrainConfig, DEFAULT_LRS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_PARTIAL: i32 = 2;
pub const EXIT_FAILED: i32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSource {
    Blobs {
        name: String,
        classes: usize,
        per_class: usize,
        dim: usize,
        separation: f64,
        #[serde(default)]
        seed: u64,
    },
    Csv {
        path: PathBuf,
        #[serde(default)]
        name: Option<String>,
        #[serde(flatten)]
        schema: CsvSchema,
    },
}

impl DatasetSource {
    /// Relative CSV paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<Dataset> {
        match self {
            DatasetSource::Blobs {
                name,
                classes,
                per_class,
                dim,
                separation,
                seed,
            } => {
                let mut d = make_blobs(*classes, *per_class, *dim, *separation, *seed)?;
                d.set_name(name.clone());
                Ok(d)
            }
            DatasetSource::Csv { path, name, schema } => {
                let path = if path.is_relative() {
                    base.join(path)
                } else {
                    path.clone()
                };
                let mut d = load_csv(&path, schema)?;
                if let Some(n) = name {
                    d.set_name(n.clone());
                }
                Ok(d)
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            DatasetSource::Blobs { name, .. } => name.clone(),
            DatasetSource::Csv { path, name, .. } => name.clone().unwrap_or_else(|| {
                path.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "dataset".into())
            }),
        }
    }
}

/// A named training objective. `volume_match` scales every swept learning
/// rate by the gradient-volume ratio of the given weights to CE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub name: String,
    #[serde(flatten)]
    pub objective: Objective,
    #[serde(default)]
    pub volume_match: Option<MixWeights>,
}

impl MethodSpec {
    pub fn new(name: impl Into<String>, objective: Objective) -> Self {
        Self {
            name: name.into(),
            objective,
            volume_match: None,
        }
    }

    fn learning_rates(&self, lrs: &[f64]) -> Result<Vec<f64>> {
        match self.volume_match {
            Some(w) => lrs.iter().map(|&lr| volume_matched_ce_lr(lr, w)).collect(),
            None => Ok(lrs.to_vec()),
        }
    }
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    1e-4
}

fn yes() -> bool {
    true
}

/// Trainer settings shared by every run of a config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerTemplate {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "yes")]
    pub decay_biases: bool,
    #[serde(default)]
    pub lr_milestones: Vec<(usize, f64)>,
    #[serde(default = "yes")]
    pub shuffle: bool,
}

impl TrainerTemplate {
    pub fn config(&self, objective: Objective, lr: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            decay_biases: self.decay_biases,
            lr_milestones: self.lr_milestones.clone(),
            objective,
            seed,
            shuffle: self.shuffle,
            snapshot_epochs: Vec::new(),
        }
    }
}

fn default_architectures() -> Vec<Architecture> {
    vec![Architecture::Linear]
}

fn default_lrs() -> Vec<f64> {
    DEFAULT_LRS.to_vec()
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

/// A grid of datasets x architectures x methods x seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub datasets: Vec<DatasetSource>,
    #[serde(default)]
    pub split: SplitSpec,
    /// z-score features with training-split statistics.
    #[serde(default = "yes")]
    pub normalize: bool,
    #[serde(default = "default_architectures")]
    pub architectures: Vec<Architecture>,
    pub methods: Vec<MethodSpec>,
    pub trainer: TrainerTemplate,
    #[serde(default = "default_lrs")]
    pub lrs: Vec<f64>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Worker threads; defaults to the available hardware threads.
    #[serde(default)]
    pub parallelism: Option<usize>,
    /// Reference method for accuracy differences; defaults to the first method.
    #[serde(default)]
    pub baseline: Option<String>,
    /// Dolan-Moré grid; defaults to 51 points on [0.5, 1].
    #[serde(default)]
    pub taus: Option<Vec<f64>>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() {
            return Err(invalid("config needs at least one dataset"));
        }
        if self.methods.is_empty() {
            return Err(invalid("config needs at least one method"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("config needs at least one seed"));
        }
        if self.architectures.is_empty() {
            return Err(invalid("config needs at least one architecture"));
        }
        if self.lrs.is_empty() || self.lrs.iter().any(|lr| !(lr.is_finite() && *lr > 0.0)) {
            return Err(invalid("learning rates must be a non-empty list of positive values"));
        }
        unique(self.methods.iter().map(|m| m.name.clone()), "method")?;
        unique(self.datasets.iter().map(DatasetSource::name), "dataset")?;
        unique(self.seeds.iter().map(u64::to_string), "seed")?;
        self.split.validate()?;
        for m in &self.methods {
            self.trainer.config(m.objective.clone(), self.lrs[0], 0).validate()?;
            m.learning_rates(&self.lrs)?;
        }
        if let Some(b) = &self.baseline {
            if !self.methods.iter().any(|m| &m.name == b) {
                return Err(Error::UnknownMethod(b.clone()));
            }
        }
        if self.parallelism == Some(0) {
            return Err(invalid("parallelism must be >= 1"));
        }
        self.taus()?;
        Ok(())
    }

    pub fn baseline(&self) -> &str {
        self.baseline.as_deref().unwrap_or(&self.methods[0].name)
    }

    pub fn taus(&self) -> Result<Vec<f64>> {
        match &self.taus {
            Some(t) => Ok(t.clone()),
            None => tau_grid(0.5, 51),
        }
    }

    /// The four mixing regimes plus EL-only and focal, on the given datasets.
    pub fn standard_methods() -> Vec<MethodSpec> {
        use crate::schedule::ScheduleSpec;
        vec![
            MethodSpec::new("ce", Objective::Loss(LossSpec::Ce)),
            MethodSpec::new("f0", Objective::Schedule(ScheduleSpec::ConstantF0)),
            MethodSpec::new("f0..05", Objective::Schedule(ScheduleSpec::gradual())),
            MethodSpec::new("f0-05", Objective::Schedule(ScheduleSpec::two_phase())),
            MethodSpec::new("el", Objective::Loss(LossSpec::El)),
            MethodSpec::new("focal", Objective::Loss(LossSpec::focal())),
        ]
    }
}

fn unique(names: impl Iterator<Item = String>, what: &str) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for n in names {
        if !seen.insert(n.clone()) {
            return Err(invalid(format!("duplicate {what} {n:?}")));
        }
    }
    Ok(())
}

/// Hex SHA-256 of the value's JSON with object keys sorted.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let canonical = serde_json::to_string(&serde_json::to_value(value)?)?;
    let digest = Sha256::digest(canonical.as_bytes());
    Ok(digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

/// Everything that determines one grid cell's run.
#[derive(Debug, Clone, Serialize)]
struct RunSpec<'a> {
    dataset: &'a DatasetSource,
    split: &'a SplitSpec,
    normalize: bool,
    architecture: Architecture,
    method: &'a MethodSpec,
    trainer: &'a TrainerTemplate,
    lrs: &'a [f64],
    seed: u64,
}

/// Result of one (dataset, architecture, method, seed) sweep, persisted as
/// `runs/<key>.json`; its presence with a matching hash marks the run done.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub key: String,
    pub run_hash: String,
    pub dataset: String,
    pub architecture: Architecture,
    pub method: String,
    pub seed: u64,
    pub best_lr: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub best_val_accuracy: Option<f64>,
    pub failure: Option<String>,
    pub sweep: Vec<crate::trainer::RunSummary>,
}

impl RunRecord {
    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub code_version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub runs_trained: usize,
    pub runs_resumed: usize,
}

#[derive(Debug, Clone)]
pub struct GridResult {
    /// One table per architecture; experiments are datasets, cells are
    /// seed-mean test accuracies at the selected learning rate.
    pub tables: Vec<(Architecture, AccuracyTable)>,
    pub records: Vec<RunRecord>,
    pub provenance: Provenance,
}

impl GridResult {
    pub fn failed_runs(&self) -> usize {
        self.records.iter().filter(|r| r.failed()).count()
    }

    pub fn exit_code(&self) -> i32 {
        match self.failed_runs() {
            0 => EXIT_OK,
            n if n == self.records.len() => EXIT_FAILED,
            _ => EXIT_PARTIAL,
        }
    }
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn run_key(dataset: &str, arch: Architecture, method: &str, seed: u64) -> String {
    format!(
        "{}__{}__{}__s{seed}",
        sanitize(dataset),
        arch.as_str(),
        sanitize(method)
    )
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Loads, splits and optionally normalizes a dataset.
pub fn prepare(source: &DatasetSource, split_spec: &SplitSpec, normalize: bool, base: &Path) -> Result<Splits> {
    let d = source.load(base)?;
    let s = split(&d, split_spec)?;
    if normalize {
        Ok(s.normalized()?.0)
    } else {
        Ok(s)
    }
}

fn init_model(arch: Architecture, splits: &Splits, seed: u64) -> Result<ClassifierModel> {
    let classes = splits
        .train
        .classes()
        .max(splits.val.classes())
        .max(splits.test.classes());
    ClassifierModel::init(arch, splits.train.dim(), classes, &mut RandomSource::new(seed))
}

struct Job<'a> {
    key: String,
    hash: String,
    dataset: usize,
    arch: Architecture,
    method: &'a MethodSpec,
    seed: u64,
}

struct Finished {
    record: RunRecord,
    reports: Vec<RunReport>,
}

fn execute(cfg: &ExperimentConfig, job: &Job, splits: &Result<Splits, String>) -> Finished {
    let base = RunRecord {
        key: job.key.clone(),
        run_hash: job.hash.clone(),
        dataset: cfg.datasets[job.dataset].name(),
        architecture: job.arch,
        method: job.method.name.clone(),
        seed: job.seed,
        best_lr: None,
        test_accuracy: None,
        best_val_accuracy: None,
        failure: None,
        sweep: Vec::new(),
    };
    let outcome = (|| -> Result<_> {
        let splits = splits.as_ref().map_err(|e| invalid(e.clone()))?;
        let lrs = job.method.learning_rates(&cfg.lrs)?;
        let template = cfg.trainer.config(job.method.objective.clone(), lrs[0], job.seed);
        lr_sweep(|| init_model(job.arch, splits, job.seed), splits, &template, &lrs)
    })();
    match outcome {
        Ok(sweep) => {
            let best = sweep.best();
            Finished {
                record: RunRecord {
                    best_lr: Some(best.lr),
                    test_accuracy: Some(best.test_accuracy_at_best),
                    best_val_accuracy: Some(best.best_val_accuracy),
                    sweep: sweep.reports.iter().map(RunReport::summary).collect(),
                    ..base
                },
                reports: sweep.reports,
            }
        }
        Err(e) => Finished {
            record: RunRecord {
                failure: Some(e.to_string()),
                ..base
            },
            reports: Vec::new(),
        },
    }
}

fn write_run(dir: &Path, finished: &Finished) -> Result<()> {
    for report in &finished.reports {
        let name = format!("{}__lr{}.csv", finished.record.key, report.lr);
        report.save_epoch_csv(dir.join(name))?;
    }
    let tmp = dir.join(format!("{}.json.tmp", finished.record.key));
    std::fs::write(&tmp, serde_json::to_string_pretty(&finished.record)?)?;
    std::fs::rename(tmp, dir.join(format!("{}.json", finished.record.key)))?;
    Ok(())
}

fn read_done(dir: &Path, key: &str, hash: &str) -> Option<RunRecord> {
    let text = std::fs::read_to_string(dir.join(format!("{key}.json"))).ok()?;
    let record: RunRecord = serde_json::from_str(&text).ok()?;
    (record.run_hash == hash).then_some(record)
}

/// The planned runs of a grid, as `(key, already done)` pairs.
pub fn plan_grid(cfg: &ExperimentConfig) -> Result<Vec<(String, bool)>> {
    cfg.validate()?;
    let runs = cfg.output_dir.join("runs");
    Ok(jobs(cfg)?
        .into_iter()
        .map(|j| {
            let done = read_done(&runs, &j.key, &j.hash).is_some();
            (j.key, done)
        })
        .collect())
}

fn jobs(cfg: &ExperimentConfig) -> Result<Vec<Job<'_>>> {
    let mut out = Vec::new();
    for (d, source) in cfg.datasets.iter().enumerate() {
        for &arch in &cfg.architectures {
            for method in &cfg.methods {
                for &seed in &cfg.seeds {
                    let spec = RunSpec {
                        dataset: source,
                        split: &cfg.split,
                        normalize: cfg.normalize,
                        architecture: arch,
                        method,
                        trainer: &cfg.trainer,
                        lrs: &cfg.lrs,
                        seed,
                    };
                    out.push(Job {
                        key: run_key(&source.name(), arch, &method.name, seed),
                        hash: config_hash(&spec)?,
                        dataset: d,
                        arch,
                        method,
                        seed,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Runs every missing cell of the grid, then assembles and writes the tables.
///
/// Relative dataset paths resolve against `base`. Runs execute on a bounded
/// pool; a single collector writes their files as they finish. Cells whose
/// `runs/<key>.json` exists with a matching hash are read instead of retrained.
pub fn run_grid(cfg: &ExperimentConfig, base: &Path) -> Result<GridResult> {
    cfg.validate()?;
    let started = now();
    let out = &cfg.output_dir;
    let runs_dir = out.join("runs");
    std::fs::create_dir_all(&runs_dir)?;
    std::fs::write(out.join("config.json"), serde_json::to_string_pretty(cfg)?)?;

    let all = jobs(cfg)?;
    let mut records: BTreeMap<String, RunRecord> = BTreeMap::new();
    let mut pending = Vec::new();
    for job in &all {
        match read_done(&runs_dir, &job.key, &job.hash) {
            Some(r) => {
                records.insert(job.key.clone(), r);
            }
            None => pending.push(job),
        }
    }
    let resumed = records.len();
    let trained = pending.len();

    if !pending.is_empty() {
        let needed: std::collections::BTreeSet<usize> = pending.iter().map(|j| j.dataset).collect();
        let prepared: BTreeMap<usize, Result<Splits, String>> = needed
            .into_iter()
            .map(|d| {
                let s = prepare(&cfg.datasets[d], &cfg.split, cfg.normalize, base).map_err(|e| e.to_string());
                if let Err(e) = &s {
                    log::error!("dataset {}: {e}", cfg.datasets[d].name());
                }
                (d, s)
            })
            .collect();

        let threads = cfg
            .parallelism
            .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| invalid(e.to_string()))?;
        let (tx, rx) = mpsc::channel::<Finished>();
        let write_result = std::thread::scope(|scope| {
            let collector = scope.spawn(|| -> Result<Vec<RunRecord>> {
                let mut got = Vec::new();
                for finished in rx {
                    write_run(&runs_dir, &finished)?;
                    log::info!(
                        "{}: {}",
                        finished.record.key,
                        match (&finished.record.failure, finished.record.test_accuracy) {
                            (Some(f), _) => format!("failed ({f})"),
                            (None, Some(a)) => format!("test accuracy {a:.4}"),
                            _ => String::new(),
                        }
                    );
                    got.push(finished.record);
                }
                Ok(got)
            });
            pool.install(|| {
                pending.par_iter().for_each_with(tx, |tx, job| {
                    let finished = execute(cfg, job, &prepared[&job.dataset]);
                    let _ = tx.send(finished);
                });
            });
            collector.join().expect("collector thread panicked")
        })?;
        for r in write_result {
            records.insert(r.key.clone(), r);
        }
    }

    let ordered: Vec<RunRecord> = all.iter().map(|j| records[&j.key].clone()).collect();
    let tables = assemble_tables(cfg, &ordered)?;
    for (arch, table) in &tables {
        table.save_csv(out.join(format!("table_{}.csv", arch.as_str())))?;
    }
    let provenance = Provenance {
        config_hash: config_hash(cfg)?,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix: started,
        finished_unix: now(),
        runs_trained: trained,
        runs_resumed: resumed,
    };
    std::fs::write(out.join("provenance.json"), serde_json::to_string_pretty(&provenance)?)?;
    Ok(GridResult {
        tables,
        records: ordered,
        provenance,
    })
}

/// Seed means of the successful runs; a cell with no successful seed is 0
/// and flagged failed.
fn assemble_tables(cfg: &ExperimentConfig, records: &[RunRecord]) -> Result<Vec<(Architecture, AccuracyTable)>> {
    let methods: Vec<String> = cfg.methods.iter().map(|m| m.name.clone()).collect();
    let experiments: Vec<String> = cfg.datasets.iter().map(DatasetSource::name).collect();
    cfg.architectures
        .iter()
        .map(|&arch| {
            let mut values = vec![vec![0.0; experiments.len()]; methods.len()];
            let mut failed = vec![vec![false; experiments.len()]; methods.len()];
            for (m, method) in methods.iter().enumerate() {
                for (e, dataset) in experiments.iter().enumerate() {
                    let accs: Vec<f64> = records
                        .iter()
                        .filter(|r| r.architecture == arch && &r.method == method && &r.dataset == dataset)
                        .filter_map(|r| r.test_accuracy)
                        .collect();
                    if accs.is_empty() {
                        failed[m][e] = true;
                    } else {
                        values[m][e] = accs.iter().sum::<f64>() / accs.len() as f64;
                    }
                }
            }
            Ok((
                arch,
                AccuracyTable::with_failures(methods.clone(), experiments.clone(), values, failed)?,
            ))
        })
        .collect()
}

/// Files written by [`report`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub summary_stats: PathBuf,
    pub dolan_more: PathBuf,
    pub friedman: PathBuf,
    pub table: PathBuf,
}

/// Writes `<prefix>summary_stats.csv`, `<prefix>dolan_more.csv`,
/// `<prefix>friedman.txt` and a plain-text `<prefix>table.txt` with
/// `#Wins`, `dAcc` (percentage points) and mean rank per method.
pub fn report(table: &AccuracyTable, baseline: &str, taus: &[f64], dir: &Path, prefix: &str) -> Result<ReportFiles> {
    let stats = summary_stats(table, baseline)?;
    std::fs::create_dir_all(dir)?;
    let files = ReportFiles {
        summary_stats: dir.join(format!("{prefix}summary_stats.csv")),
        dolan_more: dir.join(format!("{prefix}dolan_more.csv")),
        friedman: dir.join(format!("{prefix}friedman.txt")),
        table: dir.join(format!("{prefix}table.txt")),
    };

    let mut w = csv::Writer::from_path(&files.summary_stats)?;
    w.write_record(["method", "wins", "delta_acc", "mean_rank"])?;
    for s in &stats {
        w.write_record([
            s.method.clone(),
            s.wins.to_string(),
            s.delta_acc.to_string(),
            s.mean_rank.to_string(),
        ])?;
    }
    w.flush()?;

    let profile = dolan_more_profile(table, taus)?;
    profile.write_csv(std::fs::File::create(&files.dolan_more)?)?;

    let friedman = match friedman_statistic(table) {
        Ok(f) => format!(
            "methods {}\nexperiments {}\nstatistic {}\ntie_corrected {}\ndf {}\np_value {}\n",
            table.methods().len(),
            table.experiments().len(),
            f.statistic,
            f.tie_corrected,
            f.df,
            f.p_value
        ),
        Err(e) => format!("not computed: {e}\n"),
    };
    std::fs::write(&files.friedman, friedman)?;

    let width = table.methods().iter().map(String::len).max().unwrap_or(6).max(6);
    let mut text = format!(
        "{:<width$}  {:>5}  {:>8}  {:>9}\n",
        "method", "#Wins", "dAcc", "mean rank"
    );
    for s in &stats {
        let _ = writeln!(
            text,
            "{:<width$}  {:>5}  {:>8.2}  {:>9.2}",
            s.method,
            s.wins,
            100.0 * s.delta_acc,
            s.mean_rank
        );
    }
    let _ = writeln!(text, "\n{} experiments, baseline {baseline}", table.experiments().len());
    std::fs::write(&files.table, text)?;
    Ok(files)
}

/// Single-run and sweep settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default = "yes")]
    pub normalize: bool,
    #[serde(default = "default_architecture")]
    pub architecture: Architecture,
    pub method: MethodSpec,
    pub trainer: TrainerTemplate,
    /// Learning rate for `train`; defaults to the first of `lrs`.
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default = "default_lrs")]
    pub lrs: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Epochs whose per-sample test probabilities are written out.
    #[serde(default)]
    pub snapshot_epochs: Vec<usize>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn default_architecture() -> Architecture {
    Architecture::Linear
}

impl RunConfig {
    fn train_config(&self) -> Result<TrainConfig> {
        let lr = self.lr.unwrap_or(self.lrs.first().copied().unwrap_or(DEFAULT_LRS[0]));
        let lr = match self.method.volume_match {
            Some(w) => volume_matched_ce_lr(lr, w)?,
            None => lr,
        };
        let mut cfg = self.trainer.config(self.method.objective.clone(), lr, self.seed);
        cfg.snapshot_epochs = self.snapshot_epochs.clone();
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_snapshots(report: &RunReport, dir: &Path) -> Result<()> {
    if report.snapshots.is_empty() {
        return Ok(());
    }
    let mut w = csv::Writer::from_path(dir.join("snapshots.csv"))?;
    w.write_record(["epoch", "id", "correct", "p_y"])?;
    for s in &report.snapshots {
        for r in s.records() {
            w.write_record([
                s.epoch().to_string(),
                r.id.to_string(),
                r.correct.to_string(),
                r.p_y.to_string(),
            ])?;
        }
    }
    w.flush()?;
    if let (Some(first), Some(last)) = (report.snapshots.first(), report.snapshots.last()) {
        if report.snapshots.len() >= 2 {
            let t = bucket_transition(first, last)?;
            let mut w = csv::Writer::from_path(dir.join("bucket_transition.csv"))?;
            w.write_record([
                format!("bucket_at_{}", first.epoch()),
                format!("correct_at_{}", last.epoch()),
                format!("incorrect_at_{}", last.epoch()),
                "correct_pct".into(),
                "incorrect_pct".into(),
            ])?;
            for (row, name) in BUCKET_NAMES.iter().enumerate() {
                w.write_record([
                    name.to_string(),
                    t.counts[row][0].to_string(),
                    t.counts[row][1].to_string(),
                    format!("{:.2}", t.rates[row][0]),
                    format!("{:.2}", t.rates[row][1]),
                ])?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

/// Trains one model and writes `epochs.csv`, `summary.json`, `model.ckpt`
/// and, when snapshots are requested, `snapshots.csv` and `bucket_transition.csv`.
pub fn train_command(cfg: &RunConfig, base: &Path) -> Result<RunReport> {
    let tc = cfg.train_config()?;
    let splits = prepare(&cfg.dataset, &cfg.split, cfg.normalize, base)?;
    let model = init_model(cfg.architecture, &splits, cfg.seed)?;
    let report = train(model, &splits, &tc)?;
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir)?;
    report.save_epoch_csv(dir.join("epochs.csv"))?;
    std::fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&report.summary())?,
    )?;
    report.final_model.save_checkpoint(dir.join("model.ckpt"))?;
    write_snapshots(&report, dir)?;
    Ok(report)
}

/// Sweeps `lrs`, writing one epoch CSV per rate and `sweep.json` naming the winner.
pub fn sweep_command(cfg: &RunConfig, base: &Path) -> Result<crate::trainer::SweepOutcome> {
    let mut tc = cfg.train_config()?;
    let lrs = cfg.method.learning_rates(&cfg.lrs)?;
    tc.lr = lrs[0];
    let splits = prepare(&cfg.dataset, &cfg.split, cfg.normalize, base)?;
    let outcome = lr_sweep(|| init_model(cfg.architecture, &splits, cfg.seed), &splits, &tc, &lrs)?;
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir)?;
    for r in &outcome.reports {
        r.save_epoch_csv(dir.join(format!("epochs_lr{}.csv", r.lr)))?;
    }
    let summary = serde_json::json!({
        "best_lr": outcome.best().lr,
        "runs": outcome.reports.iter().map(RunReport::summary).collect::<Vec<_>>(),
    });
    std::fs::write(dir.join("sweep.json"), serde_json::to_string_pretty(&summary)?)?;
    outcome.best().final_model.save_checkpoint(dir.join("model.ckpt"))?;
    Ok(outcome)
}

/// Where an escape study runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LandscapeSpec {
    /// `1/2 w^T diag(curvatures) w`, started at 0.
    Quadratic { curvatures: Vec<f64> },
    /// The quartic double well, started at one of its minima.
    DoubleWell {
        sharpness_ratio: f64,
        #[serde(default)]
        start_sharp: bool,
    },
    /// A classifier trained on a dataset, then studied per loss.
    Model {
        dataset: DatasetSource,
        #[serde(default = "default_architecture")]
        architecture: Architecture,
        #[serde(default)]
        normalize_features: Option<bool>,
        /// Full-batch training steps with CE before the study.
        train_epochs: usize,
        train_lr: f64,
    },
}

fn default_betas() -> Vec<f64> {
    vec![1.0, 2.5, 5.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EscapeConfig {
    pub landscape: LandscapeSpec,
    /// Mixed-loss weights studied alongside CE, with `alpha = 1`.
    #[serde(default = "default_betas")]
    pub betas: Vec<f64>,
    pub study: EscapeStudyConfig,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

pub const ESCAPE_COLUMNS: [&str; 6] = ["method", "beta", "trace_term", "ee_estimate", "ee_simulated", "stderr"];

fn analytic_rows(l: &dyn Landscape, start: &[f64], name: &str, cfg: &EscapeStudyConfig) -> Result<Vec<EscapeRow>> {
    let dim = l.dim();
    let sigma = match cfg.noise {
        StudyNoise::Covariance | StudyNoise::Isotropic(_) => {
            let v = match cfg.noise {
                StudyNoise::Isotropic(v) => v,
                _ => 1.0,
            };
            Some(nalgebra::DMatrix::identity(dim, dim) * v)
        }
        StudyNoise::Zero => None,
    };
    let (trace_term, ee_estimate, ee_simulated, stderr) = estimate_and_simulate(l, start, sigma, cfg)?;
    Ok(vec![EscapeRow {
        method: name.to_string(),
        alpha: None,
        beta: None,
        trace_term,
        ee_estimate,
        ee_simulated,
        stderr,
        rhs_bound: None,
    }])
}

/// Runs the configured study and writes `escape.csv` with [`ESCAPE_COLUMNS`]
/// (plus `rhs_bound` for model studies). Analytic landscapes use `Sigma = I`
/// under covariance noise.
pub fn escape_experiment(cfg: &EscapeConfig, base: &Path) -> Result<Vec<EscapeRow>> {
    if let Some(b) = cfg.betas.iter().find(|b| !(b.is_finite() && **b >= 0.0)) {
        return Err(invalid(format!("beta must be >= 0, got {b}")));
    }
    let rows = match &cfg.landscape {
        LandscapeSpec::Quadratic { curvatures } => {
            let q = Quadratic::diagonal(curvatures)?;
            analytic_rows(&q, &vec![0.0; curvatures.len()], "quadratic", &cfg.study)?
        }
        LandscapeSpec::DoubleWell {
            sharpness_ratio,
            start_sharp,
        } => {
            let w = DoubleWell::new(*sharpness_ratio)?;
            let start = if *start_sharp {
                w.sharp_minimum()
            } else {
                w.wide_minimum()
            };
            analytic_rows(&w, &[start], "double_well", &cfg.study)?
        }
        LandscapeSpec::Model {
            dataset,
            architecture,
            normalize_features,
            train_epochs,
            train_lr,
        } => {
            let mut data = dataset.load(base)?;
            if normalize_features.unwrap_or(true) {
                data = crate::data::NormStats::fit(&data).apply(&data)?;
            }
            let mut model = ClassifierModel::init(
                *architecture,
                data.dim(),
                data.classes(),
                &mut RandomSource::new(cfg.study.seed),
            )?;
            if model.param_count() > PARAM_CAP {
                return Err(Error::TooManyParameters {
                    params: model.param_count(),
                    cap: PARAM_CAP,
                });
            }
            let landscape =
                crate::escape::ModelLandscape::new(model.clone(), data.clone(), LossSpec::Ce, cfg.study.l2)?;
            let w = crate::escape::gradient_descent(&landscape, model.params(), *train_lr, *train_epochs, 1e-12)?;
            model.params_mut().copy_from_slice(&w);
            let mut losses = vec![LossSpec::Ce];
            losses.extend(cfg.betas.iter().map(|&beta| LossSpec::Mixed { alpha: 1.0, beta }));
            escape_study(&model, &data, &losses, &cfg.study)?
        }
    };
    std::fs::create_dir_all(&cfg.output_dir)?;
    write_escape_csv(&rows, &cfg.output_dir.join("escape.csv"))?;
    Ok(rows)
}

pub fn write_escape_csv(rows: &[EscapeRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = ESCAPE_COLUMNS.to_vec();
    header.push("rhs_bound");
    w.write_record(&header)?;
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        let method = match (r.alpha, r.beta) {
            (Some(a), Some(b)) if b > 0.0 => format!("mixed(alpha={a},beta={b})"),
            _ => r.method.clone(),
        };
        w.write_record([
            method,
            opt(r.beta),
            r.trace_term.to_string(),
            r.ee_estimate.to_string(),
            r.ee_simulated.to_string(),
            r.stderr.to_string(),
            opt(r.rhs_bound),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// The `datasets` list of any config; other keys are ignored.
#[derive(Debug, Clone, Deserialize)]
pub struct GenDataConfig {
    pub datasets: Vec<DatasetSource>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

/// Writes every synthetic dataset of the config as `<name>.csv`.
pub fn gen_data(cfg: &GenDataConfig, seed_override: Option<u64>) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    let mut written = Vec::new();
    for (i, source) in cfg.datasets.iter().enumerate() {
        let source = match (source, seed_override) {
            (DatasetSource::Blobs { .. }, None) => source.clone(),
            (
                DatasetSource::Blobs {
                    name,
                    classes,
                    per_class,
                    dim,
                    separation,
                    ..
                },
                Some(s),
            ) => DatasetSource::Blobs {
                name: name.clone(),
                classes: *classes,
                per_class: *per_class,
                dim: *dim,
                separation: *separation,
                seed: s.wrapping_add(i as u64),
            },
            (DatasetSource::Csv { .. }, _) => continue,
        };
        let path = cfg.output_dir.join(format!("{}.csv", sanitize(&source.name())));
        write_csv(&source.load(Path::new("."))?, &path)?;
        written.push(path);
    }
    Ok(written)
}

/// Blob datasets of varied difficulty for benchmark grids.
pub fn synthetic_suite(count: usize, seed: u64) -> Vec<DatasetSource> {
    (0..count)
        .map(|i| {
            let classes = 2 + i % 3;
            let dim = 2 + (i / 3) % 4;
            DatasetSource::Blobs {
                name: format!("blobs{i:02}"),
                classes,
                per_class: 40 + 10 * (i % 4),
                dim: dim.max(classes.div_ceil(2)),
                separation: 0.6 + 0.25 * (i % 5) as f64,
                seed: seed.wrapping_add(i as u64),
            }
        })
        .collect()
}

#[derive(Debug, Parser)]
#[command(
    name = "elmix",
    version,
    about = "Train and compare cross-entropy / expectation-loss mixtures"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct CommonArgs {
    /// JSON config file.
    #[arg(short, long)]
    pub config: PathBuf,
    /// Overrides the config's output directory.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    /// Overrides the config's seed (a grid runs only this seed).
    #[arg(short, long)]
    pub seed: Option<u64>,
    /// Validate the config and print the plan without running.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model.
    Train(CommonArgs),
    /// Sweep learning rates for one method and keep the best on validation.
    Sweep(CommonArgs),
    /// Run every dataset x architecture x method x seed cell, resuming finished ones.
    Grid(CommonArgs),
    /// Summaries, performance profiles and the Friedman test for a finished grid.
    Report {
        #[command(flatten)]
        common: CommonArgs,
        /// Read this accuracy table instead of the grid's `table_*.csv` files.
        #[arg(long)]
        table: Option<PathBuf>,
        /// Baseline method; defaults to the config's.
        #[arg(long)]
        baseline: Option<String>,
    },
    /// Compare escaping-efficiency estimates with SDE simulations.
    Escape(CommonArgs),
    /// Write the config's synthetic datasets as CSV.
    GenData(CommonArgs),
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn config_base(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

enum Failure {
    Usage(Error),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn usage<T>(r: Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Usage)
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            EXIT_FAILED
        }
    }
}

fn dispatch(command: Command) -> Result<i32, Failure> {
    match command {
        Command::Train(args) => {
            let mut cfg: RunConfig = usage(read_config(&args.config))?;
            apply_run_overrides(&mut cfg, &args);
            usage(cfg.train_config())?;
            if args.dry_run {
                println!(
                    "train {} on {} ({}), {} epochs -> {}",
                    cfg.method.name,
                    cfg.dataset.name(),
                    cfg.architecture.as_str(),
                    cfg.trainer.epochs,
                    cfg.output_dir.display()
                );
                return Ok(EXIT_OK);
            }
            let report = train_command(&cfg, &config_base(&args.config))?;
            match &report.failure {
                Some(f) => {
                    eprintln!("run failed: {f}");
                    Ok(EXIT_FAILED)
                }
                None => {
                    println!(
                        "best epoch {:?}: val {:.4}, test {:.4}",
                        report.best_val_epoch, report.best_val_accuracy, report.test_accuracy_at_best
                    );
                    Ok(EXIT_OK)
                }
            }
        }
        Command::Sweep(args) => {
            let mut cfg: RunConfig = usage(read_config(&args.config))?;
            apply_run_overrides(&mut cfg, &args);
            usage(cfg.train_config())?;
            if args.dry_run {
                println!(
                    "sweep {} over {:?} -> {}",
                    cfg.method.name,
                    cfg.lrs,
                    cfg.output_dir.display()
                );
                return Ok(EXIT_OK);
            }
            let outcome = match sweep_command(&cfg, &config_base(&args.config)) {
                Err(Error::AllRunsFailed) => {
                    eprintln!("every learning rate diverged");
                    return Ok(EXIT_FAILED);
                }
                other => other?,
            };
            let best = outcome.best();
            println!(
                "best lr {}: val {:.4}, test {:.4}",
                best.lr, best.best_val_accuracy, best.test_accuracy_at_best
            );
            Ok(if outcome.reports.iter().any(RunReport::failed) {
                EXIT_PARTIAL
            } else {
                EXIT_OK
            })
        }
        Command::Grid(args) => {
            let cfg = usage(load_grid_config(&args))?;
            if args.dry_run {
                let plan = usage(plan_grid(&cfg))?;
                let done = plan.iter().filter(|(_, d)| *d).count();
                for (key, d) in &plan {
                    println!("{} {key}", if *d { "done   " } else { "pending" });
                }
                println!("{} runs, {done} already done", plan.len());
                return Ok(EXIT_OK);
            }
            let grid = run_grid(&cfg, &config_base(&args.config))?;
            let mut prefixes = Vec::new();
            for (arch, table) in &grid.tables {
                let prefix = format!("{}_", arch.as_str());
                report(table, cfg.baseline(), &cfg.taus()?, &cfg.output_dir, &prefix)?;
                prefixes.push(prefix);
            }
            println!(
                "{} runs ({} trained, {} resumed, {} failed) -> {}",
                grid.records.len(),
                grid.provenance.runs_trained,
                grid.provenance.runs_resumed,
                grid.failed_runs(),
                cfg.output_dir.display()
            );
            Ok(grid.exit_code())
        }
        Command::Report {
            common,
            table,
            baseline,
        } => {
            let cfg = usage(load_grid_config(&common))?;
            let baseline = baseline.unwrap_or_else(|| cfg.baseline().to_string());
            let taus = usage(cfg.taus())?;
            let tables: Vec<(String, PathBuf)> = match table {
                Some(t) => vec![(String::new(), t)],
                None => cfg
                    .architectures
                    .iter()
                    .map(|a| {
                        (
                            format!("{}_", a.as_str()),
                            cfg.output_dir.join(format!("table_{}.csv", a.as_str())),
                        )
                    })
                    .collect(),
            };
            if common.dry_run {
                for (_, t) in &tables {
                    println!("report {} (baseline {baseline})", t.display());
                }
                return Ok(EXIT_OK);
            }
            for (prefix, path) in tables {
                let tab = AccuracyTable::load_csv(&path)?;
                let files = usage(report(&tab, &baseline, &taus, &cfg.output_dir, &prefix))?;
                println!("{}", std::fs::read_to_string(&files.table).map_err(Error::from)?);
            }
            Ok(EXIT_OK)
        }
        Command::Escape(args) => {
            let mut cfg: EscapeConfig = usage(read_config(&args.config))?;
            if let Some(o) = &args.output {
                cfg.output_dir = o.clone();
            }
            if let Some(s) = args.seed {
                cfg.study.seed = s;
            }
            if args.dry_run {
                println!(
                    "escape study, betas {:?}, {} trajectories -> {}",
                    cfg.betas,
                    cfg.study.trajectories,
                    cfg.output_dir.display()
                );
                return Ok(EXIT_OK);
            }
            let rows = escape_experiment(&cfg, &config_base(&args.config))?;
            for r in &rows {
                println!(
                    "{:<12} beta {:>5}  estimate {:.6e}  simulated {:.6e} +- {:.1e}",
                    r.method,
                    r.beta.map(|b| b.to_string()).unwrap_or_else(|| "-".into()),
                    r.ee_estimate,
                    r.ee_simulated,
                    r.stderr
                );
            }
            Ok(EXIT_OK)
        }
        Command::GenData(args) => {
            let mut cfg: GenDataConfig = usage(read_config(&args.config))?;
            if let Some(o) = &args.output {
                cfg.output_dir = o.clone();
            }
            if args.dry_run {
                for d in &cfg.datasets {
                    println!("{}", d.name());
                }
                return Ok(EXIT_OK);
            }
            for p in gen_data(&cfg, args.seed)? {
                println!("{}", p.display());
            }
            Ok(EXIT_OK)
        }
    }
}

fn apply_run_overrides(cfg: &mut RunConfig, args: &CommonArgs) {
    if let Some(o) = &args.output {
        cfg.output_dir = o.clone();
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
}

fn load_grid_config(args: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = read_config(&args.config)?;
    if let Some(o) = &args.output {
        cfg.output_dir = o.clone();
    }
    if let Some(s) = args.seed {
        cfg.seeds = vec![s];
    }
    cfg.validate()?;
    Ok(cfg)
}
