//! Benchmark protocol: methods x validation sizes x seeded runs per task,
//! with raw cell, summary and metadata reports, plus the per-class and
//! entropy-bin temperature analyses.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::calibrators::{fit, optimal_temperature_per_group, CalibratorParams, Method};
use crate::dataset::{load_logits, subsample_indices, LogitDataset, TaskSplit, PRNG_ID};
use crate::error::{CalibError, Result};
use crate::kv::{fmt_f64, KvDoc};
use crate::mathkit::{argmax, normalized_entropy_unchecked};
use crate::metrics::{EceBinning, MetricReport, DEFAULT_ECE_BINS};
use crate::optim::FitConfig;
use crate::paramfile::{read_config, read_config_over, write_config};
use crate::synthgen::{generate, SynthConfig};

/// Where a task's validation and test logits come from.
#[derive(Debug, Clone)]
pub enum TaskSource {
    Files {
        val: PathBuf,
        test: PathBuf,
        from_probs: bool,
    },
    Synthetic(SynthConfig),
    Split(TaskSplit),
}

#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub name: String,
    pub source: TaskSource,
}

#[derive(Debug, Clone)]
pub struct BenchmarkConfig {
    pub name: String,
    pub tasks: Vec<TaskSpec>,
    pub methods: Vec<Method>,
    pub val_sizes: Vec<usize>,
    pub runs: usize,
    pub ece_bins: usize,
    pub seed0: u64,
    pub fit: FitConfig,
    /// Per-method replacements for `fit`.
    pub method_fit: Vec<(Method, FitConfig)>,
    /// Worker threads for grid cells; results do not depend on it.
    pub workers: usize,
}

impl BenchmarkConfig {
    /// Reads a benchmark config. Relative file paths resolve against `base_dir`.
    ///
    /// ```text
    /// name=bench
    /// methods=ts,hts,pts
    /// val_sizes=200,1000
    /// runs=5
    /// ece_bins=50
    /// seed0=1
    /// fit.lr0=0.1
    /// fit.lts.lr0=0.003         (overrides for one method)
    /// tasks=a,b
    /// task.a.kind=synthetic
    /// task.a.k=10
    /// ...                      (synthetic task keys, see `SynthConfig`)
    /// task.b.kind=files
    /// task.b.val=val.csv
    /// task.b.test=test.csv
    /// ```
    pub fn from_kv(doc: &KvDoc, base_dir: &Path) -> Result<Self> {
        let methods = doc
            .require("methods")?
            .split(',')
            .map(|m| Method::from_tag(m.trim()))
            .collect::<Result<Vec<_>>>()?;
        let mut tasks = Vec::new();
        for name in doc.require("tasks")?.split(',').map(str::trim) {
            let prefix = format!("task.{name}.");
            let kind = doc.require(&format!("{prefix}kind"))?;
            let source = match kind {
                "synthetic" => {
                    let mut cfg = SynthConfig::from_kv_prefixed(doc, &prefix)?;
                    cfg.name = name.to_string();
                    TaskSource::Synthetic(cfg)
                }
                "files" => {
                    let path = |k: &str| -> Result<PathBuf> {
                        Ok(base_dir.join(doc.require(&format!("{prefix}{k}"))?))
                    };
                    TaskSource::Files {
                        val: path("val")?,
                        test: path("test")?,
                        from_probs: doc.or(&format!("{prefix}from_probs"), false)?,
                    }
                }
                other => {
                    return Err(CalibError::Config(format!(
                        "task '{name}': unknown kind '{other}'"
                    )))
                }
            };
            tasks.push(TaskSpec {
                name: name.to_string(),
                source,
            });
        }
        let fit = read_config(doc, "fit.")?;
        let mut method_fit = Vec::new();
        for &m in &methods {
            let prefix = format!("fit.{}.", m.tag());
            if doc.keys().any(|k| k.starts_with(&prefix)) {
                method_fit.push((m, read_config_over(doc, &prefix, &fit)?));
            }
        }
        let cfg = BenchmarkConfig {
            name: doc.or("name", "benchmark".to_string())?,
            tasks,
            methods,
            val_sizes: doc.req_list("val_sizes")?,
            runs: doc.req("runs")?,
            ece_bins: doc.or("ece_bins", DEFAULT_ECE_BINS)?,
            seed0: doc.or("seed0", 0)?,
            fit,
            method_fit,
            workers: doc.or("workers", 1)?,
        };
        Ok(cfg)
    }

    /// Optimizer settings for `method`.
    pub fn fit_config(&self, method: Method) -> &FitConfig {
        self.method_fit
            .iter()
            .find(|(m, _)| *m == method)
            .map_or(&self.fit, |(_, c)| c)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CalibError::Config(m));
        if self.runs == 0 {
            return bad("runs must be >= 1".into());
        }
        if self.tasks.is_empty() || self.methods.is_empty() || self.val_sizes.is_empty() {
            return bad("need at least one task, method and validation size".into());
        }
        if self.val_sizes.windows(2).any(|w| w[0] >= w[1]) || self.val_sizes[0] == 0 {
            return bad("val_sizes must be positive and strictly ascending".into());
        }
        let mut seen = self.methods.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.methods.len() {
            return bad("methods listed more than once".into());
        }
        let mut names: Vec<&str> = self.tasks.iter().map(|t| t.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.tasks.len() {
            return bad("task names must be unique".into());
        }
        if self.ece_bins == 0 || self.workers == 0 {
            return bad("ece_bins and workers must be >= 1".into());
        }
        self.fit.validate()?;
        self.method_fit.iter().try_for_each(|(_, c)| c.validate())
    }
}

/// Seed of one grid cell: the first eight bytes (little endian) of
/// `SHA-256("calib-cell-seed/v1" | seed0 | task name | 0x00 | n | run)`,
/// integers encoded as little-endian u64.
pub fn derive_seed(seed0: u64, task: &str, n: usize, run: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(b"calib-cell-seed/v1");
    h.update(seed0.to_le_bytes());
    h.update(task.as_bytes());
    h.update([0u8]);
    h.update((n as u64).to_le_bytes());
    h.update((run as u64).to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Short hash identifying a list of row indices.
pub fn index_hash(indices: &[usize]) -> String {
    let mut h = Sha256::new();
    for &i in indices {
        h.update((i as u64).to_le_bytes());
    }
    h.finalize()[..8]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// `value / ts_value`, or `None` when the TS value is not positive.
pub fn relative_metric(value: f64, ts_value: f64) -> Option<f64> {
    if ts_value > 0.0 && ts_value.is_finite() && value.is_finite() {
        Some(value / ts_value)
    } else {
        None
    }
}

/// One (task, method, n, run) result.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub task: String,
    pub method: Method,
    pub n_val: usize,
    pub run: usize,
    pub seed: u64,
    pub index_hash: String,
    /// Metrics on the test split, or the reason the cell failed.
    pub outcome: std::result::Result<MetricReport, String>,
    /// ECE, NLL and Brier divided by TS's values in the same (task, n, run).
    pub relative: Option<[Option<f64>; 3]>,
}

impl Cell {
    pub fn report(&self) -> Option<&MetricReport> {
        self.outcome.as_ref().ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

fn mean_std(values: &[f64]) -> Option<MeanStd> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Some(MeanStd {
        mean,
        std: var.sqrt(),
    })
}

/// Aggregate of the runs of one (task, method, n).
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub task: String,
    pub method: Method,
    pub n_val: usize,
    pub ok: usize,
    pub failed: usize,
    pub ece: Option<MeanStd>,
    pub nll: Option<MeanStd>,
    pub brier: Option<MeanStd>,
    pub accuracy: Option<MeanStd>,
    /// Mean over runs of the per-run TS-relative ECE, NLL, Brier.
    pub relative: [Option<f64>; 3],
}

#[derive(Debug, Clone)]
pub struct BenchmarkReport {
    pub name: String,
    pub tasks: Vec<String>,
    pub methods: Vec<Method>,
    pub val_sizes: Vec<usize>,
    pub runs: usize,
    pub cells: Vec<Cell>,
    pub aggregates: Vec<Aggregate>,
}

fn materialize(spec: &TaskSpec) -> Result<TaskSplit> {
    match &spec.source {
        TaskSource::Split(s) => Ok(s.clone()),
        TaskSource::Synthetic(cfg) => Ok(generate(cfg)?.0),
        TaskSource::Files {
            val,
            test,
            from_probs,
        } => TaskSplit::new(
            load_logits(val, *from_probs)?,
            load_logits(test, *from_probs)?,
        ),
    }
}

struct Job<'a> {
    task: &'a str,
    split: &'a TaskSplit,
    n: usize,
    run: usize,
}

fn run_job(job: &Job<'_>, cfg: &BenchmarkConfig) -> Result<Vec<Cell>> {
    let seed = derive_seed(cfg.seed0, job.task, job.n, job.run);
    let indices = subsample_indices(job.split.validation.len(), job.n, seed)?;
    let hash = index_hash(&indices);
    let val = job.split.validation.select(&indices)?;
    let binning = EceBinning::new(cfg.ece_bins);
    Ok(cfg
        .methods
        .iter()
        .map(|&method| {
            let fit_cfg = FitConfig {
                seed,
                ..cfg.fit_config(method).clone()
            };
            let outcome = fit(method, &val, &fit_cfg)
                .and_then(|p| p.calibrate_dataset(&job.split.test))
                .map_err(|e| e.to_string())
                .and_then(|cal| {
                    let mut r = MetricReport::evaluate(&cal, binning);
                    r.method = method.tag().to_string();
                    r.n_val = job.n;
                    r.run_id = job.run;
                    if r.is_finite() {
                        Ok(r)
                    } else {
                        Err(format!("non-finite metrics (nll={})", r.nll))
                    }
                });
            Cell {
                task: job.task.to_string(),
                method,
                n_val: job.n,
                run: job.run,
                seed,
                index_hash: hash.clone(),
                outcome,
                relative: None,
            }
        })
        .collect())
}

fn attach_relative(cells: &mut [Cell]) {
    let mut ts: BTreeMap<(String, usize, usize), [f64; 3]> = BTreeMap::new();
    for c in cells.iter() {
        if let (Method::Ts, Some(r)) = (c.method, c.report()) {
            ts.insert((c.task.clone(), c.n_val, c.run), [r.ece, r.nll, r.brier]);
        }
    }
    for c in cells.iter_mut() {
        let Some(base) = ts.get(&(c.task.clone(), c.n_val, c.run)) else {
            continue;
        };
        if let Ok(r) = &c.outcome {
            c.relative = Some(if c.method == Method::Ts {
                // exact by definition, even where TS's own value is zero
                [Some(1.0); 3]
            } else {
                [
                    relative_metric(r.ece, base[0]),
                    relative_metric(r.nll, base[1]),
                    relative_metric(r.brier, base[2]),
                ]
            });
        }
    }
}

fn aggregate(
    cells: &[Cell],
    tasks: &[String],
    methods: &[Method],
    sizes: &[usize],
) -> Vec<Aggregate> {
    let mut out = Vec::new();
    for task in tasks {
        for &method in methods {
            for &n in sizes {
                let group: Vec<&Cell> = cells
                    .iter()
                    .filter(|c| &c.task == task && c.method == method && c.n_val == n)
                    .collect();
                let ok: Vec<&MetricReport> = group.iter().filter_map(|c| c.report()).collect();
                let pick = |f: fn(&MetricReport) -> f64| {
                    mean_std(&ok.iter().map(|r| f(r)).collect::<Vec<_>>())
                };
                let rel = |i: usize| {
                    let v: Vec<f64> = group
                        .iter()
                        .filter_map(|c| c.relative.and_then(|r| r[i]))
                        .collect();
                    mean_std(&v).map(|m| m.mean)
                };
                out.push(Aggregate {
                    task: task.clone(),
                    method,
                    n_val: n,
                    ok: ok.len(),
                    failed: group.len() - ok.len(),
                    ece: pick(|r| r.ece),
                    nll: pick(|r| r.nll),
                    brier: pick(|r| r.brier),
                    accuracy: pick(|r| r.accuracy),
                    relative: [rel(0), rel(1), rel(2)],
                });
            }
        }
    }
    out
}

/// Runs the full grid. Per-cell fit failures are recorded, not raised.
pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkReport> {
    cfg.validate()?;
    let splits = cfg
        .tasks
        .iter()
        .map(materialize)
        .collect::<Result<Vec<_>>>()?;
    for (spec, split) in cfg.tasks.iter().zip(&splits) {
        let largest = *cfg.val_sizes.last().expect("validated nonempty");
        if largest > split.validation.len() {
            return Err(CalibError::Config(format!(
                "task '{}' has {} validation rows, fewer than n={largest}",
                spec.name,
                split.validation.len()
            )));
        }
    }
    let mut jobs = Vec::new();
    for (spec, split) in cfg.tasks.iter().zip(&splits) {
        for &n in &cfg.val_sizes {
            for run in 0..cfg.runs {
                jobs.push(Job {
                    task: &spec.name,
                    split,
                    n,
                    run,
                });
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| CalibError::Config(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<Vec<Cell>>> =
        pool.install(|| jobs.par_iter().map(|j| run_job(j, cfg)).collect());
    let mut cells = Vec::with_capacity(jobs.len() * cfg.methods.len());
    for r in results {
        cells.extend(r?);
    }
    attach_relative(&mut cells);
    let tasks: Vec<String> = cfg.tasks.iter().map(|t| t.name.clone()).collect();
    let aggregates = aggregate(&cells, &tasks, &cfg.methods, &cfg.val_sizes);
    Ok(BenchmarkReport {
        name: cfg.name.clone(),
        tasks,
        methods: cfg.methods.clone(),
        val_sizes: cfg.val_sizes.clone(),
        runs: cfg.runs,
        cells,
        aggregates,
    })
}

fn opt_str(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), fmt_f64)
}

impl BenchmarkReport {
    pub fn aggregate(&self, task: &str, method: Method, n: usize) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.task == task && a.method == method && a.n_val == n)
    }

    /// Mean over tasks of each task's mean TS-relative metric (`idx`: 0 ECE, 1 NLL, 2 Brier).
    pub fn avg_relative(&self, method: Method, n: usize, idx: usize) -> Option<f64> {
        let v: Vec<f64> = self
            .tasks
            .iter()
            .filter_map(|t| self.aggregate(t, method, n).and_then(|a| a.relative[idx]))
            .collect();
        mean_std(&v).map(|m| m.mean)
    }

    /// Raw grid, one cell per line.
    pub fn cells_csv(&self) -> String {
        let mut s = String::from(
            "task,method,n_val,run,seed,index_hash,status,ece,nll,brier,accuracy,rel_ece,rel_nll,rel_brier\n",
        );
        for c in &self.cells {
            let (status, metrics) = match &c.outcome {
                Ok(r) => (
                    "ok",
                    [r.ece, r.nll, r.brier, r.accuracy].map(fmt_f64).join(","),
                ),
                Err(_) => ("failed", "NA,NA,NA,NA".to_string()),
            };
            let rel = match c.relative {
                Some(r) => r.map(opt_str).join(","),
                None => "NA,NA,NA".to_string(),
            };
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                c.task,
                c.method.tag(),
                c.n_val,
                c.run,
                c.seed,
                c.index_hash,
                status,
                metrics,
                rel
            );
        }
        s
    }

    /// Markdown tables: one per (metric, validation size), ECE in percent.
    pub fn summary_md(&self) -> String {
        let mut s = format!("# {}\n\n", self.name);
        let _ = writeln!(
            s,
            "{} runs per cell. Values are means over successful runs; `(k failed)` counts runs whose fit or metrics were non-finite.\n",
            self.runs
        );
        let metrics: [(&str, f64, fn(&Aggregate) -> Option<MeanStd>); 3] = [
            ("ECE (%)", 100.0, |a| a.ece),
            ("NLL", 1.0, |a| a.nll),
            ("Brier", 1.0, |a| a.brier),
        ];
        for &n in self.val_sizes.iter().rev() {
            for (idx, (title, scale, get)) in metrics.iter().enumerate() {
                let _ = writeln!(s, "## {title}, n_val = {n}\n");
                let _ = write!(s, "| Task |");
                for m in &self.methods {
                    let _ = write!(s, " {} |", m.label());
                }
                let _ = write!(s, "\n|---|");
                for _ in &self.methods {
                    s.push_str("---|");
                }
                s.push('\n');
                for t in &self.tasks {
                    let _ = write!(s, "| {t} |");
                    for &m in &self.methods {
                        let cell = match self.aggregate(t, m, n) {
                            Some(a) => {
                                let v = get(a).map_or("∞".to_string(), |ms| {
                                    format!("{:.4}", ms.mean * scale)
                                });
                                if a.failed > 0 {
                                    format!("{v} ({} failed)", a.failed)
                                } else {
                                    v
                                }
                            }
                            None => "NA".into(),
                        };
                        let _ = write!(s, " {cell} |");
                    }
                    s.push('\n');
                }
                let _ = write!(s, "| Avg. Relative |");
                for &m in &self.methods {
                    let v = self
                        .avg_relative(m, n, idx)
                        .map_or("NA".to_string(), |v| format!("{v:.4}"));
                    let _ = write!(s, " {v} |");
                }
                s.push_str("\n\n");
            }
        }
        s
    }

    /// Writes `<name>.cells.csv`, `<name>.summary.md` and `<name>.meta` into `dir`.
    pub fn write(&self, dir: &Path, cfg: &BenchmarkConfig) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| CalibError::io(dir, e))?;
        let write = |file: String, body: String| {
            let path = dir.join(file);
            std::fs::write(&path, body).map_err(|e| CalibError::io(&path, e))
        };
        write(format!("{}.cells.csv", self.name), self.cells_csv())?;
        write(format!("{}.summary.md", self.name), self.summary_md())?;
        write(format!("{}.meta", self.name), meta(cfg).to_text())
    }
}

/// Configuration and generator identity for a report.
pub fn meta(cfg: &BenchmarkConfig) -> KvDoc {
    let mut doc = KvDoc::new();
    doc.set("format", "calib-benchmark-meta/1")
        .set("version", env!("CARGO_PKG_VERSION"))
        .set("name", &cfg.name)
        .set("prng", PRNG_ID)
        .set(
            "seed_derivation",
            "sha256(calib-cell-seed/v1|seed0|task|0|n|run)[0..8] le",
        )
        .set("seed0", cfg.seed0)
        .set(
            "methods",
            cfg.methods
                .iter()
                .map(|m| m.tag())
                .collect::<Vec<_>>()
                .join(","),
        )
        .set(
            "val_sizes",
            cfg.val_sizes
                .iter()
                .map(|n| n.to_string())
                .collect::<Vec<_>>()
                .join(","),
        )
        .set("runs", cfg.runs)
        .set("ece_bins", cfg.ece_bins)
        .set("pts.hidden", "5,5")
        .set("pts.activation", "relu")
        .set("ets.fit", "two-stage")
        .set(
            "tasks",
            cfg.tasks
                .iter()
                .map(|t| t.name.as_str())
                .collect::<Vec<_>>()
                .join(","),
        );
    write_config(&mut doc, "fit.", &cfg.fit);
    for (m, c) in &cfg.method_fit {
        write_config(&mut doc, &format!("fit.{}.", m.tag()), c);
    }
    for t in &cfg.tasks {
        let key = format!("task.{}.source", t.name);
        match &t.source {
            TaskSource::Files { val, test, .. } => {
                doc.set(&key, format!("files:{}|{}", val.display(), test.display()));
            }
            TaskSource::Synthetic(s) => {
                let body: Vec<String> = s
                    .to_kv()
                    .entries()
                    .map(|(k, v)| format!("{k}={v}"))
                    .collect();
                doc.set(&key, format!("synthetic:{}", body.join(";")));
            }
            TaskSource::Split(_) => {
                doc.set(&key, "in-memory");
            }
        }
    }
    doc
}

/// How rows are grouped by class in [`analyze_per_class`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassGrouping {
    /// By the row's true label.
    Label,
    /// By the row's argmax class.
    Predicted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassRow {
    pub class: usize,
    pub count: usize,
    pub mean_predicted: Option<f64>,
    pub optimal: Option<f64>,
}

fn require_temperature_map(p: &CalibratorParams) -> Result<()> {
    if matches!(p, CalibratorParams::Ets(_)) {
        return Err(CalibError::Unsupported(
            "analysis needs a calibrator with a temperature function".into(),
        ));
    }
    Ok(())
}

/// Per class: mean temperature assigned by `fitted` and the NLL-optimal
/// temperature of that class's rows. Absent classes get `None` entries.
pub fn analyze_per_class(
    test: &LogitDataset,
    fitted: &CalibratorParams,
    grouping: ClassGrouping,
) -> Result<Vec<ClassRow>> {
    require_temperature_map(fitted)?;
    let mut groups = vec![Vec::new(); test.k()];
    let mut sums = vec![0.0; test.k()];
    for (i, (z, y)) in test.rows().enumerate() {
        let c = match grouping {
            ClassGrouping::Label => y,
            ClassGrouping::Predicted => argmax(z),
        };
        groups[c].push(i);
        sums[c] += fitted.temperature(z)?;
    }
    let optimal = optimal_temperature_per_group(test, &groups)?;
    Ok((0..test.k())
        .map(|c| ClassRow {
            class: c,
            count: groups[c].len(),
            mean_predicted: (!groups[c].is_empty()).then(|| sums[c] / groups[c].len() as f64),
            optimal: optimal[c],
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyBinRow {
    /// Bounds on ln(normalized entropy).
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub optimal: Option<f64>,
    pub mean_predicted: Option<f64>,
}

/// Equal-width bins over the observed log normalized entropy; per bin the
/// NLL-optimal temperature and the mean temperature assigned by `fitted`.
pub fn analyze_entropy_bins(
    test: &LogitDataset,
    fitted: &CalibratorParams,
    bins: usize,
) -> Result<Vec<EntropyBinRow>> {
    if bins < 2 {
        return Err(CalibError::invalid(
            "entropy analysis needs at least 2 bins",
        ));
    }
    require_temperature_map(fitted)?;
    let log_ent: Vec<f64> = test
        .rows()
        .map(|(z, _)| normalized_entropy_unchecked(z).ln())
        .collect();
    let lo = log_ent.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = log_ent.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let mut groups = vec![Vec::new(); bins];
    let mut sums = vec![0.0; bins];
    for (i, ((z, _), &h)) in test.rows().zip(&log_ent).enumerate() {
        let b = if width > 0.0 {
            (((h - lo) / width) as usize).min(bins - 1)
        } else {
            0
        };
        groups[b].push(i);
        sums[b] += fitted.temperature(z)?;
    }
    let optimal = optimal_temperature_per_group(test, &groups)?;
    Ok((0..bins)
        .map(|b| EntropyBinRow {
            lo: lo + width * b as f64,
            hi: if b + 1 == bins {
                hi
            } else {
                lo + width * (b + 1) as f64
            },
            count: groups[b].len(),
            optimal: optimal[b],
            mean_predicted: (!groups[b].is_empty()).then(|| sums[b] / groups[b].len() as f64),
        })
        .collect())
}

pub fn per_class_table(rows: &[ClassRow]) -> String {
    let mut s = String::from("class,count,mean_predicted_t,optimal_t\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            r.class,
            r.count,
            opt_str(r.mean_predicted),
            opt_str(r.optimal)
        );
    }
    s
}

pub fn entropy_bins_table(rows: &[EntropyBinRow]) -> String {
    let mut s = String::from("log_entropy_lo,log_entropy_hi,count,optimal_t,mean_predicted_t\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            fmt_f64(r.lo),
            fmt_f64(r.hi),
            r.count,
            opt_str(r.optimal),
            opt_str(r.mean_predicted)
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::Distortion;

    fn small_cfg(methods: Vec<Method>) -> BenchmarkConfig {
        BenchmarkConfig {
            name: "t".into(),
            tasks: vec![TaskSpec {
                name: "g".into(),
                source: TaskSource::Synthetic(SynthConfig::new(
                    "g",
                    4,
                    300,
                    300,
                    Distortion::Global { t_star: 2.0 },
                    1,
                )),
            }],
            methods,
            val_sizes: vec![50, 300],
            runs: 2,
            ece_bins: 15,
            seed0: 5,
            fit: FitConfig {
                lr0: 1e-2,
                lr_floor: 1e-5,
                ..FitConfig::default()
            },
            method_fit: Vec::new(),
            workers: 1,
        }
    }

    #[test]
    fn relative_metric_examples() {
        assert_eq!(relative_metric(2.54, 2.54), Some(1.0));
        assert!((relative_metric(1.62, 2.54).unwrap() - 0.6378).abs() < 1e-4);
        assert_eq!(relative_metric(0.0, 3.0), Some(0.0));
        assert_eq!(relative_metric(1.0, 0.0), None);
        assert_eq!(relative_metric(1.0, -1.0), None);
    }

    #[test]
    fn seeds_depend_on_every_coordinate() {
        let base = derive_seed(1, "a", 200, 0);
        assert_eq!(base, derive_seed(1, "a", 200, 0));
        for other in [
            derive_seed(2, "a", 200, 0),
            derive_seed(1, "b", 200, 0),
            derive_seed(1, "a", 500, 0),
            derive_seed(1, "a", 200, 1),
        ] {
            assert_ne!(base, other);
        }
    }

    #[test]
    fn ts_only_grid_is_self_normalized() {
        let report = run_benchmark(&small_cfg(vec![Method::Ts])).unwrap();
        assert_eq!(report.cells.len(), 4);
        for c in &report.cells {
            assert_eq!(c.relative, Some([Some(1.0); 3]));
        }
        assert_eq!(report.avg_relative(Method::Ts, 50, 1), Some(1.0));
    }

    #[test]
    fn grid_is_complete_deterministic_and_shares_subsamples() {
        let cfg = small_cfg(vec![Method::Ts, Method::Hts, Method::Bts]);
        let a = run_benchmark(&cfg).unwrap();
        let b = run_benchmark(&BenchmarkConfig {
            workers: 3,
            ..cfg.clone()
        })
        .unwrap();
        assert_eq!(a.cells_csv(), b.cells_csv());
        assert_eq!(a.cells.len(), 3 * 2 * 2);
        for c in &a.cells {
            let same: Vec<&Cell> = a
                .cells
                .iter()
                .filter(|o| o.n_val == c.n_val && o.run == c.run)
                .collect();
            assert!(same
                .iter()
                .all(|o| o.index_hash == c.index_hash && o.seed == c.seed));
        }
        let agg = a.aggregate("g", Method::Hts, 300).unwrap();
        let nlls: Vec<f64> = a
            .cells
            .iter()
            .filter(|c| c.method == Method::Hts && c.n_val == 300)
            .map(|c| c.report().unwrap().nll)
            .collect();
        assert!((agg.nll.unwrap().mean - (nlls[0] + nlls[1]) / 2.0).abs() < 1e-15);
        assert!(a.summary_md().contains("Avg. Relative"));
    }

    #[test]
    fn config_errors() {
        let mut cfg = small_cfg(vec![Method::Ts]);
        cfg.val_sizes = vec![300, 50];
        assert!(run_benchmark(&cfg).is_err());
        let mut cfg = small_cfg(vec![Method::Ts]);
        cfg.val_sizes = vec![50, 301];
        assert!(run_benchmark(&cfg).is_err());
        let mut cfg = small_cfg(vec![Method::Ts]);
        cfg.runs = 0;
        assert!(run_benchmark(&cfg).is_err());
    }

    #[test]
    fn config_parses_from_kv() {
        let text = "name=x\nmethods=ts,hts\nval_sizes=10,20\nruns=2\nseed0=3\nfit.lr0=0.01\nfit.hts.lr0=0.5\ntasks=s,f\n\
                    task.s.kind=synthetic\ntask.s.k=3\ntask.s.n_val=30\ntask.s.n_test=30\n\
                    task.s.distortion=global\ntask.s.t_star=2.0\n\
                    task.f.kind=files\ntask.f.val=v.csv\ntask.f.test=t.csv\n";
        let cfg =
            BenchmarkConfig::from_kv(&KvDoc::parse(text, "c").unwrap(), Path::new("/d")).unwrap();
        assert_eq!(cfg.methods, vec![Method::Ts, Method::Hts]);
        assert_eq!(cfg.fit.lr0, 0.01);
        assert_eq!(cfg.fit_config(Method::Ts).lr0, 0.01);
        assert_eq!(cfg.fit_config(Method::Hts).lr0, 0.5);
        assert_eq!(cfg.fit_config(Method::Hts).momentum, cfg.fit.momentum);
        assert!(
            matches!(&cfg.tasks[1].source, TaskSource::Files { val, .. } if val == Path::new("/d/v.csv"))
        );
        assert!(
            matches!(&cfg.tasks[0].source, TaskSource::Synthetic(s) if s.name == "s" && s.k == 3)
        );
    }

    #[test]
    fn per_class_analysis_for_ts_is_flat() {
        let (split, _) = generate(&SynthConfig::new(
            "p",
            3,
            10,
            3000,
            Distortion::Global { t_star: 2.0 },
            2,
        ))
        .unwrap();
        let p = CalibratorParams::ts_with_temperature(1.7).unwrap();
        let rows = analyze_per_class(&split.test, &p, ClassGrouping::Label).unwrap();
        assert_eq!(rows.len(), 3);
        for r in &rows {
            assert!((r.mean_predicted.unwrap() - 1.7).abs() < 1e-9);
            let opt = r.optimal.unwrap();
            assert!(opt > 1.5 && opt < 2.6, "{opt}");
        }
        assert!(per_class_table(&rows).starts_with("class,count"));
    }

    #[test]
    fn entropy_bins_cover_every_row() {
        let (split, _) = generate(&SynthConfig::new(
            "e",
            5,
            10,
            2000,
            Distortion::Global { t_star: 1.5 },
            4,
        ))
        .unwrap();
        let p = CalibratorParams::Hts { w_h: 0.5, b: 0.3 };
        let rows = analyze_entropy_bins(&split.test, &p, 8).unwrap();
        assert_eq!(rows.iter().map(|r| r.count).sum::<usize>(), 2000);
        assert!(analyze_entropy_bins(&split.test, &p, 1).is_err());
        let ets = CalibratorParams::Ets(
            crate::calibrators::EtsParams::new([1.0, 0.0, 0.0], 1.0).unwrap(),
        );
        assert!(analyze_entropy_bins(&split.test, &ets, 4).is_err());
    }
}
