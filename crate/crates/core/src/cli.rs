//! Command-line bindings. Each subcommand loads its inputs, calls into the
//! library and formats the result.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crate::calibrators::{fit, Method};
use crate::dataset::load_logits;
use crate::error::Result;
use crate::harness::{
    analyze_entropy_bins, analyze_per_class, entropy_bins_table, per_class_table, run_benchmark,
    BenchmarkConfig, ClassGrouping,
};
use crate::kv::{fmt_f64, KvDoc};
use crate::metrics::{EceBinning, MetricReport, DEFAULT_ECE_BINS};
use crate::optim::FitObjective;
use crate::paramfile::{read_config, FittedCalibrator};
use crate::synthgen::{generate, write_task, SynthConfig};

#[derive(Debug, Parser)]
#[command(
    name = "calib",
    version,
    about = "Post-hoc calibration of classifier logits"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ObjectiveArg {
    Nll,
    Lece,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    PerClass,
    EntropyBins,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GroupingArg {
    Label,
    Predicted,
}

fn positive(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    Method::from_tag(s).map_err(|e| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic validation/test logits with a known distortion.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a calibrator on validation logits.
    Fit {
        /// ts, ets, bts, hts, lts, hnlts, pts or ptse
        #[arg(long, value_parser = parse_method)]
        method: Method,
        #[arg(long)]
        val: PathBuf,
        #[arg(long, value_enum)]
        objective: Option<ObjectiveArg>,
        #[arg(long, env = "CALIB_SEED")]
        seed: Option<u64>,
        /// key=value file with `fit.*` optimizer settings
        #[arg(long)]
        fit_config: Option<PathBuf>,
        /// Input rows are probabilities; take their logarithm on load.
        #[arg(long)]
        from_probs: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print metrics of a fitted calibrator on test logits.
    Evaluate {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value_t = DEFAULT_ECE_BINS, value_parser = positive)]
        ece_bins: usize,
        #[arg(long)]
        from_probs: bool,
    },
    /// Run a benchmark grid and write its reports.
    Benchmark {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Cap on worker threads (overrides the config).
        #[arg(long, value_parser = positive)]
        workers: Option<usize>,
    },
    /// Compare predicted and optimal temperatures on test logits.
    Analyze {
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Class assignment for per-class mode.
        #[arg(long, value_enum, default_value = "label")]
        grouping: GroupingArg,
        /// Bin count for entropy-bins mode.
        #[arg(long, default_value_t = 10, value_parser = positive)]
        bins: usize,
        #[arg(long)]
        from_probs: bool,
    },
}

fn run_generate(config: &Path, out: &Path) -> Result<String> {
    let doc = KvDoc::load(config)?;
    let configs = match doc.get("tasks") {
        Some(list) => list
            .split(',')
            .map(str::trim)
            .map(|name| {
                let mut c = SynthConfig::from_kv_prefixed(&doc, &format!("task.{name}."))?;
                c.name = name.to_string();
                Ok(c)
            })
            .collect::<Result<Vec<_>>>()?,
        None => vec![SynthConfig::from_kv(&doc)?],
    };
    let mut msg = String::new();
    for cfg in configs {
        let (split, oracle) = generate(&cfg)?;
        write_task(out, &cfg.name, &split, &oracle)?;
        msg.push_str(&format!("wrote {} to {}\n", cfg.name, out.display()));
    }
    Ok(msg)
}

fn run_command(cmd: Command) -> Result<String> {
    match cmd {
        Command::Generate { config, out } => run_generate(&config, &out),
        Command::Fit {
            method,
            val,
            objective,
            seed,
            fit_config,
            from_probs,
            out,
        } => {
            let mut cfg = match &fit_config {
                Some(p) => read_config(&KvDoc::load(p)?, "fit.")?,
                None => Default::default(),
            };
            if let Some(o) = objective {
                cfg.objective = match o {
                    ObjectiveArg::Nll => FitObjective::Nll,
                    ObjectiveArg::Lece => FitObjective::LEce,
                };
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let data = load_logits(&val, from_probs)?;
            let params = fit(method, &data, &cfg)?;
            let fitted = FittedCalibrator {
                method,
                k: data.k(),
                params,
                config: cfg,
            };
            fitted.save(&out)?;
            Ok(format!("wrote {}\n", out.display()))
        }
        Command::Evaluate {
            params,
            test,
            ece_bins,
            from_probs,
        } => {
            let fitted = FittedCalibrator::load(&params)?;
            let data = load_logits(&test, from_probs)?;
            let cal = fitted.params.calibrate_dataset(&data)?;
            let r = MetricReport::evaluate(&cal, EceBinning::new(ece_bins));
            let mut doc = KvDoc::new();
            doc.set("method", fitted.method.tag())
                .set("n", data.len())
                .set("k", data.k())
                .set("ece_bins", ece_bins)
                .set("accuracy", fmt_f64(r.accuracy))
                .set("ece", fmt_f64(r.ece))
                .set("ece_pct", fmt_f64(r.ece * 100.0))
                .set("nll", fmt_f64(r.nll))
                .set("brier", fmt_f64(r.brier));
            Ok(doc.to_text())
        }
        Command::Benchmark {
            config,
            out,
            workers,
        } => {
            let base = config.parent().unwrap_or(Path::new("."));
            let mut cfg = BenchmarkConfig::from_kv(&KvDoc::load(&config)?, base)?;
            if let Some(w) = workers {
                cfg.workers = w;
            }
            let report = run_benchmark(&cfg)?;
            report.write(&out, &cfg)?;
            Ok(format!(
                "wrote {} cells for '{}' to {}\n",
                report.cells.len(),
                report.name,
                out.display()
            ))
        }
        Command::Analyze {
            mode,
            params,
            test,
            grouping,
            bins,
            from_probs,
        } => {
            let fitted = FittedCalibrator::load(&params)?;
            let data = load_logits(&test, from_probs)?;
            match mode {
                ModeArg::PerClass => {
                    let g = match grouping {
                        GroupingArg::Label => ClassGrouping::Label,
                        GroupingArg::Predicted => ClassGrouping::Predicted,
                    };
                    Ok(per_class_table(&analyze_per_class(
                        &data,
                        &fitted.params,
                        g,
                    )?))
                }
                ModeArg::EntropyBins => Ok(entropy_bins_table(&analyze_entropy_bins(
                    &data,
                    &fitted.params,
                    bins,
                )?)),
            }
        }
    }
}

/// Parses `args` (program name first) and runs the subcommand.
/// Exit status: 0 success, 1 usage error, 2 data or fit error.
pub fn dispatch<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run_command(cli.command) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("calib: {e}");
            ExitCode::from(2)
        }
    }
}
