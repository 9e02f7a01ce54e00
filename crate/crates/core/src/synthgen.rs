//! Synthetic miscalibrated logit tasks with known distortions.
//!
//! Each row draws a calibrated posterior `q*` from a symmetric Dirichlet,
//! a label from `q*`, and emits `z = ln(q*) * T_dist`. Dividing by
//! `T_dist` recovers calibrated logits, so the ideal recalibration
//! temperature of every row is known.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::calibrators::T_MIN;
use crate::dataset::{LogitDataset, TaskSplit, PRNG_ID};
use crate::error::{CalibError, Result};
use crate::kv::KvDoc;
use crate::mathkit::{argmax, normalized_entropy_unchecked, softplus};

/// How calibrated logits are distorted.
#[derive(Debug, Clone, PartialEq)]
pub enum Distortion {
    /// One temperature for every row.
    Global { t_star: f64 },
    /// Temperature indexed by the predicted class.
    PerClass { t_star: Vec<f64> },
    /// `T = softplus(w* ln H(z* T) + b*)`: the temperature is linear in the
    /// log normalized entropy of the distorted row it produces.
    EntropyLinear { w_star: f64, b_star: f64 },
}

impl Distortion {
    pub fn tag(&self) -> &'static str {
        match self {
            Distortion::Global { .. } => "global",
            Distortion::PerClass { .. } => "per_class",
            Distortion::EntropyLinear { .. } => "entropy_linear",
        }
    }

    /// Temperature applied to the calibrated logits `z_star`.
    pub fn temperature(&self, z_star: &[f64]) -> f64 {
        let t = match self {
            Distortion::Global { t_star } => *t_star,
            Distortion::PerClass { t_star } => t_star[argmax(z_star)],
            Distortion::EntropyLinear { w_star, b_star } => {
                entropy_fixed_point(z_star, *w_star, *b_star)
            }
        };
        t.max(T_MIN)
    }

    fn write(&self, doc: &mut KvDoc) {
        doc.set("distortion", self.tag());
        match self {
            Distortion::Global { t_star } => {
                doc.set_f64("t_star", *t_star);
            }
            Distortion::PerClass { t_star } => {
                doc.set_f64_list("t_star", t_star);
            }
            Distortion::EntropyLinear { w_star, b_star } => {
                doc.set_f64("w_star", *w_star).set_f64("b_star", *b_star);
            }
        }
    }

    /// Reads a distortion; a per-class list shorter than `k` repeats cyclically.
    fn read(doc: &KvDoc, k: usize) -> Result<Self> {
        Ok(match doc.require("distortion")? {
            "global" => Distortion::Global {
                t_star: doc.req("t_star")?,
            },
            "per_class" => {
                let base: Vec<f64> = doc.req_list("t_star")?;
                if base.is_empty() {
                    return Err(CalibError::Config("per_class needs t_star values".into()));
                }
                Distortion::PerClass {
                    t_star: (0..k).map(|c| base[c % base.len()]).collect(),
                }
            }
            "entropy_linear" => Distortion::EntropyLinear {
                w_star: doc.req("w_star")?,
                b_star: doc.req("b_star")?,
            },
            other => {
                return Err(CalibError::Config(format!("unknown distortion '{other}'")));
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub name: String,
    pub k: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub dirichlet_alpha: f64,
    pub distortion: Distortion,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(
        name: &str,
        k: usize,
        n_val: usize,
        n_test: usize,
        distortion: Distortion,
        seed: u64,
    ) -> Self {
        SynthConfig {
            name: name.to_string(),
            k,
            n_val,
            n_test,
            dirichlet_alpha: 1.0,
            distortion,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CalibError::Config(m));
        if self.k < 2 {
            return bad(format!("k must be >= 2, got {}", self.k));
        }
        if self.n_val == 0 || self.n_test == 0 {
            return bad("n_val and n_test must be >= 1".into());
        }
        if !(self.dirichlet_alpha > 0.0 && self.dirichlet_alpha.is_finite()) {
            return bad("dirichlet_alpha must be positive".into());
        }
        match &self.distortion {
            Distortion::Global { t_star } if !(*t_star >= T_MIN && t_star.is_finite()) => {
                bad(format!("t_star {t_star} below T_MIN"))
            }
            Distortion::PerClass { t_star } if t_star.len() != self.k => bad(format!(
                "need {} per-class temperatures, got {}",
                self.k,
                t_star.len()
            )),
            Distortion::PerClass { t_star }
                if t_star.iter().any(|t| !(*t >= T_MIN && t.is_finite())) =>
            {
                bad("per-class temperatures must be >= T_MIN".into())
            }
            Distortion::EntropyLinear { w_star, b_star }
                if !(w_star.is_finite() && b_star.is_finite()) =>
            {
                bad("entropy distortion parameters must be finite".into())
            }
            _ => Ok(()),
        }
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.set("name", &self.name)
            .set("k", self.k)
            .set("n_val", self.n_val)
            .set("n_test", self.n_test)
            .set_f64("alpha", self.dirichlet_alpha);
        self.distortion.write(&mut doc);
        doc.set("seed", self.seed);
        doc
    }

    /// Reads a config document; keys may carry a common `prefix` such as `task.a.`.
    pub fn from_kv_prefixed(doc: &KvDoc, prefix: &str) -> Result<Self> {
        let mut sub = KvDoc::new();
        for (k, v) in doc.entries() {
            if let Some(rest) = k.strip_prefix(prefix) {
                sub.set(rest, v);
            }
        }
        let k: usize = sub.req("k")?;
        let cfg = SynthConfig {
            name: sub.get("name").unwrap_or("synthetic").to_string(),
            k,
            n_val: sub.req("n_val")?,
            n_test: sub.req("n_test")?,
            dirichlet_alpha: sub.or("alpha", 1.0)?,
            distortion: Distortion::read(&sub, k)?,
            seed: sub.or("seed", 0)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        SynthConfig::from_kv_prefixed(doc, "")
    }
}

/// Ground truth of a generated task.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOracle {
    pub distortion: Distortion,
    pub k: usize,
    pub dirichlet_alpha: f64,
    pub seed: u64,
    pub generator: String,
}

const GENERATOR_ID: &str = "symmetric-dirichlet/log-posterior-logits/v1";

impl SynthOracle {
    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.set("format", "calib-oracle/1")
            .set("generator", &self.generator)
            .set("prng", PRNG_ID)
            .set("k", self.k)
            .set_f64("alpha", self.dirichlet_alpha)
            .set("seed", self.seed);
        self.distortion.write(&mut doc);
        doc
    }

    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        let k = doc.req("k")?;
        Ok(SynthOracle {
            distortion: Distortion::read(doc, k)?,
            k,
            dirichlet_alpha: doc.req("alpha")?,
            seed: doc.req("seed")?,
            generator: doc.require("generator")?.to_string(),
        })
    }
}

/// Solves `T = softplus(w ln H(z T) + b)` by bisection.
///
/// `g(T) = T - softplus(..)` is negative at `T_MIN` and positive once `T`
/// exceeds `softplus(b + |w| ln(1/ENT_MIN))`, so a root is always bracketed;
/// for `w >= 0` it is unique because the entropy falls as `T` grows.
fn entropy_fixed_point(z_star: &[f64], w: f64, b: f64) -> f64 {
    let mut scaled = vec![0.0; z_star.len()];
    let mut g = |t: f64| {
        for (s, v) in scaled.iter_mut().zip(z_star) {
            *s = v * t;
        }
        t - softplus(w * normalized_entropy_unchecked(&scaled).ln() + b)
    };
    let mut lo = T_MIN;
    if g(lo) >= 0.0 {
        return lo;
    }
    let mut hi = softplus(b + w.abs() * (1.0 / crate::mathkit::ENT_MIN).ln()) + 1.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn draw_rows(
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
    gamma: &Gamma<f64>,
    n: usize,
    name: &str,
) -> Result<LogitDataset> {
    let k = cfg.k;
    let mut logits = Vec::with_capacity(n * k);
    let mut labels = Vec::with_capacity(n);
    let mut g = vec![0.0; k];
    let mut z_star = vec![0.0; k];
    for _ in 0..n {
        for v in g.iter_mut() {
            *v = gamma.sample(rng).max(f64::MIN_POSITIVE);
        }
        let total: f64 = g.iter().sum();
        let ln_total = total.ln();
        for (zs, &gv) in z_star.iter_mut().zip(&g) {
            *zs = gv.ln() - ln_total;
        }
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut label = k - 1;
        for (c, &gv) in g.iter().enumerate() {
            acc += gv;
            if u < acc {
                label = c;
                break;
            }
        }
        let t = cfg.distortion.temperature(&z_star);
        logits.extend(z_star.iter().map(|v| v * t));
        labels.push(label);
    }
    LogitDataset::new(logits, labels, k, name)
}

/// Generates the validation and test splits of a synthetic task.
pub fn generate(cfg: &SynthConfig) -> Result<(TaskSplit, SynthOracle)> {
    cfg.validate()?;
    let gamma = Gamma::new(cfg.dirichlet_alpha, 1.0)
        .map_err(|e| CalibError::Config(format!("bad dirichlet alpha: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let val = draw_rows(
        cfg,
        &mut rng,
        &gamma,
        cfg.n_val,
        &format!("{}.val", cfg.name),
    )?;
    let test = draw_rows(
        cfg,
        &mut rng,
        &gamma,
        cfg.n_test,
        &format!("{}.test", cfg.name),
    )?;
    let oracle = SynthOracle {
        distortion: cfg.distortion.clone(),
        k: cfg.k,
        dirichlet_alpha: cfg.dirichlet_alpha,
        seed: cfg.seed,
        generator: GENERATOR_ID.to_string(),
    };
    Ok((TaskSplit::new(val, test)?, oracle))
}

/// Writes `<name>.val.csv`, `<name>.test.csv` and `<name>.oracle` into `dir`.
pub fn write_task(dir: &Path, name: &str, split: &TaskSplit, oracle: &SynthOracle) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CalibError::io(dir, e))?;
    split.validation.save(dir.join(format!("{name}.val.csv")))?;
    split.test.save(dir.join(format!("{name}.test.csv")))?;
    oracle.to_kv().save(dir.join(format!("{name}.oracle")))
}
