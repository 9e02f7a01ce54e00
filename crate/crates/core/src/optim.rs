//! Optimizers: minibatch SGD with Nesterov momentum and a plateau schedule,
//! Brent's bracketed scalar minimizer, and a central-difference gradient checker.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CalibError, Result};

/// Loss minimized when fitting a calibrator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitObjective {
    Nll,
    LEce,
}

impl FitObjective {
    pub fn tag(self) -> &'static str {
        match self {
            FitObjective::Nll => "nll",
            FitObjective::LEce => "lece",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "nll" => Ok(FitObjective::Nll),
            "lece" => Ok(FitObjective::LEce),
            other => Err(CalibError::Config(format!(
                "unknown objective '{other}' (expected nll or lece)"
            ))),
        }
    }
}

/// Hyperparameters for fitting. Defaults follow the reference protocol:
/// lr 1e-4, Nesterov 0.9, batch 1000, /10 on plateau down to 1e-7.
#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub objective: FitObjective,
    pub lr0: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub plateau_factor: f64,
    pub lr_floor: f64,
    pub plateau_patience: usize,
    /// Minimum absolute improvement that resets the plateau counter.
    pub plateau_threshold: f64,
    pub seed: u64,
    pub max_epochs: usize,
    /// Bins used by the L_ECE training loss.
    pub lece_bins: usize,
    /// Total BTS bins, including the forced high-confidence bin.
    pub bts_bins: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            objective: FitObjective::Nll,
            lr0: 1e-4,
            momentum: 0.9,
            batch_size: 1000,
            plateau_factor: 10.0,
            lr_floor: 1e-7,
            plateau_patience: 10,
            plateau_threshold: 1e-6,
            seed: 0,
            max_epochs: 100_000,
            lece_bins: 15,
            bts_bins: 50,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CalibError::Config(m.to_string()));
        if !(self.lr_floor > 0.0 && self.lr0 > self.lr_floor) {
            return bad("need lr0 > lr_floor > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.plateau_factor > 1.0) {
            return bad("plateau_factor must be > 1");
        }
        if self.plateau_patience == 0 || self.max_epochs == 0 {
            return bad("plateau_patience and max_epochs must be >= 1");
        }
        if !(self.plateau_threshold >= 0.0) {
            return bad("plateau_threshold must be >= 0");
        }
        if self.lece_bins == 0 || self.bts_bins < 2 {
            return bad("lece_bins must be >= 1 and bts_bins >= 2");
        }
        Ok(())
    }
}

/// A differentiable objective defined as a mean over rows.
pub trait SgdObjective {
    /// Number of rows that minibatches are drawn from.
    fn rows(&self) -> usize;

    /// Mean loss over `rows` at `params`; writes its gradient into `grad`.
    fn batch(&self, params: &[f64], rows: &[usize], grad: &mut [f64]) -> f64;

    /// Loss over every row, used for the plateau schedule and best-seen tracking.
    fn full(&self, params: &[f64]) -> f64;
}

/// Optimizer state carried across epochs.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub params: Vec<f64>,
    pub velocity: Vec<f64>,
    pub lr: f64,
    pub epochs_since_improvement: usize,
    pub best_objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct SgdOutcome {
    /// Best parameters seen by the full objective (the initial point included).
    pub params: Vec<f64>,
    pub objective: f64,
    pub initial_objective: f64,
    pub epochs: usize,
    pub lr_reductions: usize,
    pub trace: Vec<EpochRecord>,
}

/// Minibatch SGD with Nesterov momentum and a reduce-on-plateau schedule.
///
/// Update: `v <- mu*v - lr*grad(theta + mu*v)`, `theta <- theta + v`.
/// Rows are reshuffled each epoch from a stream derived from `(cfg.seed, epoch)`.
/// Training stops once the learning rate drops below `cfg.lr_floor` or after
/// `cfg.max_epochs`.
pub fn sgd_minimize<O: SgdObjective + ?Sized>(
    objective: &O,
    init: &[f64],
    cfg: &FitConfig,
) -> Result<SgdOutcome> {
    cfg.validate()?;
    let n = objective.rows();
    if n == 0 {
        return Err(CalibError::invalid("objective has no rows"));
    }
    let dim = init.len();
    let f0 = objective.full(init);
    if !f0.is_finite() {
        return Err(CalibError::Fit {
            epoch: 0,
            msg: format!("initial objective is {f0}"),
        });
    }
    let mut state = SgdState {
        params: init.to_vec(),
        velocity: vec![0.0; dim],
        lr: cfg.lr0,
        epochs_since_improvement: 0,
        best_objective: f0,
    };
    let mut best_params = init.to_vec();
    let mut best_seen = f0;
    let mut order: Vec<usize> = (0..n).collect();
    let mut lookahead = vec![0.0; dim];
    let mut grad = vec![0.0; dim];
    let mut trace = Vec::new();
    let mut lr_reductions = 0;
    let stop_below = cfg.lr_floor * (1.0 - 1e-9);
    let mu = cfg.momentum;
    let mut epochs = 0;

    for epoch in 1..=cfg.max_epochs {
        epochs = epoch;
        if cfg.batch_size < n {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(epoch as u64);
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(cfg.batch_size) {
            for ((l, p), v) in lookahead.iter_mut().zip(&state.params).zip(&state.velocity) {
                *l = p + mu * v;
            }
            let f = objective.batch(&lookahead, chunk, &mut grad);
            if !f.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(CalibError::Fit {
                    epoch,
                    msg: "non-finite minibatch loss or gradient".into(),
                });
            }
            for ((p, v), g) in state.params.iter_mut().zip(&mut state.velocity).zip(&grad) {
                *v = mu * *v - state.lr * g;
                *p += *v;
            }
        }
        let f = objective.full(&state.params);
        if !f.is_finite() {
            return Err(CalibError::Fit {
                epoch,
                msg: format!("objective became {f}"),
            });
        }
        trace.push(EpochRecord {
            epoch,
            lr: state.lr,
            objective: f,
        });
        if f < best_seen {
            best_seen = f;
            best_params.copy_from_slice(&state.params);
        }
        if f < state.best_objective - cfg.plateau_threshold {
            state.best_objective = f;
            state.epochs_since_improvement = 0;
        } else {
            state.epochs_since_improvement += 1;
            if state.epochs_since_improvement >= cfg.plateau_patience {
                state.lr /= cfg.plateau_factor;
                state.epochs_since_improvement = 0;
                lr_reductions += 1;
                if state.lr < stop_below {
                    break;
                }
            }
        }
    }

    Ok(SgdOutcome {
        params: best_params,
        objective: best_seen,
        initial_objective: f0,
        epochs,
        lr_reductions,
        trace,
    })
}

const GOLDEN: f64 = 0.381_966_011_250_105_1;

/// Brent's method (golden section with parabolic steps) on `[lo, hi]`.
///
/// Returns a point within `tol` of a local minimizer, using at most 200
/// iterations; the endpoints are compared at the end so a boundary minimum
/// returns the boundary itself.
pub fn scalar_minimize<F: FnMut(f64) -> f64>(mut f: F, lo: f64, hi: f64, tol: f64) -> Result<f64> {
    if !(lo < hi) || !(tol > 0.0) {
        return Err(CalibError::invalid(format!(
            "bad bracket [{lo}, {hi}] or tolerance {tol}"
        )));
    }
    let mut eval = |x: f64| -> Result<f64> {
        let v = f(x);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(CalibError::invalid(format!("objective is {v} at x = {x}")))
        }
    };
    let (mut a, mut b) = (lo, hi);
    let mut x = a + GOLDEN * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = eval(x)?;
    let (mut fw, mut fv) = (fx, fx);
    let (mut d, mut e) = (0.0f64, 0.0f64);
    let tol1 = 0.5 * tol;
    let tol2 = tol;

    for _ in 0..200 {
        let xm = 0.5 * (a + b);
        if (x - xm).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let e_prev = e;
            if p.abs() < (0.5 * q * e_prev).abs() && p > q * (a - x) && p < q * (b - x) {
                e = d;
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if xm >= x { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= xm { a - x } else { b - x };
            d = GOLDEN * e;
        }
        let u = if d.abs() >= tol1 {
            x + d
        } else {
            x + tol1.copysign(d)
        };
        let fu = eval(u)?;
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }

    let (flo, fhi) = (eval(lo)?, eval(hi)?);
    if flo < fx && flo <= fhi {
        Ok(lo)
    } else if fhi < fx {
        Ok(hi)
    } else {
        Ok(x)
    }
}

/// Maximum relative error between an analytic gradient and central differences:
/// `max_i |g_i - fd_i| / max(1e-8, |g_i| + |fd_i|)`.
pub fn grad_check<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    analytic: &[f64],
    point: &[f64],
    step: f64,
) -> Result<f64> {
    if !(step > 0.0) {
        return Err(CalibError::invalid(
            "finite-difference step must be positive",
        ));
    }
    if analytic.len() != point.len() {
        return Err(CalibError::invalid("gradient and point differ in length"));
    }
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let fp = f(&x);
        x[i] = orig - step;
        let fm = f(&x);
        x[i] = orig;
        let fd = (fp - fm) / (2.0 * step);
        let g = analytic[i];
        worst = worst.max((g - fd).abs() / (g.abs() + fd.abs()).max(1e-8));
    }
    Ok(worst)
}
