//! Accuracy-preserving calibration maps over logits.
//!
//! Every map except ETS has the form `z -> z / T(z)` with a positive
//! temperature function `T`. TS, LTS, HTS, HnLTS and PTS compute `T` as
//! `softplus` of a parametric pre-activation and are fitted by gradient
//! descent (TS by a scalar minimizer); BTS is a confidence look-up table and
//! ETS a convex combination of scaled, raw and constant logits.

mod family;
mod fit;
mod pts;

pub use family::{nll_gradient, nll_value, Family};
pub use fit::{fit, fit_ts, optimal_temperature, optimal_temperature_per_group, TS_TEMP_RANGE};
pub use pts::{PtsNet, PTS_HIDDEN, PTS_MAX_INPUT};

pub use crate::optim::{FitConfig, FitObjective};

use crate::dataset::LogitDataset;
use crate::error::{CalibError, Result};
use crate::mathkit::softmax_into;

/// Floor applied to every temperature.
pub const T_MIN: f64 = 1e-4;

/// Lower edge of the forced BTS high-confidence bin.
pub const BTS_HIGH_CONF: f64 = 0.999;

/// Calibration method tags. `Ptse` is PTS fitted on the L_ECE loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Ts,
    Ets,
    Bts,
    Hts,
    Lts,
    Hnlts,
    Pts,
    Ptse,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Ts,
        Method::Ets,
        Method::Bts,
        Method::Hts,
        Method::Lts,
        Method::Hnlts,
        Method::Pts,
        Method::Ptse,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Ts => "ts",
            Method::Ets => "ets",
            Method::Bts => "bts",
            Method::Hts => "hts",
            Method::Lts => "lts",
            Method::Hnlts => "hnlts",
            Method::Pts => "pts",
            Method::Ptse => "ptse",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::Ts => "TS",
            Method::Ets => "ETS",
            Method::Bts => "BTS",
            Method::Hts => "HTS",
            Method::Lts => "LTS",
            Method::Hnlts => "HnLTS",
            Method::Pts => "PTS",
            Method::Ptse => "PTSe",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag() == tag.to_ascii_lowercase())
            .ok_or_else(|| CalibError::Config(format!("unknown method '{tag}'")))
    }

    /// Methods fitted by the SGD loop.
    pub fn uses_sgd(self) -> bool {
        matches!(
            self,
            Method::Lts | Method::Hts | Method::Hnlts | Method::Pts | Method::Ptse
        )
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Look-up table of per-bin temperatures keyed by top-label confidence.
///
/// Bin `i` covers `(edges[i-1], edges[i]]`, the first bin starting at 0; the
/// last edge is 1, so every confidence in `(0, 1]` has exactly one bin.
#[derive(Debug, Clone, PartialEq)]
pub struct BtsTable {
    pub edges: Vec<f64>,
    pub temps: Vec<f64>,
}

impl BtsTable {
    pub fn new(edges: Vec<f64>, temps: Vec<f64>) -> Result<Self> {
        if edges.is_empty() || edges.len() != temps.len() {
            return Err(CalibError::invalid("BTS needs one temperature per bin"));
        }
        if edges.windows(2).any(|w| !(w[0] <= w[1])) || *edges.last().unwrap() != 1.0 {
            return Err(CalibError::invalid(
                "BTS edges must be ascending and end at 1",
            ));
        }
        if temps.iter().any(|t| !(t.is_finite() && *t >= T_MIN)) {
            return Err(CalibError::invalid(
                "BTS temperatures must be finite and >= T_MIN",
            ));
        }
        Ok(BtsTable { edges, temps })
    }

    pub fn bin(&self, conf: f64) -> usize {
        self.edges
            .partition_point(|&e| e < conf)
            .min(self.edges.len() - 1)
    }
}

/// Weights on the simplex plus the temperature of the scaled component.
#[derive(Debug, Clone, PartialEq)]
pub struct EtsParams {
    pub w: [f64; 3],
    pub t_ets: f64,
}

impl EtsParams {
    pub fn new(w: [f64; 3], t_ets: f64) -> Result<Self> {
        if w.iter().any(|v| !(*v >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(CalibError::invalid(format!(
                "ETS weights {w:?} not on the simplex"
            )));
        }
        if !(t_ets.is_finite() && t_ets > 0.0) {
            return Err(CalibError::invalid("ETS temperature must be positive"));
        }
        Ok(EtsParams { w, t_ets })
    }

    /// Fitted weights put all mass on the constant component.
    pub fn is_degenerate(&self) -> bool {
        self.w[0] + self.w[1] <= 0.0
    }
}

/// Parameters of a fitted calibrator.
#[derive(Debug, Clone, PartialEq)]
pub enum CalibratorParams {
    Ts { a: f64 },
    Lts { w_l: Vec<f64>, b: f64 },
    Hts { w_h: f64, b: f64 },
    Hnlts { w_l: Vec<f64>, w_h: f64, b: f64 },
    Pts(PtsNet),
    Bts(BtsTable),
    Ets(EtsParams),
}

impl CalibratorParams {
    /// Plain temperature scaling with temperature `t`.
    pub fn ts_with_temperature(t: f64) -> Result<Self> {
        Ok(CalibratorParams::Ts {
            a: crate::mathkit::softplus_inverse(t)?,
        })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CalibratorParams::Ts { .. } => "ts",
            CalibratorParams::Lts { .. } => "lts",
            CalibratorParams::Hts { .. } => "hts",
            CalibratorParams::Hnlts { .. } => "hnlts",
            CalibratorParams::Pts(_) => "pts",
            CalibratorParams::Bts(_) => "bts",
            CalibratorParams::Ets(_) => "ets",
        }
    }

    /// Class count the parameters are tied to, if any.
    pub fn required_k(&self) -> Option<usize> {
        match self {
            CalibratorParams::Lts { w_l, .. } | CalibratorParams::Hnlts { w_l, .. } => {
                Some(w_l.len())
            }
            _ => None,
        }
    }

    pub(crate) fn check(&self, z: &[f64]) -> Result<()> {
        if z.len() < 2 {
            return Err(CalibError::invalid("logit vector needs K >= 2"));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(CalibError::invalid("non-finite logit"));
        }
        if let Some(k) = self.required_k() {
            if k != z.len() {
                return Err(CalibError::invalid(format!(
                    "{} parameters expect K={k}, got K={}",
                    self.kind(),
                    z.len()
                )));
            }
        }
        if let CalibratorParams::Pts(net) = self {
            if net.input_dim() != z.len().min(PTS_MAX_INPUT) {
                return Err(CalibError::invalid(format!(
                    "PTS network takes {} inputs, K={} gives {}",
                    net.input_dim(),
                    z.len(),
                    z.len().min(PTS_MAX_INPUT)
                )));
            }
        }
        Ok(())
    }

    /// Temperature assigned to `z`. ETS has no scalar temperature.
    pub fn temperature(&self, z: &[f64]) -> Result<f64> {
        self.check(z)?;
        Ok(match self {
            CalibratorParams::Bts(table) => {
                let mut q = vec![0.0; z.len()];
                softmax_into(z, &mut q);
                let conf = q.iter().copied().fold(0.0, f64::max);
                table.temps[table.bin(conf)]
            }
            CalibratorParams::Ets(_) => {
                return Err(CalibError::Unsupported(
                    "ETS has no scalar temperature".into(),
                ))
            }
            other => {
                let (family, theta) = other.flatten()?;
                family.temperature(&theta, z)
            }
        })
    }

    /// Calibrated logits for `z`.
    pub fn calibrate(&self, z: &[f64]) -> Result<Vec<f64>> {
        match self {
            CalibratorParams::Ets(p) => {
                self.check(z)?;
                let [w1, w2, w3] = p.w;
                let c = w3 / z.len() as f64;
                Ok(z.iter().map(|&v| w1 * v / p.t_ets + w2 * v + c).collect())
            }
            _ => {
                let t = self.temperature(z)?;
                Ok(z.iter().map(|v| v / t).collect())
            }
        }
    }

    /// Applies [`calibrate`](Self::calibrate) to every row.
    pub fn calibrate_dataset(&self, d: &LogitDataset) -> Result<LogitDataset> {
        match self {
            CalibratorParams::Ts { .. }
            | CalibratorParams::Lts { .. }
            | CalibratorParams::Hts { .. }
            | CalibratorParams::Hnlts { .. }
            | CalibratorParams::Pts(_) => {
                if let Some(z) = d.rows().next() {
                    self.check(z.0)?;
                }
                let (family, theta) = self.flatten()?;
                d.map_rows(|z| {
                    let t = family.temperature(&theta, z);
                    Ok(z.iter().map(|v| v / t).collect())
                })
            }
            _ => d.map_rows(|z| self.calibrate(z)),
        }
    }

    /// Flat parameter vector of the gradient-trained families.
    pub fn flatten(&self) -> Result<(Family, Vec<f64>)> {
        Ok(match self {
            CalibratorParams::Ts { a } => (Family::Ts, vec![*a]),
            CalibratorParams::Lts { w_l, b } => {
                let mut v = w_l.clone();
                v.push(*b);
                (Family::Lts { k: w_l.len() }, v)
            }
            CalibratorParams::Hts { w_h, b } => (Family::Hts, vec![*w_h, *b]),
            CalibratorParams::Hnlts { w_l, w_h, b } => {
                let mut v = w_l.clone();
                v.push(*w_h);
                v.push(*b);
                (Family::Hnlts { k: w_l.len() }, v)
            }
            CalibratorParams::Pts(net) => (
                Family::Pts {
                    input: net.input_dim(),
                },
                net.to_flat(),
            ),
            CalibratorParams::Bts(_) | CalibratorParams::Ets(_) => {
                return Err(CalibError::Unsupported(format!(
                    "{} is not fitted by gradient descent",
                    self.kind()
                )))
            }
        })
    }
}
