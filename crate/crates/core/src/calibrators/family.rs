//! Softplus temperature families trained by gradient descent, with their
//! hand-derived NLL and L_ECE gradients.

use super::pts::{self, PtsScratch, PTS_MAX_INPUT};
use super::{CalibratorParams, PtsNet, T_MIN};
use crate::dataset::LogitDataset;
use crate::error::{CalibError, Result};
use crate::mathkit::{argmax, normalized_entropy_unchecked, sigmoid, softplus};
use crate::metrics::{BinStats, EceBinning};
use crate::optim::{FitObjective, SgdObjective};

/// Shape of a flat parameter vector for one of the gradient-trained maps.
///
/// Layouts: `Ts = [a]`, `Lts = [w_l.., b]`, `Hts = [w_h, b]`,
/// `Hnlts = [w_l.., w_h, b]`, `Pts` = the network's flat layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Ts,
    Lts { k: usize },
    Hts,
    Hnlts { k: usize },
    Pts { input: usize },
}

impl Family {
    pub fn dim(self) -> usize {
        match self {
            Family::Ts => 1,
            Family::Lts { k } => k + 1,
            Family::Hts => 2,
            Family::Hnlts { k } => k + 2,
            Family::Pts { input } => pts::param_count(input),
        }
    }

    fn uses_entropy(self) -> bool {
        matches!(self, Family::Hts | Family::Hnlts { .. })
    }

    fn top_dim(self) -> usize {
        match self {
            Family::Pts { input } => input,
            _ => 0,
        }
    }

    pub fn to_params(self, theta: &[f64]) -> Result<CalibratorParams> {
        if theta.len() != self.dim() {
            return Err(CalibError::invalid(format!(
                "{self:?} expects {} parameters, got {}",
                self.dim(),
                theta.len()
            )));
        }
        Ok(match self {
            Family::Ts => CalibratorParams::Ts { a: theta[0] },
            Family::Lts { k } => CalibratorParams::Lts {
                w_l: theta[..k].to_vec(),
                b: theta[k],
            },
            Family::Hts => CalibratorParams::Hts {
                w_h: theta[0],
                b: theta[1],
            },
            Family::Hnlts { k } => CalibratorParams::Hnlts {
                w_l: theta[..k].to_vec(),
                w_h: theta[k],
                b: theta[k + 1],
            },
            Family::Pts { input } => {
                CalibratorParams::Pts(PtsNet::from_flat(input, theta.to_vec())?)
            }
        })
    }

    /// Softplus pre-activation for one row. `log_ent` and `top` are the
    /// row's precomputed features (unused by families that do not need them).
    #[inline]
    fn preact(
        self,
        theta: &[f64],
        z: &[f64],
        log_ent: f64,
        top: &[f64],
        s: &mut PtsScratch,
    ) -> f64 {
        match self {
            Family::Ts => theta[0],
            Family::Lts { k } => dot(&theta[..k], z) + theta[k],
            Family::Hts => theta[0] * log_ent + theta[1],
            Family::Hnlts { k } => dot(&theta[..k], z) + theta[k] * log_ent + theta[k + 1],
            Family::Pts { .. } => pts::forward(theta, top, s),
        }
    }

    /// Adds `coeff * d(preact)/d(theta)` to `grad`.
    #[inline]
    fn accumulate(
        self,
        theta: &[f64],
        z: &[f64],
        log_ent: f64,
        top: &[f64],
        s: &PtsScratch,
        coeff: f64,
        grad: &mut [f64],
    ) {
        match self {
            Family::Ts => grad[0] += coeff,
            Family::Lts { k } => {
                for (g, v) in grad[..k].iter_mut().zip(z) {
                    *g += coeff * v;
                }
                grad[k] += coeff;
            }
            Family::Hts => {
                grad[0] += coeff * log_ent;
                grad[1] += coeff;
            }
            Family::Hnlts { k } => {
                for (g, v) in grad[..k].iter_mut().zip(z) {
                    *g += coeff * v;
                }
                grad[k] += coeff * log_ent;
                grad[k + 1] += coeff;
            }
            Family::Pts { .. } => pts::backward(theta, top, s, coeff, grad),
        }
    }

    /// Temperature of `z`, computing features on the fly.
    pub fn temperature(self, theta: &[f64], z: &[f64]) -> f64 {
        let log_ent = if self.uses_entropy() {
            normalized_entropy_unchecked(z).ln()
        } else {
            0.0
        };
        let mut top = [0.0; PTS_MAX_INPUT];
        let top = &mut top[..self.top_dim()];
        if !top.is_empty() {
            pts::sorted_top(z, top);
        }
        let s = self.preact(theta, z, log_ent, top, &mut PtsScratch::default());
        softplus(s).max(T_MIN)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Temperature and `dT/d(preact)` (zero where the floor is active).
#[inline]
fn temp_and_slope(s: f64) -> (f64, f64) {
    let t = softplus(s);
    if t >= T_MIN {
        (t, sigmoid(s))
    } else {
        (T_MIN, 0.0)
    }
}

/// Per-row quantities of the scaled softmax `softmax(z * inv)`.
pub(crate) struct Scaled {
    /// `-ln p_y`
    pub nll: f64,
    /// `E_p[z]`
    pub mean_z: f64,
    /// `p_j` for the top class `j`
    pub top_p: f64,
}

/// Softmax statistics of `z * inv` for a nonnegative multiplier `inv`.
#[inline]
pub(crate) fn scaled_row(z: &[f64], y: usize, inv: f64) -> Scaled {
    let top = argmax(z);
    let m = z[top] * inv;
    let mut sum = 0.0;
    let mut wz = 0.0;
    for &v in z {
        let e = (v * inv - m).exp();
        sum += e;
        wz += e * v;
    }
    let lse = m + sum.ln();
    Scaled {
        nll: lse - z[y] * inv,
        mean_z: wz / sum,
        top_p: 1.0 / sum,
    }
}

/// Features of every row, computed once per fit.
pub(crate) struct RowFeatures {
    log_ent: Vec<f64>,
    top: Vec<f64>,
    top_dim: usize,
}

impl RowFeatures {
    pub(crate) fn new(family: Family, d: &LogitDataset) -> Self {
        let log_ent = if family.uses_entropy() {
            d.rows()
                .map(|(z, _)| normalized_entropy_unchecked(z).ln())
                .collect()
        } else {
            vec![0.0; d.len()]
        };
        let top_dim = family.top_dim();
        let mut top = vec![0.0; d.len() * top_dim];
        if top_dim > 0 {
            for (i, (z, _)) in d.rows().enumerate() {
                pts::sorted_top(z, &mut top[i * top_dim..(i + 1) * top_dim]);
            }
        }
        RowFeatures {
            log_ent,
            top,
            top_dim,
        }
    }

    #[inline]
    fn top(&self, i: usize) -> &[f64] {
        &self.top[i * self.top_dim..(i + 1) * self.top_dim]
    }
}

/// Mean NLL or L_ECE of a temperature family over a dataset.
pub(crate) struct FamilyObjective<'a> {
    family: Family,
    data: &'a LogitDataset,
    feats: RowFeatures,
    loss: FitObjective,
    binning: EceBinning,
}

impl<'a> FamilyObjective<'a> {
    pub(crate) fn new(
        family: Family,
        data: &'a LogitDataset,
        loss: FitObjective,
        binning: EceBinning,
    ) -> Self {
        FamilyObjective {
            family,
            feats: RowFeatures::new(family, data),
            data,
            loss,
            binning,
        }
    }

    fn nll_rows(&self, theta: &[f64], rows: &[usize], mut grad: Option<&mut [f64]>) -> f64 {
        if let Some(g) = grad.as_deref_mut() {
            g.fill(0.0);
        }
        let n = rows.len() as f64;
        let mut scratch = PtsScratch::default();
        let mut total = 0.0;
        for &i in rows {
            let z = self.data.row(i);
            let y = self.data.label(i);
            let (le, top) = (self.feats.log_ent[i], self.feats.top(i));
            let s = self.family.preact(theta, z, le, top, &mut scratch);
            let (t, slope) = temp_and_slope(s);
            let r = scaled_row(z, y, 1.0 / t);
            total += r.nll;
            if let Some(g) = grad.as_deref_mut() {
                if slope != 0.0 {
                    // d nll / dT = -(E_p[z] - z_y) / T^2
                    let d_t = -(r.mean_z - z[y]) / (t * t);
                    self.family
                        .accumulate(theta, z, le, top, &scratch, d_t * slope / n, g);
                }
            }
        }
        total / n
    }

    fn lece_rows(&self, theta: &[f64], rows: &[usize], grad: Option<&mut [f64]>) -> f64 {
        let mut scratch = PtsScratch::default();
        let mut stats = BinStats::new(self.binning.bins());
        let mut per_row = Vec::with_capacity(rows.len());
        for &i in rows {
            let z = self.data.row(i);
            let (le, top) = (self.feats.log_ent[i], self.feats.top(i));
            let s = self.family.preact(theta, z, le, top, &mut scratch);
            let (t, slope) = temp_and_slope(s);
            let r = scaled_row(z, self.data.label(i), 1.0 / t);
            let conf = r.top_p;
            let bin = self.binning.index(conf);
            let j = argmax(z);
            stats.add(bin, conf, j == self.data.label(i));
            // d conf / dT = -p_j (z_j - E_p[z]) / T^2
            let dconf = -conf * (z[j] - r.mean_z) / (t * t) * slope;
            per_row.push((bin, dconf));
        }
        let loss = stats.weighted_abs_gap(rows.len());
        if let Some(g) = grad {
            g.fill(0.0);
            let n = rows.len() as f64;
            for (&i, &(bin, dconf)) in rows.iter().zip(&per_row) {
                let gap = stats.gap(bin);
                if gap == 0.0 || dconf == 0.0 {
                    continue;
                }
                let z = self.data.row(i);
                let (le, top) = (self.feats.log_ent[i], self.feats.top(i));
                // refresh the PTS activations for this row
                self.family.preact(theta, z, le, top, &mut scratch);
                self.family
                    .accumulate(theta, z, le, top, &scratch, gap.signum() * dconf / n, g);
            }
        }
        loss
    }

    fn eval(&self, theta: &[f64], rows: &[usize], grad: Option<&mut [f64]>) -> f64 {
        match self.loss {
            FitObjective::Nll => self.nll_rows(theta, rows, grad),
            FitObjective::LEce => self.lece_rows(theta, rows, grad),
        }
    }

    pub(crate) fn all_rows(&self) -> Vec<usize> {
        (0..self.data.len()).collect()
    }
}

impl SgdObjective for FamilyObjective<'_> {
    fn rows(&self) -> usize {
        self.data.len()
    }

    fn batch(&self, params: &[f64], rows: &[usize], grad: &mut [f64]) -> f64 {
        self.eval(params, rows, Some(grad))
    }

    fn full(&self, params: &[f64]) -> f64 {
        match self.loss {
            FitObjective::Nll => {
                // avoid materializing the index list on the hot path
                let mut scratch = PtsScratch::default();
                let mut total = 0.0;
                for (i, (z, y)) in self.data.rows().enumerate() {
                    let s = self.family.preact(
                        params,
                        z,
                        self.feats.log_ent[i],
                        self.feats.top(i),
                        &mut scratch,
                    );
                    total += scaled_row(z, y, 1.0 / temp_and_slope(s).0).nll;
                }
                total / self.data.len() as f64
            }
            FitObjective::LEce => self.eval(params, &self.all_rows(), None),
        }
    }
}

/// Mean NLL of the calibrated dataset.
pub fn nll_value(p: &CalibratorParams, d: &LogitDataset) -> Result<f64> {
    Ok(crate::metrics::nll(&p.calibrate_dataset(d)?))
}

/// Exact gradient of the mean NLL over `batch` with respect to the flat
/// parameters of `p` (layouts as in [`Family`]).
pub fn nll_gradient(p: &CalibratorParams, batch: &LogitDataset) -> Result<Vec<f64>> {
    let (family, theta) = p.flatten()?;
    if let Some((z, _)) = batch.rows().next() {
        p.check(z)?;
    }
    let obj = FamilyObjective::new(family, batch, FitObjective::Nll, EceBinning::default());
    let mut grad = vec![0.0; theta.len()];
    obj.batch(&theta, &obj.all_rows(), &mut grad);
    Ok(grad)
}
