//! Fitting entry points for every calibration method.

use super::family::{scaled_row, FamilyObjective};
use super::pts::PTS_MAX_INPUT;
use super::{BtsTable, CalibratorParams, EtsParams, Family, Method, PtsNet, BTS_HIGH_CONF, T_MIN};
use crate::dataset::LogitDataset;
use crate::error::{CalibError, Result};
use crate::mathkit::{softmax_into, softplus, softplus_inverse};
use crate::metrics::{top_label, EceBinning};
use crate::optim::{scalar_minimize, sgd_minimize, FitConfig, FitObjective, SgdObjective};

/// Temperature bracket searched by the scalar TS fit.
pub const TS_TEMP_RANGE: (f64, f64) = (1e-2, 1e2);

const TS_TOL: f64 = 1e-10;

fn ts_nll(d: &LogitDataset, rows: &[usize], a: f64) -> f64 {
    let inv = 1.0 / softplus(a).max(T_MIN);
    let total: f64 = rows
        .iter()
        .map(|&i| scaled_row(d.row(i), d.label(i), inv).nll)
        .sum();
    total / rows.len() as f64
}

fn fit_ts_rows(d: &LogitDataset, rows: &[usize]) -> Result<f64> {
    if rows.is_empty() {
        return Err(CalibError::invalid("cannot fit a temperature on zero rows"));
    }
    let lo = softplus_inverse(TS_TEMP_RANGE.0)?;
    let hi = softplus_inverse(TS_TEMP_RANGE.1)?;
    scalar_minimize(|a| ts_nll(d, rows, a), lo, hi, TS_TOL)
}

/// Pre-softplus TS parameter minimizing the validation NLL.
pub fn fit_ts(d: &LogitDataset) -> Result<f64> {
    let rows: Vec<usize> = (0..d.len()).collect();
    fit_ts_rows(d, &rows)
}

/// NLL-optimal single temperature for a dataset.
pub fn optimal_temperature(d: &LogitDataset) -> Result<f64> {
    Ok(softplus(fit_ts(d)?).max(T_MIN))
}

/// NLL-optimal temperature of each group of rows; `None` for empty groups.
pub fn optimal_temperature_per_group(
    d: &LogitDataset,
    groups: &[Vec<usize>],
) -> Result<Vec<Option<f64>>> {
    groups
        .iter()
        .map(|g| {
            if g.is_empty() {
                return Ok(None);
            }
            if let Some(&bad) = g.iter().find(|&&i| i >= d.len()) {
                return Err(CalibError::invalid(format!("row {bad} out of range")));
            }
            Ok(Some(softplus(fit_ts_rows(d, g)?).max(T_MIN)))
        })
        .collect()
}

/// Fits `method` on the validation set.
///
/// TS uses a bracketed scalar minimizer; LTS/HTS/HnLTS/PTS run the SGD loop
/// from the identity map (PTSe always uses the L_ECE loss); BTS fits one
/// temperature per confidence bin; ETS fits its temperature as TS and then
/// its simplex weights.
pub fn fit(method: Method, val: &LogitDataset, cfg: &FitConfig) -> Result<CalibratorParams> {
    cfg.validate()?;
    let objective = if method == Method::Ptse {
        FitObjective::LEce
    } else {
        cfg.objective
    };
    if objective == FitObjective::LEce && !method.uses_sgd() {
        return Err(CalibError::Config(format!(
            "{method} is fitted on NLL only"
        )));
    }
    let k = val.k();
    let identity_bias = softplus_inverse(1.0)?;
    match method {
        Method::Ts => Ok(CalibratorParams::Ts { a: fit_ts(val)? }),
        Method::Bts => fit_bts(val, cfg.bts_bins).map(CalibratorParams::Bts),
        Method::Ets => fit_ets(val, cfg).map(CalibratorParams::Ets),
        Method::Lts | Method::Hts | Method::Hnlts | Method::Pts | Method::Ptse => {
            let (family, init) = match method {
                Method::Lts => {
                    let mut v = vec![0.0; k + 1];
                    v[k] = identity_bias;
                    (Family::Lts { k }, v)
                }
                Method::Hts => (Family::Hts, vec![0.0, identity_bias]),
                Method::Hnlts => {
                    let mut v = vec![0.0; k + 2];
                    v[k + 1] = identity_bias;
                    (Family::Hnlts { k }, v)
                }
                _ => (
                    Family::Pts {
                        input: k.min(PTS_MAX_INPUT),
                    },
                    PtsNet::init(k, cfg.seed, identity_bias).to_flat(),
                ),
            };
            let obj = FamilyObjective::new(family, val, objective, EceBinning::new(cfg.lece_bins));
            let out = sgd_minimize(&obj, &init, cfg)?;
            family.to_params(&out.params)
        }
    }
}

/// Equal-mass bins below the forced high-confidence bin, then one NLL-optimal
/// temperature per bin. Empty bins take the global TS temperature.
fn fit_bts(val: &LogitDataset, bins: usize) -> Result<BtsTable> {
    let confs: Vec<f64> = top_label(val).into_iter().map(|(c, _)| c).collect();
    let global = softplus(fit_ts(val)?).max(T_MIN);

    let mut low: Vec<f64> = confs
        .iter()
        .copied()
        .filter(|&c| c < BTS_HIGH_CONF)
        .collect();
    low.sort_unstable_by(f64::total_cmp);
    let equal_mass = bins - 1;
    let m = low.len();
    let mut edges = Vec::with_capacity(bins);
    let mut prev = 0.0;
    for j in 0..equal_mass - 1 {
        let (start, end) = (j * m / equal_mass, (j + 1) * m / equal_mass);
        if end > start {
            prev = low[end - 1];
        }
        edges.push(prev);
    }
    // the last equal-mass bin reaches up to (but excludes) 0.999
    edges.push(BTS_HIGH_CONF.next_down());
    edges.push(1.0);

    let mut table = BtsTable::new(edges, vec![global; bins])?;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); bins];
    for (i, &c) in confs.iter().enumerate() {
        members[table.bin(c)].push(i);
    }
    for (b, rows) in members.iter().enumerate() {
        if !rows.is_empty() {
            table.temps[b] = softplus(fit_ts_rows(val, rows)?).max(T_MIN);
        }
    }
    Ok(table)
}

/// NLL of ETS over the simplex, parametrized by `w = softmax(u)`.
struct EtsObjective<'a> {
    data: &'a LogitDataset,
    t_ets: f64,
}

impl EtsObjective<'_> {
    fn weights(u: &[f64]) -> [f64; 3] {
        let mut w = [0.0; 3];
        softmax_into(u, &mut w);
        w
    }

    fn nll_at(&self, w: [f64; 3], rows: &[usize], grad_w: Option<&mut [f64; 3]>) -> f64 {
        // the constant component shifts every logit equally, so only the
        // multiplier c = w1 / t + w2 reaches the softmax
        let c = w[0] / self.t_ets + w[1];
        let mut total = 0.0;
        let mut dc = 0.0;
        for &i in rows {
            let z = self.data.row(i);
            let y = self.data.label(i);
            let r = scaled_row(z, y, c);
            total += r.nll;
            dc += r.mean_z - z[y];
        }
        let n = rows.len() as f64;
        if let Some(g) = grad_w {
            *g = [dc / n / self.t_ets, dc / n, 0.0];
        }
        total / n
    }
}

impl SgdObjective for EtsObjective<'_> {
    fn rows(&self) -> usize {
        self.data.len()
    }

    fn batch(&self, u: &[f64], rows: &[usize], grad: &mut [f64]) -> f64 {
        let w = Self::weights(u);
        let mut gw = [0.0; 3];
        let f = self.nll_at(w, rows, Some(&mut gw));
        let inner: f64 = w.iter().zip(&gw).map(|(a, b)| a * b).sum();
        for j in 0..3 {
            grad[j] = w[j] * (gw[j] - inner);
        }
        f
    }

    fn full(&self, u: &[f64]) -> f64 {
        let rows: Vec<usize> = (0..self.data.len()).collect();
        self.nll_at(Self::weights(u), &rows, None)
    }
}

fn fit_ets(val: &LogitDataset, cfg: &FitConfig) -> Result<EtsParams> {
    let t_ets = softplus(fit_ts(val)?).max(T_MIN);
    let obj = EtsObjective { data: val, t_ets };
    let ets_cfg = FitConfig {
        objective: FitObjective::Nll,
        lr0: 0.1,
        lr_floor: 1e-4,
        batch_size: val.len(),
        max_epochs: 5_000,
        ..cfg.clone()
    };
    let out = sgd_minimize(&obj, &[0.0; 3], &ets_cfg)?;
    let rows: Vec<usize> = (0..val.len()).collect();
    let fitted = EtsObjective::weights(&out.params);
    // the pure-TS vertex is always a candidate
    let vertex = [1.0, 0.0, 0.0];
    let w = if obj.nll_at(vertex, &rows, None) <= obj.nll_at(fitted, &rows, None) {
        vertex
    } else {
        let s: f64 = fitted.iter().sum();
        fitted.map(|v| v / s)
    };
    EtsParams::new(w, t_ets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::accuracy;
    use crate::metrics::nll;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_task(seed: u64, n: usize, k: usize, scale: f64) -> LogitDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut z = Vec::with_capacity(n * k);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let row: Vec<f64> = (0..k)
                .map(|_| rng.random_range(-1.0..1.0) * scale)
                .collect();
            // labels follow the argmax 70% of the time
            let top = crate::mathkit::argmax(&row);
            y.push(if rng.random_bool(0.7) {
                top
            } else {
                rng.random_range(0..k)
            });
            z.extend(row);
        }
        LogitDataset::new(z, y, k, "r").unwrap()
    }

    fn quick_cfg() -> FitConfig {
        FitConfig {
            lr0: 1e-2,
            lr_floor: 1e-5,
            max_epochs: 2_000,
            ..FitConfig::default()
        }
    }

    #[test]
    fn ts_never_worse_than_identity() {
        for seed in 0..5 {
            let d = random_task(seed, 300, 5, 4.0);
            let p = fit(Method::Ts, &d, &FitConfig::default()).unwrap();
            let after = nll(&p.calibrate_dataset(&d).unwrap());
            assert!(after <= nll(&d) + 1e-9);
        }
    }

    #[test]
    fn ts_is_stationary_at_its_fit() {
        let d = random_task(9, 500, 4, 3.0);
        let a = fit_ts(&d).unwrap();
        let g = super::super::nll_gradient(&CalibratorParams::Ts { a }, &d).unwrap();
        assert!(g[0].abs() < 1e-6, "{g:?}");
    }

    #[test]
    fn every_method_fits_and_preserves_accuracy() {
        let d = random_task(3, 400, 6, 5.0);
        for m in Method::ALL {
            let p = fit(m, &d, &quick_cfg()).unwrap();
            let cal = p.calibrate_dataset(&d).unwrap();
            assert_eq!(accuracy(&cal), accuracy(&d), "{m}");
            for ((a, _), (b, _)) in cal.rows().zip(d.rows()) {
                assert_eq!(crate::mathkit::argmax(a), crate::mathkit::argmax(b), "{m}");
            }
        }
    }

    #[test]
    fn fits_are_deterministic() {
        let d = random_task(4, 300, 12, 3.0);
        for m in [Method::Pts, Method::Ptse, Method::Hts, Method::Ets] {
            assert_eq!(
                fit(m, &d, &quick_cfg()).unwrap(),
                fit(m, &d, &quick_cfg()).unwrap(),
                "{m}"
            );
        }
    }

    #[test]
    fn lece_is_rejected_for_scalar_methods() {
        let d = random_task(1, 50, 3, 1.0);
        let cfg = FitConfig {
            objective: FitObjective::LEce,
            ..FitConfig::default()
        };
        assert!(fit(Method::Ts, &d, &cfg).is_err());
        assert!(fit(Method::Bts, &d, &cfg).is_err());
    }

    #[test]
    fn bts_edges_cover_unit_interval() {
        let d = random_task(5, 37, 3, 8.0);
        let CalibratorParams::Bts(t) = fit(Method::Bts, &d, &FitConfig::default()).unwrap() else {
            panic!()
        };
        assert_eq!(t.edges.len(), 50);
        assert_eq!(*t.edges.last().unwrap(), 1.0);
        assert!(t.edges.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(t.bin(BTS_HIGH_CONF), 49);
        assert_eq!(t.bin(0.9989), 48);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let c: f64 = rng.random_range(1e-9..=1.0);
            assert!(t.bin(c) < 50);
        }
    }

    #[test]
    fn bts_empty_bins_use_global_temperature() {
        // 3 rows, 49 equal-mass bins: most are empty
        let d = random_task(6, 3, 3, 1.0);
        let CalibratorParams::Bts(t) = fit(Method::Bts, &d, &FitConfig::default()).unwrap() else {
            panic!()
        };
        let global = optimal_temperature(&d).unwrap();
        assert!(t.temps.iter().filter(|&&v| v == global).count() >= 46);
    }

    #[test]
    fn ets_weights_stay_on_simplex() {
        let d = random_task(7, 300, 5, 6.0);
        let CalibratorParams::Ets(p) = fit(Method::Ets, &d, &FitConfig::default()).unwrap() else {
            panic!()
        };
        assert!((p.w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(p.w.iter().all(|&v| v >= 0.0));
        assert!(!p.is_degenerate());
        let ts = CalibratorParams::ts_with_temperature(p.t_ets).unwrap();
        let ets_nll = nll(&CalibratorParams::Ets(p).calibrate_dataset(&d).unwrap());
        assert!(ets_nll <= nll(&ts.calibrate_dataset(&d).unwrap()) + 1e-12);
    }

    #[test]
    fn per_group_temperatures() {
        let d = random_task(8, 200, 4, 4.0);
        let all: Vec<usize> = (0..d.len()).collect();
        let res = optimal_temperature_per_group(&d, &[all.clone(), vec![], all]).unwrap();
        assert_eq!(res[0], Some(optimal_temperature(&d).unwrap()));
        assert_eq!(res[1], None);
        assert_eq!(res[0], res[2]);
    }
}
