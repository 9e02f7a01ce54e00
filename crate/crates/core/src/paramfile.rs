//! Fitted-parameter files: a `key=value` document holding the method, the
//! class count, every parameter at full precision, the fit configuration
//! and the generator identity. Reading a written file gives back the same
//! bits.

use std::path::Path;

use crate::calibrators::{BtsTable, CalibratorParams, EtsParams, Method, PtsNet};
use crate::dataset::PRNG_ID;
use crate::error::{CalibError, Result};
use crate::kv::KvDoc;
use crate::optim::{FitConfig, FitObjective};

const FORMAT: &str = "calib-params/1";

/// A fitted calibrator together with how it was produced.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedCalibrator {
    pub method: Method,
    pub k: usize,
    pub params: CalibratorParams,
    pub config: FitConfig,
}

/// Writes every field of `cfg` as `<prefix><field>`.
pub fn write_config(doc: &mut KvDoc, prefix: &str, cfg: &FitConfig) {
    let key = |k: &str| format!("{prefix}{k}");
    doc.set(&key("objective"), cfg.objective.tag())
        .set_f64(&key("lr0"), cfg.lr0)
        .set_f64(&key("momentum"), cfg.momentum)
        .set(&key("batch_size"), cfg.batch_size)
        .set_f64(&key("plateau_factor"), cfg.plateau_factor)
        .set_f64(&key("lr_floor"), cfg.lr_floor)
        .set(&key("plateau_patience"), cfg.plateau_patience)
        .set_f64(&key("plateau_threshold"), cfg.plateau_threshold)
        .set(&key("seed"), cfg.seed)
        .set(&key("max_epochs"), cfg.max_epochs)
        .set(&key("lece_bins"), cfg.lece_bins)
        .set(&key("bts_bins"), cfg.bts_bins);
}

/// Reads `<prefix>lr0` etc., falling back to defaults for absent keys.
pub fn read_config(doc: &KvDoc, prefix: &str) -> Result<FitConfig> {
    read_config_over(doc, prefix, &FitConfig::default())
}

/// Like [`read_config`], with absent keys taken from `base`.
pub fn read_config_over(doc: &KvDoc, prefix: &str, base: &FitConfig) -> Result<FitConfig> {
    let d = base.clone();
    let key = |k: &str| format!("{prefix}{k}");
    let objective = match doc.get(&key("objective")) {
        Some(tag) => FitObjective::from_tag(tag)?,
        None => d.objective,
    };
    let cfg = FitConfig {
        objective,
        lr0: doc.or(&key("lr0"), d.lr0)?,
        momentum: doc.or(&key("momentum"), d.momentum)?,
        batch_size: doc.or(&key("batch_size"), d.batch_size)?,
        plateau_factor: doc.or(&key("plateau_factor"), d.plateau_factor)?,
        lr_floor: doc.or(&key("lr_floor"), d.lr_floor)?,
        plateau_patience: doc.or(&key("plateau_patience"), d.plateau_patience)?,
        plateau_threshold: doc.or(&key("plateau_threshold"), d.plateau_threshold)?,
        seed: doc.or(&key("seed"), d.seed)?,
        max_epochs: doc.or(&key("max_epochs"), d.max_epochs)?,
        lece_bins: doc.or(&key("lece_bins"), d.lece_bins)?,
        bts_bins: doc.or(&key("bts_bins"), d.bts_bins)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

impl FittedCalibrator {
    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.set("format", FORMAT)
            .set("method", self.method.tag())
            .set("k", self.k);
        match &self.params {
            CalibratorParams::Ts { a } => {
                doc.set_f64("ts.a", *a);
            }
            CalibratorParams::Lts { w_l, b } => {
                doc.set_f64_list("lts.w_l", w_l).set_f64("lts.b", *b);
            }
            CalibratorParams::Hts { w_h, b } => {
                doc.set_f64("hts.w_h", *w_h).set_f64("hts.b", *b);
            }
            CalibratorParams::Hnlts { w_l, w_h, b } => {
                doc.set_f64_list("hnlts.w_l", w_l)
                    .set_f64("hnlts.w_h", *w_h)
                    .set_f64("hnlts.b", *b);
            }
            CalibratorParams::Pts(net) => {
                doc.set("pts.input_dim", net.input_dim())
                    .set("pts.hidden", "5,5")
                    .set("pts.activation", "relu")
                    .set("pts.output", "softplus")
                    .set_f64_list("pts.theta", &net.to_flat());
            }
            CalibratorParams::Bts(t) => {
                doc.set_f64_list("bts.edges", &t.edges)
                    .set_f64_list("bts.temps", &t.temps);
            }
            CalibratorParams::Ets(e) => {
                doc.set_f64_list("ets.w", &e.w)
                    .set_f64("ets.t_ets", e.t_ets)
                    .set("ets.fit", "two-stage");
            }
        }
        write_config(&mut doc, "fit.", &self.config);
        doc.set("prng", PRNG_ID);
        doc
    }

    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        let format = doc.require("format")?;
        if format != FORMAT {
            return Err(CalibError::Config(format!(
                "{}: unsupported format '{format}'",
                doc.source()
            )));
        }
        let method = Method::from_tag(doc.require("method")?)?;
        let k: usize = doc.req("k")?;
        let params = match method {
            Method::Ts => CalibratorParams::Ts {
                a: doc.req("ts.a")?,
            },
            Method::Lts => CalibratorParams::Lts {
                w_l: doc.req_list("lts.w_l")?,
                b: doc.req("lts.b")?,
            },
            Method::Hts => CalibratorParams::Hts {
                w_h: doc.req("hts.w_h")?,
                b: doc.req("hts.b")?,
            },
            Method::Hnlts => CalibratorParams::Hnlts {
                w_l: doc.req_list("hnlts.w_l")?,
                w_h: doc.req("hnlts.w_h")?,
                b: doc.req("hnlts.b")?,
            },
            Method::Pts | Method::Ptse => CalibratorParams::Pts(PtsNet::from_flat(
                doc.req("pts.input_dim")?,
                doc.req_list("pts.theta")?,
            )?),
            Method::Bts => CalibratorParams::Bts(BtsTable::new(
                doc.req_list("bts.edges")?,
                doc.req_list("bts.temps")?,
            )?),
            Method::Ets => {
                let w: Vec<f64> = doc.req_list("ets.w")?;
                let w: [f64; 3] = w
                    .try_into()
                    .map_err(|_| CalibError::Config("ets.w needs three weights".into()))?;
                CalibratorParams::Ets(EtsParams::new(w, doc.req("ets.t_ets")?)?)
            }
        };
        if let Some(need) = params.required_k() {
            if need != k {
                return Err(CalibError::Config(format!(
                    "{}: parameters are sized for K={need} but k={k}",
                    doc.source()
                )));
            }
        }
        Ok(FittedCalibrator {
            method,
            k,
            params,
            config: read_config(doc, "fit.")?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_kv().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        FittedCalibrator::from_kv(&KvDoc::load(path)?)
    }
}
