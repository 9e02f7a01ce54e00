//! Calibration and scoring metrics over logit datasets.

use crate::dataset::LogitDataset;
use crate::mathkit::{argmax, log_softmax_into, softmax_into};

/// Default bin count, as used by the reported ECE tables.
pub const DEFAULT_ECE_BINS: usize = 50;

/// Equal-width confidence bins: bin `i` (1-based) covers `((i-1)/M, i/M]`,
/// with the first bin closed at 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EceBinning {
    m: usize,
}

impl EceBinning {
    pub fn new(m: usize) -> Self {
        assert!(m >= 1, "ECE needs at least one bin");
        EceBinning { m }
    }

    pub fn bins(&self) -> usize {
        self.m
    }

    /// Zero-based bin index of a confidence in `[0, 1]`.
    pub fn index(&self, conf: f64) -> usize {
        let m = self.m as f64;
        let mut b = ((conf * m).ceil() as usize).clamp(1, self.m);
        // settle edge cases so the result matches the comparisons against i/M exactly
        while b > 1 && conf <= (b - 1) as f64 / m {
            b -= 1;
        }
        while b < self.m && conf > b as f64 / m {
            b += 1;
        }
        b - 1
    }
}

impl Default for EceBinning {
    fn default() -> Self {
        EceBinning::new(DEFAULT_ECE_BINS)
    }
}

/// Per-bin sums over (confidence, correct) pairs.
#[derive(Debug, Clone)]
pub(crate) struct BinStats {
    pub count: Vec<usize>,
    pub conf_sum: Vec<f64>,
    pub correct: Vec<usize>,
}

impl BinStats {
    pub(crate) fn new(m: usize) -> Self {
        BinStats {
            count: vec![0; m],
            conf_sum: vec![0.0; m],
            correct: vec![0; m],
        }
    }

    pub(crate) fn add(&mut self, bin: usize, conf: f64, hit: bool) {
        self.count[bin] += 1;
        self.conf_sum[bin] += conf;
        self.correct[bin] += usize::from(hit);
    }

    /// `conf(B_i) - acc(B_i)` for a nonempty bin.
    pub(crate) fn gap(&self, bin: usize) -> f64 {
        let n = self.count[bin] as f64;
        self.conf_sum[bin] / n - self.correct[bin] as f64 / n
    }

    pub(crate) fn weighted_abs_gap(&self, total: usize) -> f64 {
        (0..self.count.len())
            .filter(|&i| self.count[i] > 0)
            .map(|i| self.count[i] as f64 / total as f64 * self.gap(i).abs())
            .sum()
    }
}

/// Top-label confidence of each row and whether its argmax is correct.
pub fn top_label(d: &LogitDataset) -> Vec<(f64, bool)> {
    let mut q = vec![0.0; d.k()];
    d.rows()
        .map(|(z, y)| {
            softmax_into(z, &mut q);
            let j = argmax(z);
            (q[j], j == y)
        })
        .collect()
}

fn binned(d: &LogitDataset, binning: EceBinning) -> BinStats {
    let mut stats = BinStats::new(binning.bins());
    for (conf, hit) in top_label(d) {
        stats.add(binning.index(conf), conf, hit);
    }
    stats
}

/// Expected calibration error as a fraction in `[0, 1]`.
pub fn ece(d: &LogitDataset, binning: EceBinning) -> f64 {
    binned(d, binning).weighted_abs_gap(d.len())
}

/// ECE-shaped loss: per-bin 2-norm of the accuracy/confidence gap. The gap
/// is a scalar, so this coincides with [`ece`] on a fixed dataset; during
/// training the bins are rebuilt from the rescaled confidences on every call.
pub fn l_ece(d: &LogitDataset, binning: EceBinning) -> f64 {
    let stats = binned(d, binning);
    (0..binning.bins())
        .filter(|&i| stats.count[i] > 0)
        .map(|i| {
            let gap = stats.gap(i);
            stats.count[i] as f64 / d.len() as f64 * (gap * gap).sqrt()
        })
        .sum()
}

/// Mean negative log-likelihood of the labels.
pub fn nll(d: &LogitDataset) -> f64 {
    let mut lq = vec![0.0; d.k()];
    let total: f64 = d
        .rows()
        .map(|(z, y)| {
            log_softmax_into(z, &mut lq);
            -lq[y]
        })
        .sum();
    total / d.len() as f64
}

/// Mean multiclass Brier score, in `[0, 2]`.
pub fn brier(d: &LogitDataset) -> f64 {
    let mut q = vec![0.0; d.k()];
    let total: f64 = d
        .rows()
        .map(|(z, y)| {
            softmax_into(z, &mut q);
            q.iter()
                .enumerate()
                .map(|(k, &p)| {
                    let t = if k == y { 1.0 } else { 0.0 };
                    (p - t) * (p - t)
                })
                .sum::<f64>()
        })
        .sum();
    total / d.len() as f64
}

/// One evaluated cell: metrics plus the method/size/run it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub ece: f64,
    pub nll: f64,
    pub brier: f64,
    pub accuracy: f64,
    pub method: String,
    pub n_val: usize,
    pub run_id: usize,
}

impl MetricReport {
    pub fn evaluate(d: &LogitDataset, binning: EceBinning) -> Self {
        MetricReport {
            ece: ece(d, binning),
            nll: nll(d),
            brier: brier(d),
            accuracy: crate::dataset::accuracy(d),
            method: String::new(),
            n_val: 0,
            run_id: 0,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.ece, self.nll, self.brier, self.accuracy]
            .iter()
            .all(|v| v.is_finite())
    }
}
