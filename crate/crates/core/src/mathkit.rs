//! Numerically stable kernels shared by the rest of the crate.
//!
//! The checked entry points (`softmax`, `log_softmax`, `normalized_entropy`)
//! validate their input; the `*_into` variants skip validation and are used
//! in the fitting loops where inputs were validated at load time.

use crate::error::{CalibError, Result};

/// Lower clamp for the normalized entropy so that its logarithm stays finite.
pub const ENT_MIN: f64 = 1e-12;

/// Above this argument `softplus(a)` is evaluated as `a + ln(1 + e^-a)`.
const SOFTPLUS_LINEAR: f64 = 30.0;

fn check_finite(z: &[f64]) -> Result<()> {
    if z.is_empty() {
        return Err(CalibError::invalid("empty logit vector"));
    }
    if let Some(i) = z.iter().position(|v| !v.is_finite()) {
        return Err(CalibError::invalid(format!(
            "non-finite logit at index {i}"
        )));
    }
    Ok(())
}

#[inline]
pub(crate) fn max_of(z: &[f64]) -> f64 {
    z.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Index of the largest entry; ties go to the lowest index.
#[inline]
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// `ln Σ exp(z_k)` with the max shift.
#[inline]
pub fn logsumexp(z: &[f64]) -> f64 {
    let m = max_of(z);
    let s: f64 = z.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

/// Writes `softmax(z)` into `out` without validating `z`.
#[inline]
pub fn softmax_into(z: &[f64], out: &mut [f64]) {
    let m = max_of(z);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

/// Writes `log_softmax(z)` into `out` without validating `z`.
#[inline]
pub fn log_softmax_into(z: &[f64], out: &mut [f64]) {
    let lse = logsumexp(z);
    for (o, &v) in out.iter_mut().zip(z) {
        *o = v - lse;
    }
}

pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    check_finite(z)?;
    let mut out = vec![0.0; z.len()];
    softmax_into(z, &mut out);
    Ok(out)
}

pub fn log_softmax(z: &[f64]) -> Result<Vec<f64>> {
    check_finite(z)?;
    let mut out = vec![0.0; z.len()];
    log_softmax_into(z, &mut out);
    Ok(out)
}

/// Unchecked normalized entropy, `H(softmax(z)) / ln K` clamped to `[ENT_MIN, 1]`.
#[inline]
pub fn normalized_entropy_unchecked(z: &[f64]) -> f64 {
    let lse = logsumexp(z);
    let mut h = 0.0;
    for &v in z {
        let lp = v - lse;
        let p = lp.exp();
        if p > 0.0 {
            h -= p * lp;
        }
    }
    (h / (z.len() as f64).ln()).clamp(ENT_MIN, 1.0)
}

pub fn normalized_entropy(z: &[f64]) -> Result<f64> {
    check_finite(z)?;
    if z.len() < 2 {
        return Err(CalibError::invalid("normalized entropy needs K >= 2"));
    }
    Ok(normalized_entropy_unchecked(z))
}

/// `ln(1 + e^a)`, stable in both tails.
#[inline]
pub fn softplus(a: f64) -> f64 {
    if a > SOFTPLUS_LINEAR {
        a + (-a).exp().ln_1p()
    } else {
        a.exp().ln_1p()
    }
}

/// Derivative of [`softplus`], the logistic sigmoid.
#[inline]
pub fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`]: returns `a` with `softplus(a) = t`.
pub fn softplus_inverse(t: f64) -> Result<f64> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(CalibError::invalid(format!(
            "softplus inverse needs a finite positive argument, got {t}"
        )));
    }
    // ln(e^t - 1) = t + ln(1 - e^-t)
    Ok(if t > SOFTPLUS_LINEAR {
        t + (-(-t).exp()).ln_1p()
    } else {
        t.exp_m1().ln()
    })
}
