//! The small MLP behind parametrized temperature scaling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CalibError, Result};

/// Width of both hidden layers.
pub const PTS_HIDDEN: usize = 5;

/// The network sees at most this many of the largest logits.
pub const PTS_MAX_INPUT: usize = 10;

const H: usize = PTS_HIDDEN;

/// `input -> 5 -> 5 -> 1` with rectifier hidden activations. The scalar output
/// is the pre-activation passed through softplus to get the temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct PtsNet {
    input: usize,
    /// Flat layout: W1 (H x input, row-major), b1, W2 (H x H), b2, w3 (H), b3.
    theta: Vec<f64>,
}

/// Activations kept from the forward pass for backpropagation.
#[derive(Debug, Clone, Default)]
pub(crate) struct PtsScratch {
    h1: [f64; H],
    h2: [f64; H],
}

pub(crate) fn param_count(input: usize) -> usize {
    H * input + H + H * H + H + H + 1
}

struct Offsets {
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
}

fn offsets(input: usize) -> Offsets {
    let b1 = H * input;
    let w2 = b1 + H;
    let b2 = w2 + H * H;
    let w3 = b2 + H;
    let b3 = w3 + H;
    Offsets { b1, w2, b2, w3, b3 }
}

/// Writes the `input` largest entries of `z`, in decreasing order, into `out`.
pub(crate) fn sorted_top(z: &[f64], out: &mut [f64]) {
    let mut buf: Vec<f64> = z.to_vec();
    buf.sort_unstable_by(|a, b| b.total_cmp(a));
    out.copy_from_slice(&buf[..out.len()]);
}

/// Network output (pre-softplus) for a sorted input.
pub(crate) fn forward(theta: &[f64], x: &[f64], s: &mut PtsScratch) -> f64 {
    let d = x.len();
    let o = offsets(d);
    for j in 0..H {
        let row = &theta[j * d..(j + 1) * d];
        let a: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + theta[o.b1 + j];
        s.h1[j] = a.max(0.0);
    }
    for j in 0..H {
        let row = &theta[o.w2 + j * H..o.w2 + (j + 1) * H];
        let a: f64 = row.iter().zip(&s.h1).map(|(w, v)| w * v).sum::<f64>() + theta[o.b2 + j];
        s.h2[j] = a.max(0.0);
    }
    theta[o.w3..o.b3]
        .iter()
        .zip(&s.h2)
        .map(|(w, v)| w * v)
        .sum::<f64>()
        + theta[o.b3]
}

/// Adds `coeff * d(output)/d(theta)` to `grad`, using activations from [`forward`].
pub(crate) fn backward(theta: &[f64], x: &[f64], s: &PtsScratch, coeff: f64, grad: &mut [f64]) {
    let d = x.len();
    let o = offsets(d);
    let mut delta2 = [0.0; H];
    for j in 0..H {
        grad[o.w3 + j] += coeff * s.h2[j];
        if s.h2[j] > 0.0 {
            delta2[j] = coeff * theta[o.w3 + j];
        }
    }
    grad[o.b3] += coeff;
    let mut delta1 = [0.0; H];
    for j in 0..H {
        if delta2[j] == 0.0 {
            continue;
        }
        grad[o.b2 + j] += delta2[j];
        for i in 0..H {
            grad[o.w2 + j * H + i] += delta2[j] * s.h1[i];
            delta1[i] += delta2[j] * theta[o.w2 + j * H + i];
        }
    }
    for i in 0..H {
        if s.h1[i] <= 0.0 || delta1[i] == 0.0 {
            continue;
        }
        grad[o.b1 + i] += delta1[i];
        for (g, v) in grad[i * d..(i + 1) * d].iter_mut().zip(x) {
            *g += delta1[i] * v;
        }
    }
}

impl PtsNet {
    pub fn from_flat(input: usize, theta: Vec<f64>) -> Result<Self> {
        if input == 0 || input > PTS_MAX_INPUT {
            return Err(CalibError::invalid(format!("bad PTS input size {input}")));
        }
        if theta.len() != param_count(input) {
            return Err(CalibError::invalid(format!(
                "PTS with {input} inputs needs {} parameters, got {}",
                param_count(input),
                theta.len()
            )));
        }
        Ok(PtsNet { input, theta })
    }

    /// Hidden layers drawn from uniform(-0.1, 0.1); the output layer starts at
    /// zero weights and a bias of `output_bias`, so the initial map is a
    /// constant temperature.
    pub fn init(k: usize, seed: u64, output_bias: f64) -> Self {
        let input = k.min(PTS_MAX_INPUT);
        let o = offsets(input);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta: Vec<f64> = (0..param_count(input))
            .map(|_| rng.random_range(-0.1..0.1))
            .collect();
        theta[o.w3..o.b3].fill(0.0);
        theta[o.b3] = output_bias;
        PtsNet { input, theta }
    }

    pub fn input_dim(&self) -> usize {
        self.input
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.theta.clone()
    }

    /// Network output (before softplus) for logits `z`.
    pub fn output(&self, z: &[f64]) -> f64 {
        let mut x = vec![0.0; self.input];
        sorted_top(z, &mut x);
        forward(&self.theta, &x, &mut PtsScratch::default())
    }
}
