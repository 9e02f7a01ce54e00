//! Logit datasets: loading, validation, subsampling and accuracy.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CalibError, Result};
use crate::mathkit::argmax;

/// Identifier of the generator used for every seeded draw in the crate.
pub const PRNG_ID: &str = "chacha8 (rand_chacha 0.9)";

/// N rows of (K logits, label), stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitDataset {
    logits: Vec<f64>,
    labels: Vec<usize>,
    k: usize,
    name: String,
}

/// A validation/test pair sharing the same class count.
#[derive(Debug, Clone)]
pub struct TaskSplit {
    pub validation: LogitDataset,
    pub test: LogitDataset,
}

impl TaskSplit {
    pub fn new(validation: LogitDataset, test: LogitDataset) -> Result<Self> {
        if validation.k() != test.k() {
            return Err(CalibError::invalid(format!(
                "validation has K={} but test has K={}",
                validation.k(),
                test.k()
            )));
        }
        Ok(TaskSplit { validation, test })
    }
}

impl LogitDataset {
    pub fn new(
        logits: Vec<f64>,
        labels: Vec<usize>,
        k: usize,
        name: impl Into<String>,
    ) -> Result<Self> {
        if k < 2 {
            return Err(CalibError::invalid(format!("K must be >= 2, got {k}")));
        }
        if labels.is_empty() {
            return Err(CalibError::invalid("dataset has no rows"));
        }
        if logits.len() != labels.len() * k {
            return Err(CalibError::invalid(format!(
                "{} logits do not form {} rows of K={k}",
                logits.len(),
                labels.len()
            )));
        }
        if let Some(i) = labels.iter().position(|&y| y >= k) {
            return Err(CalibError::invalid(format!(
                "row {i}: label {} out of range for K={k}",
                labels[i]
            )));
        }
        if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
            return Err(CalibError::invalid(format!(
                "row {}: non-finite logit",
                i / k
            )));
        }
        Ok(LogitDataset {
            logits,
            labels,
            k,
            name: name.into(),
        })
    }

    /// Builds a dataset from rows of logits.
    pub fn from_rows(rows: &[Vec<f64>], labels: &[usize], name: &str) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(CalibError::invalid("rows have inconsistent K"));
        }
        LogitDataset::new(rows.concat(), labels.to_vec(), k, name)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.logits[i * self.k..(i + 1) * self.k]
    }

    #[inline]
    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn rows(&self) -> impl Iterator<Item = (&[f64], usize)> + '_ {
        self.logits
            .chunks_exact(self.k)
            .zip(self.labels.iter().copied())
    }

    /// Dataset made of the given rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut logits = Vec::with_capacity(indices.len() * self.k);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(CalibError::invalid(format!("row index {i} out of range")));
            }
            logits.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        LogitDataset::new(logits, labels, self.k, self.name.clone())
    }

    /// Applies `f` to every row's logits, keeping labels.
    pub fn map_rows<F>(&self, mut f: F) -> Result<Self>
    where
        F: FnMut(&[f64]) -> Result<Vec<f64>>,
    {
        let mut logits = Vec::with_capacity(self.logits.len());
        for row in self.logits.chunks_exact(self.k) {
            logits.extend(f(row)?);
        }
        LogitDataset::new(logits, self.labels.clone(), self.k, self.name.clone())
    }

    /// Serializes to the delimited text format, with a `# k=` header.
    pub fn to_text(&self) -> String {
        let mut s = format!("# k={}\n", self.k);
        for (row, y) in self.rows() {
            let _ = write!(s, "{y}");
            for v in row {
                let _ = write!(s, ",{v:?}");
            }
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| CalibError::io(path, e))
    }
}

/// Parses the delimited logit format. `from_probs` maps each value `q` to `ln q`.
pub fn parse_logits(text: &str, source: &str, from_probs: bool) -> Result<LogitDataset> {
    let err = |line: usize, msg: String| CalibError::Parse {
        path: source.to_string(),
        line,
        msg,
    };
    let mut declared_k: Option<usize> = None;
    let mut k: Option<usize> = None;
    let mut logits = Vec::new();
    let mut labels = Vec::new();

    for (idx, raw) in text.split('\n').enumerate() {
        let line_no = idx + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if labels.is_empty() && declared_k.is_none() {
                let rest = rest.trim();
                let value = rest
                    .strip_prefix("k=")
                    .ok_or_else(|| err(line_no, format!("unrecognized header '{line}'")))?;
                declared_k = Some(
                    value
                        .trim()
                        .parse()
                        .map_err(|_| err(line_no, format!("bad class count '{value}'")))?,
                );
                continue;
            }
            return Err(err(line_no, "header must be the first line".into()));
        }
        let mut fields = line.split(',');
        let label_str = fields.next().unwrap_or("");
        let label: usize = label_str
            .trim()
            .parse()
            .map_err(|_| err(line_no, format!("bad label '{label_str}'")))?;
        let start = logits.len();
        for f in fields {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| err(line_no, format!("bad value '{f}'")))?;
            let v = if from_probs {
                if !(0.0..=1.0).contains(&v) {
                    return Err(err(line_no, format!("probability {v} outside [0, 1]")));
                }
                v.ln()
            } else {
                v
            };
            if !v.is_finite() {
                return Err(err(line_no, format!("non-finite value '{f}'")));
            }
            logits.push(v);
        }
        let row_k = logits.len() - start;
        let expected = k.or(declared_k);
        match expected {
            Some(e) if e != row_k => {
                return Err(err(line_no, format!("expected {e} logits, found {row_k}")));
            }
            _ => {}
        }
        if row_k < 2 {
            return Err(err(
                line_no,
                format!("need at least 2 logits, found {row_k}"),
            ));
        }
        k = Some(row_k);
        if label >= row_k {
            return Err(err(
                line_no,
                format!("label {label} out of range for K={row_k}"),
            ));
        }
        labels.push(label);
    }
    let k = k.ok_or_else(|| err(1, "no rows".into()))?;
    let name = Path::new(source)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(source)
        .to_string();
    LogitDataset::new(logits, labels, k, name)
}

/// Loads a logit file from disk.
pub fn load_logits(path: impl AsRef<Path>, from_probs: bool) -> Result<LogitDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| CalibError::io(path, e))?;
    parse_logits(&text, &path.display().to_string(), from_probs)
}

/// Row indices of a uniform draw of `n` rows without replacement, in draw order.
pub fn subsample_indices(total: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 || n > total {
        return Err(CalibError::invalid(format!(
            "cannot draw {n} rows from a dataset of {total}"
        )));
    }
    if n == total {
        return Ok((0..total).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(index::sample(&mut rng, total, n).into_vec())
}

/// Seeded subsample of `n` rows drawn uniformly without replacement.
pub fn subsample(d: &LogitDataset, n: usize, seed: u64) -> Result<LogitDataset> {
    d.select(&subsample_indices(d.len(), n, seed)?)
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn accuracy(d: &LogitDataset) -> f64 {
    let hits = d.rows().filter(|(z, y)| argmax(z) == *y).count();
    hits as f64 / d.len() as f64
}
