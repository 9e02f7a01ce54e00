//! `key=value` text documents: fitted parameters, oracle sidecars and
//! configuration files all share this format.
//!
//! One entry per line; blank lines and lines starting with `#` are ignored;
//! whitespace around keys and values is trimmed. Floats are written with
//! Rust's shortest round-trip formatting, so reading back is bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{CalibError, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvDoc {
    entries: Vec<(String, String)>,
    source: String,
}

/// Formats a float so that parsing it yields the same bits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn fmt_f64_list(v: &[f64]) -> String {
    v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(",")
}

impl KvDoc {
    pub fn new() -> Self {
        KvDoc::default()
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut doc = KvDoc {
            entries: Vec::new(),
            source: source.to_string(),
        };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| CalibError::Parse {
                path: source.to_string(),
                line: i + 1,
                msg: format!("expected key=value, got '{line}'"),
            })?;
            let key = k.trim();
            if doc.entries.iter().any(|(e, _)| e == key) {
                return Err(CalibError::Parse {
                    path: source.to_string(),
                    line: i + 1,
                    msg: format!("duplicate key '{key}'"),
                });
            }
            doc.entries.push((key.to_string(), v.trim().to_string()));
        }
        Ok(doc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CalibError::io(path, e))?;
        KvDoc::parse(&text, &path.display().to_string())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| CalibError::io(path, e))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
        self
    }

    pub fn set_f64(&mut self, key: &str, v: f64) -> &mut Self {
        self.set(key, fmt_f64(v))
    }

    pub fn set_f64_list(&mut self, key: &str, v: &[f64]) -> &mut Self {
        self.set(key, fmt_f64_list(v))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn missing(&self, key: &str) -> CalibError {
        CalibError::Config(format!("{}: missing key '{key}'", self.source))
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| self.missing(key))
    }

    fn parse_value<T: FromStr>(&self, key: &str, v: &str) -> Result<T> {
        v.parse().map_err(|_| {
            CalibError::Config(format!("{}: bad value '{v}' for '{key}'", self.source))
        })
    }

    pub fn req<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.require(key)?;
        self.parse_value(key, v)
    }

    pub fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key).map(|v| self.parse_value(key, v)).transpose()
    }

    pub fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.opt(key)?.unwrap_or(default))
    }

    pub fn req_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let v = self.require(key)?;
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|item| self.parse_value(key, item.trim()))
            .collect()
    }
}
