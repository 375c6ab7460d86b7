//! Flat `key = value` text used by run and generator configuration files.

use std::collections::BTreeSet;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum KvError {
    #[error("line {line}: expected key = value")]
    Syntax { line: usize },
    #[error("line {line}: duplicate key {key:?}")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: {key}: {reason}")]
    Value { line: usize, key: String, reason: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

impl Entry {
    pub fn invalid(&self, reason: impl Into<String>) -> KvError {
        KvError::Value { line: self.line, key: self.key.clone(), reason: reason.into() }
    }

    pub fn unknown(&self) -> KvError {
        KvError::UnknownKey { line: self.line, key: self.key.clone() }
    }

    pub fn parse<T: std::str::FromStr>(&self) -> Result<T, KvError> {
        self.value
            .parse()
            .map_err(|_| self.invalid(format!("cannot parse {:?}", self.value)))
    }

    pub fn parse_f64(&self) -> Result<f64, KvError> {
        let v: f64 = self.parse()?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(self.invalid("not finite"))
        }
    }

    /// Comma-separated list.
    pub fn parse_list<T: std::str::FromStr>(&self) -> Result<Vec<T>, KvError> {
        let items: Result<Vec<T>, _> = self
            .value
            .split(',')
            .map(|s| s.trim().parse::<T>().map_err(|_| self.invalid(format!("cannot parse list item {s:?}"))))
            .collect();
        let items = items?;
        if items.is_empty() {
            return Err(self.invalid("empty list"));
        }
        Ok(items)
    }

    pub fn parse_rate(&self) -> Result<f64, KvError> {
        let v = self.parse_f64()?;
        if (0.0..=1.0).contains(&v) {
            Ok(v)
        } else {
            Err(self.invalid("must lie in [0, 1]"))
        }
    }
}

/// Splits text into entries. Blank lines and `#` comments are skipped;
/// repeated keys are rejected.
pub fn parse(text: &str) -> Result<Vec<Entry>, KvError> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or(KvError::Syntax { line })?;
        let key = key.trim().to_string();
        if key.is_empty() {
            return Err(KvError::Syntax { line });
        }
        if !seen.insert(key.clone()) {
            return Err(KvError::Duplicate { line, key });
        }
        out.push(Entry { line, key, value: value.trim().to_string() });
    }
    Ok(out)
}
