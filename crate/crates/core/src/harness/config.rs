//! Flat `key = value` text with `[section]` headers.
//!
//! Lines starting with `#` are comments. Keys before the first header live in
//! the unnamed section `""`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConfigText {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl ConfigText {
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = Self::default();
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::config(format!("line {}: unterminated section header", n + 1)))?;
                section = name.trim().to_string();
                out.sections.entry(section.clone()).or_default();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", n + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::config(format!("line {}: empty key", n + 1)));
            }
            let prev = out.sections.entry(section.clone()).or_default().insert(k.to_string(), v.trim().to_string());
            if prev.is_some() {
                return Err(Error::config(format!("line {}: duplicate key `{k}` in [{section}]", n + 1)));
            }
        }
        Ok(out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl ToString) {
        self.sections.entry(section.to_string()).or_default().insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }

    pub fn has_section(&self, section: &str) -> bool {
        self.sections.contains_key(section)
    }

    /// Parses a value, or returns `None` if the key is absent.
    pub fn value<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>> {
        self.get(section, key)
            .map(|v| v.parse().map_err(|_| Error::config(format!("[{section}] {key} = `{v}` does not parse"))))
            .transpose()
    }

    pub fn value_or<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T> {
        Ok(self.value(section, key)?.unwrap_or(default))
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<Vec<T>>> {
        self.get(section, key)
            .map(|v| {
                v.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse().map_err(|_| Error::config(format!("[{section}] {key}: `{s}` does not parse"))))
                    .collect()
            })
            .transpose()
    }

    /// Keys present in `self` but not in `known`, as `section.key`.
    pub fn unknown_keys(&self, known: &[(&str, &[&str])]) -> Vec<String> {
        let mut out = Vec::new();
        for (sec, keys) in &self.sections {
            let allowed = known.iter().find(|(s, _)| s == sec).map(|(_, k)| *k);
            for k in keys.keys() {
                if !allowed.is_some_and(|a| a.contains(&k.as_str())) {
                    out.push(format!("{sec}.{k}"));
                }
            }
        }
        out
    }

    /// SHA-256 of the canonical rendering, as lowercase hex.
    pub fn digest(&self) -> String {
        let h = Sha256::digest(self.to_string().as_bytes());
        h.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Canonical form: sections and keys sorted, one `key = value` per line.
impl fmt::Display for ConfigText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (sec, keys) in &self.sections {
            if !first {
                writeln!(f)?;
            }
            first = false;
            if !sec.is_empty() {
                writeln!(f, "[{sec}]")?;
            }
            for (k, v) in keys {
                writeln!(f, "{k} = {v}")?;
            }
        }
        Ok(())
    }
}
