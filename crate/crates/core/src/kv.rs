//! Plain-text `key = value` files with optional `[section]` headers, used for
//! engine configs, scenario presets and metric reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Flattened `section.key -> value` map. Keys before any header have no prefix.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvDoc {
    entries: BTreeMap<String, String>,
}

impl KvDoc {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = Self::new();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::parse(i + 1, "unterminated section header"))?;
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::parse(i + 1, format!("expected key = value, found `{line}`"))
            })?;
            let key = if section.is_empty() {
                k.trim().to_string()
            } else {
                format!("{section}.{}", k.trim())
            };
            doc.entries.insert(key, v.trim().to_string());
        }
        Ok(doc)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::config(key, format!("cannot parse `{v}`"))),
        }
    }

    /// Comma-separated list of numbers.
    pub fn get_list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        self.get(key)
            .map(|v| {
                v.split(',')
                    .map(|x| {
                        x.trim()
                            .parse()
                            .map_err(|_| Error::config(key, format!("bad number `{x}`")))
                    })
                    .collect()
            })
            .transpose()
    }

    pub fn keys_with_prefix<'a>(
        &'a self,
        prefix: &'a str,
    ) -> impl Iterator<Item = (&'a str, &'a str)> {
        self.entries
            .iter()
            .filter(move |(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn merge(&mut self, other: &KvDoc) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Sorted `key=value` lines, one per entry.
    pub fn normalized(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// Renders with section headers, grouping on the first `.` of each key.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut current: Option<&str> = None;
        let (plain, sectioned): (Vec<_>, Vec<_>) =
            self.entries.iter().partition(|(k, _)| !k.contains('.'));
        for (k, v) in plain.into_iter().chain(sectioned) {
            let (section, key) = match k.split_once('.') {
                Some((s, rest)) => (s, rest),
                None => ("", k.as_str()),
            };
            if current != Some(section) {
                if !section.is_empty() {
                    if current.is_some() {
                        out.push('\n');
                    }
                    let _ = writeln!(out, "[{section}]");
                }
                current = Some(section);
            }
            let _ = writeln!(out, "{key} = {v}");
        }
        out
    }

    pub fn digest(&self) -> String {
        digest_text(&self.normalized())
    }
}

/// First 16 hex digits of SHA-256.
pub fn digest_text(text: &str) -> String {
    let d = Sha256::digest(text.as_bytes());
    hex::encode(&d[..8])
}
