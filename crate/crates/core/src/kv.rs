//! Flat `key=value` text files: one pair per line, `#` starts a comment,
//! blank lines are ignored. Used for configs and dataset manifests.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: Vec<(String, String)>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                what: "key=value file",
                detail: format!("line {}: missing '='", n + 1),
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Parse {
                    what: "key=value file",
                    detail: format!("line {}: empty key", n + 1),
                });
            }
            if kv.get(k).is_some() {
                return Err(Error::Parse {
                    what: "key=value file",
                    detail: format!("line {}: duplicate key {k}", n + 1),
                });
            }
            kv.entries.push((k.to_string(), v.trim().to_string()));
        }
        Ok(kv)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn insert(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key, value)),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn parse_or<V: FromStr>(&self, key: &str, default: V) -> Result<V> {
        match self.get(key) {
            None => Ok(default),
            Some(s) => s.parse().map_err(|_| Error::Parse {
                what: "key=value file",
                detail: format!("bad value {s:?} for {key}"),
            }),
        }
    }

    /// Rejects keys outside `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        match self.keys().find(|k| !allowed.contains(k)) {
            Some(k) => Err(Error::Parse {
                what: "key=value file",
                detail: format!("unknown key {k}"),
            }),
            None => Ok(()),
        }
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

/// Comma-separated list of values.
pub fn parse_list<V: FromStr>(s: &str, what: &str) -> Result<Vec<V>> {
    s.split(',')
        .map(|p| {
            p.trim().parse().map_err(|_| Error::Parse {
                what: "key=value file",
                detail: format!("bad list entry {p:?} in {what}"),
            })
        })
        .collect()
}
