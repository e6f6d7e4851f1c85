//! Flat `key = value` configuration text.
//!
//! Keys carry a section prefix (`model.`, `train.`, `data.`). Blank lines
//! and `#` comments are ignored; lists are comma separated.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected key = value, got {line:?}",
                    lineno + 1
                )));
            };
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            if entries
                .insert(k.to_string(), v.trim().to_string())
                .is_some()
            {
                return Err(Error::Config(format!(
                    "line {}: duplicate key {k}",
                    lineno + 1
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Display) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn set_list<T: Display>(&mut self, key: impl Into<String>, values: &[T]) {
        let joined = values
            .iter()
            .map(T::to_string)
            .collect::<Vec<_>>()
            .join(",");
        self.entries.insert(key.into(), joined);
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.entries
            .get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        self.entries
            .get(key)
            .map(|v| {
                v.split(',')
                    .map(|item| {
                        item.trim().parse().map_err(|_| {
                            Error::Config(format!("{key}: cannot parse list item {item:?}"))
                        })
                    })
                    .collect()
            })
            .transpose()
    }

    /// Keys under `prefix` that are not in `known`.
    pub fn unknown_keys(&self, prefix: &str, known: &[&str]) -> Vec<String> {
        self.entries
            .keys()
            .filter_map(|k| k.strip_prefix(prefix))
            .filter(|k| !known.contains(k))
            .map(|k| format!("{prefix}{k}"))
            .collect()
    }

    /// Fails on any key outside the given sections' known keys.
    pub fn reject_unknown(&self, sections: &[(&str, &[&str])]) -> Result<()> {
        let mut bad: Vec<String> = Vec::new();
        for k in self.entries.keys() {
            let ok = sections.iter().any(|(prefix, known)| {
                k.strip_prefix(prefix)
                    .is_some_and(|rest| known.contains(&rest))
            });
            if !ok {
                bad.push(k.clone());
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown keys: {}", bad.join(", "))))
        }
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_string())?;
        Ok(())
    }
}

impl std::fmt::Display for KeyValues {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}
