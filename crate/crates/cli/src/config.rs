//! Flat `key = value` configuration with command-line overrides.
//!
//! Lines starting with `#` are comments. Later assignments replace earlier
//! ones, so the file is read first, then flags, then `key=value` overrides.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::str::FromStr;

use crate::error::CliError;

#[derive(Debug, Default, Clone)]
pub struct KeyValues {
    values: BTreeMap<String, String>,
    used: RefCell<BTreeSet<String>>,
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut kv = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
            kv.set(k, v)?;
        }
        Ok(kv)
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| bad(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let key = key.trim().to_ascii_lowercase();
        if key.is_empty() {
            return Err(bad("empty configuration key"));
        }
        self.values.insert(key, value.trim().to_string());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), CliError> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| bad(format!("override `{assignment}` is not of the form key=value")))?;
        self.set(k, v)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        let v = self.values.get(key)?;
        self.used.borrow_mut().insert(key.to_string());
        Some(v.as_str())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| bad(format!("`{key}`: cannot parse `{v}`: {e}"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Comma-separated list; an empty value gives an empty list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let Some(v) = self.raw(key) else {
            return Ok(None);
        };
        if v.is_empty() {
            return Ok(Some(Vec::new()));
        }
        v.split(',')
            .map(|item| {
                let item = item.trim();
                item.parse()
                    .map_err(|e| bad(format!("`{key}`: cannot parse `{item}`: {e}")))
            })
            .collect::<Result<Vec<T>, _>>()
            .map(Some)
    }

    /// Covariate positions written 1-based, returned 0-based.
    pub fn indices(&self, key: &str) -> Result<Option<Vec<usize>>, CliError> {
        let Some(list) = self.list::<usize>(key)? else {
            return Ok(None);
        };
        list.into_iter()
            .map(|i| {
                i.checked_sub(1)
                    .ok_or_else(|| bad(format!("`{key}`: covariate positions start at 1")))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }

    pub fn bool(&self, key: &str) -> Result<Option<bool>, CliError> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => match v.to_ascii_lowercase().as_str() {
                "true" | "yes" | "1" | "on" => Ok(Some(true)),
                "false" | "no" | "0" | "off" => Ok(Some(false)),
                _ => Err(bad(format!("`{key}`: expected a boolean, got `{v}`"))),
            },
        }
    }

    /// Rejects keys that were set but never read.
    pub fn finish(&self) -> Result<(), CliError> {
        let used = self.used.borrow();
        let unknown: Vec<&String> = self.values.keys().filter(|k| !used.contains(*k)).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            let names: Vec<&str> = unknown.iter().map(|s| s.as_str()).collect();
            Err(bad(format!("unused or unknown configuration keys: {}", names.join(", "))))
        }
    }
}
