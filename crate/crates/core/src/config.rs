//! Flat `key = value` run configuration.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{BcmError, Result};

/// Parsed configuration. Relative paths resolve against the directory of
/// the file it was read from. Every lookup is recorded so that
/// [`Config::reject_unused`] can flag misspelled keys.
#[derive(Debug, Clone, Default)]
pub struct Config {
    values: BTreeMap<String, String>,
    base_dir: PathBuf,
    used: RefCell<BTreeSet<String>>,
}

impl Config {
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(BcmError::Config(format!("line {}: expected `key = value`", k + 1)));
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(BcmError::Config(format!("line {}: empty key", k + 1)));
            }
            if values.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(BcmError::Config(format!("line {}: duplicate key `{key}`", k + 1)));
            }
        }
        Ok(Config {
            values,
            base_dir: base_dir.into(),
            used: RefCell::default(),
        })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| BcmError::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base)
    }

    pub fn empty(base_dir: impl Into<PathBuf>) -> Self {
        Config {
            base_dir: base_dir.into(),
            ..Default::default()
        }
    }

    /// Command-line values take precedence over file values.
    pub fn set(&mut self, key: &str, value: impl Display) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.used.borrow_mut().insert(key.to_string());
        self.values.get(key).map(String::as_str)
    }

    fn parse_value<T: FromStr>(&self, key: &str, value: &str) -> Result<T> {
        value
            .parse()
            .map_err(|_| BcmError::Config(format!("`{key}`: cannot parse `{value}`")))
    }

    pub fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            Some(v) => self.parse_value(key, v),
            None => Ok(default),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        match self.raw(key) {
            Some(v) => self.parse_value(key, v),
            None => Err(BcmError::Config(format!("missing required key `{key}`"))),
        }
    }

    pub fn get_list<T: FromStr>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        match self.raw(key) {
            Some(v) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| self.parse_value(key, s))
                .collect(),
            None => Ok(default),
        }
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.raw(key) {
            None => Ok(default),
            Some("true" | "yes" | "1") => Ok(true),
            Some("false" | "no" | "0") => Ok(false),
            Some(v) => Err(BcmError::Config(format!("`{key}`: expected a boolean, got `{v}`"))),
        }
    }

    pub fn resolve(&self, path: &str) -> PathBuf {
        let p = Path::new(path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn get_path(&self, key: &str) -> Result<Option<PathBuf>> {
        Ok(self.raw(key).map(|v| self.resolve(v)))
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        self.get_path(key)?
            .ok_or_else(|| BcmError::Config(format!("missing required key `{key}`")))
    }

    pub fn get_paths(&self, key: &str) -> Result<Vec<PathBuf>> {
        let list: Vec<String> = self.get_list(key, Vec::new())?;
        Ok(list.iter().map(|p| self.resolve(p)).collect())
    }

    /// Errors on any key that was never looked up.
    pub fn reject_unused(&self) -> Result<()> {
        let used = self.used.borrow();
        let unknown: Vec<&str> = self
            .values
            .keys()
            .filter(|k| !used.contains(*k))
            .map(String::as_str)
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(BcmError::Config(format!("unknown keys: {}", unknown.join(", "))))
        }
    }

    /// All set values in key order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}
