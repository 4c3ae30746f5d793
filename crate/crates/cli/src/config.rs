//! Flat key-value configuration with dotted sections.
//!
//! A config document is a text file of `key = value` lines (`#` starts a
//! comment). Command-line `--set key=value` entries override file values and
//! `--seed` overrides the `seed` key. Every subcommand declares the keys it
//! recognizes; anything else is rejected by name.

use std::collections::BTreeMap;
use std::path::Path;

use stconv::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut values = BTreeMap::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected 'key = value'", path.display(), ln + 1))
            })?;
            values.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Config { values })
    }

    pub fn apply_overrides(&mut self, sets: &[String]) -> Result<()> {
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set '{}': expected key=value", s)))?;
            self.values.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: String) {
        self.values.insert(key.to_string(), value);
    }

    /// Reject any key that is not in the subcommand's recognized set.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        for key in self.values.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(Error::Config(format!("unknown config key '{}'", key)));
            }
        }
        Ok(())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Config(format!("missing required config key '{}'", key)))
    }

    pub fn get_str(&self, key: &str, default: &str) -> String {
        self.values.get(key).cloned().unwrap_or_else(|| default.to_string())
    }

    pub fn get_parse<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse::<T>()
                .map_err(|_| Error::Config(format!("config key '{}' has invalid value '{}'", key, v))),
        }
    }

    pub fn get_list<T: std::str::FromStr + Clone>(&self, key: &str, default: &[T]) -> Result<Vec<T>> {
        match self.values.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<T>()
                        .map_err(|_| Error::Config(format!("config key '{}' has invalid entry '{}'", key, s)))
                })
                .collect(),
        }
    }
}
