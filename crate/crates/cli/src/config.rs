use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use tft_core::{Error, Result};

/// Resolved `key=value` settings: config file first, then overrides.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    /// Every key read so far with the value used, defaults included.
    resolved: RefCell<BTreeMap<String, String>>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            err: e,
        })?;
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected key=value, got `{line}`"),
            })?;
            cfg.set(k.trim(), v.trim());
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
        self.set(k.trim(), v.trim());
        Ok(())
    }

    /// Resolved settings: explicit values plus every default that was used.
    pub fn resolved(&self) -> BTreeMap<String, String> {
        let mut all = self.values.clone();
        all.extend(self.resolved.borrow().clone());
        all
    }

    fn note(&self, key: &str, value: &str) {
        self.resolved
            .borrow_mut()
            .insert(key.to_string(), value.to_string());
    }

    pub fn str(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn str_or(&self, key: &str, default: &str) -> String {
        let v = self.str(key).unwrap_or(default).to_string();
        self.note(key, &v);
        v
    }

    pub fn get<T: FromStr + ToString>(&self, key: &str, default: T) -> Result<T> {
        match self.values.get(key) {
            None => {
                self.note(key, &default.to_string());
                Ok(default)
            }
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("`{key}` = `{v}` cannot be parsed"))),
        }
    }

    pub fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.values
            .get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::Config(format!("`{key}` = `{v}` cannot be parsed")))
            })
            .transpose()
    }

    pub fn path_or(&self, key: &str, default: PathBuf) -> PathBuf {
        let p = self.str(key).map(PathBuf::from).unwrap_or(default);
        self.note(key, &p.display().to_string());
        p
    }

    pub fn list(&self, key: &str, default: &str) -> Vec<String> {
        self.str_or(key, default)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect()
    }

    pub fn bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.str(key) {
            None => {
                self.note(key, &default.to_string());
                Ok(default)
            }
            Some("true" | "1" | "yes") => Ok(true),
            Some("false" | "0" | "no") => Ok(false),
            Some(v) => Err(Error::Config(format!("`{key}` = `{v}` is not a boolean"))),
        }
    }
}
