//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys may use either
//! dashes or underscores. Precedence is built-in default < file < flag.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

#[derive(Clone, Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

fn normalize(key: &str) -> String {
    key.trim().replace('-', "_")
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value, got {line:?}", n + 1))?;
            if values.insert(normalize(k), v.trim().to_string()).is_some() {
                bail!("line {}: duplicate key {:?}", n + 1, k.trim());
            }
        }
        Ok(Settings { values })
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Settings::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Self::parse(&text).with_context(|| format!("in {}", p.display()))
            }
        }
    }

    /// Flag value if given, else the file value, else `default`.
    pub fn pick<T>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.values.get(&normalize(key)) {
            Some(raw) => raw
                .parse()
                .map_err(|e| anyhow!("config key {key}: cannot parse {raw:?}: {e}")),
            None => Ok(default),
        }
    }

    /// Rejects keys that no command consumed, to catch typos.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        for k in self.values.keys() {
            if !known.iter().any(|n| normalize(n) == *k) {
                bail!("unknown config key {k:?}");
            }
        }
        Ok(())
    }
}
