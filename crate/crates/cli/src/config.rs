//! Flat `key = value` run configuration. No nesting, no quoting: files diff
//! cleanly and can be fed back via `--config` to reproduce a run.
//!
//! Precedence: explicit command-line flag > config file > profile default >
//! built-in default.

use icrl_core::error::{Error, Result};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Default, Clone)]
pub struct FileConfig {
    values: BTreeMap<String, String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)?;
        let mut values = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Validation(format!(
                    "{}:{}: expected 'key = value', got {line:?}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            values.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Self { values })
    }

    /// Typed lookup; consumed keys are tracked by the caller via
    /// [`FileConfig::check_consumed`].
    pub fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                Error::Validation(format!("config key {key} has invalid value {raw:?}"))
            }),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(|s| s.as_str())
    }

    /// Rejects keys that no flag consumed, mirroring unknown-flag rejection.
    pub fn check_consumed(&self, known: &[&str]) -> Result<()> {
        for key in self.keys() {
            if !known.contains(&key) {
                return Err(Error::Validation(format!(
                    "unknown config key {key:?}"
                )));
            }
        }
        Ok(())
    }
}

/// explicit flag > config file > fallback.
pub fn pick<T>(cli: Option<T>, file: Option<T>, fallback: T) -> T {
    cli.or(file).unwrap_or(fallback)
}

/// Serializes resolved settings as a config file body.
pub fn resolved_text(pairs: &[(&str, String)]) -> String {
    let mut s = String::new();
    for (k, v) in pairs {
        s.push_str(k);
        s.push_str(" = ");
        s.push_str(v);
        s.push('\n');
    }
    s
}
