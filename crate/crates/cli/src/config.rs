//! Flat `key = value` configuration files.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::UsageError;

/// Every key a configuration file may set. Keys match the long flag names.
pub const KEYS: &[&str] = &[
    "alpha",
    "threshold",
    "spatial-bandwidth",
    "range-bandwidth",
    "min-region-size",
    "C",
    "svm-tolerance",
    "cv-folds",
    "textons",
    "per-class",
    "epochs",
    "batch-size",
    "learning-rate",
    "momentum",
    "seed",
    "layout",
    "subset",
    "test-fraction",
    "jobs",
];

#[derive(Debug, Default)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, UsageError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| UsageError(format!("config {}: {}", path.display(), e.0)))
    }

    /// Blank lines and lines starting with `#` are skipped. Underscores in
    /// keys are read as dashes.
    pub fn parse(text: &str) -> Result<Self, UsageError> {
        let mut values = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(UsageError(format!(
                    "line {}: expected key = value",
                    n + 1
                )));
            };
            let key = key.trim().replace('_', "-");
            if !KEYS.contains(&key.as_str()) {
                return Err(UsageError(format!("line {}: unknown key {key:?}", n + 1)));
            }
            if values
                .insert(key.clone(), value.trim().to_string())
                .is_some()
            {
                return Err(UsageError(format!("line {}: duplicate key {key:?}", n + 1)));
            }
        }
        Ok(ConfigFile { values })
    }

    /// The flag value if given, else the file value, else `default`.
    pub fn pick<T>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, UsageError>
    where
        T: FromStr,
        T::Err: Display,
    {
        debug_assert!(KEYS.contains(&key));
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.values.get(key) {
            Some(raw) => raw
                .parse()
                .map_err(|e| UsageError(format!("config key {key}: {e}"))),
            None => Ok(default),
        }
    }

    pub fn pick_opt<T>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, UsageError>
    where
        T: FromStr,
        T::Err: Display,
    {
        debug_assert!(KEYS.contains(&key));
        if flag.is_some() {
            return Ok(flag);
        }
        self.values
            .get(key)
            .map(|raw| {
                raw.parse()
                    .map_err(|e| UsageError(format!("config key {key}: {e}")))
            })
            .transpose()
    }
}
