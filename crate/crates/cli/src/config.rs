//! `key = value` config files for `relabel`.
//!
//! One setting per line; `#` starts a comment; keys are the long flag names
//! (`max-retries` and `max_retries` are the same key). Flags on the command
//! line override the file, and the file overrides built-in defaults.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

pub const KEYS: &[&str] = &[
    "theta",
    "delta",
    "max-retries",
    "multi-judge",
    "stage1-mode",
    "stage2-mode",
    "judge",
    "transcript",
    "truth",
    "oracle-noise",
    "seed",
    "concurrency",
    "format",
    "lexicon",
    "temperature-first",
    "temperature-retry",
    "temperature-second",
    "endpoint",
    "model",
    "api-key-env",
    "retry-budget",
    "timeout-secs",
];

#[derive(Debug, Default)]
pub struct ConfigFile {
    values: BTreeMap<String, (String, usize)>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key = value", i + 1))?;
            let key = k.trim().replace('_', "-");
            if !KEYS.contains(&key.as_str()) {
                return Err(format!("line {}: unknown key {key:?}", i + 1));
            }
            if values.insert(key.clone(), (v.trim().to_string(), i + 1)).is_some() {
                return Err(format!("line {}: {key} set twice", i + 1));
            }
        }
        Ok(ConfigFile { values })
    }

    /// Flag value if given, else the parsed file value, else `None`.
    pub fn pick<T>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, String>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        debug_assert!(KEYS.contains(&key), "{key} missing from KEYS");
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None => Ok(None),
            Some((v, line)) => v
                .parse()
                .map(Some)
                .map_err(|e| format!("config line {line}: {key}: {e}")),
        }
    }
}
