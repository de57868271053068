//! `key=value` text configuration.
//!
//! Blank lines and lines starting with `#` are skipped; keys and values are
//! trimmed. Later duplicates override earlier ones.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected key=value, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key {0}")]
    UnknownKey(String),
    #[error("config key {key}: invalid value {value:?}")]
    InvalidValue { key: String, value: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ConfigError::Syntax { line: i + 1, text: line.to_string() })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn read_kv(path: &Path) -> Result<BTreeMap<String, String>, ConfigError> {
    parse_kv(&std::fs::read_to_string(path)?)
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::InvalidValue { key: key.to_string(), value: value.to_string() })
}

/// Settings that can be overridden key by key.
pub trait KvConfig {
    /// Applies one setting; unrecognised keys return `Ok(false)`.
    fn set(&mut self, key: &str, value: &str) -> Result<bool, ConfigError>;

    /// Applies every entry, failing on keys no setter recognises.
    fn apply(&mut self, entries: &BTreeMap<String, String>) -> Result<(), ConfigError> {
        for (k, v) in entries {
            if !self.set(k, v)? {
                return Err(ConfigError::UnknownKey(k.clone()));
            }
        }
        Ok(())
    }
}
