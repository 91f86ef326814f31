//! Flat `key = value` config files.
//!
//! One assignment per line, `#` starts a comment, keys are dot-namespaced
//! (`corpus.n_languages`, `train.joint.steps`). Values are parsed on demand
//! by the typed config builders; unknown keys are rejected there so typos
//! fail loudly.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
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
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got {raw:?}",
                    lineno + 1
                )));
            };
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            entries.insert(key, value.trim().to_string());
        }
        Ok(KvConfig { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.insert(key.into(), value.to_string());
    }

    /// Apply `key=value` override strings (CLI `--set`); flags win over file.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for ov in overrides {
            let Some((k, v)) = ov.split_once('=') else {
                return Err(Error::Config(format!(
                    "--set expects key=value, got {ov:?}"
                )));
            };
            self.set(k.trim(), v.trim());
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64> {
        match self.entries.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("{key}: expected integer, got {v:?}"))),
        }
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.entries.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("{key}: expected integer, got {v:?}"))),
        }
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.entries.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("{key}: expected number, got {v:?}"))),
        }
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.entries.get(key) {
            None => Ok(default),
            Some(v) => match v.as_str() {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                other => Err(Error::Config(format!(
                    "{key}: expected bool, got {other:?}"
                ))),
            },
        }
    }

    pub fn get_str(&self, key: &str, default: &str) -> String {
        self.entries
            .get(key)
            .cloned()
            .unwrap_or_else(|| default.to_string())
    }

    /// Canonical serialization: sorted keys, one per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_roundtrip_and_comments() {
        let cfg = KvConfig::parse("a.b = 3 # trailing\n# full comment\n\nx = hello world\n")
            .expect("parse");
        assert_eq!(cfg.get_u64("a.b", 0).unwrap(), 3);
        assert_eq!(cfg.get_str("x", ""), "hello world");
        assert_eq!(cfg.get_u64("missing", 7).unwrap(), 7);
        let text = cfg.to_text();
        let again = KvConfig::parse(&text).unwrap();
        assert_eq!(again.to_text(), text);
    }

    #[test]
    fn rejects_malformed_lines_and_values() {
        assert!(KvConfig::parse("novalue\n").is_err());
        let cfg = KvConfig::parse("k = notanumber\n").unwrap();
        assert!(cfg.get_u64("k", 0).is_err());
        assert!(cfg.get_f64("k", 0.0).is_err());
    }

    #[test]
    fn overrides_win() {
        let mut cfg = KvConfig::parse("k = 1\n").unwrap();
        cfg.apply_overrides(&["k=2".to_string()]).unwrap();
        assert_eq!(cfg.get_u64("k", 0).unwrap(), 2);
        assert!(cfg.apply_overrides(&["bad".to_string()]).is_err());
    }
}
