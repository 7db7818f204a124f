//! Plain-text `key = value` settings. Command-line flags take precedence
//! over `<command>.<key>`, which takes precedence over a bare `<key>`.

use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    values: HashMap<String, String>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<ConfigFile> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    /// Blank lines and lines starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<ConfigFile> {
        let mut values = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!("line {}: expected key=value, found {line:?}", i + 1);
            };
            let k = k.trim();
            if k.is_empty() {
                bail!("line {}: empty key", i + 1);
            }
            values.insert(k.to_string(), v.trim().to_string());
        }
        Ok(ConfigFile { values })
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Resolves one setting for `command`.
    pub fn resolve<T>(&self, command: &str, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        let scoped = format!("{command}.{key}");
        for k in [scoped.as_str(), key] {
            if let Some(raw) = self.raw(k) {
                return raw.parse().map_err(|e| anyhow::anyhow!("config key {k} = {raw:?}: {e}"));
            }
        }
        Ok(default)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_is_flag_then_scoped_then_bare() {
        let c = ConfigFile::parse("# comment\n n = 5\nbench-wal.n=7\n\ndim=16").unwrap();
        assert_eq!(c.resolve("bench-wal", "n", Some(1usize), 0).unwrap(), 1);
        assert_eq!(c.resolve("bench-wal", "n", None::<usize>, 0).unwrap(), 7);
        assert_eq!(c.resolve("build", "n", None::<usize>, 0).unwrap(), 5);
        assert_eq!(c.resolve("build", "seed", None::<u64>, 9).unwrap(), 9);
        assert!(c.resolve("build", "dim", None::<bool>, false).is_err());
    }

    #[test]
    fn malformed_lines_are_rejected() {
        assert!(ConfigFile::parse("novalue").is_err());
        assert!(ConfigFile::parse("=3").is_err());
    }
}
