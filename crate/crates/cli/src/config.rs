//! Plain-text `key = value` configuration.
//!
//! Every command declares its keys with defaults. Values are layered:
//! defaults, then the config file, then `--set` overrides, then the
//! `LGA_SEED` environment variable and finally `--seed`. Keys a command
//! does not declare are rejected.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{CliError, CliResult};

pub const SEED_ENV: &str = "LGA_SEED";
pub const SNAPSHOT_FILE: &str = "resolved_config.txt";

/// Parse `key = value` lines. `#` starts a comment; blank lines are skipped.
pub fn parse_pairs(text: &str, origin: &str) -> CliResult<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = parse_assignment(line)
            .map_err(|e| CliError::Config(format!("{origin}:{}: {e}", no + 1)))?;
        if out.iter().any(|(seen, _)| *seen == k) {
            return Err(CliError::Config(format!(
                "{origin}:{}: duplicate key '{k}'",
                no + 1
            )));
        }
        out.push((k, v));
    }
    Ok(out)
}

pub fn parse_assignment(s: &str) -> Result<(String, String), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected key=value, got '{s}'"))?;
    let (k, v) = (k.trim(), v.trim());
    if k.is_empty() {
        return Err(format!("empty key in '{s}'"));
    }
    Ok((k.to_string(), v.to_string()))
}

/// Resolved settings for one command.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    command: String,
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn new(command: &str, defaults: &[(&str, String)]) -> Self {
        Self {
            command: command.to_string(),
            values: defaults
                .iter()
                .map(|(k, v)| (k.to_string(), v.clone()))
                .collect(),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => {
                let known: Vec<&str> = self.values.keys().map(String::as_str).collect();
                Err(CliError::Config(format!(
                    "unknown key '{key}' for '{}' (known: {})",
                    self.command,
                    known.join(", ")
                )))
            }
        }
    }

    pub fn apply(&mut self, pairs: &[(String, String)]) -> CliResult<()> {
        pairs.iter().try_for_each(|(k, v)| self.set(k, v))
    }

    pub fn apply_file(&mut self, path: &Path) -> CliResult<()> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply(&parse_pairs(&text, &path.display().to_string())?)
    }

    pub fn has(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("key '{key}' is not declared for '{}'", self.command))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> CliResult<T>
    where
        T::Err: Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e| CliError::Config(format!("invalid value '{raw}' for '{key}': {e}")))
    }

    /// Comma-separated list; an empty value is an empty list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> CliResult<Vec<T>>
    where
        T::Err: Display,
    {
        let raw = self.raw(key);
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse().map_err(|e| {
                    CliError::Config(format!("invalid list item '{s}' for '{key}': {e}"))
                })
            })
            .collect()
    }

    /// Snapshot in the same format the parser accepts.
    pub fn snapshot(&self) -> String {
        let mut s = format!("# resolved configuration for '{}'\n", self.command);
        for (k, v) in &self.values {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn write_snapshot(&self, dir: &Path) -> CliResult<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(SNAPSHOT_FILE), self.snapshot())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings() -> Settings {
        Settings::new(
            "t",
            &[("a", "1".into()), ("b", "x".into()), ("list", "1,2".into())],
        )
    }

    #[test]
    fn parses_comments_and_whitespace() {
        let pairs = parse_pairs("# header\n a = 3 \n\nb=y # trailing\n", "f").unwrap();
        assert_eq!(
            pairs,
            vec![("a".into(), "3".into()), ("b".into(), "y".into())]
        );
    }

    #[test]
    fn rejects_malformed_and_duplicate_lines() {
        assert!(parse_pairs("a 3", "f").is_err());
        assert!(parse_pairs("= 3", "f").is_err());
        let err = parse_pairs("a=1\na=2", "f").unwrap_err().to_string();
        assert!(err.contains("f:2") && err.contains("duplicate"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut s = settings();
        assert!(matches!(s.set("c", "1"), Err(CliError::Config(_))));
        s.set("a", "7").unwrap();
        assert_eq!(s.get::<u32>("a").unwrap(), 7);
    }

    #[test]
    fn typed_access() {
        let s = settings();
        assert_eq!(s.get_list::<usize>("list").unwrap(), vec![1, 2]);
        assert!(s.get::<u32>("b").is_err());
    }

    #[test]
    fn snapshot_roundtrips() {
        let mut s = settings();
        s.set("b", "hello").unwrap();
        let mut back = settings();
        back.apply(&parse_pairs(&s.snapshot(), "snap").unwrap())
            .unwrap();
        assert_eq!(back, s);
    }
}
