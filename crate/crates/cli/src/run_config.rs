//! Resolution of a run's parameters: command defaults, then a `key=value`
//! config file, then command-line flags. Keys a command does not declare are
//! rejected rather than ignored.

use std::path::Path;

use filterlab::config::{parse_kv, parse_value, render_kv};
use filterlab::error::{Error, Result};

/// Fully resolved parameters of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    /// Declared keys in declaration order, with their resolved values.
    pub params: Vec<(String, String)>,
}

impl RunConfig {
    /// Starts from the command's defaults.
    pub fn with_defaults(command: &str, defaults: &[(&str, &str)]) -> Self {
        Self {
            command: command.to_string(),
            seed: 0,
            params: defaults
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    /// Applies one override. `seed` and `command` are accepted here so that
    /// a manifest can be fed back in as a config file.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_value("seed", value)?,
            "command" if value == self.command => {}
            "command" => {
                return Err(Error::Config(format!(
                    "config file is for '{value}', not '{}'",
                    self.command
                )))
            }
            _ => {
                let Some(pos) = self.params.iter().position(|(k, _)| k == key) else {
                    let known: Vec<&str> = self.params.iter().map(|(k, _)| k.as_str()).collect();
                    return Err(Error::Config(format!(
                        "unknown key '{key}' for '{}' (known: seed, {})",
                        self.command,
                        known.join(", ")
                    )));
                };
                self.params[pos].1 = value.to_string();
            }
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (k, v) in parse_kv(&text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.params
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .unwrap_or_else(|| panic!("'{key}' is not a declared key of '{}'", self.command))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        parse_value(key, self.get(key))
    }

    /// Comma-separated list value.
    pub fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let raw = self.get(key);
        let items = raw
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| parse_value(key, s))
            .collect::<Result<Vec<T>>>()?;
        if items.is_empty() {
            return Err(Error::Config(format!("'{key}' needs at least one value")));
        }
        Ok(items)
    }

    /// `key=value` text that [`RunConfig::apply_file`] reads back.
    pub fn manifest(&self) -> String {
        let mut pairs = vec![
            ("command".to_string(), self.command.clone()),
            ("seed".to_string(), self.seed.to_string()),
        ];
        pairs.extend(self.params.iter().cloned());
        render_kv(&pairs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> RunConfig {
        RunConfig::with_defaults("prop3", &[("N", "64"), ("d", "16")])
    }

    #[test]
    fn overrides_replace_defaults() {
        let mut c = cfg();
        c.set("d", "4").unwrap();
        c.set("seed", "9").unwrap();
        assert_eq!(c.get("d"), "4");
        assert_eq!(c.seed, 9);
        assert_eq!(c.parse::<usize>("N").unwrap(), 64);
    }

    #[test]
    fn unknown_keys_and_foreign_manifests_are_rejected() {
        let mut c = cfg();
        assert!(matches!(c.set("sigma", "1"), Err(Error::Config(_))));
        assert!(c.set("command", "thm1").is_err());
        assert!(c.set("command", "prop3").is_ok());
        assert!(c.set("seed", "x").is_err());
    }

    #[test]
    fn manifest_round_trips() {
        let mut c = cfg();
        c.set("N", "8").unwrap();
        c.seed = 3;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.txt");
        std::fs::write(&path, c.manifest()).unwrap();
        let mut back = cfg();
        back.apply_file(&path).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn lists_split_on_commas() {
        let mut c = cfg();
        c.set("N", "1, 2,3").unwrap();
        assert_eq!(c.list::<usize>("N").unwrap(), vec![1, 2, 3]);
        c.set("N", "").unwrap();
        assert!(c.list::<usize>("N").is_err());
    }
}
