//! Line-oriented `key = value` configuration with `#` comments and dotted
//! keys (`train.K = 8`).
//!
//! Reads are typed and range-checked, and every key a command consumes is
//! recorded together with its final value, whether it came from the file, a
//! flag override, or a default. [`Config::finish`] returns that resolved echo
//! for the run manifest and rejects any key the command never consumed, so a
//! typo cannot silently fall back to a default. Manifests themselves parse as
//! configs: their metadata lines are comments.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {msg}")]
    Unreadable { path: String, msg: String },
    #[error("config line {line}: expected `key = value`, got `{text}`")]
    Malformed { line: usize, text: String },
    #[error("config line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("key `{key}`: cannot parse `{value}` as {want}")]
    BadValue {
        key: String,
        value: String,
        want: &'static str,
    },
    #[error("key `{key}`: {value} outside legal range {range}")]
    OutOfRange {
        key: String,
        value: String,
        range: String,
    },
    #[error("key `{key}`: `{value}` is not one of {allowed}")]
    BadChoice {
        key: String,
        value: String,
        allowed: String,
    },
    #[error("key `{key}` is required but missing")]
    Missing { key: String },
    #[error("unknown key `{key}` (config line {line})")]
    Unknown { key: String, line: usize },
}

/// A loaded configuration plus the record of what the command resolved.
pub struct Config {
    values: BTreeMap<String, (usize, String)>,
    seed_override: Option<u64>,
    resolved: RefCell<BTreeMap<String, String>>,
}

impl Config {
    pub fn empty() -> Self {
        Config {
            values: BTreeMap::new(),
            seed_override: None,
            resolved: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Unreadable {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut values = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let content = content.trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Malformed {
                line,
                text: content.to_string(),
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if values.insert(key.clone(), (line, value)).is_some() {
                return Err(ConfigError::Duplicate { line, key });
            }
        }
        Ok(Config {
            values,
            seed_override: None,
            resolved: RefCell::new(BTreeMap::new()),
        })
    }

    /// `--seed` flag: overrides every `*.seed` key a command consumes.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed_override = Some(seed);
    }

    fn raw(&self, key: &str) -> Option<String> {
        if key.ends_with(".seed") {
            if let Some(seed) = self.seed_override {
                return Some(seed.to_string());
            }
        }
        self.values.get(key).map(|(_, v)| v.clone())
    }

    fn record(&self, key: &str, value: impl Display) {
        self.resolved
            .borrow_mut()
            .insert(key.to_string(), value.to_string());
    }

    fn parse_value<T: FromStr>(key: &str, value: &str, want: &'static str) -> Result<T, ConfigError> {
        value.parse().map_err(|_| ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            want,
        })
    }

    pub fn get_usize(
        &self,
        key: &str,
        default: usize,
        lo: usize,
        hi: usize,
    ) -> Result<usize, ConfigError> {
        let v = match self.raw(key) {
            Some(raw) => Self::parse_value(key, &raw, "an integer")?,
            None => default,
        };
        if !(lo..=hi).contains(&v) {
            return Err(ConfigError::OutOfRange {
                key: key.to_string(),
                value: v.to_string(),
                range: format!("{lo}..={hi}"),
            });
        }
        self.record(key, v);
        Ok(v)
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64, ConfigError> {
        let v = match self.raw(key) {
            Some(raw) => Self::parse_value(key, &raw, "an unsigned integer")?,
            None => default,
        };
        self.record(key, v);
        Ok(v)
    }

    pub fn get_f64(&self, key: &str, default: f64, lo: f64, hi: f64) -> Result<f64, ConfigError> {
        let v: f64 = match self.raw(key) {
            Some(raw) => Self::parse_value(key, &raw, "a number")?,
            None => default,
        };
        if !v.is_finite() || v < lo || v > hi {
            return Err(ConfigError::OutOfRange {
                key: key.to_string(),
                value: format!("{v}"),
                range: format!("[{lo}, {hi}]"),
            });
        }
        self.record(key, v);
        Ok(v)
    }

    pub fn get_choice(
        &self,
        key: &str,
        default: &str,
        allowed: &[&str],
    ) -> Result<String, ConfigError> {
        let v = self.raw(key).unwrap_or_else(|| default.to_string());
        if !allowed.contains(&v.as_str()) {
            return Err(ConfigError::BadChoice {
                key: key.to_string(),
                value: v,
                allowed: allowed.join("|"),
            });
        }
        self.record(key, &v);
        Ok(v)
    }

    pub fn get_required(&self, key: &str) -> Result<String, ConfigError> {
        let v = self.raw(key).ok_or_else(|| ConfigError::Missing {
            key: key.to_string(),
        })?;
        self.record(key, &v);
        Ok(v)
    }

    pub fn get_list_usize(
        &self,
        key: &str,
        default: &[usize],
        lo: usize,
        hi: usize,
    ) -> Result<Vec<usize>, ConfigError> {
        let list = match self.raw(key) {
            Some(raw) => raw
                .split(',')
                .map(|part| Self::parse_value(key, part.trim(), "an integer list"))
                .collect::<Result<Vec<usize>, _>>()?,
            None => default.to_vec(),
        };
        for &v in &list {
            if !(lo..=hi).contains(&v) {
                return Err(ConfigError::OutOfRange {
                    key: key.to_string(),
                    value: v.to_string(),
                    range: format!("{lo}..={hi}"),
                });
            }
        }
        self.record(
            key,
            list.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
        );
        Ok(list)
    }

    pub fn get_list_f64(
        &self,
        key: &str,
        default: &[f64],
        lo: f64,
        hi: f64,
    ) -> Result<Vec<f64>, ConfigError> {
        let list = match self.raw(key) {
            Some(raw) => raw
                .split(',')
                .map(|part| Self::parse_value(key, part.trim(), "a number list"))
                .collect::<Result<Vec<f64>, _>>()?,
            None => default.to_vec(),
        };
        for &v in &list {
            if !v.is_finite() || v < lo || v > hi {
                return Err(ConfigError::OutOfRange {
                    key: key.to_string(),
                    value: format!("{v}"),
                    range: format!("[{lo}, {hi}]"),
                });
            }
        }
        self.record(
            key,
            list.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(","),
        );
        Ok(list)
    }

    /// Ends the read phase: rejects unconsumed keys, returns the full
    /// resolved `key = value` echo (explicit settings and applied defaults).
    pub fn finish(self) -> Result<Vec<(String, String)>, ConfigError> {
        let resolved = self.resolved.into_inner();
        for (key, (line, _)) in &self.values {
            if !resolved.contains_key(key) {
                return Err(ConfigError::Unknown {
                    key: key.clone(),
                    line: *line,
                });
            }
        }
        Ok(resolved.into_iter().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_dotted_keys_comments_and_blank_lines() {
        let cfg = Config::parse("# a comment\n\ntrain.K = 8  # trailing\nsuite.family = parity\n")
            .unwrap();
        assert_eq!(cfg.get_usize("train.K", 1, 1, 64).unwrap(), 8);
        assert_eq!(
            cfg.get_choice("suite.family", "modchain", &["modchain", "parity"])
                .unwrap(),
            "parity"
        );
        let echo = cfg.finish().unwrap();
        assert_eq!(
            echo,
            vec![
                ("suite.family".to_string(), "parity".to_string()),
                ("train.K".to_string(), "8".to_string()),
            ]
        );
    }

    #[test]
    fn defaults_are_recorded_in_the_echo() {
        let cfg = Config::empty();
        cfg.get_f64("train.learning_rate", 2.0, 0.0, 100.0).unwrap();
        let echo = cfg.finish().unwrap();
        assert_eq!(echo[0].0, "train.learning_rate");
        assert_eq!(echo[0].1, "2");
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_line() {
        let cfg = Config::parse("train.KK = 8\n").unwrap();
        match cfg.finish() {
            Err(ConfigError::Unknown { key, line }) => {
                assert_eq!(key, "train.KK");
                assert_eq!(line, 1);
            }
            other => panic!("expected unknown-key error, got {other:?}"),
        }
    }

    #[test]
    fn range_violations_name_key_and_range() {
        let cfg = Config::parse("train.K = 0\n").unwrap();
        let msg = cfg.get_usize("train.K", 8, 1, 64).unwrap_err().to_string();
        assert!(msg.contains("train.K") && msg.contains("1..=64"), "{msg}");
    }

    #[test]
    fn seed_flag_overrides_every_seed_key() {
        let mut cfg = Config::parse("train.seed = 1\n").unwrap();
        cfg.override_seed(42);
        assert_eq!(cfg.get_u64("train.seed", 0).unwrap(), 42);
        assert_eq!(cfg.get_u64("suite.seed", 7).unwrap(), 42);
    }

    #[test]
    fn malformed_and_duplicate_lines_error_with_position() {
        assert!(matches!(
            Config::parse("not a pair\n"),
            Err(ConfigError::Malformed { line: 1, .. })
        ));
        assert!(matches!(
            Config::parse("a.b = 1\na.b = 2\n"),
            Err(ConfigError::Duplicate { line: 2, .. })
        ));
    }

    #[test]
    fn lists_parse_and_echo_canonically() {
        let cfg = Config::parse("sweep.k_list = 1, 2,4\n").unwrap();
        assert_eq!(
            cfg.get_list_usize("sweep.k_list", &[1], 1, 8).unwrap(),
            vec![1, 2, 4]
        );
        assert_eq!(cfg.finish().unwrap()[0].1, "1,2,4");
    }
}
