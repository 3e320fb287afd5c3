//! `key=value` configuration files.
//!
//! Grammar: one `key=value` per line, `#` starts a comment, blank lines are
//! ignored, an empty value means "use the default". Each typed config lists
//! the keys it understands; anything else is rejected with its line number.
//! Overrides (e.g. from the command line) replace file values and are
//! reported as line 0.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::types::{FrameStack, PriorConfig, PROBABILITY_TOLERANCE};

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigEntries {
    entries: BTreeMap<String, Entry>,
}

impl ConfigEntries {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let content = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(Error::config(content, line, "expected `key=value`"));
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::config("", line, "empty key"));
            }
            if let Some(prev) = entries.get(key).map(|e: &Entry| e.line) {
                return Err(Error::config(
                    key,
                    line,
                    format!("duplicate key (first set on line {prev})"),
                ));
            }
            entries.insert(
                key.to_string(),
                Entry {
                    value: value.trim().to_string(),
                    line,
                },
            );
        }
        Ok(Self { entries })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    /// Apply a `key=value` override; overrides win over file entries.
    pub fn set_override(&mut self, assignment: &str) -> Result<()> {
        let Some((key, value)) = assignment.split_once('=') else {
            return Err(Error::config(assignment, 0, "override must be `key=value`"));
        };
        self.set(key.trim(), value.trim());
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(
            key.to_string(),
            Entry {
                value: value.to_string(),
                line: 0,
            },
        );
    }

    pub fn reject_unknown(&self, allowed: &[&str]) -> Result<()> {
        for (key, entry) in &self.entries {
            if !allowed.contains(&key.as_str()) {
                return Err(Error::config(key, entry.line, "unknown key"));
            }
        }
        Ok(())
    }

    /// Non-empty raw value of `key`, if present.
    pub fn raw(&self, key: &str) -> Option<(&str, usize)> {
        self.entries
            .get(key)
            .filter(|e| !e.value.is_empty())
            .map(|e| (e.value.as_str(), e.line))
    }

    pub fn line_of(&self, key: &str) -> usize {
        self.entries.get(key).map_or(0, |e| e.line)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some((v, line)) => v
                .parse::<T>()
                .map(Some)
                .map_err(|_| Error::config(key, line, format!("cannot parse value `{v}`"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .ok_or_else(|| Error::config(key, self.line_of(key), "missing required key"))
    }

    /// Finite real value.
    pub fn get_f64(&self, key: &str) -> Result<Option<f64>> {
        match self.get::<f64>(key)? {
            Some(v) if !v.is_finite() => Err(Error::config(
                key,
                self.line_of(key),
                "value must be finite",
            )),
            other => Ok(other),
        }
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        let Some((v, line)) = self.raw(key) else {
            return Ok(None);
        };
        v.split(',')
            .map(|item| {
                item.trim().parse::<T>().map_err(|_| {
                    Error::config(key, line, format!("cannot parse list item `{item}`"))
                })
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    pub fn get_bool(&self, key: &str) -> Result<Option<bool>> {
        let Some((v, line)) = self.raw(key) else {
            return Ok(None);
        };
        match v {
            "true" | "1" | "yes" => Ok(Some(true)),
            "false" | "0" | "no" => Ok(Some(false)),
            _ => Err(Error::config(
                key,
                line,
                format!("expected a boolean, got `{v}`"),
            )),
        }
    }

    pub fn invalid(&self, key: &str, message: impl Into<String>) -> Error {
        Error::config(key, self.line_of(key), message)
    }
}

/// A typed configuration section.
pub trait FromConfig: Sized {
    const KEYS: &'static [&'static str];

    fn from_entries(entries: &ConfigEntries) -> Result<Self>;
}

/// Parse a file into one typed config, rejecting keys it does not know.
pub fn parse_config<T: FromConfig>(path: &Path) -> Result<T> {
    let entries = ConfigEntries::from_path(path)?;
    entries.reject_unknown(T::KEYS)?;
    T::from_entries(&entries)
}

pub fn parse_config_str<T: FromConfig>(text: &str) -> Result<T> {
    let entries = ConfigEntries::parse_str(text)?;
    entries.reject_unknown(T::KEYS)?;
    T::from_entries(&entries)
}

pub const DEFAULT_CLASS_SIGMA: f64 = 1e-5;

/// Prior settings as written in a config file. The noise variance may be
/// left out, in which case it is estimated from the data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorSpec {
    pub rho0: f64,
    pub rho1: f64,
    pub sigma0_sq: f64,
    pub sigma1_sq: f64,
    pub p0: f64,
    pub p1: f64,
    pub noise_sigma_sq: Option<f64>,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            rho0: 0.3,
            rho1: 0.1,
            sigma0_sq: DEFAULT_CLASS_SIGMA * DEFAULT_CLASS_SIGMA,
            sigma1_sq: DEFAULT_CLASS_SIGMA * DEFAULT_CLASS_SIGMA,
            p0: 0.5,
            p1: 0.5,
            noise_sigma_sq: None,
        }
    }
}

impl PriorSpec {
    pub fn with_noise(&self, noise_sigma_sq: f64) -> Result<PriorConfig> {
        PriorConfig::new(
            self.rho0,
            self.rho1,
            self.sigma0_sq,
            self.sigma1_sq,
            self.p0,
            self.p1,
            noise_sigma_sq,
        )
    }

    /// Concrete prior, estimating the noise variance from `stack` when the
    /// config did not fix it.
    pub fn resolve(&self, stack: &FrameStack) -> Result<PriorConfig> {
        match self.noise_sigma_sq {
            Some(v) => self.with_noise(v),
            None => self.with_noise(crate::altmin::estimate_noise_variance(stack)?),
        }
    }
}

impl FromConfig for PriorSpec {
    const KEYS: &'static [&'static str] = &[
        "rho0",
        "rho1",
        "sigma0",
        "sigma1",
        "p0",
        "p1",
        "noise_sigma_sq",
    ];

    fn from_entries(e: &ConfigEntries) -> Result<Self> {
        let rho0: f64 = e.require("rho0")?;
        let rho1: f64 = e.require("rho1")?;
        for (key, v) in [("rho0", rho0), ("rho1", rho1)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(e.invalid(key, "class mean must be finite and non-negative"));
            }
        }
        if rho0 == rho1 {
            return Err(e.invalid("rho1", "rho1 must differ from rho0"));
        }
        let sigma0 = e.get_f64("sigma0")?.unwrap_or(DEFAULT_CLASS_SIGMA);
        let sigma1 = e.get_f64("sigma1")?.unwrap_or(DEFAULT_CLASS_SIGMA);
        for (key, v) in [("sigma0", sigma0), ("sigma1", sigma1)] {
            if !(v > 0.0) {
                return Err(e.invalid(key, "class standard deviation must be positive"));
            }
        }
        let in_unit = |key: &str, p: f64| {
            if p > 0.0 && p < 1.0 {
                Ok(p)
            } else {
                Err(e.invalid(key, "probability must lie in (0, 1)"))
            }
        };
        let (p0, p1) = match (e.get_f64("p0")?, e.get_f64("p1")?) {
            (None, None) => (0.5, 0.5),
            (Some(p0), None) => (in_unit("p0", p0)?, 1.0 - p0),
            (None, Some(p1)) => (1.0 - in_unit("p1", p1)?, p1),
            (Some(p0), Some(p1)) => {
                in_unit("p0", p0)?;
                in_unit("p1", p1)?;
                if (p0 + p1 - 1.0).abs() > PROBABILITY_TOLERANCE {
                    return Err(e.invalid("p1", format!("p0 + p1 must equal 1, got {}", p0 + p1)));
                }
                (p0, p1)
            }
        };
        let noise_sigma_sq = e.get_f64("noise_sigma_sq")?;
        if let Some(v) = noise_sigma_sq {
            if !(v > 0.0) {
                return Err(e.invalid("noise_sigma_sq", "noise variance must be positive"));
            }
        }
        Ok(Self {
            rho0,
            rho1,
            sigma0_sq: sigma0 * sigma0,
            sigma1_sq: sigma1 * sigma1,
            p0,
            p1,
            noise_sigma_sq,
        })
    }
}
