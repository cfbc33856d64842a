//! Flag values and the `key=value` config overlay.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use z2p_core::io::parse_key_values;

use crate::CliError;

/// Three comma-separated numbers, e.g. `0.8,0.2,0.1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Triple(pub [f64; 3]);

/// Two comma-separated numbers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pair(pub [f64; 2]);

/// Comma-separated positive counts.
#[derive(Clone, Debug, PartialEq)]
pub struct Counts(pub Vec<usize>);

fn numbers<T: FromStr>(s: &str, n: Option<usize>) -> Result<Vec<T>, String> {
    let values = s
        .split(',')
        .map(|t| t.trim().parse::<T>().map_err(|_| format!("{t:?} is not a number")))
        .collect::<Result<Vec<_>, _>>()?;
    match n {
        Some(n) if values.len() != n => Err(format!("expected {n} comma-separated values, got {}", values.len())),
        _ => Ok(values),
    }
}

impl FromStr for Triple {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let v = numbers::<f64>(s, Some(3))?;
        Ok(Triple([v[0], v[1], v[2]]))
    }
}

impl FromStr for Pair {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let v = numbers::<f64>(s, Some(2))?;
        Ok(Pair([v[0], v[1]]))
    }
}

impl FromStr for Counts {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let v = numbers::<usize>(s, None)?;
        if v.contains(&0) {
            return Err("counts must be positive".into());
        }
        Ok(Counts(v))
    }
}

/// Every key a config file may set, across all subcommands.
pub const KNOWN_KEYS: &[&str] = &[
    "count", "resolution", "seed", "noise", "out-dir", "points", "material",
    "data", "steps", "lr", "batch", "mode", "no-encoding", "out", "levels", "base-channels",
    "init-seed", "loss-csv", "checkpoint-every", "log-every",
    "model", "cloud", "color", "light", "camera", "fov",
    "repeat",
    "port", "host", "static-dir",
];

/// Values from a config file. Flags given on the command line win over
/// these, and these win over built-in defaults.
#[derive(Debug, Default)]
pub struct Overlay {
    source: Option<PathBuf>,
    values: BTreeMap<String, String>,
}

impl Overlay {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("config file {}: {e}", path.display())))?;
        let values = parse_key_values(&text)
            .map_err(|e| CliError::Usage(format!("config file {}: {e}", path.display())))?;
        if let Some(k) = values.keys().find(|k| !KNOWN_KEYS.contains(&k.as_str())) {
            return Err(CliError::Usage(format!("config file {}: unknown key {k:?}", path.display())));
        }
        Ok(Self {
            source: Some(path.to_path_buf()),
            values,
        })
    }

    pub fn from_pairs(pairs: &[(&str, &str)]) -> Self {
        Self {
            source: None,
            values: pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        let Some(raw) = self.values.get(key) else {
            return Ok(None);
        };
        raw.parse().map(Some).map_err(|e| {
            let origin = self
                .source
                .as_ref()
                .map_or_else(|| "config".to_string(), |p| p.display().to_string());
            CliError::Usage(format!("{origin}: {key}={raw}: {e}"))
        })
    }

    pub fn opt<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.parse(key),
        }
    }

    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        Ok(self.opt(flag, key)?.unwrap_or(default))
    }

    pub fn required<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        self.opt(flag, key)?
            .ok_or_else(|| CliError::Usage(format!("--{key} is required")))
    }

    /// A switch set on the command line, or `key=true` in the file.
    pub fn switch(&self, flag: bool, key: &str) -> Result<bool, CliError> {
        Ok(flag || self.parse::<bool>(key)?.unwrap_or(false))
    }
}
