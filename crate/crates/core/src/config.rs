//! Flat `key = value` configuration text.
//!
//! Blank lines and lines starting with `#` are ignored. Later assignments of
//! the same key replace earlier ones, which is how command-line overrides are
//! layered on top of a file.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::neuralnet::{ArchConfig, FrontEnd};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: Vec<(String, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            kv.set(k, v.trim());
        }
        Ok(kv)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get_str(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| Error::Config(format!("cannot parse value `{v}` for key `{key}`")))
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    pub fn get_list(&self, key: &str) -> Result<Option<Vec<usize>>> {
        self.get_str(key)
            .map(|v| {
                if v.is_empty() {
                    return Ok(Vec::new());
                }
                v.split(',')
                    .map(|p| {
                        p.trim()
                            .parse::<usize>()
                            .map_err(|_| Error::Config(format!("bad list element `{p}` for key `{key}`")))
                    })
                    .collect()
            })
            .transpose()
    }

    /// Fails on any key outside `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        for k in self.keys() {
            if !known.contains(&k) {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for KeyValues {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

pub(crate) fn join_list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub const ARCH_KEYS: &[&str] = &[
    "cnn_mode",
    "sample_rate",
    "chunk_len",
    "filters",
    "filter_len",
    "mel_low_hz",
    "mel_high_hz",
    "conv_channels",
    "conv_len",
    "pool",
    "rectify",
    "dense",
    "classes",
    "leaky_slope",
    "dropout",
    "seed",
];

pub fn arch_to_kv(a: &ArchConfig) -> KeyValues {
    let mut kv = KeyValues::default();
    kv.set("cnn_mode", a.front_end.as_str());
    kv.set("sample_rate", a.sample_rate);
    kv.set("chunk_len", a.chunk_len);
    kv.set("filters", a.filters);
    kv.set("filter_len", a.filter_len);
    kv.set("mel_low_hz", a.mel_low_hz);
    kv.set("mel_high_hz", a.mel_high_hz);
    kv.set("conv_channels", join_list(&a.conv_channels));
    kv.set("conv_len", a.conv_len);
    kv.set("pool", a.pool);
    kv.set("rectify", a.rectify);
    kv.set("dense", join_list(&a.dense));
    kv.set("classes", a.classes);
    kv.set("leaky_slope", a.leaky_slope);
    kv.set("dropout", a.dropout);
    kv.set("seed", a.seed);
    kv
}

pub fn arch_from_kv(kv: &KeyValues) -> Result<ArchConfig> {
    Ok(ArchConfig {
        front_end: FrontEnd::from_str(kv.get_str("cnn_mode").unwrap_or("sinc"))?,
        sample_rate: kv.require("sample_rate")?,
        chunk_len: kv.require("chunk_len")?,
        filters: kv.require("filters")?,
        filter_len: kv.require("filter_len")?,
        mel_low_hz: kv.get_or("mel_low_hz", 30.0)?,
        mel_high_hz: kv.require("mel_high_hz")?,
        conv_channels: kv.get_list("conv_channels")?.unwrap_or_default(),
        conv_len: kv.require("conv_len")?,
        pool: kv.require("pool")?,
        rectify: kv.get_or("rectify", false)?,
        dense: kv.get_list("dense")?.unwrap_or_default(),
        classes: kv.require("classes")?,
        leaky_slope: kv.get_or("leaky_slope", 0.2)?,
        dropout: kv.get_or("dropout", 0.0)?,
        seed: kv.get_or("seed", 0)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_override_and_print() {
        let mut kv = KeyValues::parse("# comment\nseed = 3\n\nlr=0.01\nseed = 4\n").unwrap();
        assert_eq!(kv.get::<u64>("seed").unwrap(), Some(4));
        kv.set("lr", 0.5);
        assert_eq!(kv.to_string(), "seed = 4\nlr = 0.5\n");
        assert!(KeyValues::parse("no equals sign").is_err());
        assert!(kv.get::<u64>("lr").is_err());
        assert!(kv.check_known(&["seed"]).is_err());
    }

    #[test]
    fn arch_round_trip() {
        let a = ArchConfig::reference(10);
        assert_eq!(arch_from_kv(&KeyValues::parse(&arch_to_kv(&a).to_string()).unwrap()).unwrap(), a);
    }
}
