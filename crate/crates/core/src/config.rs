//! Layered configuration: command-line flag > environment > config file >
//! built-in default. Every resolved value remembers where it came from.
//!
//! Config files are flat `key = value` lines using the flag names (`tau0`,
//! `t-base`, `penalty-scale`, ...). `#` starts a comment.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scoring::{HandoverParams, SdAggregation};
use crate::steering::{PenaltyShape, SteeringConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Default,
    File,
    Env,
    Flag,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Default => "default",
            Source::File => "file",
            Source::Env => "env",
            Source::Flag => "flag",
        })
    }
}

/// Steering keys and the environment variables that may set them.
pub const STEERING_KEYS: [(&str, &str); 9] = [
    ("tau0", "HELIX_TAU0"),
    ("gamma", "HELIX_GAMMA"),
    ("t-base", "HELIX_TBASE"),
    ("kappa", "HELIX_KAPPA"),
    ("t-c", "HELIX_TC"),
    ("penalty-scale", "HELIX_PENALTY_SCALE"),
    ("sd-agg", "HELIX_SD_AGG"),
    ("penalty-shape", "HELIX_PENALTY_SHAPE"),
    ("layers", "HELIX_LAYERS"),
];

fn normalize_key(k: &str) -> String {
    k.trim().trim_start_matches("--").replace('_', "-").to_ascii_lowercase()
}

pub fn parse_config_file(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        let key = normalize_key(k);
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        let v = v.trim().trim_matches('"');
        map.insert(key, v.to_owned());
    }
    Ok(map)
}

#[derive(Debug, Clone, Default)]
pub struct ConfigLayers {
    flags: BTreeMap<String, String>,
    env: BTreeMap<String, String>,
    file: BTreeMap<String, String>,
}

impl ConfigLayers {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn flag(mut self, key: &str, value: impl ToString) -> Self {
        self.flags.insert(normalize_key(key), value.to_string());
        self
    }

    pub fn set_flag(&mut self, key: &str, value: impl ToString) {
        self.flags.insert(normalize_key(key), value.to_string());
    }

    pub fn with_file(mut self, entries: BTreeMap<String, String>) -> Self {
        self.file = entries;
        self
    }

    /// Picks up the `HELIX_*` variables for the steering keys via `lookup`.
    pub fn with_env<F: Fn(&str) -> Option<String>>(mut self, lookup: F) -> Self {
        for (key, var) in STEERING_KEYS {
            if let Some(v) = lookup(var) {
                if !v.trim().is_empty() {
                    self.env.insert(key.to_owned(), v);
                }
            }
        }
        self
    }

    pub fn with_process_env(self) -> Self {
        self.with_env(|k| std::env::var(k).ok())
    }

    pub fn get(&self, key: &str) -> Option<(&str, Source)> {
        let key = normalize_key(key);
        if let Some(v) = self.flags.get(&key) {
            return Some((v, Source::Flag));
        }
        if let Some(v) = self.env.get(&key) {
            return Some((v, Source::Env));
        }
        self.file.get(&key).map(|v| (v.as_str(), Source::File))
    }

    /// Parses `key` if set anywhere; otherwise returns `default`.
    pub fn resolve<T>(&self, key: &str, default: T) -> Result<Resolved<T>>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        match self.get(key) {
            None => Ok(Resolved {
                value: default,
                source: Source::Default,
            }),
            Some((raw, source)) => raw
                .trim()
                .parse::<T>()
                .map(|value| Resolved { value, source })
                .map_err(|e| Error::Config(format!("{key} = {raw:?} ({source}): {e}"))),
        }
    }

    /// Keys present in the file that are not in `known`.
    pub fn unknown_file_keys<'a>(&'a self, known: &'a [&str]) -> impl Iterator<Item = &'a str> {
        self.file
            .keys()
            .map(String::as_str)
            .filter(|k| !known.contains(k))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Resolved<T> {
    pub value: T,
    pub source: Source,
}

/// Comma- or space-separated list of layer ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerList(pub Vec<u32>);

impl FromStr for LayerList {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let ids = s
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|p| !p.is_empty())
            .map(|p| p.parse::<u32>().map_err(|e| format!("{p:?}: {e}")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if ids.is_empty() {
            return Err("empty layer list".into());
        }
        Ok(LayerList(ids))
    }
}

impl fmt::Display for LayerList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(u32::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

/// A steering configuration plus the source of every field.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedSteering {
    pub config: SteeringConfig,
    pub provenance: BTreeMap<&'static str, (String, Source)>,
}

impl ResolvedSteering {
    /// `key = value (source)` lines in a stable order.
    pub fn header_lines(&self) -> Vec<String> {
        STEERING_KEYS
            .iter()
            .filter_map(|(k, _)| self.provenance.get(k).map(|(v, s)| format!("{k} = {v} ({s})")))
            .collect()
    }
}

pub fn resolve_steering(layers: &ConfigLayers) -> Result<ResolvedSteering> {
    let d = SteeringConfig::default();
    let mut provenance = BTreeMap::new();
    macro_rules! take {
        ($key:literal, $default:expr) => {{
            let r = layers.resolve($key, $default)?;
            provenance.insert($key, (r.value.to_string(), r.source));
            r.value
        }};
    }
    let tau0: f64 = take!("tau0", d.tau0);
    let gamma: f64 = take!("gamma", d.gamma);
    let t_base: f64 = take!("t-base", d.t_base);
    let kappa: f64 = take!("kappa", d.handover.kappa);
    let t_c: f64 = take!("t-c", d.handover.t_c);
    let penalty_scale: f64 = take!("penalty-scale", d.penalty_scale);
    let sd_aggregation: SdAggregation = take!("sd-agg", d.sd_aggregation);
    let penalty_shape: PenaltyShape = take!("penalty-shape", d.penalty_shape);
    let LayerList(steering_layers) = take!("layers", LayerList(d.steering_layers.clone()));
    let config = SteeringConfig {
        tau0,
        gamma,
        t_base,
        penalty_scale,
        handover: HandoverParams { kappa, t_c },
        sd_aggregation,
        penalty_shape,
        steering_layers,
    };
    config.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(ResolvedSteering { config, provenance })
}
