use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use nav_core::collect::EnvChoice;
use nav_core::nets::{Arch, Branch, NetConfig};

use crate::CliError;

/// Every tunable of every subcommand. Resolved from the defaults, then a
/// flat JSON config file, then command-line flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub seed: u64,
    /// Subcommand default when unset: `mixed` for data and runs,
    /// `normal_city` for the gateway.
    pub env: Option<EnvChoice>,
    pub records: usize,
    pub dr_fraction: f64,
    pub arch: Arch,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub split: f64,
    pub points: usize,
    pub data: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub all: bool,
    pub episodes: usize,
    pub steps: usize,
    pub dt: f64,
    pub index: usize,
    pub branch: Branch,
    pub bind: String,
    pub tick_hz: f64,
    pub max_ticks: Option<u64>,
    pub record: PathBuf,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            seed: 0,
            env: None,
            records: 1000,
            dr_fraction: 0.45,
            arch: Arch::Nmfnet,
            epochs: 20,
            lr: 0.01,
            momentum: 0.9,
            batch: 8,
            split: 0.7,
            points: 1024,
            data: None,
            weights: None,
            out: None,
            all: false,
            episodes: 10,
            steps: 500,
            dt: 0.1,
            index: 0,
            branch: Branch::Rgb,
            bind: nav_gateway::DEFAULT_BIND.to_string(),
            tick_hz: 10.0,
            max_ticks: None,
            record: PathBuf::from("session.navd"),
        }
    }
}

impl Settings {
    /// Layers `config` (a JSON object) and then `flags` over the defaults.
    /// Keys are the long flag names with underscores.
    pub fn resolve(config: Option<&Path>, flags: Value) -> Result<Self, CliError> {
        let Value::Object(mut merged) = serde_json::to_value(Settings::default())? else {
            unreachable!("settings serialize to an object")
        };
        if let Some(path) = config {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
            let value: Value = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
            let Value::Object(file) = value else {
                return Err(CliError::Usage(format!("config {}: expected a JSON object", path.display())));
            };
            overlay(&mut merged, file, "config")?;
        }
        if let Value::Object(flags) = flags {
            overlay(&mut merged, flags, "flag")?;
        }
        serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Usage(format!("invalid setting: {e}")))
    }

    pub fn net(&self) -> NetConfig {
        NetConfig {
            points: self.points,
            ..NetConfig::default()
        }
    }

    pub fn env_or(&self, default: EnvChoice) -> EnvChoice {
        self.env.unwrap_or(default)
    }

    pub fn require<'a>(&self, value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
        value.as_deref().ok_or_else(|| CliError::Usage(format!("--{flag} is required")))
    }

    /// Like [`Settings::require`], for files that must already exist.
    pub fn input<'a>(&self, value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
        let path = self.require(value, flag)?;
        if !path.is_file() {
            return Err(CliError::Usage(format!("--{flag}: no such file {}", path.display())));
        }
        Ok(path)
    }
}

fn overlay(into: &mut Map<String, Value>, from: Map<String, Value>, source: &str) -> Result<(), CliError> {
    for (k, v) in from {
        let key = k.replace('-', "_");
        if !into.contains_key(&key) {
            return Err(CliError::Usage(format!("unknown {source} key {k:?}")));
        }
        into.insert(key, v);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn flags_beat_config_beat_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"epochs": 3, "lr": 0.5, "env": "cave"}"#).unwrap();
        let s = Settings::resolve(Some(&path), json!({"lr": 0.02})).unwrap();
        assert_eq!(s.epochs, 3);
        assert_eq!(s.lr, 0.02);
        assert_eq!(s.env, Some(EnvChoice::One(nav_core::world::EnvType::Cave)));
        assert_eq!(s.batch, 8);
    }

    #[test]
    fn unknown_and_mistyped_keys_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"epoch": 3}"#).unwrap();
        assert!(matches!(Settings::resolve(Some(&path), json!({})), Err(CliError::Usage(_))));
        assert!(matches!(Settings::resolve(None, json!({"lr": "fast"})), Err(CliError::Usage(_))));
        assert!(matches!(Settings::resolve(None, json!({"env": "moon"})), Err(CliError::Usage(_))));
    }

    #[test]
    fn defaults_round_trip() {
        assert_eq!(Settings::resolve(None, json!({})).unwrap(), Settings::default());
    }
}
