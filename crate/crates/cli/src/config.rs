//! Optional TOML config file. Every field is optional; command-line flags
//! take precedence over the file, and the file over built-in defaults.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vfarb_core::{PriceSchema, StorageParams};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StorageSection {
    pub power_mw: Option<f64>,
    pub energy_mwh: Option<f64>,
    pub eta_charge: Option<f64>,
    pub eta_discharge: Option<f64>,
    pub marginal_cost: Option<f64>,
    pub soc0: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub setting: Option<u8>,
    pub seeds: Option<usize>,
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub storage: StorageSection,
    pub train: TrainSection,
    pub schema: Option<PriceSchema>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        toml::from_str(&text).map_err(|e| ConfigError::Parse { path: path.into(), msg: e.to_string() })
    }

    #[cfg(test)]
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Overlays `flags` onto this file config.
    pub fn storage_with(&self, flags: &StorageSection) -> StorageSection {
        let f = &self.storage;
        StorageSection {
            power_mw: flags.power_mw.or(f.power_mw),
            energy_mwh: flags.energy_mwh.or(f.energy_mwh),
            eta_charge: flags.eta_charge.or(f.eta_charge),
            eta_discharge: flags.eta_discharge.or(f.eta_discharge),
            marginal_cost: flags.marginal_cost.or(f.marginal_cost),
            soc0: flags.soc0.or(f.soc0),
        }
    }
}

impl StorageSection {
    /// Asset parameters for prices with `period_hours`-long periods.
    pub fn params(&self, period_hours: f64) -> Result<StorageParams, ConfigError> {
        let d = StorageParams::default();
        StorageParams::new(
            self.power_mw.unwrap_or(d.power_mw()),
            self.energy_mwh.unwrap_or(d.energy_mwh()),
            self.eta_charge.unwrap_or(d.eta_charge()),
            self.eta_discharge.unwrap_or(d.eta_discharge()),
            self.marginal_cost.unwrap_or(d.marginal_cost()),
            period_hours,
        )
        .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn soc0(&self, params: &StorageParams) -> Result<f64, ConfigError> {
        let soc0 = self.soc0.unwrap_or(0.0);
        if !(0.0..=params.energy_mwh()).contains(&soc0) {
            return Err(ConfigError::Invalid(format!("initial SoC {soc0} outside [0, {}]", params.energy_mwh())));
        }
        Ok(soc0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_round_trip() {
        let c = RunConfig {
            storage: StorageSection { power_mw: Some(0.25), marginal_cost: Some(0.0), ..Default::default() },
            train: TrainSection { setting: Some(2), seeds: Some(3), epochs: None },
            schema: Some(PriceSchema {
                zone: Some("NYC".into()),
                zone_column: Some("Name".into()),
                ..Default::default()
            }),
        };
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn flags_override_file() {
        let file = RunConfig {
            storage: StorageSection { power_mw: Some(0.25), energy_mwh: Some(2.0), ..Default::default() },
            ..Default::default()
        };
        let flags = StorageSection { power_mw: Some(1.0), ..Default::default() };
        let merged = file.storage_with(&flags);
        let p = merged.params(1.0 / 12.0).unwrap();
        assert_eq!(p.power_mw(), 1.0);
        assert_eq!(p.energy_mwh(), 2.0);
        assert_eq!(p.eta_charge(), 0.9);
        assert_eq!(p.marginal_cost(), 10.0);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("[storage]\npower = 1.0\n").is_err());
    }

    #[test]
    fn full_file_parses() {
        let text = r#"
[storage]
power_mw = 0.5
energy_mwh = 1.0
eta_charge = 0.9
eta_discharge = 0.9
marginal_cost = 10.0
soc0 = 0.0

[train]
setting = 3
seeds = 10
epochs = 10

[schema]
timestamp_column = "timestamp"
price_column = "price"
timestamp_format = "%Y-%m-%d %H:%M:%S"
zone_column = "zone"
zone = "NYC"
start = "2019-01-01"
end = "2020-01-01"
period_minutes = 5
"#;
        let c: RunConfig = toml::from_str(text).unwrap();
        let schema = c.schema.unwrap();
        assert_eq!(schema.start.unwrap().to_string(), "2019-01-01");
        assert_eq!(c.train.seeds, Some(10));
        assert_eq!(c.storage.soc0, Some(0.0));
    }
}
