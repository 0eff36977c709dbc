//! TOML fleet files.
//!
//! ```toml
//! schema_version = 1
//! K = 2
//! M = 1
//! variant = "generate_at_will"
//!
//! [[devices]]
//! L = 4
//! lambda = 0.7
//! cap_d = 10
//! cap_r = 10
//!
//! [[devices]]
//! L = 4
//! lambda = 0.8
//! cap_d = 10
//! cap_r = 10
//! ```
//!
//! A device list shorter than `K` is repeated cyclically. Optional
//! `[solver]`, `[simulation]`, `[base]`, `[sweep]` and `[structure_map]`
//! tables configure the experiment front-end.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::SolverConfig;
use crate::model::{DeviceParams, ModelVariant, SystemConfig};
use crate::sim::SimConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// One of `lambda`, `lambda.<k>`, `K`, `M`, `rho`, `L`.
    pub parameter: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapPolicy {
    #[default]
    Optimal,
    Suboptimal,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StructureMapSpec {
    pub policy: MapPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseSpec {
    /// Explicit scheduling marginals; defaults to the proportional rule.
    pub p_u: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetFile {
    pub schema_version: u32,
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(rename = "M")]
    pub m: usize,
    pub variant: ModelVariant,
    pub devices: Vec<DeviceParams>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub simulation: SimConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<BaseSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structure_map: Option<StructureMapSpec>,
}

impl FleetFile {
    pub fn parse(text: &str) -> Result<Self> {
        let file: FleetFile = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        if file.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                file.schema_version
            )));
        }
        if file.devices.is_empty() {
            return Err(Error::InvalidConfig("at least one [[devices]] entry is required".into()));
        }
        if let Some(k) = file.k {
            if k == 0 {
                return Err(Error::InvalidConfig("K must be at least 1".into()));
            }
            if k < file.devices.len() {
                return Err(Error::InvalidConfig(format!("K = {k} but {} devices are listed", file.devices.len())));
            }
        }
        if let Some(s) = &file.sweep {
            if s.values.is_empty() || s.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidConfig("sweep values must be a non-empty list of numbers".into()));
            }
        }
        file.system_config()?;
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn device_count(&self) -> usize {
        self.k.unwrap_or(self.devices.len())
    }

    /// Device list expanded to `K` entries.
    pub fn expanded_devices(&self) -> Vec<DeviceParams> {
        self.devices.iter().cycle().take(self.device_count()).cloned().collect()
    }

    pub fn system_config(&self) -> Result<SystemConfig> {
        SystemConfig::new(self.expanded_devices(), self.m, self.variant)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }
}
