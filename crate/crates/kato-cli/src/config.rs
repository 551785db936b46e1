//! Experiment configs: one TOML file per run, holding the scenario (inline
//! or by reference to a scenario file), exactly one command table, and the
//! command's assertion block. Everything is validated before any
//! computation starts, and the raw bytes are hashed into the manifest so
//! a result can always be traced back to its inputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::scenario::{Scenario, ScenarioConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {source}")]
    Parse {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error("config is missing the [{0}] table")]
    MissingSection(&'static str),
    #[error("config carries unexpected table [{0}]")]
    UnknownSection(String),
    #[error("invalid parameter: {0}")]
    Invalid(String),
}

/// Scenario slot: either an inline table or a path to a scenario file,
/// resolved relative to the config file.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ScenarioSource {
    Reference(String),
    Inline(ScenarioConfig),
}

/// A parsed config file, scenario resolved and bytes hashed.
pub struct LoadedConfig<T> {
    pub section: T,
    pub scenario_config: ScenarioConfig,
    pub sha256: String,
}

impl<T> LoadedConfig<T> {
    pub fn scenario(&self) -> Result<Scenario, ConfigError> {
        self.scenario_config.build()
    }
}

fn read_file(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_toml<'de, T: Deserialize<'de>>(text: &str, path: &Path) -> Result<T, ConfigError> {
    toml::from_str(text).map_err(|source| ConfigError::Parse {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads the config at `path`, requiring the top level to consist of the
/// `scenario` entry (optional for purely spectral commands) and the one
/// table named `section`.
pub fn load<T: serde::de::DeserializeOwned>(
    path: &Path,
    section: &'static str,
) -> Result<LoadedConfig<T>, ConfigError> {
    let text = read_file(path)?;
    let sha256 = hex(&Sha256::digest(text.as_bytes()));
    let table: BTreeMap<String, toml::Value> = parse_toml(&text, path)?;
    for key in table.keys() {
        if key != "scenario" && key != section {
            return Err(ConfigError::UnknownSection(key.clone()));
        }
    }
    let section_value = table
        .get(section)
        .cloned()
        .ok_or(ConfigError::MissingSection(section))?;
    let section_parsed: T =
        section_value
            .try_into()
            .map_err(|source| ConfigError::Parse {
                path: path.to_path_buf(),
                source,
            })?;
    let scenario_config = match table.get("scenario") {
        None => default_scenario(),
        Some(value) => {
            let source: ScenarioSource =
                value
                    .clone()
                    .try_into()
                    .map_err(|source| ConfigError::Parse {
                        path: path.to_path_buf(),
                        source,
                    })?;
            match source {
                ScenarioSource::Inline(sc) => sc,
                ScenarioSource::Reference(rel) => {
                    let base = path.parent().unwrap_or_else(|| Path::new("."));
                    let target = base.join(rel);
                    let scenario_text = read_file(&target)?;
                    parse_toml(&scenario_text, &target)?
                }
            }
        }
    };
    scenario_config.build()?;
    Ok(LoadedConfig {
        section: section_parsed,
        scenario_config,
        sha256,
    })
}

fn default_scenario() -> ScenarioConfig {
    ScenarioConfig {
        dim: 2,
        ellipticity: 1.0,
        r0: 1.0,
        r1: None,
        obstacle: crate::scenario::ObstacleConfig::None,
        metric: crate::scenario::MetricConfig::Flat,
        potential: crate::scenario::PotentialConfig::Constant { value: 1.0 },
    }
}

fn hex(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(2 * bytes.len());
    for b in bytes {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
