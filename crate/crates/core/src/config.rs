//! Run configuration: built-in defaults, overlaid by a TOML file, overlaid
//! by `key.path=value` overrides.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterArch, AdapterTrainConfig, DEFAULT_LAMBDA};
use crate::benchmark::{CurriculumSchedule, Level, LevelMode, SynthConfig};
use crate::error::{Error, Result};
use crate::lowlight::LowlightConfig;
use crate::mvs::PipelineConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterSettings {
    pub arch: AdapterArch,
    pub lambda: f64,
    pub train: AdapterTrainConfig,
}

impl Default for AdapterSettings {
    fn default() -> Self {
        AdapterSettings {
            arch: AdapterArch::default(),
            lambda: DEFAULT_LAMBDA,
            train: AdapterTrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSettings {
    pub level: Level,
    pub mode: LevelMode,
    /// Number of scenes written by `synth`.
    pub scenes: usize,
}

impl Default for BenchmarkSettings {
    fn default() -> Self {
        BenchmarkSettings {
            level: Level::Blur,
            mode: LevelMode::Cumulative,
            scenes: 5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 lets the thread pool decide.
    pub threads: usize,
    pub synth: SynthConfig,
    pub lowlight: LowlightConfig,
    pub pipeline: PipelineConfig,
    pub curriculum: CurriculumSchedule,
    pub adapter: AdapterSettings,
    pub benchmark: BenchmarkSettings,
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()))
}

/// Sets `a.b.c = value` in `table`, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::InvalidConfig(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::InvalidConfig(format!("{key}: {p} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.message().to_owned()))
    }

    /// Defaults, then the optional config file, then the overrides in order.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match file {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| Error::InvalidConfig(format!("{}: {}", path.display(), e.message())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(e.message().to_owned()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.lowlight.validate()?;
        self.curriculum.validate()?;
        let p = &self.pipeline;
        p.planes().map_err(|e| Error::InvalidConfig(e.to_string()))?;
        if p.stride == 0 {
            return Err(Error::InvalidConfig("pipeline.stride must be positive".into()));
        }
        if !(self.adapter.lambda >= 0.0 && self.adapter.lambda.is_finite()) {
            return Err(Error::InvalidConfig("adapter.lambda must be a finite non-negative number".into()));
        }
        Ok(())
    }
}
