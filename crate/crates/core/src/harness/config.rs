//! Run configuration: one TOML document with tracker and mapper sections,
//! plus dotted `key=value` overrides.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::joint_tracker::TrackerConfig;
use crate::mapper::MapperConfig;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("bad override {0:?}: expected key=value")]
    BadOverride(String),
    #[error("unknown configuration key {0:?}")]
    UnknownKey(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Seed the first keyframe from ground-truth depth.
    Gt,
    /// Random depths refined by candidate filtering.
    Filter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VoConfig {
    pub init: InitMode,
    pub seed: u64,
    /// Run tracking and mapping in lockstep on one thread.
    pub single_thread: bool,
    pub tracker: TrackerConfig,
    pub mapper: MapperConfig,
}

impl Default for VoConfig {
    fn default() -> Self {
        Self {
            init: InitMode::Gt,
            seed: 0,
            single_thread: false,
            tracker: TrackerConfig::default(),
            mapper: MapperConfig::default(),
        }
    }
}

impl VoConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: VoConfig = toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.tracker.validate().map_err(ConfigError::Invalid)?;
        self.mapper.validate().map_err(ConfigError::Invalid)?;
        Ok(())
    }

    /// Pure direct odometry: no corners anywhere.
    pub fn disable_indirect(&mut self) {
        self.tracker.use_geometric = false;
        self.mapper.use_corners = false;
    }

    /// Applies `section.key=value`; the value is parsed as a TOML literal,
    /// falling back to a string.
    pub fn set(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| ConfigError::BadOverride(assignment.into()))?;
        let key = key.trim();
        let raw = raw.trim();
        if key.is_empty() {
            return Err(ConfigError::BadOverride(assignment.into()));
        }
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.into()));
        let mut root = toml::Value::try_from(&*self).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for part in &parts[..parts.len() - 1] {
            node = node
                .as_table_mut()
                .and_then(|t| t.get_mut(*part))
                .ok_or_else(|| ConfigError::UnknownKey(key.into()))?;
        }
        let table = node.as_table_mut().ok_or_else(|| ConfigError::UnknownKey(key.into()))?;
        table.insert(parts[parts.len() - 1].to_string(), value);
        let next: VoConfig = root.try_into().map_err(|e: toml::de::Error| {
            if e.message().contains("unknown field") {
                ConfigError::UnknownKey(key.into())
            } else {
                ConfigError::Invalid(e.to_string())
            }
        })?;
        next.validate()?;
        *self = next;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = VoConfig::default();
        assert_eq!(VoConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(VoConfig::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let cfg = VoConfig::from_toml("[mapper]\nwindow_size = 5\n").unwrap();
        assert_eq!(cfg.mapper.window_size, 5);
        assert_eq!(cfg.mapper.pixel_quota, MapperConfig::default().pixel_quota);
        assert!(VoConfig::from_toml("[mapper]\nwindow = 5\n").is_err());
    }

    #[test]
    fn overrides() {
        let mut cfg = VoConfig::default();
        cfg.set("tracker.force_k=5").unwrap();
        assert_eq!(cfg.tracker.force_k, Some(5.0));
        cfg.set("mapper.corners.fast_threshold = 30").unwrap();
        assert_eq!(cfg.mapper.corners.fast_threshold, 30.0);
        cfg.set("init=filter").unwrap();
        assert_eq!(cfg.init, InitMode::Filter);
        assert!(matches!(cfg.set("tracker.nope=1"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(cfg.set("novalue"), Err(ConfigError::BadOverride(_))));
        assert!(cfg.set("mapper.window_size=1").is_err());
        assert_eq!(cfg.mapper.window_size, 7);
    }
}
