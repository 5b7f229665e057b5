//! The JSON run configuration and `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::train::TrainConfig;

/// File name of the resolved configuration written beside run outputs.
pub const RESOLVED_CONFIG: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    /// Labelled source dataset (BCDS).
    pub source: Option<PathBuf>,
    /// Target dataset (BCDS); labels, if present, are only used for metrics.
    pub target: Option<PathBuf>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("run")
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            source: None,
            target: None,
            out_dir: default_out_dir(),
            train: TrainConfig::default(),
        }
    }
}

const TOP_LEVEL: [&str; 4] = ["source", "target", "out_dir", "train"];

impl CliConfig {
    /// Parses `path` (or starts from defaults), applies `overrides` and
    /// validates the result.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(RESOLVED_CONFIG);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Applies `key=value` to a config document. Keys are dotted paths; a key
/// whose first segment is not a top-level field is looked up under `train`,
/// so `beta=0` sets `train.beta` and `model.d_model=16` sets
/// `train.model.d_model`. Values are parsed as JSON, falling back to a
/// plain string.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let mut path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|s| s.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    if !TOP_LEVEL.contains(&path[0]) {
        path.insert(0, "train");
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let mut node = doc;
    for seg in &path[..path.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{seg}` is not an object")))?;
        node = obj
            .entry(seg.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| Error::Config(format!("override `{key}` does not address an object field")))?;
    obj.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve(overrides: &[&str]) -> Result<CliConfig> {
        let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        CliConfig::resolve(None, &o)
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = resolve(&["beta=0", "epsilon=0", "model.d_model=16", "out_dir=x", "train.seed=9"]).unwrap();
        assert_eq!(cfg.train.beta, 0.0);
        assert_eq!(cfg.train.epsilon, Some(0.0));
        assert_eq!(cfg.train.model.d_model, 16);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.out_dir, PathBuf::from("x"));
    }

    #[test]
    fn unknown_keys_are_fatal() {
        assert!(matches!(resolve(&["betta=1"]), Err(Error::Config(_))));
        assert!(matches!(resolve(&["model.width=1"]), Err(Error::Config(_))));
        assert!(matches!(resolve(&["beta"]), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_values_are_fatal() {
        assert!(matches!(resolve(&["batch_size=1"]), Err(Error::Config(_))));
        assert!(resolve(&["optimizer=rmsprop"]).is_err());
    }

    #[test]
    fn resolved_copy_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = resolve(&["seed=3", "source=a.bcds"]).unwrap();
        let path = cfg.write_resolved(dir.path()).unwrap();
        assert_eq!(CliConfig::resolve(Some(&path), &[]).unwrap(), cfg);
    }
}
