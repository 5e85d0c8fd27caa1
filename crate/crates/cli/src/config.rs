//! Layered run configuration: defaults < file < environment < flags.
//!
//! Keys are dotted paths into [`RunConfig`] (`train.iterations`,
//! `init.opacity`); a bare key names a `train` field.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use utrice::io::InitConfig;
use utrice::training::TrainConfig;

pub const ENV_PREFIX: &str = "UTRICE__";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub init: InitConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: {message}")]
    BadValue { key: String, message: String },
    #[error("{path}: {message}")]
    File { path: String, message: String },
    #[error("malformed override `{0}` (expected key=value)")]
    MalformedOverride(String),
}

/// Accumulates layers over the defaults, checking every key as it lands.
pub struct ConfigBuilder {
    tree: Value,
    touched: Vec<String>,
}

impl Default for ConfigBuilder {
    fn default() -> Self {
        Self::from_config(&RunConfig::default())
    }
}

impl ConfigBuilder {
    pub fn from_config(base: &RunConfig) -> Self {
        Self {
            tree: serde_json::to_value(base).expect("config serializes"),
            touched: Vec::new(),
        }
    }

    fn canonical(key: &str) -> String {
        let key = key.trim();
        let key = if key.contains('.') {
            key.to_string()
        } else {
            format!("train.{key}")
        };
        // Keep the long-form learning-rate name working.
        key.replace("train.lr_triangles_points_init", "train.lr_vertices")
    }

    pub fn set(&mut self, key: &str, value: Value) -> Result<(), ConfigError> {
        let key = Self::canonical(key);
        let (section, field) = key.split_once('.').expect("canonical keys are dotted");
        let slot = self
            .tree
            .get_mut(section)
            .and_then(|s| s.get_mut(field))
            .ok_or_else(|| ConfigError::UnknownKey(key.clone()))?;
        let compatible = match (&*slot, &value) {
            (Value::Number(_), Value::Number(_)) | (Value::Bool(_), Value::Bool(_)) => true,
            (Value::String(_), Value::String(_)) => true,
            (Value::Array(a), Value::Array(b)) => {
                a.len() == b.len() && b.iter().all(Value::is_number)
            }
            _ => false,
        };
        if !compatible {
            return Err(ConfigError::BadValue {
                message: format!("expected a value like {slot}, got {value}"),
                key,
            });
        }
        *slot = value;
        self.touched.push(key);
        Ok(())
    }

    /// `key=value`, where the value is read as JSON when it parses and as a
    /// bare string otherwise.
    pub fn set_override(&mut self, text: &str) -> Result<(), ConfigError> {
        let (key, raw) = text
            .split_once('=')
            .ok_or_else(|| ConfigError::MalformedOverride(text.into()))?;
        self.set(key, parse_scalar(raw))
    }

    fn merge_table(&mut self, table: Map<String, Value>) -> Result<(), ConfigError> {
        for (key, value) in table {
            match value {
                Value::Object(inner) if key == "train" || key == "init" => {
                    for (field, v) in inner {
                        self.set(&format!("{key}.{field}"), v)?;
                    }
                }
                v => self.set(&key, v)?,
            }
        }
        Ok(())
    }

    /// TOML unless the extension is `.json`.
    pub fn merge_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let file_err = |message: String| ConfigError::File {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| file_err(e.to_string()))?;
        let value: Value = if path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("json"))
        {
            serde_json::from_str(&text).map_err(|e| file_err(e.to_string()))?
        } else {
            let t: toml::Table = toml::from_str(&text).map_err(|e| file_err(e.to_string()))?;
            serde_json::to_value(t).map_err(|e| file_err(e.to_string()))?
        };
        match value {
            Value::Object(map) => self.merge_table(map),
            _ => Err(file_err("top level must be a table".into())),
        }
    }

    /// `UTRICE__ITERATIONS=100`, `UTRICE__INIT__OPACITY=0.3`.
    pub fn merge_env(
        &mut self,
        vars: impl IntoIterator<Item = (String, String)>,
    ) -> Result<(), ConfigError> {
        let mut vars: Vec<_> = vars
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX))
            .collect();
        vars.sort();
        for (k, v) in vars {
            let key = k[ENV_PREFIX.len()..]
                .to_ascii_lowercase()
                .replace("__", ".");
            self.set(&key, parse_scalar(&v))?;
        }
        Ok(())
    }

    pub fn build(self) -> Result<RunConfig, ConfigError> {
        let cfg: RunConfig = match serde_json::from_value(self.tree.clone()) {
            Ok(cfg) => cfg,
            Err(e) => return Err(self.blame(e.to_string())),
        };
        cfg.train.validate().map_err(|e| {
            let msg = e.to_string();
            let detail = msg.trim_start_matches("invalid config: ");
            match detail.split_once(": ") {
                Some((key, why)) => ConfigError::BadValue {
                    key: format!("train.{key}"),
                    message: why.to_string(),
                },
                None => ConfigError::BadValue {
                    key: "train".into(),
                    message: detail.to_string(),
                },
            }
        })?;
        for (key, v) in [
            ("init.opacity", cfg.init.opacity),
            ("init.sigma", cfg.init.sigma),
        ] {
            let ok = if key == "init.opacity" {
                v > 0.0 && v < 1.0
            } else {
                v > 0.0 && v.is_finite()
            };
            if !ok {
                return Err(ConfigError::BadValue {
                    key: key.into(),
                    message: format!("{v} is out of range"),
                });
            }
        }
        Ok(cfg)
    }

    /// Finds which layered key made deserialization fail by re-applying the
    /// keys one at a time.
    fn blame(&self, message: String) -> ConfigError {
        let defaults = serde_json::to_value(RunConfig::default()).expect("config serializes");
        for key in self.touched.iter().rev() {
            let (section, field) = key.split_once('.').expect("dotted");
            let mut probe = defaults.clone();
            probe[section][field] = self.tree[section][field].clone();
            if let Err(e) = serde_json::from_value::<RunConfig>(probe) {
                return ConfigError::BadValue {
                    key: key.clone(),
                    message: e.to_string(),
                };
            }
        }
        ConfigError::BadValue {
            key: "config".into(),
            message,
        }
    }
}

fn parse_scalar(raw: &str) -> Value {
    let raw = raw.trim();
    serde_json::from_str(raw).unwrap_or_else(|_| {
        // Allow `background=0.1,0.2,0.3` without brackets.
        let parts: Option<Vec<Value>> = raw
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .ok()
                    .and_then(|f| serde_json::Number::from_f64(f).map(Value::Number))
            })
            .collect();
        match parts {
            Some(p) if p.len() > 1 => Value::Array(p),
            _ => Value::String(raw.to_string()),
        }
    })
}

/// The effective configuration as TOML, suitable for `--config`.
pub fn to_toml(cfg: &RunConfig) -> String {
    toml::to_string_pretty(cfg).expect("config serializes to TOML")
}

#[cfg(test)]
mod tests {
    use super::*;
    use utrice::autograd::VertexGradMode;

    #[test]
    fn layers_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.toml");
        std::fs::write(&file, "iterations = 10\nk = 8\n[init]\nopacity = 0.5\n").unwrap();
        let mut b = ConfigBuilder::default();
        b.merge_file(&file).unwrap();
        b.merge_env([
            ("UTRICE__K".to_string(), "4".to_string()),
            ("PATH".into(), "x".into()),
        ])
        .unwrap();
        b.set_override("train.iterations=20").unwrap();
        b.set_override("vertex_grad_mode=exact").unwrap();
        b.set_override("background=0.1,0.2,0.3").unwrap();
        let cfg = b.build().unwrap();
        assert_eq!(cfg.train.iterations, 20);
        assert_eq!(cfg.train.k, 4);
        assert_eq!(cfg.init.opacity, 0.5);
        assert_eq!(cfg.train.vertex_grad_mode, VertexGradMode::Exact);
        assert_eq!(cfg.train.background, [0.1, 0.2, 0.3]);
    }

    #[test]
    fn unknown_and_bad_keys_are_named() {
        let mut b = ConfigBuilder::default();
        let err = b.set_override("train.iteratoins=5").unwrap_err();
        assert!(err.to_string().contains("train.iteratoins"), "{err}");
        let err = b.set_override("k=fast").unwrap_err();
        assert!(err.to_string().contains("train.k"), "{err}");

        let mut b = ConfigBuilder::default();
        b.set_override("iterations=1.5").unwrap();
        let err = b.build().unwrap_err();
        assert!(err.to_string().contains("train.iterations"), "{err}");

        let mut b = ConfigBuilder::default();
        b.set_override("opacity_dead=2").unwrap();
        let err = b.build().unwrap_err();
        assert!(err.to_string().contains("train.opacity_dead"), "{err}");
    }

    #[test]
    fn json_file_and_alias() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        std::fs::write(&file, r#"{"train": {"lr_triangles_points_init": 0.002}}"#).unwrap();
        let mut b = ConfigBuilder::default();
        b.merge_file(&file).unwrap();
        assert_eq!(b.build().unwrap().train.lr_vertices, 0.002);
    }

    #[test]
    fn toml_echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.train.iterations = 123;
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("echo.toml");
        std::fs::write(&file, to_toml(&cfg)).unwrap();
        let mut b = ConfigBuilder::default();
        b.merge_file(&file).unwrap();
        assert_eq!(b.build().unwrap(), cfg);
    }
}
