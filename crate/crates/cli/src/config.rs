use std::fmt;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use gtdiff::ddpm::DdpmConfig;
use gtdiff::evalsuite::EvalConfig;
use gtdiff::gtx::EncoderConfig;
use gtdiff::simulate::SimSpec;
use gtdiff::train::{DownstreamConfig, PipelineConfig, PretrainConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Shrunk schedule, synthetic count and epochs; minutes on one core.
    Desk,
    /// The published hyperparameters.
    Paper,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub pretrain: PretrainConfig,
    pub downstream: DownstreamConfig,
    pub folds: usize,
    pub synthetic_count: usize,
    pub impute_k: usize,
}

/// Everything a run depends on. `sim.seed` defaults to `seed`; training
/// streams always derive from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    /// Not part of the hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub sim: SimSpec,
    pub ddpm: DdpmConfig,
    pub model: EncoderConfig,
    pub train: TrainSection,
    pub eval: EvalConfig,
}

/// A config that failed to parse or validate. `path` is the dotted key
/// that caused it, empty when the whole document is at fault.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() || self.path == "." {
            write!(f, "invalid config: {}", self.message)
        } else {
            write!(f, "invalid config at `{}`: {}", self.path, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

fn config_error(path: &str, message: impl fmt::Display) -> ConfigError {
    ConfigError {
        path: path.to_string(),
        message: message.to_string(),
    }
}

pub fn preset(p: Preset) -> RunConfig {
    match p {
        Preset::Paper => RunConfig {
            preset: p,
            seed: 0,
            output: None,
            sim: SimSpec::default(),
            ddpm: DdpmConfig::default(),
            model: EncoderConfig::default(),
            train: TrainSection {
                pretrain: PretrainConfig::default(),
                downstream: DownstreamConfig::default(),
                folds: 5,
                synthetic_count: 4000,
                impute_k: 5,
            },
            eval: EvalConfig::default(),
        },
        Preset::Desk => {
            let mut c = preset(Preset::Paper);
            c.preset = p;
            // β scaled by 1000/T so that ᾱ_T stays near zero.
            c.ddpm.timesteps = 200;
            c.ddpm.beta_start = 5e-4;
            c.ddpm.beta_end = 0.1;
            c.ddpm.epochs = 100;
            c.train.synthetic_count = 1000;
            c.train.pretrain.epochs = 5;
            c
        }
    }
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses a TOML file, or JSON when the extension is `.json`.
pub fn read_overlay(path: &Path) -> Result<Value, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| config_error("", format!("{}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        serde_json::from_str(&text).map_err(|e| config_error("", format!("{}: {e}", path.display())))
    } else {
        let table: toml::Table = toml::from_str(&text).map_err(|e| config_error("", format!("{}: {e}", path.display())))?;
        serde_json::to_value(table).map_err(|e| config_error("", e))
    }
}

/// Where a config comes from, lowest precedence first: preset, file, flags.
#[derive(Clone, Debug, Default)]
pub struct ConfigSources {
    pub preset: Option<Preset>,
    pub file: Option<Value>,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn resolve(sources: ConfigSources) -> Result<RunConfig, ConfigError> {
        let file = sources.file.unwrap_or(Value::Object(Map::new()));
        if !file.is_object() {
            return Err(config_error("", "the config must be a table"));
        }
        let file_preset = match file.get("preset") {
            Some(v) => Some(
                serde_json::from_value::<Preset>(v.clone()).map_err(|_| config_error("preset", "expected `desk` or `paper`"))?,
            ),
            None => None,
        };
        let chosen = sources.preset.or(file_preset).unwrap_or(Preset::Desk);
        let mut value = serde_json::to_value(preset(chosen)).map_err(|e| config_error("", e))?;
        let explicit_sim_seed = file.pointer("/sim/seed").is_some();
        merge(&mut value, file);
        value["preset"] = serde_json::to_value(chosen).map_err(|e| config_error("", e))?;
        if let Some(s) = sources.seed {
            value["seed"] = s.into();
        }
        if !explicit_sim_seed {
            if let Some(s) = value.get("seed").cloned() {
                if let Some(sim) = value.get_mut("sim").and_then(Value::as_object_mut) {
                    sim.insert("seed".into(), s);
                }
            }
        }
        let config: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            config_error(&path, e.into_inner())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.sim.validate().map_err(|e| config_error("sim", e))?;
        self.ddpm.validate().map_err(|e| config_error("ddpm", e))?;
        self.model.validate().map_err(|e| config_error("model", e))?;
        self.pipeline().validate().map_err(|e| config_error("train", e))?;
        self.eval.validate().map_err(|e| config_error("eval", e))?;
        Ok(())
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            ddpm: self.ddpm.clone(),
            encoder: self.model.clone(),
            train: TrainConfig {
                pretrain: self.train.pretrain.clone(),
                downstream: self.train.downstream.clone(),
                folds: self.train.folds,
                seed: self.seed,
            },
            synthetic_count: self.train.synthetic_count,
            impute_k: self.train.impute_k,
        }
    }

    /// Canonical JSON without the output directory.
    pub fn canonical_json(&self) -> String {
        let hashed = RunConfig {
            output: None,
            ..self.clone()
        };
        serde_json::to_string(&hashed).expect("config serialises")
    }

    /// Hex SHA-256 of [`Self::canonical_json`].
    pub fn hash(&self) -> String {
        gtdiff::checkpoint::hex(&Sha256::digest(self.canonical_json().as_bytes()))
    }

    pub fn to_toml(&self) -> String {
        let hashed = RunConfig {
            output: None,
            ..self.clone()
        };
        toml::to_string(&hashed).expect("config serialises to TOML")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve(file: Option<Value>, seed: Option<u64>) -> Result<RunConfig, ConfigError> {
        RunConfig::resolve(ConfigSources {
            preset: None,
            file,
            seed,
        })
    }

    #[test]
    fn paper_preset_matches_published_hyperparameters() {
        let c = preset(Preset::Paper);
        assert_eq!(c.ddpm.timesteps, 1000);
        assert_eq!(c.train.synthetic_count, 4000);
        assert_eq!(c.train.pretrain.epochs, 100);
        assert_eq!(c.train.pretrain.learning_rate, 2e-3);
        assert_eq!(c.train.downstream.learning_rate, 1e-3);
        assert_eq!(c.train.pretrain.dropout, 0.3);
        assert_eq!(c.train.downstream.patience, 10);
        assert_eq!(c.train.folds, 5);
        c.validate().unwrap();
        preset(Preset::Desk).validate().unwrap();
    }

    #[test]
    fn unknown_key_reports_its_path() {
        let err = resolve(Some(serde_json::json!({"ddpm": {"epochz": 3}})), None).unwrap_err();
        assert!(err.path.starts_with("ddpm"), "{err}");
        assert!(err.message.contains("epochz"), "{err}");
        let err = resolve(Some(serde_json::json!({"colour": 1})), None).unwrap_err();
        assert!(err.message.contains("colour"), "{err}");
    }

    #[test]
    fn wrong_type_reports_its_path() {
        let err = resolve(Some(serde_json::json!({"train": {"pretrain": {"epochs": "many"}}})), None).unwrap_err();
        assert_eq!(err.path, "train.pretrain.epochs");
    }

    #[test]
    fn invalid_value_names_its_section() {
        let err = resolve(Some(serde_json::json!({"ddpm": {"timesteps": 0}})), None).unwrap_err();
        assert_eq!(err.path, "ddpm");
    }

    #[test]
    fn file_overrides_preset_and_flag_overrides_file() {
        let c = resolve(Some(serde_json::json!({"seed": 3, "ddpm": {"epochs": 7}})), Some(9)).unwrap();
        assert_eq!(c.ddpm.epochs, 7);
        assert_eq!(c.ddpm.timesteps, 200);
        assert_eq!(c.seed, 9);
        assert_eq!(c.sim.seed, 9);
        let c = resolve(Some(serde_json::json!({"seed": 3, "sim": {"seed": 11}})), None).unwrap();
        assert_eq!((c.seed, c.sim.seed), (3, 11));
    }

    #[test]
    fn hash_ignores_output_and_tracks_content() {
        let a = resolve(None, Some(1)).unwrap();
        let mut b = a.clone();
        b.output = Some("elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.ddpm.epochs += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn toml_round_trip_preserves_hash() {
        let a = resolve(None, Some(5)).unwrap();
        let table: toml::Table = toml::from_str(&a.to_toml()).unwrap();
        let b = resolve(Some(serde_json::to_value(table).unwrap()), None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
    }
}
