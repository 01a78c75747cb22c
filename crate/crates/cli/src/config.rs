//! Run configuration files.
//!
//! A TOML document with four optional sections. Every key has a default,
//! unknown keys are rejected, and any key can be overridden from the
//! environment as `SPIKESPARSE_<SECTION>_<KEY>`, e.g.
//! `SPIKESPARSE_TRAIN_LR0=5e-3`.
//!
//! ```toml
//! [data]
//! dir = "data"            # manifest directory or extracted DVS128 Gesture
//! bin_width_us = 10000
//! timesteps = 150         # timesteps per training sample
//!
//! [model]
//! architecture = "4sc5-8sc5-8sc3-16sc3-11"
//! alpha = 3.0
//! beta_init = 0.7
//! threshold_init = 0.3
//! dropout = 0.5
//! readout_bias = true
//!
//! [train]
//! lr0 = 0.01
//! weight_decay = 1e-5
//! batch_size = 48
//! schedule = "cosine"     # or "step"
//! cosine_period = 30
//! step_factor = 0.7
//! step_every = 2
//! grad_clip_norm = 5.0
//! seed = 0
//! max_epochs = 31
//! detach_norm = false
//! truncation = 0          # truncated BPTT window, 0 = full
//!
//! [eval]
//! timesteps = 150
//! anytime = [5, 50, 150, 300]
//! study_seeds = [0, 1, 2]
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use spikesparse::training::{Schedule, TrainConfig};

use crate::exit::ExitError;

pub const SECTIONS: [&str; 4] = ["data", "model", "train", "eval"];
const ENV_PREFIX: &str = "SPIKESPARSE_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub dir: String,
    pub bin_width_us: u64,
    pub timesteps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub architecture: String,
    pub alpha: f64,
    pub beta_init: f64,
    pub threshold_init: f64,
    pub dropout: f64,
    pub readout_bias: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr0: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub schedule: String,
    pub cosine_period: usize,
    pub step_factor: f64,
    pub step_every: usize,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub max_epochs: usize,
    pub detach_norm: bool,
    pub truncation: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub timesteps: usize,
    pub anytime: Vec<usize>,
    pub study_seeds: Vec<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl Default for DataSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        DataSection {
            dir: "data".into(),
            bin_width_us: t.bin_width_us,
            timesteps: t.timesteps,
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        ModelSection {
            architecture: t.architecture,
            alpha: t.alpha,
            beta_init: t.beta_init,
            threshold_init: t.threshold_init,
            dropout: t.dropout,
            readout_bias: t.readout_bias,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            lr0: t.lr0,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            schedule: "cosine".into(),
            cosine_period: 30,
            step_factor: 0.7,
            step_every: 2,
            grad_clip_norm: t.grad_clip_norm,
            seed: t.seed,
            max_epochs: t.max_epochs,
            detach_norm: t.detach_norm,
            truncation: 0,
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            timesteps: TrainConfig::default().timesteps,
            anytime: vec![5, 50, 150, 300],
            study_seeds: vec![0, 1, 2],
        }
    }
}

impl RunConfigFile {
    /// Parses a document, applies `overrides` as `(section, key, raw value)`
    /// and rejects unknown sections or keys.
    pub fn parse_with_overrides(
        text: &str,
        overrides: &[(String, String, String)],
    ) -> Result<Self, ExitError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            ExitError::config(format!("config is not valid TOML: {e}"))
        })?;
        for (section, key, raw) in overrides {
            let entry = table
                .entry(section.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            let toml::Value::Table(section_table) = entry else {
                return Err(ExitError::config(format!("`{section}` must be a section")));
            };
            section_table.insert(key.clone(), parse_value(raw));
        }
        let unknown: Vec<String> = table
            .keys()
            .filter(|k| !SECTIONS.contains(&k.as_str()))
            .cloned()
            .collect();
        if !unknown.is_empty() {
            return Err(ExitError::config(format!(
                "unknown sections: {}",
                unknown.join(", ")
            )));
        }
        // Collect every unknown key rather than stopping at the first.
        let known = toml::Table::try_from(RunConfigFile::default()).expect("defaults serialize");
        let mut bad = Vec::new();
        for (section, value) in &table {
            let (toml::Value::Table(given), Some(toml::Value::Table(allowed))) =
                (value, known.get(section))
            else {
                bad.push(section.clone());
                continue;
            };
            bad.extend(
                given
                    .keys()
                    .filter(|k| !allowed.contains_key(*k))
                    .map(|k| format!("{section}.{k}")),
            );
        }
        if !bad.is_empty() {
            return Err(ExitError::config(format!(
                "unknown keys: {}",
                bad.join(", ")
            )));
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ExitError::config(format!("bad value: {}", e.message())))
    }

    /// Reads `path` (or starts from defaults when `None`) and applies the
    /// environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self, ExitError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| {
                ExitError::missing(format!("cannot read config {}: {e}", p.display()))
            })?,
            None => String::new(),
        };
        Self::parse_with_overrides(&text, &env_overrides(std::env::vars()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plain data serializes")
    }

    /// First 16 hex digits of the SHA-256 of the effective configuration.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        hex::encode(&digest[..8])
    }

    /// The training configuration, or every offending key.
    pub fn train_config(&self) -> Result<TrainConfig, ExitError> {
        let schedule = match self.train.schedule.as_str() {
            "cosine" => Schedule::CosineWarmRestarts {
                period: self.train.cosine_period,
            },
            "step" => Schedule::Step {
                factor: self.train.step_factor,
                every: self.train.step_every,
            },
            other => {
                return Err(ExitError::config(format!(
                    "train.schedule must be \"cosine\" or \"step\", got \"{other}\""
                )))
            }
        };
        let config = TrainConfig {
            architecture: self.model.architecture.clone(),
            timesteps: self.data.timesteps,
            bin_width_us: self.data.bin_width_us,
            lr0: self.train.lr0,
            weight_decay: self.train.weight_decay,
            batch_size: self.train.batch_size,
            schedule,
            grad_clip_norm: self.train.grad_clip_norm,
            alpha: self.model.alpha,
            beta_init: self.model.beta_init,
            threshold_init: self.model.threshold_init,
            seed: self.train.seed,
            max_epochs: self.train.max_epochs,
            dropout: self.model.dropout,
            readout_bias: self.model.readout_bias,
            detach_norm: self.train.detach_norm,
            truncation: (self.train.truncation > 0).then_some(self.train.truncation),
        };
        config
            .validate()
            .map_err(|e| ExitError::config(e.to_string()))?;
        Ok(config)
    }
}

/// `SPIKESPARSE_<SECTION>_<KEY>` variables for the four known sections.
pub fn env_overrides(
    vars: impl IntoIterator<Item = (String, String)>,
) -> Vec<(String, String, String)> {
    let mut found: Vec<(String, String, String)> = vars
        .into_iter()
        .filter_map(|(name, value)| {
            let rest = name.strip_prefix(ENV_PREFIX)?.to_ascii_lowercase();
            let (section, key) = rest.split_once('_')?;
            SECTIONS
                .contains(&section)
                .then(|| (section.to_string(), key.to_string(), value))
        })
        .collect();
    found.sort();
    found
}

/// A raw override as a TOML value, falling back to a plain string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let config = RunConfigFile::parse_with_overrides("", &[]).unwrap();
        assert_eq!(config, RunConfigFile::default());
        let train = config.train_config().unwrap();
        assert_eq!(train, TrainConfig::default());
    }

    #[test]
    fn round_trip_is_stable() {
        let text = "[train]\nlr0 = 0.005\nschedule = \"step\"\n[eval]\nanytime = [2, 5]\n";
        let config = RunConfigFile::parse_with_overrides(text, &[]).unwrap();
        let again = RunConfigFile::parse_with_overrides(&config.to_toml(), &[]).unwrap();
        assert_eq!(config, again);
        assert_eq!(config.to_toml(), again.to_toml());
    }

    #[test]
    fn unknown_keys_are_all_listed() {
        let err = RunConfigFile::parse_with_overrides(
            "[train]\nlr = 1\nbatch = 2\n[model]\nwidth = 3\n",
            &[],
        )
        .unwrap_err();
        assert_eq!(err.code, 3);
        for key in ["train.lr", "train.batch", "model.width"] {
            assert!(err.message.contains(key), "{}", err.message);
        }
        assert_eq!(
            RunConfigFile::parse_with_overrides("[optim]\n", &[])
                .unwrap_err()
                .code,
            3
        );
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let config = RunConfigFile::parse_with_overrides(
            "[train]\nbatch_size = 0\nschedule = \"cosine\"\n",
            &[],
        )
        .unwrap();
        let err = config.train_config().unwrap_err();
        assert_eq!(err.code, 3);
        assert!(err.message.contains("batch_size"), "{}", err.message);
        let config =
            RunConfigFile::parse_with_overrides("[train]\nschedule = \"linear\"\n", &[]).unwrap();
        assert!(config
            .train_config()
            .unwrap_err()
            .message
            .contains("train.schedule"));
        assert_eq!(
            RunConfigFile::parse_with_overrides("[train]\nlr0 = \"fast\"\n", &[])
                .unwrap_err()
                .code,
            3
        );
    }

    #[test]
    fn environment_overrides_win() {
        let vars = [
            ("SPIKESPARSE_TRAIN_LR0".to_string(), "5e-3".to_string()),
            (
                "SPIKESPARSE_MODEL_ARCHITECTURE".to_string(),
                "2sc5-4sc3-4".to_string(),
            ),
            (
                "SPIKESPARSE_EVAL_ANYTIME".to_string(),
                "[2, 20]".to_string(),
            ),
            ("SPIKESPARSE_DVS128_DIR".to_string(), "/x".to_string()),
            ("HOME".to_string(), "/root".to_string()),
        ];
        let overrides = env_overrides(vars);
        assert_eq!(overrides.len(), 3);
        let config =
            RunConfigFile::parse_with_overrides("[train]\nlr0 = 0.1\n", &overrides).unwrap();
        assert_eq!(config.train.lr0, 5e-3);
        assert_eq!(config.model.architecture, "2sc5-4sc3-4");
        assert_eq!(config.eval.anytime, vec![2, 20]);
        let bad = env_overrides([("SPIKESPARSE_TRAIN_SPEED".to_string(), "1".to_string())]);
        assert_eq!(
            RunConfigFile::parse_with_overrides("", &bad)
                .unwrap_err()
                .code,
            3
        );
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfigFile::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.train.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }
}
