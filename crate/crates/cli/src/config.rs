//! Structured config files and their merge with command-line flags.

use std::path::Path;

use disc_core::datagen::{DatasetSpec, TRAIN_PALETTE, UNSEEN_PALETTE};
use disc_core::disc::TrainConfig;
use disc_core::rng::digest_hex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

/// Contents of a `--config` file. Both sections are optional and every
/// field inside them falls back to its default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub data: DatasetSpec,
    pub train: TrainConfig,
}

/// A parsed config file plus a record of which keys it set explicitly.
#[derive(Clone, Debug, Default)]
pub struct LoadedConfig {
    pub file: FileConfig,
    raw: Value,
}

impl LoadedConfig {
    /// Reads TOML (`.toml`) or JSON (anything else). `None` yields defaults.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(LoadedConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let is_toml = path.extension().is_some_and(|e| e == "toml");
        let raw: Value = if is_toml {
            toml::from_str(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        };
        let file = serde_json::from_value(raw.clone())
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Ok(LoadedConfig { file, raw })
    }

    /// Whether the file set `section.key`.
    pub fn has(&self, section: &str, key: &str) -> bool {
        self.raw.get(section).and_then(|s| s.get(key)).is_some()
    }
}

/// Re-derive the palettes for `spec.num_classes` unless the file gave them.
pub fn fit_palettes(spec: &mut DatasetSpec, loaded: &LoadedConfig) {
    let k = spec.num_classes.min(TRAIN_PALETTE.len());
    if !loaded.has("data", "palette") {
        spec.palette = TRAIN_PALETTE[..k].to_vec();
    }
    if !loaded.has("data", "unseen_palette") {
        spec.unseen_palette = UNSEEN_PALETTE[..k].to_vec();
    }
}

/// Resolved settings of one training run, stored as `config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: String,
    pub spec_hash: String,
    /// Digest of the train and validation files as read.
    pub data_digest: String,
    pub num_classes: usize,
    pub train: TrainConfig,
    pub config_hash: String,
}

impl RunConfig {
    pub fn new(
        data: String,
        spec_hash: String,
        data_digest: String,
        num_classes: usize,
        train: TrainConfig,
    ) -> Self {
        let mut rc = RunConfig {
            data,
            spec_hash,
            data_digest,
            num_classes,
            train,
            config_hash: String::new(),
        };
        rc.config_hash = rc.compute_hash();
        rc
    }

    /// Covers everything that changes the trajectory except the epoch
    /// budget and the seed, so a run can be extended by resuming and the
    /// seed stays visible in the directory name.
    pub fn compute_hash(&self) -> String {
        let train = TrainConfig {
            epochs: 0,
            seed: 0,
            ..self.train
        };
        let key = serde_json::json!({
            "data_digest": self.data_digest,
            "num_classes": self.num_classes,
            "train": train,
        });
        digest_hex(key.to_string().as_bytes())
    }

    pub fn dir_name(&self) -> String {
        format!("{}-seed{}", &self.config_hash[..12], self.train.seed)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("run config serialises");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rc(train: TrainConfig) -> RunConfig {
        RunConfig::new("d".into(), "s".into(), "abc".into(), 4, train)
    }

    #[test]
    fn hash_ignores_epochs_and_seed_only() {
        let base = rc(TrainConfig::desk());
        assert_eq!(
            base.config_hash,
            rc(TrainConfig {
                epochs: 90,
                seed: 4,
                ..TrainConfig::desk()
            })
            .config_hash
        );
        assert_ne!(
            base.config_hash,
            rc(TrainConfig {
                q: 0.5,
                ..TrainConfig::desk()
            })
            .config_hash
        );
        assert_ne!(
            base.config_hash,
            rc(TrainConfig {
                t_gen: 5,
                ..TrainConfig::desk()
            })
            .config_hash
        );
        let other_data =
            RunConfig::new("d".into(), "s".into(), "abd".into(), 4, TrainConfig::desk());
        assert_ne!(base.config_hash, other_data.config_hash);
        assert!(base.dir_name().ends_with("-seed0"));
        assert_eq!(base.dir_name().len(), 12 + "-seed0".len());
    }

    #[test]
    fn partial_files_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[train]\nq = 0.5\n[data]\nnum_classes = 3\n").unwrap();
        let l = LoadedConfig::load(Some(&p)).unwrap();
        assert_eq!(l.file.train.q, 0.5);
        assert_eq!(l.file.train.lambda_g, TrainConfig::default().lambda_g);
        assert!(l.has("train", "q") && !l.has("train", "epochs"));
        let mut spec = l.file.data.clone();
        fit_palettes(&mut spec, &l);
        assert_eq!(spec.palette.len(), 3);
        assert!(spec.validate().is_ok());

        std::fs::write(&p, "[train]\nqq = 0.5\n").unwrap();
        assert!(matches!(
            LoadedConfig::load(Some(&p)),
            Err(CliError::Usage(_))
        ));
        let j = dir.path().join("c.json");
        std::fs::write(&j, r#"{"data": {"bias_degree": 0.8}, "extra": 1}"#).unwrap();
        assert!(matches!(
            LoadedConfig::load(Some(&j)),
            Err(CliError::Usage(_))
        ));
    }
}
