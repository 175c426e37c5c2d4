use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DatasetConfig;
use crate::error::{Error, Result};
use crate::eval::ApMode;
use crate::network::NetworkConfig;
use crate::pipeline::DetectConfig;

/// Optimizer and sampling settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub learning_rate: f64,
    /// Decoupled weight decay (AdamW).
    pub weight_decay: f64,
    pub epochs: usize,
    /// Windows per optimizer step.
    pub batch_windows: usize,
    pub seed: u64,
    /// Stop after this many steps, if set.
    pub max_steps: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Background windows drawn per event window each epoch.
    pub background_ratio: f64,
    /// Minimum fraction of an event that must lie inside a window for the
    /// window to be trained on it.
    pub min_gt_fraction: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            epochs: 30,
            batch_windows: 8,
            seed: 0,
            max_steps: None,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            background_ratio: 1.0,
            min_gt_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub detection_mode: ApMode,
}

/// Full run configuration: one TOML file with `[train]`, `[network]`,
/// `[data]`, `[detect]` and `[eval]` sections.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub train: TrainSettings,
    pub network: NetworkConfig,
    pub data: DatasetConfig,
    pub detect: DetectConfig,
    pub eval: EvalSettings,
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes to TOML")
    }

    /// Applies `section.field=value`. The value is read as a TOML literal
    /// (`1e-3`, `true`, `[1, 2]`, `"diou"`); anything else is taken as a string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));

        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("`{key}` does not name a field")))?;
            if i + 1 == parts.len() {
                // Optional fields are absent from the table while unset.
                table.insert(part.to_string(), value.clone());
                break;
            }
            node = table
                .get_mut(*part)
                .ok_or_else(|| Error::Config(format!("unknown section `{part}` in `{key}`")))?;
        }
        *self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("--set {key}: {}", e.message())))?;
        Ok(())
    }

    /// Uses `seed` for both the corpus and training.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.data.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.data.validate()?;
        let t = &self.train;
        if !(t.learning_rate.is_finite() && t.learning_rate >= 0.0) || t.weight_decay.is_nan() || t.weight_decay < 0.0 {
            return Err(Error::Config(
                "learning_rate and weight_decay must be nonnegative".into(),
            ));
        }
        if t.batch_windows == 0 {
            return Err(Error::Config("batch_windows must be positive".into()));
        }
        if !(0.0..=1.0).contains(&t.beta1) || !(0.0..=1.0).contains(&t.beta2) || t.epsilon.is_nan() || t.epsilon <= 0.0
        {
            return Err(Error::Config(
                "beta1, beta2 must lie in [0, 1] and epsilon be positive".into(),
            ));
        }
        if !(t.min_gt_fraction > 0.0 && t.min_gt_fraction <= 1.0) {
            return Err(Error::Config("min_gt_fraction must lie in (0, 1]".into()));
        }
        if t.background_ratio.is_nan() || t.background_ratio < 0.0 {
            return Err(Error::Config("background_ratio must be nonnegative".into()));
        }
        if self.data.feature_dim != self.network.input_dim {
            return Err(Error::Config(format!(
                "data.feature_dim {} differs from network.input_dim {}",
                self.data.feature_dim, self.network.input_dim
            )));
        }
        if self.data.num_categories != self.network.num_categories {
            return Err(Error::Config(format!(
                "data.num_categories {} differs from network.num_categories {}",
                self.data.num_categories, self.network.num_categories
            )));
        }
        for (name, v) in [
            ("detect.confidence_threshold", self.detect.confidence_threshold),
            ("detect.nms_threshold", self.detect.nms_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::IouVariant;

    #[test]
    fn default_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!(c.train.learning_rate, 1e-4);
        assert_eq!(c.train.weight_decay, 1e-4);
        assert_eq!(c.train.epochs, 30);
        assert_eq!((c.network.alpha, c.network.beta), (1.0, 2.0));
        assert_eq!(c.network.frames_per_window(), 134);
    }

    #[test]
    fn toml_roundtrip_and_partial_files() {
        let c = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        let partial = TrainConfig::from_toml("[train]\nepochs = 3\n[network]\nsegments = 32\n").unwrap();
        assert_eq!(partial.train.epochs, 3);
        assert_eq!(partial.network.segments, 32);
        assert_eq!(partial.data, DatasetConfig::default());
        assert!(matches!(
            TrainConfig::from_toml("[train]\nepoch = 3\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn overrides() {
        let mut c = TrainConfig::default();
        c.apply_override("train.learning_rate=1e-3").unwrap();
        c.apply_override("network.loss_variant=giou").unwrap();
        c.apply_override("network.use_window_attention = false").unwrap();
        c.apply_override("train.max_steps=5").unwrap();
        c.apply_override("data.category_weights=[1, 2, 3, 4]").unwrap();
        assert_eq!(c.train.learning_rate, 1e-3);
        assert_eq!(c.network.loss_variant, IouVariant::Giou);
        assert!(!c.network.use_window_attention);
        assert_eq!(c.train.max_steps, Some(5));
        assert_eq!(c.data.category_weights, vec![1.0, 2.0, 3.0, 4.0]);
        assert!(c.apply_override("train.nope=1").is_err());
        assert!(c.apply_override("bogus.x=1").is_err());
        assert!(c.apply_override("train.epochs=many").is_err());
        assert!(c.apply_override("noequals").is_err());
    }

    #[test]
    fn validation_checks_cross_section_consistency() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_err(), "default corpus is 64-d, network 512-d");
        c.network.input_dim = 64;
        c.network.neck_dim = 64;
        c.validate().unwrap();
        c.data.num_categories = 3;
        c.data.category_weights.pop();
        assert!(c.validate().is_err());
    }
}
