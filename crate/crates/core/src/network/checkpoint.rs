use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DetectionNetwork, NetworkConfig, ParamMap};
use crate::autograd::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "teds-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct StoredParam {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Stored {
    format: String,
    version: u32,
    config: NetworkConfig,
    params: Vec<StoredParam>,
}

impl DetectionNetwork {
    /// Serializes configuration and parameters as JSON. Floats round-trip exactly.
    pub fn to_json(&self) -> Result<String> {
        let stored = Stored {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|(name, t)| StoredParam {
                    name: name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.clone(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&stored)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let stored: Stored =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))?;
        if stored.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", stored.format)));
        }
        if stored.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                stored.version
            )));
        }
        let mut params = ParamMap::new();
        for p in stored.params {
            if p.shape.iter().product::<usize>() != p.data.len() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has inconsistent length",
                    p.name
                )));
            }
            if p.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Checkpoint(format!("parameter {} is not finite", p.name)));
            }
            if params.insert(p.name.clone(), Tensor::new(p.shape, p.data)).is_some() {
                return Err(Error::Checkpoint(format!("duplicate parameter {}", p.name)));
            }
        }
        Self::from_parts(stored.config, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
