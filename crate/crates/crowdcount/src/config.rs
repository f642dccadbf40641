//! Run configuration: built-in defaults, deep-merged with an optional JSON
//! file, then overridden by command-line flags.
//!
//! Keys mirror the library types: `model` is a `ModelSpec`, `kernel` a
//! `KernelSpec`, `train` a `TrainConfig`, `synth` a `SynthConfig`. The
//! top-level `seed` replaces the seeds of `train` and `synth` and also seeds
//! weight initialization and fold shuffling.

use std::fs;
use std::path::Path;

use crowdcount_core::density::KernelSpec;
use crowdcount_core::model::ModelSpec;
use crowdcount_core::synth::SynthConfig;
use crowdcount_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KfoldConfig {
    pub k: usize,
}

impl Default for KfoldConfig {
    fn default() -> Self {
        Self { k: 5 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Forces sequential loading and evaluation.
    pub deterministic: bool,
    pub model: ModelSpec,
    pub kernel: KernelSpec,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub kfold: KfoldConfig,
}

/// Recursively merges `overlay` into `base`. Objects merge key by key; any
/// other value replaces what was there.
pub fn deep_merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Defaults merged with `overlay`. Unknown keys and ill-typed values are
    /// usage errors.
    pub fn from_overlay(overlay: Value) -> Result<Self> {
        let mut base = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
        deep_merge(&mut base, overlay);
        serde_json::from_value(base).map_err(|e| Error::Usage(format!("invalid configuration: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let overlay: Value = serde_json::from_str(&text).map_err(|e| Error::json(path, &e))?;
        if !overlay.is_object() {
            return Err(Error::Usage(format!(
                "{}: configuration must be a JSON object",
                path.display()
            )));
        }
        Self::from_overlay(overlay).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))
    }

    /// Copies the top-level seed into every section.
    pub fn propagate_seed(&mut self) {
        self.train.seed = self.seed;
        self.synth.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.kernel.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if self.kfold.k < 2 {
            return Err(Error::Usage(format!(
                "kfold.k must be at least 2, got {}",
                self.kfold.k
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn nested_override_keeps_siblings() {
        let cfg = RunConfig::from_overlay(json!({"train": {"learning_rate": 0.5}})).unwrap();
        assert_eq!(cfg.train.learning_rate, 0.5);
        assert_eq!(cfg.train.momentum, 0.9);
        assert_eq!(cfg.model, ModelSpec::default());
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        for bad in [
            json!({"trian": {}}),
            json!({"train": {"lr": 1}}),
            json!({"model": {"arch": "vgg"}}),
        ] {
            assert!(matches!(RunConfig::from_overlay(bad), Err(Error::Usage(_))));
        }
    }

    #[test]
    fn defaults_round_trip() {
        let v = RunConfig::default().to_json();
        assert_eq!(RunConfig::from_overlay(v).unwrap(), RunConfig::default());
    }
}
