use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use stepground::corpus::{Dims, SynthConfig};
use stepground::encoder::ModelConfig;
use stepground::evalkit::EvalConfig;
use stepground::trainer::TrainConfig;

use crate::CliError;

/// Everything a run needs, in one JSON document. Absent fields take their
/// defaults; unknown fields are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    /// Defaults to the desk-scale model sized for the corpus.
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Hold out every n-th video from training for evaluation during the
    /// run; 0 trains on everything.
    pub holdout_every: usize,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.synth.validate()?;
        if let Some(m) = &self.model {
            m.validate()?;
        }
        self.train.validate()?;
        self.eval.validate()?;
        Ok(())
    }

    /// Model config for a corpus with `dims`.
    pub fn model_for(&self, dims: Dims) -> Result<ModelConfig, CliError> {
        match &self.model {
            None => Ok(ModelConfig::desk(dims)),
            Some(m) if m.dims() == dims => Ok(m.clone()),
            Some(m) => Err(CliError::config(format!(
                "model input dims {:?} do not match corpus dims {:?}",
                m.dims(),
                dims
            ))),
        }
    }
}
