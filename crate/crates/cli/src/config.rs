use std::path::Path;

use serde::{Deserialize, Serialize};
use skt_core::corpus::SynthConfig;
use skt_core::model::ModelConfig;
use skt_core::trainer::TrainConfig;

use crate::CliError;

/// TOML run configuration. Every table and key is optional.
///
/// ```toml
/// [model]
/// d_model = 64
///
/// [train]
/// epochs = 5
/// batch_size = 1
///
/// [synth]
/// turns = 8
/// ```
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Failed(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_tables_keep_defaults() {
        let c = RunConfig::parse("[model]\nd_model = 48\n[train]\nepochs = 3\n").unwrap();
        assert_eq!(c.model.d_model, 48);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.lr, TrainConfig::default().lr);
        assert_eq!(c.synth, SynthConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["[model]\nd_modle = 4\n", "[optim]\nlr = 1.0\n", "[synth]\nturn = 3\n"] {
            assert!(RunConfig::parse(text).is_err(), "{text}");
        }
    }
}
