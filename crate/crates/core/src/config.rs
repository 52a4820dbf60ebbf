//! Run configuration, read from and echoed as TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::celleval::EvalConfig;
use crate::datastore::{PreprocessConfig, SamplingStrategy, SynthConfig};
use crate::error::{Error, Result};
use crate::ndmath::AdamConfig;
use crate::setenc::EncoderConfig;
use crate::transport::TransportConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// One optimizer over the autoencoder and transport losses together.
    #[default]
    Joint,
    /// Autoencoder epochs first, then transport epochs with the encoder frozen.
    Stagewise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory holding `manifest.json`.
    pub dir: PathBuf,
    /// Number of (cell type, perturbation) combinations held out, drawn with the run seed.
    pub holdout_count: usize,
    /// Explicit held-out combinations as `"cell_type|perturbation"` labels; overrides the count.
    pub holdout: Vec<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: PathBuf::from("data"),
            holdout_count: 4,
            holdout: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    /// Autoencoder-only epochs at the start of stage-wise training.
    pub ae_epochs: usize,
    pub steps_per_epoch: usize,
    /// Sets per step (B).
    pub batch_size: usize,
    /// Cells per set (N).
    pub cells: usize,
    pub lambda_flow: f64,
    pub sampling: SamplingStrategy,
    pub optimizer: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Joint,
            epochs: 40,
            ae_epochs: 10,
            steps_per_epoch: 25,
            batch_size: 8,
            cells: 32,
            lambda_flow: 1.0,
            sampling: SamplingStrategy::Proportional,
            optimizer: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Run directory for the config echo, checkpoint, predictions and reports.
    pub out: PathBuf,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub preprocess: PreprocessConfig,
    /// Highly variable genes kept by `prepare`; all genes when absent.
    pub hvg: Option<usize>,
    pub encoder: EncoderConfig,
    pub transport: TransportConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            out: PathBuf::from("run"),
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            preprocess: PreprocessConfig::default(),
            hvg: None,
            encoder: EncoderConfig::default(),
            transport: TransportConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        RunConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks the parts that do not depend on the dataset.
    pub fn validate(&self) -> Result<()> {
        self.transport.validate()?;
        let t = &self.train;
        if t.batch_size == 0 || t.cells == 0 || t.steps_per_epoch == 0 {
            return Err(Error::Config("batch size, set size and steps must be positive".into()));
        }
        if !(t.lambda_flow >= 0.0) || !(self.encoder.lambda_mmd >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if t.mode == TrainMode::Stagewise && t.ae_epochs > t.epochs {
            return Err(Error::Config(format!(
                "{} autoencoder epochs exceed {} total epochs",
                t.ae_epochs, t.epochs
            )));
        }
        if !(t.optimizer.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.eval.alpha > 0.0 && self.eval.alpha < 1.0) {
            return Err(Error::Config("significance threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::{JitVariant, Pooling, PriorMode};

    #[test]
    fn defaults_roundtrip() {
        let c = RunConfig::default();
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = RunConfig::from_toml(
            r#"
            seed = 3
            [transport]
            variant = "vx"
            pooling = "mean"
            prior = { kind = "gaussian_mix", mix = 0.5 }
            [train]
            epochs = 2
            "#,
        )
        .unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.transport.variant, JitVariant::Vx);
        assert_eq!(c.transport.pooling, Pooling::Mean);
        assert_eq!(c.transport.prior, PriorMode::GaussianMix { mix: 0.5 });
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.train.cells, TrainConfig::default().cells);
        let again = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn bad_files_are_config_errors() {
        assert!(matches!(RunConfig::from_toml("nonsense = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[train]\nepochs = -1"), Err(Error::Config(_))));
        let mut c = RunConfig::default();
        c.train.lambda_flow = -1.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
