//! Run configuration, read from TOML and overridable from the command line.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bayes::KlMode;
use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::losses::{JointWeights, KlWeightForm, TrainSchedule};
use crate::model::ModelConfig;
use crate::optim::OptimizerKind;

/// Learning rate of the paper-fidelity preset.
pub const PAPER_LEARNING_RATE: f64 = 1e-6;

/// Everything a training or evaluation run needs.
///
/// Schema (TOML): top-level keys below, plus `[model]` ([`ModelConfig`]) and
/// `[synth]` ([`SynthConfig`]) tables. Missing keys take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub epochs: u32,
    pub batch_size: usize,
    pub seed: u64,
    pub ctc_weight: f64,
    pub ce_weight: f64,
    pub kl_mode: KlMode,
    pub kl_weight_form: KlWeightForm,
    pub schedule_divisor: u32,
    pub beam_width: usize,
    pub length_norm: bool,
    /// Draw fresh ε during evaluation decoding instead of using posterior means.
    pub sampled_eval: bool,
    /// Longest decoded output, end-of-sequence included.
    pub max_decode_len: usize,
    pub out_dir: PathBuf,
    pub train_data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    /// Seed for generating the eval split when no eval file is given.
    pub eval_seed: u64,
    pub eval_samples: usize,
    pub model: ModelConfig,
    pub synth: SynthConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let mut model = ModelConfig::desk();
        model.feature_dim = synth.feature_dim;
        model.vocab_size = synth.content_tokens + 4;
        Self {
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            epochs: 30,
            batch_size: 4,
            seed: 1,
            ctc_weight: 0.3,
            ce_weight: 0.7,
            kl_mode: KlMode::Standard,
            kl_weight_form: KlWeightForm::Printed,
            schedule_divisor: 10,
            beam_width: 10,
            length_norm: false,
            sampled_eval: false,
            max_decode_len: 20,
            out_dir: PathBuf::from("runs/default"),
            train_data: None,
            eval_data: None,
            eval_seed: 1001,
            eval_samples: 100,
            model,
            synth,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn joint_weights(&self) -> JointWeights {
        JointWeights {
            ctc: self.ctc_weight,
            ce: self.ce_weight,
        }
    }

    pub fn schedule(&self) -> Result<TrainSchedule> {
        TrainSchedule::new(self.epochs, self.schedule_divisor, self.kl_weight_form)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.synth.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.beam_width == 0 {
            return Err(Error::Config("beam_width must be at least 1".into()));
        }
        if self.max_decode_len == 0 {
            return Err(Error::Config("max_decode_len must be at least 1".into()));
        }
        if self.schedule_divisor == 0 {
            return Err(Error::Config("schedule_divisor must be at least 1".into()));
        }
        if self.model.max_target_len < self.max_decode_len + 1 {
            return Err(Error::Config(
                "model.max_target_len must exceed max_decode_len".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_is_lossless() {
        let mut c = TrainConfig::default();
        c.learning_rate = PAPER_LEARNING_RATE;
        c.kl_mode = KlMode::PaperVerbatim;
        c.train_data = Some("a/b.bspf".into());
        c.synth.noise = 0.123456789;
        let text = c.to_toml().unwrap();
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn defaults_are_valid_and_partial_files_fill_in() {
        TrainConfig::default().validate().unwrap();
        let c = TrainConfig::from_toml("epochs = 3\n[model]\nd_model = 32\n").unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.model.d_model, 32);
        assert_eq!(c.ctc_weight, 0.3);
        assert!(TrainConfig::from_toml("bogus = 1\n").is_err());
    }
}
