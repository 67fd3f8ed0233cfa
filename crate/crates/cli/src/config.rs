//! The versioned pipeline configuration file.

use std::path::Path;

use fewshot_core::eval::ExperimentConfig;
use fewshot_core::preprocess::PreprocessConfig;
use fewshot_core::synth::SynthConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub ratio: [f64; 3],
    pub max_abandoned: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            ratio: [0.5, 0.25, 0.25],
            max_abandoned: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub trials: usize,
    /// Also draw backbone architectures, keeping the template's kind.
    pub sample_architecture: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            trials: 20,
            sample_architecture: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub repeats: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig { repeats: 50 }
    }
}

/// Everything a run needs. The top-level seed is the master seed; it
/// replaces the seeds of the synth and experiment sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub synth: SynthConfig,
    /// Write raw CSV recordings next to the generated dataset.
    #[serde(default)]
    pub export_csv: bool,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub experiment: ExperimentConfig,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            version: CONFIG_VERSION,
            seed: 0,
            synth: SynthConfig::default(),
            export_csv: false,
            preprocess: PreprocessConfig::default(),
            split: SplitConfig::default(),
            experiment: ExperimentConfig::default(),
            search: SearchConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(CliError::Config(format!(
                "version {} is not supported (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Applies a seed override and spreads the master seed to the sections.
    pub fn resolve(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.synth.seed = self.seed;
        self.experiment.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.preprocess.validate()?;
        self.experiment.validate()?;
        if self.search.trials == 0 {
            return Err(CliError::Config("search.trials must be at least 1".into()));
        }
        if self.evaluation.repeats < 2 {
            return Err(CliError::Config(format!(
                "evaluation.repeats is {}, at least 2 required",
                self.evaluation.repeats
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = PipelineConfig::from_json(r#"{"version": 1}"#).unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn version_is_checked() {
        let err = PipelineConfig::from_json(r#"{"version": 2}"#).unwrap_err();
        assert!(err.to_string().contains("version 2"));
        assert!(PipelineConfig::from_json("{}").is_err());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = PipelineConfig::from_json(r#"{"version": 1, "sead": 3}"#).unwrap_err();
        assert!(err.to_string().contains("sead"), "{err}");
    }

    #[test]
    fn bad_optimizer_names_the_allowed_set() {
        let err = PipelineConfig::from_json(r#"{"version": 1, "experiment": {"optimizer": "adagrad"}}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("adam, sgd, adamw, rmsprop"), "{err}");
    }

    #[test]
    fn out_of_range_steps_name_field_and_range() {
        let cfg = PipelineConfig::from_json(r#"{"version": 1, "experiment": {"maml": {"inner_lr": 1e-5, "meta_lr": 1e-5, "adaptation_steps": 20, "order": "second"}}}"#)
            .unwrap();
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("maml.adaptation_steps") && err.contains("[5, 15]"), "{err}");
    }

    #[test]
    fn seed_override_reaches_every_section() {
        let cfg = PipelineConfig::default().resolve(Some(42));
        assert_eq!((cfg.seed, cfg.synth.seed, cfg.experiment.seed), (42, 42, 42));
        let cfg = PipelineConfig {
            seed: 5,
            ..PipelineConfig::default()
        }
        .resolve(None);
        assert_eq!(cfg.experiment.seed, 5);
    }
}
