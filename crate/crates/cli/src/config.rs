//! One JSON document configures every command.

use std::path::Path;

use anyhow::Context;
use mmfuse::encoder::EncoderConfig;
use mmfuse::introspect::{PairingSummary, SmoothGradConfig, SALIENCY_BLUR_SIGMA};
use mmfuse::optim::TrainConfig;
use mmfuse::probe::SearchSpace;
use mmfuse::synthdata::GeneratorConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaliencyConfig {
    pub smoothgrad: SmoothGradConfig,
    pub blur_sigma: f64,
    pub summary: PairingSummary,
    /// Percentile of in-mask mean saliency reported as the display threshold.
    pub percentile: f64,
    /// Cap on holdout subjects used, taken in row order; 0 for all.
    pub max_subjects: usize,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        Self {
            smoothgrad: SmoothGradConfig::default(),
            blur_sigma: SALIENCY_BLUR_SIGMA,
            summary: PairingSummary::MeanInMask,
            percentile: 90.0,
            max_subjects: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Model name in reports; defaults to the preset.
    pub name: Option<String>,
    /// Copied into every stage's own seed when the config is resolved.
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub probe: SearchSpace,
    pub saliency: SaliencyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: None,
            seed: 0,
            generator: GeneratorConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            probe: SearchSpace::default(),
            saliency: SaliencyConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads a config file; parse errors carry the line and column.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(CliError::Config)?;
        serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))
            .map_err(CliError::Config)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// Applies the seed override, propagates the global seed and checks
    /// every section.
    pub fn resolve(mut self, seed: Option<u64>) -> Result<Self, CliError> {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.generator.seed = self.seed;
        self.train.seed = self.seed;
        self.saliency.smoothgrad.seed = self.seed;
        let check = || -> mmfuse::Result<()> {
            self.generator.validate()?;
            self.encoder.validate()?;
            self.train.validate()?;
            self.train.objective()?;
            self.probe.validate()?;
            if !(0.0..=100.0).contains(&self.saliency.percentile) {
                return Err(mmfuse::Error::Config("saliency.percentile must be in [0, 100]".into()));
            }
            if self.saliency.blur_sigma < 0.0 {
                return Err(mmfuse::Error::Config("saliency.blur_sigma must be >= 0".into()));
            }
            Ok(())
        };
        check().map_err(CliError::from)?;
        Ok(self)
    }

    pub fn model_name(&self) -> String {
        match (&self.name, &self.train.graph) {
            (Some(n), _) => n.clone(),
            (None, Some(_)) => "custom".into(),
            (None, None) => self.train.preset.clone(),
        }
    }

    pub fn preset_label(&self) -> String {
        if self.train.graph.is_some() {
            "custom".into()
        } else {
            self.train.preset.clone()
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        let c: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 1}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"epoch": 1}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"saliency": {"smoothgrad": {"n": 1}}}"#).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = RunConfig::default().resolve(Some(7)).unwrap();
        assert_eq!((c.generator.seed, c.train.seed, c.saliency.smoothgrad.seed), (7, 7, 7));
        let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.resolve(None).unwrap(), c);
    }

    #[test]
    fn invalid_sections_are_config_errors() {
        let mut c = RunConfig::default();
        c.train.preset = "XYZ".into();
        let err = c.resolve(None).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("valid presets"));
    }
}
