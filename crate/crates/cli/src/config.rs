//! Experiment configuration files.
//!
//! A config file is a JSON object whose sections are all optional; missing
//! fields take their defaults and the resolved result is written back out as
//! `config.json` next to every run's outputs.

use std::path::{Path, PathBuf};

use mqmha::harness::{EncoderConfig, ModelConfig, PoolingChoice, SyntheticSpeakerSpec, TrainConfig};
use mqmha::loss::LossConfig;
use mqmha::pooling::PoolingConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};

/// Hidden width of two-layer attention in the default experiment.
pub const DESK_HIDDEN: usize = 64;

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "MQMHA_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";

/// Overrides applied to every grid point of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSettings {
    /// Intra-speaker noise of the sweep dataset when it is generated rather
    /// than loaded from `data_dir`.
    pub noise_scale: f64,
    pub max_steps: usize,
    pub validate_every: usize,
    pub margin_warmup_steps: usize,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            noise_scale: 3.0,
            max_steps: 300,
            validate_every: 100,
            margin_warmup_steps: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: SyntheticSpeakerSpec,
    /// Saved dataset directory; when absent, commands that need data fail or
    /// generate it from `data`.
    pub data_dir: Option<PathBuf>,
    pub encoder: EncoderConfig,
    pub pooling: PoolingChoice,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub sweep: SweepSettings,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Defaults for a given dataset: MQMHA (q=4, h=16) on the encoder's final
    /// width and the inter-topK loss over every speaker.
    pub fn defaults_for(data: SyntheticSpeakerSpec) -> Self {
        let encoder = EncoderConfig::default();
        let channels = *encoder.widths.last().expect("default encoder has layers");
        let classes = data.num_speakers;
        Self {
            data,
            data_dir: None,
            encoder,
            pooling: PoolingChoice::Mqmha(PoolingConfig::new(channels, 16, 4, 1).with_hidden(DESK_HIDDEN)),
            loss: LossConfig::inter_topk(classes),
            train: TrainConfig::default(),
            sweep: SweepSettings::default(),
            output_dir: None,
        }
    }

    /// Resolves a (possibly partial) JSON document against the defaults.
    /// `pooling` is replaced wholesale; every other section is merged field
    /// by field.
    pub fn from_json(text: &str) -> CliResult<Self> {
        Self::resolve(text, None)
    }

    /// As [`Self::from_json`], with the data section taken from a saved
    /// dataset instead of the document.
    pub fn from_json_with_data(text: &str, data: SyntheticSpeakerSpec) -> CliResult<Self> {
        Self::resolve(text, Some(data))
    }

    fn resolve(text: &str, data: Option<SyntheticSpeakerSpec>) -> CliResult<Self> {
        let file: Value = serde_json::from_str(text).map_err(CliError::validation)?;
        let Value::Object(file) = file else {
            return Err(CliError::Validation("config file must hold a JSON object".into()));
        };
        let overridden = data.is_some();
        let data = match data {
            Some(spec) => spec,
            None => {
                let mut data = serde_json::to_value(SyntheticSpeakerSpec::default())?;
                if let Some(section) = file.get("data") {
                    merge(&mut data, section);
                }
                serde_json::from_value(data).map_err(|e| CliError::Validation(format!("data: {e}")))?
            }
        };
        let mut resolved = serde_json::to_value(Self::defaults_for(data))?;
        for (key, value) in &file {
            if key == "data" && overridden {
                continue;
            }
            match resolved.get_mut(key.as_str()) {
                Some(slot) if key != "pooling" => merge(slot, value),
                Some(slot) => *slot = value.clone(),
                None => return Err(CliError::Validation(format!("unknown config section {key:?}"))),
            }
        }
        serde_json::from_value(resolved).map_err(CliError::validation)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> CliResult<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Writes the resolved config as `config.json` under `dir`.
    pub fn echo(&self, dir: &Path) -> CliResult<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.json"), self.to_json()?)?;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            feature_dim: self.data.feature_dim,
            encoder: self.encoder.clone(),
            pooling: self.pooling.clone(),
            loss: self.loss.clone(),
        }
    }

    /// Checks every section; the error names the offending field.
    pub fn validate(&self) -> CliResult<()> {
        self.data.validate().map_err(CliError::validation)?;
        self.train.validate().map_err(CliError::validation)?;
        self.model_config().validate().map_err(CliError::validation)?;
        if self.loss.classes != self.data.num_speakers {
            return Err(CliError::Validation(format!(
                "loss.classes: is {} but data.num_speakers is {}",
                self.loss.classes, self.data.num_speakers
            )));
        }
        let s = &self.sweep;
        if !(s.noise_scale >= 0.0 && s.noise_scale.is_finite()) {
            return Err(CliError::Validation("sweep.noise_scale: must be non-negative".into()));
        }
        for (field, v) in [
            ("sweep.max_steps", s.max_steps),
            ("sweep.validate_every", s.validate_every),
            ("sweep.margin_warmup_steps", s.margin_warmup_steps),
        ] {
            if v == 0 {
                return Err(CliError::Validation(format!("{field}: must be positive")));
            }
        }
        Ok(())
    }

    /// `output_dir` if set, else `<root>/<command>` with the root taken from
    /// [`OUTPUT_ROOT_ENV`].
    pub fn output_dir_for(&self, command: &str) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| {
            let root = std::env::var_os(OUTPUT_ROOT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT));
            root.join(command)
        })
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::defaults_for(SyntheticSpeakerSpec::default())
    }
}

fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(base), Value::Object(patch)) => merge_maps(base, patch),
        (base, patch) => *base = patch.clone(),
    }
}

fn merge_maps(base: &mut Map<String, Value>, patch: &Map<String, Value>) {
    for (k, v) in patch {
        match base.get_mut(k) {
            Some(slot) => merge(slot, v),
            None => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_resolves_to_defaults() {
        assert_eq!(ExperimentConfig::from_json("{}").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn loss_classes_follow_the_speaker_count() {
        let c = ExperimentConfig::from_json(r#"{"data": {"num_speakers": 7}, "loss": {"k_top": 2}}"#).unwrap();
        assert_eq!(c.loss.classes, 7);
        assert_eq!(c.loss.k_top, 2);
        assert_eq!(c.loss.margin, 0.2);
        c.validate().unwrap();
    }

    #[test]
    fn pooling_section_replaces_the_default() {
        let c = ExperimentConfig::from_json(r#"{"pooling": {"kind": "statistics"}}"#).unwrap();
        assert_eq!(c.pooling, PoolingChoice::statistics());
        let c = ExperimentConfig::from_json(
            r#"{"pooling": {"kind": "mqmha", "channels": 32, "heads": 8, "queries": 2, "depth": 2}}"#,
        )
        .unwrap();
        c.validate().unwrap();
    }

    #[test]
    fn echoed_config_parses_back_identically() {
        let c = ExperimentConfig::from_json(r#"{"train": {"max_steps": 17}, "output_dir": "x"}"#).unwrap();
        assert_eq!(ExperimentConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
    }

    #[test]
    fn saved_dataset_spec_replaces_the_data_section() {
        let spec = SyntheticSpeakerSpec {
            num_speakers: 4,
            ..SyntheticSpeakerSpec::default()
        };
        let c = ExperimentConfig::from_json_with_data(r#"{"data": {"num_speakers": 9}}"#, spec.clone()).unwrap();
        assert_eq!(c.data, spec);
        assert_eq!(c.loss.classes, 4);
    }

    #[test]
    fn unknown_keys_are_validation_errors() {
        for text in [r#"{"bogus": 1}"#, r#"{"train": {"lr": 1}}"#, "[1]", "{"] {
            assert!(matches!(ExperimentConfig::from_json(text), Err(CliError::Validation(_))), "{text}");
        }
    }

    #[test]
    fn validation_names_the_field() {
        let c = ExperimentConfig::from_json(
            r#"{"pooling": {"kind": "mqmha", "channels": 32, "heads": 5, "queries": 1, "depth": 1}}"#,
        )
        .unwrap();
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("pooling.heads"), "{err}");
    }
}
