//! Pipeline configuration: one TOML document with a section per stage.
//! Every field is written out by [`PipelineConfig::default_toml`], so a
//! generated config has no hidden defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::AlignConfig;
use crate::dataset::{Split, SynthConfig};
use crate::geometry::{GenStageConfig, Mode};
use crate::metrics::NwayConfig;
use crate::reasoning::RetryPolicy;
use crate::renderer::ViewConfig;
use crate::toydiffusion::DiffusionConfig;
use crate::util::sha256_hex;

/// Prefix of the environment variables that override provider endpoints,
/// e.g. `BRAIN3D_REASONER_ENDPOINT`.
pub const ENV_PREFIX: &str = "BRAIN3D_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Io { path: String, message: String },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    /// Built-in deterministic stand-in.
    Mock,
    /// Local toy decoder from trained checkpoints (decoder only).
    Diffusion,
    Http,
    Subprocess,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderSpec {
    pub kind: ProviderKind,
    pub id: String,
    /// URL for `http`; ignored otherwise.
    pub endpoint: String,
    /// Program and arguments for `subprocess`.
    pub command: Vec<String>,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
}

impl ProviderSpec {
    pub fn mock(id: &str) -> Self {
        Self {
            kind: ProviderKind::Mock,
            id: id.into(),
            endpoint: String::new(),
            command: Vec::new(),
            timeout_secs: 120,
            max_in_flight: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProvidersSection {
    pub decoder: ProviderSpec,
    pub reasoner: ProviderSpec,
    pub t2i: ProviderSpec,
    pub to3d: ProviderSpec,
    pub embedder: ProviderSpec,
    pub perceptual: ProviderSpec,
    pub classifier: ProviderSpec,
}

impl ProvidersSection {
    pub fn named(&self) -> [(&'static str, &ProviderSpec); 7] {
        [
            ("decoder", &self.decoder),
            ("reasoner", &self.reasoner),
            ("t2i", &self.t2i),
            ("to3d", &self.to3d),
            ("embedder", &self.embedder),
            ("perceptual", &self.perceptual),
            ("classifier", &self.classifier),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut ProviderSpec); 7] {
        [
            ("decoder", &mut self.decoder),
            ("reasoner", &mut self.reasoner),
            ("t2i", &mut self.t2i),
            ("to3d", &mut self.to3d),
            ("embedder", &mut self.embedder),
            ("perceptual", &mut self.perceptual),
            ("classifier", &mut self.classifier),
        ]
    }
}

impl Default for ProvidersSection {
    fn default() -> Self {
        Self {
            decoder: ProviderSpec::mock("mock-stimulus-decoder"),
            reasoner: ProviderSpec::mock("mock-hue"),
            t2i: ProviderSpec::mock("mock-procedural-t2i"),
            to3d: ProviderSpec::mock("mock-primitive-3d"),
            embedder: ProviderSpec::mock("toy-color-histogram"),
            perceptual: ProviderSpec::mock("toy-gradient-features"),
            classifier: ProviderSpec::mock("toy-template-classifier"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub manifest: PathBuf,
    /// Trials to run; empty means every trial of `split`.
    pub trials: Vec<String>,
    pub split: Split,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { manifest: PathBuf::from("data/manifest.jsonl"), trials: Vec::new(), split: Split::Test }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NwaySpec {
    pub n: usize,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub nway: Vec<NwaySpec>,
    pub nway_trials: usize,
    pub num_classes: usize,
    pub is_splits: usize,
    pub histogram_bins: usize,
    pub classifier_sharpness: f64,
    pub perceptual_sides: Vec<u32>,
    /// Side of the decoded image handed to reasoning and image-to-3D.
    pub decoded_side: u32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            nway: [(2, 1), (10, 1), (10, 2), (50, 1), (50, 2)].map(|(n, k)| NwaySpec { n, k }).to_vec(),
            nway_trials: 20,
            num_classes: 50,
            is_splits: 10,
            histogram_bins: 4,
            classifier_sharpness: 50.0,
            perceptual_sides: vec![32, 16, 8],
            decoded_side: 64,
        }
    }
}

impl EvalConfig {
    pub fn nway_configs(&self, seed: u64) -> Vec<NwayConfig> {
        self.nway
            .iter()
            .map(|s| NwayConfig { n: s.n, k: s.k, trials: self.nway_trials, seed, num_classes: self.num_classes })
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for c in self.nway_configs(0) {
            c.validate().map_err(|e| ConfigError::Invalid(format!("evaluation.nway: {e}")))?;
        }
        if self.is_splits == 0 || self.histogram_bins == 0 || self.decoded_side == 0 {
            return Err(ConfigError::Invalid("evaluation counts must be positive".into()));
        }
        if self.perceptual_sides.is_empty() || self.perceptual_sides.contains(&0) {
            return Err(ConfigError::Invalid("evaluation.perceptual_sides must be non-empty and positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrySection {
    pub max_attempts: u32,
    pub backoff_secs: Vec<f64>,
}

impl Default for RetrySection {
    fn default() -> Self {
        Self { max_attempts: 3, backoff_secs: vec![1.0, 2.0, 4.0] }
    }
}

impl RetrySection {
    pub fn policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_attempts: self.max_attempts,
            transport_backoff: self.backoff_secs.iter().map(|s| std::time::Duration::from_secs_f64(*s)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub mode: Mode,
    pub workers: usize,
    pub cache_dir: PathBuf,
    pub output_dir: PathBuf,
    /// Holds the alignment and denoiser checkpoints.
    pub models_dir: PathBuf,
    pub dataset: DatasetSection,
    pub synth: SynthConfig,
    pub align: AlignConfig,
    pub diffusion: DiffusionConfig,
    pub generation: GenStageConfig,
    pub views: ViewConfig,
    pub evaluation: EvalConfig,
    pub retry: RetrySection,
    pub providers: ProvidersSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: Mode::Full,
            workers: 4,
            cache_dir: PathBuf::from("cache"),
            output_dir: PathBuf::from("out"),
            models_dir: PathBuf::from("models"),
            dataset: DatasetSection::default(),
            synth: SynthConfig::default(),
            align: AlignConfig::default(),
            diffusion: DiffusionConfig::default(),
            generation: GenStageConfig::default(),
            views: ViewConfig::default(),
            evaluation: EvalConfig::default(),
            retry: RetrySection::default(),
            providers: ProvidersSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), message: e.to_string() })?;
        Self::from_toml(&text)
    }

    pub fn default_toml() -> String {
        toml::to_string_pretty(&Self::default()).expect("default config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.workers == 0 {
            return Err(ConfigError::Invalid("workers must be >= 1".into()));
        }
        self.align.validate().map_err(|e| ConfigError::Invalid(format!("align: {e}")))?;
        self.diffusion.validate().map_err(|e| ConfigError::Invalid(format!("diffusion: {e}")))?;
        self.generation.validate().map_err(|e| ConfigError::Invalid(format!("generation: {e}")))?;
        crate::renderer::canonical_views(&self.views).map_err(|e| ConfigError::Invalid(format!("views: {e}")))?;
        self.evaluation.validate()?;
        if self.retry.max_attempts == 0 {
            return Err(ConfigError::Invalid("retry.max_attempts must be >= 1".into()));
        }
        if self.retry.backoff_secs.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(ConfigError::Invalid("retry.backoff_secs must be finite and >= 0".into()));
        }
        for (name, spec) in self.providers.named() {
            if spec.max_in_flight == 0 {
                return Err(ConfigError::Invalid(format!("providers.{name}.max_in_flight must be >= 1")));
            }
            if spec.kind == ProviderKind::Diffusion && name != "decoder" {
                return Err(ConfigError::Invalid(format!(
                    "providers.{name}: kind diffusion is only valid for the decoder"
                )));
            }
            if spec.kind == ProviderKind::Http && spec.endpoint.is_empty() {
                return Err(ConfigError::Invalid(format!("providers.{name}: http provider needs an endpoint")));
            }
            if spec.kind == ProviderKind::Subprocess && spec.command.is_empty() {
                return Err(ConfigError::Invalid(format!("providers.{name}: subprocess provider needs a command")));
            }
        }
        Ok(())
    }

    /// Applies `BRAIN3D_<PROVIDER>_ENDPOINT` overrides from `lookup`.
    pub fn apply_env_overrides(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        for (name, spec) in self.providers.named_mut() {
            if let Some(url) = lookup(&format!("{ENV_PREFIX}{}_ENDPOINT", name.to_uppercase())) {
                spec.endpoint = url;
            }
        }
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_toml_round_trips_and_is_explicit() {
        let text = PipelineConfig::default_toml();
        assert_eq!(PipelineConfig::from_toml(&text).unwrap(), PipelineConfig::default());
        for needle in [
            "azimuth_step = 60.0",
            "guidance_scale = 2.0",
            "t2i_steps = 30",
            "t2i_guidance = 4.5",
            "texture_resolution = 1024",
            "nway_trials = 20",
            "is_splits = 10",
            "temperature = 0.07",
            "max_attempts = 3",
            "[providers.reasoner]",
        ] {
            assert!(text.contains(needle), "missing {needle}");
        }
    }

    #[test]
    fn invalid_values_rejected() {
        let mut c = PipelineConfig::default();
        c.workers = 0;
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::default();
        c.evaluation.num_classes = 20;
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::default();
        c.providers.reasoner.kind = ProviderKind::Http;
        assert!(c.validate().is_err());
        c.providers.reasoner.endpoint = "http://localhost:1".into();
        assert!(c.validate().is_ok());
        assert!(PipelineConfig::from_toml("seed = 1\nbogus = 2\n").is_err());
        assert!(PipelineConfig::from_toml("mode = \"sideways\"\n").is_err());
    }

    #[test]
    fn env_overrides_touch_endpoints_only() {
        let mut c = PipelineConfig::default();
        let before = c.clone();
        c.apply_env_overrides(|k| (k == "BRAIN3D_T2I_ENDPOINT").then(|| "http://gpu:9000".to_string()));
        assert_eq!(c.providers.t2i.endpoint, "http://gpu:9000");
        c.providers.t2i.endpoint.clear();
        assert_eq!(c, before);
    }
}
