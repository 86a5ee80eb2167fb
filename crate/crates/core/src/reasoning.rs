//! Geometry-aware description of a decoded image by a multimodal language
//! model: prompt template, provider contract, output validation and retries.

use std::fmt;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::dataset::{EegTrial, StimulusImage};
use crate::image::{rgb_to_hue_sat, RgbImage};
use crate::providers::{image_payload, text_field, CallCounter, InflightLimiter, ProviderError, Transport};
use crate::stage::{Stage, StageError};
use crate::util::sha256_hex;

pub const DEFAULT_TEMPLATE_ASSET: &str = include_str!("../assets/prompt_template.txt");
pub const SECTION_DELIMITER: &str = "---";
pub const MAX_DESCRIPTION_CHARS: usize = 4096;
pub const PREAMBLES: [&str; 2] = ["Here is", "Sure"];
pub const BULLETS: [&str; 3] = ["-", "*", "•"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub system_text: String,
    pub user_text: String,
    pub version: String,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TemplateError {
    #[error("template has no \"version:\" first line")]
    MissingVersion,
    #[error("template has no \"---\" line between system and user text")]
    MissingDelimiter,
    #[error("template {0} text is empty")]
    Empty(&'static str),
}

impl PromptTemplate {
    /// `version: <v>` line, system text, a `---` line, user text.
    pub fn parse(text: &str) -> Result<Self, TemplateError> {
        let (first, rest) = text.split_once('\n').ok_or(TemplateError::MissingVersion)?;
        let version = first.strip_prefix("version:").ok_or(TemplateError::MissingVersion)?.trim().to_string();
        let mut system = Vec::new();
        let mut user = Vec::new();
        let mut seen = false;
        for line in rest.lines() {
            if !seen && line.trim_end() == SECTION_DELIMITER {
                seen = true;
            } else if seen {
                user.push(line);
            } else {
                system.push(line);
            }
        }
        if !seen {
            return Err(TemplateError::MissingDelimiter);
        }
        let system_text = system.join("\n").trim().to_string();
        let user_text = user.join("\n").trim().to_string();
        if system_text.is_empty() {
            return Err(TemplateError::Empty("system"));
        }
        if user_text.is_empty() {
            return Err(TemplateError::Empty("user"));
        }
        Ok(Self { system_text, user_text, version })
    }

    pub fn to_asset_text(&self) -> String {
        format!("version: {}\n{}\n{SECTION_DELIMITER}\n{}\n", self.version, self.system_text, self.user_text)
    }

    pub fn content_hash(&self) -> String {
        sha256_hex(self.to_asset_text().as_bytes())
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATE_ASSET).expect("bundled template parses")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticDescription {
    pub text: String,
    pub source_image_id: String,
    pub provider_id: String,
    pub attempt: u32,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ValidationError {
    #[error("description is empty")]
    Empty,
    #[error("description spans more than one line")]
    MultiLine,
    #[error("description starts with bullet marker {0:?}")]
    Bullet(&'static str),
    #[error("description contains a markdown fence")]
    Fence,
    #[error("description has {0} characters, limit is {MAX_DESCRIPTION_CHARS}")]
    TooLong(usize),
    #[error("description starts with preamble {0:?}")]
    Preamble(&'static str),
}

/// Trims the raw output and checks it is a single bare paragraph.
pub fn validate_description(raw: &str) -> Result<String, ValidationError> {
    let text = raw.trim();
    if text.is_empty() {
        return Err(ValidationError::Empty);
    }
    if text.contains(['\n', '\r']) {
        return Err(ValidationError::MultiLine);
    }
    if let Some(b) = BULLETS.iter().find(|b| text.starts_with(**b)) {
        return Err(ValidationError::Bullet(b));
    }
    if text.contains("```") {
        return Err(ValidationError::Fence);
    }
    let chars = text.chars().count();
    if chars > MAX_DESCRIPTION_CHARS {
        return Err(ValidationError::TooLong(chars));
    }
    let lower = text.to_lowercase();
    if let Some(p) = PREAMBLES.iter().find(|p| lower.starts_with(&p.to_lowercase())) {
        return Err(ValidationError::Preamble(p));
    }
    Ok(text.to_string())
}

/// Text generation from `(system, user, image)`.
pub trait ReasonerProvider: Send + Sync {
    fn id(&self) -> &str;
    fn describe(&self, system: &str, user: &str, image: &StimulusImage) -> Result<String, ProviderError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    /// Provider calls allowed when outputs keep failing validation.
    pub max_attempts: u32,
    /// Sleep before each retry after a transport error or timeout; its
    /// length is the number of such retries.
    pub transport_backoff: Vec<Duration>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3, transport_backoff: [1, 2, 4].map(Duration::from_secs).to_vec() }
    }
}

impl RetryPolicy {
    /// Same retry counts with no sleeping.
    pub fn without_sleep(&self) -> Self {
        Self { max_attempts: self.max_attempts, transport_backoff: vec![Duration::ZERO; self.transport_backoff.len()] }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ReasonError {
    #[error("image {0} is empty")]
    InvalidImage(String),
    #[error("provider failed after {attempts} attempt(s): {source}")]
    Provider { attempts: u32, source: ProviderError },
    #[error("output failed validation after {attempts} attempt(s) ({reason}); last output: {last_output:?}")]
    Validation { attempts: u32, reason: ValidationError, last_output: String },
}

pub fn reason(
    image: &StimulusImage,
    template: &PromptTemplate,
    provider: &dyn ReasonerProvider,
) -> Result<SemanticDescription, ReasonError> {
    reason_with_policy(image, template, provider, &RetryPolicy::default())
}

pub fn reason_with_policy(
    image: &StimulusImage,
    template: &PromptTemplate,
    provider: &dyn ReasonerProvider,
    policy: &RetryPolicy,
) -> Result<SemanticDescription, ReasonError> {
    if image.image.width() == 0 || image.image.height() == 0 {
        return Err(ReasonError::InvalidImage(image.image_id.clone()));
    }
    let mut attempts = 0u32;
    let mut transport_retries = 0usize;
    let mut validation_failures = 0u32;
    loop {
        attempts += 1;
        match provider.describe(&template.system_text, &template.user_text, image) {
            Ok(raw) => match validate_description(&raw) {
                Ok(text) => {
                    return Ok(SemanticDescription {
                        text,
                        source_image_id: image.image_id.clone(),
                        provider_id: provider.id().to_string(),
                        attempt: attempts,
                    })
                }
                Err(reason) => {
                    validation_failures += 1;
                    log::warn!("description for {} rejected ({reason}), attempt {attempts}", image.image_id);
                    if validation_failures >= policy.max_attempts {
                        return Err(ReasonError::Validation { attempts, reason, last_output: raw });
                    }
                }
            },
            Err(e) if e.is_retryable() && transport_retries < policy.transport_backoff.len() => {
                let wait = policy.transport_backoff[transport_retries];
                transport_retries += 1;
                log::warn!("reasoner {} failed ({e}), retrying in {wait:?}", provider.id());
                if !wait.is_zero() {
                    thread::sleep(wait);
                }
            }
            Err(source) => return Err(ReasonError::Provider { attempts, source }),
        }
    }
}

/// `reason(decode(trial))`, with failures tagged by stage.
pub fn compose_pipeline_description<D, R, E1, E2>(
    trial: &EegTrial,
    decode: D,
    reason: R,
) -> Result<SemanticDescription, StageError>
where
    D: FnOnce(&EegTrial) -> Result<StimulusImage, E1>,
    R: FnOnce(&StimulusImage) -> Result<SemanticDescription, E2>,
    E1: fmt::Display,
    E2: fmt::Display,
{
    let decoded = decode(trial).map_err(|e| StageError::new(Stage::Decode, e))?;
    reason(&decoded).map_err(|e| StageError::new(Stage::Reason, e))
}

/// Reasoner behind a JSON transport. Request: `{system, user, image:
/// {mime, data}, params}`; response: `{text}` or `{error}`.
pub struct RemoteReasoner {
    id: String,
    transport: Box<dyn Transport>,
    limiter: InflightLimiter,
    params: serde_json::Value,
    calls: CallCounter,
}

impl RemoteReasoner {
    pub fn new(id: impl Into<String>, transport: Box<dyn Transport>, max_in_flight: usize) -> Self {
        Self {
            id: id.into(),
            transport,
            limiter: InflightLimiter::new(max_in_flight),
            params: json!({}),
            calls: CallCounter::new(),
        }
    }

    /// Opaque decoding parameters passed through to the provider.
    pub fn with_params(mut self, params: serde_json::Value) -> Self {
        self.params = params;
        self
    }

    pub fn calls(&self) -> CallCounter {
        self.calls.clone()
    }
}

impl ReasonerProvider for RemoteReasoner {
    fn id(&self) -> &str {
        &self.id
    }

    fn describe(&self, system: &str, user: &str, image: &StimulusImage) -> Result<String, ProviderError> {
        let request = json!({
            "system": system,
            "user": user,
            "image": image_payload(&image.image),
            "params": self.params,
        });
        let _permit = self.limiter.acquire();
        self.calls.bump();
        let response = self.transport.call(&request)?;
        text_field(&response, "text")
    }
}

/// Colour names at 30 degree hue steps, starting at red.
pub const HUE_NAMES: [&str; 12] =
    ["red", "orange", "yellow", "lime", "green", "spring green", "cyan", "azure", "blue", "violet", "magenta", "rose"];

/// Name of the dominant saturated hue, or "grey" for an achromatic image.
pub fn dominant_colour_name(image: &RgbImage) -> &'static str {
    let mut bins = [0.0f64; 12];
    for y in 0..image.height() {
        for x in 0..image.width() {
            let (h, s) = rgb_to_hue_sat(image.get(x, y));
            if s > 0.25 {
                bins[((h * 12.0).round() as usize) % 12] += s;
            }
        }
    }
    let (best, weight) = bins.iter().enumerate().fold((0, 0.0), |acc, (i, &w)| if w > acc.1 { (i, w) } else { acc });
    if weight == 0.0 {
        "grey"
    } else {
        HUE_NAMES[best]
    }
}

/// Deterministic stand-in that names the image's dominant colour.
pub struct HueReasoner {
    calls: CallCounter,
}

impl HueReasoner {
    pub fn new() -> Self {
        Self { calls: CallCounter::new() }
    }

    pub fn calls(&self) -> CallCounter {
        self.calls.clone()
    }
}

impl Default for HueReasoner {
    fn default() -> Self {
        Self::new()
    }
}

impl ReasonerProvider for HueReasoner {
    fn id(&self) -> &str {
        "mock-hue"
    }

    fn describe(&self, _system: &str, _user: &str, image: &StimulusImage) -> Result<String, ProviderError> {
        self.calls.bump();
        let colour = dominant_colour_name(&image.image);
        Ok(format!(
            "A single {colour} object with smooth matte surfaces and rounded edges, presented as a clean 3D model on a plain white background"
        ))
    }
}

/// Returns scripted outputs in order, repeating the last one.
pub struct ScriptedReasoner {
    outputs: Vec<Result<String, ProviderError>>,
    calls: CallCounter,
}

impl ScriptedReasoner {
    pub fn new(outputs: Vec<Result<String, ProviderError>>) -> Self {
        assert!(!outputs.is_empty(), "scripted reasoner needs at least one output");
        Self { outputs, calls: CallCounter::new() }
    }

    pub fn constant(text: &str) -> Self {
        Self::new(vec![Ok(text.to_string())])
    }

    pub fn calls(&self) -> CallCounter {
        self.calls.clone()
    }
}

impl ReasonerProvider for ScriptedReasoner {
    fn id(&self) -> &str {
        "mock-scripted"
    }

    fn describe(&self, _system: &str, _user: &str, _image: &StimulusImage) -> Result<String, ProviderError> {
        let n = self.calls.get();
        self.calls.bump();
        self.outputs[n.min(self.outputs.len() - 1)].clone()
    }
}

/// Embeds the image id in a fixed sentence.
pub struct EchoReasoner;

impl ReasonerProvider for EchoReasoner {
    fn id(&self) -> &str {
        "mock-echo"
    }

    fn describe(&self, _system: &str, _user: &str, image: &StimulusImage) -> Result<String, ProviderError> {
        Ok(format!("A 3D model of object {} on a white background", image.image_id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::class_image;

    fn stimulus() -> StimulusImage {
        StimulusImage { image_id: "img_042".into(), class_label: 3, image: class_image(3, 16) }
    }

    fn quick() -> RetryPolicy {
        RetryPolicy::default().without_sleep()
    }

    #[test]
    fn default_template_matches_pinned_asset() {
        assert_eq!(
            sha256_hex(DEFAULT_TEMPLATE_ASSET.as_bytes()),
            "3af4204bdac2c753a7e5ff2d9fe72b2e4f0eb500b47ad4609debcd7649f69a5a"
        );
        let t = PromptTemplate::default();
        assert_eq!(t.version, "1");
        assert_eq!(t.system_text, "You are an expert in generating prompts for text-to-2D diffusion models.");
        assert!(t.user_text.starts_with("Create a prompt to be fed to the text-to-image model."));
        assert!(t.user_text.ends_with("No introduction, explanations or formatting."));
        assert_eq!(t.to_asset_text(), DEFAULT_TEMPLATE_ASSET);
        assert_eq!(t.content_hash(), sha256_hex(DEFAULT_TEMPLATE_ASSET.as_bytes()));
    }

    #[test]
    fn template_parse_errors() {
        assert_eq!(PromptTemplate::parse("no version\nx\n---\ny"), Err(TemplateError::MissingVersion));
        assert_eq!(PromptTemplate::parse("version: 1\nx\ny"), Err(TemplateError::MissingDelimiter));
        assert_eq!(PromptTemplate::parse("version: 1\n\n---\ny"), Err(TemplateError::Empty("system")));
        assert_eq!(PromptTemplate::parse("version: 1\nx\n---\n  "), Err(TemplateError::Empty("user")));
    }

    #[test]
    fn validators() {
        assert!(validate_description("A red ceramic mug, 3D model, white background").is_ok());
        assert_eq!(validate_description("  padded  \n").unwrap(), "padded");
        assert_eq!(validate_description(" "), Err(ValidationError::Empty));
        assert_eq!(validate_description("a\nb"), Err(ValidationError::MultiLine));
        assert_eq!(validate_description("- a mug"), Err(ValidationError::Bullet("-")));
        assert_eq!(validate_description("* a mug"), Err(ValidationError::Bullet("*")));
        assert_eq!(validate_description("• a mug"), Err(ValidationError::Bullet("•")));
        assert_eq!(validate_description("a ```mug```"), Err(ValidationError::Fence));
        assert_eq!(validate_description(&"x".repeat(4097)), Err(ValidationError::TooLong(4097)));
        assert!(validate_description(&"x".repeat(4096)).is_ok());
        assert_eq!(validate_description("Here is a prompt: a mug"), Err(ValidationError::Preamble("Here is")));
        assert_eq!(validate_description("Sure! A mug"), Err(ValidationError::Preamble("Sure")));
    }

    #[test]
    fn validation_is_idempotent() {
        for raw in ["  A mug  ", "A blue vase with a glossy finish", "x"] {
            let once = validate_description(raw).unwrap();
            assert_eq!(validate_description(&once).unwrap(), once);
        }
    }

    #[test]
    fn accepted_on_first_attempt() {
        let p = ScriptedReasoner::constant("A red ceramic mug, 3D model, white background");
        let d = reason_with_policy(&stimulus(), &PromptTemplate::default(), &p, &quick()).unwrap();
        assert_eq!(d.attempt, 1);
        assert_eq!(d.text, "A red ceramic mug, 3D model, white background");
        assert_eq!(d.source_image_id, "img_042");
        assert_eq!(d.provider_id, "mock-scripted");
    }

    #[test]
    fn bullets_are_retried_then_terminal() {
        let p = ScriptedReasoner::constant("- a mug\n- white background");
        let err = reason_with_policy(&stimulus(), &PromptTemplate::default(), &p, &quick()).unwrap_err();
        match err {
            ReasonError::Validation { attempts, last_output, .. } => {
                assert_eq!(attempts, 3);
                assert_eq!(last_output, "- a mug\n- white background");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(p.calls().get(), 3);

        let p = ScriptedReasoner::new(vec![Ok("- bullet".into()), Ok("A mug".into())]);
        let d = reason_with_policy(&stimulus(), &PromptTemplate::default(), &p, &quick()).unwrap();
        assert_eq!(d.attempt, 2);
    }

    #[test]
    fn transport_errors_back_off_then_surface() {
        let flaky = ScriptedReasoner::new(vec![
            Err(ProviderError::Transport("reset".into())),
            Err(ProviderError::Timeout(Duration::from_secs(1))),
            Ok("A mug".into()),
        ]);
        let d = reason_with_policy(&stimulus(), &PromptTemplate::default(), &flaky, &quick()).unwrap();
        assert_eq!(d.attempt, 3);

        let dead = ScriptedReasoner::new(vec![Err(ProviderError::Transport("down".into()))]);
        let err = reason_with_policy(&stimulus(), &PromptTemplate::default(), &dead, &quick()).unwrap_err();
        assert!(matches!(err, ReasonError::Provider { attempts: 4, .. }));

        let refused = ScriptedReasoner::new(vec![Err(ProviderError::Remote("bad request".into()))]);
        let err = reason_with_policy(&stimulus(), &PromptTemplate::default(), &refused, &quick()).unwrap_err();
        assert!(matches!(err, ReasonError::Provider { attempts: 1, .. }));
    }

    #[test]
    fn default_backoff_schedule() {
        let p = RetryPolicy::default();
        assert_eq!(p.max_attempts, 3);
        assert_eq!(p.transport_backoff, vec![Duration::from_secs(1), Duration::from_secs(2), Duration::from_secs(4)]);
    }

    #[test]
    fn echo_carries_image_id() {
        let d = reason(&stimulus(), &PromptTemplate::default(), &EchoReasoner).unwrap();
        assert!(d.text.contains("img_042"));
    }

    #[test]
    fn hue_reasoner_names_colours() {
        let red = RgbImage::filled(4, 4, [220, 20, 20]);
        let blue = RgbImage::filled(4, 4, [20, 20, 220]);
        let grey = RgbImage::filled(4, 4, [128, 128, 128]);
        assert_eq!(dominant_colour_name(&red), "red");
        assert_eq!(dominant_colour_name(&blue), "blue");
        assert_eq!(dominant_colour_name(&grey), "grey");
        let s = StimulusImage { image_id: "r".into(), class_label: 0, image: red };
        let d = reason(&s, &PromptTemplate::default(), &HueReasoner::new()).unwrap();
        assert!(d.text.contains(" red "));
    }

    #[test]
    fn composition_and_stage_tagging() {
        let rec = crate::dataset::EegRecording { channels: 1, samples: 2, data: vec![0.0, 1.0] };
        let entry = crate::dataset::ManifestEntry {
            trial_id: "t1".into(),
            subject_id: 1,
            class_label: 0,
            eeg_path: "e".into(),
            image_path: "i".into(),
            split: crate::dataset::Split::Train,
        };
        let trial = EegTrial::from_recording(&entry, rec).unwrap();
        let constant =
            || StimulusImage { image_id: "dec".into(), class_label: 0, image: RgbImage::filled(2, 2, [1, 2, 3]) };
        let p = ScriptedReasoner::constant("A constant object");
        let template = PromptTemplate::default();
        let d = compose_pipeline_description(
            &trial,
            |_| Ok::<_, String>(constant()),
            |img| reason_with_policy(img, &template, &p, &quick()),
        )
        .unwrap();
        assert_eq!(d.text, "A constant object");
        let direct = reason_with_policy(&constant(), &template, &p, &quick()).unwrap();
        assert_eq!(d.text, direct.text);

        let err = compose_pipeline_description(
            &trial,
            |_| Err::<StimulusImage, _>("decoder offline"),
            |img| reason_with_policy(img, &template, &p, &quick()),
        )
        .unwrap_err();
        assert_eq!(err.stage, Stage::Decode);
        assert!(err.to_string().contains("decode"));
    }

    #[test]
    fn remote_reasoner_wire_format() {
        struct Inspect;
        impl Transport for Inspect {
            fn call(&self, request: &serde_json::Value) -> Result<serde_json::Value, ProviderError> {
                assert!(request["system"].as_str().unwrap().starts_with("You are an expert"));
                assert_eq!(request["image"]["mime"], "image/x-portable-pixmap");
                assert_eq!(request["params"]["temperature"], 0.2);
                Ok(json!({"text": "A remote mug"}))
            }
        }
        let r = RemoteReasoner::new("remote", Box::new(Inspect), 4).with_params(json!({"temperature": 0.2}));
        let d = reason(&stimulus(), &PromptTemplate::default(), &r).unwrap();
        assert_eq!(d.text, "A remote mug");
        assert_eq!(r.calls().get(), 1);
    }
}
