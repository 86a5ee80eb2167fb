//! End-to-end runs: decode, reason, text-to-image, image-to-3D, six-view
//! rendering and evaluation for each trial, with every stage output cached
//! by content, trials run concurrently, and per-trial failures collected
//! instead of aborting the run.
//!
//! Artifact tree under `<output>/<mode>/`:
//!
//! ```text
//! trials/<trial_id>/decoded.ppm
//! trials/<trial_id>/description.txt     (full mode)
//! trials/<trial_id>/refined.ppm         (full mode)
//! trials/<trial_id>/mesh.obj
//! trials/<trial_id>/views/<label>.ppm
//! trials/<trial_id>/metrics.json
//! report.json
//! table_gt.txt
//! table_intermediate.txt
//! failures.txt
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::align::{align_project, encode_eeg, train_alignment_on, AlignParams, AlignTraining};
use crate::cache::{cache_key, now_secs, Cache, CacheKey, StageRecord};
use crate::config::{PipelineConfig, ProviderKind, ProviderSpec};
use crate::dataset::{self, load_manifest, EegTrial, StimulusImage};
use crate::geometry::{
    ablation_bypass, image_to_mesh, parse_obj, text_to_image, ImageTo3dProvider, Mode, PrimitiveImageTo3d,
    ProceduralTextToImage, RemoteImageTo3d, RemoteTextToImage, T2iRequest, TextToImageProvider, To3dRequest,
};
use crate::image::{class_image, RgbImage};
use crate::metrics::{
    aggregate, clip_score, fid, inception_score_from_probs, lpips_distance, names, nway_topk, ClassProbProvider,
    ColorHistogramEmbedder, EmbeddingProvider, FeatureLayer, GradientFeatures, MetricError, MetricReport,
    PerceptualFeatureProvider, ProbVector, RemoteClassifier, RemoteEmbedder, RemotePerceptualFeatures, ReportSettings,
    Scores, Summary, TemplateClassifier, ViewScore,
};
use crate::providers::{
    decode_image_payload, CallCounter, HttpTransport, InflightLimiter, ProviderError, SubprocessTransport, Transport,
};
use crate::reasoning::{
    reason_with_policy, HueReasoner, PromptTemplate, ReasonerProvider, RemoteReasoner, RetryPolicy, SemanticDescription,
};
use crate::renderer::{canonical_views, render_all, ViewLabel};
use crate::report::{ablation_block, gt_block, intermediate_block, render_table, report_values, Layout, ReportTable};
use crate::stage::{Stage, StageError};
use crate::toydiffusion::{
    sample, train_denoiser, DenoiserParams, DenoiserTraining, DiffusionConfig, DiffusionExample,
};
use crate::util::{seeded_rng, sha256_hex};

pub const ALIGN_CHECKPOINT: &str = "align.ckpt";
pub const DENOISER_CHECKPOINT: &str = "denoiser.ckpt";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Dataset(#[from] dataset::DatasetError),
    #[error("model error: {0}")]
    Model(String),
    #[error("unknown trial id {0:?}")]
    UnknownTrial(String),
    #[error("no trials selected")]
    NoTrials,
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("cannot build worker pool: {0}")]
    Pool(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |e| PipelineError::Io { path: path.display().to_string(), message: e.to_string() }
}

/// EEG trial to decoded image.
pub trait Decoder: Send + Sync {
    fn id(&self) -> &str;
    /// Digest of everything besides the trial and seed that fixes the output.
    fn config_hash(&self) -> String;
    fn decode(&self, trial: &EegTrial, seed: u64) -> Result<RgbImage, ProviderError>;
}

/// Stand-in decoder: the trial's class stimulus with seeded pixel jitter.
pub struct StimulusDecoder {
    side: u32,
    jitter: u8,
}

impl StimulusDecoder {
    pub fn new(side: u32, jitter: u8) -> Self {
        Self { side, jitter }
    }
}

impl Decoder for StimulusDecoder {
    fn id(&self) -> &str {
        "mock-stimulus-decoder"
    }

    fn config_hash(&self) -> String {
        sha256_hex(format!("mock-stimulus-decoder|{}|{}", self.side, self.jitter).as_bytes())
    }

    fn decode(&self, trial: &EegTrial, seed: u64) -> Result<RgbImage, ProviderError> {
        let img = class_image(trial.class_label(), self.side);
        let mut rng = seeded_rng(seed, 50);
        let j = self.jitter as i32;
        let pixels = img.pixels().iter().map(|&p| (p as i32 + rng.random_range(-j..=j)).clamp(0, 255) as u8).collect();
        RgbImage::new(self.side, self.side, pixels).map_err(|e| ProviderError::Remote(e.to_string()))
    }
}

/// Aligned EEG embedding as conditioning for the toy diffusion sampler.
pub struct DiffusionDecoder {
    align: AlignParams,
    denoiser: DenoiserParams,
    config: DiffusionConfig,
    output_side: u32,
    hash: String,
}

impl DiffusionDecoder {
    pub fn new(align: AlignParams, denoiser: DenoiserParams, config: DiffusionConfig, output_side: u32) -> Self {
        let mut bytes = align.to_checkpoint_bytes();
        bytes.extend(denoiser.to_checkpoint_bytes());
        bytes.extend(serde_json::to_vec(&config).expect("config serializes"));
        bytes.extend(output_side.to_le_bytes());
        Self { align, denoiser, config, output_side, hash: sha256_hex(&bytes) }
    }

    pub fn load(models_dir: &Path, config: DiffusionConfig, output_side: u32) -> Result<Self, PipelineError> {
        let align =
            AlignParams::load(&models_dir.join(ALIGN_CHECKPOINT)).map_err(|e| PipelineError::Model(e.to_string()))?;
        let denoiser = DenoiserParams::load(&models_dir.join(DENOISER_CHECKPOINT))
            .map_err(|e| PipelineError::Model(e.to_string()))?;
        Ok(Self::new(align, denoiser, config, output_side))
    }
}

impl Decoder for DiffusionDecoder {
    fn id(&self) -> &str {
        "toy-diffusion-decoder"
    }

    fn config_hash(&self) -> String {
        self.hash.clone()
    }

    fn decode(&self, trial: &EegTrial, seed: u64) -> Result<RgbImage, ProviderError> {
        let local = |e: &dyn std::fmt::Display| ProviderError::Remote(e.to_string());
        let z = encode_eeg(trial, &self.align).map_err(|e| local(&e))?;
        let cond = align_project(&z, &self.align).map_err(|e| local(&e))?;
        let x = sample(Some(&cond), &self.config, &self.denoiser, seed).map_err(|e| local(&e))?;
        let side = self.config.image_side;
        let img = RgbImage::from_signed_unit(side, side, &x).map_err(|e| local(&e))?;
        Ok(img.resize(self.output_side, self.output_side))
    }
}

/// Request `{trial_id, channels, samples, eeg, seed}`; response `{image}`.
pub struct RemoteDecoder {
    id: String,
    transport: Box<dyn Transport>,
    limiter: InflightLimiter,
}

impl RemoteDecoder {
    pub fn new(id: impl Into<String>, transport: Box<dyn Transport>, max_in_flight: usize) -> Self {
        Self { id: id.into(), transport, limiter: InflightLimiter::new(max_in_flight) }
    }
}

impl Decoder for RemoteDecoder {
    fn id(&self) -> &str {
        &self.id
    }

    fn config_hash(&self) -> String {
        sha256_hex(self.id.as_bytes())
    }

    fn decode(&self, trial: &EegTrial, seed: u64) -> Result<RgbImage, ProviderError> {
        let request = json!({
            "trial_id": trial.trial_id(),
            "channels": trial.channels(),
            "samples": trial.samples(),
            "eeg": trial.data(),
            "seed": seed,
        });
        let _permit = self.limiter.acquire();
        let resp = self.transport.call(&request)?;
        if let Some(err) = resp.get("error").and_then(Value::as_str) {
            return Err(ProviderError::Remote(err.to_string()));
        }
        decode_image_payload(resp.get("image").unwrap_or(&Value::Null))
    }
}

/// Wraps a provider and counts calls into it.
pub struct Counted<T: ?Sized> {
    inner: Arc<T>,
    calls: CallCounter,
}

impl<T: ?Sized> Counted<T> {
    pub fn new(inner: Arc<T>) -> Self {
        Self { inner, calls: CallCounter::new() }
    }

    pub fn calls(&self) -> CallCounter {
        self.calls.clone()
    }
}

impl<T: Decoder + ?Sized> Decoder for Counted<T> {
    fn id(&self) -> &str {
        self.inner.id()
    }
    fn config_hash(&self) -> String {
        self.inner.config_hash()
    }
    fn decode(&self, trial: &EegTrial, seed: u64) -> Result<RgbImage, ProviderError> {
        self.calls.bump();
        self.inner.decode(trial, seed)
    }
}

impl<T: ReasonerProvider + ?Sized> ReasonerProvider for Counted<T> {
    fn id(&self) -> &str {
        self.inner.id()
    }
    fn describe(&self, system: &str, user: &str, image: &StimulusImage) -> Result<String, ProviderError> {
        self.calls.bump();
        self.inner.describe(system, user, image)
    }
}

impl<T: TextToImageProvider + ?Sized> TextToImageProvider for Counted<T> {
    fn id(&self) -> &str {
        self.inner.id()
    }
    fn generate(&self, request: &T2iRequest) -> Result<RgbImage, ProviderError> {
        self.calls.bump();
        self.inner.generate(request)
    }
}

impl<T: ImageTo3dProvider + ?Sized> ImageTo3dProvider for Counted<T> {
    fn id(&self) -> &str {
        self.inner.id()
    }
    fn reconstruct(&self, request: &To3dRequest) -> Result<Vec<u8>, ProviderError> {
        self.calls.bump();
        self.inner.reconstruct(request)
    }
}

impl<T: EmbeddingProvider + ?Sized> EmbeddingProvider for Counted<T> {
    fn id(&self) -> &str {
        self.inner.id()
    }
    fn embed(&self, image: &RgbImage) -> Result<Vec<f64>, MetricError> {
        self.calls.bump();
        self.inner.embed(image)
    }
}

impl<T: PerceptualFeatureProvider + ?Sized> PerceptualFeatureProvider for Counted<T> {
    fn id(&self) -> &str {
        self.inner.id()
    }
    fn layers(&self, image: &RgbImage) -> Result<Vec<FeatureLayer>, MetricError> {
        self.calls.bump();
        self.inner.layers(image)
    }
}

impl<T: ClassProbProvider + ?Sized> ClassProbProvider for Counted<T> {
    fn id(&self) -> &str {
        self.inner.id()
    }
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }
    fn classify(&self, image: &RgbImage) -> Result<ProbVector, MetricError> {
        self.calls.bump();
        self.inner.classify(image)
    }
}

#[derive(Clone)]
pub struct Providers {
    pub decoder: Arc<dyn Decoder>,
    pub reasoner: Arc<dyn ReasonerProvider>,
    pub t2i: Arc<dyn TextToImageProvider>,
    pub to3d: Arc<dyn ImageTo3dProvider>,
    /// Image embeddings for CLIPScore and FID.
    pub embedder: Arc<dyn EmbeddingProvider>,
    pub perceptual: Arc<dyn PerceptualFeatureProvider>,
    pub classifier: Arc<dyn ClassProbProvider>,
}

impl Providers {
    /// All built-in deterministic stand-ins.
    pub fn mock(config: &PipelineConfig) -> Self {
        let eval = &config.evaluation;
        Self {
            decoder: Arc::new(StimulusDecoder::new(eval.decoded_side, 12)),
            reasoner: Arc::new(HueReasoner::new()),
            t2i: Arc::new(ProceduralTextToImage::new(eval.decoded_side)),
            to3d: Arc::new(PrimitiveImageTo3d::new()),
            embedder: Arc::new(ColorHistogramEmbedder::new(eval.histogram_bins)),
            perceptual: Arc::new(GradientFeatures::new(eval.perceptual_sides.clone())),
            classifier: Arc::new(TemplateClassifier::new(eval.num_classes, eval.classifier_sharpness)),
        }
    }

    pub fn from_config(config: &PipelineConfig) -> Result<Self, PipelineError> {
        let mock = Self::mock(config);
        let p = &config.providers;
        let decoder: Arc<dyn Decoder> = match p.decoder.kind {
            ProviderKind::Mock => mock.decoder,
            ProviderKind::Diffusion => Arc::new(DiffusionDecoder::load(
                &config.models_dir,
                config.diffusion.clone(),
                config.evaluation.decoded_side,
            )?),
            _ => Arc::new(RemoteDecoder::new(&p.decoder.id, transport(&p.decoder), p.decoder.max_in_flight)),
        };
        let reasoner: Arc<dyn ReasonerProvider> = match p.reasoner.kind {
            ProviderKind::Mock => mock.reasoner,
            _ => Arc::new(RemoteReasoner::new(&p.reasoner.id, transport(&p.reasoner), p.reasoner.max_in_flight)),
        };
        let t2i: Arc<dyn TextToImageProvider> = match p.t2i.kind {
            ProviderKind::Mock => mock.t2i,
            _ => Arc::new(RemoteTextToImage::new(&p.t2i.id, transport(&p.t2i), p.t2i.max_in_flight)),
        };
        let to3d: Arc<dyn ImageTo3dProvider> = match p.to3d.kind {
            ProviderKind::Mock => mock.to3d,
            _ => Arc::new(RemoteImageTo3d::new(&p.to3d.id, transport(&p.to3d), p.to3d.max_in_flight)),
        };
        let embedder: Arc<dyn EmbeddingProvider> = match p.embedder.kind {
            ProviderKind::Mock => mock.embedder,
            _ => Arc::new(RemoteEmbedder::new(&p.embedder.id, Arc::from(transport(&p.embedder)))),
        };
        let perceptual: Arc<dyn PerceptualFeatureProvider> = match p.perceptual.kind {
            ProviderKind::Mock => mock.perceptual,
            _ => Arc::new(RemotePerceptualFeatures::new(&p.perceptual.id, Arc::from(transport(&p.perceptual)))),
        };
        let classifier: Arc<dyn ClassProbProvider> = match p.classifier.kind {
            ProviderKind::Mock => mock.classifier,
            _ => Arc::new(RemoteClassifier::new(
                &p.classifier.id,
                config.evaluation.num_classes,
                Arc::from(transport(&p.classifier)),
            )),
        };
        Ok(Self { decoder, reasoner, t2i, to3d, embedder, perceptual, classifier })
    }

    pub fn ids(&self) -> BTreeMap<String, String> {
        [
            ("decoder", self.decoder.id()),
            ("reasoner", self.reasoner.id()),
            ("t2i", self.t2i.id()),
            ("to3d", self.to3d.id()),
            ("embedder", self.embedder.id()),
            ("perceptual", self.perceptual.id()),
            ("classifier", self.classifier.id()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
    }
}

fn transport(spec: &ProviderSpec) -> Box<dyn Transport> {
    let timeout = Duration::from_secs(spec.timeout_secs);
    match spec.kind {
        ProviderKind::Subprocess => {
            Box::new(SubprocessTransport::new(spec.command[0].clone(), spec.command[1..].to_vec(), timeout))
        }
        _ => Box::new(HttpTransport::new(spec.endpoint.clone(), timeout)),
    }
}

/// Seed for a trial's stochastic stages, derived from the run seed.
pub fn trial_seed(seed: u64, trial_id: &str) -> u64 {
    let digest = sha256_hex(format!("{seed}:{trial_id}").as_bytes());
    u64::from_str_radix(&digest[..16], 16).expect("hex digest")
}

#[derive(Debug, Clone)]
pub struct TrialInput {
    pub trial: EegTrial,
    pub ground_truth: RgbImage,
}

/// Trials named in the config (or every trial of its split) with their
/// ground-truth stimuli.
pub fn load_inputs(config: &PipelineConfig) -> Result<Vec<TrialInput>, PipelineError> {
    let manifest = load_manifest(&config.dataset.manifest)?;
    let entries: Vec<_> = if config.dataset.trials.is_empty() {
        manifest.entries_in(config.dataset.split).collect()
    } else {
        config
            .dataset
            .trials
            .iter()
            .map(|id| {
                manifest
                    .entries
                    .iter()
                    .find(|e| &e.trial_id == id)
                    .ok_or_else(|| PipelineError::UnknownTrial(id.clone()))
            })
            .collect::<Result<_, _>>()?
    };
    if entries.is_empty() {
        return Err(PipelineError::NoTrials);
    }
    entries
        .into_iter()
        .map(|e| Ok(TrialInput { trial: manifest.load_trial(e)?, ground_truth: manifest.load_image(e)?.image }))
        .collect()
}

/// Trains the alignment encoders, then the denoiser on aligned conditioning
/// of the same trials with their stimuli as targets.
pub fn train_models(
    trials: &[&EegTrial],
    image_of: impl Fn(&EegTrial) -> RgbImage,
    align: &crate::align::AlignConfig,
    diffusion: &DiffusionConfig,
) -> Result<(AlignTraining, DenoiserTraining), PipelineError> {
    let model = |e: &dyn std::fmt::Display| PipelineError::Model(e.to_string());
    let aligned = train_alignment_on(trials, &image_of, align).map_err(|e| model(&e))?;
    let side = diffusion.image_side;
    let data = trials
        .iter()
        .map(|t| {
            let z = encode_eeg(t, &aligned.params)?;
            Ok(DiffusionExample {
                x0: image_of(t).resize(side, side).to_signed_unit(),
                cond: align_project(&z, &aligned.params)?,
            })
        })
        .collect::<Result<Vec<_>, crate::align::AlignError>>()
        .map_err(|e| model(&e))?;
    let denoiser = train_denoiser(&data, diffusion).map_err(|e| model(&e))?;
    Ok((aligned, denoiser))
}

/// Stage executions (cache misses) and cache hits during a run.
#[derive(Debug, Default)]
pub struct RunStats {
    executed: [AtomicUsize; 6],
    reused: [AtomicUsize; 6],
}

fn stage_index(stage: Stage) -> usize {
    Stage::ALL.iter().position(|s| *s == stage).expect("known stage")
}

impl RunStats {
    pub fn executed(&self, stage: Stage) -> usize {
        self.executed[stage_index(stage)].load(Ordering::SeqCst)
    }

    pub fn reused(&self, stage: Stage) -> usize {
        self.reused[stage_index(stage)].load(Ordering::SeqCst)
    }

    pub fn total_executed(&self) -> usize {
        Stage::ALL.iter().map(|s| self.executed(*s)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialFailure {
    pub trial_id: String,
    pub stage: Stage,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: Mode,
    pub backbone: String,
    pub succeeded: Vec<String>,
    pub vs_ground_truth: MetricReport,
    pub vs_intermediate: MetricReport,
    pub failures: Vec<TrialFailure>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn gt_table(&self) -> Result<ReportTable, crate::report::ReportError> {
        let values = report_values("vs ground truth", &self.vs_ground_truth)?;
        Ok(ReportTable { layout: Layout::Gt, blocks: vec![gt_block(&self.backbone, values)?] })
    }

    pub fn intermediate_table(&self) -> Result<ReportTable, crate::report::ReportError> {
        let gt = report_values("vs ground truth", &self.vs_ground_truth)?;
        let inter = report_values("vs intermediate", &self.vs_intermediate)?;
        Ok(ReportTable { layout: Layout::Intermediate, blocks: vec![intermediate_block(&self.backbone, gt, inter)?] })
    }

    pub fn failures_text(&self) -> String {
        self.failures
            .iter()
            .map(|f| format!("{}\t{}\t{}\n", f.trial_id, f.stage, f.message.replace('\n', " ")))
            .collect()
    }
}

/// Cached per-trial outputs, as stored bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialArtifacts {
    pub trial_id: String,
    pub decoded: Vec<u8>,
    pub description: Option<Vec<u8>>,
    pub refined: Option<Vec<u8>>,
    pub mesh_obj: Vec<u8>,
    /// PPM bytes in canonical view order.
    pub views: Vec<Vec<u8>>,
    pub evaluation: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalArtifact {
    pub vs_ground_truth: BTreeMap<ViewLabel, Scores>,
    pub vs_intermediate: BTreeMap<ViewLabel, Scores>,
    pub view_features: Vec<Vec<f64>>,
    pub view_probs: Vec<ProbVector>,
    pub ground_truth_features: Vec<f64>,
    pub decoded_features: Vec<f64>,
}

pub struct RunOutcome {
    pub report: RunReport,
    pub artifacts: Vec<TrialArtifacts>,
    pub stats: RunStats,
}

impl RunOutcome {
    /// 0 with no failed trials, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.report.failures.is_empty() {
            0
        } else {
            2
        }
    }
}

type TrialResult = (String, Result<(TrialArtifacts, EvalArtifact), StageError>);

pub struct Pipeline {
    config: PipelineConfig,
    providers: Providers,
    cache: Cache,
    template: PromptTemplate,
    retry: RetryPolicy,
}

fn ppm(bytes: &[u8], stage: Stage) -> Result<RgbImage, StageError> {
    RgbImage::from_ppm_bytes(bytes).map_err(|e| StageError::new(stage, e))
}

fn image_hash(bytes: &[u8]) -> String {
    sha256_hex(bytes)
}

impl Pipeline {
    pub fn new(config: PipelineConfig, providers: Providers) -> Self {
        let cache = Cache::new(config.cache_dir.clone());
        let retry = config.retry.policy();
        Self { config, providers, cache, template: PromptTemplate::default(), retry }
    }

    pub fn with_template(mut self, template: PromptTemplate) -> Self {
        self.template = template;
        self
    }

    pub fn with_retry_policy(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn providers(&self) -> &Providers {
        &self.providers
    }

    #[allow(clippy::too_many_arguments)]
    fn cached(
        &self,
        stats: &RunStats,
        stage: Stage,
        key: &CacheKey,
        names: &[&str],
        provider_id: &str,
        input_hash: &str,
        config_hash: &str,
        compute: impl FnOnce() -> Result<Vec<Vec<u8>>, String>,
    ) -> Result<Vec<Vec<u8>>, StageError> {
        if let Some(hit) = self.cache.get(stage, key, names).map_err(|e| StageError::new(stage, e))? {
            stats.reused[stage_index(stage)].fetch_add(1, Ordering::SeqCst);
            return Ok(hit);
        }
        stats.executed[stage_index(stage)].fetch_add(1, Ordering::SeqCst);
        let produced = compute().map_err(|m| StageError { stage, message: m })?;
        let files: Vec<(&str, &[u8])> = names.iter().copied().zip(produced.iter().map(Vec::as_slice)).collect();
        let record = StageRecord {
            stage,
            input_hash: input_hash.to_string(),
            config_hash: config_hash.to_string(),
            artifact_path: names.join(","),
            provider_id: provider_id.to_string(),
            timestamp: now_secs(),
            status: "ok".into(),
        };
        self.cache.put(stage, key, &files, &record).map_err(|e| StageError::new(stage, e))?;
        Ok(produced)
    }

    fn eval_config_hash(&self) -> String {
        let ids = self.providers.ids();
        sha256_hex(json!({ "evaluation": self.config.evaluation, "providers": ids }).to_string().as_bytes())
    }

    pub fn run_trial(&self, input: &TrialInput, mode: Mode, stats: &RunStats) -> Result<TrialArtifacts, StageError> {
        let trial = &input.trial;
        let seed = trial_seed(self.config.seed, trial.trial_id());
        let gen = &self.config.generation;
        let p = &self.providers;

        let eeg_hash = sha256_hex(&dataset::encode_eeg(&trial.recording()));
        let dec_cfg = p.decoder.config_hash();
        let key = cache_key(Stage::Decode, &[&eeg_hash], &dec_cfg, None, seed);
        let decoded = self
            .cached(stats, Stage::Decode, &key, &["decoded.ppm"], p.decoder.id(), &eeg_hash, &dec_cfg, || {
                let img = p.decoder.decode(trial, seed).map_err(|e| e.to_string())?;
                Ok(vec![img.to_ppm_bytes()])
            })?
            .remove(0);
        let decoded_img = ppm(&decoded, Stage::Decode)?;
        let decoded_hash = image_hash(&decoded);

        let (description, refined, lift_input) = match mode {
            Mode::Full => {
                let reason_cfg = sha256_hex(
                    format!("{}|{}|{}", self.template.content_hash(), p.reasoner.id(), self.retry.max_attempts)
                        .as_bytes(),
                );
                let key = cache_key(Stage::Reason, &[&decoded_hash], &reason_cfg, None, 0);
                let text = self
                    .cached(
                        stats,
                        Stage::Reason,
                        &key,
                        &["description.txt"],
                        p.reasoner.id(),
                        &decoded_hash,
                        &reason_cfg,
                        || {
                            let stimulus = StimulusImage {
                                image_id: trial.trial_id().to_string(),
                                class_label: trial.class_label(),
                                image: decoded_img.clone(),
                            };
                            let d = reason_with_policy(&stimulus, &self.template, p.reasoner.as_ref(), &self.retry)
                                .map_err(|e| e.to_string())?;
                            Ok(vec![d.text.into_bytes()])
                        },
                    )?
                    .remove(0);
                let text_hash = sha256_hex(&text);
                let t2i_cfg = sha256_hex(format!("{}|{}", gen.hash(), p.t2i.id()).as_bytes());
                let key = cache_key(Stage::T2i, &[&text_hash], &t2i_cfg, None, gen.seed);
                let refined = self
                    .cached(stats, Stage::T2i, &key, &["refined.ppm"], p.t2i.id(), &text_hash, &t2i_cfg, || {
                        let desc = SemanticDescription {
                            text: String::from_utf8_lossy(&text).into_owned(),
                            source_image_id: trial.trial_id().to_string(),
                            provider_id: p.reasoner.id().to_string(),
                            attempt: 1,
                        };
                        let img = text_to_image(&desc, gen, p.t2i.as_ref()).map_err(|e| e.to_string())?;
                        Ok(vec![img.value.to_ppm_bytes()])
                    })?
                    .remove(0);
                (Some(text), Some(refined.clone()), refined)
            }
            Mode::Direct => (None, None, decoded.clone()),
        };

        let lift_hash = image_hash(&lift_input);
        let lift_cfg = sha256_hex(format!("{}|{}", gen.hash(), p.to3d.id()).as_bytes());
        let key = cache_key(Stage::To3d, &[&lift_hash], &lift_cfg, Some(mode), gen.seed);
        let mesh_obj = self
            .cached(stats, Stage::To3d, &key, &["mesh.obj"], p.to3d.id(), &lift_hash, &lift_cfg, || {
                let img = ppm(&lift_input, Stage::To3d).map_err(|e| e.message)?;
                let mesh = match mode {
                    Mode::Full => image_to_mesh(&img, gen, p.to3d.as_ref()),
                    Mode::Direct => ablation_bypass(&img, gen, p.to3d.as_ref()),
                }
                .map_err(|e| e.to_string())?;
                Ok(vec![crate::geometry::obj_string(&mesh.value).into_bytes()])
            })?
            .remove(0);

        let mesh_hash = sha256_hex(&mesh_obj);
        let views = canonical_views(&self.config.views).map_err(|e| StageError::new(Stage::Render, e))?;
        let view_cfg = sha256_hex(serde_json::to_string(&views).expect("views serialize").as_bytes());
        let view_names: Vec<String> = views.iter().map(|v| format!("{}.ppm", v.label)).collect();
        let view_name_refs: Vec<&str> = view_names.iter().map(String::as_str).collect();
        let key = cache_key(Stage::Render, &[&mesh_hash], &view_cfg, Some(mode), 0);
        let rendered = self.cached(
            stats,
            Stage::Render,
            &key,
            &view_name_refs,
            "builtin-rasterizer",
            &mesh_hash,
            &view_cfg,
            || {
                let text = String::from_utf8(mesh_obj.clone()).map_err(|e| e.to_string())?;
                let (mesh, _) = parse_obj(&text).map_err(|e| e.to_string())?;
                let mesh = mesh.normalized_to_unit_sphere();
                let out = render_all(&mesh, &views, trial.trial_id()).map_err(|e| e.to_string())?;
                Ok(out.into_iter().map(|r| r.pixels.to_ppm_bytes()).collect())
            },
        )?;

        let gt_bytes = input.ground_truth.to_ppm_bytes();
        let gt_hash = image_hash(&gt_bytes);
        let views_hash = sha256_hex(rendered.iter().map(|v| image_hash(v)).collect::<Vec<_>>().join(",").as_bytes());
        let eval_cfg = self.eval_config_hash();
        let key = cache_key(Stage::Evaluate, &[&views_hash, &gt_hash, &decoded_hash], &eval_cfg, Some(mode), seed);
        let evaluation = self
            .cached(stats, Stage::Evaluate, &key, &["metrics.json"], p.classifier.id(), &views_hash, &eval_cfg, || {
                let imgs = rendered
                    .iter()
                    .map(|b| RgbImage::from_ppm_bytes(b))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| e.to_string())?;
                let labels: Vec<ViewLabel> = views.iter().map(|v| v.label).collect();
                let art = self
                    .evaluate_views(&imgs, &labels, &input.ground_truth, &decoded_img, seed)
                    .map_err(|e| e.to_string())?;
                Ok(vec![serde_json::to_vec_pretty(&art).expect("evaluation serializes")])
            })?
            .remove(0);

        Ok(TrialArtifacts {
            trial_id: trial.trial_id().to_string(),
            decoded,
            description,
            refined,
            mesh_obj,
            views: rendered,
            evaluation,
        })
    }

    /// Per-view scores of the rendered views against the ground truth and
    /// against the decoded image, plus the raw features the set-level
    /// metrics need.
    pub fn evaluate_views(
        &self,
        views: &[RgbImage],
        labels: &[ViewLabel],
        ground_truth: &RgbImage,
        decoded: &RgbImage,
        seed: u64,
    ) -> Result<EvalArtifact, MetricError> {
        let p = &self.providers;
        let view_probs = views.iter().map(|v| p.classifier.classify(v)).collect::<Result<Vec<_>, _>>()?;
        let nway = self.config.evaluation.nway_configs(seed);
        let score = |reference: &RgbImage| -> Result<BTreeMap<ViewLabel, Scores>, MetricError> {
            let ref_probs = p.classifier.classify(reference)?;
            let mut per_view: Vec<Scores> = vec![Scores::new(); views.len()];
            for cfg in &nway {
                let r = nway_topk(&ref_probs, &view_probs, cfg)?;
                for (s, acc) in per_view.iter_mut().zip(&r.per_view) {
                    s.insert(cfg.metric_name(), *acc);
                }
            }
            for (s, v) in per_view.iter_mut().zip(views) {
                s.insert(names::CLIP_SCORE.into(), clip_score(reference, v, p.embedder.as_ref())?);
                s.insert(names::LPIPS.into(), lpips_distance(reference, v, p.perceptual.as_ref())?);
            }
            Ok(labels.iter().copied().zip(per_view).collect())
        };
        Ok(EvalArtifact {
            vs_ground_truth: score(ground_truth)?,
            vs_intermediate: score(decoded)?,
            view_features: views.iter().map(|v| p.embedder.embed(v)).collect::<Result<_, _>>()?,
            view_probs,
            ground_truth_features: p.embedder.embed(ground_truth)?,
            decoded_features: p.embedder.embed(decoded)?,
        })
    }

    fn assemble(&self, mode: Mode, results: Vec<TrialResult>) -> (RunReport, Vec<TrialArtifacts>) {
        let mut failures = Vec::new();
        let mut done = Vec::new();
        for (id, r) in results {
            match r {
                Ok(ok) => done.push(ok),
                Err(e) => failures.push(TrialFailure { trial_id: id, stage: e.stage, message: e.message }),
            }
        }
        let eval = &self.config.evaluation;
        let mut settings = ReportSettings {
            nway: eval.nway_configs(self.config.seed),
            provider_ids: self.providers.ids(),
            view_set_hash: sha256_hex(serde_json::to_string(&self.config.views).expect("views serialize").as_bytes()),
            notes: vec![
                "n-way seeds are derived per trial from the run seed".into(),
                "n-way negatives are sampled per (trial, view); ties rank the lower class index first".into(),
                "fid pools every rendered view against every reference image".into(),
                "std is the population standard deviation over objects".into(),
            ],
        };
        let view_probs: Vec<ProbVector> = done.iter().flat_map(|(_, e)| e.view_probs.iter().cloned()).collect();
        let view_feats: Vec<Vec<f64>> = done.iter().flat_map(|(_, e)| e.view_features.iter().cloned()).collect();
        let splits = eval.is_splits.min(view_probs.len()).max(1);
        if splits != eval.is_splits {
            settings.notes.push(format!("inception score uses {splits} split(s): fewer views than configured splits"));
        }
        let is = inception_score_from_probs(&view_probs, splits).ok();

        let build = |pick: &dyn Fn(&EvalArtifact) -> &BTreeMap<ViewLabel, Scores>,
                     refs: &dyn Fn(&EvalArtifact) -> &Vec<f64>,
                     what: &str|
         -> MetricReport {
            let rows: Vec<ViewScore> = done
                .iter()
                .flat_map(|(a, e)| {
                    pick(e).iter().map(|(label, s)| ViewScore {
                        object_id: a.trial_id.clone(),
                        view: *label,
                        scores: s.clone(),
                    })
                })
                .collect();
            let mut settings = settings.clone();
            let ref_feats: Vec<Vec<f64>> = done.iter().map(|(_, e)| refs(e).clone()).collect();
            let fid_result = fid(&view_feats, &ref_feats);
            match &fid_result {
                Ok(r) if r.regularized => settings.notes.push(format!("fid vs {what}: covariance ridge added")),
                Err(e) => settings.notes.push(format!("fid vs {what} unavailable: {e}")),
                _ => {}
            }
            let mut report = aggregate(&rows, settings).expect("cached evaluations cover every view");
            if let Some(is) = is {
                report.global.insert(names::INCEPTION_SCORE.into(), is);
            }
            if let Ok(r) = fid_result {
                report.global.insert(names::FID.into(), Summary { mean: r.value, std: 0.0 });
            }
            report
        };
        let vs_ground_truth = build(&|e| &e.vs_ground_truth, &|e| &e.ground_truth_features, "ground truth");
        let vs_intermediate = build(&|e| &e.vs_intermediate, &|e| &e.decoded_features, "intermediate");
        let report = RunReport {
            mode,
            backbone: self.providers.decoder.id().to_string(),
            succeeded: done.iter().map(|(a, _)| a.trial_id.clone()).collect(),
            vs_ground_truth,
            vs_intermediate,
            failures,
        };
        (report, done.into_iter().map(|(a, _)| a).collect())
    }

    /// Runs every trial in `mode`. Trial failures are collected in the
    /// report; only pool construction can fail the call.
    pub fn run(&self, inputs: &[TrialInput], mode: Mode) -> Result<RunOutcome, PipelineError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.workers)
            .build()
            .map_err(|e| PipelineError::Pool(e.to_string()))?;
        let stats = RunStats::default();
        let mut results: Vec<TrialResult> = pool.install(|| {
            inputs
                .par_iter()
                .map(|input| {
                    let r = self.run_trial(input, mode, &stats).and_then(|a| {
                        let e: EvalArtifact =
                            serde_json::from_slice(&a.evaluation).map_err(|e| StageError::new(Stage::Evaluate, e))?;
                        Ok((a, e))
                    });
                    if let Err(e) = &r {
                        log::warn!("trial {} failed at {}: {}", input.trial.trial_id(), e.stage, e.message);
                    }
                    (input.trial.trial_id().to_string(), r)
                })
                .collect()
        });
        results.sort_by(|a, b| a.0.cmp(&b.0));
        let (report, artifacts) = self.assemble(mode, results);
        Ok(RunOutcome { report, artifacts, stats })
    }

    pub fn run_ablation(&self, inputs: &[TrialInput]) -> Result<AblationOutcome, PipelineError> {
        let full = self.run(inputs, Mode::Full)?;
        let direct = self.run(inputs, Mode::Direct)?;
        Ok(AblationOutcome { full, direct })
    }
}

pub struct AblationOutcome {
    pub full: RunOutcome,
    pub direct: RunOutcome,
}

impl AblationOutcome {
    /// Full, direct and full minus direct, scored against ground truth.
    pub fn table(&self) -> Result<ReportTable, crate::report::ReportError> {
        let full = report_values("full", &self.full.report.vs_ground_truth)?;
        let direct = report_values("direct", &self.direct.report.vs_ground_truth)?;
        Ok(ReportTable {
            layout: Layout::Ablation,
            blocks: vec![ablation_block(&self.full.report.backbone, full, direct)?],
        })
    }

    pub fn exit_code(&self) -> i32 {
        self.full.exit_code().max(self.direct.exit_code())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

/// Writes the artifact tree and reports for one run under `dir`.
pub fn write_run(outcome: &RunOutcome, dir: &Path) -> Result<(), PipelineError> {
    for a in &outcome.artifacts {
        let t = dir.join("trials").join(&a.trial_id);
        write_file(&t.join("decoded.ppm"), &a.decoded)?;
        if let Some(d) = &a.description {
            write_file(&t.join("description.txt"), d)?;
        }
        if let Some(r) = &a.refined {
            write_file(&t.join("refined.ppm"), r)?;
        }
        write_file(&t.join("mesh.obj"), &a.mesh_obj)?;
        for (label, bytes) in ViewLabel::ALL.iter().zip(&a.views) {
            write_file(&t.join("views").join(format!("{label}.ppm")), bytes)?;
        }
        write_file(&t.join("metrics.json"), &a.evaluation)?;
    }
    let report = &outcome.report;
    write_file(&dir.join("report.json"), report.to_json().as_bytes())?;
    write_file(&dir.join("failures.txt"), report.failures_text().as_bytes())?;
    for (name, table) in [("table_gt.txt", report.gt_table()), ("table_intermediate.txt", report.intermediate_table())]
    {
        let path = dir.join(name);
        match table.and_then(|t| render_table(&t)) {
            Ok(text) => write_file(&path, text.as_bytes())?,
            Err(e) => {
                log::warn!("{name} not written: {e}");
                if path.exists() {
                    fs::remove_file(&path).map_err(io_err(&path))?;
                }
            }
        }
    }
    Ok(())
}

pub fn run_dir(output_dir: &Path, mode: Mode) -> PathBuf {
    output_dir.join(mode.as_str())
}

/// Loads the configured trials and runs the configured mode, writing
/// results under the output directory.
pub fn run_pipeline(config: &PipelineConfig, providers: Providers) -> Result<RunOutcome, PipelineError> {
    let inputs = load_inputs(config)?;
    let pipeline = Pipeline::new(config.clone(), providers);
    let outcome = pipeline.run(&inputs, config.mode)?;
    write_run(&outcome, &run_dir(&config.output_dir, config.mode))?;
    Ok(outcome)
}

pub fn run_ablation(config: &PipelineConfig, providers: Providers) -> Result<AblationOutcome, PipelineError> {
    let inputs = load_inputs(config)?;
    let pipeline = Pipeline::new(config.clone(), providers);
    let outcome = pipeline.run_ablation(&inputs)?;
    write_run(&outcome.full, &run_dir(&config.output_dir, Mode::Full))?;
    write_run(&outcome.direct, &run_dir(&config.output_dir, Mode::Direct))?;
    let path = config.output_dir.join("table_ablation.txt");
    match outcome.table().and_then(|t| render_table(&t)) {
        Ok(text) => write_file(&path, text.as_bytes())?,
        Err(e) => log::warn!("ablation table not written: {e}"),
    }
    Ok(outcome)
}
