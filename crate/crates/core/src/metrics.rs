//! Evaluation metrics over rendered views: CLIPScore-style cosine,
//! LPIPS-style perceptual distance, Inception Score, FID and the n-way
//! top-k classification protocol, with per-view to per-object to global
//! aggregation.
//!
//! Feature extractors and classifiers are pluggable. The toy providers at
//! the bottom are deterministic and dependency-free; real backbones are
//! reached through a [`Transport`] or a precomputed feature file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::image::{class_image, rgb_to_hue_sat, RgbImage};
use crate::providers::{image_payload, ProviderError, Transport};
use crate::renderer::ViewLabel;
use crate::util::{mean, population_std, seeded_rng, sha256_hex};

pub const FEATURE_MAGIC: &[u8; 4] = b"FEA1";
/// Eigenvalues of the FID product matrix above `-EIGEN_CLAMP_TOL * scale`
/// are treated as rounding noise and clamped to zero.
pub const EIGEN_CLAMP_TOL: f64 = 1e-10;
pub const FID_RIDGE: f64 = 1e-10;
const PROB_SUM_TOL: f64 = 1e-6;
const NWAY_STREAM: u64 = 60;

pub mod names {
    pub const NWAY_2_TOP1: &str = "nway2_top1";
    pub const NWAY_10_TOP1: &str = "nway10_top1";
    pub const NWAY_10_TOP2: &str = "nway10_top2";
    pub const NWAY_50_TOP1: &str = "nway50_top1";
    pub const NWAY_50_TOP2: &str = "nway50_top2";
    pub const CLIP_SCORE: &str = "clip_score";
    pub const INCEPTION_SCORE: &str = "inception_score";
    pub const FID: &str = "fid";
    pub const LPIPS: &str = "lpips";
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum MetricError {
    #[error("zero-norm embedding")]
    ZeroNorm,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid probability vector: {0}")]
    InvalidProbs(String),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("invalid n-way config: {0}")]
    NwayConfig(String),
    #[error("feature shape mismatch: {0}")]
    Shape(String),
    #[error("eigenvalue {value:e} below clamp tolerance")]
    NegativeEigenvalue { value: f64 },
    #[error("object {object}: {message}")]
    IncompleteViews { object: String, message: String },
    #[error("provider error: {0}")]
    Provider(#[from] ProviderError),
    #[error("feature file: {0}")]
    FeatureFile(String),
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity of two raw embeddings.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::DimensionMismatch(a.len(), b.len()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite("embedding"));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(MetricError::ZeroNorm);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub trait EmbeddingProvider: Send + Sync {
    fn id(&self) -> &str;
    fn embed(&self, image: &RgbImage) -> Result<Vec<f64>, MetricError>;
}

pub fn clip_score(x: &RgbImage, v: &RgbImage, embedder: &dyn EmbeddingProvider) -> Result<f64, MetricError> {
    cosine_similarity(&embedder.embed(x)?, &embedder.embed(v)?)
}

/// One layer of perceptual features: `positions` vectors of `channels` values each.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLayer {
    pub channels: usize,
    pub values: Vec<f64>,
    pub weight: f64,
}

impl FeatureLayer {
    pub fn positions(&self) -> usize {
        if self.channels == 0 {
            0
        } else {
            self.values.len() / self.channels
        }
    }
}

pub trait PerceptualFeatureProvider: Send + Sync {
    fn id(&self) -> &str;
    fn layers(&self, image: &RgbImage) -> Result<Vec<FeatureLayer>, MetricError>;
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = norm(v) + 1e-10;
    v.iter().map(|x| x / n).collect()
}

/// `sum_l w_l * mean_p ||f_l(x)[p] - f_l(v)[p]||^2` with each position's
/// channel vector unit-normalized.
pub fn lpips_from_layers(a: &[FeatureLayer], b: &[FeatureLayer]) -> Result<f64, MetricError> {
    if a.is_empty() || a.len() != b.len() {
        return Err(MetricError::Shape(format!("{} vs {} layers", a.len(), b.len())));
    }
    let mut total = 0.0;
    for (l, (la, lb)) in a.iter().zip(b).enumerate() {
        if la.channels == 0
            || la.channels != lb.channels
            || la.values.len() != lb.values.len()
            || la.values.len() % la.channels != 0
        {
            return Err(MetricError::Shape(format!("layer {l} shapes differ")));
        }
        if la.values.is_empty() {
            return Err(MetricError::Shape(format!("layer {l} is empty")));
        }
        let mut sum = 0.0;
        for (pa, pb) in la.values.chunks_exact(la.channels).zip(lb.values.chunks_exact(lb.channels)) {
            let (ua, ub) = (unit(pa), unit(pb));
            sum += ua.iter().zip(&ub).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        }
        total += la.weight * sum / la.positions() as f64;
    }
    if !total.is_finite() {
        return Err(MetricError::NonFinite("perceptual features"));
    }
    Ok(total)
}

pub fn lpips_distance(
    x: &RgbImage,
    v: &RgbImage,
    features: &dyn PerceptualFeatureProvider,
) -> Result<f64, MetricError> {
    lpips_from_layers(&features.layers(x)?, &features.layers(v)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbVector {
    probs: Vec<f64>,
}

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self, MetricError> {
        if probs.is_empty() {
            return Err(MetricError::InvalidProbs("empty".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(MetricError::InvalidProbs("entries must be finite and non-negative".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(MetricError::InvalidProbs(format!("entries sum to {sum}")));
        }
        Ok(Self { probs })
    }

    pub fn one_hot(k: usize, class: usize) -> Self {
        let mut probs = vec![0.0; k];
        probs[class] = 1.0;
        Self { probs }
    }

    pub fn uniform(k: usize) -> Self {
        Self { probs: vec![1.0 / k as f64; k] }
    }

    pub fn softmax(logits: &[f64]) -> Result<Self, MetricError> {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        Self::new(exps.into_iter().map(|e| e / sum).collect())
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    /// Highest-probability class, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

pub trait ClassProbProvider: Send + Sync {
    fn id(&self) -> &str;
    fn num_classes(&self) -> usize;
    fn classify(&self, image: &RgbImage) -> Result<ProbVector, MetricError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

/// Splits are contiguous chunks; the last absorbs the remainder.
pub fn inception_score_from_probs(probs: &[ProbVector], splits: usize) -> Result<Summary, MetricError> {
    if splits == 0 || probs.len() < splits {
        return Err(MetricError::TooFewSamples { needed: splits.max(1), got: probs.len() });
    }
    let k = probs[0].num_classes();
    if let Some(p) = probs.iter().find(|p| p.num_classes() != k) {
        return Err(MetricError::DimensionMismatch(k, p.num_classes()));
    }
    let chunk = probs.len() / splits;
    let mut scores = Vec::with_capacity(splits);
    for s in 0..splits {
        let part = if s + 1 == splits { &probs[s * chunk..] } else { &probs[s * chunk..(s + 1) * chunk] };
        let mut marginal = vec![0.0; k];
        for p in part {
            for (m, q) in marginal.iter_mut().zip(p.probs()) {
                *m += q / part.len() as f64;
            }
        }
        let kl_mean = part
            .iter()
            .map(|p| {
                p.probs()
                    .iter()
                    .zip(&marginal)
                    .filter(|(q, _)| **q > 0.0)
                    .map(|(q, m)| q * (q.ln() - m.ln()))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / part.len() as f64;
        scores.push(kl_mean.exp());
    }
    Ok(Summary { mean: mean(&scores), std: population_std(&scores) })
}

pub fn inception_score(
    views: &[RgbImage],
    classifier: &dyn ClassProbProvider,
    splits: usize,
) -> Result<Summary, MetricError> {
    let probs = views.iter().map(|v| classifier.classify(v)).collect::<Result<Vec<_>, _>>()?;
    inception_score_from_probs(&probs, splits)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidResult {
    pub value: f64,
    /// Set when the covariance ridge had to be added.
    pub regularized: bool,
}

fn mean_and_cov(set: &[Vec<f64>], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = set.len();
    let mut mu = DVector::zeros(dim);
    for row in set {
        mu += DVector::from_column_slice(row);
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(dim, dim);
    for row in set {
        let d = DVector::from_column_slice(row) - &mu;
        cov += &d * d.transpose();
    }
    cov /= (n - 1) as f64;
    (mu, cov)
}

fn psd_sqrt(m: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>, f64> {
    let eig = m.clone().symmetric_eigen();
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -tol {
            return Err(*v);
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn sqrt_trace_product(c1: &DMatrix<f64>, c2: &DMatrix<f64>, tol: f64) -> Result<f64, f64> {
    let s1 = psd_sqrt(c1, tol)?;
    let inner = symmetrize(&(&s1 * c2 * &s1));
    let eig = inner.symmetric_eigen();
    let mut total = 0.0;
    for &v in eig.eigenvalues.iter() {
        if v < -tol {
            return Err(v);
        }
        total += v.max(0.0).sqrt();
    }
    Ok(total)
}

/// Fréchet distance between Gaussian fits of two feature sets (sample
/// covariance with `1/(N-1)`).
pub fn fid(set_a: &[Vec<f64>], set_b: &[Vec<f64>]) -> Result<FidResult, MetricError> {
    for set in [set_a, set_b] {
        if set.len() < 2 {
            return Err(MetricError::TooFewSamples { needed: 2, got: set.len() });
        }
    }
    let dim = set_a[0].len();
    for row in set_a.iter().chain(set_b) {
        if row.len() != dim {
            return Err(MetricError::DimensionMismatch(dim, row.len()));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(MetricError::NonFinite("features"));
        }
    }
    let (mu1, c1) = mean_and_cov(set_a, dim);
    let (mu2, c2) = mean_and_cov(set_b, dim);
    let scale = c1.amax().max(c2.amax()).max(1.0);
    let tol = EIGEN_CLAMP_TOL * scale;
    let diff = (&mu1 - &mu2).norm_squared();
    let (cross, regularized) = match sqrt_trace_product(&c1, &c2, tol) {
        Ok(t) => (t, false),
        Err(_) => {
            let ridge = DMatrix::identity(dim, dim) * FID_RIDGE * scale;
            let t = sqrt_trace_product(&(&c1 + &ridge), &(&c2 + &ridge), tol)
                .map_err(|value| MetricError::NegativeEigenvalue { value })?;
            (t, true)
        }
    };
    let value = diff + c1.trace() + c2.trace() - 2.0 * cross;
    Ok(FidResult { value: value.max(0.0), regularized })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NwayConfig {
    pub n: usize,
    pub k: usize,
    pub trials: usize,
    pub seed: u64,
    pub num_classes: usize,
}

impl NwayConfig {
    pub fn validate(&self) -> Result<(), MetricError> {
        let bad = |m: String| Err(MetricError::NwayConfig(m));
        if self.n < 2 {
            return bad(format!("n must be at least 2, got {}", self.n));
        }
        if self.k < 1 || self.k >= self.n {
            return bad(format!("k must satisfy 1 <= k < n, got k={} n={}", self.k, self.n));
        }
        if self.trials == 0 {
            return bad("trials must be positive".into());
        }
        if self.n > self.num_classes {
            return bad(format!("n={} exceeds the {} classes", self.n, self.num_classes));
        }
        Ok(())
    }

    pub fn metric_name(&self) -> String {
        format!("nway{}_top{}", self.n, self.k)
    }
}

/// Whether `target` ranks within the top `k` of `candidates` by `scores`,
/// ties going to the lower class index.
pub fn ranks_within(scores: &[f64], target: usize, candidates: &[usize], k: usize) -> bool {
    let ahead = candidates
        .iter()
        .filter(|&&c| c != target && (scores[c] > scores[target] || (scores[c] == scores[target] && c < target)))
        .count();
    ahead < k
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NwayResult {
    /// Accuracy per trial, averaged over views.
    pub per_trial: Vec<f64>,
    /// Accuracy per view, averaged over trials.
    pub per_view: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// n-way top-k accuracy of the views against the class the reference
/// distribution ranks first. Negatives are drawn independently per
/// (trial, view), uniformly without replacement.
pub fn nway_topk(
    gt_probs: &ProbVector,
    view_probs: &[ProbVector],
    config: &NwayConfig,
) -> Result<NwayResult, MetricError> {
    config.validate()?;
    let kk = config.num_classes;
    if gt_probs.num_classes() != kk {
        return Err(MetricError::DimensionMismatch(kk, gt_probs.num_classes()));
    }
    if view_probs.is_empty() {
        return Err(MetricError::TooFewSamples { needed: 1, got: 0 });
    }
    if let Some(p) = view_probs.iter().find(|p| p.num_classes() != kk) {
        return Err(MetricError::DimensionMismatch(kk, p.num_classes()));
    }
    let target = gt_probs.argmax();
    let mut rng = seeded_rng(config.seed, NWAY_STREAM);
    let mut per_trial = Vec::with_capacity(config.trials);
    let mut view_hits = vec![0usize; view_probs.len()];
    let mut candidates = Vec::with_capacity(config.n);
    for _ in 0..config.trials {
        let mut hits = 0usize;
        for (v, probs) in view_probs.iter().enumerate() {
            candidates.clear();
            candidates.push(target);
            for idx in sample(&mut rng, kk - 1, config.n - 1) {
                candidates.push(if idx >= target { idx + 1 } else { idx });
            }
            if ranks_within(probs.probs(), target, &candidates, config.k) {
                hits += 1;
                view_hits[v] += 1;
            }
        }
        per_trial.push(hits as f64 / view_probs.len() as f64);
    }
    let per_view = view_hits.iter().map(|&h| h as f64 / config.trials as f64).collect();
    Ok(NwayResult { mean: mean(&per_trial), std: population_std(&per_trial), per_trial, per_view })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReportSettings {
    pub nway: Vec<NwayConfig>,
    pub provider_ids: BTreeMap<String, String>,
    pub view_set_hash: String,
    pub notes: Vec<String>,
}

pub type Scores = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_view: BTreeMap<String, BTreeMap<ViewLabel, Scores>>,
    pub per_object: BTreeMap<String, Scores>,
    pub global: BTreeMap<String, Summary>,
    pub settings: ReportSettings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewScore {
    pub object_id: String,
    pub view: ViewLabel,
    pub scores: Scores,
}

/// Averages each object's six view scores, then summarizes the per-object
/// values (mean and population std).
pub fn aggregate(per_view_scores: &[ViewScore], settings: ReportSettings) -> Result<MetricReport, MetricError> {
    let mut per_view: BTreeMap<String, BTreeMap<ViewLabel, Scores>> = BTreeMap::new();
    for s in per_view_scores {
        let views = per_view.entry(s.object_id.clone()).or_default();
        if views.insert(s.view, s.scores.clone()).is_some() {
            return Err(MetricError::IncompleteViews {
                object: s.object_id.clone(),
                message: format!("duplicate view {}", s.view),
            });
        }
    }
    let metric_names: Option<Vec<String>> =
        per_view.values().next().and_then(|v| v.values().next()).map(|s| s.keys().cloned().collect());
    let mut per_object = BTreeMap::new();
    for (object, views) in &per_view {
        for label in ViewLabel::ALL {
            if !views.contains_key(&label) {
                return Err(MetricError::IncompleteViews {
                    object: object.clone(),
                    message: format!("missing view {label}"),
                });
            }
        }
        let names = metric_names.as_ref().expect("non-empty");
        let mut scores = Scores::new();
        for name in names {
            let mut values = Vec::with_capacity(6);
            for label in ViewLabel::ALL {
                let v = views[&label].get(name).ok_or_else(|| MetricError::IncompleteViews {
                    object: object.clone(),
                    message: format!("view {label} lacks metric {name}"),
                })?;
                values.push(*v);
            }
            scores.insert(name.clone(), mean(&values));
        }
        if views.values().any(|s| s.len() != names.len()) {
            return Err(MetricError::IncompleteViews {
                object: object.clone(),
                message: "metric sets differ across views".into(),
            });
        }
        per_object.insert(object.clone(), scores);
    }
    let mut global = BTreeMap::new();
    if let Some(names) = &metric_names {
        for name in names {
            let values: Vec<f64> = per_object.values().map(|s: &Scores| s[name]).collect();
            global.insert(name.clone(), Summary { mean: mean(&values), std: population_std(&values) });
        }
    }
    Ok(MetricReport { per_view, per_object, global, settings })
}

/// Row-major `f32` feature matrix with one id per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub ids: Vec<String>,
    pub dim: usize,
    pub rows: Vec<Vec<f32>>,
}

impl FeatureFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.rows.len() * self.dim * 4);
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&(self.rows.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for row in &self.rows {
            for v in row {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_parts(bytes: &[u8], ids_text: &str) -> Result<Self, MetricError> {
        let bad = |m: String| Err(MetricError::FeatureFile(m));
        if bytes.len() < 12 || &bytes[..4] != FEATURE_MAGIC {
            return bad("missing FEA1 header".into());
        }
        let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() != count * dim * 4 {
            return bad(format!("expected {} payload bytes, found {}", count * dim * 4, body.len()));
        }
        let ids: Vec<String> = ids_text.lines().map(str::to_string).collect();
        if ids.len() != count {
            return bad(format!("{} ids for {count} rows", ids.len()));
        }
        let values: Vec<f32> = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let rows =
            if dim == 0 { vec![Vec::new(); count] } else { values.chunks_exact(dim).map(<[f32]>::to_vec).collect() };
        Ok(Self { ids, dim, rows })
    }

    pub fn save(&self, matrix_path: &Path, ids_path: &Path) -> Result<(), MetricError> {
        let io = |e: std::io::Error| MetricError::FeatureFile(e.to_string());
        fs::write(matrix_path, self.to_bytes()).map_err(io)?;
        let mut ids = self.ids.join("\n");
        ids.push('\n');
        fs::write(ids_path, ids).map_err(io)
    }

    pub fn load(matrix_path: &Path, ids_path: &Path) -> Result<Self, MetricError> {
        let io = |e: std::io::Error| MetricError::FeatureFile(e.to_string());
        Self::from_parts(&fs::read(matrix_path).map_err(io)?, &fs::read_to_string(ids_path).map_err(io)?)
    }
}

/// Content id used to key precomputed features: SHA-256 of the image's PPM bytes.
pub fn image_content_id(image: &RgbImage) -> String {
    sha256_hex(&image.to_ppm_bytes())
}

/// Looks embeddings up by image content id.
pub struct PrecomputedEmbedder {
    id: String,
    table: BTreeMap<String, Vec<f64>>,
}

impl PrecomputedEmbedder {
    pub fn new(id: impl Into<String>, file: &FeatureFile) -> Self {
        let table =
            file.ids.iter().cloned().zip(file.rows.iter().map(|r| r.iter().map(|&v| v as f64).collect())).collect();
        Self { id: id.into(), table }
    }
}

impl EmbeddingProvider for PrecomputedEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed(&self, image: &RgbImage) -> Result<Vec<f64>, MetricError> {
        let key = image_content_id(image);
        self.table.get(&key).cloned().ok_or_else(|| MetricError::FeatureFile(format!("no features for image {key}")))
    }
}

fn f64_array(value: &Value, field: &str) -> Result<Vec<f64>, MetricError> {
    if let Some(err) = value.get("error").and_then(Value::as_str) {
        return Err(ProviderError::Remote(err.to_string()).into());
    }
    value
        .get(field)
        .and_then(Value::as_array)
        .and_then(|a| a.iter().map(Value::as_f64).collect::<Option<Vec<_>>>())
        .ok_or_else(|| ProviderError::Protocol(format!("response has no numeric \"{field}\" array")).into())
}

/// Request `{image}`; response `{embedding: [..]}`.
pub struct RemoteEmbedder {
    id: String,
    transport: Arc<dyn Transport>,
}

impl RemoteEmbedder {
    pub fn new(id: impl Into<String>, transport: Arc<dyn Transport>) -> Self {
        Self { id: id.into(), transport }
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed(&self, image: &RgbImage) -> Result<Vec<f64>, MetricError> {
        let resp = self.transport.call(&json!({ "image": image_payload(image) }))?;
        f64_array(&resp, "embedding")
    }
}

/// Request `{image}`; response `{probs: [..]}`.
pub struct RemoteClassifier {
    id: String,
    classes: usize,
    transport: Arc<dyn Transport>,
}

impl RemoteClassifier {
    pub fn new(id: impl Into<String>, classes: usize, transport: Arc<dyn Transport>) -> Self {
        Self { id: id.into(), classes, transport }
    }
}

impl ClassProbProvider for RemoteClassifier {
    fn id(&self) -> &str {
        &self.id
    }

    fn num_classes(&self) -> usize {
        self.classes
    }

    fn classify(&self, image: &RgbImage) -> Result<ProbVector, MetricError> {
        let resp = self.transport.call(&json!({ "image": image_payload(image) }))?;
        let p = ProbVector::new(f64_array(&resp, "probs")?)?;
        if p.num_classes() != self.classes {
            return Err(MetricError::DimensionMismatch(self.classes, p.num_classes()));
        }
        Ok(p)
    }
}

/// Request `{image}`; response `{layers: [{channels, weight, values}]}`.
pub struct RemotePerceptualFeatures {
    id: String,
    transport: Arc<dyn Transport>,
}

impl RemotePerceptualFeatures {
    pub fn new(id: impl Into<String>, transport: Arc<dyn Transport>) -> Self {
        Self { id: id.into(), transport }
    }
}

impl PerceptualFeatureProvider for RemotePerceptualFeatures {
    fn id(&self) -> &str {
        &self.id
    }

    fn layers(&self, image: &RgbImage) -> Result<Vec<FeatureLayer>, MetricError> {
        let resp = self.transport.call(&json!({ "image": image_payload(image) }))?;
        let layers = resp
            .get("layers")
            .and_then(Value::as_array)
            .ok_or_else(|| ProviderError::Protocol("response has no \"layers\" array".into()))?;
        layers
            .iter()
            .map(|l| {
                let channels = l
                    .get("channels")
                    .and_then(Value::as_u64)
                    .ok_or_else(|| ProviderError::Protocol("layer without channels".into()))?;
                let weight = l.get("weight").and_then(Value::as_f64).unwrap_or(1.0);
                Ok(FeatureLayer { channels: channels as usize, weight, values: f64_array(l, "values")? })
            })
            .collect()
    }
}

/// Concatenated per-channel intensity histograms, L2-normalized.
pub struct ColorHistogramEmbedder {
    bins: usize,
}

impl ColorHistogramEmbedder {
    pub fn new(bins: usize) -> Self {
        Self { bins: bins.max(1) }
    }
}

impl EmbeddingProvider for ColorHistogramEmbedder {
    fn id(&self) -> &str {
        "toy-color-histogram"
    }

    fn embed(&self, image: &RgbImage) -> Result<Vec<f64>, MetricError> {
        let mut hist = vec![0.0; 3 * self.bins];
        for px in image.pixels().chunks_exact(3) {
            for (ch, &v) in px.iter().enumerate() {
                let bin = (v as usize * self.bins / 256).min(self.bins - 1);
                hist[ch * self.bins + bin] += 1.0;
            }
        }
        let n = norm(&hist);
        if n == 0.0 {
            return Err(MetricError::ZeroNorm);
        }
        Ok(hist.into_iter().map(|h| h / n).collect())
    }
}

/// Multiscale features: at each scale every pixel contributes its RGB values
/// and the horizontal and vertical differences of its grey level.
pub struct GradientFeatures {
    sides: Vec<u32>,
}

impl GradientFeatures {
    pub fn new(sides: Vec<u32>) -> Self {
        Self { sides }
    }
}

impl Default for GradientFeatures {
    fn default() -> Self {
        Self::new(vec![32, 16, 8])
    }
}

impl PerceptualFeatureProvider for GradientFeatures {
    fn id(&self) -> &str {
        "toy-gradient-features"
    }

    fn layers(&self, image: &RgbImage) -> Result<Vec<FeatureLayer>, MetricError> {
        let weight = 1.0 / self.sides.len() as f64;
        Ok(self
            .sides
            .iter()
            .map(|&side| {
                let img = image.resize(side, side);
                let grey = |x: u32, y: u32| {
                    let p = img.get(x.min(side - 1), y.min(side - 1));
                    (p[0] as f64 + p[1] as f64 + p[2] as f64) / (3.0 * 255.0)
                };
                let mut values = Vec::with_capacity((side * side * 5) as usize);
                for y in 0..side {
                    for x in 0..side {
                        let p = img.get(x, y);
                        values.extend(p.map(|c| c as f64 / 255.0));
                        values.push(grey(x + 1, y) - grey(x, y));
                        values.push(grey(x, y + 1) - grey(x, y));
                    }
                }
                FeatureLayer { channels: 5, values, weight }
            })
            .collect())
    }
}

/// Mean `(s cos h, s sin h, v)` over pixels that are not near-white.
pub fn chroma_signature(image: &RgbImage) -> [f64; 3] {
    let mut acc = [0.0; 3];
    let mut count = 0usize;
    for px in image.pixels().chunks_exact(3) {
        if px.iter().all(|&c| c >= 250) {
            continue;
        }
        let (h, s) = rgb_to_hue_sat([px[0], px[1], px[2]]);
        let v = *px.iter().max().unwrap() as f64 / 255.0;
        let angle = std::f64::consts::TAU * h;
        acc[0] += s * angle.cos();
        acc[1] += s * angle.sin();
        acc[2] += v;
        count += 1;
    }
    if count == 0 {
        return [0.0, 0.0, 1.0];
    }
    acc.map(|a| a / count as f64)
}

/// Softmax over negative squared distances between an image's chroma
/// signature and per-class templates taken from the procedural class
/// stimuli.
pub struct TemplateClassifier {
    templates: Vec<[f64; 3]>,
    sharpness: f64,
}

impl TemplateClassifier {
    pub fn new(num_classes: usize, sharpness: f64) -> Self {
        Self { templates: (0..num_classes).map(|c| chroma_signature(&class_image(c, 32))).collect(), sharpness }
    }

    pub fn from_templates(templates: Vec<[f64; 3]>, sharpness: f64) -> Self {
        Self { templates, sharpness }
    }
}

impl ClassProbProvider for TemplateClassifier {
    fn id(&self) -> &str {
        "toy-template-classifier"
    }

    fn num_classes(&self) -> usize {
        self.templates.len()
    }

    fn classify(&self, image: &RgbImage) -> Result<ProbVector, MetricError> {
        let sig = chroma_signature(image);
        // only the chroma plane separates classes; brightness is ignored
        let logits: Vec<f64> = self
            .templates
            .iter()
            .map(|t| -self.sharpness * ((sig[0] - t[0]).powi(2) + (sig[1] - t[1]).powi(2)))
            .collect();
        ProbVector::softmax(&logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    struct Fixed(Vec<Vec<f64>>);
    impl EmbeddingProvider for Fixed {
        fn id(&self) -> &str {
            "fixed"
        }
        fn embed(&self, image: &RgbImage) -> Result<Vec<f64>, MetricError> {
            Ok(self.0[image.get(0, 0)[0] as usize].clone())
        }
    }

    #[test]
    fn clip_score_identities() {
        let a = RgbImage::filled(2, 2, [0, 0, 0]);
        let b = RgbImage::filled(2, 2, [1, 0, 0]);
        let e = Fixed(vec![vec![1.0, 0.0], vec![0.0, 3.0]]);
        assert_eq!(clip_score(&a, &b, &e).unwrap(), 0.0);
        assert!((clip_score(&a, &a, &e).unwrap() - 1.0).abs() < 1e-9);
        let z = Fixed(vec![vec![0.0, 0.0]]);
        assert_eq!(clip_score(&a, &a, &z), Err(MetricError::ZeroNorm));
        let x = [0.3, -1.2, 2.0];
        let y = [1.5, 0.1, -0.4];
        let c = cosine_similarity(&x, &y).unwrap();
        assert_eq!(c, cosine_similarity(&y, &x).unwrap());
        assert!((cosine_similarity(&x.map(|v| v * 7.0), &y).unwrap() - c).abs() < 1e-15);
    }

    #[test]
    fn histogram_clip_matches_hand_computation() {
        // a: pixels (0,0,0), (255,255,255); b: pixels (0,0,0), (0,0,0)
        let a = RgbImage::new(2, 1, vec![0, 0, 0, 255, 255, 255]).unwrap();
        let b = RgbImage::new(2, 1, vec![0, 0, 0, 0, 0, 0]).unwrap();
        // 3 bins per channel: a = (1,0,1) x3, b = (2,0,0) x3
        // cos = 3*2 / (sqrt(6) * sqrt(12)) = 6 / sqrt(72)
        let expected = 6.0 / 72f64.sqrt();
        let got = clip_score(&a, &b, &ColorHistogramEmbedder::new(3)).unwrap();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
    }

    fn layer(values: Vec<f64>, channels: usize) -> FeatureLayer {
        FeatureLayer { channels, values, weight: 1.0 }
    }

    #[test]
    fn lpips_formula() {
        let d = lpips_from_layers(&[layer(vec![1.0, 0.0], 2)], &[layer(vec![0.0, 1.0], 2)]).unwrap();
        assert!((d - 2.0).abs() < 1e-9);
        let a = vec![layer(vec![0.3, 0.2, -1.0, 0.5], 2)];
        let b = vec![layer(vec![0.1, 0.9, 0.4, 0.4], 2)];
        let doubled = vec![layer(a[0].values.iter().map(|v| v * 2.0).collect(), 2)];
        let d1 = lpips_from_layers(&a, &b).unwrap();
        assert!((lpips_from_layers(&doubled, &b).unwrap() - d1).abs() < 1e-9);
        assert!(lpips_from_layers(&a, &[layer(vec![1.0, 2.0], 2)]).is_err());
        let img = class_image(4, 32);
        assert_eq!(lpips_distance(&img, &img, &GradientFeatures::default()).unwrap(), 0.0);
        assert!(lpips_distance(&img, &class_image(5, 32), &GradientFeatures::default()).unwrap() > 0.0);
    }

    #[test]
    fn inception_score_fixtures() {
        let same: Vec<ProbVector> = (0..10).map(|_| ProbVector::new(vec![0.2, 0.5, 0.3]).unwrap()).collect();
        assert!((inception_score_from_probs(&same, 2).unwrap().mean - 1.0).abs() < 1e-12);
        let uniform: Vec<ProbVector> = (0..10).map(|_| ProbVector::uniform(4)).collect();
        assert!((inception_score_from_probs(&uniform, 1).unwrap().mean - 1.0).abs() < 1e-12);
        for k in [2usize, 5, 7] {
            let one_hot: Vec<ProbVector> = (0..k).map(|c| ProbVector::one_hot(k, c)).collect();
            let is = inception_score_from_probs(&one_hot, 1).unwrap();
            assert!((is.mean - k as f64).abs() < 1e-12);
            assert_eq!(is.std, 0.0);
        }
        assert!(matches!(inception_score_from_probs(&uniform[..3], 4), Err(MetricError::TooFewSamples { .. })));
    }

    #[test]
    fn prob_vector_validation() {
        assert!(ProbVector::new(vec![0.5, 0.4]).is_err());
        assert!(ProbVector::new(vec![1.5, -0.5]).is_err());
        assert!(ProbVector::new(vec![]).is_err());
        assert_eq!(ProbVector::new(vec![0.4, 0.4, 0.2]).unwrap().argmax(), 0);
    }

    #[test]
    fn fid_degenerate_and_identical() {
        let a: Vec<Vec<f64>> = (0..5).map(|_| vec![0.0, 0.0]).collect();
        let b: Vec<Vec<f64>> = (0..5).map(|_| vec![2.0, 0.0]).collect();
        assert!((fid(&a, &b).unwrap().value - 4.0).abs() < 1e-12);
        let mut rng = seeded_rng(1, 0);
        let set: Vec<Vec<f64>> = (0..50).map(|_| (0..6).map(|_| rng.random::<f64>() * 3.0).collect()).collect();
        assert!(fid(&set, &set).unwrap().value <= 1e-6);
        let other: Vec<Vec<f64>> = (0..40).map(|_| (0..6).map(|_| rng.random::<f64>()).collect()).collect();
        let (ab, ba) = (fid(&set, &other).unwrap().value, fid(&other, &set).unwrap().value);
        assert!((ab - ba).abs() < 1e-6);
        assert!(fid(&a[..1], &b).is_err());
        assert!(fid(&a, &[vec![1.0], vec![2.0]]).is_err());
    }

    #[test]
    fn fid_rank_deficient_sets() {
        // fewer samples than dimensions: singular covariances
        let mut rng = seeded_rng(2, 0);
        let a: Vec<Vec<f64>> = (0..4).map(|_| (0..12).map(|_| rng.random::<f64>()).collect()).collect();
        let b: Vec<Vec<f64>> = (0..6).map(|_| (0..12).map(|_| rng.random::<f64>()).collect()).collect();
        let r = fid(&a, &b).unwrap();
        assert!(r.value.is_finite() && r.value > 0.0);
    }

    /// Closed form for diagonal covariances: |dmu|^2 + sum (s1 - s2)^2.
    #[test]
    fn fid_matches_gaussian_closed_form() {
        let d = 8;
        let mu1: Vec<f64> = (0..d).map(|i| i as f64 * 0.5).collect();
        let mu2: Vec<f64> = (0..d).map(|i| i as f64 * 0.5 + if i % 2 == 0 { 1.0 } else { -0.5 }).collect();
        let s1: Vec<f64> = (0..d).map(|i| 1.0 + 0.25 * i as f64).collect();
        let s2: Vec<f64> = (0..d).map(|i| 2.0 - 0.1 * i as f64).collect();
        let expected: f64 = (0..d).map(|i| (mu1[i] - mu2[i]).powi(2) + (s1[i] - s2[i]).powi(2)).sum();
        let mut rng = seeded_rng(3, 0);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut draw = |mu: &[f64], s: &[f64]| -> Vec<Vec<f64>> {
            (0..10_000).map(|_| (0..d).map(|i| mu[i] + s[i] * normal.sample(&mut rng)).collect()).collect()
        };
        let a = draw(&mu1, &s1);
        let b = draw(&mu2, &s2);
        let got = fid(&a, &b).unwrap().value;
        assert!((got - expected).abs() / expected < 0.02, "{got} vs {expected}");
    }

    fn nway(n: usize, k: usize, trials: usize, classes: usize) -> NwayConfig {
        NwayConfig { n, k, trials, seed: 7, num_classes: classes }
    }

    #[test]
    fn nway_oracle_classifier_and_forced_last() {
        let gt = ProbVector::one_hot(10, 3);
        let views = vec![ProbVector::one_hot(10, 3); 6];
        for (n, k) in [(2, 1), (10, 1), (10, 2), (5, 4)] {
            let r = nway_topk(&gt, &views, &nway(n, k, 20, 10)).unwrap();
            assert_eq!((r.mean, r.std), (1.0, 0.0));
        }
        // class 3 strictly last everywhere
        let mut p = vec![0.11; 10];
        p[3] = 0.01;
        let views = vec![ProbVector::new(p).unwrap(); 6];
        let r = nway_topk(&gt, &views, &nway(4, 3, 20, 10)).unwrap();
        assert_eq!(r.mean, 0.0);
    }

    #[test]
    fn nway_config_errors() {
        let gt = ProbVector::one_hot(5, 0);
        let views = vec![ProbVector::uniform(5); 6];
        assert!(nway_topk(&gt, &views, &nway(6, 1, 5, 5)).is_err());
        assert!(nway_topk(&gt, &views, &nway(3, 3, 5, 5)).is_err());
        assert!(nway_topk(&gt, &views, &nway(3, 0, 5, 5)).is_err());
        assert!(nway_topk(&gt, &views, &nway(1, 1, 5, 5)).is_err());
        assert!(nway_topk(&gt, &[ProbVector::uniform(4)], &nway(3, 1, 5, 5)).is_err());
    }

    #[test]
    fn nway_ties_go_to_lower_index() {
        let scores = [0.25, 0.25, 0.25, 0.25];
        assert!(ranks_within(&scores, 1, &[1, 2, 3], 1));
        assert!(!ranks_within(&scores, 2, &[0, 2, 3], 1));
        assert!(ranks_within(&scores, 2, &[0, 2, 3], 2));
    }

    /// Expected accuracy over all C(K-1, n-1) candidate sets, per view.
    fn exhaustive(target: usize, views: &[ProbVector], n: usize, k: usize) -> f64 {
        let kk = views[0].num_classes();
        let others: Vec<usize> = (0..kk).filter(|&c| c != target).collect();
        let mut sets: Vec<Vec<usize>> = vec![vec![]];
        for _ in 0..n - 1 {
            let mut next = Vec::new();
            for s in &sets {
                let start = s.last().map_or(0, |&l| others.iter().position(|&o| o == l).unwrap() + 1);
                for &o in &others[start..] {
                    let mut t = s.clone();
                    t.push(o);
                    next.push(t);
                }
            }
            sets = next;
        }
        let mut total = 0.0;
        for v in views {
            let hits = sets
                .iter()
                .filter(|s| {
                    let mut c = vec![target];
                    c.extend(s.iter().copied());
                    ranks_within(v.probs(), target, &c, k)
                })
                .count();
            total += hits as f64 / sets.len() as f64;
        }
        total / views.len() as f64
    }

    #[test]
    fn nway_matches_exhaustive_enumeration() {
        let views: Vec<ProbVector> = [
            [0.30, 0.35, 0.10, 0.05, 0.20],
            [0.20, 0.20, 0.20, 0.20, 0.20],
            [0.10, 0.40, 0.25, 0.15, 0.10],
            [0.45, 0.05, 0.30, 0.10, 0.10],
            [0.25, 0.30, 0.05, 0.25, 0.15],
            [0.15, 0.05, 0.50, 0.20, 0.10],
        ]
        .iter()
        .map(|p| ProbVector::new(p.to_vec()).unwrap())
        .collect();
        let gt = ProbVector::new(vec![0.6, 0.1, 0.1, 0.1, 0.1]).unwrap();
        let cfg = nway(3, 1, 10_000, 5);
        let r = nway_topk(&gt, &views, &cfg).unwrap();
        let expected = exhaustive(0, &views, 3, 1);
        let se = r.std / (cfg.trials as f64).sqrt();
        assert!((r.mean - expected).abs() <= 3.0 * se.max(1e-12), "{} vs {expected} (se {se})", r.mean);
        let r2 = nway_topk(&gt, &views, &NwayConfig { k: 2, ..cfg }).unwrap();
        assert!(r2.mean >= r.mean);
        assert_eq!(nway_topk(&gt, &views, &cfg).unwrap(), r);
    }

    fn scores(v: f64) -> Scores {
        Scores::from([("m".to_string(), v)])
    }

    #[test]
    fn aggregation_rules() {
        let mut rows: Vec<ViewScore> =
            ViewLabel::ALL.iter().map(|&l| ViewScore { object_id: "a".into(), view: l, scores: scores(0.2) }).collect();
        let r = aggregate(&rows, ReportSettings::default()).unwrap();
        assert!((r.per_object["a"]["m"] - 0.2).abs() < 1e-12);
        assert!((r.global["m"].mean - 0.2).abs() < 1e-12);
        assert!(r.global["m"].std < 1e-12);
        rows.extend(ViewLabel::ALL.iter().map(|&l| ViewScore { object_id: "b".into(), view: l, scores: scores(0.8) }));
        let r = aggregate(&rows, ReportSettings::default()).unwrap();
        assert!((r.global["m"].mean - 0.5).abs() < 1e-12);
        assert!((r.global["m"].std - 0.3).abs() < 1e-12);
        let missing: Vec<ViewScore> =
            rows.iter().filter(|s| !(s.object_id == "b" && s.view == ViewLabel::Back)).cloned().collect();
        assert!(matches!(aggregate(&missing, ReportSettings::default()), Err(MetricError::IncompleteViews { .. })));
    }

    #[test]
    fn feature_file_round_trip() {
        let file = FeatureFile {
            ids: vec!["x".into(), "y".into()],
            dim: 3,
            rows: vec![vec![1.0, 2.0, 3.5], vec![-1.0, 0.0, 0.25]],
        };
        let bytes = file.to_bytes();
        assert_eq!(&bytes[..12], b"FEA1\x02\x00\x00\x00\x03\x00\x00\x00");
        assert_eq!(FeatureFile::from_parts(&bytes, "x\ny\n").unwrap(), file);
        assert!(FeatureFile::from_parts(&bytes, "x\n").is_err());
        assert!(FeatureFile::from_parts(&bytes[..20], "x\ny\n").is_err());
        let img = class_image(0, 4);
        let f = FeatureFile { ids: vec![image_content_id(&img)], dim: 2, rows: vec![vec![0.5, 0.5]] };
        let e = PrecomputedEmbedder::new("pre", &f);
        assert_eq!(e.embed(&img).unwrap(), vec![0.5, 0.5]);
        assert!(e.embed(&class_image(1, 4)).is_err());
    }

    #[test]
    fn template_classifier_recovers_class_stimuli() {
        let clf = TemplateClassifier::new(10, 50.0);
        for c in 0..10 {
            assert_eq!(clf.classify(&class_image(c, 32)).unwrap().argmax(), c);
        }
    }
}
