//! EEG and image encoders, the alignment projection into conditioning space,
//! and contrastive training with analytic gradients and plain SGD.
//!
//! Both encoders are two-layer tanh networks followed by L2 normalization.
//! The projection is `clip(W z + b)` where `clip` maps a vector onto the unit
//! ball (`v / max(1, |v|)`), so it is the identity on unit vectors when `W`
//! is the identity. Training minimizes
//!
//! ```text
//! L = InfoNCE_sym(z_eeg, z_img; tau) + align_weight * mean_i |A(z_eeg_i) - z_img_i|^2
//! ```
//!
//! which requires `cond_dim == embed_dim` whenever `align_weight > 0`.

use std::fs;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, DatasetManifest, EegTrial, Split};
use crate::image::RgbImage;
use crate::nn::{params_from_le_f32, params_to_le_f32, Dense, Mlp2, Mlp2Trace};
use crate::util::seeded_rng;

pub const ALIGN_MAGIC: &[u8; 4] = b"ALN1";
/// Pre-normalization magnitude below which the fallback basis vector is used.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("contrastive batch needs at least 2 pairs, got {0}")]
    BatchTooSmall(usize),
    #[error("embedding {index} is not unit-normalized (norm {norm})")]
    Unnormalized { index: usize, norm: f64 },
    #[error("invalid alignment config: {0}")]
    Config(String),
    #[error("training split is empty")]
    EmptySplit,
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Vec<f64>,
    pub normalized: bool,
    /// Set when the pre-norm vector was (numerically) zero and the first
    /// basis vector was substituted.
    pub degenerate: bool,
}

impl Embedding {
    /// L2-normalizes `raw`, substituting `e_1` for a degenerate input.
    pub fn normalize(raw: &[f64]) -> Self {
        let norm = l2(raw);
        if norm < DEGENERATE_NORM {
            let mut values = vec![0.0; raw.len()];
            if let Some(first) = values.first_mut() {
                *first = 1.0;
            }
            return Self { values, normalized: true, degenerate: true };
        }
        Self { values: raw.iter().map(|v| v / norm).collect(), normalized: true, degenerate: false }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn cosine(&self, other: &Embedding) -> f64 {
        let dot: f64 = self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum();
        dot / (l2(&self.values) * l2(&other.values))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditioningVector {
    pub values: Vec<f64>,
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignConfig {
    pub embed_dim: usize,
    pub cond_dim: usize,
    pub eeg_hidden: usize,
    pub img_hidden: usize,
    /// Side of the square working resolution for the image encoder.
    pub image_side: u32,
    pub temperature: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub align_weight: f64,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            cond_dim: 16,
            eeg_hidden: 32,
            img_hidden: 32,
            image_side: 32,
            temperature: 0.07,
            learning_rate: 0.05,
            batch_size: 16,
            epochs: 40,
            align_weight: 1.0,
            seed: 0,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<(), AlignError> {
        let bad = |m: &str| Err(AlignError::Config(m.to_string()));
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be > 0");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be >= 0");
        }
        if self.embed_dim == 0 || self.cond_dim == 0 || self.eeg_hidden == 0 || self.img_hidden == 0 {
            return bad("dimensions must be positive");
        }
        if self.image_side == 0 {
            return bad("image_side must be positive");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if self.align_weight < 0.0 {
            return bad("align_weight must be >= 0");
        }
        if self.align_weight > 0.0 && self.cond_dim != self.embed_dim {
            return bad("cond_dim must equal embed_dim when align_weight > 0");
        }
        Ok(())
    }
}

/// Trained (or initialized) encoder and projection parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignParams {
    pub eeg_channels: usize,
    pub eeg_samples: usize,
    pub image_side: u32,
    pub eeg: Mlp2,
    pub img: Mlp2,
    pub proj: Dense,
}

impl AlignParams {
    pub fn init(channels: usize, samples: usize, config: &AlignConfig) -> Self {
        let mut rng = seeded_rng(config.seed, 10);
        let img_in = (config.image_side * config.image_side * 3) as usize;
        let eeg = Mlp2::glorot(channels * samples, config.eeg_hidden, config.embed_dim, &mut rng);
        let img = Mlp2::glorot(img_in, config.img_hidden, config.embed_dim, &mut rng);
        let proj = if config.cond_dim == config.embed_dim {
            Dense::identity(config.embed_dim)
        } else {
            Dense::glorot(config.embed_dim, config.cond_dim, &mut rng)
        };
        Self { eeg_channels: channels, eeg_samples: samples, image_side: config.image_side, eeg, img, proj }
    }

    pub fn embed_dim(&self) -> usize {
        self.eeg.out_dim()
    }

    pub fn cond_dim(&self) -> usize {
        self.proj.out_dim
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            eeg: self.eeg.zeros_like(),
            img: self.img.zeros_like(),
            proj: Dense::zeros(self.proj.in_dim, self.proj.out_dim),
            ..self.clone()
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.eeg.write_params(&mut out);
        self.img.write_params(&mut out);
        self.proj.write_params(&mut out);
        out
    }

    pub fn load_flat(&mut self, src: &[f64]) {
        let rest = self.eeg.read_params(src);
        let rest = self.img.read_params(rest);
        let rest = self.proj.read_params(rest);
        assert!(rest.is_empty(), "parameter vector longer than model");
    }

    pub fn num_params(&self) -> usize {
        self.eeg.num_params() + self.img.num_params() + self.proj.num_params()
    }

    fn visit_mut(&mut self, f: &mut impl FnMut(&mut f64)) {
        self.eeg.visit_mut(f);
        self.img.visit_mut(f);
        self.proj.visit_mut(f);
    }

    /// Checkpoint bytes: `ALN1`, seven little-endian u32 dims
    /// (C, T, image side, eeg hidden, img hidden, embed dim, cond dim), then
    /// the flat float32 parameter blob.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = ALIGN_MAGIC.to_vec();
        for d in [
            self.eeg_channels,
            self.eeg_samples,
            self.image_side as usize,
            self.eeg.hidden.out_dim,
            self.img.hidden.out_dim,
            self.embed_dim(),
            self.cond_dim(),
        ] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend(params_to_le_f32(&self.flatten()));
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self, AlignError> {
        if bytes.len() < 32 || &bytes[..4] != ALIGN_MAGIC {
            return Err(AlignError::Checkpoint("missing ALN1 header".into()));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (c, t, side, eh, ih, d, dc) = (dim(0), dim(1), dim(2), dim(3), dim(4), dim(5), dim(6));
        let config = AlignConfig {
            embed_dim: d,
            cond_dim: dc,
            eeg_hidden: eh,
            img_hidden: ih,
            image_side: side as u32,
            ..AlignConfig::default()
        };
        let mut params = AlignParams::init(c, t, &config);
        let blob = &bytes[32..];
        if blob.len() != params.num_params() * 4 {
            return Err(AlignError::Checkpoint(format!(
                "parameter blob has {} bytes, expected {}",
                blob.len(),
                params.num_params() * 4
            )));
        }
        params.load_flat(&params_from_le_f32(blob));
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<(), AlignError> {
        fs::write(path, self.to_checkpoint_bytes())
            .map_err(|source| AlignError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, AlignError> {
        let bytes = fs::read(path).map_err(|source| AlignError::Io { path: path.display().to_string(), source })?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

/// EEG encoder input: the flattened `C x T` matrix.
pub fn eeg_features(trial: &EegTrial, params: &AlignParams) -> Result<Vec<f64>, AlignError> {
    if trial.channels() != params.eeg_channels || trial.samples() != params.eeg_samples {
        return Err(AlignError::Dimension(format!(
            "trial is {}x{}, encoder expects {}x{}",
            trial.channels(),
            trial.samples(),
            params.eeg_channels,
            params.eeg_samples
        )));
    }
    Ok(trial.data().iter().map(|&v| v as f64).collect())
}

/// Image encoder input: the image resampled to the working resolution,
/// scaled to [0, 1] and mean-centered.
pub fn image_features(image: &RgbImage, side: u32) -> Vec<f64> {
    let small = image.resize(side, side);
    let v: Vec<f64> = small.pixels().iter().map(|&p| p as f64 / 255.0).collect();
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.into_iter().map(|x| x - m).collect()
}

pub fn encode_eeg(trial: &EegTrial, params: &AlignParams) -> Result<Embedding, AlignError> {
    let x = eeg_features(trial, params)?;
    Ok(Embedding::normalize(&params.eeg.forward(&x).out))
}

pub fn encode_image(image: &RgbImage, params: &AlignParams) -> Embedding {
    let x = image_features(image, params.image_side);
    Embedding::normalize(&params.img.forward(&x).out)
}

/// Projects an EEG embedding into conditioning space.
pub fn align_project(z_eeg: &Embedding, params: &AlignParams) -> Result<ConditioningVector, AlignError> {
    if z_eeg.dim() != params.proj.in_dim {
        return Err(AlignError::Dimension(format!(
            "embedding has dimension {}, projection expects {}",
            z_eeg.dim(),
            params.proj.in_dim
        )));
    }
    Ok(ConditioningVector { values: unit_ball_clip(&params.proj.forward(&z_eeg.values)) })
}

fn unit_ball_clip(v: &[f64]) -> Vec<f64> {
    let n = l2(v);
    if n <= 1.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

fn unit_ball_clip_backward(v: &[f64], grad: &[f64]) -> Vec<f64> {
    let n = l2(v);
    if n <= 1.0 {
        return grad.to_vec();
    }
    let c: Vec<f64> = v.iter().map(|x| x / n).collect();
    let cg: f64 = c.iter().zip(grad).map(|(a, b)| a * b).sum();
    grad.iter().zip(&c).map(|(g, ci)| (g - ci * cg) / n).collect()
}

fn normalize_backward(raw: &[f64], z: &Embedding, grad: &[f64]) -> Vec<f64> {
    if z.degenerate {
        return vec![0.0; raw.len()];
    }
    let n = l2(raw);
    let zg: f64 = z.values.iter().zip(grad).map(|(a, b)| a * b).sum();
    grad.iter().zip(&z.values).map(|(g, zi)| (g - zi * zg) / n).collect()
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Symmetric InfoNCE over the cosine-similarity matrix divided by `tau`.
pub fn contrastive_loss(batch_eeg: &[Embedding], batch_img: &[Embedding], tau: f64) -> Result<f64, AlignError> {
    if batch_eeg.len() != batch_img.len() {
        return Err(AlignError::Dimension(format!("batch lengths differ: {} vs {}", batch_eeg.len(), batch_img.len())));
    }
    if batch_eeg.len() < 2 {
        return Err(AlignError::BatchTooSmall(batch_eeg.len()));
    }
    if !(tau > 0.0) {
        return Err(AlignError::Config("temperature must be > 0".into()));
    }
    for (index, e) in batch_eeg.iter().chain(batch_img).enumerate() {
        let norm = l2(&e.values);
        if (norm - 1.0).abs() > 1e-6 {
            return Err(AlignError::Unnormalized { index, norm });
        }
    }
    let eeg: Vec<&[f64]> = batch_eeg.iter().map(|e| e.values.as_slice()).collect();
    let img: Vec<&[f64]> = batch_img.iter().map(|e| e.values.as_slice()).collect();
    Ok(info_nce(&eeg, &img, tau).0)
}

/// Loss and gradients with respect to both embedding sets.
fn info_nce(eeg: &[&[f64]], img: &[&[f64]], tau: f64) -> (f64, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let b = eeg.len();
    let d = eeg[0].len();
    let mut logits = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            logits[i * b + j] = eeg[i].iter().zip(img[j]).map(|(x, y)| x * y).sum::<f64>() / tau;
        }
    }
    let mut loss = 0.0;
    let mut d_logits = vec![0.0; b * b];
    let scale = 1.0 / (2.0 * b as f64);
    for i in 0..b {
        let row = (0..b).map(|j| logits[i * b + j]);
        let lse = log_sum_exp(row);
        loss += lse - logits[i * b + i];
        for j in 0..b {
            let p = (logits[i * b + j] - lse).exp();
            d_logits[i * b + j] += scale * (p - (i == j) as u8 as f64);
        }
    }
    for j in 0..b {
        let col = (0..b).map(|i| logits[i * b + j]);
        let lse = log_sum_exp(col);
        loss += lse - logits[j * b + j];
        for i in 0..b {
            let p = (logits[i * b + j] - lse).exp();
            d_logits[i * b + j] += scale * (p - (i == j) as u8 as f64);
        }
    }
    loss *= scale;
    let mut g_eeg = vec![vec![0.0; d]; b];
    let mut g_img = vec![vec![0.0; d]; b];
    for i in 0..b {
        for j in 0..b {
            let g = d_logits[i * b + j] / tau;
            if g == 0.0 {
                continue;
            }
            for k in 0..d {
                g_eeg[i][k] += g * img[j][k];
                g_img[j][k] += g * eeg[i][k];
            }
        }
    }
    (loss, g_eeg, g_img)
}

/// One training pair in encoder-input space.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub eeg: Vec<f64>,
    pub image: Vec<f64>,
}

/// Total training loss on a batch and, optionally, its gradient.
pub fn batch_loss_and_grad(
    params: &AlignParams,
    batch: &[&TrainingPair],
    config: &AlignConfig,
    want_grad: bool,
) -> (f64, Option<AlignParams>) {
    struct Fwd {
        trace: Mlp2Trace,
        z: Embedding,
    }
    let eeg_fwd: Vec<Fwd> = batch
        .iter()
        .map(|p| {
            let trace = params.eeg.forward(&p.eeg);
            let z = Embedding::normalize(&trace.out);
            Fwd { trace, z }
        })
        .collect();
    let img_fwd: Vec<Fwd> = batch
        .iter()
        .map(|p| {
            let trace = params.img.forward(&p.image);
            let z = Embedding::normalize(&trace.out);
            Fwd { trace, z }
        })
        .collect();
    let ze: Vec<&[f64]> = eeg_fwd.iter().map(|f| f.z.values.as_slice()).collect();
    let zi: Vec<&[f64]> = img_fwd.iter().map(|f| f.z.values.as_slice()).collect();
    let (mut loss, mut g_ze, mut g_zi) = info_nce(&ze, &zi, config.temperature);

    let mut grad = want_grad.then(|| params.zeros_like());
    if config.align_weight > 0.0 {
        let w = config.align_weight / batch.len() as f64;
        for (k, f) in eeg_fwd.iter().enumerate() {
            let v = params.proj.forward(&f.z.values);
            let c = unit_ball_clip(&v);
            let diff: Vec<f64> = c.iter().zip(zi[k]).map(|(a, b)| a - b).collect();
            loss += w * diff.iter().map(|x| x * x).sum::<f64>();
            if let Some(grad) = grad.as_mut() {
                let g_c: Vec<f64> = diff.iter().map(|x| 2.0 * w * x).collect();
                let g_v = unit_ball_clip_backward(&v, &g_c);
                let g_z = params.proj.backward(&f.z.values, &g_v, &mut grad.proj);
                for (a, b) in g_ze[k].iter_mut().zip(&g_z) {
                    *a += b;
                }
                for (a, b) in g_zi[k].iter_mut().zip(&g_c) {
                    *a -= b;
                }
            }
        }
    }

    if let Some(grad) = grad.as_mut() {
        for (k, pair) in batch.iter().enumerate() {
            let g_raw = normalize_backward(&eeg_fwd[k].trace.out, &eeg_fwd[k].z, &g_ze[k]);
            params.eeg.backward(&pair.eeg, &eeg_fwd[k].trace, &g_raw, &mut grad.eeg);
            let g_raw = normalize_backward(&img_fwd[k].trace.out, &img_fwd[k].z, &g_zi[k]);
            params.img.backward(&pair.image, &img_fwd[k].trace, &g_raw, &mut grad.img);
        }
    }
    (loss, grad)
}

#[derive(Debug, Clone)]
pub struct AlignTraining {
    pub params: AlignParams,
    /// Mean minibatch loss over a fixed evaluation partition of the training
    /// set; entry 0 is at initialization, entry `e` after epoch `e`.
    pub loss_curve: Vec<f64>,
}

impl AlignTraining {
    /// Two-column `epoch loss` text.
    pub fn loss_curve_text(&self) -> String {
        self.loss_curve.iter().enumerate().map(|(e, l)| format!("{e} {l:.9e}\n")).collect()
    }
}

pub fn make_pairs(
    trials: &[&EegTrial],
    image_of: impl Fn(&EegTrial) -> RgbImage,
    params_template: &AlignParams,
) -> Result<Vec<TrainingPair>, AlignError> {
    trials
        .iter()
        .map(|t| {
            Ok(TrainingPair {
                eeg: eeg_features(t, params_template)?,
                image: image_features(&image_of(t), params_template.image_side),
            })
        })
        .collect()
}

/// Trains encoders and projection on in-memory `(trial, image)` pairs.
pub fn train_alignment_on(
    trials: &[&EegTrial],
    image_of: impl Fn(&EegTrial) -> RgbImage,
    config: &AlignConfig,
) -> Result<AlignTraining, AlignError> {
    config.validate()?;
    let first = trials.first().ok_or(AlignError::EmptySplit)?;
    let mut params = AlignParams::init(first.channels(), first.samples(), config);
    let pairs = make_pairs(trials, image_of, &params)?;
    if pairs.len() < 2 {
        return Err(AlignError::BatchTooSmall(pairs.len()));
    }

    let batches = |order: &[usize]| -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = order.chunks(config.batch_size).map(|c| c.to_vec()).collect();
        // a trailing singleton cannot form a contrastive batch
        if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
            let tail = out.pop().unwrap();
            out.last_mut().unwrap().extend(tail);
        }
        out
    };
    let mut eval_order: Vec<usize> = (0..pairs.len()).collect();
    eval_order.shuffle(&mut seeded_rng(config.seed, 11));
    let eval_batches = batches(&eval_order);
    let eval_loss = |params: &AlignParams| -> f64 {
        let total: f64 = eval_batches
            .iter()
            .map(|b| {
                let refs: Vec<&TrainingPair> = b.iter().map(|&i| &pairs[i]).collect();
                batch_loss_and_grad(params, &refs, config, false).0
            })
            .sum();
        total / eval_batches.len() as f64
    };

    let mut loss_curve = vec![eval_loss(&params)];
    let mut shuffle_rng = seeded_rng(config.seed, 12);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        for batch in batches(&order) {
            let refs: Vec<&TrainingPair> = batch.iter().map(|&i| &pairs[i]).collect();
            let (loss, grad) = batch_loss_and_grad(&params, &refs, config, true);
            if !loss.is_finite() {
                return Err(AlignError::Diverged { epoch, loss });
            }
            let grad = grad.expect("gradient requested").flatten();
            let mut k = 0;
            let lr = config.learning_rate;
            let mut finite = true;
            params.visit_mut(&mut |p| {
                *p -= lr * grad[k];
                finite &= p.is_finite();
                k += 1;
            });
            if !finite {
                return Err(AlignError::Diverged { epoch, loss: f64::NAN });
            }
        }
        let loss = eval_loss(&params);
        if !loss.is_finite() {
            return Err(AlignError::Diverged { epoch, loss });
        }
        loss_curve.push(loss);
    }
    Ok(AlignTraining { params, loss_curve })
}

/// Trains on the manifest's train split, loading trials and images from disk.
pub fn train_alignment(manifest: &DatasetManifest, config: &AlignConfig) -> Result<AlignTraining, AlignError> {
    let mut trials = Vec::new();
    let mut images = Vec::new();
    for entry in manifest.entries_in(Split::Train) {
        trials.push(manifest.load_trial(entry)?);
        images.push(manifest.load_image(entry)?.image);
    }
    if trials.is_empty() {
        return Err(AlignError::EmptySplit);
    }
    let refs: Vec<&EegTrial> = trials.iter().collect();
    let lookup: std::collections::HashMap<&str, &RgbImage> =
        trials.iter().map(|t| t.trial_id()).zip(images.iter()).collect();
    train_alignment_on(&refs, |t| lookup[t.trial_id()].clone(), config)
}

/// Fraction of queries whose true candidate ranks within the top `k` among
/// `n`-candidate sets; `n = None` ranks against every candidate, otherwise
/// every `n - 1` subset of distractors is not enumerated, only pairwise
/// (`n = 2`) comparisons, which is what the 2-way protocol needs.
pub fn retrieval_accuracy(
    params: &AlignParams,
    trials: &[&EegTrial],
    class_images: &[RgbImage],
    two_way: bool,
) -> Result<f64, AlignError> {
    let candidates: Vec<Embedding> = class_images.iter().map(|img| encode_image(img, params)).collect();
    let mut hits = 0.0;
    let mut total = 0.0;
    for t in trials {
        let z = encode_eeg(t, params)?;
        let scores: Vec<f64> = candidates.iter().map(|c| z.cosine(c)).collect();
        let truth = t.class_label();
        if two_way {
            for (j, s) in scores.iter().enumerate() {
                if j == truth {
                    continue;
                }
                total += 1.0;
                if scores[truth] > *s {
                    hits += 1.0;
                }
            }
        } else {
            total += 1.0;
            let best =
                (0..scores.len()).max_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(b.cmp(&a))).unwrap();
            if best == truth {
                hits += 1.0;
            }
        }
    }
    Ok(if total == 0.0 { 0.0 } else { hits / total })
}
