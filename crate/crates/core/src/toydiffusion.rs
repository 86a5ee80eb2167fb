//! Conditional denoising diffusion over tiny images with classifier-free
//! guidance.
//!
//! The denoiser is a dense tanh network on the flattened image concatenated
//! with a sinusoidal timestep embedding and the conditioning vector. Its raw
//! output is read as a clean-image estimate `f` and turned into the noise
//! prediction `(x_t - sqrt(ab_t) f) / sqrt(1 - ab_t)`, which is what gets
//! trained against the true noise and guided at sampling time. The
//! unconditional branch feeds a learned null-condition vector in place of
//! `z_c`; the conditioning columns of the first layer and the null vector
//! start at zero, so the two branches only separate through training on
//! conditioned samples.

use std::fs;
use std::io;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::ConditioningVector;
use crate::nn::{params_from_le_f32, params_to_le_f32, Dense};
use crate::util::seeded_rng;

pub const DIFFUSION_MAGIC: &[u8; 4] = b"DIF1";

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid diffusion config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("timestep {t} out of range 0..={max}")]
    Timestep { t: usize, max: usize },
    #[error("sampler diverged at timestep {0}")]
    SamplerDiverged(usize),
    #[error("training diverged at step {step}: loss {loss}")]
    TrainingDiverged { step: usize, loss: f64 },
    #[error("training set is empty")]
    EmptyDataset,
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: io::Error },
}

pub const CHANNELS: usize = 3;
pub const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    /// Linear schedule endpoints as specified for `beta_reference_steps`
    /// steps; they are rescaled by `beta_reference_steps / timesteps` and
    /// capped at `MAX_BETA`.
    pub beta_start: f64,
    pub beta_end: f64,
    pub beta_reference_steps: usize,
    /// Explicit schedule overriding the linear one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub betas: Option<Vec<f64>>,
    pub guidance_scale: f64,
    /// Clamp the per-step clean-image estimate to [-1, 1] while sampling.
    pub clip_denoised: bool,
    pub drop_prob: f64,
    pub image_side: u32,
    pub hidden: usize,
    pub time_dim: usize,
    pub learning_rate: f64,
    pub train_steps: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            timesteps: 50,
            beta_start: 1e-4,
            beta_end: 0.02,
            beta_reference_steps: 1000,
            betas: None,
            guidance_scale: 2.0,
            clip_denoised: true,
            drop_prob: 0.1,
            image_side: 8,
            hidden: 128,
            time_dim: 16,
            learning_rate: 1e-3,
            train_steps: 3000,
            batch_size: 32,
            eval_every: 100,
            seed: 0,
        }
    }
}

impl DiffusionConfig {
    pub fn pixels(&self) -> usize {
        (self.image_side * self.image_side) as usize * CHANNELS
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, DiffusionError> {
        let betas = match &self.betas {
            Some(b) => b.clone(),
            None => {
                if self.timesteps == 0 {
                    return Err(DiffusionError::Config("timesteps must be >= 1".into()));
                }
                let scale = self.beta_reference_steps as f64 / self.timesteps as f64;
                (0..self.timesteps)
                    .map(|i| {
                        let frac = if self.timesteps == 1 { 0.0 } else { i as f64 / (self.timesteps - 1) as f64 };
                        ((self.beta_start + (self.beta_end - self.beta_start) * frac) * scale).min(MAX_BETA)
                    })
                    .collect()
            }
        };
        NoiseSchedule::new(betas)
    }

    pub fn validate(&self) -> Result<(), DiffusionError> {
        let bad = |m: &str| Err(DiffusionError::Config(m.to_string()));
        self.schedule()?;
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return bad("guidance_scale must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return bad("drop_prob must lie in [0, 1]");
        }
        if self.image_side == 0 || self.hidden == 0 || self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return bad("image_side and hidden must be positive, time_dim positive and even");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be >= 0");
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return bad("batch_size and eval_every must be positive");
        }
        Ok(())
    }
}

/// `beta_t` for `t = 1..=N` and cumulative `alpha_bar_t`, with
/// `alpha_bar_0 = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(betas: Vec<f64>) -> Result<Self, DiffusionError> {
        if betas.is_empty() {
            return Err(DiffusionError::Config("schedule needs at least one step".into()));
        }
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(DiffusionError::Config("every beta must lie in (0, 1)".into()));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(DiffusionError::Config("betas must be non-decreasing".into()));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t`, `t` in `1..=N`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `alpha_bar_t`, `t` in `0..=N`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisySample {
    pub x_t: Vec<f64>,
    pub t: usize,
}

/// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_noise(
    x0: &[f64],
    t: usize,
    eps: &[f64],
    schedule: &NoiseSchedule,
) -> Result<NoisySample, DiffusionError> {
    if x0.len() != eps.len() {
        return Err(DiffusionError::Shape(format!("x0 has {} entries, eps has {}", x0.len(), eps.len())));
    }
    if t > schedule.steps() {
        return Err(DiffusionError::Timestep { t, max: schedule.steps() });
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(NoisySample { x_t: x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect(), t })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub pixels: usize,
    pub time_dim: usize,
    pub cond_dim: usize,
    pub schedule: NoiseSchedule,
    pub l1: Dense,
    pub l2: Dense,
    pub l3: Dense,
    pub null_cond: Vec<f64>,
}

struct Trace {
    t: usize,
    input: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    out: Vec<f64>,
}

impl DenoiserParams {
    pub fn init(config: &DiffusionConfig, cond_dim: usize) -> Result<Self, DiffusionError> {
        let schedule = config.schedule()?;
        let mut rng = seeded_rng(config.seed, 20);
        let pixels = config.pixels();
        let in_dim = pixels + config.time_dim + cond_dim;
        let mut l1 = Dense::glorot(in_dim, config.hidden, &mut rng);
        for row in l1.weights.chunks_exact_mut(in_dim) {
            row[pixels + config.time_dim..].iter_mut().for_each(|w| *w = 0.0);
        }
        let l2 = Dense::glorot(config.hidden, config.hidden, &mut rng);
        let l3 = Dense::glorot(config.hidden, pixels, &mut rng);
        Ok(Self { pixels, time_dim: config.time_dim, cond_dim, schedule, l1, l2, l3, null_cond: vec![0.0; cond_dim] })
    }

    pub fn timesteps(&self) -> usize {
        self.schedule.steps()
    }

    fn zeros_like(&self) -> Self {
        let z = |d: &Dense| Dense::zeros(d.in_dim, d.out_dim);
        Self { l1: z(&self.l1), l2: z(&self.l2), l3: z(&self.l3), null_cond: vec![0.0; self.cond_dim], ..self.clone() }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.l1.write_params(&mut out);
        self.l2.write_params(&mut out);
        self.l3.write_params(&mut out);
        out.extend_from_slice(&self.null_cond);
        out
    }

    pub fn load_flat(&mut self, src: &[f64]) {
        let rest = self.l1.read_params(src);
        let rest = self.l2.read_params(rest);
        let rest = self.l3.read_params(rest);
        assert_eq!(rest.len(), self.cond_dim, "parameter vector length mismatch");
        self.null_cond.copy_from_slice(rest);
    }

    pub fn num_params(&self) -> usize {
        self.l1.num_params() + self.l2.num_params() + self.l3.num_params() + self.cond_dim
    }

    fn time_embedding(&self, t: usize) -> Vec<f64> {
        let half = self.time_dim / 2;
        let pos = t as f64 / self.timesteps() as f64 * 100.0;
        let mut out = Vec::with_capacity(self.time_dim);
        for k in 0..half {
            let freq = (-(100.0f64).ln() * k as f64 / half as f64).exp();
            out.push((pos * freq).sin());
        }
        for k in 0..half {
            let freq = (-(100.0f64).ln() * k as f64 / half as f64).exp();
            out.push((pos * freq).cos());
        }
        out
    }

    fn forward(&self, x_t: &[f64], t: usize, cond: Option<&[f64]>) -> Trace {
        let mut input = Vec::with_capacity(self.l1.in_dim);
        input.extend_from_slice(x_t);
        input.extend(self.time_embedding(t));
        input.extend_from_slice(cond.unwrap_or(&self.null_cond));
        let a1: Vec<f64> = self.l1.forward(&input).into_iter().map(f64::tanh).collect();
        let a2: Vec<f64> = self.l2.forward(&a1).into_iter().map(f64::tanh).collect();
        let ab = self.schedule.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let out = self.l3.forward(&a2).iter().zip(x_t).map(|(f, x)| (x - a * f) / b).collect();
        Trace { t, input, a1, a2, out }
    }

    fn backward(&self, trace: &Trace, grad_out: &[f64], unconditional: bool, grad: &mut DenoiserParams) {
        let ab = self.schedule.alpha_bar(trace.t);
        let k = -(ab / (1.0 - ab)).sqrt();
        let g_f: Vec<f64> = grad_out.iter().map(|g| k * g).collect();
        let g_a2 = self.l3.backward(&trace.a2, &g_f, &mut grad.l3);
        let g_z2: Vec<f64> = g_a2.iter().zip(&trace.a2).map(|(g, a)| g * (1.0 - a * a)).collect();
        let g_a1 = self.l2.backward(&trace.a1, &g_z2, &mut grad.l2);
        let g_z1: Vec<f64> = g_a1.iter().zip(&trace.a1).map(|(g, a)| g * (1.0 - a * a)).collect();
        let g_in = self.l1.backward(&trace.input, &g_z1, &mut grad.l1);
        if unconditional {
            let start = self.pixels + self.time_dim;
            for (g, gi) in grad.null_cond.iter_mut().zip(&g_in[start..]) {
                *g += gi;
            }
        }
    }

    fn check_shapes(&self, x_t: &[f64], t: usize, cond: Option<&ConditioningVector>) -> Result<(), DiffusionError> {
        if x_t.len() != self.pixels {
            return Err(DiffusionError::Shape(format!("x_t has {} entries, expected {}", x_t.len(), self.pixels)));
        }
        if t == 0 || t > self.timesteps() {
            return Err(DiffusionError::Timestep { t, max: self.timesteps() });
        }
        if let Some(c) = cond {
            if c.values.len() != self.cond_dim {
                return Err(DiffusionError::Shape(format!(
                    "conditioning has dimension {}, expected {}",
                    c.values.len(),
                    self.cond_dim
                )));
            }
        }
        Ok(())
    }

    /// Noise prediction for one branch (`None` selects the null condition),
    /// `t` in `1..=N`.
    pub fn predict(
        &self,
        x_t: &[f64],
        t: usize,
        cond: Option<&ConditioningVector>,
    ) -> Result<Vec<f64>, DiffusionError> {
        self.check_shapes(x_t, t, cond)?;
        Ok(self.forward(x_t, t, cond.map(|c| c.values.as_slice())).out)
    }

    /// `DIF1`, five little-endian u32 dims (pixels, time dim, cond dim,
    /// hidden width, timesteps), the betas as f64, then the float32
    /// parameter blob.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = DIFFUSION_MAGIC.to_vec();
        for d in [self.pixels, self.time_dim, self.cond_dim, self.l1.out_dim, self.timesteps()] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for t in 1..=self.timesteps() {
            out.extend_from_slice(&self.schedule.beta(t).to_le_bytes());
        }
        out.extend(params_to_le_f32(&self.flatten()));
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self, DiffusionError> {
        if bytes.len() < 24 || &bytes[..4] != DIFFUSION_MAGIC {
            return Err(DiffusionError::Checkpoint("missing DIF1 header".into()));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (pixels, time_dim, cond_dim, hidden, timesteps) = (dim(0), dim(1), dim(2), dim(3), dim(4));
        let side = ((pixels / CHANNELS) as f64).sqrt().round() as u32;
        if (side * side) as usize * CHANNELS != pixels {
            return Err(DiffusionError::Checkpoint(format!("{pixels} pixels is not a square RGB image")));
        }
        let betas_end = 24 + 8 * timesteps;
        if bytes.len() < betas_end {
            return Err(DiffusionError::Checkpoint("truncated beta schedule".into()));
        }
        let betas = bytes[24..betas_end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let config =
            DiffusionConfig { image_side: side, time_dim, hidden, timesteps, betas: Some(betas), ..Default::default() };
        let mut params =
            DenoiserParams::init(&config, cond_dim).map_err(|e| DiffusionError::Checkpoint(e.to_string()))?;
        let blob = &bytes[betas_end..];
        if blob.len() != params.num_params() * 4 {
            return Err(DiffusionError::Checkpoint("parameter blob length mismatch".into()));
        }
        params.load_flat(&params_from_le_f32(blob));
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<(), DiffusionError> {
        fs::write(path, self.to_checkpoint_bytes())
            .map_err(|source| DiffusionError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, DiffusionError> {
        let bytes = fs::read(path).map_err(|source| DiffusionError::Io { path: path.display().to_string(), source })?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

/// Classifier-free guidance, `(1 - w) eps_u + w eps_c`; with `z_c = None`
/// only the unconditional branch is evaluated.
pub fn guided_noise_prediction(
    x_t: &[f64],
    t: usize,
    z_c: Option<&ConditioningVector>,
    w: f64,
    params: &DenoiserParams,
) -> Result<Vec<f64>, DiffusionError> {
    let eps_u = params.predict(x_t, t, None)?;
    let Some(cond) = z_c else {
        return Ok(eps_u);
    };
    let eps_c = params.predict(x_t, t, Some(cond))?;
    Ok(eps_u.iter().zip(&eps_c).map(|(u, c)| (1.0 - w) * u + w * c).collect())
}

/// Ancestral sampling from `t = N` down to `1`; output clamped to [-1, 1].
///
/// Each step forms the clean-image estimate
/// `x0_hat = (x_t - sqrt(1 - ab_t) eps) / sqrt(ab_t)` and, when
/// `clip_denoised` is set, clamps it to [-1, 1] before taking the posterior
/// mean. Without clamping this is the usual `(x_t - beta_t / sqrt(1 - ab_t)
/// eps) / sqrt(alpha_t)` update.
pub fn sample(
    z_c: Option<&ConditioningVector>,
    config: &DiffusionConfig,
    params: &DenoiserParams,
    rng_seed: u64,
) -> Result<Vec<f64>, DiffusionError> {
    let schedule = config.schedule()?;
    if schedule != params.schedule {
        return Err(DiffusionError::Config(format!(
            "configured schedule ({} steps) differs from the one the denoiser was trained with ({} steps)",
            schedule.steps(),
            params.timesteps()
        )));
    }
    let mut rng = seeded_rng(rng_seed, 30);
    let mut x: Vec<f64> = (0..params.pixels).map(|_| StandardNormal.sample(&mut rng)).collect();
    for t in (1..=schedule.steps()).rev() {
        let eps = guided_noise_prediction(&x, t, z_c, config.guidance_scale, params)?;
        let beta = schedule.beta(t);
        let ab = schedule.alpha_bar(t);
        let ab_prev = schedule.alpha_bar(t - 1);
        let c_x0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let c_xt = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let (sqrt_ab, sqrt_one_minus_ab) = (ab.sqrt(), (1.0 - ab).sqrt());
        let sigma = if t > 1 { (beta * (1.0 - schedule.alpha_bar(t - 1)) / (1.0 - ab)).sqrt() } else { 0.0 };
        for (xi, ei) in x.iter_mut().zip(&eps) {
            let mut x0_hat = (*xi - sqrt_one_minus_ab * ei) / sqrt_ab;
            if config.clip_denoised {
                x0_hat = x0_hat.clamp(-1.0, 1.0);
            }
            let mean = c_x0 * x0_hat + c_xt * *xi;
            *xi = if t > 1 {
                let z: f64 = StandardNormal.sample(&mut rng);
                mean + sigma * z
            } else {
                mean
            };
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(DiffusionError::SamplerDiverged(t));
        }
    }
    Ok(x.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect())
}

/// One training example: a clean image in [-1, 1] and its conditioning.
#[derive(Debug, Clone)]
pub struct DiffusionExample {
    pub x0: Vec<f64>,
    pub cond: ConditioningVector,
}

/// One term of the training objective: example `index` noised at step `t`
/// with `eps`, its conditioning replaced by the null vector when `dropped`.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub index: usize,
    pub t: usize,
    pub eps: Vec<f64>,
    pub dropped: bool,
}

fn draw<R: Rng>(rng: &mut R, n: usize, pixels: usize, steps: usize, drop_prob: f64) -> NoiseDraw {
    let index = rng.random_range(0..n);
    let t = rng.random_range(1..=steps);
    let eps = (0..pixels).map(|_| StandardNormal.sample(rng)).collect();
    let dropped = rng.random::<f64>() < drop_prob;
    NoiseDraw { index, t, eps, dropped }
}

/// Mean squared epsilon-prediction error over `draws`, with the gradient
/// when requested.
pub fn epsilon_loss(
    params: &DenoiserParams,
    data: &[DiffusionExample],
    schedule: &NoiseSchedule,
    draws: &[NoiseDraw],
    want_grad: bool,
) -> (f64, Option<DenoiserParams>) {
    let mut grad = want_grad.then(|| params.zeros_like());
    let norm = 1.0 / (draws.len() * params.pixels) as f64;
    let mut loss = 0.0;
    for d in draws {
        let ex = &data[d.index];
        let noisy = forward_noise(&ex.x0, d.t, &d.eps, schedule).expect("shapes checked on entry");
        let cond = (!d.dropped).then_some(ex.cond.values.as_slice());
        let trace = params.forward(&noisy.x_t, d.t, cond);
        let diff: Vec<f64> = trace.out.iter().zip(&d.eps).map(|(a, b)| a - b).collect();
        loss += diff.iter().map(|v| v * v).sum::<f64>() * norm;
        if let Some(g) = grad.as_mut() {
            let g_out: Vec<f64> = diff.iter().map(|v| 2.0 * norm * v).collect();
            params.backward(&trace, &g_out, d.dropped, g);
        }
    }
    (loss, grad)
}

#[derive(Debug, Clone)]
pub struct DenoiserTraining {
    pub params: DenoiserParams,
    /// `(step, validation loss)` pairs, starting at step 0.
    pub loss_curve: Vec<(usize, f64)>,
}

/// Fixed validation draws: every example conditioned (unless `drop_prob` is
/// 1), at seeded timesteps and noise.
fn validation_draws(config: &DiffusionConfig, n: usize, pixels: usize, steps: usize) -> Vec<NoiseDraw> {
    let mut rng = seeded_rng(config.seed, 41);
    let dropped = config.drop_prob >= 1.0;
    (0..64)
        .map(|k| {
            let mut d = draw(&mut rng, n, pixels, steps, 0.0);
            d.index = k % n;
            d.dropped = dropped;
            d
        })
        .collect()
}

/// Epsilon-prediction training with Adam; conditioning is replaced by the
/// null vector with probability `drop_prob` per sample.
pub fn train_denoiser(data: &[DiffusionExample], config: &DiffusionConfig) -> Result<DenoiserTraining, DiffusionError> {
    config.validate()?;
    let first = data.first().ok_or(DiffusionError::EmptyDataset)?;
    let pixels = config.pixels();
    let cond_dim = first.cond.values.len();
    for ex in data {
        if ex.x0.len() != pixels || ex.cond.values.len() != cond_dim {
            return Err(DiffusionError::Shape("training examples disagree on image or conditioning size".into()));
        }
    }
    let schedule = config.schedule()?;
    let mut params = DenoiserParams::init(config, cond_dim)?;
    let val = validation_draws(config, data.len(), pixels, schedule.steps());
    let mut loss_curve = vec![(0, epsilon_loss(&params, data, &schedule, &val, false).0)];

    let mut rng = seeded_rng(config.seed, 40);
    let n_params = params.num_params();
    let (mut m, mut v) = (vec![0.0; n_params], vec![0.0; n_params]);
    let (beta1, beta2, eps_adam) = (0.9f64, 0.999f64, 1e-8);
    for step in 1..=config.train_steps {
        let draws: Vec<NoiseDraw> = (0..config.batch_size)
            .map(|_| draw(&mut rng, data.len(), pixels, schedule.steps(), config.drop_prob))
            .collect();
        let (loss, grad) = epsilon_loss(&params, data, &schedule, &draws, true);
        if !loss.is_finite() {
            return Err(DiffusionError::TrainingDiverged { step, loss });
        }
        let grad = grad.expect("gradient requested").flatten();
        let mut flat = params.flatten();
        let bc1 = 1.0 - beta1.powi(step as i32);
        let bc2 = 1.0 - beta2.powi(step as i32);
        for i in 0..n_params {
            m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
            flat[i] -= config.learning_rate * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps_adam);
        }
        if flat.iter().any(|p| !p.is_finite()) {
            return Err(DiffusionError::TrainingDiverged { step, loss: f64::NAN });
        }
        params.load_flat(&flat);
        if step % config.eval_every == 0 || step == config.train_steps {
            let val_loss = epsilon_loss(&params, data, &schedule, &val, false).0;
            if !val_loss.is_finite() {
                return Err(DiffusionError::TrainingDiverged { step, loss: val_loss });
            }
            loss_curve.push((step, val_loss));
        }
    }
    Ok(DenoiserTraining { params, loss_curve })
}
