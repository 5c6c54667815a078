//! Few-step schedules, the causal rollout sampler, and the self-forcing
//! objective.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::flow::{euler_step, split_chunks, standard_normal, stream_rng, x0_from_velocity, Stream};
use crate::layout::{timestep_map, TimestepMap};
use crate::model::{cfg_blend, denoise_forward, encode_chunk, super_chunk, CacheView, DenoiserParams, Forward, KVCache, ParamVars, RefSlot};
use crate::tensor::{Real, Tensor};
use crate::world::mix_seed;

pub const SHIFTED_4: [f64; 5] = [0.999, 0.937, 0.833, 0.624, 0.0];

/// Descending timesteps ending at 0; each consecutive pair is one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    timesteps: Vec<f64>,
}

impl Schedule {
    pub fn new(timesteps: Vec<f64>) -> Result<Self> {
        if timesteps.len() < 2 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if timesteps[0] >= 1.0 || timesteps[0] <= 0.0 {
            return Err(Error::invalid(format!("first timestep {} must lie in (0, 1)", timesteps[0])));
        }
        if *timesteps.last().expect("non-empty") != 0.0 {
            return Err(Error::invalid("schedule must end at 0"));
        }
        if timesteps.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::invalid(format!("schedule not strictly decreasing: {timesteps:?}")));
        }
        Ok(Self { timesteps })
    }

    pub fn timesteps(&self) -> &[f64] {
        &self.timesteps
    }

    pub fn steps(&self) -> usize {
        self.timesteps.len() - 1
    }

    /// Timesteps at which the model is evaluated (all but the terminal 0).
    pub fn prediction_points(&self) -> &[f64] {
        &self.timesteps[..self.steps()]
    }
}

/// The fixed 4-step shifted schedule; other step counts are not defined.
pub fn shifted_schedule(k: usize) -> Result<Schedule> {
    if k != 4 {
        return Err(Error::invalid(format!("shifted schedule is only defined for 4 steps, got {k}")));
    }
    Schedule::new(SHIFTED_4.to_vec())
}

/// `k` evenly spaced steps from 0.999 down to 0.
pub fn uniform_schedule(k: usize) -> Result<Schedule> {
    if k == 0 {
        return Err(Error::invalid("uniform schedule needs at least one step"));
    }
    Schedule::new((0..=k).map(|i| 0.999 * (1.0 - i as f64 / k as f64)).collect())
}

/// `(1 − t)² / t²` at each prediction point.
pub fn snr_weights(schedule: &Schedule) -> Result<Vec<f64>> {
    snr_weights_at(schedule.prediction_points())
}

pub fn snr_weights_at(ts: &[f64]) -> Result<Vec<f64>> {
    ts.iter()
        .map(|&t| {
            if t <= 0.0 {
                Err(Error::invalid(format!("SNR weight undefined at t = {t}")))
            } else {
                Ok(((1.0 - t) / t).powi(2))
            }
        })
        .collect()
}

/// Everything one denoising step consumed and produced.
#[derive(Clone, Debug)]
pub struct StepTrace<T: Real> {
    pub t: f64,
    pub t_next: f64,
    /// Noisy target chunk entering the step.
    pub z_t: Tensor<T>,
    pub v_cond: Tensor<T>,
    pub v_uncond: Option<Tensor<T>>,
    pub x0: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct ChunkRollout<T: Real> {
    pub chunk_index: usize,
    /// Chunk indices present in the cache while this chunk was generated.
    pub cache_chunks: Vec<usize>,
    /// Cache as it stood during generation; kept for gradient replay.
    pub cache: KVCache<T>,
    pub steps: Vec<StepTrace<T>>,
    /// Final latent (unclamped).
    pub output: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct RolloutRecord<T: Real> {
    pub label: Option<usize>,
    pub cfg_scale: f64,
    pub chunks: Vec<ChunkRollout<T>>,
}

impl<T: Real> RolloutRecord<T> {
    /// Outputs concatenated along time.
    pub fn video(&self) -> Result<Tensor<T>> {
        let parts: Vec<&Tensor<T>> = self.chunks.iter().map(|c| &c.output).collect();
        Tensor::concat(&parts, 0)
    }
}

/// Initial noise for chunk `chunk_index` of a stream seeded with `seed`.
pub fn chunk_noise<T: Real>(seed: u64, chunk_index: usize, shape: &[usize]) -> Tensor<T> {
    standard_normal(&mut stream_rng(seed, chunk_index as u64, 0, Stream::Noise), shape)
}

/// Conditioning and sampler settings for a rollout.
#[derive(Clone, Debug)]
pub struct RolloutConfig {
    pub schedule: Schedule,
    pub cfg_scale: f64,
    pub window: usize,
    pub noise_seed: u64,
}

/// Denoise one chunk against `cache` with the sampler, returning the trace.
pub fn denoise_chunk<T: Real>(
    params: &DenoiserParams<T>,
    cache: &KVCache<T>,
    source: &Tensor<T>,
    label: Option<usize>,
    cfg: &RolloutConfig,
) -> Result<(Tensor<T>, Vec<StepTrace<T>>)> {
    let idx = cache.next_index();
    let mut z = chunk_noise::<T>(cfg.noise_seed, idx, source.shape());
    let mut steps = Vec::with_capacity(cfg.schedule.steps());
    for w in cfg.schedule.timesteps().windows(2) {
        let (t, t_next) = (w[0], w[1]);
        let seq = super_chunk(params, source, &z, idx)?;
        let tmap = timestep_map(&seq, &[t])?;
        let v_cond = denoise_forward(params, &seq, None, &tmap, label, Some(CacheView { cache, slot: RefSlot::Conditional }))?;
        let (v, v_uncond) = if cfg.cfg_scale == 0.0 {
            (v_cond.clone(), None)
        } else {
            let u = denoise_forward(params, &seq, None, &tmap, None, Some(CacheView { cache, slot: RefSlot::Unconditional }))?;
            (cfg_blend(&v_cond, &u, cfg.cfg_scale)?, Some(u))
        };
        let x0 = x0_from_velocity(&z, &v, t)?;
        let z_next = euler_step(&z, &v, t, t_next)?;
        steps.push(StepTrace { t, t_next, z_t: z, v_cond, v_uncond, x0 });
        z = z_next;
    }
    Ok((z, steps))
}

/// Generate every chunk of `source` causally, exactly as at inference: each
/// chunk starts from fresh noise, is denoised against a cache filled only
/// with this rollout's own earlier outputs, then is encoded into the cache.
///
/// Ground-truth targets are not an input; nothing here can see them.
pub fn self_forcing_rollout<T: Real>(
    params: &DenoiserParams<T>,
    source: &Tensor<T>,
    reference: Option<&Tensor<T>>,
    label: Option<usize>,
    cfg: &RolloutConfig,
) -> Result<RolloutRecord<T>> {
    if !(cfg.cfg_scale >= 0.0) {
        return Err(Error::invalid(format!("guidance scale must be ≥ 0, got {}", cfg.cfg_scale)));
    }
    let xs = split_chunks(source, params.config.c_frames)?;
    let mut cache = KVCache::new(params, reference, label, cfg.window)?;
    let mut chunks = Vec::with_capacity(xs.len());
    for x in &xs {
        let (out, steps) = denoise_chunk(params, &cache, x, label, cfg)?;
        let snapshot = cache.clone();
        let chunk_index = cache.next_index();
        encode_chunk(params, &mut cache, x, &out, label)?;
        chunks.push(ChunkRollout { chunk_index, cache_chunks: snapshot.chunk_indices(), cache: snapshot, steps, output: out });
    }
    Ok(RolloutRecord { label, cfg_scale: cfg.cfg_scale, chunks })
}

fn check_targets<T: Real>(record: &RolloutRecord<T>, targets: &[Tensor<T>], weights: &[f64]) -> Result<()> {
    if targets.len() != record.chunks.len() {
        return Err(Error::invalid(format!("{} target chunks for {} rolled-out chunks", targets.len(), record.chunks.len())));
    }
    for c in &record.chunks {
        if c.steps.len() != weights.len() {
            return Err(Error::invalid(format!("{} weights for {} steps", weights.len(), c.steps.len())));
        }
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::invalid("weights must have a positive sum"));
    }
    Ok(())
}

fn mse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch { op: "mse", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x.to_f64() - y.to_f64()).powi(2)).sum();
    Ok(s / a.numel() as f64)
}

/// `(1/Σw) Σ_k w_k · mean_i mse(ẑ0_{i,k}, y_i)`, per-element squared error,
/// chunks weighted uniformly.
pub fn stage2_loss<T: Real>(record: &RolloutRecord<T>, targets: &[Tensor<T>], weights: &[f64]) -> Result<f64> {
    check_targets(record, targets, weights)?;
    let total: f64 = weights.iter().sum();
    let m = record.chunks.len() as f64;
    let mut acc = 0.0;
    for (c, y) in record.chunks.iter().zip(targets) {
        for (s, &w) in c.steps.iter().zip(weights) {
            acc += w * mse(&s.x0, y)?;
        }
    }
    Ok(acc / (total * m))
}

/// Differentiable replay of [`stage2_loss`]. Each step's conditional pass is
/// rebuilt on `g` from the recorded noisy input and cache; the unconditional
/// prediction, the step inputs, and the cache enter as constants.
pub fn stage2_loss_graph<T: Real>(
    g: &mut Graph<T>,
    pv: &ParamVars,
    params: &DenoiserParams<T>,
    record: &RolloutRecord<T>,
    sources: &[Tensor<T>],
    targets: &[Tensor<T>],
    weights: &[f64],
) -> Result<Var> {
    check_targets(record, targets, weights)?;
    let geometry = params.config.geometry();
    let total: f64 = weights.iter().sum();
    let m = record.chunks.len() as f64;
    let mut terms = Vec::new();
    for ((c, x), y) in record.chunks.iter().zip(sources).zip(targets) {
        let y_tok = g.constant(geometry.patchify(y)?);
        for (s, &w) in c.steps.iter().zip(weights) {
            let seq = super_chunk(params, x, &s.z_t, c.chunk_index)?;
            let tmap: TimestepMap = timestep_map(&seq, &[s.t])?;
            let view = CacheView { cache: &c.cache, slot: RefSlot::Conditional };
            let v_cond = params
                .forward(g, pv, &Forward { seq: &seq, mask: None, tmap: &tmap, label: record.label, cache: Some(view), collect_kv: false })?
                .velocity
                .ok_or_else(|| Error::invalid("no target tokens"))?;
            let v = match &s.v_uncond {
                Some(u) => {
                    let u = g.constant(geometry.patchify(u)?);
                    let a = g.scale(v_cond, 1.0 + record.cfg_scale);
                    let b = g.scale(u, record.cfg_scale);
                    g.sub(a, b)?
                }
                None => v_cond,
            };
            let z = g.constant(geometry.patchify(&s.z_t)?);
            let tv = g.scale(v, s.t);
            let x0 = g.sub(z, tv)?;
            let err = g.mse(x0, y_tok)?;
            terms.push(g.scale(err, w / (total * m)));
        }
    }
    let stacked = g.concat(&terms, 0)?;
    Ok(g.sum(stacked))
}

/// Decoupled-weight-decay Adam with global-norm gradient clipping. Decay
/// applies to matrices only.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, clip_norm: Option<f64>) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, clip_norm, step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Apply one update; returns the pre-clipping gradient norm.
    pub fn step<T: Real>(&mut self, params: &mut DenoiserParams<T>, grads: &[Tensor<T>]) -> Result<f64> {
        let tensors = params.tensors_mut();
        if grads.len() != tensors.len() {
            return Err(Error::invalid(format!("{} gradients for {} parameters", grads.len(), tensors.len())));
        }
        if self.m.is_empty() {
            self.m = tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
            self.v = self.m.clone();
        }
        let norm = grads.iter().flat_map(|g| g.data().iter()).map(|x| x.to_f64().powi(2)).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient norm".into()));
        }
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in tensors.iter_mut().zip(grads).enumerate() {
            let decay = if p.shape().len() >= 2 { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gr = gv.to_f64() * scale;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gr;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gr * gr;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let x = pv.to_f64();
                *pv = T::from_f64(x - self.lr * (mhat / (vhat.sqrt() + self.eps) + decay * x));
            }
        }
        Ok(norm)
    }
}

/// Seed for the sampler noise of one training sample.
pub fn sample_noise_seed(seed: u64, step: u64, sample: u64) -> u64 {
    mix_seed(mix_seed(seed, step), sample)
}
