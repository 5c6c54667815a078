//! Online sessions: push source chunks, get edited chunks back, switch the
//! condition between chunks.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::distill::{denoise_chunk, shifted_schedule, uniform_schedule, RolloutConfig, Schedule};
use crate::error::{Error, Result};
use crate::metrics::{summarize, TimingSummary};
use crate::model::{encode_chunk, DenoiserParams, KVCache};
use crate::tensor::Tensor;

static NEXT_SESSION: AtomicU64 = AtomicU64::new(1);

/// Sampler schedule for a step count: the shifted list for 4, evenly spaced
/// otherwise.
pub fn schedule_for_steps(steps: usize) -> Result<Schedule> {
    if steps == 4 {
        shifted_schedule(4)
    } else {
        uniform_schedule(steps)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub window: usize,
    pub steps: usize,
    pub cfg_scale: f64,
    pub noise_seed: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self { window: 5, steps: 4, cfg_scale: 5.0, noise_seed: 0 }
    }
}

/// Reference frame and effect label; `None` fields mean unconditional.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Condition {
    pub reference: Option<Tensor<f32>>,
    pub label: Option<usize>,
}

/// A requested change; absent fields keep their current value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConditionUpdate {
    pub reference: Option<Tensor<f32>>,
    pub label: Option<usize>,
}

impl ConditionUpdate {
    pub fn is_empty(&self) -> bool {
        self.reference.is_none() && self.label.is_none()
    }

    fn merge(&mut self, newer: ConditionUpdate) {
        if newer.reference.is_some() {
            self.reference = newer.reference;
        }
        if newer.label.is_some() {
            self.label = newer.label;
        }
    }
}

/// Thread-safe handle for queueing condition changes; they take effect at
/// the next chunk boundary.
#[derive(Clone, Debug)]
pub struct ConditionHandle {
    pending: Arc<Mutex<Option<ConditionUpdate>>>,
    frame_shape: [usize; 3],
    n_labels: usize,
}

impl ConditionHandle {
    pub fn update(&self, update: ConditionUpdate) -> Result<()> {
        if let Some(r) = &update.reference {
            if r.shape() != self.frame_shape {
                return Err(Error::Session(format!("reference shape {:?}, expected {:?}", r.shape(), self.frame_shape)));
            }
        }
        if let Some(l) = update.label {
            if l >= self.n_labels {
                return Err(Error::Session(format!("effect label {l} out of {}", self.n_labels)));
            }
        }
        if update.is_empty() {
            return Ok(());
        }
        let mut slot = self.pending.lock().expect("condition lock");
        match slot.as_mut() {
            Some(p) => p.merge(update),
            None => *slot = Some(update),
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChunkResult {
    pub index: usize,
    /// Edited frames `[c_frames, H, W, C]`, clamped to `[0, 1]`.
    pub frames: Tensor<f32>,
    pub chunk_ms: f64,
    /// The condition this chunk was generated under.
    pub label: Option<usize>,
    pub reference_switched: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionStats {
    pub chunks: usize,
    pub mean_ms: f64,
    pub max_ms: f64,
    pub p95_ms: f64,
    pub fps: f64,
}

pub struct StreamSession {
    id: u64,
    params: Arc<DenoiserParams<f32>>,
    config: SessionConfig,
    rollout: RolloutConfig,
    cache: KVCache<f32>,
    active: Condition,
    handle: ConditionHandle,
    times_ms: Vec<f64>,
    closed: Option<SessionStats>,
}

impl StreamSession {
    pub fn open(params: Arc<DenoiserParams<f32>>, config: SessionConfig, condition: Condition) -> Result<Self> {
        if config.window == 0 {
            return Err(Error::Session("window must be at least 1".into()));
        }
        if !(config.cfg_scale >= 0.0) {
            return Err(Error::Session(format!("cfg_scale must be ≥ 0, got {}", config.cfg_scale)));
        }
        let schedule = schedule_for_steps(config.steps)?;
        let geometry = params.config.geometry();
        if let Some(r) = &condition.reference {
            if r.shape() != geometry.frame_shape() {
                return Err(Error::Session(format!("reference shape {:?}, expected {:?}", r.shape(), geometry.frame_shape())));
            }
        }
        if condition.label.is_some_and(|l| l >= params.config.n_effect_labels) {
            return Err(Error::Session("effect label out of range".into()));
        }
        let cache = KVCache::new(&params, condition.reference.as_ref(), condition.label, config.window)?;
        let handle = ConditionHandle {
            pending: Arc::new(Mutex::new(None)),
            frame_shape: geometry.frame_shape(),
            n_labels: params.config.n_effect_labels,
        };
        let rollout = RolloutConfig { schedule, cfg_scale: config.cfg_scale, window: config.window, noise_seed: config.noise_seed };
        Ok(Self {
            id: NEXT_SESSION.fetch_add(1, Ordering::Relaxed),
            params,
            config,
            rollout,
            cache,
            active: condition,
            handle,
            times_ms: Vec::new(),
            closed: None,
        })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn params(&self) -> &Arc<DenoiserParams<f32>> {
        &self.params
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn condition(&self) -> &Condition {
        &self.active
    }

    pub fn cache(&self) -> &KVCache<f32> {
        &self.cache
    }

    pub fn chunks_done(&self) -> usize {
        self.cache.next_index()
    }

    pub fn condition_handle(&self) -> ConditionHandle {
        self.handle.clone()
    }

    pub fn update_condition(&self, update: ConditionUpdate) -> Result<()> {
        self.handle.update(update)
    }

    pub fn pending_condition(&self) -> Option<ConditionUpdate> {
        self.handle.pending.lock().expect("condition lock").clone()
    }

    /// Generate the edited version of the next source chunk.
    pub fn push_chunk(&mut self, source: &Tensor<f32>) -> Result<ChunkResult> {
        if self.closed.is_some() {
            return Err(Error::Session("session is closed".into()));
        }
        let expected = self.params.config.geometry().chunk_shape();
        if source.shape() != expected {
            return Err(Error::ChunkShape {
                chunk_index: self.cache.next_index(),
                message: format!("source chunk {:?}, expected {:?}", source.shape(), expected),
            });
        }
        let start = Instant::now();
        let update = self.handle.pending.lock().expect("condition lock").take();
        let mut reference_switched = false;
        if let Some(u) = update {
            reference_switched = u.reference.is_some();
            if let Some(r) = u.reference {
                self.active.reference = Some(r);
            }
            if u.label.is_some() {
                self.active.label = u.label;
            }
            self.cache.set_reference(&self.params, self.active.reference.as_ref(), self.active.label)?;
        }
        let index = self.cache.next_index();
        let (out, _) = denoise_chunk(&self.params, &self.cache, source, self.active.label, &self.rollout)?;
        encode_chunk(&self.params, &mut self.cache, source, &out, self.active.label)?;
        let frames = out.map(|v| v.clamp(0.0, 1.0));
        let chunk_ms = start.elapsed().as_secs_f64() * 1000.0;
        self.times_ms.push(chunk_ms);
        Ok(ChunkResult { index, frames, chunk_ms, label: self.active.label, reference_switched })
    }

    pub fn times_ms(&self) -> &[f64] {
        &self.times_ms
    }

    pub fn stats(&self) -> SessionStats {
        let frames = self.params.config.c_frames;
        match summarize(&self.times_ms, frames) {
            Ok(TimingSummary { samples, mean_ms, max_ms, p95_ms, fps, .. }) => SessionStats { chunks: samples, mean_ms, max_ms, p95_ms, fps },
            Err(_) => SessionStats { chunks: 0, mean_ms: 0.0, max_ms: 0.0, p95_ms: 0.0, fps: 0.0 },
        }
    }

    /// Finish the session; later calls return the same summary.
    pub fn close(&mut self) -> SessionStats {
        if self.closed.is_none() {
            self.closed = Some(self.stats());
        }
        self.closed.clone().expect("set above")
    }

    pub fn is_closed(&self) -> bool {
        self.closed.is_some()
    }
}

/// Throughput of sessions from `factory` over `n_chunks` timed chunks after
/// `n_warmup` untimed ones.
pub fn throughput_bench(
    mut factory: impl FnMut() -> Result<StreamSession>,
    source_chunks: &[Tensor<f32>],
    n_chunks: usize,
    n_warmup: usize,
) -> Result<(TimingSummary, Vec<f64>)> {
    if n_chunks == 0 {
        return Err(Error::invalid("no chunks left to time after warmup"));
    }
    if source_chunks.is_empty() {
        return Err(Error::invalid("no source chunks"));
    }
    let mut session = factory()?;
    let frames = session.params.config.c_frames;
    for i in 0..n_warmup {
        session.push_chunk(&source_chunks[i % source_chunks.len()])?;
    }
    let mut times = Vec::with_capacity(n_chunks);
    for i in 0..n_chunks {
        let r = session.push_chunk(&source_chunks[(n_warmup + i) % source_chunks.len()])?;
        times.push(r.chunk_ms);
    }
    Ok((summarize(&times, frames)?, times))
}
