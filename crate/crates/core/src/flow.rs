//! Rectified-flow path math and the flow-matching objectives.
//!
//! Convention: `z_t = (1 − t)·z0 + t·ε`, so `t = 0` is data, `t = 1` is noise
//! and the path velocity is `ε − z0`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::layout::{attention_mask, build_context, timestep_map, AttentionMask, AttentionMode, ContextSequence, LatentChunk, TimestepMap};
use crate::model::{DenoiserParams, Forward, ParamVars};
use crate::tensor::{Real, Tensor};
use crate::world::{mix_seed, Triplet};

pub const T_MIN: f64 = 0.001;
pub const T_MAX: f64 = 0.999;

fn check_t(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::invalid(format!("t = {t} outside [0, 1]")))
    }
}

pub fn interpolate<T: Real>(z0: &Tensor<T>, eps: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    check_t(t)?;
    let (a, b) = (T::from_f64(1.0 - t), T::from_f64(t));
    z0.zip_map(eps, "interpolate", |z, e| a * z + b * e)
}

pub fn target_velocity<T: Real>(z0: &Tensor<T>, eps: &Tensor<T>) -> Result<Tensor<T>> {
    eps.zip_map(z0, "target_velocity", |e, z| e - z)
}

pub fn x0_from_velocity<T: Real>(z_t: &Tensor<T>, v: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    check_t(t)?;
    let tt = T::from_f64(t);
    z_t.zip_map(v, "x0_from_velocity", |z, v| z - tt * v)
}

/// Move from `t` to `t_next ≤ t` along velocity `v`.
pub fn euler_step<T: Real>(z_t: &Tensor<T>, v: &Tensor<T>, t: f64, t_next: f64) -> Result<Tensor<T>> {
    check_t(t)?;
    check_t(t_next)?;
    if t_next > t {
        return Err(Error::invalid(format!("euler_step runs backwards in noise: {t} → {t_next}")));
    }
    let dt = T::from_f64(t_next - t);
    z_t.zip_map(v, "euler_step", |z, v| z + dt * v)
}

/// Purpose-separated random streams so that adding a draw of one kind never
/// shifts another.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Dropout = 1,
    Timestep = 2,
    CleanCoin = 3,
    Noise = 4,
    Reference = 5,
    Batch = 6,
}

pub fn stream_rng(seed: u64, step: u64, sample: u64, stream: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(mix_seed(seed, step), sample), stream as u64))
}

pub fn standard_normal<T: Real, R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.sample::<f64, _>(StandardNormal))).collect();
    Tensor::new(shape.to_vec(), data).expect("non-empty shape")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutConfig {
    pub p_reference: f64,
    pub p_label: f64,
}

impl Default for DropoutConfig {
    fn default() -> Self {
        Self { p_reference: 0.5, p_label: 0.1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DropoutDraw {
    pub drop_reference: bool,
    pub drop_label: bool,
}

/// Always consumes exactly two uniforms.
pub fn draw_dropout<R: Rng>(rng: &mut R, cfg: DropoutConfig) -> DropoutDraw {
    let a: f64 = rng.gen();
    let b: f64 = rng.gen();
    DropoutDraw { drop_reference: a < cfg.p_reference, drop_label: b < cfg.p_label }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TimeSampling {
    /// One `t` for the whole clip.
    PerClip,
    /// Independent `t` per super-chunk, forced to 0 with probability `p_clean`.
    PerChunk { p_clean: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowLossConfig {
    pub dropout: DropoutConfig,
    pub sampling: TimeSampling,
    pub mode: AttentionMode,
}

impl FlowLossConfig {
    pub fn teacher() -> Self {
        Self { dropout: DropoutConfig::default(), sampling: TimeSampling::PerClip, mode: AttentionMode::Bidirectional }
    }

    pub fn stage1(p_clean: f64) -> Self {
        Self { dropout: DropoutConfig::default(), sampling: TimeSampling::PerChunk { p_clean }, mode: AttentionMode::BlockCausal }
    }
}

/// Per-chunk timesteps for one sample.
pub fn draw_timesteps<R: Rng>(t_rng: &mut R, coin_rng: &mut R, m: usize, sampling: TimeSampling) -> Vec<f64> {
    match sampling {
        TimeSampling::PerClip => vec![t_rng.gen_range(T_MIN..T_MAX); m],
        TimeSampling::PerChunk { p_clean } => (0..m)
            .map(|_| {
                let t = t_rng.gen_range(T_MIN..T_MAX);
                let clean = coin_rng.gen::<f64>() < p_clean;
                if clean {
                    0.0
                } else {
                    t
                }
            })
            .collect(),
    }
}

/// Model inputs and regression target for one noised training sample.
#[derive(Clone, Debug)]
pub struct PreparedSample<T: Real> {
    pub seq: ContextSequence<T>,
    pub mask: AttentionMask,
    pub tmap: TimestepMap,
    pub label: Option<usize>,
    pub timesteps: Vec<f64>,
    pub dropout: DropoutDraw,
    /// `ε − z0` for every target chunk, token layout `[M·tokens_per_chunk, d_tok]`.
    pub target_velocity: Tensor<T>,
    /// Rows of the velocity output that enter the loss (chunks with `t > 0`).
    pub loss_rows: Vec<usize>,
}

/// Split `[frames, H, W, C]` into chunk tensors of `c_frames`.
pub fn split_chunks<T: Real>(video: &Tensor<T>, c_frames: usize) -> Result<Vec<Tensor<T>>> {
    let f = video.shape()[0];
    if c_frames == 0 || f % c_frames != 0 {
        return Err(Error::invalid(format!("{f} frames do not split into chunks of {c_frames}")));
    }
    (0..f / c_frames).map(|i| video.narrow(0, i * c_frames, c_frames)).collect()
}

/// Noise a triplet's target chunks and lay out one training sample. Draws
/// come from per-sample streams keyed by `(seed, step, sample)`.
pub fn prepare_sample<T: Real>(
    params: &DenoiserParams<T>,
    triplet: &Triplet,
    cfg: &FlowLossConfig,
    seed: u64,
    step: u64,
    sample: u64,
) -> Result<PreparedSample<T>> {
    let c = &params.config;
    let geometry = c.geometry();
    let xs = split_chunks(&triplet.source.cast::<T>(), c.c_frames)?;
    let ys = split_chunks(&triplet.target.cast::<T>(), c.c_frames)?;
    let m = xs.len();

    let dropout = draw_dropout(&mut stream_rng(seed, step, sample, Stream::Dropout), cfg.dropout);
    let timesteps = draw_timesteps(
        &mut stream_rng(seed, step, sample, Stream::Timestep),
        &mut stream_rng(seed, step, sample, Stream::CleanCoin),
        m,
        cfg.sampling,
    );
    let mut noise_rng = stream_rng(seed, step, sample, Stream::Noise);

    let mut targets = Vec::with_capacity(m);
    let mut velocities = Vec::with_capacity(m);
    for (i, y) in ys.iter().enumerate() {
        let eps = standard_normal::<T, _>(&mut noise_rng, y.shape());
        targets.push(LatentChunk::target(interpolate(y, &eps, timesteps[i])?, i));
        velocities.push(geometry.patchify(&target_velocity(y, &eps)?)?);
    }
    let sources: Vec<LatentChunk<T>> = xs.into_iter().enumerate().map(|(i, x)| LatentChunk::source(x, i)).collect();
    let reference = if dropout.drop_reference { Tensor::zeros(&geometry.frame_shape()) } else { triplet.reference.cast() };
    let label = if dropout.drop_label { None } else { Some(triplet.label) };

    let seq = build_context(geometry, Some(&reference), &sources, &targets)?;
    let mask = attention_mask(&seq, cfg.mode);
    let tmap = timestep_map(&seq, &timesteps)?;
    let tpc = geometry.tokens_per_chunk();
    let loss_rows = (0..m).filter(|&i| timesteps[i] > 0.0).flat_map(|i| i * tpc..(i + 1) * tpc).collect();
    let vrefs: Vec<&Tensor<T>> = velocities.iter().collect();
    Ok(PreparedSample {
        seq,
        mask,
        tmap,
        label,
        timesteps,
        dropout,
        target_velocity: Tensor::concat(&vrefs, 0)?,
        loss_rows,
    })
}

/// Sum of squared errors between `pred` rows in `rows` and the same rows of
/// `target`.
pub fn velocity_sse<T: Real>(g: &mut Graph<T>, pred: Var, target: &Tensor<T>, rows: &[usize]) -> Result<Var> {
    let p = g.gather_rows(pred, rows.into())?;
    let d_tok = target.shape()[1];
    let sel: Vec<T> = rows.iter().flat_map(|&r| target.data()[r * d_tok..(r + 1) * d_tok].iter().copied()).collect();
    let t = g.constant(Tensor::new(vec![rows.len(), d_tok], sel)?);
    let d = g.sub(p, t)?;
    let sq = g.mul(d, d)?;
    Ok(g.sum(sq))
}

pub struct BatchLoss {
    pub loss: Var,
    pub samples: Vec<(Vec<f64>, DropoutDraw)>,
}

/// Flow-matching MSE over the noised target tokens of a batch, normalized by
/// the number of supervised elements. Zero when no chunk is noised.
#[allow(clippy::too_many_arguments)]
pub fn flow_loss_graph<T: Real>(
    g: &mut Graph<T>,
    pv: &ParamVars,
    params: &DenoiserParams<T>,
    batch: &[Triplet],
    cfg: &FlowLossConfig,
    seed: u64,
    step: u64,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let d_tok = params.config.d_tok;
    let mut parts = Vec::new();
    let mut count = 0usize;
    let mut samples = Vec::with_capacity(batch.len());
    for (i, trip) in batch.iter().enumerate() {
        let s = prepare_sample(params, trip, cfg, seed, step, i as u64)?;
        samples.push((s.timesteps.clone(), s.dropout));
        if s.loss_rows.is_empty() {
            continue;
        }
        let mask = (cfg.mode == AttentionMode::BlockCausal).then_some(&s.mask);
        let out = params.forward(
            g,
            pv,
            &Forward { seq: &s.seq, mask, tmap: &s.tmap, label: s.label, cache: None, collect_kv: false },
        )?;
        let pred = out.velocity.ok_or_else(|| Error::invalid("sample has no target tokens"))?;
        parts.push(velocity_sse(g, pred, &s.target_velocity, &s.loss_rows)?);
        count += s.loss_rows.len() * d_tok;
    }
    let loss = if parts.is_empty() {
        g.constant(Tensor::scalar(T::ZERO))
    } else {
        let stacked = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 0)? };
        let total = g.sum(stacked);
        g.scale(total, 1.0 / count as f64)
    };
    Ok(BatchLoss { loss, samples })
}

/// Scalar teacher objective (bidirectional, one `t` per clip).
pub fn teacher_loss<T: Real>(params: &DenoiserParams<T>, batch: &[Triplet], seed: u64, step: u64) -> Result<f64> {
    let mut g = Graph::no_grad();
    let pv = params.register(&mut g, false);
    let out = flow_loss_graph(&mut g, &pv, params, batch, &FlowLossConfig::teacher(), seed, step)?;
    Ok(g.value(out.loss).data()[0].to_f64())
}
