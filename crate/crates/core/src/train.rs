//! Optimization loops for the teacher and both distillation stages.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::autodiff::Graph;
use crate::checkpoint::{save_model, CheckpointMeta};
use crate::config::{Stage, TrainConfig};
use crate::distill::{sample_noise_seed, self_forcing_rollout, shifted_schedule, snr_weights, stage2_loss_graph, AdamW, RolloutConfig};
use crate::error::{Error, Result};
use crate::flow::{flow_loss_graph, split_chunks, stream_rng, DropoutConfig, FlowLossConfig, Stream, TimeSampling};
use crate::layout::AttentionMode;
use crate::model::DenoiserParams;
use crate::tensor::{Real, Tensor};
use crate::world::{generate_dataset, make_triplet, mix_seed, Triplet, N_EFFECTS};

const TRAIN_DOMAIN: u64 = 0x7EA1_0001;
const EVAL_DOMAIN: u64 = 0xE7A1_0002;

/// Fresh training triplets for `step`; labels cycle through the catalog and
/// each reference frame is drawn uniformly from its target.
pub fn training_batch(cfg: &TrainConfig, step: u64) -> Result<Vec<Triplet>> {
    let base = mix_seed(cfg.seed, TRAIN_DOMAIN);
    (0..cfg.batch_size)
        .map(|i| {
            let n = step * cfg.batch_size as u64 + i as u64;
            let mut rng = stream_rng(cfg.seed, step, i as u64, Stream::Reference);
            make_triplet(mix_seed(base, n), n as usize % N_EFFECTS, cfg.dims(), Some(&mut rng))
        })
        .collect()
}

/// Held-out evaluation triplets (reference = frame 0), disjoint from every
/// training draw by seed domain.
pub fn eval_dataset(cfg: &TrainConfig, n: usize) -> Result<Vec<Triplet>> {
    generate_dataset(mix_seed(cfg.seed, EVAL_DOMAIN), n, cfg.dims())
}

pub fn flow_config(cfg: &TrainConfig) -> FlowLossConfig {
    let dropout = DropoutConfig { p_reference: cfg.p_reference_drop, p_label: cfg.p_label_drop };
    match cfg.stage {
        Stage::Teacher => FlowLossConfig { dropout, sampling: TimeSampling::PerClip, mode: AttentionMode::Bidirectional },
        _ => FlowLossConfig { dropout, sampling: TimeSampling::PerChunk { p_clean: cfg.p_clean }, mode: AttentionMode::BlockCausal },
    }
}

/// Loss and parameter gradients of a flow-matching batch (teacher or
/// stage 1, depending on `loss_cfg`).
pub fn flow_step<T: Real>(
    params: &DenoiserParams<T>,
    batch: &[Triplet],
    loss_cfg: &FlowLossConfig,
    seed: u64,
    step: u64,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut g = Graph::new();
    let pv = params.register(&mut g, true);
    let out = flow_loss_graph(&mut g, &pv, params, batch, loss_cfg, seed, step)?;
    let loss = g.value(out.loss).data()[0].to_f64();
    let grads = g.backward(out.loss)?;
    Ok((loss, params.collect_grads(&g, &grads, &pv)))
}

pub fn stage1_step<T: Real>(
    params: &DenoiserParams<T>,
    batch: &[Triplet],
    p_clean: f64,
    seed: u64,
    step: u64,
) -> Result<(f64, Vec<Tensor<T>>)> {
    flow_step(params, batch, &FlowLossConfig::stage1(p_clean), seed, step)
}

/// Self-forcing batch: roll each clip out on-policy, then regress the
/// recorded x0-predictions onto the ground truth. Returns the mean loss and
/// summed-then-averaged gradients.
pub fn stage2_step<T: Real>(
    params: &DenoiserParams<T>,
    batch: &[Triplet],
    cfg_scale: f64,
    window: usize,
    seed: u64,
    step: u64,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let schedule = shifted_schedule(4)?;
    let weights = snr_weights(&schedule)?;
    let b = batch.len() as f64;
    let mut total = 0.0;
    let mut acc: Option<Vec<Tensor<T>>> = None;
    for (i, trip) in batch.iter().enumerate() {
        let source = trip.source.cast::<T>();
        let rcfg = RolloutConfig {
            schedule: schedule.clone(),
            cfg_scale,
            window,
            noise_seed: sample_noise_seed(seed, step, i as u64),
        };
        let reference = trip.reference.cast::<T>();
        let record = self_forcing_rollout(params, &source, Some(&reference), Some(trip.label), &rcfg)?;
        let xs = split_chunks(&source, params.config.c_frames)?;
        let ys = split_chunks(&trip.target.cast::<T>(), params.config.c_frames)?;

        let mut g = Graph::new();
        let pv = params.register(&mut g, true);
        let loss = stage2_loss_graph(&mut g, &pv, params, &record, &xs, &ys, &weights)?;
        let loss = g.scale(loss, 1.0 / b);
        total += g.value(loss).data()[0].to_f64();
        let grads = params.collect_grads(&g, &g.backward(loss)?, &pv);
        acc = Some(match acc {
            None => grads,
            Some(prev) => prev.iter().zip(&grads).map(|(a, b)| a.zip_map(b, "grad_acc", |x, y| x + y)).collect::<Result<_>>()?,
        });
    }
    Ok((total, acc.ok_or_else(|| Error::invalid("empty batch"))?))
}

pub struct TrainOutcome {
    pub params: DenoiserParams<f32>,
    pub losses: Vec<f64>,
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
}

/// Run `cfg.steps` optimizer steps from `init` (fresh weights when `None`),
/// writing `{stage}.loss.csv`, periodic `{stage}_stepN.sfx` checkpoints, and
/// the final `{stage}.sfx` into `out_dir`. A non-finite loss or gradient
/// aborts after saving `{stage}_last_good.sfx`.
pub fn train_loop(
    cfg: &TrainConfig,
    init: Option<DenoiserParams<f32>>,
    out_dir: &Path,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut params = match init {
        Some(p) => {
            if p.config != cfg.model {
                return Err(Error::Config("initial checkpoint config differs from the training config".into()));
            }
            p
        }
        None if cfg.stage == Stage::Teacher => DenoiserParams::init(cfg.model.clone(), mix_seed(cfg.seed, 0x1417))?,
        None => return Err(Error::Config(format!("{} needs an initial checkpoint", cfg.stage))),
    };
    let parent_hash = (cfg.stage != Stage::Teacher).then(|| params.content_hash());
    let meta_at = |step: usize| CheckpointMeta { stage: cfg.stage.to_string(), step, parent_hash: parent_hash.clone(), seed: cfg.seed };

    let loss_log = out_dir.join(format!("{}.loss.csv", cfg.stage));
    let mut log = fs::File::create(&loss_log)?;
    writeln!(log, "step,stage,loss")?;
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay, (cfg.grad_clip > 0.0).then_some(cfg.grad_clip));
    let loss_cfg = flow_config(cfg);
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let batch = training_batch(cfg, step as u64)?;
        let result = match cfg.stage {
            Stage::Teacher | Stage::Stage1 => flow_step(&params, &batch, &loss_cfg, cfg.seed, step as u64),
            Stage::Stage2 => stage2_step(&params, &batch, cfg.cfg_scale, cfg.window, cfg.seed, step as u64),
        };
        let fail = |params: &DenoiserParams<f32>, what: String| -> Result<TrainOutcome> {
            save_model(&out_dir.join(format!("{}_last_good.sfx", cfg.stage)), params, &meta_at(step))?;
            Err(Error::NonFinite(format!("{} step {step}: {what}", cfg.stage)))
        };
        let (loss, grads) = match result {
            Ok(r) => r,
            Err(Error::NonFinite(what)) => return fail(&params, what),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return fail(&params, format!("loss {loss}"));
        }
        let mut next = params.clone();
        match opt.step(&mut next, &grads) {
            Ok(_) => {}
            Err(Error::NonFinite(what)) => return fail(&params, what),
            Err(e) => return Err(e),
        }
        if next.tensors().iter().any(|t| !t.all_finite()) {
            return fail(&params, "parameters".into());
        }
        params = next;
        writeln!(log, "{step},{},{loss}", cfg.stage)?;
        losses.push(loss);
        progress(step, loss);
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps {
            save_model(&out_dir.join(format!("{}_step{}.sfx", cfg.stage, step + 1)), &params, &meta_at(step + 1))?;
        }
    }
    log.flush()?;
    let checkpoint = out_dir.join(format!("{}.sfx", cfg.stage));
    save_model(&checkpoint, &params, &meta_at(cfg.steps))?;
    Ok(TrainOutcome { params, losses, checkpoint, loss_log })
}

/// Moving average over a trailing window of `w` values.
pub fn smoothed(losses: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    let mut out = Vec::with_capacity(losses.len());
    let mut sum = 0.0;
    for i in 0..losses.len() {
        sum += losses[i];
        if i >= w {
            sum -= losses[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing_window() {
        assert_eq!(smoothed(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn batches_are_reproducible_and_cycle_labels() {
        let mut cfg = TrainConfig::defaults(Stage::Teacher);
        cfg.batch_size = 4;
        let a = training_batch(&cfg, 3).unwrap();
        let b = training_batch(&cfg, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().map(|t| t.label).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert_ne!(a[0].seed, training_batch(&cfg, 4).unwrap()[0].seed);
    }

    #[test]
    fn stage2_requires_init() {
        let cfg = TrainConfig::defaults(Stage::Stage2);
        let dir = tempfile::tempdir().unwrap();
        assert!(train_loop(&cfg, None, dir.path(), |_, _| {}).is_err());
    }
}
