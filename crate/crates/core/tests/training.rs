mod common;

use common::{dims, tiny_config};
use streamfx::checkpoint::load_model;
use streamfx::config::{Stage, TrainConfig};
use streamfx::distill::{shifted_schedule, snr_weights, snr_weights_at, stage2_loss, ChunkRollout, RolloutRecord, StepTrace};
use streamfx::flow::{draw_timesteps, flow_loss_graph, stream_rng, FlowLossConfig, Stream, TimeSampling};
use streamfx::autodiff::Graph;
use streamfx::model::{DenoiserParams, KVCache};
use streamfx::train::train_loop;
use streamfx::world::make_triplet;
use streamfx::{Error, Tensor};

#[test]
fn clean_state_fraction_matches_probability() {
    let (mut clean, mut total) = (0usize, 0usize);
    for i in 0..10_000u64 {
        let ts = draw_timesteps(
            &mut stream_rng(3, i, 0, Stream::Timestep),
            &mut stream_rng(3, i, 0, Stream::CleanCoin),
            5,
            TimeSampling::PerChunk { p_clean: 0.2 },
        );
        clean += ts.iter().filter(|&&t| t == 0.0).count();
        total += ts.len();
        assert!(ts.iter().all(|&t| t == 0.0 || (0.001..0.999).contains(&t)));
    }
    let f = clean as f64 / total as f64;
    assert!((f - 0.2).abs() <= 0.02, "clean fraction {f}");
}

#[test]
fn all_clean_chunks_give_zero_loss() {
    let p = DenoiserParams::<f32>::init(tiny_config(), 1).unwrap();
    let batch = vec![make_triplet::<rand_chacha::ChaCha8Rng>(1, 0, dims(&p.config, 3), None).unwrap()];
    let mut g = Graph::<f32>::new();
    let pv = p.register(&mut g, true);
    let out = flow_loss_graph(&mut g, &pv, &p, &batch, &FlowLossConfig::stage1(1.0), 0, 0).unwrap();
    assert_eq!(g.value(out.loss).data()[0], 0.0);
    assert!(out.samples[0].0.iter().all(|&t| t == 0.0));
}

fn record_with_errors(errors: &[f32], y: &Tensor<f64>) -> RolloutRecord<f64> {
    let p = DenoiserParams::<f64>::init(tiny_config(), 2).unwrap();
    let cache = KVCache::new(&p, None, None, 1).unwrap();
    let ts = shifted_schedule(4).unwrap();
    let steps = ts
        .timesteps()
        .windows(2)
        .zip(errors)
        .map(|(w, &e)| StepTrace {
            t: w[0],
            t_next: w[1],
            z_t: y.clone(),
            v_cond: y.clone(),
            v_uncond: None,
            x0: y.map(|v| v + e as f64),
        })
        .collect();
    RolloutRecord {
        label: None,
        cfg_scale: 0.0,
        chunks: vec![ChunkRollout { chunk_index: 0, cache_chunks: vec![], cache, steps, output: y.clone() }],
    }
}

#[test]
fn stage2_loss_examples() {
    let c = tiny_config();
    let y = Tensor::<f64>::full(&c.geometry().chunk_shape(), 0.4);
    let w = snr_weights(&shifted_schedule(4).unwrap()).unwrap();
    let total: f64 = w.iter().sum();
    assert_eq!(stage2_loss(&record_with_errors(&[0.0; 4], &y), &[y.clone()], &w).unwrap(), 0.0);

    let cerr = 0.25f64;
    let got = stage2_loss(&record_with_errors(&[0.0, 0.0, 0.0, cerr as f32], &y), &[y.clone()], &w).unwrap();
    let w624 = snr_weights_at(&[0.624]).unwrap()[0];
    assert!((got - cerr * cerr * w624 / total).abs() < 1e-12);

    let doubled: Vec<f64> = w.iter().map(|v| 2.0 * v).collect();
    let r = record_with_errors(&[0.1, 0.2, 0.3, 0.4], &y);
    assert!((stage2_loss(&r, &[y.clone()], &w).unwrap() - stage2_loss(&r, &[y.clone()], &doubled).unwrap()).abs() < 1e-15);
    assert!(stage2_loss(&r, &[y.clone()], &w[..3]).is_err());
}

fn tiny_train(stage: Stage, steps: usize) -> TrainConfig {
    let text = "height = 4\nwidth = 4\nc_frames = 2\nclip_frames = 4\nd_model = 16\nd_mlp = 32\nt_features = 8\nbatch_size = 2\nwindow = 2\n";
    let mut c = TrainConfig::parse(text, stage).unwrap();
    c.steps = steps;
    c.checkpoint_every = 0;
    c
}

#[test]
fn stages_chain_by_parameter_hash() {
    let d = tempfile::tempdir().unwrap();
    let t = train_loop(&tiny_train(Stage::Teacher, 2), None, d.path(), |_, _| {}).unwrap();
    let (_, tm) = load_model::<f32>(&t.checkpoint).unwrap();
    assert_eq!(tm.parent_hash, None);
    let teacher_hash = t.params.content_hash();
    let s1 = train_loop(&tiny_train(Stage::Stage1, 2), Some(t.params), d.path(), |_, _| {}).unwrap();
    let (_, m1) = load_model::<f32>(&s1.checkpoint).unwrap();
    assert_eq!(m1.parent_hash.as_deref(), Some(teacher_hash.as_str()));
    let s1_hash = s1.params.content_hash();
    let s2 = train_loop(&tiny_train(Stage::Stage2, 1), Some(s1.params), d.path(), |_, _| {}).unwrap();
    let (_, m2) = load_model::<f32>(&s2.checkpoint).unwrap();
    assert_eq!(m2.parent_hash.as_deref(), Some(s1_hash.as_str()));
    assert_eq!((m2.stage.as_str(), m2.step), ("stage2", 1));
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let d = tempfile::tempdir().unwrap();
    let p = DenoiserParams::<f32>::init(tiny_train(Stage::Stage1, 1).model, 5).unwrap();
    let mut cfg = tiny_train(Stage::Stage1, 3);
    cfg.lr = 0.0;
    let out = train_loop(&cfg, Some(p.clone()), d.path(), |_, _| {}).unwrap();
    assert_eq!(out.params.content_hash(), p.content_hash());
    assert_eq!(out.losses.len(), 3);
}

#[test]
fn non_finite_loss_aborts_with_last_good_checkpoint() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny_train(Stage::Stage1, 3);
    let mut p = DenoiserParams::<f32>::init(cfg.model.clone(), 5).unwrap();
    p.get_mut("out.bias").unwrap().data_mut()[0] = f32::NAN;
    let err = train_loop(&cfg, Some(p), d.path(), |_, _| {}).err().unwrap();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    assert!(d.path().join("stage1_last_good.sfx").exists());
    assert!(!d.path().join("stage1.sfx").exists());
}

#[test]
fn teacher_loss_falls_on_a_short_run() {
    let d = tempfile::tempdir().unwrap();
    let mut cfg = tiny_train(Stage::Teacher, 60);
    cfg.batch_size = 4;
    let out = train_loop(&cfg, None, d.path(), |_, _| {}).unwrap();
    let head: f64 = out.losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = out.losses[50..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "{head} -> {tail}");
    let csv = std::fs::read_to_string(out.loss_log).unwrap();
    assert!(csv.starts_with("step,stage,loss\n0,teacher,"));
}
