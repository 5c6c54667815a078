#![allow(dead_code)]

use streamfx::distill::{chunk_noise, Schedule};
use streamfx::flow::{euler_step, split_chunks};
use streamfx::layout::{block_causal_mask, build_context, timestep_map, LatentChunk};
use streamfx::model::{cfg_blend, denoise_forward, DenoiserConfig, DenoiserParams};
use streamfx::world::ClipDims;
use streamfx::{Real, Tensor};

/// 4×4×3 frames, two-frame chunks, 2 layers of width 16.
pub fn tiny_config() -> DenoiserConfig {
    DenoiserConfig {
        layers: 2,
        heads: 2,
        d_model: 16,
        d_tok: 12,
        d_mlp: 32,
        c_frames: 2,
        height: 4,
        width: 4,
        channels: 3,
        patch: 2,
        n_effect_labels: 4,
        position_window: 6,
        t_features: 8,
    }
}

pub fn dims(c: &DenoiserConfig, chunks: usize) -> ClipDims {
    ClipDims { frames: c.c_frames * chunks, height: c.height, width: c.width }
}

pub fn random_tensor<T: Real>(seed: u64, shape: &[usize], scale: f64) -> Tensor<T> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::from_f64(rng.gen_range(-scale..scale))).collect()).unwrap()
}

/// Sampler re-evaluated from scratch for every step: the whole history so
/// far is laid out as one sequence under the block-causal mask, with no
/// cache. The unconditional branch (zero reference, null label) is only
/// evaluated when `cfg_scale > 0`.
pub fn uncached_rollout(
    params: &DenoiserParams<f32>,
    source: &Tensor<f32>,
    reference: Option<&Tensor<f32>>,
    label: Option<usize>,
    schedule: &Schedule,
    cfg_scale: f64,
    noise_seed: u64,
) -> Vec<Tensor<f32>> {
    let c = &params.config;
    let g = c.geometry();
    let zero = Tensor::zeros(&g.frame_shape());
    let xs = split_chunks(source, c.c_frames).unwrap();
    let mut outs: Vec<Tensor<f32>> = Vec::new();
    for i in 0..xs.len() {
        let mut z = chunk_noise::<f32>(noise_seed, i, xs[i].shape());
        for w in schedule.timesteps().windows(2) {
            let sources: Vec<_> = (0..=i).map(|j| LatentChunk::source(xs[j].clone(), j)).collect();
            let mut targets: Vec<_> = (0..i).map(|j| LatentChunk::target(outs[j].clone(), j)).collect();
            targets.push(LatentChunk::target(z.clone(), i));
            let mut ts = vec![0.0; i];
            ts.push(w[0]);
            let run = |r: &Tensor<f32>, l: Option<usize>| {
                let seq = build_context(g, Some(r), &sources, &targets).unwrap();
                let mask = block_causal_mask(&seq);
                let tm = timestep_map(&seq, &ts).unwrap();
                let v = denoise_forward(params, &seq, Some(&mask), &tm, l, None).unwrap();
                v.narrow(0, i * c.c_frames, c.c_frames).unwrap()
            };
            let vc = run(reference.unwrap_or(&zero), label);
            let v = if cfg_scale > 0.0 { cfg_blend(&vc, &run(&zero, None), cfg_scale).unwrap() } else { vc };
            z = euler_step(&z, &v, w[0], w[1]).unwrap();
        }
        outs.push(z);
    }
    outs
}

use streamfx::distill::RolloutRecord;
use streamfx::flow::x0_from_velocity;
use streamfx::model::{super_chunk, CacheView, RefSlot};

/// Central-difference check of `analytic` against `f` on a deterministic
/// sample of coordinates from every parameter tensor. Returns the largest
/// per-coordinate relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn param_grad_error(
    params: &DenoiserParams<f64>,
    analytic: &[Tensor<f64>],
    per_tensor: usize,
    f: impl Fn(&DenoiserParams<f64>) -> f64,
) -> f64 {
    use rand::{Rng, SeedableRng};
    const H: f64 = 1e-5;
    const FLOOR: f64 = 1e-6;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x6EAD);
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for (ti, grad) in analytic.iter().enumerate() {
        let n = grad.numel();
        let picks: Vec<usize> = if n <= per_tensor { (0..n).collect() } else { (0..per_tensor).map(|_| rng.gen_range(0..n)).collect() };
        for k in picks {
            let orig = params.tensors()[ti].data()[k];
            probe.tensors_mut()[ti].data_mut()[k] = orig + H;
            let fp = f(&probe);
            probe.tensors_mut()[ti].data_mut()[k] = orig - H;
            let fm = f(&probe);
            probe.tensors_mut()[ti].data_mut()[k] = orig;
            let num = (fp - fm) / (2.0 * H);
            let a = grad.data()[k];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(FLOOR);
            worst = worst.max(rel);
        }
    }
    worst
}

fn mse64(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.numel() as f64
}

/// The few-step objective with every recorded rollout quantity frozen
/// except the conditional velocity, which is recomputed under `params`
/// against the recorded cache snapshot. The unconditional velocity stays
/// at its recorded value.
pub fn stage2_surrogate(
    params: &DenoiserParams<f64>,
    record: &RolloutRecord<f64>,
    sources: &[Tensor<f64>],
    targets: &[Tensor<f64>],
    weights: &[f64],
) -> f64 {
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    for ((c, x), y) in record.chunks.iter().zip(sources).zip(targets) {
        for (s, &w) in c.steps.iter().zip(weights) {
            let seq = super_chunk(params, x, &s.z_t, c.chunk_index).unwrap();
            let tm = timestep_map(&seq, &[s.t]).unwrap();
            let view = CacheView { cache: &c.cache, slot: RefSlot::Conditional };
            let vc = denoise_forward(params, &seq, None, &tm, record.label, Some(view)).unwrap();
            let v = match &s.v_uncond {
                Some(u) => cfg_blend(&vc, u, record.cfg_scale).unwrap(),
                None => vc,
            };
            acc += w * mse64(&x0_from_velocity(&s.z_t, &v, s.t).unwrap(), y);
        }
    }
    acc / (total * record.chunks.len() as f64)
}

use rand::Rng;
use streamfx::protocol::{encode_tensor, Message};

fn random_text<R: Rng>(rng: &mut R) -> String {
    const POOL: &[char] = &['a', 'Z', '0', ' ', '"', '\\', '\n', '\t', '/', 'é', '😀', '\u{1}', '{', '}'];
    let n = rng.gen_range(0..24);
    (0..n).map(|_| POOL[rng.gen_range(0..POOL.len())]).collect()
}

fn random_f64<R: Rng>(rng: &mut R) -> f64 {
    match rng.gen_range(0..4) {
        0 => 0.0,
        1 => rng.gen_range(-1e6..1e6),
        2 => rng.gen::<f64>() * 10f64.powi(rng.gen_range(-300..300)),
        _ => f64::from_bits(rng.gen::<u64>() & !(0x7FF << 52) | (rng.gen_range(1u64..0x7FE) << 52)),
    }
}

fn random_payload<R: Rng>(rng: &mut R) -> (String, Vec<usize>) {
    let shape: Vec<usize> = (0..rng.gen_range(1..5)).map(|_| rng.gen_range(1..4)).collect();
    let n = shape.iter().product();
    let data = (0..n).map(|_| f32::from_bits(rng.gen::<u32>() & 0xBF7F_FFFF)).collect();
    (encode_tensor(&Tensor::new(shape.clone(), data).unwrap()), shape)
}

fn maybe<R: Rng, V>(rng: &mut R, f: impl FnOnce(&mut R) -> V) -> Option<V> {
    if rng.gen_bool(0.5) {
        Some(f(rng))
    } else {
        None
    }
}

/// Any well-formed message, with adversarial strings and extreme floats.
pub fn random_message<R: Rng>(rng: &mut R) -> Message {
    match rng.gen_range(0..8) {
        0 => Message::Init {
            window: rng.gen(),
            steps: rng.gen(),
            cfg_scale: random_f64(rng),
            effect_label: maybe(rng, |r| r.gen()),
            reference_b64: maybe(rng, |r| random_payload(r).0),
            seed: maybe(rng, |r| r.gen()),
        },
        1 => {
            let (frames_b64, shape) = random_payload(rng);
            Message::Chunk { index: rng.gen(), frames_b64, shape }
        }
        2 => Message::Condition { reference_b64: maybe(rng, |r| random_payload(r).0), effect_label: maybe(rng, |r| r.gen()) },
        3 => Message::Result { index: rng.gen(), frames_b64: random_payload(rng).0, chunk_ms: random_f64(rng) },
        4 => Message::Stats {
            chunks: rng.gen(),
            mean_ms: random_f64(rng),
            max_ms: random_f64(rng),
            p95_ms: random_f64(rng),
            fps: random_f64(rng),
        },
        5 => Message::Error { code: random_text(rng), message: random_text(rng) },
        6 => Message::Ack { of: random_text(rng), effective_chunk: maybe(rng, |r| r.gen()) },
        _ => Message::Close {},
    }
}

/// Bytes that are not a valid message frame body, or frames with lying
/// length prefixes.
pub fn malformed_frame<R: Rng>(rng: &mut R) -> Vec<u8> {
    let body: Vec<u8> = match rng.gen_range(0..6) {
        0 => (0..rng.gen_range(0..64)).map(|_| rng.gen()).collect(),
        1 => br#"{"type":"chunk","index":0}"#.to_vec(),
        2 => br#"{"type":"warp","x":1}"#.to_vec(),
        3 => br#"{"type":"close","extra":true}"#.to_vec(),
        4 => vec![0xff, 0xfe, b'{'],
        _ => {
            let mut j = random_message(rng).to_json().unwrap().into_bytes();
            let cut = rng.gen_range(0..j.len());
            j.truncate(cut);
            j
        }
    };
    let mut out = (body.len() as u32).to_be_bytes().to_vec();
    out.extend_from_slice(&body);
    out
}
