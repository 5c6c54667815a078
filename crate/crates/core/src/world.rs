//! Synthetic paired effect videos: moving Gaussian blobs over a gradient
//! background, edited by a small catalog of closed-form effects.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Container, StoredTensor};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;
pub const N_EFFECTS: usize = 4;

/// Clip dimensions; channels are always RGB.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipDims {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for ClipDims {
    fn default() -> Self {
        Self { frames: 20, height: 16, width: 16 }
    }
}

impl ClipDims {
    pub fn frame_len(&self) -> usize {
        self.height * self.width * CHANNELS
    }

    pub fn shape(&self) -> Vec<usize> {
        vec![self.frames, self.height, self.width, CHANNELS]
    }
}

/// splitmix64 finalizer; derives independent sub-seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Blob {
    p0: [f64; 2],
    vel: [f64; 2],
    amp: [f64; 2],
    omega: [f64; 2],
    phase: [f64; 2],
    sigma: f64,
    color: [f64; 3],
}

/// Fold `x` into `[lo, hi]` by mirror reflection (1-Lipschitz).
fn reflect(x: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    let m = (x - lo).rem_euclid(2.0 * span);
    lo + if m > span { 2.0 * span - m } else { m }
}

impl Blob {
    /// Center (row, col) at frame `f`. Per-frame displacement per axis is
    /// at most |vel| + |amp·omega| ≤ 0.6 + 0.4·0.9 < 1, so < 1.4 px overall.
    fn center(&self, f: f64, dims: &ClipDims) -> [f64; 2] {
        let bounds = [dims.height as f64 - 1.0, dims.width as f64 - 1.0];
        let mut c = [0.0; 2];
        for a in 0..2 {
            let raw = self.p0[a] + self.vel[a] * f + self.amp[a] * (self.omega[a] * f + self.phase[a]).sin();
            c[a] = reflect(raw, 0.0, bounds[a]);
        }
        c
    }
}

/// Source video `[frames, H, W, 3]` in `[0, 1]`, fully determined by `seed`.
pub fn generate_source(seed: u64, dims: ClipDims) -> Result<Tensor<f32>> {
    if dims.frames == 0 || dims.height < 2 || dims.width < 2 {
        return Err(Error::invalid(format!("clip dims too small: {dims:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5EED));
    let scale = dims.height.min(dims.width) as f64 / 16.0;
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.1..0.35));
    let gx: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.12..0.12));
    let gy: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.12..0.12));
    let n_blobs = rng.gen_range(1..=2);
    let blobs: Vec<Blob> = (0..n_blobs)
        .map(|_| Blob {
            p0: [rng.gen_range(0.0..dims.height as f64 - 1.0), rng.gen_range(0.0..dims.width as f64 - 1.0)],
            vel: [rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6)],
            amp: [rng.gen_range(0.0..0.9), rng.gen_range(0.0..0.9)],
            omega: [rng.gen_range(0.1..0.4), rng.gen_range(0.1..0.4)],
            phase: [rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI)],
            sigma: rng.gen_range(1.2..2.2) * scale,
            color: std::array::from_fn(|_| rng.gen_range(0.45..1.0)),
        })
        .collect();

    let mut data = Vec::with_capacity(dims.frames * dims.frame_len());
    for f in 0..dims.frames {
        let centers: Vec<[f64; 2]> = blobs.iter().map(|b| b.center(f as f64, &dims)).collect();
        for y in 0..dims.height {
            for x in 0..dims.width {
                let (u, v) = (x as f64 / (dims.width - 1) as f64, y as f64 / (dims.height - 1) as f64);
                let mut px: [f64; 3] = std::array::from_fn(|c| base[c] + gx[c] * u + gy[c] * v + 0.12);
                for (b, cen) in blobs.iter().zip(&centers) {
                    let d2 = (y as f64 - cen[0]).powi(2) + (x as f64 - cen[1]).powi(2);
                    let a = (-d2 / (2.0 * b.sigma * b.sigma)).exp();
                    for c in 0..3 {
                        px[c] = px[c] * (1.0 - a) + b.color[c] * a;
                    }
                }
                data.extend(px.iter().map(|&p| p.clamp(0.0, 1.0) as f32));
            }
        }
    }
    Tensor::new(dims.shape(), data)
}

/// Parameters of one catalog effect.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectSpec {
    pub effect_id: usize,
    pub ring_radius: f64,
    pub ring_width: f64,
    pub ring_color: [f64; 3],
    /// Cycles per frame.
    pub pulse_frequency: f64,
    pub pulse_amplitude: f64,
    pub overlay_opacity: f64,
    pub overlay_cell: usize,
    pub overlay_color: [f64; 3],
}

impl EffectSpec {
    /// Catalog: 0 palette inversion, 1 additive ring around the brightest
    /// point, 2 global brightness pulse, 3 checkerboard overlay.
    pub fn catalog(effect_id: usize, dims: ClipDims) -> Result<Self> {
        if effect_id >= N_EFFECTS {
            return Err(Error::invalid(format!("effect id {effect_id} outside catalog of {N_EFFECTS}")));
        }
        let scale = dims.height.min(dims.width) as f64 / 16.0;
        Ok(Self {
            effect_id,
            ring_radius: 3.5 * scale,
            ring_width: 0.8 * scale,
            ring_color: [0.55, 0.35, -0.25],
            pulse_frequency: 0.25,
            pulse_amplitude: 0.25,
            overlay_opacity: 0.3,
            overlay_cell: ((4.0 * scale).round() as usize).max(1),
            overlay_color: [1.0, 0.9, 0.2],
        })
    }
}

fn brightest(frame: &[f32], w: usize) -> (usize, usize) {
    let mut best = (0usize, f32::MIN);
    for (i, px) in frame.chunks_exact(CHANNELS).enumerate() {
        let s = px[0] + px[1] + px[2];
        if s > best.1 {
            best = (i, s);
        }
    }
    (best.0 / w, best.0 % w)
}

/// Apply `spec` frame-wise; `frame_offset` is the absolute index of the first
/// frame (only the pulse depends on it).
pub fn apply_effect_at(x: &Tensor<f32>, spec: &EffectSpec, frame_offset: usize) -> Result<Tensor<f32>> {
    let s = x.shape();
    if s.len() != 4 || s[3] != CHANNELS {
        return Err(Error::invalid(format!("expected [frames, H, W, 3], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let flen = h * w * CHANNELS;
    let mut out = Vec::with_capacity(x.numel());
    for (fi, frame) in x.data().chunks_exact(flen).enumerate() {
        match spec.effect_id {
            0 => out.extend(frame.iter().map(|&v| 1.0 - v)),
            1 => {
                let (cy, cx) = brightest(frame, w);
                for (i, px) in frame.chunks_exact(CHANNELS).enumerate() {
                    let (y, xx) = ((i / w) as f64, (i % w) as f64);
                    let d = ((y - cy as f64).powi(2) + (xx - cx as f64).powi(2)).sqrt();
                    let m = (-(d - spec.ring_radius).powi(2) / (2.0 * spec.ring_width.powi(2))).exp();
                    for c in 0..CHANNELS {
                        out.push((px[c] as f64 + spec.ring_color[c] * m).clamp(0.0, 1.0) as f32);
                    }
                }
            }
            2 => {
                let t = (frame_offset + fi) as f64;
                let delta = spec.pulse_amplitude * (2.0 * PI * spec.pulse_frequency * t).sin();
                out.extend(frame.iter().map(|&v| (v as f64 + delta).clamp(0.0, 1.0) as f32));
            }
            3 => {
                let a = spec.overlay_opacity;
                for (i, px) in frame.chunks_exact(CHANNELS).enumerate() {
                    let (y, xx) = (i / w, i % w);
                    let on = ((y / spec.overlay_cell) + (xx / spec.overlay_cell)) % 2 == 0;
                    for c in 0..CHANNELS {
                        let p = if on { spec.overlay_color[c] } else { 0.0 };
                        out.push(((1.0 - a) * px[c] as f64 + a * p) as f32);
                    }
                }
            }
            id => return Err(Error::invalid(format!("effect id {id} outside catalog"))),
        }
    }
    Tensor::new(s.to_vec(), out)
}

pub fn apply_effect(x: &Tensor<f32>, spec: &EffectSpec) -> Result<Tensor<f32>> {
    apply_effect_at(x, spec, 0)
}

/// Source, edited target, one target frame as reference, and the label.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub source: Tensor<f32>,
    pub target: Tensor<f32>,
    pub reference: Tensor<f32>,
    pub reference_frame: usize,
    pub label: usize,
    pub seed: u64,
}

impl Triplet {
    pub fn frames(&self) -> usize {
        self.source.shape()[0]
    }

    /// Same clip with the reference taken from target frame `k`.
    pub fn with_reference(&self, k: usize) -> Result<Self> {
        let reference = frame(&self.target, k)?;
        Ok(Self { reference, reference_frame: k, ..self.clone() })
    }
}

/// Frame `k` of a `[frames, H, W, C]` tensor as `[H, W, C]`.
pub fn frame(video: &Tensor<f32>, k: usize) -> Result<Tensor<f32>> {
    let s = video.shape();
    if s.len() != 4 {
        return Err(Error::invalid(format!("expected a video, got {s:?}")));
    }
    video.narrow(0, k, 1)?.reshape(&s[1..])
}

/// Build a triplet. With `rng` the reference frame is drawn uniformly from
/// the target (training); without, it is frame 0 (evaluation).
pub fn make_triplet<R: Rng>(seed: u64, effect_id: usize, dims: ClipDims, rng: Option<&mut R>) -> Result<Triplet> {
    let spec = EffectSpec::catalog(effect_id, dims)?;
    let source = generate_source(seed, dims)?;
    let target = apply_effect(&source, &spec)?;
    let k = match rng {
        Some(r) => r.gen_range(0..dims.frames),
        None => 0,
    };
    let reference = frame(&target, k)?;
    Ok(Triplet { source, target, reference, reference_frame: k, label: effect_id, seed })
}

/// `n` evaluation-mode triplets; labels cycle through the catalog.
pub fn generate_dataset(seed: u64, n: usize, dims: ClipDims) -> Result<Vec<Triplet>> {
    (0..n)
        .map(|i| make_triplet::<ChaCha8Rng>(mix_seed(seed, i as u64), i % N_EFFECTS, dims, None))
        .collect()
}

pub fn triplet_container(t: &Triplet) -> Container {
    Container {
        header: serde_json::json!({
            "kind": "triplet",
            "seed": t.seed,
            "effect_id": t.label,
            "reference_frame": t.reference_frame,
        }),
        tensors: vec![
            StoredTensor::from_tensor("source", &t.source),
            StoredTensor::from_tensor("target", &t.target),
            StoredTensor::from_tensor("reference", &t.reference),
        ],
    }
}

pub fn triplet_from_container(c: &Container) -> Result<Triplet> {
    let field = |k: &str| {
        c.header.get(k).and_then(|v| v.as_u64()).ok_or_else(|| Error::Format(format!("triplet header lacks {k}")))
    };
    if c.header.get("kind").and_then(|v| v.as_str()) != Some("triplet") {
        return Err(Error::Format("container is not a triplet".into()));
    }
    Ok(Triplet {
        source: c.tensor("source")?,
        target: c.tensor("target")?,
        reference: c.tensor("reference")?,
        reference_frame: field("reference_frame")? as usize,
        label: field("effect_id")? as usize,
        seed: field("seed")?,
    })
}

/// Write each triplet to `dir/triplet_NNNNN.sfx` plus `index.csv`
/// (`seed,effect_id,path`).
pub fn dump_dataset(dir: &Path, triplets: &[Triplet]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut index = String::from("seed,effect_id,path\n");
    for (i, t) in triplets.iter().enumerate() {
        let name = format!("triplet_{i:05}.sfx");
        triplet_container(t).save(&dir.join(&name))?;
        index.push_str(&format!("{},{},{}\n", t.seed, t.label, name));
    }
    let index_path = dir.join("index.csv");
    fs::File::create(&index_path)?.write_all(index.as_bytes())?;
    Ok(index_path)
}

/// Read a dump written by [`dump_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Vec<Triplet>> {
    let index = fs::read_to_string(dir.join("index.csv"))?;
    let mut lines = index.lines();
    if lines.next() != Some("seed,effect_id,path") {
        return Err(Error::Format("index.csv has an unexpected header".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let path = l.rsplit(',').next().unwrap_or_default();
            triplet_from_container(&Container::load(&dir.join(path))?)
        })
        .collect()
}
