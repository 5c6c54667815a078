//! Velocity-predicting transformer over interleaved context sequences, with a
//! per-layer KV cache for chunked streaming.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::layout::{build_context, timestep_map, AttentionMask, ContextSequence, LatentChunk, PatchGeometry, TimestepMap};
use crate::tensor::{Real, Tensor};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_tok: usize,
    pub d_mlp: usize,
    pub c_frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub n_effect_labels: usize,
    /// Chunk slots in the position table; chunk `i` uses slot `i % position_window`.
    pub position_window: usize,
    /// Width of the sinusoidal timestep features.
    pub t_features: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            d_model: 32,
            d_tok: 12,
            d_mlp: 128,
            c_frames: 4,
            height: 16,
            width: 16,
            channels: 3,
            patch: 2,
            n_effect_labels: 4,
            position_window: 5,
            t_features: 64,
        }
    }
}

impl DenoiserConfig {
    pub fn geometry(&self) -> PatchGeometry {
        PatchGeometry {
            c_frames: self.c_frames,
            height: self.height,
            width: self.width,
            channels: self.channels,
            patch: self.patch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.geometry();
        g.validate()?;
        if self.d_tok != g.d_tok() {
            return Err(Error::Config(format!("d_tok {} but patch gives {}", self.d_tok, g.d_tok())));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!("d_model {} not divisible by {} heads", self.d_model, self.heads)));
        }
        if self.layers == 0 || self.d_mlp == 0 || self.position_window == 0 {
            return Err(Error::Config("layers, d_mlp and position_window must be positive".into()));
        }
        if self.t_features < 2 || self.t_features % 2 != 0 {
            return Err(Error::Config("t_features must be even and ≥ 2".into()));
        }
        Ok(())
    }

    /// Row of the label table reserved for the dropped text condition.
    pub fn null_label(&self) -> usize {
        self.n_effect_labels
    }
}

#[derive(Clone, Debug)]
struct LayerIndex {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
struct ParamIndex {
    tok_w: usize,
    tok_b: usize,
    pos_segment: usize,
    pos_slot: usize,
    pos_token: usize,
    t_w1: usize,
    t_b1: usize,
    t_w2: usize,
    t_b2: usize,
    label: usize,
    layers: Vec<LayerIndex>,
    out_ln_g: usize,
    out_ln_b: usize,
    out_w: usize,
    out_b: usize,
}

enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Sinusoidal,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn param_specs(c: &DenoiserConfig) -> (Vec<ParamSpec>, ParamIndex) {
    let mut specs = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, init: Init| {
        specs.push(ParamSpec { name, shape, init });
        specs.len() - 1
    };
    let d = c.d_model;
    let lin = |fan_in: usize| Init::Normal(1.0 / (fan_in as f64).sqrt());
    let resid = 1.0 / ((2 * c.layers) as f64).sqrt();

    let tok_w = add("tok_in.weight".into(), vec![c.d_tok, d], lin(c.d_tok));
    let tok_b = add("tok_in.bias".into(), vec![d], Init::Zeros);
    let pos_segment = add("pos.segment".into(), vec![3, d], Init::Normal(0.5));
    let pos_slot = add("pos.slot".into(), vec![c.position_window, d], Init::Normal(0.1));
    let tokens_per_chunk = c.geometry().tokens_per_chunk();
    let pos_token = add("pos.token".into(), vec![tokens_per_chunk, d], Init::Sinusoidal);
    let t_w1 = add("t_embed.fc1.weight".into(), vec![c.t_features, d], lin(c.t_features));
    let t_b1 = add("t_embed.fc1.bias".into(), vec![d], Init::Zeros);
    let t_w2 = add("t_embed.fc2.weight".into(), vec![d, d], lin(d));
    let t_b2 = add("t_embed.fc2.bias".into(), vec![d], Init::Zeros);
    let label = add("label_embed".into(), vec![c.n_effect_labels + 1, d], Init::Normal(0.5));
    let mut layers = Vec::new();
    for l in 0..c.layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        layers.push(LayerIndex {
            ln1_g: add(p("ln1.gamma"), vec![d], Init::Ones),
            ln1_b: add(p("ln1.beta"), vec![d], Init::Zeros),
            wq: add(p("attn.wq"), vec![d, d], lin(d)),
            wk: add(p("attn.wk"), vec![d, d], lin(d)),
            wv: add(p("attn.wv"), vec![d, d], lin(d)),
            wo: add(p("attn.wo"), vec![d, d], Init::Normal(resid / (d as f64).sqrt())),
            bo: add(p("attn.bo"), vec![d], Init::Zeros),
            ln2_g: add(p("ln2.gamma"), vec![d], Init::Ones),
            ln2_b: add(p("ln2.beta"), vec![d], Init::Zeros),
            w1: add(p("mlp.fc1.weight"), vec![d, c.d_mlp], lin(d)),
            b1: add(p("mlp.fc1.bias"), vec![c.d_mlp], Init::Zeros),
            w2: add(p("mlp.fc2.weight"), vec![c.d_mlp, d], Init::Normal(resid / (c.d_mlp as f64).sqrt())),
            b2: add(p("mlp.fc2.bias"), vec![d], Init::Zeros),
        });
    }
    let out_ln_g = add("out.ln.gamma".into(), vec![d], Init::Ones);
    let out_ln_b = add("out.ln.beta".into(), vec![d], Init::Zeros);
    let out_w = add("out.weight".into(), vec![d, c.d_tok], Init::Normal(0.02));
    let out_b = add("out.bias".into(), vec![c.d_tok], Init::Zeros);
    let index = ParamIndex {
        tok_w,
        tok_b,
        pos_segment,
        pos_slot,
        pos_token,
        t_w1,
        t_b1,
        t_w2,
        t_b2,
        label,
        layers,
        out_ln_g,
        out_ln_b,
        out_w,
        out_b,
    };
    (specs, index)
}

/// Sinusoidal code of each in-chunk token coordinate (frame, patch row,
/// patch column), so equal positions in different segments start out
/// aligned.
fn sinusoidal_positions(c: &DenoiserConfig) -> Vec<f64> {
    let g = c.geometry();
    let (hp, wp) = (g.height / g.patch, g.width / g.patch);
    let d = c.d_model;
    let n = g.tokens_per_chunk();
    let mut out = vec![0.0; n * d];
    let axes = 3;
    let per_axis = (d / axes).max(2) & !1;
    for tok in 0..n {
        let coords = [tok / (hp * wp), (tok / wp) % hp, tok % wp];
        for (a, &coord) in coords.iter().enumerate() {
            for j in 0..per_axis / 2 {
                let col = a * per_axis + 2 * j;
                if col + 1 >= d {
                    break;
                }
                let freq = std::f64::consts::PI / 2f64.powi(j as i32);
                let arg = coord as f64 * freq;
                out[tok * d + col] = arg.sin();
                out[tok * d + col + 1] = arg.cos();
            }
        }
    }
    out
}

/// Trainable weights of the denoiser.
#[derive(Clone, Debug)]
pub struct DenoiserParams<T: Real = f32> {
    pub config: DenoiserConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: ParamIndex,
}

impl<T: Real> DenoiserParams<T> {
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (specs, index) = param_specs(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for spec in specs {
            let n: usize = spec.shape.iter().product();
            let data: Vec<T> = match spec.init {
                Init::Zeros => vec![T::ZERO; n],
                Init::Ones => vec![T::ONE; n],
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("valid std");
                    (0..n).map(|_| T::from_f64(dist.sample(&mut rng))).collect()
                }
                Init::Sinusoidal => sinusoidal_positions(&config).into_iter().map(T::from_f64).collect(),
            };
            names.push(spec.name);
            tensors.push(Tensor::from_parts(spec.shape, data));
        }
        Ok(Self { config, names, tensors, index })
    }

    /// Rebuild from named tensors, checking every name and shape.
    pub fn from_named(config: DenoiserConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let (specs, index) = param_specs(&config);
        if specs.len() != named.len() {
            return Err(Error::Format(format!("expected {} tensors, found {}", specs.len(), named.len())));
        }
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (spec, (name, t)) in specs.into_iter().zip(named) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(Error::Format(format!(
                    "tensor {name} {:?} does not match expected {} {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
            if !t.all_finite() {
                return Err(Error::NonFinite(format!("parameter {name}")));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self { config, names, tensors, index })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// All parameters in declaration order as one flat vector.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().map(|v| v.to_f64())).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.numel();
            for (d, &s) in t.data_mut().iter_mut().zip(&flat[off..off + n]) {
                *d = T::from_f64(s);
            }
            off += n;
        }
    }

    pub fn cast<U: Real>(&self) -> DenoiserParams<U> {
        DenoiserParams {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// SHA-256 over names, shapes and little-endian payloads.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named() {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            let mut buf = Vec::with_capacity(t.numel() * T::BYTES);
            for &v in t.data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Put every parameter on the graph, as leaves or constants.
    pub fn register(&self, g: &mut Graph<T>, trainable: bool) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        ParamVars(vars)
    }

    /// Gradients for every parameter, zero where unreached.
    pub fn collect_grads(&self, g: &Graph<T>, grads: &Gradients<T>, pv: &ParamVars) -> Vec<Tensor<T>> {
        pv.0.iter().map(|&v| grads.get_or_zeros(g, v)).collect()
    }
}

/// Parameter handles on one graph, in declaration order.
#[derive(Clone, Debug)]
pub struct ParamVars(pub Vec<Var>);

/// Post-projection keys and values of one layer, `[tokens, d_model]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerKv<T: Real = f32> {
    pub k: Tensor<T>,
    pub v: Tensor<T>,
}

/// Which reference entry a cached pass attends to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefSlot {
    Conditional,
    Unconditional,
}

#[derive(Clone, Debug)]
pub struct CachedChunk<T: Real = f32> {
    pub chunk_index: usize,
    pub layers: Vec<LayerKv<T>>,
}

/// Keys/values of finished clean chunks plus the pinned reference entries.
///
/// Two reference entries are kept: the active condition and the
/// unconditional one (zero latent, null label), so both CFG passes share the
/// chunk history.
#[derive(Clone, Debug)]
pub struct KVCache<T: Real = f32> {
    capacity: usize,
    reference: Vec<LayerKv<T>>,
    unconditional: Vec<LayerKv<T>>,
    chunks: VecDeque<CachedChunk<T>>,
    next_index: usize,
}

impl<T: Real> KVCache<T> {
    /// Seed a cache with reference entries. `reference = None` means a
    /// zero latent; `label = None` means the null label.
    pub fn new(
        params: &DenoiserParams<T>,
        reference: Option<&Tensor<T>>,
        label: Option<usize>,
        capacity: usize,
    ) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Cache("window capacity must be at least 1".into()));
        }
        let reference_kv = encode_reference(params, reference, label)?;
        let unconditional = encode_reference(params, None, None)?;
        Ok(Self { capacity, reference: reference_kv, unconditional, chunks: VecDeque::new(), next_index: 0 })
    }

    /// Replace the conditional reference entry; chunk history is kept.
    pub fn set_reference(
        &mut self,
        params: &DenoiserParams<T>,
        reference: Option<&Tensor<T>>,
        label: Option<usize>,
    ) -> Result<()> {
        self.reference = encode_reference(params, reference, label)?;
        Ok(())
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn next_index(&self) -> usize {
        self.next_index
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn chunk_indices(&self) -> Vec<usize> {
        self.chunks.iter().map(|c| c.chunk_index).collect()
    }

    /// Scalars held across all entries, reference included.
    pub fn footprint(&self) -> usize {
        let layer_sum = |ls: &[LayerKv<T>]| ls.iter().map(|l| l.k.numel() + l.v.numel()).sum::<usize>();
        layer_sum(&self.reference)
            + layer_sum(&self.unconditional)
            + self.chunks.iter().map(|c| layer_sum(&c.layers)).sum::<usize>()
    }

    pub fn reference_entry(&self, slot: RefSlot) -> &[LayerKv<T>] {
        match slot {
            RefSlot::Conditional => &self.reference,
            RefSlot::Unconditional => &self.unconditional,
        }
    }

    /// Append a finished chunk, evicting the oldest chunk past capacity.
    /// The reference entries are never evicted.
    pub fn append(&mut self, entry: CachedChunk<T>) {
        self.next_index = entry.chunk_index + 1;
        self.chunks.push_back(entry);
        while self.chunks.len() > self.capacity {
            self.chunks.pop_front();
        }
    }

    /// Keys and values for `layer` in attention order: reference, then
    /// cached chunks oldest first.
    fn layer_context(&self, slot: RefSlot, layer: usize) -> (Tensor<T>, Tensor<T>) {
        let r = &self.reference_entry(slot)[layer];
        let mut ks = vec![&r.k];
        let mut vs = vec![&r.v];
        for c in &self.chunks {
            ks.push(&c.layers[layer].k);
            vs.push(&c.layers[layer].v);
        }
        (
            Tensor::concat(&ks, 0).expect("cache entries share d_model"),
            Tensor::concat(&vs, 0).expect("cache entries share d_model"),
        )
    }
}

fn zero_reference<T: Real>(c: &DenoiserConfig) -> Tensor<T> {
    Tensor::zeros(&c.geometry().frame_shape())
}

fn encode_reference<T: Real>(
    params: &DenoiserParams<T>,
    reference: Option<&Tensor<T>>,
    label: Option<usize>,
) -> Result<Vec<LayerKv<T>>> {
    let zero = zero_reference(&params.config);
    let r = reference.unwrap_or(&zero);
    let seq = build_context(params.config.geometry(), Some(r), &[], &[])?;
    let tmap = TimestepMap { t: vec![0.0; seq.len()] };
    let mut g = Graph::no_grad();
    let pv = params.register(&mut g, false);
    let out = params.forward(&mut g, &pv, &Forward { seq: &seq, mask: None, tmap: &tmap, label, cache: None, collect_kv: true })?;
    Ok(out.kv)
}

/// Attend against a cache instead of a full window.
#[derive(Clone, Copy)]
pub struct CacheView<'a, T: Real> {
    pub cache: &'a KVCache<T>,
    pub slot: RefSlot,
}

/// One denoiser evaluation.
pub struct Forward<'a, T: Real> {
    pub seq: &'a ContextSequence<T>,
    /// `None` means every query sees every key.
    pub mask: Option<&'a AttentionMask>,
    pub tmap: &'a TimestepMap,
    /// `None` selects the null label row.
    pub label: Option<usize>,
    pub cache: Option<CacheView<'a, T>>,
    pub collect_kv: bool,
}

pub struct ForwardOutput<T: Real> {
    /// Predicted velocity of target tokens, `[target_tokens, d_tok]`; absent
    /// when the sequence has no target tokens.
    pub velocity: Option<Var>,
    /// Keys/values of this sequence's tokens per layer when requested.
    pub kv: Vec<LayerKv<T>>,
}

impl<T: Real> DenoiserParams<T> {
    fn check_request(&self, req: &Forward<'_, T>) -> Result<()> {
        let seq = req.seq;
        if seq.geometry != self.config.geometry() {
            return Err(Error::invalid(format!(
                "sequence geometry {:?} does not match model {:?}",
                seq.geometry,
                self.config.geometry()
            )));
        }
        if req.tmap.t.len() != seq.len() {
            return Err(Error::invalid(format!("timestep map has {} entries for {} tokens", req.tmap.t.len(), seq.len())));
        }
        if let Some(l) = req.label {
            if l >= self.config.n_effect_labels {
                return Err(Error::invalid(format!("effect label {l} out of {}", self.config.n_effect_labels)));
            }
        }
        if let Some(m) = req.mask {
            if m.queries != seq.len() || m.keys != seq.len() {
                return Err(Error::invalid(format!("mask {}x{} for {} tokens", m.queries, m.keys, seq.len())));
            }
        }
        if let Some(view) = req.cache {
            if seq.has_reference() {
                return Err(Error::Cache("sequence carries a reference but the cache already holds one".into()));
            }
            let chunks = seq.chunk_indices();
            if chunks.len() != 1 {
                return Err(Error::Cache(format!("cached pass needs exactly one super-chunk, got {}", chunks.len())));
            }
            if chunks[0] != view.cache.next_index() {
                return Err(Error::Cache(format!(
                    "chunk {} presented but the cache expects chunk {}",
                    chunks[0],
                    view.cache.next_index()
                )));
            }
            if req.mask.is_some() {
                return Err(Error::Cache("masks are not used in cached mode".into()));
            }
        }
        Ok(())
    }

    /// Build the forward pass on `g`.
    pub fn forward(&self, g: &mut Graph<T>, pv: &ParamVars, req: &Forward<'_, T>) -> Result<ForwardOutput<T>> {
        self.check_request(req)?;
        let c = &self.config;
        let ix = &self.index;
        let p = |i: usize| pv.0[i];
        let seq = req.seq;
        let l = seq.len();
        let d = c.d_model;

        // Token embedding plus additive conditioning.
        let toks = g.constant(seq.tokens.clone());
        let mut h = g.matmul(toks, p(ix.tok_w))?;
        h = g.add_bias(h, p(ix.tok_b))?;

        let seg_idx: Arc<[usize]> = seq.meta.iter().map(|m| m.segment.id()).collect();
        let slot_idx: Arc<[usize]> = seq.meta.iter().map(|m| m.chunk_index % c.position_window).collect();
        let pos_idx: Arc<[usize]> = seq.meta.iter().map(|m| m.position).collect();
        for (table, idx) in [(ix.pos_segment, seg_idx), (ix.pos_slot, slot_idx), (ix.pos_token, pos_idx)] {
            let e = g.gather_rows(p(table), idx)?;
            h = g.add(h, e)?;
        }

        let (feats, t_idx) = timestep_features::<T>(&req.tmap.t, c.t_features);
        let f = g.constant(feats);
        let mut te = g.matmul(f, p(ix.t_w1))?;
        te = g.add_bias(te, p(ix.t_b1))?;
        te = g.silu(te);
        te = g.matmul(te, p(ix.t_w2))?;
        te = g.add_bias(te, p(ix.t_b2))?;
        let te = g.gather_rows(te, t_idx)?;
        h = g.add(h, te)?;

        let label_row = req.label.unwrap_or(c.null_label());
        let le = g.gather_rows(p(ix.label), vec![label_row; l].into())?;
        h = g.add(h, le)?;

        let mask = req.mask.filter(|m| !m.is_full()).map(|m| Arc::clone(&m.allowed));
        let dh = d / c.heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut kv_out = Vec::new();

        for (li, lx) in ix.layers.iter().enumerate() {
            let x = g.layer_norm(h, p(lx.ln1_g), p(lx.ln1_b), LN_EPS)?;
            let q = g.matmul(x, p(lx.wq))?;
            let mut k = g.matmul(x, p(lx.wk))?;
            let mut v = g.matmul(x, p(lx.wv))?;
            if req.collect_kv {
                kv_out.push(LayerKv { k: g.value(k).clone(), v: g.value(v).clone() });
            }
            if let Some(view) = req.cache {
                let (ck, cv) = view.cache.layer_context(view.slot, li);
                let ck = g.constant(ck);
                let cv = g.constant(cv);
                k = g.concat(&[ck, k], 0)?;
                v = g.concat(&[cv, v], 0)?;
            }
            let mut heads = Vec::with_capacity(c.heads);
            for hi in 0..c.heads {
                let qh = g.slice(q, 1, hi * dh, dh)?;
                let kh = g.slice(k, 1, hi * dh, dh)?;
                let vh = g.slice(v, 1, hi * dh, dh)?;
                let kt = g.transpose(kh)?;
                let s = g.matmul(qh, kt)?;
                let mut s = g.scale(s, inv_sqrt);
                if let Some(m) = &mask {
                    s = g.masked_fill(s, Arc::clone(m))?;
                }
                let a = g.softmax(s);
                heads.push(g.matmul(a, vh)?);
            }
            let o = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 1)? };
            let o = g.matmul(o, p(lx.wo))?;
            let o = g.add_bias(o, p(lx.bo))?;
            h = g.add(h, o)?;

            let x2 = g.layer_norm(h, p(lx.ln2_g), p(lx.ln2_b), LN_EPS)?;
            let m1 = g.matmul(x2, p(lx.w1))?;
            let m1 = g.add_bias(m1, p(lx.b1))?;
            let m1 = g.gelu(m1);
            let m2 = g.matmul(m1, p(lx.w2))?;
            let m2 = g.add_bias(m2, p(lx.b2))?;
            h = g.add(h, m2)?;
        }

        let rows = seq.target_rows();
        let velocity = if rows.is_empty() {
            None
        } else {
            let ht = g.gather_rows(h, rows.into())?;
            let ht = g.layer_norm(ht, p(ix.out_ln_g), p(ix.out_ln_b), LN_EPS)?;
            let out = g.matmul(ht, p(ix.out_w))?;
            Some(g.add_bias(out, p(ix.out_b))?)
        };
        Ok(ForwardOutput { velocity, kv: kv_out })
    }
}

/// Sinusoidal features for each distinct timestep and the per-token row
/// into them.
fn timestep_features<T: Real>(t: &[f64], width: usize) -> (Tensor<T>, Arc<[usize]>) {
    let mut distinct: Vec<f64> = Vec::new();
    let idx: Vec<usize> = t
        .iter()
        .map(|&v| match distinct.iter().position(|&u| u.to_bits() == v.to_bits()) {
            Some(i) => i,
            None => {
                distinct.push(v);
                distinct.len() - 1
            }
        })
        .collect();
    let half = width / 2;
    let mut data = Vec::with_capacity(distinct.len() * width);
    for &tv in &distinct {
        let scaled = tv * 1000.0;
        for j in 0..half {
            let freq = (-(10000f64.ln()) * j as f64 / half as f64).exp();
            data.push(T::from_f64((scaled * freq).cos()));
        }
        for j in 0..half {
            let freq = (-(10000f64.ln()) * j as f64 / half as f64).exp();
            data.push(T::from_f64((scaled * freq).sin()));
        }
    }
    (Tensor::from_parts(vec![distinct.len(), width], data), idx.into())
}

/// Evaluate without gradients and return target velocities as frames,
/// `[target_chunks · c_frames, H, W, C]`.
pub fn denoise_forward<T: Real>(
    params: &DenoiserParams<T>,
    seq: &ContextSequence<T>,
    mask: Option<&AttentionMask>,
    tmap: &TimestepMap,
    label: Option<usize>,
    cache: Option<CacheView<'_, T>>,
) -> Result<Tensor<T>> {
    let mut g = Graph::no_grad();
    let pv = params.register(&mut g, false);
    let out = params.forward(&mut g, &pv, &Forward { seq, mask, tmap, label, cache, collect_kv: false })?;
    let v = out.velocity.ok_or_else(|| Error::invalid("sequence has no target tokens"))?;
    params.config.geometry().unpatchify(g.value(v))
}

/// `(1 + w)·cond − w·uncond`
pub fn cfg_blend<T: Real>(cond: &Tensor<T>, uncond: &Tensor<T>, w: f64) -> Result<Tensor<T>> {
    let a = T::from_f64(1.0 + w);
    let b = T::from_f64(w);
    cond.zip_map(uncond, "cfg_blend", |c, u| a * c - b * u)
}

/// Super-chunk sequence for a cached pass.
pub fn super_chunk<T: Real>(
    params: &DenoiserParams<T>,
    source: &Tensor<T>,
    target: &Tensor<T>,
    chunk_index: usize,
) -> Result<ContextSequence<T>> {
    build_context(
        params.config.geometry(),
        None,
        &[LatentChunk::source(source.clone(), chunk_index)],
        &[LatentChunk::target(target.clone(), chunk_index)],
    )
}

/// Conditional and unconditional passes over the same cache, blended with
/// guidance scale `w`. Returns velocity frames `[c_frames, H, W, C]`.
pub fn dual_pass_cfg<T: Real>(
    params: &DenoiserParams<T>,
    seq: &ContextSequence<T>,
    tmap: &TimestepMap,
    cache: &KVCache<T>,
    label: Option<usize>,
    w: f64,
) -> Result<Tensor<T>> {
    if !(w >= 0.0) {
        return Err(Error::invalid(format!("guidance scale must be ≥ 0, got {w}")));
    }
    let cond = denoise_forward(params, seq, None, tmap, label, Some(CacheView { cache, slot: RefSlot::Conditional }))?;
    if w == 0.0 {
        return Ok(cond);
    }
    let uncond = denoise_forward(params, seq, None, tmap, None, Some(CacheView { cache, slot: RefSlot::Unconditional }))?;
    cfg_blend(&cond, &uncond, w)
}

/// Training-mode guidance: gradients flow through the conditional pass only;
/// the unconditional prediction enters as a constant. Returns the blended
/// velocity in token layout `[target_tokens, d_tok]`.
#[allow(clippy::too_many_arguments)]
pub fn dual_pass_cfg_graph<T: Real>(
    g: &mut Graph<T>,
    pv: &ParamVars,
    params: &DenoiserParams<T>,
    seq: &ContextSequence<T>,
    tmap: &TimestepMap,
    cache: &KVCache<T>,
    label: Option<usize>,
    w: f64,
) -> Result<Var> {
    let cond = params
        .forward(g, pv, &Forward { seq, mask: None, tmap, label, cache: Some(CacheView { cache, slot: RefSlot::Conditional }), collect_kv: false })?
        .velocity
        .ok_or_else(|| Error::invalid("sequence has no target tokens"))?;
    if w == 0.0 {
        return Ok(cond);
    }
    let uncond_frames =
        denoise_forward(params, seq, None, tmap, None, Some(CacheView { cache, slot: RefSlot::Unconditional }))?;
    let uncond = g.constant(params.config.geometry().patchify(&uncond_frames)?);
    let a = g.scale(cond, 1.0 + w);
    let b = g.scale(uncond, w);
    g.sub(a, b)
}

/// Run a finished clean chunk through the model against `cache` and append
/// its keys/values.
pub fn encode_chunk<T: Real>(
    params: &DenoiserParams<T>,
    cache: &mut KVCache<T>,
    source: &Tensor<T>,
    clean_target: &Tensor<T>,
    label: Option<usize>,
) -> Result<()> {
    let idx = cache.next_index();
    let seq = super_chunk(params, source, clean_target, idx)?;
    let tmap = timestep_map(&seq, &[0.0])?;
    let mut g = Graph::no_grad();
    let pv = params.register(&mut g, false);
    let out = params.forward(
        &mut g,
        &pv,
        &Forward {
            seq: &seq,
            mask: None,
            tmap: &tmap,
            label,
            cache: Some(CacheView { cache, slot: RefSlot::Conditional }),
            collect_kv: true,
        },
    )?;
    cache.append(CachedChunk { chunk_index: idx, layers: out.kv });
    Ok(())
}
