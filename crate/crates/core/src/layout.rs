//! Interleaved context sequences `[ref | x₁ | y₁ | … | x_M | y_M]` and the
//! attention masks over them.
//!
//! Frames are patch-flattened in raster order: frame-major, then patch row,
//! patch column; inside a token the values run (dy, dx, channel).

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGeometry {
    pub c_frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
}

impl PatchGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.c_frames == 0 || self.channels == 0 || self.patch == 0 {
            return Err(Error::Config(format!("degenerate geometry {self:?}")));
        }
        if self.height % self.patch != 0 || self.width % self.patch != 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "frame {}x{} is not divisible by patch {}",
                self.height, self.width, self.patch
            )));
        }
        Ok(())
    }

    pub fn d_tok(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn tokens_per_frame(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn tokens_per_chunk(&self) -> usize {
        self.c_frames * self.tokens_per_frame()
    }

    pub fn frame_shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn chunk_shape(&self) -> [usize; 4] {
        [self.c_frames, self.height, self.width, self.channels]
    }

    pub fn chunk_len(&self) -> usize {
        self.c_frames * self.height * self.width * self.channels
    }

    /// `[F, H, W, C]` → `[F·tokens_per_frame, d_tok]`.
    pub fn patchify<T: Real>(&self, frames: &Tensor<T>) -> Result<Tensor<T>> {
        let s = frames.shape();
        if s.len() != 4 || s[1] != self.height || s[2] != self.width || s[3] != self.channels {
            return Err(Error::ShapeMismatch {
                op: "patchify",
                lhs: s.to_vec(),
                rhs: vec![0, self.height, self.width, self.channels],
            });
        }
        let f = s[0];
        let (p, c, w) = (self.patch, self.channels, self.width);
        let (hp, wp) = (self.height / p, self.width / p);
        let src = frames.data();
        let mut out = Vec::with_capacity(src.len());
        for fi in 0..f {
            for pr in 0..hp {
                for pc in 0..wp {
                    for dy in 0..p {
                        let row = pr * p + dy;
                        let base = ((fi * self.height + row) * w + pc * p) * c;
                        out.extend_from_slice(&src[base..base + p * c]);
                    }
                }
            }
        }
        Ok(Tensor::from_parts(vec![f * hp * wp, self.d_tok()], out))
    }

    /// Inverse of [`patchify`](Self::patchify).
    pub fn unpatchify<T: Real>(&self, tokens: &Tensor<T>) -> Result<Tensor<T>> {
        let s = tokens.shape();
        let tpf = self.tokens_per_frame();
        if s.len() != 2 || s[1] != self.d_tok() || s[0] % tpf != 0 {
            return Err(Error::ShapeMismatch { op: "unpatchify", lhs: s.to_vec(), rhs: vec![tpf, self.d_tok()] });
        }
        let f = s[0] / tpf;
        let (p, c, w) = (self.patch, self.channels, self.width);
        let (hp, wp) = (self.height / p, self.width / p);
        let src = tokens.data();
        let mut out = vec![T::ZERO; f * self.height * w * c];
        let mut cursor = 0;
        for fi in 0..f {
            for pr in 0..hp {
                for pc in 0..wp {
                    for dy in 0..p {
                        let row = pr * p + dy;
                        let base = ((fi * self.height + row) * w + pc * p) * c;
                        out[base..base + p * c].copy_from_slice(&src[cursor..cursor + p * c]);
                        cursor += p * c;
                    }
                }
            }
        }
        Ok(Tensor::from_parts(vec![f, self.height, w, c], out))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Segment {
    Reference,
    Source,
    Target,
}

impl Segment {
    pub fn id(self) -> usize {
        match self {
            Segment::Reference => 0,
            Segment::Source => 1,
            Segment::Target => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChunkRole {
    Source,
    Target,
}

/// A block of `c_frames` latent frames.
#[derive(Clone, Debug)]
pub struct LatentChunk<T: Real = f32> {
    pub frames: Tensor<T>,
    pub chunk_index: usize,
    pub role: ChunkRole,
}

impl<T: Real> LatentChunk<T> {
    pub fn new(frames: Tensor<T>, chunk_index: usize, role: ChunkRole) -> Self {
        Self { frames, chunk_index, role }
    }

    pub fn source(frames: Tensor<T>, chunk_index: usize) -> Self {
        Self::new(frames, chunk_index, ChunkRole::Source)
    }

    pub fn target(frames: Tensor<T>, chunk_index: usize) -> Self {
        Self::new(frames, chunk_index, ChunkRole::Target)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenMeta {
    pub segment: Segment,
    pub chunk_index: usize,
    /// Index inside the chunk's raster (frame-major); for the reference, the
    /// index inside frame 0.
    pub position: usize,
}

/// Contiguous run of tokens from one segment of one chunk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub segment: Segment,
    pub chunk_index: usize,
    pub start: usize,
    pub len: usize,
}

#[derive(Clone, Debug)]
pub struct ContextSequence<T: Real = f32> {
    pub geometry: PatchGeometry,
    /// `[L, d_tok]`
    pub tokens: Tensor<T>,
    pub meta: Vec<TokenMeta>,
    pub spans: Vec<Span>,
}

impl<T: Real> ContextSequence<T> {
    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn has_reference(&self) -> bool {
        self.spans.first().is_some_and(|s| s.segment == Segment::Reference)
    }

    /// Chunk indices of the super-chunks in order.
    pub fn chunk_indices(&self) -> Vec<usize> {
        self.spans.iter().filter(|s| s.segment == Segment::Target).map(|s| s.chunk_index).collect()
    }

    pub fn num_chunks(&self) -> usize {
        self.spans.iter().filter(|s| s.segment == Segment::Target).count()
    }

    /// Row indices of every target token, chunk by chunk.
    pub fn target_rows(&self) -> Vec<usize> {
        self.spans
            .iter()
            .filter(|s| s.segment == Segment::Target)
            .flat_map(|s| s.start..s.start + s.len)
            .collect()
    }

    pub fn segment_sequence(&self) -> Vec<(Segment, usize)> {
        self.spans.iter().map(|s| (s.segment, s.chunk_index)).collect()
    }

    /// Undo the flattening: `(reference, sources, targets)`.
    pub fn unflatten(&self) -> Result<(Option<Tensor<T>>, Vec<LatentChunk<T>>, Vec<LatentChunk<T>>)> {
        let mut reference = None;
        let mut sources = Vec::new();
        let mut targets = Vec::new();
        for s in &self.spans {
            let toks = self.tokens.narrow(0, s.start, s.len)?;
            let frames = self.geometry.unpatchify(&toks)?;
            match s.segment {
                Segment::Reference => {
                    let g = &self.geometry;
                    reference = Some(frames.reshape(&[g.height, g.width, g.channels])?);
                }
                Segment::Source => sources.push(LatentChunk::source(frames, s.chunk_index)),
                Segment::Target => targets.push(LatentChunk::target(frames, s.chunk_index)),
            }
        }
        Ok((reference, sources, targets))
    }
}

/// Lay out `[r | x₁ | y₁ | … | x_M | y_M]`. `reference` is `[H, W, C]`; pass
/// `None` for a bare super-chunk run against a KV cache.
pub fn build_context<T: Real>(
    geometry: PatchGeometry,
    reference: Option<&Tensor<T>>,
    sources: &[LatentChunk<T>],
    targets: &[LatentChunk<T>],
) -> Result<ContextSequence<T>> {
    geometry.validate()?;
    if sources.len() != targets.len() {
        return Err(Error::invalid(format!(
            "{} source chunks but {} target chunks",
            sources.len(),
            targets.len()
        )));
    }
    let cshape = geometry.chunk_shape();
    let mut pieces: Vec<Tensor<T>> = Vec::with_capacity(1 + 2 * sources.len());
    let mut meta = Vec::new();
    let mut spans = Vec::new();
    let mut cursor = 0;
    let tpf = geometry.tokens_per_frame();

    if let Some(r) = reference {
        if r.shape() != geometry.frame_shape() {
            return Err(Error::ShapeMismatch {
                op: "build_context(reference)",
                lhs: r.shape().to_vec(),
                rhs: geometry.frame_shape().to_vec(),
            });
        }
        let frames = r.reshape(&[1, geometry.height, geometry.width, geometry.channels])?;
        pieces.push(geometry.patchify(&frames)?);
        meta.extend((0..tpf).map(|p| TokenMeta { segment: Segment::Reference, chunk_index: 0, position: p }));
        spans.push(Span { segment: Segment::Reference, chunk_index: 0, start: 0, len: tpf });
        cursor = tpf;
    }

    let mut prev: Option<usize> = None;
    for (x, y) in sources.iter().zip(targets) {
        if x.chunk_index != y.chunk_index {
            return Err(Error::ChunkShape {
                chunk_index: x.chunk_index,
                message: format!("paired with target chunk {}", y.chunk_index),
            });
        }
        if prev.is_some_and(|p| x.chunk_index <= p) {
            return Err(Error::ChunkShape {
                chunk_index: x.chunk_index,
                message: "chunk indices must be strictly increasing".into(),
            });
        }
        prev = Some(x.chunk_index);
        for (seg, chunk) in [(Segment::Source, x), (Segment::Target, y)] {
            if chunk.frames.shape() != cshape {
                return Err(Error::ChunkShape {
                    chunk_index: chunk.chunk_index,
                    message: format!("{seg:?} frames {:?}, expected {:?}", chunk.frames.shape(), cshape),
                });
            }
            let toks = geometry.patchify(&chunk.frames)?;
            let n = toks.shape()[0];
            meta.extend((0..n).map(|p| TokenMeta { segment: seg, chunk_index: chunk.chunk_index, position: p }));
            spans.push(Span { segment: seg, chunk_index: chunk.chunk_index, start: cursor, len: n });
            cursor += n;
            pieces.push(toks);
        }
    }

    if pieces.is_empty() {
        return Err(Error::invalid("empty context: no reference and no chunks"));
    }
    let refs: Vec<&Tensor<T>> = pieces.iter().collect();
    let tokens = Tensor::concat(&refs, 0)?;
    Ok(ContextSequence { geometry, tokens, meta, spans })
}

/// Boolean `[queries × keys]` attention permission matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    pub queries: usize,
    pub keys: usize,
    pub allowed: Arc<[bool]>,
}

impl AttentionMask {
    pub fn bidirectional(len: usize) -> Self {
        Self { queries: len, keys: len, allowed: vec![true; len * len].into() }
    }

    pub fn is_full(&self) -> bool {
        self.allowed.iter().all(|&a| a)
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.keys + k]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    Bidirectional,
    BlockCausal,
}

pub fn attention_mask<T: Real>(seq: &ContextSequence<T>, mode: AttentionMode) -> AttentionMask {
    match mode {
        AttentionMode::Bidirectional => AttentionMask::bidirectional(seq.len()),
        AttentionMode::BlockCausal => block_causal_mask(seq),
    }
}

/// Super-chunk `i` sees the reference, every super-chunk `j ≤ i`, and itself
/// bidirectionally. Reference tokens see only the reference.
pub fn block_causal_mask<T: Real>(seq: &ContextSequence<T>) -> AttentionMask {
    let l = seq.len();
    let mut allowed = vec![false; l * l];
    for (q, qm) in seq.meta.iter().enumerate() {
        let row = &mut allowed[q * l..(q + 1) * l];
        for (k, km) in seq.meta.iter().enumerate() {
            row[k] = match (qm.segment, km.segment) {
                (_, Segment::Reference) => true,
                (Segment::Reference, _) => false,
                _ => km.chunk_index <= qm.chunk_index,
            };
        }
    }
    AttentionMask { queries: l, keys: l, allowed: allowed.into() }
}

/// Per-token diffusion time.
#[derive(Clone, Debug, PartialEq)]
pub struct TimestepMap {
    pub t: Vec<f64>,
}

/// Reference and source tokens are clean (`t = 0`); target tokens of the
/// `i`-th super-chunk carry `per_chunk_t[i]`.
pub fn timestep_map<T: Real>(seq: &ContextSequence<T>, per_chunk_t: &[f64]) -> Result<TimestepMap> {
    let m = seq.num_chunks();
    if per_chunk_t.len() != m {
        return Err(Error::invalid(format!("{} timesteps for {m} super-chunks", per_chunk_t.len())));
    }
    if let Some(bad) = per_chunk_t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::invalid(format!("timestep {bad} outside [0, 1]")));
    }
    let mut t = vec![0.0; seq.len()];
    let mut i = 0;
    for s in &seq.spans {
        if s.segment == Segment::Target {
            t[s.start..s.start + s.len].fill(per_chunk_t[i]);
            i += 1;
        }
    }
    Ok(TimestepMap { t })
}

#[cfg(test)]
mod tests {
    use super::*;

    // 2×4×4×1 chunks with a 2×2 patch: 4 tokens per frame, 8 per chunk.
    fn geom() -> PatchGeometry {
        PatchGeometry { c_frames: 2, height: 4, width: 4, channels: 1, patch: 2 }
    }

    fn chunk(i: usize, role: ChunkRole, fill: f32) -> LatentChunk {
        let n = geom().chunk_len();
        let data = (0..n).map(|k| fill + k as f32).collect();
        LatentChunk::new(Tensor::new(geom().chunk_shape().to_vec(), data).unwrap(), i, role)
    }

    fn reference() -> Tensor<f32> {
        Tensor::full(&geom().frame_shape(), 0.5)
    }

    fn seq(m: usize) -> ContextSequence {
        let xs: Vec<_> = (0..m).map(|i| chunk(i, ChunkRole::Source, 100.0 * i as f32)).collect();
        let ys: Vec<_> = (0..m).map(|i| chunk(i, ChunkRole::Target, -100.0 * i as f32)).collect();
        build_context(geom(), Some(&reference()), &xs, &ys).unwrap()
    }

    #[test]
    fn one_chunk_counts() {
        let s = seq(1);
        assert_eq!(s.len(), 20);
        let segs: Vec<_> = s.meta.iter().map(|m| m.segment).collect();
        assert!(segs[..4].iter().all(|&x| x == Segment::Reference));
        assert!(segs[4..12].iter().all(|&x| x == Segment::Source));
        assert!(segs[12..].iter().all(|&x| x == Segment::Target));
    }

    #[test]
    fn reference_only() {
        let s: ContextSequence = build_context(geom(), Some(&reference()), &[], &[]).unwrap();
        assert_eq!(s.len(), 4);
    }

    #[test]
    fn three_chunk_segment_order() {
        use Segment::*;
        let s = seq(3);
        assert_eq!(
            s.segment_sequence(),
            vec![(Reference, 0), (Source, 0), (Target, 0), (Source, 1), (Target, 1), (Source, 2), (Target, 2)]
        );
    }

    #[test]
    fn shape_mismatch_names_chunk() {
        let bad = LatentChunk::source(Tensor::<f32>::zeros(&[1, 4, 4, 1]), 7);
        let err = build_context(geom(), None, &[bad], &[chunk(7, ChunkRole::Target, 0.0)]).unwrap_err();
        assert!(matches!(err, Error::ChunkShape { chunk_index: 7, .. }), "{err}");
    }

    #[test]
    fn raster_order_frame_major() {
        // Single 1×4×4×1 frame, token 1 covers rows 0-1, cols 2-3.
        let g = PatchGeometry { c_frames: 1, ..geom() };
        let f = Tensor::<f32>::new(vec![1, 4, 4, 1], (0..16).map(|x| x as f32).collect()).unwrap();
        let t = g.patchify(&f).unwrap();
        assert_eq!(&t.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(g.unpatchify(&t).unwrap(), f);
    }

    #[test]
    fn unflatten_is_identity() {
        let s = seq(2);
        let (r, xs, ys) = s.unflatten().unwrap();
        assert_eq!(r.unwrap(), reference());
        assert_eq!(xs[1].frames, chunk(1, ChunkRole::Source, 100.0).frames);
        assert_eq!(ys[0].frames, chunk(0, ChunkRole::Target, 0.0).frames);
    }

    fn allowed_keys(mask: &AttentionMask, s: &ContextSequence, q: usize) -> Vec<(Segment, usize)> {
        let mut out: Vec<(Segment, usize)> = Vec::new();
        for (k, m) in s.meta.iter().enumerate() {
            if mask.allowed(q, k) && !out.contains(&(m.segment, m.chunk_index)) {
                out.push((m.segment, m.chunk_index));
            }
        }
        out
    }

    #[test]
    fn block_causal_two_chunks() {
        use Segment::*;
        let s = seq(2);
        let mask = block_causal_mask(&s);
        let y1 = s.spans[2].start;
        assert_eq!(allowed_keys(&mask, &s, y1), vec![(Reference, 0), (Source, 0), (Target, 0)]);
        let x2 = s.spans[3].start;
        assert_eq!(
            allowed_keys(&mask, &s, x2),
            vec![(Reference, 0), (Source, 0), (Target, 0), (Source, 1), (Target, 1)]
        );
        assert_eq!(allowed_keys(&mask, &s, 0), vec![(Reference, 0)]);
    }

    #[test]
    fn block_causal_single_chunk_only_restricts_reference() {
        let s = seq(1);
        let mask = block_causal_mask(&s);
        for q in 0..s.len() {
            for k in 0..s.len() {
                let expected = q >= 4 || k < 4;
                assert_eq!(mask.allowed(q, k), expected);
            }
        }
        assert!(attention_mask(&s, AttentionMode::Bidirectional).is_full());
    }

    #[test]
    fn timestep_maps() {
        let s3 = seq(3);
        assert!(timestep_map(&s3, &[0.0, 0.0, 0.0]).unwrap().t.iter().all(|&t| t == 0.0));
        let s1 = seq(1);
        let tm = timestep_map(&s1, &[0.5]).unwrap();
        for (t, m) in tm.t.iter().zip(&s1.meta) {
            assert_eq!(*t, if m.segment == Segment::Target { 0.5 } else { 0.0 });
        }
        let s2 = seq(2);
        let tm = timestep_map(&s2, &[0.9, 0.0]).unwrap();
        let y2 = s2.spans[4];
        assert!(tm.t[y2.start..y2.start + y2.len].iter().all(|&t| t == 0.0));
        assert!(timestep_map(&s1, &[1.5]).is_err());
        assert!(timestep_map(&s1, &[0.1, 0.2]).is_err());
    }
}
