//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in execution order, so the node list is
//! already topologically sorted and [`Graph::backward`] is a single reverse
//! sweep. Nodes that cannot reach a gradient-requiring leaf keep their value
//! but drop their op record, which keeps inference graphs lean.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, split_axis, transpose2, Real, Tensor};

/// Fill value used by [`Graph::masked_fill`]. Finite, so a fully masked row
/// still softmaxes to a uniform distribution.
pub const MASK_SENTINEL: f64 = -1.0e9;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
enum Op<T: Real> {
    /// Leaf, constant, detached copy, or a node nobody differentiates through.
    None,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    Reshape(Var),
    Transpose(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    Silu(Var),
    Sum(Var),
    Mean(Var),
    MaskedFill { input: Var, mask: Arc<[bool]> },
    GatherRows { table: Var, idx: Arc<[usize]> },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-threaded operation tape. One training step owns one graph.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    record: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), record: true }
    }

    /// A graph that never records ops; every leaf behaves as a constant.
    pub fn no_grad() -> Self {
        Self { nodes: Vec::new(), record: false }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = self.record && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::None };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf (a parameter or an input we want gradients for).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let requires_grad = self.record;
        self.nodes.push(Node { value: t, op: Op::None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::None, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Same value, no gradient path back to `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// `x[.., n] + b[n]`, the only broadcast besides scalar scaling.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        let n = *sx.last().expect("non-empty shape");
        if sb != [n] {
            return Err(Error::ShapeMismatch { op: "add_bias", lhs: sx.to_vec(), rhs: sb.to_vec() });
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let shape = sx.to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddBias(x, b), &[x, b]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::invalid(format!("transpose expects a matrix, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let out = transpose2(self.value(a).data(), r, c);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(a), &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat(&tensors, axis)?;
        Ok(self.push(out, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).narrow(axis, start, len)?;
        Ok(self.push(out, Op::Slice { input: a, axis, start }, &[a]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = *x.shape().last().expect("non-empty shape");
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().copied().fold(row[0], T::max);
            let mut s = T::ZERO;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            let inv = T::ONE / s;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        let shape = x.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Softmax(a), &[a])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let n = *sx.last().expect("non-empty shape");
        for p in [gamma, beta] {
            if self.shape(p) != [n] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: sx.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let eps = T::from_f64(eps);
        let inv_n = T::from_f64(1.0 / n as f64);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let xs = self.value(x).data();
        let rows = xs.len() / n;
        let mut xhat = vec![T::ZERO; xs.len()];
        let mut rstd = vec![T::ZERO; rows];
        let mut out = vec![T::ZERO; xs.len()];
        for r in 0..rows {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let rs = T::ONE / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let op = Op::LayerNorm { x, gamma, beta, xhat, rstd };
        Ok(self.push(Tensor::from_parts(sx, out), op, &[x, gamma, beta]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::from_f64(GELU_C);
        let k = T::from_f64(GELU_A);
        let half = T::from_f64(0.5);
        let out = self.value(a).map(|x| half * x * (T::ONE + (c * (x + k * x * x * x)).tanh()));
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(out, Op::Silu(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s: T = x.data().iter().copied().sum();
        let m = s / T::from_f64(x.numel() as f64);
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Keep entries where `mask` is true; replace the rest with
    /// [`MASK_SENTINEL`].
    pub fn masked_fill(&mut self, a: Var, mask: Arc<[bool]>) -> Result<Var> {
        let x = self.value(a);
        if mask.len() != x.numel() {
            return Err(Error::ShapeMismatch {
                op: "masked_fill",
                lhs: x.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let fill = T::from_f64(MASK_SENTINEL);
        let out: Vec<T> =
            x.data().iter().zip(mask.iter()).map(|(&v, &keep)| if keep { v } else { fill }).collect();
        let shape = x.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::MaskedFill { input: a, mask }, &[a]))
    }

    /// Row lookup: `out[i] = table[idx[i]]`.
    pub fn gather_rows(&mut self, table: Var, idx: Arc<[usize]>) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(Error::invalid(format!("gather_rows expects a matrix, got {:?}", t.shape())));
        }
        let (rows, n) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!("gather_rows index {bad} out of {rows} rows")));
        }
        if idx.is_empty() {
            return Err(Error::invalid("gather_rows with no indices"));
        }
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx.iter() {
            out.extend_from_slice(&t.data()[i * n..(i + 1) * n]);
        }
        let shape = vec![idx.len(), n];
        Ok(self.push(Tensor::from_parts(shape, out), Op::GatherRows { table, idx }, &[table]))
    }

    /// Mean squared difference, a convenience over `sub`, `mul`, `mean`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::ONE]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::None) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            // Interior nodes do not keep their gradient.
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(contrib) {
                    *a += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, op: &Op<T>, out: &Tensor<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match op {
            Op::None => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.requires_grad(*a) {
                    let da = matmul_nt(g, self.value(*b).data(), m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let db = matmul_tn(self.value(*a).data(), g, m, k, n);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.iter().zip(vb).map(|(&x, &y)| x * y).collect());
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.iter().zip(va).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, g.iter().map(|&x| x * *s).collect());
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.to_vec());
                if self.requires_grad(*b) {
                    let n = self.shape(*b)[0];
                    let mut db = vec![T::ZERO; n];
                    for row in g.chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Transpose(a) => {
                let s = self.shape(*a);
                // g is [c, r]; transposing back gives [r, c].
                self.accumulate(grads, *a, transpose2(g, s[1], s[0]));
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = split_axis(out.shape(), *axis);
                let total = out.shape()[*axis];
                let mut offset = 0;
                for p in parts {
                    let d = self.shape(*p)[*axis];
                    if self.requires_grad(*p) {
                        let mut dp = Vec::with_capacity(outer * d * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            dp.extend_from_slice(&g[base..base + d * inner]);
                        }
                        self.accumulate(grads, *p, dp);
                    }
                    offset += d;
                }
            }
            Op::Slice { input, axis, start } => {
                let si = self.shape(*input);
                let (outer, dim, inner) = split_axis(si, *axis);
                let len = out.shape()[*axis];
                let mut di = vec![T::ZERO; si.iter().product()];
                for o in 0..outer {
                    let dst = o * dim * inner + start * inner;
                    let src = o * len * inner;
                    di[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                self.accumulate(grads, *input, di);
            }
            Op::Softmax(a) => {
                let n = *out.shape().last().expect("non-empty");
                let y = out.data();
                let mut dx = vec![T::ZERO; y.len()];
                for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                    let s: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - s);
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = self.shape(*gamma)[0];
                let gam = self.value(*gamma).data();
                if self.requires_grad(*gamma) {
                    let mut dg = vec![T::ZERO; n];
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    self.accumulate(grads, *gamma, dg);
                }
                if self.requires_grad(*beta) {
                    let mut db = vec![T::ZERO; n];
                    for gr in g.chunks(n) {
                        for j in 0..n {
                            db[j] += gr[j];
                        }
                    }
                    self.accumulate(grads, *beta, db);
                }
                if self.requires_grad(*x) {
                    let inv_n = T::from_f64(1.0 / n as f64);
                    let mut dx = vec![T::ZERO; g.len()];
                    for r in 0..rstd.len() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut m1 = T::ZERO;
                        let mut m2 = T::ZERO;
                        for j in 0..n {
                            let dh = gr[j] * gam[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 *= inv_n;
                        m2 *= inv_n;
                        for j in 0..n {
                            let dh = gr[j] * gam[j];
                            dx[r * n + j] = rstd[r] * (dh - m1 - hr[j] * m2);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Gelu(a) => {
                let c = T::from_f64(GELU_C);
                let k = T::from_f64(GELU_A);
                let half = T::from_f64(0.5);
                let three_k = T::from_f64(3.0 * GELU_A);
                let x = self.value(*a).data();
                let dx = x
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| {
                        let th = (c * (x + k * x * x * x)).tanh();
                        let d = half * (T::ONE + th)
                            + half * x * (T::ONE - th * th) * c * (T::ONE + three_k * x * x);
                        gv * d
                    })
                    .collect();
                self.accumulate(grads, *a, dx);
            }
            Op::Silu(a) => {
                let x = self.value(*a).data();
                let dx = x
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| {
                        let s = sigmoid(x);
                        gv * s * (T::ONE + x * (T::ONE - s))
                    })
                    .collect();
                self.accumulate(grads, *a, dx);
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                let v = g[0] / T::from_f64(n as f64);
                self.accumulate(grads, *a, vec![v; n]);
            }
            Op::MaskedFill { input, mask } => {
                let dx = g.iter().zip(mask.iter()).map(|(&v, &keep)| if keep { v } else { T::ZERO }).collect();
                self.accumulate(grads, *input, dx);
            }
            Op::GatherRows { table, idx } => {
                let st = self.shape(*table);
                let n = st[1];
                let mut dt = vec![T::ZERO; st[0] * n];
                for (row, &i) in g.chunks(n).zip(idx.iter()) {
                    for (d, &v) in dt[i * n..(i + 1) * n].iter_mut().zip(row) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *table, dt);
            }
        }
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::ONE / (T::ONE + (-x).exp())
}

/// Gradients produced by [`Graph::backward`], keyed by [`Var`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf, or `None` when no path reached it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a leaf as a tensor, zero-filled when unreached.
    pub fn get_or_zeros(&self, g: &Graph<T>, v: Var) -> Tensor<T> {
        let shape = g.value(v).shape().to_vec();
        match self.get(v) {
            Some(d) => Tensor::from_parts(shape, d.to_vec()),
            None => Tensor::zeros(&shape),
        }
    }
}

/// Central finite differences `(f(x+h) - f(x-h)) / 2h` per coordinate.
pub fn finite_difference_gradient(
    mut f: impl FnMut(&[f64]) -> f64,
    point: &[f64],
    step: f64,
) -> Result<Vec<f64>> {
    if point.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("finite-difference point".into()));
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {step}")));
    }
    let mut x = point.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let fp = f(&x);
        x[i] = orig - step;
        let fm = f(&x);
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("f evaluated near coordinate {i}")));
        }
        grad.push((fp - fm) / (2.0 * step));
    }
    Ok(grad)
}
