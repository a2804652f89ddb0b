//! Reverse-mode differentiation tape.
//!
//! Every forward operation appends one node; `backward` replays the nodes in
//! exact reverse order, so gradients are deterministic. There is no implicit
//! broadcasting: shape adaptation goes through `repeat`, `concat`, `slice`,
//! `reshape` and `permute`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use super::kernels::{add_into, gemm, gemm_nt, gemm_tn};
use super::resize::interpolation_matrix;
use super::{axis_split, Scalar, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: Scalar = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, Scalar),
    Sigmoid(Var),
    Gelu(Var),
    Sum(Var),
    Mean { x: Var, axis: usize },
    Softmax { x: Var, axis: usize },
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Linear { x: Var, w: Var, b: Option<Var> },
    LayerNorm { x: Var, gain: Var, bias: Var, stats: Vec<(Scalar, Scalar)> },
    Conv1dK3 { x: Var, w: Var, b: Option<Var> },
    TokenMix { w: Var, b: Option<Var>, z: Var },
    Permute { x: Var, axes: Vec<usize> },
    Reshape(Var),
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Repeat { x: Var, axis: usize, n: usize },
    Select { mask: Vec<bool>, a: Var, b: Var },
    Mse(Var, Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<Scalar> },
    SqDist(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<Scalar>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients are only accumulated for leaves created with
    /// `requires_grad` and everything downstream of them.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_raw(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[Scalar]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v)
            .map(|g| Tensor::new(self.shape(v), g.to_vec()).expect("grad shape"))
    }

    /// Clears accumulated gradients so `backward` may run again.
    pub fn reset(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    /// Drops the whole graph.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    fn push_raw(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        debug_assert!(value.is_finite(), "non-finite output from {op:?}");
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, rg, op)
    }

    fn data(&self, v: Var) -> &[Scalar] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(Scalar) -> Scalar) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect()).expect("shape");
        self.push(out, &[x], op)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(Scalar, Scalar) -> Scalar) -> Var {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(self.shape(a), data).expect("shape");
        self.push(out, &[a, b], op)
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, s: Scalar) -> Var {
        self.map(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, Op::Gelu(x), |v| gelu_parts(v).0)
    }

    /// `out = mask ? b : a`, elementwise.
    pub fn select(&mut self, mask: &[bool], a: Var, b: Var) -> Result<Var> {
        self.same_shape("select", a, b)?;
        if mask.len() != self.value(a).numel() {
            return Err(Error::dim("select", self.shape(a), &[mask.len()]));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .zip(mask)
            .map(|((&x, &y), &m)| if m { y } else { x })
            .collect();
        let out = Tensor::new(self.shape(a), data)?;
        Ok(self.push(
            out,
            &[a, b],
            Op::Select {
                mask: mask.to_vec(),
                a,
                b,
            },
        ))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s: Scalar = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), &[x], Op::Sum(x))
    }

    /// Mean along `axis`; the axis is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("mean", &shape, &[axis]));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                add_into(&mut out[o * inner..(o + 1) * inner], &src[base..base + inner]);
            }
        }
        let inv = 1.0 / n as Scalar;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut oshape = shape.clone();
        oshape.remove(axis);
        let t = Tensor::new(&oshape, out)?;
        Ok(self.push(t, &[x], Op::Mean { x, axis }))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", &shape, &[axis]));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let mut m = Scalar::neg_infinity();
                for k in 0..n {
                    m = m.max(src[idx(k)]);
                }
                let mut z = 0.0;
                for k in 0..n {
                    let e = (src[idx(k)] - m).exp();
                    out[idx(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    out[idx(k)] /= z;
                }
            }
        }
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, &[x], Op::Softmax { x, axis }))
    }

    // ---- products ----------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, n, p) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * p];
        gemm(self.data(a), self.data(b), &mut out, m, n, p);
        let t = Tensor::new(&[m, p], out)?;
        Ok(self.push(t, &[a, b], Op::MatMul(a, b)))
    }

    /// Batched product of `[B, m, n]` with `[B, n, p]` (or `[B, p, n]` when
    /// `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::dim("bmm", &sa, &sb));
        }
        let (bs, m, n) = (sa[0], sa[1], sa[2]);
        let p = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; bs * m * p];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..bs {
            let ab = &da[i * m * n..(i + 1) * m * n];
            let bb = &db[i * n * p..(i + 1) * n * p];
            let ob = &mut out[i * m * p..(i + 1) * m * p];
            if trans_b {
                gemm_nt(ab, bb, ob, m, p, n);
            } else {
                gemm(ab, bb, ob, m, n, p);
            }
        }
        let t = Tensor::new(&[bs, m, p], out)?;
        Ok(self.push(t, &[a, b], Op::Bmm { a, b, trans_b }))
    }

    /// `x · w + b` over the last axis of `x`, with `w: [in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 || sx.last() != Some(&sw[0]) {
            return Err(Error::dim("linear", &sx, &sw));
        }
        let (din, dout) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::dim("linear.bias", self.shape(b), &[dout]));
            }
        }
        let rows = self.value(x).numel() / din;
        let mut out = vec![0.0; rows * dout];
        if let Some(b) = b {
            let bias = self.data(b);
            for r in 0..rows {
                out[r * dout..(r + 1) * dout].copy_from_slice(bias);
            }
        }
        gemm(self.data(x), self.data(w), &mut out, rows, din, dout);
        let mut oshape = sx;
        *oshape.last_mut().unwrap() = dout;
        let t = Tensor::new(&oshape, out)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        Ok(self.push(t, &ins, Op::Linear { x, w, b }))
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap_or(&0);
        if d == 0 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim("layer_norm", &sx, self.shape(gain)));
        }
        let src = self.data(x);
        let (g, bb) = (self.data(gain), self.data(bias));
        let rows = src.len() / d;
        let mut out = vec![0.0; src.len()];
        let mut stats = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mu = row.iter().sum::<Scalar>() / d as Scalar;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<Scalar>() / d as Scalar;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mu) * rstd * g[j] + bb[j];
            }
            stats.push((mu, rstd));
        }
        let t = Tensor::new(&sx, out)?;
        Ok(self.push(
            t,
            &[x, gain, bias],
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            },
        ))
    }

    /// Kernel-3 convolution along axis 1 of `x: [B, L, V, C]` with zero
    /// padding; `w: [3, C, O]` taps are applied to positions l-1, l, l+1.
    pub fn conv1d_k3(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 3 || sw[0] != 3 || sw[1] != sx[3] {
            return Err(Error::dim("conv1d_k3", &sx, &sw));
        }
        let (bs, l, v, c, o) = (sx[0], sx[1], sx[2], sx[3], sw[2]);
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::dim("conv1d_k3.bias", self.shape(b), &[o]));
            }
        }
        let mut out = vec![0.0; bs * l * v * o];
        if let Some(b) = b {
            let bias = self.data(b);
            for row in out.chunks_mut(o) {
                row.copy_from_slice(bias);
            }
        }
        let (dx, dw) = (self.data(x), self.data(w));
        for bi in 0..bs {
            for t in 0..l {
                let ob = &mut out[(bi * l + t) * v * o..(bi * l + t + 1) * v * o];
                for tap in 0..3 {
                    let src = t as isize + tap as isize - 1;
                    if src < 0 || src >= l as isize {
                        continue;
                    }
                    let s = src as usize;
                    let xb = &dx[(bi * l + s) * v * c..(bi * l + s + 1) * v * c];
                    gemm(xb, &dw[tap * c * o..(tap + 1) * c * o], ob, v, c, o);
                }
            }
        }
        let t = Tensor::new(&[bs, l, v, o], out)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        Ok(self.push(t, &ins, Op::Conv1dK3 { x, w, b }))
    }

    /// Mixes along axis 1 of `z: [B, I, ...]` with a shared `w: [O, I]`:
    /// `out[b] = w · z[b] (+ bias broadcast over trailing axes)`.
    pub fn token_mix(&mut self, w: Var, b: Option<Var>, z: Var) -> Result<Var> {
        let sz = self.shape(z).to_vec();
        let sw = self.shape(w).to_vec();
        if sz.len() < 2 || sw.len() != 2 || sw[1] != sz[1] {
            return Err(Error::dim("token_mix", &sw, &sz));
        }
        let (bs, i, o) = (sz[0], sz[1], sw[0]);
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::dim("token_mix.bias", self.shape(b), &[o]));
            }
        }
        let r: usize = sz[2..].iter().product();
        let mut out = vec![0.0; bs * o * r];
        if let Some(b) = b {
            let bias = self.data(b);
            for (k, chunk) in out.chunks_mut(r).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bias[k % o]);
            }
        }
        let (dw, dz) = (self.data(w), self.data(z));
        for bi in 0..bs {
            gemm(
                dw,
                &dz[bi * i * r..(bi + 1) * i * r],
                &mut out[bi * o * r..(bi + 1) * o * r],
                o,
                i,
                r,
            );
        }
        let mut oshape = sz;
        oshape[1] = o;
        let t = Tensor::new(&oshape, out)?;
        let mut ins = vec![w, z];
        ins.extend(b);
        Ok(self.push(t, &ins, Op::TokenMix { w, b, z }))
    }

    /// Differentiable corner-aligned bilinear resize of a matrix.
    pub fn bilinear_resize(&mut self, w: Var, rows: usize, cols: usize) -> Result<Var> {
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 || rows == 0 || cols == 0 {
            return Err(Error::dim("bilinear_resize", &sw, &[rows, cols]));
        }
        if sw == [rows, cols] {
            return Ok(w);
        }
        let r = interpolation_matrix(rows, sw[0])?;
        let c = interpolation_matrix(cols, sw[1])?;
        let ct = transpose2(&c);
        let r = self.constant(r);
        let ct = self.constant(ct);
        let left = self.matmul(r, w)?;
        self.matmul(left, ct)
    }

    // ---- layout ------------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, &[x], Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        if axes.len() != sx.len() || axes.iter().any(|&a| a >= sx.len() || core::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim("permute", &sx, axes));
        }
        let out = permute_data(self.data(x), &sx, axes);
        let oshape: Vec<usize> = axes.iter().map(|&a| sx[a]).collect();
        let t = Tensor::new(&oshape, out)?;
        Ok(self.push(
            t,
            &[x],
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        if xs.len() == 1 {
            return Ok(first);
        }
        let s0 = self.shape(first).to_vec();
        if axis >= s0.len() {
            return Err(Error::dim("concat", &s0, &[axis]));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == s0.len()
                && s.iter()
                    .zip(&s0)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", &s0, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&s0, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let n = self.shape(v)[axis];
                out.extend_from_slice(&self.data(v)[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut oshape = s0;
        oshape[axis] = total;
        let t = Tensor::new(&oshape, out)?;
        Ok(self.push(
            t,
            xs,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || len == 0 || start + len > sx[axis] {
            return Err(Error::dim("slice", &sx, &[axis, start, len]));
        }
        if start == 0 && len == sx[axis] {
            return Ok(x);
        }
        let (outer, n, inner) = axis_split(&sx, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut oshape = sx;
        oshape[axis] = len;
        let t = Tensor::new(&oshape, out)?;
        Ok(self.push(t, &[x], Op::Slice { x, axis, start }))
    }

    /// Splits `x` along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || sizes.iter().sum::<usize>() != sx[axis] {
            return Err(Error::dim("split", &sx, sizes));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &n in sizes {
            out.push(self.slice(x, axis, start, n)?);
            start += n;
        }
        Ok(out)
    }

    /// Tiles a size-1 axis `n` times.
    pub fn repeat(&mut self, x: Var, axis: usize, n: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || sx[axis] != 1 || n == 0 {
            return Err(Error::dim("repeat", &sx, &[axis, n]));
        }
        if n == 1 {
            return Ok(x);
        }
        let (outer, _, inner) = axis_split(&sx, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                out.extend_from_slice(&src[o * inner..(o + 1) * inner]);
            }
        }
        let mut oshape = sx;
        oshape[axis] = n;
        let t = Tensor::new(&oshape, out)?;
        Ok(self.push(t, &[x], Op::Repeat { x, axis, n }))
    }

    // ---- losses ------------------------------------------------------------

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let n = self.value(a).numel() as Scalar;
        let s: Scalar = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(Tensor::scalar(s / n), &[a, b], Op::Mse(a, b)))
    }

    /// Mean cross-entropy of `logits: [N, C]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != labels.len() {
            return Err(Error::dim("cross_entropy", &sl, &[labels.len()]));
        }
        let (n, c) = (sl[0], sl[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Contract(format!("label {bad} out of range for {c} classes")));
        }
        let src = self.data(logits);
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &src[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(Scalar::neg_infinity(), Scalar::max);
            let z: Scalar = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            loss += lse - row[labels[i]];
        }
        Ok(self.push(
            Tensor::scalar(loss / n as Scalar),
            &[logits],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Pairwise squared Euclidean distances between rows: `[N, D] × [C, D] → [N, C]`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::dim("sq_dist", &sa, &sb));
        }
        let (n, c, d) = (sa[0], sb[0], sa[1]);
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                out[i * c + j] = da[i * d..(i + 1) * d]
                    .iter()
                    .zip(&db[j * d..(j + 1) * d])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
            }
        }
        let t = Tensor::new(&[n, c], out)?;
        Ok(self.push(t, &[a, b], Op::SqDist(a, b)))
    }

    // ---- backward ----------------------------------------------------------

    /// Populates gradients of the scalar `loss` in every reachable node that
    /// requires them. A second call needs [`Tape::reset`] first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State("backward called twice without reset".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad || matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(idx, &g);
            self.nodes[idx].grad = Some(g);
            for (v, cg) in contributions {
                let node = &mut self.nodes[v.0];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => add_into(acc, &cg),
                    None => node.grad = Some(cg),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, idx: usize, g: &[Scalar]) -> Vec<(Var, Vec<Scalar>)> {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                res.push((*a, g.to_vec()));
                res.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.to_vec()));
                res.push((*b, g.iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                if self.wants(*a) {
                    res.push((*a, g.iter().zip(db).map(|(x, y)| x * y).collect()));
                }
                if self.wants(*b) {
                    res.push((*b, g.iter().zip(da).map(|(x, y)| x * y).collect()));
                }
            }
            Op::Scale(x, s) => res.push((*x, g.iter().map(|v| v * s).collect())),
            Op::Sigmoid(x) => res.push((
                *x,
                g.iter().zip(out).map(|(gv, y)| gv * y * (1.0 - y)).collect(),
            )),
            Op::Gelu(x) => res.push((
                *x,
                g.iter()
                    .zip(self.data(*x))
                    .map(|(gv, &v)| gv * gelu_parts(v).1)
                    .collect(),
            )),
            Op::Sum(x) => res.push((*x, vec![g[0]; self.value(*x).numel()])),
            Op::Mean { x, axis } => {
                let (outer, n, inner) = axis_split(self.shape(*x), *axis);
                let inv = 1.0 / n as Scalar;
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        let base = (o * n + k) * inner;
                        for i in 0..inner {
                            dx[base + i] = g[o * inner + i] * inv;
                        }
                    }
                }
                res.push((*x, dx));
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_split(self.shape(*x), *axis);
                let mut dx = vec![0.0; out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let dot: Scalar = (0..n).map(|k| g[idx(k)] * out[idx(k)]).sum();
                        for k in 0..n {
                            dx[idx(k)] = out[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                res.push((*x, dx));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, n, p) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let mut da = vec![0.0; m * n];
                    gemm_nt(g, self.data(*b), &mut da, m, n, p);
                    res.push((*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; n * p];
                    gemm_tn(self.data(*a), g, &mut db, m, n, p);
                    res.push((*b, db));
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bs, m, n) = (sa[0], sa[1], sa[2]);
                let p = if *trans_b { sb[1] } else { sb[2] };
                let (xa, xb) = (self.data(*a), self.data(*b));
                let mut da = self.wants(*a).then(|| vec![0.0; bs * m * n]);
                let mut db = self.wants(*b).then(|| vec![0.0; bs * n * p]);
                for i in 0..bs {
                    let gb = &g[i * m * p..(i + 1) * m * p];
                    let ab = &xa[i * m * n..(i + 1) * m * n];
                    let bb = &xb[i * n * p..(i + 1) * n * p];
                    if let Some(da) = da.as_mut() {
                        let o = &mut da[i * m * n..(i + 1) * m * n];
                        if *trans_b {
                            gemm(gb, bb, o, m, p, n);
                        } else {
                            gemm_nt(gb, bb, o, m, n, p);
                        }
                    }
                    if let Some(db) = db.as_mut() {
                        let o = &mut db[i * n * p..(i + 1) * n * p];
                        if *trans_b {
                            gemm_tn(gb, ab, o, m, p, n);
                        } else {
                            gemm_tn(ab, gb, o, m, n, p);
                        }
                    }
                }
                res.extend(da.map(|d| (*a, d)));
                res.extend(db.map(|d| (*b, d)));
            }
            Op::Linear { x, w, b } => {
                let sw = self.shape(*w);
                let (din, dout) = (sw[0], sw[1]);
                let rows = g.len() / dout;
                if self.wants(*x) {
                    let mut dx = vec![0.0; rows * din];
                    gemm_nt(g, self.data(*w), &mut dx, rows, din, dout);
                    res.push((*x, dx));
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; din * dout];
                    gemm_tn(self.data(*x), g, &mut dw, rows, din, dout);
                    res.push((*w, dw));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![0.0; dout];
                        for row in g.chunks(dout) {
                            add_into(&mut db, row);
                        }
                        res.push((*b, db));
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            } => {
                let src = self.data(*x);
                let gv = self.data(*gain);
                let d = gv.len();
                let mut dx = vec![0.0; src.len()];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for (r, &(mu, rstd)) in stats.iter().enumerate() {
                    let row = &src[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    for j in 0..d {
                        xhat[j] = (row[j] - mu) * rstd;
                        dxhat[j] = grow[j] * gv[j];
                        dg[j] += grow[j] * xhat[j];
                        db[j] += grow[j];
                    }
                    let m1 = dxhat.iter().sum::<Scalar>() / d as Scalar;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<Scalar>() / d as Scalar;
                    for j in 0..d {
                        dx[r * d + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                res.push((*x, dx));
                res.push((*gain, dg));
                res.push((*bias, db));
            }
            Op::Conv1dK3 { x, w, b } => {
                let sx = self.shape(*x);
                let (bs, l, v, c) = (sx[0], sx[1], sx[2], sx[3]);
                let o = self.shape(*w)[2];
                let (dxs, dws) = (self.data(*x), self.data(*w));
                let mut dx = self.wants(*x).then(|| vec![0.0; dxs.len()]);
                let mut dw = self.wants(*w).then(|| vec![0.0; dws.len()]);
                for bi in 0..bs {
                    for t in 0..l {
                        let gb = &g[(bi * l + t) * v * o..(bi * l + t + 1) * v * o];
                        for tap in 0..3 {
                            let src = t as isize + tap as isize - 1;
                            if src < 0 || src >= l as isize {
                                continue;
                            }
                            let s = src as usize;
                            let xr = (bi * l + s) * v * c..(bi * l + s + 1) * v * c;
                            let wr = tap * c * o..(tap + 1) * c * o;
                            if let Some(dx) = dx.as_mut() {
                                gemm_nt(gb, &dws[wr.clone()], &mut dx[xr.clone()], v, c, o);
                            }
                            if let Some(dw) = dw.as_mut() {
                                gemm_tn(&dxs[xr], gb, &mut dw[wr], v, c, o);
                            }
                        }
                    }
                }
                res.extend(dx.map(|d| (*x, d)));
                res.extend(dw.map(|d| (*w, d)));
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![0.0; o];
                        for row in g.chunks(o) {
                            add_into(&mut db, row);
                        }
                        res.push((*b, db));
                    }
                }
            }
            Op::TokenMix { w, b, z } => {
                let sz = self.shape(*z);
                let (bs, i) = (sz[0], sz[1]);
                let o = self.shape(*w)[0];
                let r: usize = sz[2..].iter().product();
                let (dws, dzs) = (self.data(*w), self.data(*z));
                let mut dw = self.wants(*w).then(|| vec![0.0; o * i]);
                let mut dz = self.wants(*z).then(|| vec![0.0; dzs.len()]);
                for bi in 0..bs {
                    let gb = &g[bi * o * r..(bi + 1) * o * r];
                    let zr = bi * i * r..(bi + 1) * i * r;
                    if let Some(dw) = dw.as_mut() {
                        gemm_nt(gb, &dzs[zr.clone()], dw, o, i, r);
                    }
                    if let Some(dz) = dz.as_mut() {
                        gemm_tn(dws, gb, &mut dz[zr], o, i, r);
                    }
                }
                res.extend(dw.map(|d| (*w, d)));
                res.extend(dz.map(|d| (*z, d)));
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![0.0; o];
                        for (k, chunk) in g.chunks(r).enumerate() {
                            db[k % o] += chunk.iter().sum::<Scalar>();
                        }
                        res.push((*b, db));
                    }
                }
            }
            Op::Permute { x, axes } => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                res.push((*x, permute_data(g, node.value.shape(), &inv)));
            }
            Op::Reshape(x) => res.push((*x, g.to_vec())),
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut start = 0;
                for &v in xs {
                    let n = self.shape(v)[*axis];
                    if self.wants(v) {
                        let mut dv = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let base = (o * total + start) * inner;
                            dv.extend_from_slice(&g[base..base + n * inner]);
                        }
                        res.push((v, dv));
                    }
                    start += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = axis_split(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                res.push((*x, dx));
            }
            Op::Repeat { x, axis, n } => {
                let (outer, _, inner) = axis_split(self.shape(*x), *axis);
                let mut dx = vec![0.0; outer * inner];
                for o in 0..outer {
                    for k in 0..*n {
                        let base = (o * n + k) * inner;
                        add_into(&mut dx[o * inner..(o + 1) * inner], &g[base..base + inner]);
                    }
                }
                res.push((*x, dx));
            }
            Op::Select { mask, a, b } => {
                res.push((*a, g.iter().zip(mask).map(|(&v, &m)| if m { 0.0 } else { v }).collect()));
                res.push((*b, g.iter().zip(mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect()));
            }
            Op::Mse(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                let k = 2.0 * g[0] / da.len() as Scalar;
                let diff: Vec<Scalar> = da.iter().zip(db).map(|(x, y)| k * (x - y)).collect();
                if self.wants(*b) {
                    res.push((*b, diff.iter().map(|v| -v).collect()));
                }
                res.push((*a, diff));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.shape(*logits)[1];
                let k = g[0] / labels.len() as Scalar;
                let mut dl: Vec<Scalar> = probs.iter().map(|p| p * k).collect();
                for (i, &y) in labels.iter().enumerate() {
                    dl[i * c + y] -= k;
                }
                res.push((*logits, dl));
            }
            Op::SqDist(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (n, c, d) = (sa[0], sb[0], sa[1]);
                let (xa, xb) = (self.data(*a), self.data(*b));
                let mut da = vec![0.0; n * d];
                let mut db = vec![0.0; c * d];
                for i in 0..n {
                    for j in 0..c {
                        let gij = 2.0 * g[i * c + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            let diff = gij * (xa[i * d + k] - xb[j * d + k]);
                            da[i * d + k] += diff;
                            db[j * d + k] -= diff;
                        }
                    }
                }
                res.push((*a, da));
                res.push((*b, db));
            }
        }
        res
    }
}

pub(crate) fn sigmoid(v: Scalar) -> Scalar {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// GELU value and derivative (tanh approximation).
fn gelu_parts(x: Scalar) -> (Scalar, Scalar) {
    const C: Scalar = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let value = 0.5 * x * (1.0 + t);
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    let deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (value, deriv)
}

fn transpose2(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    Tensor::from_fn(&[c, r], |i| t.data()[(i % r) * c + i / r])
}

fn permute_data(src: &[Scalar], shape: &[usize], axes: &[usize]) -> Vec<Scalar> {
    let rank = shape.len();
    let mut strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let oshape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let ostrides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..src.len() {
        out.push(src[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += ostrides[d];
            if idx[d] < oshape[d] {
                break;
            }
            off -= ostrides[d] * oshape[d];
            idx[d] = 0;
        }
    }
    out
}
