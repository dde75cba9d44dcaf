use super::kernel::{self, MatRef};
use super::ops;
use super::{axis_geometry, check_axis, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    Scale(Var, f32),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        means: Vec<f32>,
        rstds: Vec<f32>,
    },
    Softmax(Var, usize),
    LogSoftmax(Var),
    LogClamp(Var, f32),
    L2Normalize(Var, Vec<f32>),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat(Vec<Var>, usize),
    ExpandLeading(Var),
    Reshape(Var),
    Attention {
        qkv: Var,
        heads: usize,
        probs: Vec<f32>,
    },
    ScaleSamples(Var, Vec<f32>),
}

struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

/// Ordered record of executed operations.
///
/// A tape is single-writer. Values pushed with [`Tape::leaf`] take their
/// gradient flag from [`Tensor::requires_grad`]; every derived value needs a
/// gradient iff one of its inputs does. [`Tape::backward`] walks the record
/// in exact reverse order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Moves the gradient of `v` out of the map.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: value.with_requires_grad(needs_grad),
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records an input. It receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let g = t.requires_grad();
        self.push(t, Op::Leaf, g)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Stop-gradient: a copy of `x` with no path back to it.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.push(v, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), g))
    }

    /// `a·bᵀ` with `b: [n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul_t(self.value(a), self.value(b))?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMulT(a, b), g))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f32, f32) -> f32) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape().to_vec(), data).expect("shape preserved");
        let g = self.any_grad(&[a, b]);
        self.push(out, op, g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// `x + y` where `y`'s shape is a trailing suffix of `x`'s shape.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ys = self.shape(y);
        if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != *ys {
            return Err(Error::shape("add_broadcast", xs, ys));
        }
        let yv = self.value(y).data();
        let w = yv.len();
        let mut data = self.value(x).data().to_vec();
        for chunk in data.chunks_exact_mut(w) {
            for (c, b) in chunk.iter_mut().zip(yv) {
                *c += b;
            }
        }
        let out = Tensor::new(xs.to_vec(), data)?;
        let g = self.any_grad(&[x, y]);
        Ok(self.push(out, Op::AddBroadcast(x, y), g))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * c).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("shape preserved");
        let g = self.needs_grad(x);
        self.push(out, Op::Scale(x, c), g)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = ops::gelu(self.value(x));
        let g = self.needs_grad(x);
        self.push(out, Op::Gelu(x), g)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let (out, means, rstds) =
            ops::layer_norm_with_stats(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let g = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                means,
                rstds,
            },
            g,
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = ops::softmax(self.value(x), axis)?;
        let g = self.needs_grad(x);
        Ok(self.push(out, Op::Softmax(x, axis), g))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = *xv
            .shape()
            .last()
            .ok_or_else(|| Error::dim("log_softmax", "scalar input"))?;
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f32>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let g = self.needs_grad(x);
        Ok(self.push(out, Op::LogSoftmax(x), g))
    }

    /// `ln(max(x, floor))`; no gradient flows where the clamp is active.
    pub fn log_clamp(&mut self, x: Var, floor: f32) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v.max(floor).ln()).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("shape preserved");
        let g = self.needs_grad(x);
        self.push(out, Op::LogClamp(x, floor), g)
    }

    /// Unit-normalizes the last axis.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let (out, norms) = ops::l2_normalize_with_norms(self.value(x))?;
        let g = self.needs_grad(x);
        Ok(self.push(out, Op::L2Normalize(x, norms), g))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = ops::sum_axis(self.value(x), axis)?;
        let g = self.needs_grad(x);
        Ok(self.push(out, Op::SumAxis(x, axis), g))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = ops::mean_axis(self.value(x), axis)?;
        let g = self.needs_grad(x);
        Ok(self.push(out, Op::MeanAxis(x, axis), g))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f32 = self.value(x).data().iter().sum();
        let g = self.needs_grad(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), g)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s: f32 = xv.data().iter().sum::<f32>() / xv.numel() as f32;
        let g = self.needs_grad(x);
        self.push(Tensor::scalar(s), Op::MeanAll(x), g)
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        check_axis("narrow", &xs, axis)?;
        if len == 0 || start + len > xs[axis] {
            return Err(Error::dim(
                "narrow",
                format!("range {start}..{} out of axis {axis} of {xs:?}", start + len),
            ));
        }
        let (outer, n, inner) = axis_geometry(&xs, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        let out = Tensor::new(shape, data)?;
        let g = self.needs_grad(x);
        Ok(self.push(out, Op::Narrow { x, axis, start }, g))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or(Error::EmptyInput("concat"))?;
        let base_shape = self.shape(*first).to_vec();
        check_axis("concat", &base_shape, axis)?;
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base_shape.len()
                || s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", &base_shape, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_geometry(&base_shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                let src = self.value(v).data();
                data.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base_shape;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        let g = self.any_grad(xs);
        Ok(self.push(out, Op::Concat(xs.to_vec(), axis), g))
    }

    /// Repeats `x` `n` times along a new leading axis.
    pub fn expand_leading(&mut self, x: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return Err(Error::EmptyInput("expand_leading"));
        }
        let xv = self.value(x);
        let mut shape = vec![n];
        shape.extend_from_slice(xv.shape());
        let out = Tensor::new(shape, xv.data().repeat(n))?;
        let g = self.needs_grad(x);
        Ok(self.push(out, Op::ExpandLeading(x), g))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        let g = self.needs_grad(x);
        Ok(self.push(out, Op::Reshape(x), g))
    }

    /// Multiplies each leading-axis slice `i` of `x` by `factors[i]`.
    pub fn scale_samples(&mut self, x: Var, factors: Vec<f32>) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != factors.len() {
            return Err(Error::dim(
                "scale_samples",
                format!("{} factors for {:?}", factors.len(), xv.shape()),
            ));
        }
        let w = xv.numel() / factors.len();
        let mut data = xv.data().to_vec();
        for (chunk, f) in data.chunks_exact_mut(w).zip(&factors) {
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let g = self.needs_grad(x);
        Ok(self.push(out, Op::ScaleSamples(x, factors), g))
    }

    /// Fused multi-head scaled dot-product self-attention.
    ///
    /// `qkv: [b, t, 3d]` holds queries, keys and values side by side, each
    /// split into `heads` contiguous column groups. Returns `[b, t, d]`.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let s = self.shape(qkv).to_vec();
        if s.len() != 3 || heads == 0 || s[2] % (3 * heads) != 0 {
            return Err(Error::dim(
                "attention",
                format!("qkv shape {s:?} incompatible with {heads} heads"),
            ));
        }
        let (b, t, d) = (s[0], s[1], s[2] / 3);
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let src = self.value(qkv).data();
        let mut out = vec![0.0; b * t * d];
        let mut probs = vec![0.0; b * heads * t * t];
        let row = 3 * d;
        for bi in 0..b {
            let x = &src[bi * t * row..(bi + 1) * t * row];
            for h in 0..heads {
                let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                let p = &mut probs[(bi * heads + h) * t * t..(bi * heads + h + 1) * t * t];
                kernel::gemm(
                    MatRef { data: &x[qo..], rows: t, cols: dh, rs: row as isize, cs: 1 },
                    MatRef { data: &x[ko..], rows: dh, cols: t, rs: 1, cs: row as isize },
                    p,
                    false,
                );
                p.iter_mut().for_each(|v| *v *= scale);
                kernel::softmax_rows(p, t);
                let o = &mut out[bi * t * d..(bi + 1) * t * d];
                // o[:, h*dh..] = p · v, written through a strided output.
                let mut tmp = vec![0.0; t * dh];
                kernel::gemm(
                    MatRef::row_major(p, t, t),
                    MatRef { data: &x[vo..], rows: t, cols: dh, rs: row as isize, cs: 1 },
                    &mut tmp,
                    false,
                );
                for i in 0..t {
                    o[i * d + h * dh..i * d + (h + 1) * dh]
                        .copy_from_slice(&tmp[i * dh..(i + 1) * dh]);
                }
            }
        }
        let out = Tensor::new([b, t, d], out)?;
        let g = self.needs_grad(qkv);
        Ok(self.push(out, Op::Attention { qkv, heads, probs }, g))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Every leaf that needs a gradient gets one, zeros when `loss` does not
    /// depend on it. Intermediate gradients are not retained.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(node, &gy, &mut grads)?;
            // only leaf gradients are reported; intermediates are freed
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(gy);
            }
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match g {
                Some(g) => Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape")),
                None if node.needs_grad && matches!(node.op, Op::Leaf) => {
                    Some(Tensor::zeros(node.value.shape().to_vec()))
                }
                None => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, gy: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        let need = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let av = self.value(a);
                let bv = self.value(b);
                let (m, k) = ops::as_matrix("matmul", av)?;
                let n = bv.shape()[1];
                let gy = MatRef::row_major(gy, m, n);
                if need(a) {
                    let ga = slot(grads, a, m * k);
                    kernel::gemm(gy, MatRef::row_major(bv.data(), k, n).t(), ga, true);
                }
                if need(b) {
                    let gb = slot(grads, b, k * n);
                    kernel::gemm(MatRef::row_major(av.data(), m, k).t(), gy, gb, true);
                }
            }
            &Op::MatMulT(a, b) => {
                let av = self.value(a);
                let bv = self.value(b);
                let (m, k) = ops::as_matrix("matmul_t", av)?;
                let n = bv.shape()[0];
                let gy = MatRef::row_major(gy, m, n);
                if need(a) {
                    let ga = slot(grads, a, m * k);
                    kernel::gemm(gy, MatRef::row_major(bv.data(), n, k), ga, true);
                }
                if need(b) {
                    let gb = slot(grads, b, n * k);
                    kernel::gemm(gy.t(), MatRef::row_major(av.data(), m, k), gb, true);
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if need(v) {
                        axpy(slot(grads, v, gy.len()), gy, 1.0);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if need(a) {
                    axpy(slot(grads, a, gy.len()), gy, 1.0);
                }
                if need(b) {
                    axpy(slot(grads, b, gy.len()), gy, -1.0);
                }
            }
            &Op::Mul(a, b) => {
                if need(a) {
                    let bv = self.value(b).data();
                    let ga = slot(grads, a, gy.len());
                    for ((g, &y), &w) in ga.iter_mut().zip(gy).zip(bv) {
                        *g += y * w;
                    }
                }
                if need(b) {
                    let av = self.value(a).data();
                    let gb = slot(grads, b, gy.len());
                    for ((g, &y), &w) in gb.iter_mut().zip(gy).zip(av) {
                        *g += y * w;
                    }
                }
            }
            &Op::AddBroadcast(x, y) => {
                if need(x) {
                    axpy(slot(grads, x, gy.len()), gy, 1.0);
                }
                if need(y) {
                    let w = self.value(y).numel();
                    let g = slot(grads, y, w);
                    for chunk in gy.chunks_exact(w) {
                        for (a, b) in g.iter_mut().zip(chunk) {
                            *a += b;
                        }
                    }
                }
            }
            &Op::Scale(x, c) => axpy(slot(grads, x, gy.len()), gy, c),
            &Op::Gelu(x) => {
                let xv = self.value(x).data();
                let g = slot(grads, x, gy.len());
                for ((a, &y), &v) in g.iter_mut().zip(gy).zip(xv) {
                    *a += y * kernel::gelu_grad(v);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                means,
                rstds,
            } => {
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let d = gv.len();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dx = vec![0.0; xv.len()];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..means.len() {
                    let (m, s) = (means[r], rstds[r]);
                    let xr = &xv[r * d..(r + 1) * d];
                    let gr = &gy[r * d..(r + 1) * d];
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..d {
                        xhat[j] = (xr[j] - m) * s;
                        dxhat[j] = gr[j] * gv[j];
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                        mean_dxhat += dxhat[j];
                        mean_dxhat_xhat += dxhat[j] * xhat[j];
                    }
                    mean_dxhat /= d as f32;
                    mean_dxhat_xhat /= d as f32;
                    let out = &mut dx[r * d..(r + 1) * d];
                    for j in 0..d {
                        out[j] = s * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                if need(*x) {
                    axpy(slot(grads, *x, dx.len()), &dx, 1.0);
                }
                if need(*gamma) {
                    axpy(slot(grads, *gamma, d), &dgamma, 1.0);
                }
                if need(*beta) {
                    axpy(slot(grads, *beta, d), &dbeta, 1.0);
                }
            }
            &Op::Softmax(x, axis) => {
                let yv = node.value.data();
                let (outer, n, inner) = axis_geometry(node.value.shape(), axis);
                let g = slot(grads, x, gy.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let mut dot = 0.0;
                        for j in 0..n {
                            dot += gy[base + j * inner] * yv[base + j * inner];
                        }
                        for j in 0..n {
                            let idx = base + j * inner;
                            g[idx] += yv[idx] * (gy[idx] - dot);
                        }
                    }
                }
            }
            &Op::LogSoftmax(x) => {
                let yv = node.value.data();
                let n = *node.value.shape().last().unwrap();
                let g = slot(grads, x, gy.len());
                for ((gr, yr), dr) in g.chunks_exact_mut(n).zip(yv.chunks_exact(n)).zip(gy.chunks_exact(n)) {
                    let s: f32 = dr.iter().sum();
                    for j in 0..n {
                        gr[j] += dr[j] - yr[j].exp() * s;
                    }
                }
            }
            &Op::LogClamp(x, floor) => {
                let xv = self.value(x).data();
                let g = slot(grads, x, gy.len());
                for ((a, &y), &v) in g.iter_mut().zip(gy).zip(xv) {
                    if v > floor {
                        *a += y / v;
                    }
                }
            }
            Op::L2Normalize(x, norms) => {
                let yv = node.value.data();
                let d = *node.value.shape().last().unwrap();
                let g = slot(grads, *x, gy.len());
                for r in 0..norms.len() {
                    let yr = &yv[r * d..(r + 1) * d];
                    let dr = &gy[r * d..(r + 1) * d];
                    let dot: f32 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    let inv = 1.0 / norms[r];
                    for j in 0..d {
                        g[r * d + j] += (dr[j] - yr[j] * dot) * inv;
                    }
                }
            }
            &Op::SumAxis(x, axis) | &Op::MeanAxis(x, axis) => {
                let xs = self.shape(x);
                let (outer, n, inner) = axis_geometry(xs, axis);
                let c = if matches!(node.op, Op::MeanAxis(..)) { 1.0 / n as f32 } else { 1.0 };
                let g = slot(grads, x, outer * n * inner);
                for o in 0..outer {
                    let src = &gy[o * inner..(o + 1) * inner];
                    for j in 0..n {
                        let dst = &mut g[(o * n + j) * inner..(o * n + j + 1) * inner];
                        for (a, b) in dst.iter_mut().zip(src) {
                            *a += b * c;
                        }
                    }
                }
            }
            &Op::SumAll(x) | &Op::MeanAll(x) => {
                let n = self.value(x).numel();
                let c = if matches!(node.op, Op::MeanAll(_)) { gy[0] / n as f32 } else { gy[0] };
                slot(grads, x, n).iter_mut().for_each(|a| *a += c);
            }
            &Op::Narrow { x, axis, start } => {
                let xs = self.shape(x);
                let (outer, n, inner) = axis_geometry(xs, axis);
                let len = node.value.shape()[axis];
                let g = slot(grads, x, outer * n * inner);
                for o in 0..outer {
                    let dst = &mut g[(o * n + start) * inner..(o * n + start + len) * inner];
                    axpy(dst, &gy[o * len * inner..(o + 1) * len * inner], 1.0);
                }
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = axis_geometry(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    if need(v) {
                        let g = slot(grads, v, outer * len * inner);
                        for o in 0..outer {
                            let src = &gy[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            axpy(&mut g[o * len * inner..(o + 1) * len * inner], src, 1.0);
                        }
                    }
                    offset += len;
                }
            }
            &Op::ExpandLeading(x) => {
                let w = self.value(x).numel();
                let g = slot(grads, x, w);
                for chunk in gy.chunks_exact(w) {
                    axpy(g, chunk, 1.0);
                }
            }
            &Op::Reshape(x) => axpy(slot(grads, x, gy.len()), gy, 1.0),
            Op::ScaleSamples(x, factors) => {
                let w = gy.len() / factors.len();
                let g = slot(grads, *x, gy.len());
                for ((gc, yc), f) in g.chunks_exact_mut(w).zip(gy.chunks_exact(w)).zip(factors) {
                    axpy(gc, yc, *f);
                }
            }
            Op::Attention { qkv, heads, probs } => {
                self.attention_backward(*qkv, *heads, probs, gy, grads);
            }
        }
        Ok(())
    }

    fn attention_backward(
        &self,
        qkv: Var,
        heads: usize,
        probs: &[f32],
        gy: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        let s = self.shape(qkv);
        let (b, t, d) = (s[0], s[1], s[2] / 3);
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let row = 3 * d;
        let src = self.value(qkv).data();
        let g = slot(grads, qkv, b * t * row);
        let mut d_o = vec![0.0; t * dh];
        let mut dp = vec![0.0; t * t];
        let mut tmp = vec![0.0; t * dh];
        for bi in 0..b {
            let x = &src[bi * t * row..(bi + 1) * t * row];
            let gx = &mut g[bi * t * row..(bi + 1) * t * row];
            for h in 0..heads {
                let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                let p = &probs[(bi * heads + h) * t * t..(bi * heads + h + 1) * t * t];
                for i in 0..t {
                    d_o[i * dh..(i + 1) * dh]
                        .copy_from_slice(&gy[(bi * t + i) * d + h * dh..(bi * t + i) * d + (h + 1) * dh]);
                }
                let q = MatRef { data: &x[qo..], rows: t, cols: dh, rs: row as isize, cs: 1 };
                let k = MatRef { data: &x[ko..], rows: t, cols: dh, rs: row as isize, cs: 1 };
                let v = MatRef { data: &x[vo..], rows: t, cols: dh, rs: row as isize, cs: 1 };
                let pm = MatRef::row_major(p, t, t);
                let dom = MatRef::row_major(&d_o, t, dh);
                // dV = Pᵀ·dO
                kernel::gemm(pm.t(), dom, &mut tmp, false);
                add_cols(gx, &tmp, t, row, vo, dh, 1.0);
                // dP = dO·Vᵀ, then softmax backward into dS (scaled).
                kernel::gemm(dom, v.t(), &mut dp, false);
                for i in 0..t {
                    let pr = &p[i * t..(i + 1) * t];
                    let dr = &mut dp[i * t..(i + 1) * t];
                    let dot: f32 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..t {
                        dr[j] = pr[j] * (dr[j] - dot) * scale;
                    }
                }
                let ds = MatRef::row_major(&dp, t, t);
                // dQ = dS·K, dK = dSᵀ·Q
                kernel::gemm(ds, k, &mut tmp, false);
                add_cols(gx, &tmp, t, row, qo, dh, 1.0);
                kernel::gemm(ds.t(), q, &mut tmp, false);
                add_cols(gx, &tmp, t, row, ko, dh, 1.0);
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f32>>], v: Var, len: usize) -> &'a mut Vec<f32> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(dst: &mut [f32], src: &[f32], c: f32) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += c * b;
    }
}

/// Adds a row-major `[t, w]` block into columns `off..off+w` of a `[t, row]`
/// matrix.
fn add_cols(dst: &mut [f32], src: &[f32], t: usize, row: usize, off: usize, w: usize, c: f32) {
    for i in 0..t {
        axpy(&mut dst[i * row + off..i * row + off + w], &src[i * w..(i + 1) * w], c);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_scalar_gradient_is_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(4.0).with_requires_grad(true));
        let y = tape.reshape(x, &[]).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0]);
        assert!(g.get(y).is_none(), "intermediate gradients are freed");
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(&[3.0]).unwrap().with_requires_grad(true));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn softmax_cross_entropy_gradient_is_p_minus_t() {
        let logits = [0.3f32, -1.2, 2.0, 0.5];
        let target = [0.0f32, 0.0, 1.0, 0.0];
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new([1, 4], logits.to_vec()).unwrap().with_requires_grad(true));
        let ls = tape.log_softmax(x).unwrap();
        let t = tape.constant(Tensor::new([1, 4], target.to_vec()).unwrap());
        let prod = tape.mul(ls, t).unwrap();
        let s = tape.sum_all(prod);
        let loss = tape.scale(s, -1.0);
        let g = tape.backward(loss).unwrap();
        let p = crate::tensor::ops::softmax(&Tensor::vector(&logits).unwrap(), 0).unwrap();
        for j in 0..4 {
            let expect = p.data()[j] - target[j];
            assert!((g.get(x).unwrap().data()[j] - expect).abs() < 1e-6);
        }
        // central differences agree with p - t
        for j in 0..4 {
            let ce = |d: f32| {
                let mut l = logits;
                l[j] += d;
                let m = l.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let lse = m + l.iter().map(|v| (v - m).exp()).sum::<f32>().ln();
                lse - l[2]
            };
            let fd = (ce(1e-3) - ce(-1e-3)) / 2e-3;
            assert!((fd - g.get(x).unwrap().data()[j]).abs() < 1e-3);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([2]).with_requires_grad(true));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_leaves_get_zero_gradients() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::full([2, 2], 1.0).with_requires_grad(true));
        let b = tape.leaf(Tensor::full([3], 1.0).with_requires_grad(true));
        let d = tape.detach(a);
        let loss = tape.sum_all(d);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap().shape(), &[2, 2]);
        assert!(g.get(a).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(g.get(b).unwrap().shape(), &[3]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::full([2], 1.0));
        let x = tape.leaf(Tensor::full([2], 2.0).with_requires_grad(true));
        let m = tape.mul(c, x).unwrap();
        let loss = tape.sum_all(m);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let data: Vec<f32> = (0..2 * 5 * 12).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect();
            let x = tape.constant(Tensor::new([2, 5, 12], data).unwrap());
            let y = tape.attention(x, 2).unwrap();
            tape.value(y).clone()
        };
        assert_eq!(run().data(), run().data());
    }
}
