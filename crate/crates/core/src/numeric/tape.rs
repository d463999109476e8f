//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its value and the information its
//! backward rule needs. [`Tape::backward`] walks the nodes in reverse from a
//! scalar loss, accumulating gradients into every node that depends on a
//! differentiable leaf.

use std::ops::Range;
use std::sync::Arc;

use crate::error::{Error, Result};

use super::array::{NdArray, Real};
use super::kernels::{self, col2im, gemm, im2col, ConvGeometry};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Silu,
    Gelu,
    Sigmoid,
    Exp,
    Abs,
    Square,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddChannel(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Matmul {
        a: Var,
        b: Var,
        broadcast_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeometry,
    },
    Upsample2x(Var),
    Unary(Var, Unary),
    Softmax(Var),
    RmsNorm {
        x: Var,
        inv_rms: Vec<T>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    Rotary {
        x: Var,
        cos: Arc<NdArray<T>>,
        sin: Arc<NdArray<T>>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Range<usize>>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: NdArray<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation; one per forward pass.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<NdArray<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&NdArray<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<NdArray<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Strided matrix product over sub-slices: `c = alpha * a @ b + beta * c`.
#[allow(clippy::too_many_arguments)]
fn gemm_strided<T: Real>(
    (m, k, n): (usize, usize, usize),
    alpha: T,
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    beta: T,
    c: &mut [T],
    (rsc, csc): (usize, usize),
) {
    let last = |r: usize, cs: usize, rows: usize, cols: usize| (rows - 1) * r + (cols - 1) * cs;
    assert!(a.len() > last(rsa, csa, m, k));
    assert!(b.len() > last(rsb, csb, k, n));
    assert!(c.len() > last(rsc, csc, m, n));
    // SAFETY: the asserts bound every index reachable through the strides.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &NdArray<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input.
    pub fn param(&mut self, value: NdArray<T>) -> Var {
        self.leaf(value, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: NdArray<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: NdArray<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: NdArray<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::add(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::sub(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::mul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    fn check_row(&self, op: &'static str, x: Var, row: Var) -> Result<usize> {
        let d = self.value(x).last_dim();
        if self.shape(row) != [d] {
            return Err(Error::shape(op, self.shape(x), self.shape(row)));
        }
        Ok(d)
    }

    /// `x [.., d] + b [d]`
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = self.check_row("add_row", x, b)?;
        let mut v = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for row in v.data_mut().chunks_mut(d) {
            for (o, &bb) in row.iter_mut().zip(&bias) {
                *o += bb;
            }
        }
        Ok(self.push(v, Op::AddRow(x, b), &[x, b]))
    }

    /// `x [.., d] * g [d]`
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let d = self.check_row("mul_row", x, g)?;
        let mut v = self.value(x).clone();
        let gain = self.value(g).data().to_vec();
        for row in v.data_mut().chunks_mut(d) {
            for (o, &gg) in row.iter_mut().zip(&gain) {
                *o *= gg;
            }
        }
        Ok(self.push(v, Op::MulRow(x, g), &[x, g]))
    }

    /// `x [N, C, H, W] + b [C]`
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || self.shape(b) != [shape[1]] {
            return Err(Error::shape("add_channel", &shape, self.shape(b)));
        }
        let plane = shape[2] * shape[3];
        let c = shape[1];
        let bias = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for (i, chunk) in v.data_mut().chunks_mut(plane).enumerate() {
            let bb = bias[i % c];
            for o in chunk {
                *o += bb;
            }
        }
        Ok(self.push(v, Op::AddChannel(x, b), &[x, b]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = kernels::scale(self.value(x), s);
        self.push(v, Op::Scale(x, s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x).map(|e| e + s);
        self.push(v, Op::AddScalar(x), &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (lead, m, k, n, broadcast_b) = kernels::matmul_dims(self.shape(a), self.shape(b))?;
        let batch = lead.iter().product();
        let v = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(
            v,
            Op::Matmul {
                a,
                b,
                broadcast_b,
                batch,
                m,
                k,
                n,
            },
            &[a, b],
        ))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(x), self.shape(w), stride, padding)?;
        let v = kernels::conv2d(self.value(x), self.value(w), stride, padding)?;
        Ok(self.push(v, Op::Conv2d { x, w, geom }, &[x, w]))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let v = kernels::upsample_nearest2x(self.value(x))?;
        Ok(self.push(v, Op::Upsample2x(x), &[x]))
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let v = match kind {
            Unary::Silu => kernels::silu(self.value(x)),
            Unary::Gelu => kernels::gelu(self.value(x)),
            Unary::Sigmoid => self.value(x).map(kernels::sigmoid_scalar),
            Unary::Exp => self.value(x).map(T::exp),
            Unary::Abs => self.value(x).map(T::abs),
            Unary::Square => self.value(x).map(|e| e * e),
        };
        self.push(v, Op::Unary(x, kind), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Silu)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let v = kernels::softmax(self.value(x));
        self.push(v, Op::Softmax(x), &[x])
    }

    /// Unit-RMS normalization over the last axis, no affine gain.
    pub fn rms_norm(&mut self, x: Var) -> Var {
        let (v, inv_rms) = kernels::rms_norm(self.value(x));
        self.push(v, Op::RmsNorm { x, inv_rms }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let v = kernels::permute(self.value(x), perm)?;
        Ok(self.push(v, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    pub fn transpose(&mut self, x: Var, a0: usize, a1: usize) -> Result<Var> {
        let mut perm: Vec<usize> = (0..self.value(x).rank()).collect();
        if a0 >= perm.len() || a1 >= perm.len() {
            return Err(Error::invalid("transpose", "axis out of range"));
        }
        perm.swap(a0, a1);
        self.permute(x, &perm)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = kernels::slice(self.value(x), axis, start, len)?;
        Ok(self.push(v, Op::Slice { x, axis, start }, &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&NdArray<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let v = kernels::concat(&values, axis)?;
        Ok(self.push(v, Op::Concat { xs: xs.to_vec(), axis }, xs))
    }

    /// Select rows of `x [R, ..]` by index; repeated indices are allowed.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rows = shape[0];
        if index.is_empty() {
            return Err(Error::invalid("gather_rows", "empty index"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid("gather_rows", format!("row {bad} out of range for {rows} rows")));
        }
        let width = self.value(x).len() / rows;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * width);
        for &i in index {
            out.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let mut out_shape = shape;
        out_shape[0] = index.len();
        let v = NdArray::new(out_shape, out)?;
        Ok(self.push(
            v,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = NdArray::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).len()).unwrap();
        let v = NdArray::scalar(self.value(x).sum() / n);
        self.push(v, Op::Mean(x), &[x])
    }

    /// Rotate interleaved channel pairs of `x [T, .., D]` by per-token angle
    /// tables `cos`, `sin` of shape `[T, D/2]`.
    pub fn rotary(&mut self, x: Var, cos: Arc<NdArray<T>>, sin: Arc<NdArray<T>>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        let tokens = shape[0];
        if d % 2 != 0 || cos.shape() != [tokens, d / 2] || sin.shape() != cos.shape() {
            return Err(Error::shape("rotary", &shape, cos.shape()));
        }
        let mut v = self.value(x).clone();
        rotate(v.data_mut(), tokens, d, &cos, &sin, false);
        Ok(self.push(v, Op::Rotary { x, cos, sin }, &[x]))
    }

    /// Scaled dot-product attention restricted to row `segments`.
    ///
    /// `q`, `k`, `v` are `[T, H, D]`; every segment attends only within
    /// itself, which is exactly full attention under a block-diagonal mask.
    /// The segments must partition `0..T` in order.
    pub fn segment_attention(&mut self, q: Var, k: Var, v: Var, segments: &[Range<usize>]) -> Result<Var> {
        self.same_shape("segment_attention", q, k)?;
        self.same_shape("segment_attention", q, v)?;
        let shape = self.shape(q).to_vec();
        if shape.len() != 3 {
            return Err(Error::invalid("segment_attention", format!("expected [T, H, D], got {shape:?}")));
        }
        let (t, h, d) = (shape[0], shape[1], shape[2]);
        let mut cursor = 0;
        for s in segments {
            if s.start != cursor || s.end <= s.start {
                return Err(Error::invalid("segment_attention", format!("segments {segments:?} do not partition 0..{t}")));
            }
            cursor = s.end;
        }
        if cursor != t {
            return Err(Error::invalid("segment_attention", format!("segments {segments:?} do not partition 0..{t}")));
        }
        let scale = T::one() / T::from_usize(d).unwrap().sqrt();
        let hd = h * d;
        let total: usize = segments.iter().map(|s| s.len() * s.len() * h).sum();
        let mut probs = vec![T::zero(); total];
        let mut out = vec![T::zero(); t * hd];
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut off = 0;
        for s in segments {
            let n = s.len();
            for head in 0..h {
                let base = s.start * hd + head * d;
                let p = &mut probs[off..off + n * n];
                gemm_strided((n, d, n), scale, &qd[base..], (hd, 1), &kd[base..], (1, hd), T::zero(), p, (n, 1));
                for row in p.chunks_mut(n) {
                    kernels::softmax_in_place(row);
                }
                gemm_strided((n, n, d), T::one(), p, (n, 1), &vd[base..], (hd, 1), T::zero(), &mut out[base..], (hd, 1));
                off += n * n;
            }
        }
        let value = NdArray::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::invalid("backward", format!("loss must be scalar, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<NdArray<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(NdArray::full(lv.shape().to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Mutable gradient buffer for `v`, or `None` when `v` needs no gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<NdArray<T>>], v: Var) -> Option<&'g mut [T]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let shape = self.nodes[v.0].value.shape();
        Some(grads[v.0].get_or_insert_with(|| NdArray::zeros(shape.to_vec())).data_mut())
    }

    fn backprop(&self, i: usize, g: &NdArray<T>, grads: &mut [Option<NdArray<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(s) = self.slot(grads, v) {
                        s.iter_mut().zip(gd).for_each(|(o, &x)| *o += x);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(gd).for_each(|(o, &x)| *o += x);
                }
                if let Some(s) = self.slot(grads, *b) {
                    s.iter_mut().zip(gd).for_each(|(o, &x)| *o -= x);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(s) = self.slot(grads, *a) {
                    for ((o, &x), &y) in s.iter_mut().zip(gd).zip(bv) {
                        *o += x * y;
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for ((o, &x), &y) in s.iter_mut().zip(gd).zip(av) {
                        *o += x * y;
                    }
                }
            }
            Op::AddRow(x, b) => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().zip(gd).for_each(|(o, &v)| *o += v);
                }
                let d = self.value(*b).len();
                if let Some(s) = self.slot(grads, *b) {
                    for row in gd.chunks(d) {
                        s.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
                    }
                }
            }
            Op::MulRow(x, gain) => {
                let d = self.value(*gain).len();
                let gv = self.value(*gain).data();
                let xv = self.value(*x).data();
                if let Some(s) = self.slot(grads, *x) {
                    for (srow, grow) in s.chunks_mut(d).zip(gd.chunks(d)) {
                        for ((o, &gg), &w) in srow.iter_mut().zip(grow).zip(gv) {
                            *o += gg * w;
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *gain) {
                    for (grow, xrow) in gd.chunks(d).zip(xv.chunks(d)) {
                        for ((o, &gg), &xx) in s.iter_mut().zip(grow).zip(xrow) {
                            *o += gg * xx;
                        }
                    }
                }
            }
            Op::AddChannel(x, b) => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().zip(gd).for_each(|(o, &v)| *o += v);
                }
                let shape = self.shape(*x);
                let (c, plane) = (shape[1], shape[2] * shape[3]);
                if let Some(s) = self.slot(grads, *b) {
                    for (idx, chunk) in gd.chunks(plane).enumerate() {
                        s[idx % c] += chunk.iter().copied().sum::<T>();
                    }
                }
            }
            Op::Scale(x, sc) => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().zip(gd).for_each(|(o, &v)| *o += v * *sc);
                }
            }
            Op::AddScalar(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().zip(gd).for_each(|(o, &v)| *o += v);
                }
            }
            Op::Matmul {
                a,
                b,
                broadcast_b,
                batch,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(s) = self.slot(grads, *a) {
                    for i in 0..*batch {
                        let bi = if *broadcast_b { 0 } else { i };
                        gemm(m, n, k, &gd[i * m * n..], false, &bv[bi * k * n..], true, &mut s[i * m * k..], true);
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for i in 0..*batch {
                        let bi = if *broadcast_b { 0 } else { i };
                        gemm(k, m, n, &av[i * m * k..], true, &gd[i * m * n..], false, &mut s[bi * k * n..], true);
                    }
                }
            }
            Op::Conv2d { x, w, geom } => {
                let g_ = geom;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let in_stride = g_.in_channels * g_.height * g_.width;
                let out_stride = g_.out_channels * g_.out_pixels();
                let mut cols = vec![T::zero(); g_.patch_len() * g_.out_pixels()];
                if self.requires_grad(*w) {
                    for b in 0..g_.batch {
                        im2col(g_, &xv[b * in_stride..(b + 1) * in_stride], &mut cols);
                        let s = self.slot(grads, *w).unwrap();
                        gemm(
                            g_.out_channels,
                            g_.out_pixels(),
                            g_.patch_len(),
                            &gd[b * out_stride..],
                            false,
                            &cols,
                            true,
                            s,
                            true,
                        );
                    }
                }
                if self.requires_grad(*x) {
                    for b in 0..g_.batch {
                        gemm(
                            g_.patch_len(),
                            g_.out_channels,
                            g_.out_pixels(),
                            wv,
                            true,
                            &gd[b * out_stride..],
                            false,
                            &mut cols,
                            false,
                        );
                        let s = self.slot(grads, *x).unwrap();
                        col2im(g_, &cols, &mut s[b * in_stride..(b + 1) * in_stride]);
                    }
                }
            }
            Op::Upsample2x(x) => {
                let shape = self.shape(*x);
                let r = shape.len();
                let (h, w) = (shape[r - 2], shape[r - 1]);
                if let Some(s) = self.slot(grads, *x) {
                    for (p, splane) in s.chunks_mut(h * w).enumerate() {
                        let gplane = &gd[p * 4 * h * w..(p + 1) * 4 * h * w];
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                splane[(y / 2) * w + xx / 2] += gplane[y * 2 * w + xx];
                            }
                        }
                    }
                }
            }
            Op::Unary(x, kind) => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                if let Some(s) = self.slot(grads, *x) {
                    let two = T::lit(2.0);
                    for (((o, &gg), &xx), &yy) in s.iter_mut().zip(gd).zip(xv).zip(yv) {
                        let dydx = match kind {
                            Unary::Silu => {
                                let sg = kernels::sigmoid_scalar(xx);
                                sg * (T::one() + xx * (T::one() - sg))
                            }
                            Unary::Gelu => kernels::gelu_grad_scalar(xx),
                            Unary::Sigmoid => yy * (T::one() - yy),
                            Unary::Exp => yy,
                            Unary::Abs => {
                                if xx > T::zero() {
                                    T::one()
                                } else if xx < T::zero() {
                                    -T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Square => two * xx,
                        };
                        *o += gg * dydx;
                    }
                }
            }
            Op::Softmax(x) => {
                let d = node.value.last_dim();
                let yv = node.value.data();
                if let Some(s) = self.slot(grads, *x) {
                    for ((srow, grow), yrow) in s.chunks_mut(d).zip(gd.chunks(d)).zip(yv.chunks(d)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((o, &gg), &yy) in srow.iter_mut().zip(grow).zip(yrow) {
                            *o += yy * (gg - dot);
                        }
                    }
                }
            }
            Op::RmsNorm { x, inv_rms } => {
                let d = node.value.last_dim();
                let dn = T::from_usize(d).unwrap();
                let yv = node.value.data();
                if let Some(s) = self.slot(grads, *x) {
                    for (((srow, grow), yrow), &r) in
                        s.chunks_mut(d).zip(gd.chunks(d)).zip(yv.chunks(d)).zip(inv_rms)
                    {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        for ((o, &gg), &yy) in srow.iter_mut().zip(grow).zip(yrow) {
                            *o += r * (gg - yy * dot);
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().zip(gd).for_each(|(o, &v)| *o += v);
                }
            }
            Op::Permute { x, perm } => {
                if self.requires_grad(*x) {
                    let mut inverse = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    let back = kernels::permute(g, &inverse).expect("valid inverse permutation");
                    let s = self.slot(grads, *x).unwrap();
                    s.iter_mut().zip(back.data()).for_each(|(o, &v)| *o += v);
                }
            }
            Op::Slice { x, axis, start } => {
                let in_shape = self.shape(*x);
                let (outer, n, inner) = kernels::split_axis(in_shape, *axis);
                let len = node.value.shape()[*axis];
                if let Some(s) = self.slot(grads, *x) {
                    for o in 0..outer {
                        let dst = o * n * inner + start * inner;
                        let src = o * len * inner;
                        for (a, &b) in s[dst..dst + len * inner].iter_mut().zip(&gd[src..src + len * inner]) {
                            *a += b;
                        }
                    }
                }
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = kernels::split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let n = self.shape(x)[*axis];
                    if let Some(s) = self.slot(grads, x) {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            for (a, &b) in s[o * n * inner..(o + 1) * n * inner]
                                .iter_mut()
                                .zip(&gd[src..src + n * inner])
                            {
                                *a += b;
                            }
                        }
                    }
                    offset += n;
                }
            }
            Op::GatherRows { x, index } => {
                let width = node.value.len() / index.len();
                if let Some(s) = self.slot(grads, *x) {
                    for (r, &src) in index.iter().enumerate() {
                        for (a, &b) in s[src * width..(src + 1) * width]
                            .iter_mut()
                            .zip(&gd[r * width..(r + 1) * width])
                        {
                            *a += b;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().for_each(|o| *o += gd[0]);
                }
            }
            Op::Mean(x) => {
                let n = T::from_usize(self.value(*x).len()).unwrap();
                if let Some(s) = self.slot(grads, *x) {
                    let gg = gd[0] / n;
                    s.iter_mut().for_each(|o| *o += gg);
                }
            }
            Op::Rotary { x, cos, sin } => {
                let shape = node.value.shape();
                let d = *shape.last().unwrap();
                if let Some(s) = self.slot(grads, *x) {
                    let mut back = gd.to_vec();
                    rotate(&mut back, shape[0], d, cos, sin, true);
                    s.iter_mut().zip(&back).for_each(|(o, &v)| *o += v);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                probs,
            } => self.attention_backward(*q, *k, *v, segments, probs, gd, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Range<usize>],
        probs: &[T],
        gd: &[T],
        grads: &mut [Option<NdArray<T>>],
    ) {
        let shape = self.shape(q);
        let (h, d) = (shape[1], shape[2]);
        let hd = h * d;
        let scale = T::one() / T::from_usize(d).unwrap().sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let need = [self.requires_grad(q), self.requires_grad(k), self.requires_grad(v)];
        let mut dq = need[0].then(|| vec![T::zero(); qd.len()]);
        let mut dk = need[1].then(|| vec![T::zero(); kd.len()]);
        let mut dv = need[2].then(|| vec![T::zero(); vd.len()]);
        let max_n = segments.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut dp = vec![T::zero(); max_n * max_n];
        let mut off = 0;
        for s in segments {
            let n = s.len();
            for head in 0..h {
                let base = s.start * hd + head * d;
                let p = &probs[off..off + n * n];
                off += n * n;
                if let Some(dv) = dv.as_mut() {
                    gemm_strided((n, n, d), T::one(), p, (1, n), &gd[base..], (hd, 1), T::one(), &mut dv[base..], (hd, 1));
                }
                if dq.is_none() && dk.is_none() {
                    continue;
                }
                let dp = &mut dp[..n * n];
                gemm_strided((n, d, n), T::one(), &gd[base..], (hd, 1), &vd[base..], (1, hd), T::zero(), dp, (n, 1));
                for (drow, prow) in dp.chunks_mut(n).zip(p.chunks(n)) {
                    let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                    for (dd, &pp) in drow.iter_mut().zip(prow) {
                        *dd = pp * (*dd - dot);
                    }
                }
                if let Some(dq) = dq.as_mut() {
                    gemm_strided((n, n, d), scale, dp, (n, 1), &kd[base..], (hd, 1), T::one(), &mut dq[base..], (hd, 1));
                }
                if let Some(dk) = dk.as_mut() {
                    gemm_strided((n, n, d), scale, dp, (1, n), &qd[base..], (hd, 1), T::one(), &mut dk[base..], (hd, 1));
                }
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(buf) = buf {
                let s = self.slot(grads, var).unwrap();
                s.iter_mut().zip(&buf).for_each(|(o, &x)| *o += x);
            }
        }
    }
}

/// Rotate interleaved pairs in place; `inverse` rotates by the negated angle.
fn rotate<T: Real>(data: &mut [T], tokens: usize, d: usize, cos: &NdArray<T>, sin: &NdArray<T>, inverse: bool) {
    let per_token = data.len() / tokens;
    let half = d / 2;
    for t in 0..tokens {
        let c = &cos.data()[t * half..(t + 1) * half];
        let s = &sin.data()[t * half..(t + 1) * half];
        for vec in data[t * per_token..(t + 1) * per_token].chunks_mut(d) {
            for j in 0..half {
                let (a, b) = (vec[2 * j], vec[2 * j + 1]);
                let sn = if inverse { -s[j] } else { s[j] };
                vec[2 * j] = a * c[j] - b * sn;
                vec[2 * j + 1] = a * sn + b * c[j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::gradcheck::check_gradients;
    use crate::numeric::rng::Rng;

    fn rand(rng: &mut Rng, shape: &[usize]) -> NdArray<f64> {
        NdArray::from_fn(shape.to_vec(), |_| rng.normal())
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(NdArray::from_fn([3, 4], |i| i as f64));
        let l = tape.sum(x);
        let g = tape.backward(l).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sum_of_squares_gradient_is_two_x() {
        let mut tape = Tape::<f64>::new();
        let xv = NdArray::from_fn([5], |i| i as f64 - 2.0);
        let x = tape.param(xv.clone());
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq);
        let g = tape.backward(l).unwrap();
        for (gv, xv) in g.get(x).unwrap().data().iter().zip(xv.data()) {
            assert_eq!(*gv, 2.0 * xv);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(NdArray::zeros([2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn gradient_shapes_match_values() {
        let mut rng = Rng::new(9);
        let mut tape = Tape::<f64>::new();
        let a = tape.param(rand(&mut rng, &[3, 4]));
        let b = tape.param(rand(&mut rng, &[4, 2]));
        let c = tape.matmul(a, b).unwrap();
        let s = tape.softmax(c);
        let l = tape.sum(s);
        let g = tape.backward(l).unwrap();
        for v in [a, b, c, s] {
            assert_eq!(g.get(v).unwrap().shape(), tape.shape(v));
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(NdArray::full([2], 1.0));
        let b = tape.param(NdArray::full([2], 2.0));
        let c = tape.mul(a, b).unwrap();
        let l = tape.sum(c);
        let g = tape.backward(l).unwrap();
        assert!(g.get(a).is_none());
        assert!(g.get(b).is_some());
    }

    /// Each differentiable op against central differences in 64-bit.
    #[test]
    fn every_op_passes_finite_differences() {
        let mut rng = Rng::new(21);
        type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var>;
        let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
            ("matmul", vec![vec![2, 3, 4], vec![2, 4, 5]], Box::new(|t, p| { let y = t.matmul(p[0], p[1]).unwrap(); let s = t.square(y); t.sum(s) })),
            ("matmul_bcast", vec![vec![2, 3, 4], vec![4, 5]], Box::new(|t, p| { let y = t.matmul(p[0], p[1]).unwrap(); let s = t.square(y); t.mean(s) })),
            ("conv", vec![vec![2, 3, 6, 5], vec![4, 3, 3, 3], vec![4]], Box::new(|t, p| {
                let y = t.conv2d(p[0], p[1], 2, 1).unwrap();
                let y = t.add_channel(y, p[2]).unwrap();
                let s = t.square(y); t.sum(s)
            })),
            ("upsample_silu", vec![vec![1, 2, 3, 3]], Box::new(|t, p| { let y = t.upsample2x(p[0]).unwrap(); let y = t.silu(y); let s = t.square(y); t.sum(s) })),
            ("gelu_sigmoid_exp", vec![vec![7]], Box::new(|t, p| { let a = t.gelu(p[0]); let b = t.sigmoid(a); let c = t.exp(b); t.sum(c) })),
            ("abs", vec![vec![9]], Box::new(|t, p| { let a = t.abs(p[0]); t.mean(a) })),
            ("softmax", vec![vec![3, 5], vec![3, 5]], Box::new(|t, p| { let s = t.softmax(p[0]); let m = t.mul(s, p[1]).unwrap(); t.sum(m) })),
            ("rms_norm_rows", vec![vec![4, 6], vec![6], vec![6]], Box::new(|t, p| {
                let n = t.rms_norm(p[0]); let n = t.mul_row(n, p[1]).unwrap(); let n = t.add_row(n, p[2]).unwrap();
                let s = t.square(n); t.sum(s)
            })),
            ("structural", vec![vec![2, 3, 4], vec![2, 2, 4]], Box::new(|t, p| {
                let c = t.concat(&[p[0], p[1]], 1).unwrap();
                let tr = t.transpose(c, 0, 2).unwrap();
                let sl = t.slice(tr, 1, 1, 3).unwrap();
                let r = t.reshape(sl, &[4, 6]).unwrap();
                let g = t.gather_rows(r, &[3, 0, 3, 1]).unwrap();
                let sc = t.scale(g, 0.7);
                let sc = t.add_scalar(sc, 0.1);
                let s = t.square(sc); t.sum(s)
            })),
            ("sub", vec![vec![3], vec![3]], Box::new(|t, p| { let d = t.sub(p[0], p[1]).unwrap(); let s = t.square(d); t.sum(s) })),
        ];
        for (name, shapes, build) in cases {
            let params: Vec<NdArray<f64>> = shapes.iter().map(|s| rand(&mut rng, s)).collect();
            let err = check_gradients(|t, p| build(t, p), &params, 1e-5).unwrap();
            assert!(err.max_rel_error <= 1e-6, "{name}: {err:?}");
        }
    }

    #[test]
    fn rotary_and_attention_pass_finite_differences() {
        let mut rng = Rng::new(4);
        let (t, h, d) = (7, 2, 4);
        let cos = Arc::new(NdArray::from_fn([t, d / 2], |i| (i as f64 * 0.37).cos()));
        let sin = Arc::new(NdArray::from_fn([t, d / 2], |i| (i as f64 * 0.37).sin()));
        let params: Vec<NdArray<f64>> = (0..4).map(|_| rand(&mut rng, &[t, h, d])).collect();
        let err = check_gradients(
            |tape, p| {
                let q = tape.rotary(p[0], cos.clone(), sin.clone()).unwrap();
                let k = tape.rotary(p[1], cos.clone(), sin.clone()).unwrap();
                let o = tape.segment_attention(q, k, p[2], &[0..3, 3..7]).unwrap();
                let m = tape.mul(o, p[3]).unwrap();
                tape.sum(m)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err.max_rel_error <= 1e-6, "{err:?}");
    }

    #[test]
    fn segment_attention_matches_masked_dense_attention() {
        let mut rng = Rng::new(8);
        let (t, h, d) = (5, 2, 3);
        let q = rand(&mut rng, &[t, h, d]);
        let k = rand(&mut rng, &[t, h, d]);
        let v = rand(&mut rng, &[t, h, d]);
        let segs = [0..2, 2..5];
        let mut tape = Tape::<f64>::new();
        let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
        let out = tape.segment_attention(qv, kv, vv, &segs).unwrap();
        let got = tape.value(out).clone();
        let seg_of = |i: usize| if i < 2 { 0 } else { 1 };
        let at = |a: &NdArray<f64>, i: usize, hh: usize, j: usize| a.data()[(i * h + hh) * d + j];
        for hh in 0..h {
            for i in 0..t {
                let mut logits: Vec<f64> = (0..t)
                    .map(|j| {
                        if seg_of(i) != seg_of(j) {
                            f64::NEG_INFINITY
                        } else {
                            (0..d).map(|c| at(&q, i, hh, c) * at(&k, j, hh, c)).sum::<f64>() / (d as f64).sqrt()
                        }
                    })
                    .collect();
                kernels::softmax_in_place(&mut logits);
                for c in 0..d {
                    let want: f64 = (0..t).map(|j| logits[j] * at(&v, j, hh, c)).sum();
                    assert!((at(&got, i, hh, c) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn attention_rejects_bad_segments() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(NdArray::zeros([4, 1, 2]));
        assert!(tape.segment_attention(x, x, x, &[0..2]).is_err());
        assert!(tape.segment_attention(x, x, x, &[0..2, 3..4]).is_err());
        assert!(tape.segment_attention(x, x, x, &[0..4]).is_ok());
    }
}
