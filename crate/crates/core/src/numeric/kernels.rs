//! Forward kernels on plain arrays.
//!
//! These are the non-differentiable building blocks; [`super::tape`] wraps
//! them with backward rules.

use crate::error::{Error, Result};

use super::array::{NdArray, Real};

/// Geometry of a 2-d convolution over NCHW input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::shape("conv2d", input, kernel));
        }
        if input[1] != kernel[1] {
            return Err(Error::shape("conv2d", input, kernel));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be >= 1"));
        }
        let (h, w) = (input[2], input[3]);
        let (kh, kw) = (kernel[2], kernel[3]);
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * padding, w + 2 * padding),
            ));
        }
        Ok(Self {
            batch: input[0],
            in_channels: input[1],
            out_channels: kernel[0],
            height: h,
            width: w,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_h, self.out_w]
    }
}

/// `c = a @ b` (+ `c` when `accumulate`) for contiguous row-major matrices,
/// optionally reading `a` or `b` transposed.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: extents checked above; strides describe the same buffers.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Leading batch extents and (m, k, n) for a batched matmul.
pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(Vec<usize>, usize, usize, usize, bool)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::shape("matmul", a, b));
    }
    let lead_a = &a[..a.len() - 2];
    let lead_b = &b[..b.len() - 2];
    let broadcast_b = lead_b.is_empty();
    if !broadcast_b && lead_a != lead_b {
        return Err(Error::shape("matmul", a, b));
    }
    Ok((lead_a.to_vec(), m, k, n, broadcast_b))
}

/// Matrix product on the trailing two axes, batched over leading axes.
/// A rank-2 right operand is broadcast over the batch.
pub fn matmul<T: Real>(a: &NdArray<T>, b: &NdArray<T>) -> Result<NdArray<T>> {
    let (lead, m, k, n, broadcast_b) = matmul_dims(a.shape(), b.shape())?;
    let batch: usize = lead.iter().product();
    let mut out = vec![T::zero(); batch * m * n];
    for i in 0..batch {
        let bi = if broadcast_b { 0 } else { i };
        gemm(
            m,
            k,
            n,
            &a.data()[i * m * k..],
            false,
            &b.data()[bi * k * n..],
            false,
            &mut out[i * m * n..],
            false,
        );
    }
    let mut shape = lead;
    shape.extend([m, n]);
    NdArray::new(shape, out)
}

/// Unfold one image `[C, H, W]` into columns `[C*kh*kw, out_h*out_w]`.
pub(crate) fn im2col<T: Real>(g: &ConvGeometry, image: &[T], cols: &mut [T]) {
    let (h, w) = (g.height as isize, g.width as isize);
    let pix = g.out_pixels();
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut cols[row * pix..(row + 1) * pix];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= h {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, slot) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        *slot = if ix < 0 || ix >= w { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image gradient.
pub(crate) fn col2im<T: Real>(g: &ConvGeometry, cols: &[T], image: &mut [T]) {
    let (h, w) = (g.height as isize, g.width as isize);
    let pix = g.out_pixels();
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &cols[row * pix..(row + 1) * pix];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `input [N, C, H, W]` with `kernel [O, C, kh, kw]`
/// under zero padding.
pub fn conv2d<T: Real>(
    input: &NdArray<T>,
    kernel: &NdArray<T>,
    stride: usize,
    padding: usize,
) -> Result<NdArray<T>> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    let mut out = vec![T::zero(); g.batch * g.out_channels * g.out_pixels()];
    let mut cols = vec![T::zero(); g.patch_len() * g.out_pixels()];
    let in_stride = g.in_channels * g.height * g.width;
    let out_stride = g.out_channels * g.out_pixels();
    for n in 0..g.batch {
        im2col(&g, &input.data()[n * in_stride..(n + 1) * in_stride], &mut cols);
        gemm(
            g.out_channels,
            g.patch_len(),
            g.out_pixels(),
            kernel.data(),
            false,
            &cols,
            false,
            &mut out[n * out_stride..(n + 1) * out_stride],
            false,
        );
    }
    NdArray::new(g.output_shape(), out)
}

/// Row-wise softmax over the last axis with max subtraction.
pub fn softmax<T: Real>(x: &NdArray<T>) -> NdArray<T> {
    let mut out = x.clone();
    let d = x.last_dim();
    for row in out.data_mut().chunks_mut(d) {
        softmax_in_place(row);
    }
    out
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = T::one() / total;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

pub const RMS_EPS: f64 = 1e-6;

/// Normalize each last-axis vector to unit root-mean-square. Returns the
/// normalized array and the per-row inverse RMS.
pub fn rms_norm<T: Real>(x: &NdArray<T>) -> (NdArray<T>, Vec<T>) {
    let d = x.last_dim();
    let eps = T::lit(RMS_EPS);
    let dn = T::from_usize(d).unwrap();
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    for row in out.data_mut().chunks_mut(d) {
        let ms = row.iter().map(|&v| v * v).sum::<T>() / dn;
        let r = T::one() / (ms + eps).sqrt();
        for v in row.iter_mut() {
            *v *= r;
        }
        inv.push(r);
    }
    (out, inv)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu_scalar<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let k = T::lit(GELU_K);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let k = T::lit(GELU_K);
    let half = T::lit(0.5);
    let inner = c * (x + k * x * x * x);
    let th = inner.tanh();
    let sech2 = T::one() - th * th;
    half * (T::one() + th) + half * x * sech2 * c * (T::one() + T::lit(3.0) * k * x * x)
}

pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn gelu<T: Real>(x: &NdArray<T>) -> NdArray<T> {
    x.map(gelu_scalar)
}

pub fn silu<T: Real>(x: &NdArray<T>) -> NdArray<T> {
    x.map(|v| v * sigmoid_scalar(v))
}

fn zip_same<T: Real>(op: &'static str, a: &NdArray<T>, b: &NdArray<T>, f: impl Fn(T, T) -> T) -> Result<NdArray<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    NdArray::new(a.shape().to_vec(), data)
}

pub fn add<T: Real>(a: &NdArray<T>, b: &NdArray<T>) -> Result<NdArray<T>> {
    zip_same("add", a, b, |x, y| x + y)
}

pub fn sub<T: Real>(a: &NdArray<T>, b: &NdArray<T>) -> Result<NdArray<T>> {
    zip_same("sub", a, b, |x, y| x - y)
}

pub fn mul<T: Real>(a: &NdArray<T>, b: &NdArray<T>) -> Result<NdArray<T>> {
    zip_same("mul", a, b, |x, y| x * y)
}

pub fn scale<T: Real>(a: &NdArray<T>, s: T) -> NdArray<T> {
    a.map(|v| v * s)
}

/// Strides of a row-major shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn check_perm(shape: &[usize], perm: &[usize]) -> Result<()> {
    let mut seen = vec![false; shape.len()];
    if perm.len() != shape.len() {
        return Err(Error::shape("permute", shape, perm));
    }
    for &p in perm {
        if p >= shape.len() || seen[p] {
            return Err(Error::shape("permute", shape, perm));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Reorder axes: output axis `i` is input axis `perm[i]`.
pub fn permute<T: Real>(x: &NdArray<T>, perm: &[usize]) -> Result<NdArray<T>> {
    check_perm(x.shape(), perm)?;
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; out_shape.len()];
    let mut offset = 0usize;
    for _ in 0..x.len() {
        out.push(x.data()[offset]);
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    NdArray::new(out_shape, out)
}

pub fn transpose<T: Real>(x: &NdArray<T>, a0: usize, a1: usize) -> Result<NdArray<T>> {
    let mut perm: Vec<usize> = (0..x.rank()).collect();
    if a0 >= perm.len() || a1 >= perm.len() {
        return Err(Error::invalid("transpose", format!("axes ({a0}, {a1}) out of range for rank {}", x.rank())));
    }
    perm.swap(a0, a1);
    permute(x, &perm)
}

/// `(outer, axis_len, inner)` view of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn slice<T: Real>(x: &NdArray<T>, axis: usize, start: usize, len: usize) -> Result<NdArray<T>> {
    if axis >= x.rank() || len == 0 || start + len > x.shape()[axis] {
        return Err(Error::invalid(
            "slice",
            format!("range {start}..{} on axis {axis} of {:?}", start + len, x.shape()),
        ));
    }
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * n * inner + start * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    NdArray::new(shape, out)
}

pub fn concat<T: Real>(xs: &[&NdArray<T>], axis: usize) -> Result<NdArray<T>> {
    let first = xs.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
    if axis >= first.rank() {
        return Err(Error::invalid("concat", format!("axis {axis} out of range")));
    }
    for x in xs {
        let ok = x.rank() == first.rank()
            && x.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::shape("concat", first.shape(), x.shape()));
        }
    }
    let (outer, _, inner) = split_axis(first.shape(), axis);
    let total: usize = xs.iter().map(|x| x.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for x in xs {
            let n = x.shape()[axis];
            out.extend_from_slice(&x.data()[o * n * inner..(o + 1) * n * inner]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    NdArray::new(shape, out)
}

/// Nearest-neighbour 2x upsampling of the trailing two axes.
pub fn upsample_nearest2x<T: Real>(x: &NdArray<T>) -> Result<NdArray<T>> {
    if x.rank() < 2 {
        return Err(Error::invalid("upsample", "rank must be >= 2"));
    }
    let r = x.rank();
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    let planes = x.len() / (h * w);
    let mut out = Vec::with_capacity(x.len() * 4);
    for p in 0..planes {
        let plane = &x.data()[p * h * w..(p + 1) * h * w];
        for y in 0..2 * h {
            let src = &plane[(y / 2) * w..(y / 2 + 1) * w];
            for xx in 0..2 * w {
                out.push(src[xx / 2]);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[r - 2] *= 2;
    shape[r - 1] *= 2;
    NdArray::new(shape, out)
}
