//! Dense tensor type and the numeric kernels everything else builds on.
//!
//! Compute is 32-bit float throughout; every kernel is also generic over
//! [`Scalar`] so the gradient-check harness can rerun the exact same code in
//! 64-bit, where central finite differences are meaningful.
//!
//! Convolution follows the cross-correlation convention (no kernel flip).

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::threads;

/// Element type of a [`Tensor`]: `f32` for real work, `f64` for gradient
/// checking.
pub trait Scalar: num_traits::Float + std::fmt::Debug + Send + Sync + 'static {}
impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for converting an `f64` constant into the active scalar type.
#[inline]
pub(crate) fn s<T: Scalar>(v: f64) -> T {
    T::from(v).expect("f64 conversion")
}

/// Shape + flat row-major buffer of scalars, with an optional gradient buffer
/// of identical shape. The last axis varies fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor, checking that `shape` is non-empty, every dimension is
    /// positive, and `product(shape) == data.len()`.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::shape("tensor shape must be non-empty"));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("tensor dimensions must be positive: {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} implies {n} elements, buffer has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data, grad: None })
    }

    /// Zero-filled tensor. Panics on an invalid shape; use [`Tensor::new`]
    /// when the shape comes from untrusted input.
    pub fn zeros(shape: Vec<usize>) -> Self {
        assert!(!shape.is_empty() && shape.iter().all(|&d| d > 0), "invalid shape {shape:?}");
        let n = shape.iter().product();
        Tensor { shape, data: vec![T::zero(); n], grad: None }
    }

    pub fn full(shape: Vec<usize>, v: T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(v);
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated (zeroed) on first use.
    pub fn grad_mut(&mut self) -> &mut [T] {
        if self.grad.is_none() {
            self.grad = Some(vec![T::zero(); self.data.len()]);
        }
        self.grad.as_deref_mut().unwrap()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_deref_mut() {
            g.fill(T::zero());
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Element at a multi-index (row-major). Intended for tests and small
    /// tensors, not hot loops.
    pub fn at(&self, idx: &[usize]) -> T {
        assert_eq!(idx.len(), self.shape.len(), "rank mismatch");
        let mut off = 0;
        for (i, (&ix, &d)) in idx.iter().zip(&self.shape).enumerate() {
            assert!(ix < d, "index {ix} out of bounds for axis {i} of size {d}");
            off = off * d + ix;
        }
        self.data[off]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from(v).expect("scalar cast")).collect(),
            grad: None,
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Draws `product(shape)` values from a zero-mean normal with variance
/// `2 / fan_in` (He initialization).
pub fn he_init<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Result<Tensor<T>> {
    if shape.is_empty() {
        return Err(Error::invalid("he_init: empty shape"));
    }
    if fan_in == 0 {
        return Err(Error::invalid("he_init: fan_in must be >= 1"));
    }
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| s::<T>(rng.normal(0.0, std))).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Standard matrix product of `[M×K]` and `[K×N]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(Error::shape("matmul: both operands must be rank 2"));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::shape(format!("matmul: inner dimensions {k} and {k2} disagree")));
    }
    let mut out = Tensor::zeros(vec![m, n]);
    matmul_acc(out.data_mut(), a.data(), b.data(), m, k, n);
    Ok(out)
}

/// `out[M×N] += a[M×K] · b[K×N]`, row-major slices. Rows are independent, so
/// the worker split never changes results.
pub(crate) fn matmul_acc<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let nt = threads::effective(m);
    if nt <= 1 {
        matmul_acc_rows(out, a, b, k, n);
        return;
    }
    let rows_per = m.div_ceil(nt);
    std::thread::scope(|sc| {
        for (oc, ac) in out.chunks_mut(rows_per * n).zip(a.chunks(rows_per * k)) {
            sc.spawn(move || matmul_acc_rows(oc, ac, b, k, n));
        }
    });
}

fn matmul_acc_rows<T: Scalar>(out: &mut [T], a: &[T], b: &[T], k: usize, n: usize) {
    for (crow, arow) in out.chunks_exact_mut(n).zip(a.chunks_exact(k)) {
        for (brow, &av) in b.chunks_exact(n).zip(arow.iter()) {
            if av != T::zero() {
                for (c, &bv) in crow.iter_mut().zip(brow.iter()) {
                    *c = *c + av * bv;
                }
            }
        }
    }
}

pub(crate) fn transpose_into<T: Scalar>(src: &[T], rows: usize, cols: usize, dst: &mut Vec<T>) {
    dst.clear();
    dst.resize(rows * cols, T::zero());
    for r in 0..rows {
        let base = r * cols;
        for c in 0..cols {
            dst[c * rows + r] = src[base + c];
        }
    }
}

/// Per-side zero padding. Asymmetric pads exist for the model presets, which
/// use "same" geometry; the public conv ops always pad symmetrically.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Pads {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Pads {
    pub fn symmetric(p: usize) -> Self {
        Pads { top: p, bottom: p, left: p, right: p }
    }

    /// "Same" geometry: output size `ceil(extent / stride)` on each axis, the
    /// odd padding byte going to the bottom/right side.
    pub fn same(h: usize, w: usize, k: usize, stride: usize) -> Self {
        let (top, bottom) = Self::same_axis(h, k, stride);
        let (left, right) = Self::same_axis(w, k, stride);
        Pads { top, bottom, left, right }
    }

    fn same_axis(extent: usize, k: usize, stride: usize) -> (usize, usize) {
        let out = extent.div_ceil(stride);
        let total = ((out - 1) * stride + k).saturating_sub(extent);
        (total / 2, total - total / 2)
    }

    pub fn out_extent(&self, h: usize, w: usize, k: usize, stride: usize) -> (usize, usize) {
        let oh = (h + self.top + self.bottom - k) / stride + 1;
        let ow = (w + self.left + self.right - k) / stride + 1;
        (oh, ow)
    }
}

fn check_conv_geometry(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<(usize, usize)> {
    if k % 2 == 0 {
        return Err(Error::invalid(format!("conv2d: kernel size {k} must be odd")));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d: stride must be >= 1"));
    }
    for (name, extent) in [("height", h), ("width", w)] {
        if extent + 2 * pad < k {
            return Err(Error::shape(format!(
                "conv2d: kernel {k} exceeds padded input {name} {}",
                extent + 2 * pad
            )));
        }
        if (extent + 2 * pad - k) % stride != 0 {
            return Err(Error::shape(format!(
                "conv2d: output {name} ({} + 2*{pad} - {k}) / {stride} + 1 is not integral",
                extent
            )));
        }
    }
    Ok(((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1))
}

/// Cross-correlation of a `[C_in×H×W]` input with `[C_out×C_in×k×k]` kernels.
/// Out-of-range input reads count as zero. The symmetric padding must make the
/// output size integral: `(H + 2·pad − k) / stride + 1`.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (c, h, w) = expect_rank3(input, "conv2d input")?;
    let (o, kc, k) = expect_kernels(kernels)?;
    if kc != c {
        return Err(Error::shape(format!(
            "conv2d: input has {c} channels, kernels expect {kc}"
        )));
    }
    let (oh, ow) = check_conv_geometry(h, w, k, stride, pad)?;
    let pads = Pads::symmetric(pad);
    let mut out = Tensor::zeros(vec![o, oh, ow]);
    let mut scratch = ConvScratch::default();
    conv_fwd_image(out.data_mut(), input.data(), c, h, w, kernels.data(), o, k, stride, pads, &mut scratch);
    Ok(out)
}

/// Exact gradients of [`conv2d_forward`] with respect to the input and the
/// kernels.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c, h, w) = expect_rank3(input, "conv2d input")?;
    let (o, kc, k) = expect_kernels(kernels)?;
    if kc != c {
        return Err(Error::shape(format!(
            "conv2d: input has {c} channels, kernels expect {kc}"
        )));
    }
    let (oh, ow) = check_conv_geometry(h, w, k, stride, pad)?;
    if grad_out.shape() != [o, oh, ow] {
        return Err(Error::shape(format!(
            "conv2d_backward: grad_out shape {:?} does not match output [{o}, {oh}, {ow}]",
            grad_out.shape()
        )));
    }
    let pads = Pads::symmetric(pad);
    let mut dx = Tensor::zeros(vec![c, h, w]);
    let mut dw = Tensor::zeros(vec![o, c, k, k]);
    let mut scratch = ConvScratch::default();
    conv_bwd_image(
        Some(dx.data_mut()),
        dw.data_mut(),
        input.data(),
        c,
        h,
        w,
        kernels.data(),
        o,
        k,
        stride,
        pads,
        grad_out.data(),
        &mut scratch,
    );
    Ok((dx, dw))
}

fn expect_rank3<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        other => Err(Error::shape(format!("{what}: expected rank 3, got {other:?}"))),
    }
}

fn expect_kernels<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [o, c, kh, kw] if kh == kw => Ok((*o, *c, *kh)),
        other => Err(Error::shape(format!(
            "conv2d kernels: expected [C_out, C_in, k, k], got {other:?}"
        ))),
    }
}

/// Reusable buffers for the im2col path, so batch loops do not reallocate.
pub(crate) struct ConvScratch<T: Scalar = f32> {
    padded: Vec<T>,
    cols: Vec<T>,
    cols_t: Vec<T>,
    w_t: Vec<T>,
    dcols: Vec<T>,
    dpad: Vec<T>,
}

impl<T: Scalar> ConvScratch<T> {
    pub fn new() -> Self {
        ConvScratch {
            padded: Vec::new(),
            cols: Vec::new(),
            cols_t: Vec::new(),
            w_t: Vec::new(),
            dcols: Vec::new(),
            dpad: Vec::new(),
        }
    }
}

impl<T: Scalar> Default for ConvScratch<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn pad_chw<T: Scalar>(src: &[T], c: usize, h: usize, w: usize, p: Pads, dst: &mut Vec<T>) -> (usize, usize) {
    let (ph, pw) = (h + p.top + p.bottom, w + p.left + p.right);
    dst.clear();
    dst.resize(c * ph * pw, T::zero());
    for ci in 0..c {
        for y in 0..h {
            let s0 = (ci * h + y) * w;
            let d0 = (ci * ph + y + p.top) * pw + p.left;
            dst[d0..d0 + w].copy_from_slice(&src[s0..s0 + w]);
        }
    }
    (ph, pw)
}

fn im2col<T: Scalar>(
    xp: &[T],
    c: usize,
    ph: usize,
    pw: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    cols: &mut Vec<T>,
) {
    let ohw = oh * ow;
    cols.clear();
    cols.resize(c * k * k * ohw, T::zero());
    for ci in 0..c {
        for i in 0..k {
            for j in 0..k {
                let row = ((ci * k + i) * k + j) * ohw;
                for oy in 0..oh {
                    let src = (ci * ph + oy * stride + i) * pw + j;
                    let dst = row + oy * ow;
                    if stride == 1 {
                        cols[dst..dst + ow].copy_from_slice(&xp[src..src + ow]);
                    } else {
                        for ox in 0..ow {
                            cols[dst + ox] = xp[src + ox * stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(
    cols: &[T],
    c: usize,
    ph: usize,
    pw: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    xp: &mut [T],
) {
    let ohw = oh * ow;
    for ci in 0..c {
        for i in 0..k {
            for j in 0..k {
                let row = ((ci * k + i) * k + j) * ohw;
                for oy in 0..oh {
                    let dst = (ci * ph + oy * stride + i) * pw + j;
                    let src = row + oy * ow;
                    if stride == 1 {
                        for ox in 0..ow {
                            xp[dst + ox] = xp[dst + ox] + cols[src + ox];
                        }
                    } else {
                        for ox in 0..ow {
                            xp[dst + ox * stride] = xp[dst + ox * stride] + cols[src + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_identity_geometry(k: usize, stride: usize, p: Pads) -> bool {
    k == 1 && stride == 1 && p == Pads { top: 0, bottom: 0, left: 0, right: 0 }
}

/// One image: `out[O×OH×OW] = kernels ⋆ x`. `out` must be zeroed.
pub(crate) fn conv_fwd_image<T: Scalar>(
    out: &mut [T],
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    wts: &[T],
    o: usize,
    k: usize,
    stride: usize,
    pads: Pads,
    scratch: &mut ConvScratch<T>,
) -> (usize, usize) {
    let (oh, ow) = pads.out_extent(h, w, k, stride);
    if is_identity_geometry(k, stride, pads) {
        // 1×1 stride-1 convolution is a plain matmul over spatial positions.
        matmul_acc(out, wts, x, o, c, h * w);
        return (oh, ow);
    }
    let (ph, pw) = pad_chw(x, c, h, w, pads, &mut scratch.padded);
    im2col(&scratch.padded, c, ph, pw, k, stride, oh, ow, &mut scratch.cols);
    matmul_acc(out, wts, &scratch.cols, o, c * k * k, oh * ow);
    (oh, ow)
}

/// One image: accumulates `dw += dy ⊗ x` and, when requested, writes
/// `dx = kernelsᵀ ⋆ dy`. `dx` must be zeroed; `dw` accumulates across calls.
pub(crate) fn conv_bwd_image<T: Scalar>(
    dx: Option<&mut [T]>,
    dw: &mut [T],
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    wts: &[T],
    o: usize,
    k: usize,
    stride: usize,
    pads: Pads,
    dy: &[T],
    scratch: &mut ConvScratch<T>,
) {
    let (oh, ow) = pads.out_extent(h, w, k, stride);
    let ohw = oh * ow;
    let ckk = c * k * k;
    if is_identity_geometry(k, stride, pads) {
        transpose_into(x, c, h * w, &mut scratch.cols_t);
        matmul_acc(dw, dy, &scratch.cols_t, o, ohw, c);
        if let Some(dx) = dx {
            transpose_into(wts, o, c, &mut scratch.w_t);
            matmul_acc(dx, &scratch.w_t, dy, c, o, ohw);
        }
        return;
    }
    let (ph, pw) = pad_chw(x, c, h, w, pads, &mut scratch.padded);
    im2col(&scratch.padded, c, ph, pw, k, stride, oh, ow, &mut scratch.cols);
    transpose_into(&scratch.cols, ckk, ohw, &mut scratch.cols_t);
    matmul_acc(dw, dy, &scratch.cols_t, o, ohw, ckk);
    if let Some(dx) = dx {
        transpose_into(wts, o, ckk, &mut scratch.w_t);
        scratch.dcols.clear();
        scratch.dcols.resize(ckk * ohw, T::zero());
        matmul_acc(&mut scratch.dcols, &scratch.w_t, dy, ckk, o, ohw);
        scratch.dpad.clear();
        scratch.dpad.resize(c * ph * pw, T::zero());
        col2im_add(&scratch.dcols, c, ph, pw, k, stride, oh, ow, &mut scratch.dpad);
        for ci in 0..c {
            for y in 0..h {
                let s0 = (ci * ph + y + pads.top) * pw + pads.left;
                let d0 = (ci * h + y) * w;
                dx[d0..d0 + w].copy_from_slice(&scratch.dpad[s0..s0 + w]);
            }
        }
    }
}

/// One image, depthwise: each channel is convolved with its own `k×k` kernel
/// (`wts` is `[C×k×k]`). `out` must be zeroed.
pub(crate) fn dw_fwd_image<T: Scalar>(
    out: &mut [T],
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    wts: &[T],
    k: usize,
    stride: usize,
    pads: Pads,
    scratch: &mut ConvScratch<T>,
) -> (usize, usize) {
    let (oh, ow) = pads.out_extent(h, w, k, stride);
    let (ph, pw) = pad_chw(x, c, h, w, pads, &mut scratch.padded);
    let xp = &scratch.padded;
    for ci in 0..c {
        let wbase = ci * k * k;
        for i in 0..k {
            for j in 0..k {
                let wv = wts[wbase + i * k + j];
                if wv == T::zero() {
                    continue;
                }
                for oy in 0..oh {
                    let src = (ci * ph + oy * stride + i) * pw + j;
                    let dst = (ci * oh + oy) * ow;
                    if stride == 1 {
                        let row = &xp[src..src + ow];
                        let orow = &mut out[dst..dst + ow];
                        for (ov, &xv) in orow.iter_mut().zip(row.iter()) {
                            *ov = *ov + wv * xv;
                        }
                    } else {
                        for ox in 0..ow {
                            out[dst + ox] = out[dst + ox] + wv * xp[src + ox * stride];
                        }
                    }
                }
            }
        }
    }
    (oh, ow)
}

pub(crate) fn dw_bwd_image<T: Scalar>(
    dx: Option<&mut [T]>,
    dw: &mut [T],
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    wts: &[T],
    k: usize,
    stride: usize,
    pads: Pads,
    dy: &[T],
    scratch: &mut ConvScratch<T>,
) {
    let (oh, ow) = pads.out_extent(h, w, k, stride);
    let (ph, pw) = pad_chw(x, c, h, w, pads, &mut scratch.padded);
    let xp = &scratch.padded;
    for ci in 0..c {
        let wbase = ci * k * k;
        for i in 0..k {
            for j in 0..k {
                let mut acc = T::zero();
                for oy in 0..oh {
                    let src = (ci * ph + oy * stride + i) * pw + j;
                    let dyo = (ci * oh + oy) * ow;
                    if stride == 1 {
                        for (xv, dv) in xp[src..src + ow].iter().zip(dy[dyo..dyo + ow].iter()) {
                            acc = acc + *xv * *dv;
                        }
                    } else {
                        for ox in 0..ow {
                            acc = acc + xp[src + ox * stride] * dy[dyo + ox];
                        }
                    }
                }
                dw[wbase + i * k + j] = dw[wbase + i * k + j] + acc;
            }
        }
    }
    if let Some(dx) = dx {
        scratch.dpad.clear();
        scratch.dpad.resize(c * ph * pw, T::zero());
        let dxp = &mut scratch.dpad;
        for ci in 0..c {
            let wbase = ci * k * k;
            for i in 0..k {
                for j in 0..k {
                    let wv = wts[wbase + i * k + j];
                    if wv == T::zero() {
                        continue;
                    }
                    for oy in 0..oh {
                        let dst = (ci * ph + oy * stride + i) * pw + j;
                        let dyo = (ci * oh + oy) * ow;
                        if stride == 1 {
                            for ox in 0..ow {
                                dxp[dst + ox] = dxp[dst + ox] + wv * dy[dyo + ox];
                            }
                        } else {
                            for ox in 0..ow {
                                dxp[dst + ox * stride] = dxp[dst + ox * stride] + wv * dy[dyo + ox];
                            }
                        }
                    }
                }
            }
        }
        for ci in 0..c {
            for y in 0..h {
                let s0 = (ci * ph + y + pads.top) * pw + pads.left;
                let d0 = (ci * h + y) * w;
                dx[d0..d0 + w].copy_from_slice(&dxp[s0..s0 + w]);
            }
        }
    }
}

/// Per-channel arithmetic mean over the spatial axes of a `[C×H×W]` tensor.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = expect_rank3(input, "global_avg_pool input")?;
    let hw = h * w;
    let inv = s::<T>(1.0 / hw as f64);
    let data = input
        .data()
        .chunks_exact(hw)
        .map(|ch| ch.iter().fold(T::zero(), |a, &v| a + v) * inv)
        .collect();
    Tensor::new(vec![c], data)
}

/// Gradient of [`global_avg_pool`]: each spatial position of channel `c`
/// receives `grad[c] / (H·W)`.
pub fn global_avg_pool_backward<T: Scalar>(grad_out: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let c = match grad_out.shape() {
        [c] => *c,
        other => return Err(Error::shape(format!("global_avg_pool grad: expected rank 1, got {other:?}"))),
    };
    let inv = s::<T>(1.0 / (h * w) as f64);
    let mut out = Tensor::zeros(vec![c, h, w]);
    for (chunk, &g) in out.data_mut().chunks_exact_mut(h * w).zip(grad_out.data()) {
        chunk.fill(g * inv);
    }
    Ok(out)
}

/// Index of the maximum element; ties break to the lowest index.
pub fn argmax<T: Scalar>(v: &Tensor<T>) -> Result<usize> {
    if v.shape().len() != 1 {
        return Err(Error::shape(format!("argmax: expected rank 1, got {:?}", v.shape())));
    }
    argmax_slice(v.data())
}

/// Slice form of [`argmax`]; errors on an empty slice.
pub fn argmax_slice<T: Scalar>(values: &[T]) -> Result<usize> {
    if values.is_empty() {
        return Err(Error::invalid("argmax: empty input"));
    }
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_validation() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 4]).is_ok());
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn he_init_deterministic() {
        let a: Tensor = he_init(&[1], 2, &mut Rng::new(9)).unwrap();
        let b: Tensor = he_init(&[1], 2, &mut Rng::new(9)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn he_init_variance_matches_fan_in() {
        let t: Tensor<f64> = he_init(&[10_000], 50, &mut Rng::new(123)).unwrap();
        let mean = t.data().iter().sum::<f64>() / t.numel() as f64;
        let var = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t.numel() as f64;
        let target = 2.0 / 50.0;
        assert!((var - target).abs() < 0.15 * target, "sample variance {var} vs {target}");
    }

    #[test]
    fn he_init_rejects_bad_args() {
        assert!(he_init::<f32>(&[1], 0, &mut Rng::new(1)).is_err());
        assert!(he_init::<f32>(&[], 3, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn matmul_known_product() {
        let a = Tensor::new(vec![2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![5.0f32, 6.0, 7.0, 8.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::new(vec![2, 3], vec![1.0f32, -2.0, 3.0, 0.5, 4.0, -1.0]).unwrap();
        let eye = Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(matmul(&a, &eye).unwrap().data(), a.data());
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = Tensor::<f32>::zeros(vec![2, 3]);
        let b = Tensor::<f32>::zeros(vec![4, 2]);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::new(vec![1, 1, 1, 1], vec![1.0f32]).unwrap();
        let y = conv2d_forward(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_all_ones_sums() {
        let x = Tensor::full(vec![1, 3, 3], 1.0f32);
        let k = Tensor::full(vec![1, 1, 3, 3], 1.0f32);
        let y = conv2d_forward(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv_non_integral_output_errors() {
        let x = Tensor::<f32>::zeros(vec![1, 4, 4]);
        let k = Tensor::<f32>::zeros(vec![1, 1, 3, 3]);
        assert!(conv2d_forward(&x, &k, 2, 0).is_err());
    }

    #[test]
    fn conv_channel_mismatch_errors() {
        let x = Tensor::<f32>::zeros(vec![2, 3, 3]);
        let k = Tensor::<f32>::zeros(vec![1, 1, 3, 3]);
        assert!(conv2d_forward(&x, &k, 1, 0).is_err());
    }

    #[test]
    fn conv_zero_padding_reads_zero() {
        // 3x3 all-ones kernel with pad 1: corner outputs only sum the four
        // in-range pixels, so padding must read as zero.
        let x = Tensor::full(vec![1, 2, 2], 1.0f32);
        let k = Tensor::full(vec![1, 1, 3, 3], 1.0f32);
        let y = conv2d_forward(&x, &k, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[4.0; 4]);
    }

    #[test]
    fn conv_backward_zero_grad_is_zero() {
        let x = Tensor::full(vec![2, 4, 4], 0.5f32);
        let k = Tensor::full(vec![3, 2, 3, 3], 0.25f32);
        let dy = Tensor::zeros(vec![3, 4, 4]);
        let (dx, dw) = conv2d_backward(&x, &k, &dy, 1, 1).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        assert!(dw.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_backward_scalar_chain_rule() {
        let x = Tensor::new(vec![1, 1, 1], vec![3.0f32]).unwrap();
        let k = Tensor::new(vec![1, 1, 1, 1], vec![2.0f32]).unwrap();
        let dy = Tensor::new(vec![1, 1, 1], vec![7.0f32]).unwrap();
        let (dx, dw) = conv2d_backward(&x, &k, &dy, 1, 0).unwrap();
        assert_eq!(dx.data(), &[14.0]); // k * dy
        assert_eq!(dw.data(), &[21.0]); // x * dy
    }

    /// Central-difference oracle for the conv gradients, evaluated in f64.
    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = Rng::new(77);
        let c = 2;
        let (h, w) = (5, 5);
        let o = 3;
        let k = 3;
        let stride = 2;
        let pad = 1;
        let x = Tensor::<f64>::new(
            vec![c, h, w],
            (0..c * h * w).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        )
        .unwrap();
        let wts = Tensor::<f64>::new(
            vec![o, c, k, k],
            (0..o * c * k * k).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        )
        .unwrap();
        // Scalar loss: weighted sum of outputs with fixed coefficients.
        let y0 = conv2d_forward(&x, &wts, stride, pad).unwrap();
        let coeffs: Vec<f64> = (0..y0.numel()).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let loss = |y: &Tensor<f64>| -> f64 { y.data().iter().zip(&coeffs).map(|(a, b)| a * b).sum() };

        let dy = Tensor::new(y0.shape().to_vec(), coeffs.clone()).unwrap();
        let (dx, dw) = conv2d_backward(&x, &wts, &dy, stride, pad).unwrap();

        let hstep = 1e-5;
        let mut max_rel: f64 = 0.0;
        for idx in 0..x.numel() {
            let mut xp = x.clone();
            xp.data_mut()[idx] += hstep;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= hstep;
            let num = (loss(&conv2d_forward(&xp, &wts, stride, pad).unwrap())
                - loss(&conv2d_forward(&xm, &wts, stride, pad).unwrap()))
                / (2.0 * hstep);
            let a = dx.data()[idx];
            max_rel = max_rel.max((a - num).abs() / a.abs().max(num.abs()).max(1e-8));
        }
        for idx in 0..wts.numel() {
            let mut wp = wts.clone();
            wp.data_mut()[idx] += hstep;
            let mut wm = wts.clone();
            wm.data_mut()[idx] -= hstep;
            let num = (loss(&conv2d_forward(&x, &wp, stride, pad).unwrap())
                - loss(&conv2d_forward(&x, &wm, stride, pad).unwrap()))
                / (2.0 * hstep);
            let a = dw.data()[idx];
            max_rel = max_rel.max((a - num).abs() / a.abs().max(num.abs()).max(1e-8));
        }
        assert!(max_rel <= 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn global_avg_pool_means() {
        let x = Tensor::new(vec![2, 2, 2], vec![3.0f32, 3.0, 3.0, 3.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.data(), &[3.0, 2.5]);
    }

    #[test]
    fn global_avg_pool_degenerate_spatial() {
        let x = Tensor::new(vec![3, 1, 1], vec![1.0f32, -2.0, 0.5]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), x.data());
    }

    #[test]
    fn global_avg_pool_backward_distributes() {
        let g = Tensor::new(vec![2], vec![4.0f32, -8.0]).unwrap();
        let dx = global_avg_pool_backward(&g, 2, 2).unwrap();
        assert_eq!(dx.data(), &[1.0, 1.0, 1.0, 1.0, -2.0, -2.0, -2.0, -2.0]);
    }

    #[test]
    fn argmax_cases() {
        let t = Tensor::new(vec![3], vec![0.1f32, 0.7, 0.2]).unwrap();
        assert_eq!(argmax(&t).unwrap(), 1);
        let tie = Tensor::new(vec![2], vec![0.5f32, 0.5]).unwrap();
        assert_eq!(argmax(&tie).unwrap(), 0);
        let single = Tensor::new(vec![1], vec![-3.0f32]).unwrap();
        assert_eq!(argmax(&single).unwrap(), 0);
        assert!(argmax_slice::<f32>(&[]).is_err());
    }

    #[test]
    fn same_pads_geometry() {
        // Even extent, stride 2: the extra padding lands bottom/right.
        assert_eq!(Pads::same(224, 224, 3, 2), Pads { top: 0, bottom: 1, left: 0, right: 1 });
        assert_eq!(Pads::same(16, 16, 3, 2), Pads { top: 0, bottom: 1, left: 0, right: 1 });
        // Odd extent pads symmetrically.
        assert_eq!(Pads::same(15, 15, 3, 2), Pads::symmetric(1));
        // Stride 1 keeps extent.
        assert_eq!(Pads::same(56, 56, 3, 1), Pads::symmetric(1));
        let p = Pads::same(224, 224, 3, 2);
        assert_eq!(p.out_extent(224, 224, 3, 2), (112, 112));
    }
}
