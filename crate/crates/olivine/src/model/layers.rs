//! Batched layer kernels: forward and exact backward for every layer kind the
//! presets use. Tensors are `[B×C×H×W]` (or `[B×F]` after pooling).

use crate::tensor::{s, ConvScratch, Pads, Scalar, Tensor};
use crate::tensor::{conv_bwd_image, conv_fwd_image, dw_bwd_image, dw_fwd_image};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu6,
    Silu,
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    // Branch on sign for numerical stability.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn act_eval<T: Scalar>(a: Activation, x: T) -> T {
    match a {
        Activation::Relu6 => x.max(T::zero()).min(s(6.0)),
        Activation::Silu => x * sigmoid(x),
    }
}

#[inline]
fn act_grad<T: Scalar>(a: Activation, x: T) -> T {
    match a {
        Activation::Relu6 => {
            if x > T::zero() && x < s(6.0) {
                T::one()
            } else {
                T::zero()
            }
        }
        Activation::Silu => {
            let sg = sigmoid(x);
            sg * (T::one() + x * (T::one() - sg))
        }
    }
}

pub(crate) fn activation_forward<T: Scalar>(a: Activation, x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| act_eval(a, v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub(crate) fn activation_backward<T: Scalar>(a: Activation, x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().zip(dy.data()).map(|(&v, &g)| g * act_grad(a, v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub(crate) fn dims4<T: Scalar>(x: &Tensor<T>) -> (usize, usize, usize, usize) {
    match x.shape() {
        [b, c, h, w] => (*b, *c, *h, *w),
        other => panic!("expected rank-4 tensor, got {other:?}"),
    }
}

/// Standard convolution over a batch; "same" geometry (output extent
/// `ceil(extent/stride)`, odd padding on the bottom/right).
pub(crate) fn conv_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize) -> Tensor<T> {
    let (b, c, h, wd) = dims4(x);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let pads = Pads::same(h, wd, k, stride);
    let (oh, ow) = pads.out_extent(h, wd, k, stride);
    let mut y = Tensor::zeros(vec![b, o, oh, ow]);
    let mut scratch = ConvScratch::new();
    for bi in 0..b {
        conv_fwd_image(
            &mut y.data_mut()[bi * o * oh * ow..(bi + 1) * o * oh * ow],
            &x.data()[bi * c * h * wd..(bi + 1) * c * h * wd],
            c,
            h,
            wd,
            w.data(),
            o,
            k,
            stride,
            pads,
            &mut scratch,
        );
    }
    y
}

pub(crate) fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>) {
    let (b, c, h, wd) = dims4(x);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let pads = Pads::same(h, wd, k, stride);
    let (oh, ow) = pads.out_extent(h, wd, k, stride);
    let mut dw = Tensor::zeros(w.shape().to_vec());
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape().to_vec()));
    let mut scratch = ConvScratch::new();
    for bi in 0..b {
        let dx_slice = dx
            .as_mut()
            .map(|t| &mut t.data_mut()[bi * c * h * wd..(bi + 1) * c * h * wd]);
        conv_bwd_image(
            dx_slice,
            dw.data_mut(),
            &x.data()[bi * c * h * wd..(bi + 1) * c * h * wd],
            c,
            h,
            wd,
            w.data(),
            o,
            k,
            stride,
            pads,
            &dy.data()[bi * o * oh * ow..(bi + 1) * o * oh * ow],
            &mut scratch,
        );
    }
    (dx, dw)
}

/// Depthwise convolution over a batch; weights are `[C×1×k×k]`.
pub(crate) fn depthwise_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize) -> Tensor<T> {
    let (b, c, h, wd) = dims4(x);
    let k = w.shape()[2];
    let pads = Pads::same(h, wd, k, stride);
    let (oh, ow) = pads.out_extent(h, wd, k, stride);
    let mut y = Tensor::zeros(vec![b, c, oh, ow]);
    let mut scratch = ConvScratch::new();
    for bi in 0..b {
        dw_fwd_image(
            &mut y.data_mut()[bi * c * oh * ow..(bi + 1) * c * oh * ow],
            &x.data()[bi * c * h * wd..(bi + 1) * c * h * wd],
            c,
            h,
            wd,
            w.data(),
            k,
            stride,
            pads,
            &mut scratch,
        );
    }
    y
}

pub(crate) fn depthwise_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>) {
    let (b, c, h, wd) = dims4(x);
    let k = w.shape()[2];
    let pads = Pads::same(h, wd, k, stride);
    let (oh, ow) = pads.out_extent(h, wd, k, stride);
    let mut dw = Tensor::zeros(w.shape().to_vec());
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape().to_vec()));
    let mut scratch = ConvScratch::new();
    for bi in 0..b {
        let dx_slice = dx
            .as_mut()
            .map(|t| &mut t.data_mut()[bi * c * h * wd..(bi + 1) * c * h * wd]);
        dw_bwd_image(
            dx_slice,
            dw.data_mut(),
            &x.data()[bi * c * h * wd..(bi + 1) * c * h * wd],
            c,
            h,
            wd,
            w.data(),
            k,
            stride,
            pads,
            &dy.data()[bi * c * oh * ow..(bi + 1) * c * oh * ow],
            &mut scratch,
        );
    }
    (dx, dw)
}

pub(crate) struct BnCache<T: Scalar> {
    pub mean: Vec<T>,
    pub invstd: Vec<T>,
    pub batch_stats: bool,
}

/// Per-channel mean and biased (1/N) variance over batch and spatial axes.
pub(crate) fn bn_batch_stats<T: Scalar>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let (b, c, h, w) = dims4(x);
    let hw = h * w;
    let inv_n = s::<T>(1.0 / (b * hw) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ci in 0..c {
        let mut sum = T::zero();
        for bi in 0..b {
            let base = (bi * c + ci) * hw;
            for &v in &x.data()[base..base + hw] {
                sum = sum + v;
            }
        }
        let m = sum * inv_n;
        let mut sq = T::zero();
        for bi in 0..b {
            let base = (bi * c + ci) * hw;
            for &v in &x.data()[base..base + hw] {
                let d = v - m;
                sq = sq + d * d;
            }
        }
        mean[ci] = m;
        var[ci] = sq * inv_n;
    }
    (mean, var)
}

/// Normalizes with the supplied statistics: `y = γ·(x − μ)/√(σ² + ε) + β`.
/// The caller decides whether `mean`/`var` are batch or running statistics
/// and flags the cache accordingly (the backward formula differs).
pub(crate) fn bn_apply<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    mean: Vec<T>,
    var: &[T],
    epsilon: f64,
    batch_stats: bool,
) -> (Tensor<T>, BnCache<T>) {
    let (b, c, h, w) = dims4(x);
    let hw = h * w;
    let eps = s::<T>(epsilon);
    let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut y = Tensor::zeros(x.shape().to_vec());
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * hw;
            let (g, bt, m, is) = (gamma[ci], beta[ci], mean[ci], invstd[ci]);
            let src = &x.data()[base..base + hw];
            let dst = &mut y.data_mut()[base..base + hw];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = g * (v - m) * is + bt;
            }
        }
    }
    (y, BnCache { mean, invstd, batch_stats })
}

pub(crate) struct BnGrads<T: Scalar> {
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

/// Backward through batch norm. Returns input gradients plus, when
/// `need_param_grads`, dγ/dβ. With running statistics the normalization is an
/// affine map, so `dx = dy·γ·invstd`.
pub(crate) fn bn_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    cache: &BnCache<T>,
    dy: &Tensor<T>,
    need_param_grads: bool,
) -> (Tensor<T>, Option<BnGrads<T>>) {
    let (b, c, h, w) = dims4(x);
    let hw = h * w;
    let n = s::<T>((b * hw) as f64);
    let mut dx = Tensor::zeros(x.shape().to_vec());
    let mut grads = need_param_grads.then(|| BnGrads { dgamma: vec![T::zero(); c], dbeta: vec![T::zero(); c] });

    for ci in 0..c {
        let (m, is, g) = (cache.mean[ci], cache.invstd[ci], gamma[ci]);
        // First pass: reductions.
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for bi in 0..b {
            let base = (bi * c + ci) * hw;
            let xs = &x.data()[base..base + hw];
            let dys = &dy.data()[base..base + hw];
            for (&xv, &dv) in xs.iter().zip(dys) {
                sum_dy = sum_dy + dv;
                sum_dy_xhat = sum_dy_xhat + dv * (xv - m) * is;
            }
        }
        if let Some(gr) = grads.as_mut() {
            gr.dgamma[ci] = sum_dy_xhat;
            gr.dbeta[ci] = sum_dy;
        }
        // Second pass: input gradients.
        if cache.batch_stats {
            let mean_dy = sum_dy / n;
            let mean_dy_xhat = sum_dy_xhat / n;
            for bi in 0..b {
                let base = (bi * c + ci) * hw;
                let xs = &x.data()[base..base + hw];
                let dys = &dy.data()[base..base + hw];
                let dxs = &mut dx.data_mut()[base..base + hw];
                for ((dst, &xv), &dv) in dxs.iter_mut().zip(xs).zip(dys) {
                    let xhat = (xv - m) * is;
                    *dst = g * is * (dv - mean_dy - xhat * mean_dy_xhat);
                }
            }
        } else {
            let scale = g * is;
            for bi in 0..b {
                let base = (bi * c + ci) * hw;
                let dys = &dy.data()[base..base + hw];
                let dxs = &mut dx.data_mut()[base..base + hw];
                for (dst, &dv) in dxs.iter_mut().zip(dys) {
                    *dst = scale * dv;
                }
            }
        }
    }
    (dx, grads)
}

/// `[B×C×H×W]` → `[B×C]` per-channel means.
pub(crate) fn gap_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (b, c, h, w) = dims4(x);
    let hw = h * w;
    let inv = s::<T>(1.0 / hw as f64);
    let mut y = Tensor::zeros(vec![b, c]);
    for (o, chunk) in y.data_mut().iter_mut().zip(x.data().chunks_exact(hw)) {
        *o = chunk.iter().fold(T::zero(), |a, &v| a + v) * inv;
    }
    y
}

pub(crate) fn gap_backward<T: Scalar>(dy: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (b, c) = (dy.shape()[0], dy.shape()[1]);
    let hw = h * w;
    let inv = s::<T>(1.0 / hw as f64);
    let mut dx = Tensor::zeros(vec![b, c, h, w]);
    for (chunk, &g) in dx.data_mut().chunks_exact_mut(hw).zip(dy.data()) {
        chunk.fill(g * inv);
    }
    dx
}

/// Fully connected: `y[b,o] = Σ_i w[o,i]·x[b,i] + bias[o]`.
pub(crate) fn dense_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: &[T]) -> Tensor<T> {
    let (b, inf) = (x.shape()[0], x.shape()[1]);
    let out = w.shape()[0];
    let mut y = Tensor::zeros(vec![b, out]);
    for bi in 0..b {
        let xr = &x.data()[bi * inf..(bi + 1) * inf];
        let yr = &mut y.data_mut()[bi * out..(bi + 1) * out];
        for (o, (wr, &bv)) in yr.iter_mut().zip(w.data().chunks_exact(inf).zip(bias)) {
            let mut acc = bv;
            for (&wv, &xv) in wr.iter().zip(xr) {
                acc = acc + wv * xv;
            }
            *o = acc;
        }
    }
    y
}

pub(crate) fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Vec<T>) {
    let (b, inf) = (x.shape()[0], x.shape()[1]);
    let out = w.shape()[0];
    let mut dw = Tensor::zeros(w.shape().to_vec());
    let mut db = vec![T::zero(); out];
    for bi in 0..b {
        let xr = &x.data()[bi * inf..(bi + 1) * inf];
        let dyr = &dy.data()[bi * out..(bi + 1) * out];
        for (oi, &g) in dyr.iter().enumerate() {
            db[oi] = db[oi] + g;
            let dwr = &mut dw.data_mut()[oi * inf..(oi + 1) * inf];
            for (dst, &xv) in dwr.iter_mut().zip(xr) {
                *dst = *dst + g * xv;
            }
        }
    }
    let dx = need_dx.then(|| {
        let mut dx = Tensor::zeros(x.shape().to_vec());
        for bi in 0..b {
            let dyr = &dy.data()[bi * out..(bi + 1) * out];
            let dxr = &mut dx.data_mut()[bi * inf..(bi + 1) * inf];
            for (oi, &g) in dyr.iter().enumerate() {
                let wr = &w.data()[oi * inf..(oi + 1) * inf];
                for (dst, &wv) in dxr.iter_mut().zip(wr) {
                    *dst = *dst + g * wv;
                }
            }
        }
        dx
    });
    (dx, dw, db)
}

/// Row-wise stable softmax over `[B×K]`.
pub(crate) fn softmax_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let k = x.shape()[1];
    let mut y = Tensor::zeros(x.shape().to_vec());
    for (yr, xr) in y.data_mut().chunks_exact_mut(k).zip(x.data().chunks_exact(k)) {
        let max = xr.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
        let mut sum = T::zero();
        for (o, &v) in yr.iter_mut().zip(xr) {
            let e = (v - max).exp();
            *o = e;
            sum = sum + e;
        }
        let inv = T::one() / sum;
        for o in yr.iter_mut() {
            *o = *o * inv;
        }
    }
    y
}

pub(crate) struct SeCache<T: Scalar> {
    /// Pooled input `[B×C]`.
    pub pooled: Vec<T>,
    /// Pre-activation of the reduce layer `[B×Cr]`.
    pub a1: Vec<T>,
    /// Post-SiLU of the reduce layer `[B×Cr]`.
    pub h1: Vec<T>,
    /// Gate values `[B×C]`.
    pub z: Vec<T>,
}

/// Squeeze-and-excitation: `z = sigmoid(fc2(silu(fc1(gap(x)))))`, output
/// `x · z` per channel. Reduced width is `max(1, C/ratio)`.
pub(crate) fn se_forward<T: Scalar>(
    x: &Tensor<T>,
    fc1_w: &Tensor<T>,
    fc1_b: &[T],
    fc2_w: &Tensor<T>,
    fc2_b: &[T],
) -> (Tensor<T>, SeCache<T>) {
    let (b, c, h, w) = dims4(x);
    let hw = h * w;
    let cr = fc1_w.shape()[0];
    let inv = s::<T>(1.0 / hw as f64);

    let mut pooled = vec![T::zero(); b * c];
    for (o, chunk) in pooled.iter_mut().zip(x.data().chunks_exact(hw)) {
        *o = chunk.iter().fold(T::zero(), |a, &v| a + v) * inv;
    }
    let mut a1 = vec![T::zero(); b * cr];
    for bi in 0..b {
        let sr = &pooled[bi * c..(bi + 1) * c];
        for (j, (wr, &bv)) in fc1_w.data().chunks_exact(c).zip(fc1_b).enumerate() {
            let mut acc = bv;
            for (&wv, &sv) in wr.iter().zip(sr) {
                acc = acc + wv * sv;
            }
            a1[bi * cr + j] = acc;
        }
    }
    let h1: Vec<T> = a1.iter().map(|&v| v * sigmoid(v)).collect();
    let mut z = vec![T::zero(); b * c];
    for bi in 0..b {
        let hr = &h1[bi * cr..(bi + 1) * cr];
        for (ci, (wr, &bv)) in fc2_w.data().chunks_exact(cr).zip(fc2_b).enumerate() {
            let mut acc = bv;
            for (&wv, &hv) in wr.iter().zip(hr) {
                acc = acc + wv * hv;
            }
            z[bi * c + ci] = sigmoid(acc);
        }
    }
    let mut y = Tensor::zeros(x.shape().to_vec());
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * hw;
            let zv = z[bi * c + ci];
            let src = &x.data()[base..base + hw];
            let dst = &mut y.data_mut()[base..base + hw];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = v * zv;
            }
        }
    }
    (y, SeCache { pooled, a1, h1, z })
}

pub(crate) struct SeGrads<T: Scalar> {
    pub dfc1_w: Tensor<T>,
    pub dfc1_b: Vec<T>,
    pub dfc2_w: Tensor<T>,
    pub dfc2_b: Vec<T>,
}

pub(crate) fn se_backward<T: Scalar>(
    x: &Tensor<T>,
    fc1_w: &Tensor<T>,
    fc2_w: &Tensor<T>,
    cache: &SeCache<T>,
    dy: &Tensor<T>,
    need_param_grads: bool,
) -> (Tensor<T>, Option<SeGrads<T>>) {
    let (b, c, h, w) = dims4(x);
    let hw = h * w;
    let cr = fc1_w.shape()[0];
    let inv = s::<T>(1.0 / hw as f64);

    // dz[b,c] = Σ_hw dy·x; direct path dx = dy·z.
    let mut dz = vec![T::zero(); b * c];
    let mut dx = Tensor::zeros(x.shape().to_vec());
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * hw;
            let zv = cache.z[bi * c + ci];
            let xs = &x.data()[base..base + hw];
            let dys = &dy.data()[base..base + hw];
            let dxs = &mut dx.data_mut()[base..base + hw];
            let mut acc = T::zero();
            for ((dst, &xv), &dv) in dxs.iter_mut().zip(xs).zip(dys) {
                acc = acc + dv * xv;
                *dst = dv * zv;
            }
            dz[bi * c + ci] = acc;
        }
    }
    // Through the sigmoid gate.
    let da2: Vec<T> = dz
        .iter()
        .zip(&cache.z)
        .map(|(&g, &zv)| g * zv * (T::one() - zv))
        .collect();
    // fc2 gradients and dh1.
    let mut dfc2_w = Tensor::zeros(fc2_w.shape().to_vec());
    let mut dfc2_b = vec![T::zero(); c];
    let mut dh1 = vec![T::zero(); b * cr];
    for bi in 0..b {
        let hr = &cache.h1[bi * cr..(bi + 1) * cr];
        for ci in 0..c {
            let g = da2[bi * c + ci];
            dfc2_b[ci] = dfc2_b[ci] + g;
            let wr = &fc2_w.data()[ci * cr..(ci + 1) * cr];
            let dwr = &mut dfc2_w.data_mut()[ci * cr..(ci + 1) * cr];
            for ((dst, &hv), (&wv, dh)) in dwr
                .iter_mut()
                .zip(hr)
                .zip(wr.iter().zip(&mut dh1[bi * cr..(bi + 1) * cr]))
            {
                *dst = *dst + g * hv;
                *dh = *dh + g * wv;
            }
        }
    }
    // Through the inner SiLU.
    let da1: Vec<T> = dh1
        .iter()
        .zip(&cache.a1)
        .map(|(&g, &a)| g * act_grad(Activation::Silu, a))
        .collect();
    // fc1 gradients and ds.
    let mut dfc1_w = Tensor::zeros(fc1_w.shape().to_vec());
    let mut dfc1_b = vec![T::zero(); cr];
    let mut ds = vec![T::zero(); b * c];
    for bi in 0..b {
        let sr = &cache.pooled[bi * c..(bi + 1) * c];
        for j in 0..cr {
            let g = da1[bi * cr + j];
            dfc1_b[j] = dfc1_b[j] + g;
            let wr = &fc1_w.data()[j * c..(j + 1) * c];
            let dwr = &mut dfc1_w.data_mut()[j * c..(j + 1) * c];
            for ((dst, &sv), (&wv, dsv)) in dwr
                .iter_mut()
                .zip(sr)
                .zip(wr.iter().zip(&mut ds[bi * c..(bi + 1) * c]))
            {
                *dst = *dst + g * sv;
                *dsv = *dsv + g * wv;
            }
        }
    }
    // Pooling path back into dx.
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * hw;
            let add = ds[bi * c + ci] * inv;
            for dst in &mut dx.data_mut()[base..base + hw] {
                *dst = *dst + add;
            }
        }
    }
    let grads = need_param_grads.then(|| SeGrads { dfc1_w, dfc1_b, dfc2_w, dfc2_b });
    (dx, grads)
}
