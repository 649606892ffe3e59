//! Forward kernels and their vector-Jacobian products.
//!
//! Every accumulation runs in a fixed index order per output element, so
//! results are identical for any thread count. Parallelism is over samples
//! and output channels only; inner reductions are sequential.

use rayon::prelude::*;
use statrs::function::erf::erf;

use super::{Result, Scalar, Shape, Tensor, TensorError};

/// Stride/padding/dilation/groups of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec {
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            groups: 1,
        }
    }
}

impl ConvSpec {
    /// 1×1 convolution, stride 1.
    pub fn pointwise() -> Self {
        ConvSpec::default()
    }

    /// Depthwise convolution with "same" padding for an odd kernel `k` at
    /// dilation `d`: pad = d·(k−1)/2.
    pub fn depthwise_same(channels: usize, k: usize, dilation: usize) -> Self {
        ConvSpec {
            stride: (1, 1),
            padding: (dilation * (k - 1) / 2, dilation * (k - 1) / 2),
            dilation: (dilation, dilation),
            groups: channels,
        }
    }

    pub fn strided(stride: usize, padding: usize) -> Self {
        ConvSpec {
            stride: (stride, stride),
            padding: (padding, padding),
            ..ConvSpec::default()
        }
    }

    fn out_extent(&self, input: usize, k: usize, axis: usize) -> Result<usize> {
        let (s, p, d) = match axis {
            0 => (self.stride.0, self.padding.0, self.dilation.0),
            _ => (self.stride.1, self.padding.1, self.dilation.1),
        };
        let span = d * (k - 1) + 1;
        if input + 2 * p < span {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                detail: format!(
                    "effective kernel span {span} exceeds padded input extent {}",
                    input + 2 * p
                ),
            });
        }
        Ok((input + 2 * p - span) / s + 1)
    }
}

/// Valid output index range [start, end) for which the input index
/// `o*stride - pad + tap` falls inside [0, in_extent).
fn valid_range(in_extent: usize, out_extent: usize, stride: usize, pad: usize, tap: usize) -> (usize, usize) {
    let lo = pad as isize - tap as isize;
    let start = if lo > 0 {
        ((lo as usize) + stride - 1) / stride
    } else {
        0
    };
    let hi = in_extent as isize - 1 + pad as isize - tap as isize;
    if hi < 0 {
        return (0, 0);
    }
    let end = ((hi as usize) / stride + 1).min(out_extent);
    (start.min(end), end)
}

fn ensure_finite<S: Scalar>(t: Tensor<S>, op: &'static str) -> Result<Tensor<S>> {
    if t.all_finite() {
        Ok(t)
    } else {
        Err(TensorError::NonFinite { op })
    }
}

/// 2-D convolution over NCHW input with OIHW weights
/// (Cout × Cin/groups × Kh × Kw) and an optional per-Cout bias.
pub fn conv2d<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: Option<&Tensor<S>>,
    spec: &ConvSpec,
) -> Result<Tensor<S>> {
    let (xs, ws) = (x.shape(), w.shape());
    let (n, cin, h, win) = (xs.n(), xs.c(), xs.h(), xs.w());
    let (cout, cin_g, kh, kw) = (ws.n(), ws.c(), ws.h(), ws.w());
    if spec.groups == 0 || spec.stride.0 == 0 || spec.stride.1 == 0 || spec.dilation.0 == 0 || spec.dilation.1 == 0 {
        return Err(TensorError::InvalidArgument {
            op: "conv2d",
            detail: "stride, dilation and groups must be positive".into(),
        });
    }
    if cin % spec.groups != 0 {
        return Err(TensorError::InvalidArgument {
            op: "conv2d",
            detail: format!("groups {} does not divide input channels {cin}", spec.groups),
        });
    }
    if cout % spec.groups != 0 {
        return Err(TensorError::InvalidArgument {
            op: "conv2d",
            detail: format!("groups {} does not divide output channels {cout}", spec.groups),
        });
    }
    if cin_g != cin / spec.groups {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            detail: format!(
                "weight has {cin_g} channels per group, input {cin} over {} groups needs {}",
                spec.groups,
                cin / spec.groups
            ),
        });
    }
    if let Some(b) = b {
        if b.shape() != Shape([1, cout, 1, 1]) {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("bias shape {} for {cout} output channels", b.shape()),
            });
        }
    }
    let oh = spec.out_extent(h, kh, 0)?;
    let ow = spec.out_extent(win, kw, 1)?;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let (dh, dw) = spec.dilation;
    let cout_g = cout / spec.groups;

    let xd = x.data();
    let wd = w.data();
    let mut out = vec![S::ZERO; n * cout * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(idx, plane)| {
        let (ni, co) = (idx / cout, idx % cout);
        if let Some(b) = b {
            let bv = b.data()[co];
            plane.fill(bv);
        }
        let g = co / cout_g;
        for cil in 0..cin_g {
            let ci = g * cin_g + cil;
            let x_base = (ni * cin + ci) * h * win;
            for khi in 0..kh {
                let (oh0, oh1) = valid_range(h, oh, sh, ph, khi * dh);
                for kwi in 0..kw {
                    let wv = wd[((co * cin_g + cil) * kh + khi) * kw + kwi];
                    let (ow0, ow1) = valid_range(win, ow, sw, pw, kwi * dw);
                    if ow0 >= ow1 {
                        continue;
                    }
                    for ohi in oh0..oh1 {
                        let ih = ohi * sh + khi * dh - ph;
                        let x_row = &xd[x_base + ih * win..x_base + (ih + 1) * win];
                        let o_row = &mut plane[ohi * ow..(ohi + 1) * ow];
                        if sw == 1 {
                            let iw0 = ow0 + kwi * dw - pw;
                            for (o, xi) in o_row[ow0..ow1].iter_mut().zip(&x_row[iw0..iw0 + ow1 - ow0]) {
                                *o += wv * *xi;
                            }
                        } else {
                            for owi in ow0..ow1 {
                                let iw = owi * sw + kwi * dw - pw;
                                o_row[owi] += wv * x_row[iw];
                            }
                        }
                    }
                }
            }
        }
    });
    ensure_finite(Tensor::from_vec(Shape([n, cout, oh, ow]), out)?, "conv2d")
}

/// Gradients of `conv2d` w.r.t. input, weight and (optionally) bias.
pub fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    spec: &ConvSpec,
    dy: &Tensor<S>,
    want_bias: bool,
) -> (Tensor<S>, Tensor<S>, Option<Tensor<S>>) {
    let (xs, ws, ys) = (x.shape(), w.shape(), dy.shape());
    let (n, cin, h, win) = (xs.n(), xs.c(), xs.h(), xs.w());
    let (cout, cin_g, kh, kw) = (ws.n(), ws.c(), ws.h(), ws.w());
    let (oh, ow) = (ys.h(), ys.w());
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let (dh, dw) = spec.dilation;
    let cout_g = cout / spec.groups;

    let xd = x.data();
    let wd = w.data();
    let dyd = dy.data();

    // dx: gather over the co/kh/kw taps that touch each input plane.
    let mut dx = vec![S::ZERO; n * cin * h * win];
    dx.par_chunks_mut(h * win).enumerate().for_each(|(idx, plane)| {
        let (ni, ci) = (idx / cin, idx % cin);
        let g = ci / cin_g;
        let cil = ci % cin_g;
        for co in g * cout_g..(g + 1) * cout_g {
            let dy_base = (ni * cout + co) * oh * ow;
            for khi in 0..kh {
                let (oh0, oh1) = valid_range(h, oh, sh, ph, khi * dh);
                for kwi in 0..kw {
                    let wv = wd[((co * cin_g + cil) * kh + khi) * kw + kwi];
                    let (ow0, ow1) = valid_range(win, ow, sw, pw, kwi * dw);
                    if ow0 >= ow1 {
                        continue;
                    }
                    for ohi in oh0..oh1 {
                        let ih = ohi * sh + khi * dh - ph;
                        let dy_row = &dyd[dy_base + ohi * ow..dy_base + (ohi + 1) * ow];
                        let dx_row = &mut plane[ih * win..(ih + 1) * win];
                        if sw == 1 {
                            let iw0 = ow0 + kwi * dw - pw;
                            for (d, dyv) in dx_row[iw0..iw0 + ow1 - ow0].iter_mut().zip(&dy_row[ow0..ow1]) {
                                *d += wv * *dyv;
                            }
                        } else {
                            for owi in ow0..ow1 {
                                let iw = owi * sw + kwi * dw - pw;
                                dx_row[iw] += wv * dy_row[owi];
                            }
                        }
                    }
                }
            }
        }
    });

    // dw: each output-channel slab reduces over (n, oh, ow) in order.
    let mut dwv = vec![S::ZERO; cout * cin_g * kh * kw];
    dwv.par_chunks_mut(cin_g * kh * kw).enumerate().for_each(|(co, slab)| {
        let g = co / cout_g;
        for cil in 0..cin_g {
            let ci = g * cin_g + cil;
            for khi in 0..kh {
                let (oh0, oh1) = valid_range(h, oh, sh, ph, khi * dh);
                for kwi in 0..kw {
                    let (ow0, ow1) = valid_range(win, ow, sw, pw, kwi * dw);
                    if ow0 >= ow1 {
                        continue;
                    }
                    let mut acc = S::ZERO;
                    for ni in 0..n {
                        let x_base = (ni * cin + ci) * h * win;
                        let dy_base = (ni * cout + co) * oh * ow;
                        for ohi in oh0..oh1 {
                            let ih = ohi * sh + khi * dh - ph;
                            let x_row = &xd[x_base + ih * win..x_base + (ih + 1) * win];
                            let dy_row = &dyd[dy_base + ohi * ow..dy_base + (ohi + 1) * ow];
                            if sw == 1 {
                                let iw0 = ow0 + kwi * dw - pw;
                                for (dyv, xv) in dy_row[ow0..ow1].iter().zip(&x_row[iw0..iw0 + ow1 - ow0]) {
                                    acc += *dyv * *xv;
                                }
                            } else {
                                for owi in ow0..ow1 {
                                    let iw = owi * sw + kwi * dw - pw;
                                    acc += dy_row[owi] * x_row[iw];
                                }
                            }
                        }
                    }
                    slab[(cil * kh + khi) * kw + kwi] = acc;
                }
            }
        }
    });

    let db = if want_bias {
        let mut db = vec![S::ZERO; cout];
        db.par_iter_mut().enumerate().for_each(|(co, acc)| {
            for ni in 0..n {
                let base = (ni * cout + co) * oh * ow;
                for v in &dyd[base..base + oh * ow] {
                    *acc += *v;
                }
            }
        });
        Some(Tensor::from_vec(Shape([1, cout, 1, 1]), db).unwrap())
    } else {
        None
    };

    (
        Tensor::from_vec(xs, dx).unwrap(),
        Tensor::from_vec(ws, dwv).unwrap(),
        db,
    )
}

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Gelu,
    Sigmoid,
    Relu,
}

impl Activation {
    pub fn apply_scalar(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x * sigmoid_f64(x),
            Activation::Gelu => x * gauss_cdf(x),
            Activation::Sigmoid => sigmoid_f64(x),
            Activation::Relu => x.max(0.0),
        }
    }

    pub fn derivative_scalar(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = sigmoid_f64(x);
                s + x * s * (1.0 - s)
            }
            Activation::Gelu => gauss_cdf(x) + x * gauss_pdf(x),
            Activation::Sigmoid => {
                let s = sigmoid_f64(x);
                s * (1.0 - s)
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Standard normal CDF Φ(x), exact Gaussian form.
fn gauss_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn gauss_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn activation<S: Scalar>(kind: Activation, x: &Tensor<S>) -> Result<Tensor<S>> {
    let out = match kind {
        // Silu/sigmoid/relu stay in the working precision; gelu routes
        // through f64 for the error function.
        Activation::Silu => x.map(|v| {
            let s = sigmoid_s(v);
            v * s
        }),
        Activation::Sigmoid => x.map(sigmoid_s),
        Activation::Relu => x.map(|v| v.max_val(S::ZERO)),
        Activation::Gelu => x.map(|v| S::from_f64(kind.apply_scalar(v.to_f64()))),
    };
    ensure_finite(out, "activation")
}

fn sigmoid_s<S: Scalar>(x: S) -> S {
    if x >= S::ZERO {
        S::ONE / (S::ONE + (-x).exp_val())
    } else {
        let e = x.exp_val();
        e / (S::ONE + e)
    }
}

pub fn activation_backward<S: Scalar>(kind: Activation, x: &Tensor<S>, dy: &Tensor<S>) -> Tensor<S> {
    let mut out = dy.clone();
    let od = out.data_mut();
    for (o, xv) in od.iter_mut().zip(x.data()) {
        let d = match kind {
            Activation::Silu => {
                let s = sigmoid_s(*xv);
                s + *xv * s * (S::ONE - s)
            }
            Activation::Sigmoid => {
                let s = sigmoid_s(*xv);
                s * (S::ONE - s)
            }
            Activation::Relu => {
                if *xv > S::ZERO {
                    S::ONE
                } else {
                    S::ZERO
                }
            }
            Activation::Gelu => S::from_f64(kind.derivative_scalar(xv.to_f64())),
        };
        *o = *o * d;
    }
    out
}

/// Per-location channel normalization: at each (n, h, w), channels are
/// standardized to zero mean / unit population variance across C, then
/// scaled by `gamma` and shifted by `beta` (both per-channel, 1×C×1×1).
pub fn norm_channels<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: f64,
) -> Result<Tensor<S>> {
    let s = x.shape();
    let (n, c, h, w) = (s.n(), s.c(), s.h(), s.w());
    if eps <= 0.0 {
        return Err(TensorError::InvalidArgument {
            op: "norm_channels",
            detail: format!("eps must be positive, got {eps}"),
        });
    }
    for (name, t) in [("gamma", gamma), ("beta", beta)] {
        if t.shape() != Shape([1, c, 1, 1]) {
            return Err(TensorError::ShapeMismatch {
                op: "norm_channels",
                detail: format!("{name} shape {} for {c} channels", t.shape()),
            });
        }
    }
    let hw = h * w;
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let eps_s = S::from_f64(eps);
    let inv_c = S::ONE / S::from_f64(c as f64);

    let mut out = vec![S::ZERO; s.numel()];
    out.par_chunks_mut(c * hw).enumerate().for_each(|(ni, chunk)| {
        let x_base = ni * c * hw;
        let mut mu = vec![S::ZERO; hw];
        for ci in 0..c {
            let row = &xd[x_base + ci * hw..x_base + (ci + 1) * hw];
            for (m, v) in mu.iter_mut().zip(row) {
                *m += *v;
            }
        }
        for m in &mut mu {
            *m = *m * inv_c;
        }
        let mut var = vec![S::ZERO; hw];
        for ci in 0..c {
            let row = &xd[x_base + ci * hw..x_base + (ci + 1) * hw];
            for (vv, (v, m)) in var.iter_mut().zip(row.iter().zip(&mu)) {
                let d = *v - *m;
                *vv += d * d;
            }
        }
        let rstd: Vec<S> = var.iter().map(|&v| S::ONE / (v * inv_c + eps_s).sqrt_val()).collect();
        for ci in 0..c {
            let row = &xd[x_base + ci * hw..x_base + (ci + 1) * hw];
            let o_row = &mut chunk[ci * hw..(ci + 1) * hw];
            let (g, b) = (gd[ci], bd[ci]);
            for ((o, v), (m, r)) in o_row.iter_mut().zip(row).zip(mu.iter().zip(&rstd)) {
                *o = g * (*v - *m) * *r + b;
            }
        }
    });
    ensure_finite(Tensor::from_vec(s, out)?, "norm_channels")
}

pub fn norm_channels_backward<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    eps: f64,
    dy: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let s = x.shape();
    let (c, hw) = (s.c(), s.h() * s.w());
    let xd = x.data();
    let gd = gamma.data();
    let dyd = dy.data();
    let eps_s = S::from_f64(eps);
    let inv_c = S::ONE / S::from_f64(c as f64);

    let mut dx = vec![S::ZERO; s.numel()];
    // Per-sample partials for the affine grads, reduced in sample order.
    let mut partials: Vec<(Vec<S>, Vec<S>)> = Vec::with_capacity(s.n());
    dx.par_chunks_mut(c * hw)
        .enumerate()
        .map(|(ni, chunk)| {
            let x_base = ni * c * hw;
            let mut mu = vec![S::ZERO; hw];
            for ci in 0..c {
                let row = &xd[x_base + ci * hw..x_base + (ci + 1) * hw];
                for (m, v) in mu.iter_mut().zip(row) {
                    *m += *v;
                }
            }
            for m in &mut mu {
                *m = *m * inv_c;
            }
            let mut var = vec![S::ZERO; hw];
            for ci in 0..c {
                let row = &xd[x_base + ci * hw..x_base + (ci + 1) * hw];
                for (vv, (v, m)) in var.iter_mut().zip(row.iter().zip(&mu)) {
                    let d = *v - *m;
                    *vv += d * d;
                }
            }
            let rstd: Vec<S> = var.iter().map(|&v| S::ONE / (v * inv_c + eps_s).sqrt_val()).collect();

            // s1 = Σ_c γ g, s2 = Σ_c γ g x̂ at each location.
            let mut s1 = vec![S::ZERO; hw];
            let mut s2 = vec![S::ZERO; hw];
            for ci in 0..c {
                let g = gd[ci];
                let x_row = &xd[x_base + ci * hw..x_base + (ci + 1) * hw];
                let dy_row = &dyd[x_base + ci * hw..x_base + (ci + 1) * hw];
                for i in 0..hw {
                    let gg = g * dy_row[i];
                    s1[i] += gg;
                    s2[i] += gg * (x_row[i] - mu[i]) * rstd[i];
                }
            }
            let mut dgamma = vec![S::ZERO; c];
            let mut dbeta = vec![S::ZERO; c];
            for ci in 0..c {
                let g = gd[ci];
                let x_row = &xd[x_base + ci * hw..x_base + (ci + 1) * hw];
                let dy_row = &dyd[x_base + ci * hw..x_base + (ci + 1) * hw];
                let dx_row = &mut chunk[ci * hw..(ci + 1) * hw];
                let (mut dg, mut db) = (S::ZERO, S::ZERO);
                for i in 0..hw {
                    let xhat = (x_row[i] - mu[i]) * rstd[i];
                    dx_row[i] = rstd[i] * (g * dy_row[i] - (s1[i] + xhat * s2[i]) * inv_c);
                    dg += dy_row[i] * xhat;
                    db += dy_row[i];
                }
                dgamma[ci] = dg;
                dbeta[ci] = db;
            }
            (dgamma, dbeta)
        })
        .collect_into_vec(&mut partials);

    let mut dgamma = vec![S::ZERO; c];
    let mut dbeta = vec![S::ZERO; c];
    for (pg, pb) in &partials {
        for ci in 0..c {
            dgamma[ci] += pg[ci];
            dbeta[ci] += pb[ci];
        }
    }
    (
        Tensor::from_vec(s, dx).unwrap(),
        Tensor::from_vec(Shape([1, c, 1, 1]), dgamma).unwrap(),
        Tensor::from_vec(Shape([1, c, 1, 1]), dbeta).unwrap(),
    )
}

/// Contiguous channel slab `[offset, offset+len)`.
pub fn slice_channels<S: Scalar>(x: &Tensor<S>, offset: usize, len: usize) -> Result<Tensor<S>> {
    let s = x.shape();
    if len == 0 || offset + len > s.c() {
        return Err(TensorError::InvalidArgument {
            op: "slice_channels",
            detail: format!("slab [{offset}, {}) out of {} channels", offset + len, s.c()),
        });
    }
    let hw = s.h() * s.w();
    let mut out = Vec::with_capacity(s.n() * len * hw);
    for ni in 0..s.n() {
        let base = (ni * s.c() + offset) * hw;
        out.extend_from_slice(&x.data()[base..base + len * hw]);
    }
    Tensor::from_vec(Shape([s.n(), len, s.h(), s.w()]), out)
}

/// Splits into contiguous channel slabs; sizes must sum to C.
pub fn split_channels<S: Scalar>(x: &Tensor<S>, sizes: &[usize]) -> Result<Vec<Tensor<S>>> {
    let total: usize = sizes.iter().sum();
    if total != x.shape().c() || sizes.iter().any(|&s| s == 0) {
        return Err(TensorError::InvalidArgument {
            op: "split_channels",
            detail: format!("sizes {sizes:?} must be positive and sum to {}", x.shape().c()),
        });
    }
    let mut parts = Vec::with_capacity(sizes.len());
    let mut off = 0;
    for &len in sizes {
        parts.push(slice_channels(x, off, len)?);
        off += len;
    }
    Ok(parts)
}

/// Concatenates along the channel axis; parts must agree on N, H, W.
pub fn concat_channels<S: Scalar>(parts: &[&Tensor<S>]) -> Result<Tensor<S>> {
    if parts.is_empty() {
        return Err(TensorError::InvalidArgument {
            op: "concat_channels",
            detail: "no parts".into(),
        });
    }
    let first = parts[0].shape();
    let mut c_total = 0;
    for p in parts {
        let s = p.shape();
        if (s.n(), s.h(), s.w()) != (first.n(), first.h(), first.w()) {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                detail: format!("part shape {s} does not match {first}"),
            });
        }
        c_total += s.c();
    }
    let hw = first.h() * first.w();
    let mut out = Vec::with_capacity(first.n() * c_total * hw);
    for ni in 0..first.n() {
        for p in parts {
            let pc = p.shape().c();
            let base = ni * pc * hw;
            out.extend_from_slice(&p.data()[base..base + pc * hw]);
        }
    }
    Tensor::from_vec(Shape([first.n(), c_total, first.h(), first.w()]), out)
}

/// Pairwise (fixed-tree) sum: exact for 2^k copies of the same value, and
/// schedule-independent by construction.
pub(crate) fn pairwise_sum<S: Scalar>(v: &[S]) -> S {
    match v.len() {
        0 => S::ZERO,
        1 => v[0],
        2 => v[0] + v[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
        }
    }
}

/// Per-(n, c) arithmetic mean over the spatial extent → N×C×1×1.
pub fn spatial_mean<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let s = x.shape();
    let hw = s.h() * s.w();
    if hw == 0 {
        return Err(TensorError::InvalidArgument {
            op: "spatial_mean",
            detail: "empty spatial extent".into(),
        });
    }
    let inv = S::ONE / S::from_f64(hw as f64);
    let mut out = Vec::with_capacity(s.n() * s.c());
    for plane in x.data().chunks_exact(hw) {
        out.push(pairwise_sum(plane) * inv);
    }
    Tensor::from_vec(Shape([s.n(), s.c(), 1, 1]), out)
}

pub fn spatial_mean_backward<S: Scalar>(x_shape: Shape, dy: &Tensor<S>) -> Tensor<S> {
    let hw = x_shape.h() * x_shape.w();
    let inv = S::ONE / S::from_f64(hw as f64);
    let mut dx = vec![S::ZERO; x_shape.numel()];
    for (plane, d) in dx.chunks_exact_mut(hw).zip(dy.data()) {
        plane.fill(*d * inv);
    }
    Tensor::from_vec(x_shape, dx).unwrap()
}

/// Elementwise binary kinds. `Sub` exists for the DC/HC decomposition.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BroadcastKind {
    None,
    PerSampleChannel, // b is N×C×1×1
    PerChannel,       // b is 1×C×1×1
}

pub(crate) fn broadcast_kind(a: Shape, b: Shape) -> Result<BroadcastKind> {
    if a == b {
        return Ok(BroadcastKind::None);
    }
    if b == Shape([a.n(), a.c(), 1, 1]) && (a.h(), a.w()) != (1, 1) {
        return Ok(BroadcastKind::PerSampleChannel);
    }
    if b == Shape([1, a.c(), 1, 1]) {
        return Ok(BroadcastKind::PerChannel);
    }
    Err(TensorError::ShapeMismatch {
        op: "elementwise",
        detail: format!("cannot broadcast {b} onto {a}"),
    })
}

/// Elementwise add/sub/mul. `b` may equal `a`'s shape or be a channel
/// vector (N×C×1×1 or 1×C×1×1) broadcast over the spatial extent.
pub fn elementwise<S: Scalar>(kind: BinaryKind, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let bk = broadcast_kind(a.shape(), b.shape())?;
    let s = a.shape();
    let hw = s.h() * s.w();
    let ad = a.data();
    let bd = b.data();
    let apply = |x: S, y: S| match kind {
        BinaryKind::Add => x + y,
        BinaryKind::Sub => x - y,
        BinaryKind::Mul => x * y,
    };
    let mut out = Vec::with_capacity(s.numel());
    match bk {
        BroadcastKind::None => {
            out.extend(ad.iter().zip(bd).map(|(&x, &y)| apply(x, y)));
        }
        BroadcastKind::PerSampleChannel => {
            for (i, plane) in ad.chunks_exact(hw).enumerate() {
                let bv = bd[i];
                out.extend(plane.iter().map(|&x| apply(x, bv)));
            }
        }
        BroadcastKind::PerChannel => {
            let c = s.c();
            for (i, plane) in ad.chunks_exact(hw).enumerate() {
                let bv = bd[i % c];
                out.extend(plane.iter().map(|&x| apply(x, bv)));
            }
        }
    }
    ensure_finite(Tensor::from_vec(s, out)?, "elementwise")
}

/// Gradients of `elementwise` w.r.t. both operands; broadcast gradients are
/// reduce-summed back to `b`'s shape in fixed order.
pub fn elementwise_backward<S: Scalar>(
    kind: BinaryKind,
    a: &Tensor<S>,
    b: &Tensor<S>,
    dy: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>) {
    let bk = broadcast_kind(a.shape(), b.shape()).expect("validated in forward");
    let s = a.shape();
    let hw = s.h() * s.w();
    let c = s.c();
    let dyd = dy.data();
    let ad = a.data();
    let bd = b.data();

    let da = match kind {
        BinaryKind::Add | BinaryKind::Sub => dy.clone(),
        BinaryKind::Mul => {
            let mut da = dy.clone();
            let dd = da.data_mut();
            match bk {
                BroadcastKind::None => {
                    for (d, bv) in dd.iter_mut().zip(bd) {
                        *d = *d * *bv;
                    }
                }
                BroadcastKind::PerSampleChannel => {
                    for (i, plane) in dd.chunks_exact_mut(hw).enumerate() {
                        let bv = bd[i];
                        for d in plane {
                            *d = *d * bv;
                        }
                    }
                }
                BroadcastKind::PerChannel => {
                    for (i, plane) in dd.chunks_exact_mut(hw).enumerate() {
                        let bv = bd[i % c];
                        for d in plane {
                            *d = *d * bv;
                        }
                    }
                }
            }
            da
        }
    };

    let sign = |v: S| if kind == BinaryKind::Sub { -v } else { v };
    let mut db = vec![S::ZERO; b.numel()];
    match bk {
        BroadcastKind::None => {
            for (i, d) in db.iter_mut().enumerate() {
                *d = match kind {
                    BinaryKind::Mul => dyd[i] * ad[i],
                    _ => sign(dyd[i]),
                };
            }
        }
        BroadcastKind::PerSampleChannel | BroadcastKind::PerChannel => {
            for (i, (dy_plane, a_plane)) in dyd.chunks_exact(hw).zip(ad.chunks_exact(hw)).enumerate() {
                let slot = if bk == BroadcastKind::PerSampleChannel { i } else { i % c };
                let mut acc = S::ZERO;
                match kind {
                    BinaryKind::Mul => {
                        for (dv, av) in dy_plane.iter().zip(a_plane) {
                            acc += *dv * *av;
                        }
                    }
                    _ => {
                        for dv in dy_plane {
                            acc += sign(*dv);
                        }
                    }
                }
                db[slot] += acc;
            }
        }
    }
    (da, Tensor::from_vec(b.shape(), db).unwrap())
}

/// Affine map on flattened rows: x is N×F×1×1, weight F×K×1×1, bias
/// 1×K×1×1 → N×K×1×1.
pub fn linear<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (xs, ws) = (x.shape(), w.shape());
    let (n, f) = (xs.n(), xs.c() * xs.h() * xs.w());
    let (wf, k) = (ws.n(), ws.c());
    if wf != f || (ws.h(), ws.w()) != (1, 1) {
        return Err(TensorError::ShapeMismatch {
            op: "linear",
            detail: format!("weight {ws} for {f} input features"),
        });
    }
    if b.shape() != Shape([1, k, 1, 1]) {
        return Err(TensorError::ShapeMismatch {
            op: "linear",
            detail: format!("bias {} for {k} outputs", b.shape()),
        });
    }
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![S::ZERO; n * k];
    for (ni, row) in out.chunks_exact_mut(k).enumerate() {
        row.copy_from_slice(&b.data()[..k]);
        for (fi, xv) in xd[ni * f..(ni + 1) * f].iter().enumerate() {
            let w_row = &wd[fi * k..(fi + 1) * k];
            for (o, wv) in row.iter_mut().zip(w_row) {
                *o += *xv * *wv;
            }
        }
    }
    ensure_finite(Tensor::from_vec(Shape([n, k, 1, 1]), out)?, "linear")
}

pub fn linear_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    dy: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let (xs, ws) = (x.shape(), w.shape());
    let (n, f, k) = (xs.n(), ws.n(), ws.c());
    let xd = x.data();
    let wd = w.data();
    let dyd = dy.data();

    let mut dx = vec![S::ZERO; n * f];
    for (ni, dx_row) in dx.chunks_exact_mut(f).enumerate() {
        let dy_row = &dyd[ni * k..(ni + 1) * k];
        for (fi, d) in dx_row.iter_mut().enumerate() {
            let w_row = &wd[fi * k..(fi + 1) * k];
            let mut acc = S::ZERO;
            for (dv, wv) in dy_row.iter().zip(w_row) {
                acc += *dv * *wv;
            }
            *d = acc;
        }
    }

    let mut dw = vec![S::ZERO; f * k];
    for ni in 0..n {
        let dy_row = &dyd[ni * k..(ni + 1) * k];
        for fi in 0..f {
            let xv = xd[ni * f + fi];
            let dw_row = &mut dw[fi * k..(fi + 1) * k];
            for (d, dv) in dw_row.iter_mut().zip(dy_row) {
                *d += xv * *dv;
            }
        }
    }

    let mut db = vec![S::ZERO; k];
    for dy_row in dyd.chunks_exact(k) {
        for (d, dv) in db.iter_mut().zip(dy_row) {
            *d += *dv;
        }
    }

    (
        Tensor::from_vec(xs, dx).unwrap(),
        Tensor::from_vec(ws, dw).unwrap(),
        Tensor::from_vec(Shape([1, k, 1, 1]), db).unwrap(),
    )
}

/// Mean label-smoothed cross-entropy over rows, via a numerically stable
/// log-softmax. Logits are N×K×1×1; the target distribution puts 1−ε on the
/// label and ε/K uniformly.
pub fn cross_entropy_smoothed<S: Scalar>(
    logits: &Tensor<S>,
    labels: &[usize],
    epsilon: f64,
) -> Result<Tensor<S>> {
    let s = logits.shape();
    let (n, k) = (s.n(), s.c());
    if (s.h(), s.w()) != (1, 1) {
        return Err(TensorError::ShapeMismatch {
            op: "cross_entropy_smoothed",
            detail: format!("logits must be N×K×1×1, got {s}"),
        });
    }
    if labels.len() != n {
        return Err(TensorError::ShapeMismatch {
            op: "cross_entropy_smoothed",
            detail: format!("{} labels for {n} rows", labels.len()),
        });
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(TensorError::InvalidArgument {
            op: "cross_entropy_smoothed",
            detail: format!("epsilon {epsilon} outside [0, 1)"),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(TensorError::InvalidArgument {
            op: "cross_entropy_smoothed",
            detail: format!("label {bad} out of range for {k} classes"),
        });
    }
    let ld = logits.data();
    let mut total = S::ZERO;
    for (ni, row) in ld.chunks_exact(k).enumerate() {
        let mut m = row[0];
        for v in row {
            m = m.max_val(*v);
        }
        let mut sum_exp = S::ZERO;
        for v in row {
            sum_exp += (*v - m).exp_val();
        }
        let lse = m + sum_exp.ln_val();
        // Σ_k t_k z_k = (1−ε)·z_label + (ε/K)·Σ z_k
        let mut row_sum = S::ZERO;
        for v in row {
            row_sum += *v;
        }
        let tz = S::from_f64(1.0 - epsilon) * row[labels[ni]] + S::from_f64(epsilon / k as f64) * row_sum;
        total += lse - tz;
    }
    let loss = total * (S::ONE / S::from_f64(n as f64));
    ensure_finite(Tensor::scalar(loss), "cross_entropy_smoothed")
}

pub fn cross_entropy_backward<S: Scalar>(
    logits: &Tensor<S>,
    labels: &[usize],
    epsilon: f64,
    dy: S,
) -> Tensor<S> {
    let s = logits.shape();
    let (n, k) = (s.n(), s.c());
    let ld = logits.data();
    let scale = dy * (S::ONE / S::from_f64(n as f64));
    let uniform = S::from_f64(epsilon / k as f64);
    let on_label = S::from_f64(1.0 - epsilon);
    let mut dl = vec![S::ZERO; n * k];
    for (ni, (row, d_row)) in ld.chunks_exact(k).zip(dl.chunks_exact_mut(k)).enumerate() {
        let mut m = row[0];
        for v in row {
            m = m.max_val(*v);
        }
        let mut sum_exp = S::ZERO;
        for v in row {
            sum_exp += (*v - m).exp_val();
        }
        for (ki, (d, v)) in d_row.iter_mut().zip(row).enumerate() {
            let p = (*v - m).exp_val() / sum_exp;
            let mut t = uniform;
            if ki == labels[ni] {
                t += on_label;
            }
            *d = (p - t) * scale;
        }
    }
    Tensor::from_vec(s, dl).unwrap()
}

/// Sum of all elements → scalar tensor.
pub fn sum_all<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    Tensor::scalar(pairwise_sum(x.data()))
}
