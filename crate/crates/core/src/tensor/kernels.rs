//! Forward and backward kernels operating on plain tensors.
//!
//! Every reduction walks its operands in row-major order and accumulates
//! left to right, so results are bit-reproducible for identical inputs.

use super::{arg_err, real, shape_err, strides_of, Real, Result, Tensor};

/// Stride, zero padding and channel grouping for a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub const fn same(kernel: usize) -> Self {
        ConvGeometry { stride: 1, padding: kernel / 2, groups: 1 }
    }

    pub const fn pointwise() -> Self {
        ConvGeometry { stride: 1, padding: 0, groups: 1 }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvDims {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cin_g: usize,
    cout_g: usize,
    k: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

fn conv_dims(x: &[usize], weight: &[usize], bias: Option<&[usize]>, geom: ConvGeometry) -> Result<ConvDims> {
    const OP: &str = "conv2d";
    if x.len() != 4 || weight.len() != 4 {
        return Err(shape_err(OP, format!("expected rank-4 input and kernel, got {x:?} and {weight:?}")));
    }
    let (batch, cin, h, w) = (x[0], x[1], x[2], x[3]);
    let (cout, cin_g, k, k2) = (weight[0], weight[1], weight[2], weight[3]);
    if geom.groups == 0 || geom.stride == 0 {
        return Err(arg_err(OP, "stride and groups must be positive"));
    }
    if k != k2 || k % 2 == 0 {
        return Err(shape_err(OP, format!("kernel must be square with odd extent, got {k}x{k2}")));
    }
    if cin % geom.groups != 0 || cout % geom.groups != 0 {
        return Err(shape_err(OP, format!("channels {cin}->{cout} not divisible by groups {}", geom.groups)));
    }
    if cin / geom.groups != cin_g {
        return Err(shape_err(
            OP,
            format!("kernel expects {cin_g} input channels per group, input provides {}", cin / geom.groups),
        ));
    }
    if let Some(b) = bias {
        if b != [cout] {
            return Err(shape_err(OP, format!("bias shape {b:?} does not match {cout} output channels")));
        }
    }
    if h + 2 * geom.padding < k || w + 2 * geom.padding < k {
        return Err(shape_err(OP, format!("kernel {k} larger than padded input {h}x{w}")));
    }
    let ho = (h + 2 * geom.padding - k) / geom.stride + 1;
    let wo = (w + 2 * geom.padding - k) / geom.stride + 1;
    Ok(ConvDims {
        batch,
        cin,
        h,
        w,
        cout,
        cin_g,
        cout_g: cout / geom.groups,
        k,
        ho,
        wo,
        stride: geom.stride,
        pad: geom.padding,
    })
}

/// Range of output columns whose input column `ow*stride + kw - pad` is in bounds.
#[inline]
fn valid_cols(d: &ConvDims, kw: usize) -> (usize, usize) {
    let lo = if kw >= d.pad { 0 } else { (d.pad - kw).div_ceil(d.stride) };
    let hi = if d.w + d.pad < kw + 1 { 0 } else { ((d.w - 1 + d.pad - kw) / d.stride + 1).min(d.wo) };
    (lo, hi.max(lo))
}

#[inline]
fn input_row(d: &ConvDims, oh: usize, kh: usize) -> Option<usize> {
    let ih = oh * d.stride + kh;
    if ih < d.pad || ih - d.pad >= d.h {
        None
    } else {
        Some(ih - d.pad)
    }
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Cross-correlation (no kernel flip) with optional per-output-channel bias.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let d = conv_dims(x.shape(), weight.shape(), bias.map(|b| b.shape()), geom)?;
    let xs = x.data();
    let ws = weight.data();
    let plane_in = d.h * d.w;
    let plane_out = d.ho * d.wo;
    let pointwise = d.k == 1 && d.stride == 1 && d.pad == 0;
    let mut out = vec![T::zero(); d.batch * d.cout * plane_out];
    for b in 0..d.batch {
        for co in 0..d.cout {
            let g = co / d.cout_g;
            let o_plane = &mut out[(b * d.cout + co) * plane_out..][..plane_out];
            if let Some(bias) = bias {
                o_plane.fill(bias.data()[co]);
            }
            for cig in 0..d.cin_g {
                let ci = g * d.cin_g + cig;
                let i_plane = &xs[(b * d.cin + ci) * plane_in..][..plane_in];
                let w_base = (co * d.cin_g + cig) * d.k * d.k;
                if pointwise {
                    axpy(ws[w_base], i_plane, o_plane);
                    continue;
                }
                for kh in 0..d.k {
                    for kw in 0..d.k {
                        let wv = ws[w_base + kh * d.k + kw];
                        let (lo, hi) = valid_cols(&d, kw);
                        if lo >= hi {
                            continue;
                        }
                        for oh in 0..d.ho {
                            let Some(ih) = input_row(&d, oh, kh) else { continue };
                            let o_row = &mut o_plane[oh * d.wo..][..d.wo];
                            let i_row = &i_plane[ih * d.w..][..d.w];
                            if d.stride == 1 {
                                let iw0 = lo + kw - d.pad;
                                axpy(wv, &i_row[iw0..iw0 + (hi - lo)], &mut o_row[lo..hi]);
                            } else {
                                for ow in lo..hi {
                                    o_row[ow] += wv * i_row[ow * d.stride + kw - d.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![d.batch, d.cout, d.ho, d.wo], out)
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    geom: ConvGeometry,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let d = conv_dims(x.shape(), weight.shape(), None, geom)?;
    if grad_out.shape() != [d.batch, d.cout, d.ho, d.wo] {
        return Err(shape_err("conv2d_backward", format!("output gradient shape {:?}", grad_out.shape())));
    }
    let xs = x.data();
    let ws = weight.data();
    let gs = grad_out.data();
    let plane_in = d.h * d.w;
    let plane_out = d.ho * d.wo;
    let pointwise = d.k == 1 && d.stride == 1 && d.pad == 0;
    let mut gx = vec![T::zero(); xs.len()];
    let mut gw = vec![T::zero(); ws.len()];
    let mut gb = vec![T::zero(); d.cout];
    for b in 0..d.batch {
        for co in 0..d.cout {
            let g = co / d.cout_g;
            let go_plane = &gs[(b * d.cout + co) * plane_out..][..plane_out];
            gb[co] += go_plane.iter().fold(T::zero(), |a, &v| a + v);
            for cig in 0..d.cin_g {
                let ci = g * d.cin_g + cig;
                let x_off = (b * d.cin + ci) * plane_in;
                let w_base = (co * d.cin_g + cig) * d.k * d.k;
                if pointwise {
                    gw[w_base] += dot(go_plane, &xs[x_off..x_off + plane_in]);
                    axpy(ws[w_base], go_plane, &mut gx[x_off..x_off + plane_in]);
                    continue;
                }
                for kh in 0..d.k {
                    for kw in 0..d.k {
                        let wi = w_base + kh * d.k + kw;
                        let wv = ws[wi];
                        let (lo, hi) = valid_cols(&d, kw);
                        if lo >= hi {
                            continue;
                        }
                        let mut acc = T::zero();
                        for oh in 0..d.ho {
                            let Some(ih) = input_row(&d, oh, kh) else { continue };
                            let go_row = &go_plane[oh * d.wo..][..d.wo];
                            let row_off = x_off + ih * d.w;
                            if d.stride == 1 {
                                let iw0 = row_off + lo + kw - d.pad;
                                let n = hi - lo;
                                acc += dot(&go_row[lo..hi], &xs[iw0..iw0 + n]);
                                axpy(wv, &go_row[lo..hi], &mut gx[iw0..iw0 + n]);
                            } else {
                                for ow in lo..hi {
                                    let xi = row_off + ow * d.stride + kw - d.pad;
                                    acc += go_row[ow] * xs[xi];
                                    gx[xi] += wv * go_row[ow];
                                }
                            }
                        }
                        gw[wi] += acc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), gx)?,
        Tensor::new(weight.shape().to_vec(), gw)?,
        Tensor::new(vec![d.cout], gb)?,
    ))
}

/// Elementwise functions available on the tape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Pointwise {
    Sigmoid,
    Tanh,
    Softplus,
    Relu,
    /// Saturate to `[lo, hi]`; the subgradient is 1 strictly inside and 0 elsewhere.
    Clamp { lo: f64, hi: f64 },
    /// `scale * x + shift`
    Affine { scale: f64, shift: f64 },
    Exp,
    Ln,
    Sqrt,
    Square,
    Abs,
    Recip,
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl Pointwise {
    pub(crate) fn validate(self) -> Result<()> {
        if let Pointwise::Clamp { lo, hi } = self {
            if !(lo < hi) {
                return Err(arg_err("clamp", format!("requires lo < hi, got [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Pointwise::Sigmoid => sigmoid(x),
            Pointwise::Tanh => x.tanh(),
            Pointwise::Softplus => softplus(x),
            Pointwise::Relu => x.max(T::zero()),
            Pointwise::Clamp { lo, hi } => x.max(real(lo)).min(real(hi)),
            Pointwise::Affine { scale, shift } => real::<T>(scale) * x + real(shift),
            Pointwise::Exp => x.exp(),
            Pointwise::Ln => x.ln(),
            Pointwise::Sqrt => x.sqrt(),
            Pointwise::Square => x * x,
            Pointwise::Abs => x.abs(),
            Pointwise::Recip => x.recip(),
        }
    }

    /// Derivative at input `x` with output `y`.
    #[inline]
    pub fn derivative<T: Real>(self, x: T, y: T) -> T {
        match self {
            Pointwise::Sigmoid => y * (T::one() - y),
            Pointwise::Tanh => T::one() - y * y,
            Pointwise::Softplus => sigmoid(x),
            Pointwise::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Pointwise::Clamp { lo, hi } => {
                if x > real(lo) && x < real(hi) {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Pointwise::Affine { scale, .. } => real(scale),
            Pointwise::Exp => y,
            Pointwise::Ln => x.recip(),
            Pointwise::Sqrt => real::<T>(0.5) / y,
            Pointwise::Square => x + x,
            Pointwise::Abs => {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            }
            Pointwise::Recip => -(y * y),
        }
    }
}

pub fn pointwise<T: Real>(x: &Tensor<T>, f: Pointwise) -> Result<Tensor<T>> {
    f.validate()?;
    x.ensure_finite("pointwise")?;
    let y = x.map(|v| f.apply(v));
    y.ensure_finite("pointwise")?;
    Ok(y)
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_temperature<T: Real>(x: &Tensor<T>, axis: usize, temperature: Option<&Tensor<T>>) -> Result<()> {
    const OP: &str = "softmax_axis";
    let Some(temp) = temperature else { return Ok(()) };
    let mut expected = x.shape().to_vec();
    expected[axis] = 1;
    if temp.numel() != 1 && temp.shape() != expected.as_slice() {
        return Err(shape_err(OP, format!("temperature shape {:?}, expected {expected:?} or scalar", temp.shape())));
    }
    if temp.data().iter().any(|&t| !(t > T::zero()) || !t.is_finite()) {
        return Err(arg_err(OP, "temperatures must be finite and strictly positive"));
    }
    Ok(())
}

#[inline]
fn temperature_at<T: Real>(temperature: Option<&Tensor<T>>, o: usize, i: usize, inner: usize) -> T {
    match temperature {
        None => T::one(),
        Some(t) if t.numel() == 1 => t.data()[0],
        Some(t) => t.data()[o * inner + i],
    }
}

/// Softmax of `(x - max) / T` along `axis`, restricted to the first `active`
/// entries; entries at or beyond `active` are exactly zero.
pub fn softmax_axis<T: Real>(
    x: &Tensor<T>,
    axis: usize,
    temperature: Option<&Tensor<T>>,
    active: Option<usize>,
) -> Result<Tensor<T>> {
    const OP: &str = "softmax_axis";
    if axis >= x.rank() {
        return Err(arg_err(OP, format!("axis {axis} out of range for rank {}", x.rank())));
    }
    x.ensure_finite(OP)?;
    check_temperature(x, axis, temperature)?;
    let (outer, n, inner) = outer_inner(x.shape(), axis);
    let active = active.unwrap_or(n);
    if active == 0 || active > n {
        return Err(arg_err(OP, format!("active count {active} must be in 1..={n}")));
    }
    let xs = x.data();
    let mut out = vec![T::zero(); xs.len()];
    let mut buf = vec![T::zero(); active];
    for o in 0..outer {
        for i in 0..inner {
            let t = temperature_at(temperature, o, i, inner);
            let at = |a: usize| (o * n + a) * inner + i;
            let max = (0..active).fold(T::neg_infinity(), |m, a| m.max(xs[at(a)]));
            let mut total = T::zero();
            for (a, slot) in buf.iter_mut().enumerate() {
                *slot = ((xs[at(a)] - max) / t).exp();
                total += *slot;
            }
            for (a, &v) in buf.iter().enumerate() {
                out[at(a)] = v / total;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn softmax_axis_backward<T: Real>(
    y: &Tensor<T>,
    grad_out: &Tensor<T>,
    axis: usize,
    temperature: Option<&Tensor<T>>,
    active: Option<usize>,
) -> Tensor<T> {
    let (outer, n, inner) = outer_inner(y.shape(), axis);
    let active = active.unwrap_or(n);
    let ys = y.data();
    let gs = grad_out.data();
    let mut gx = vec![T::zero(); ys.len()];
    for o in 0..outer {
        for i in 0..inner {
            let t = temperature_at(temperature, o, i, inner);
            let at = |a: usize| (o * n + a) * inner + i;
            let inner_prod = (0..active).fold(T::zero(), |acc, a| acc + ys[at(a)] * gs[at(a)]);
            for a in 0..active {
                gx[at(a)] = ys[at(a)] * (gs[at(a)] - inner_prod) / t;
            }
        }
    }
    Tensor { shape: y.shape().to_vec(), data: gx }
}

fn group_norm_dims<T: Real>(x: &Tensor<T>, groups: usize, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(usize, usize, usize)> {
    const OP: &str = "group_norm";
    if x.rank() != 4 {
        return Err(shape_err(OP, format!("expected rank-4 input, got {:?}", x.shape())));
    }
    let c = x.shape()[1];
    if groups == 0 || !c.is_multiple_of(groups) {
        return Err(shape_err(OP, format!("{c} channels not divisible by {groups} groups")));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err(OP, format!("affine shapes {:?}/{:?} for {c} channels", gamma.shape(), beta.shape())));
    }
    Ok((x.shape()[0], c / groups, x.shape()[2] * x.shape()[3]))
}

/// Per (sample, channel-group) standardization followed by a per-channel affine map.
pub fn group_norm<T: Real>(x: &Tensor<T>, groups: usize, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    if !(eps > 0.0) {
        return Err(arg_err("group_norm", "eps must be positive"));
    }
    let (batch, cpg, plane) = group_norm_dims(x, groups, gamma, beta)?;
    x.ensure_finite("group_norm")?;
    let xs = x.data();
    let mut out = vec![T::zero(); xs.len()];
    let len = cpg * plane;
    let n = real::<T>(len as f64);
    for b in 0..batch {
        for g in 0..groups {
            let base = (b * groups + g) * len;
            let seg = &xs[base..base + len];
            let mean = seg.iter().fold(T::zero(), |a, &v| a + v) / n;
            let var = seg.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
            let inv = (var + real(eps)).sqrt().recip();
            for cl in 0..cpg {
                let c = g * cpg + cl;
                let (gm, bt) = (gamma.data()[c], beta.data()[c]);
                for p in 0..plane {
                    let idx = base + cl * plane + p;
                    out[idx] = gm * (xs[idx] - mean) * inv + bt;
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn group_norm_backward<T: Real>(
    x: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (batch, cpg, plane) = group_norm_dims(x, groups, gamma, beta)?;
    let c = x.shape()[1];
    let xs = x.data();
    let gs = grad_out.data();
    let mut gx = vec![T::zero(); xs.len()];
    let mut g_gamma = vec![T::zero(); c];
    let mut g_beta = vec![T::zero(); c];
    let len = cpg * plane;
    let n = real::<T>(len as f64);
    let mut xhat = vec![T::zero(); len];
    let mut dxhat = vec![T::zero(); len];
    for b in 0..batch {
        for g in 0..groups {
            let base = (b * groups + g) * len;
            let seg = &xs[base..base + len];
            let mean = seg.iter().fold(T::zero(), |a, &v| a + v) / n;
            let var = seg.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
            let inv = (var + real(eps)).sqrt().recip();
            for cl in 0..cpg {
                let ch = g * cpg + cl;
                for p in 0..plane {
                    let j = cl * plane + p;
                    let dy = gs[base + j];
                    xhat[j] = (seg[j] - mean) * inv;
                    dxhat[j] = dy * gamma.data()[ch];
                    g_gamma[ch] += dy * xhat[j];
                    g_beta[ch] += dy;
                }
            }
            let mean_d = dxhat.iter().fold(T::zero(), |a, &v| a + v) / n;
            let mean_dx = dxhat.iter().zip(&xhat).fold(T::zero(), |a, (&d, &h)| a + d * h) / n;
            for j in 0..len {
                gx[base + j] = inv * (dxhat[j] - mean_d - xhat[j] * mean_dx);
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), gx)?,
        Tensor::new(vec![c], g_gamma)?,
        Tensor::new(vec![c], g_beta)?,
    ))
}

/// Source taps for one output coordinate under the half-pixel convention.
fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resampling with `align_corners = false` semantics.
pub fn bilinear_resize<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(shape_err("bilinear_resize", format!("expected rank-4 input, got {:?}", x.shape())));
    }
    if out_h == 0 || out_w == 0 {
        return Err(arg_err("bilinear_resize", "output extents must be at least 1"));
    }
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let ty = bilinear_taps(out_h, h);
    let tx = bilinear_taps(out_w, w);
    let xs = x.data();
    let mut out = vec![T::zero(); b * c * out_h * out_w];
    for plane in 0..b * c {
        let src = &xs[plane * h * w..][..h * w];
        let dst = &mut out[plane * out_h * out_w..][..out_h * out_w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly: T = real(ly);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx: T = real(lx);
                let top = src[y0 * w + x0] * (T::one() - lx) + src[y0 * w + x1] * lx;
                let bottom = src[y1 * w + x0] * (T::one() - lx) + src[y1 * w + x1] * lx;
                dst[oy * out_w + ox] = top * (T::one() - ly) + bottom * ly;
            }
        }
    }
    Tensor::new(vec![b, c, out_h, out_w], out)
}

pub fn bilinear_resize_backward<T: Real>(in_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let (b, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (out_h, out_w) = (grad_out.shape()[2], grad_out.shape()[3]);
    let ty = bilinear_taps(out_h, h);
    let tx = bilinear_taps(out_w, w);
    let gs = grad_out.data();
    let mut gx = vec![T::zero(); b * c * h * w];
    for plane in 0..b * c {
        let g = &gs[plane * out_h * out_w..][..out_h * out_w];
        let dst = &mut gx[plane * h * w..][..h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly: T = real(ly);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx: T = real(lx);
                let v = g[oy * out_w + ox];
                dst[y0 * w + x0] += v * (T::one() - ly) * (T::one() - lx);
                dst[y0 * w + x1] += v * (T::one() - ly) * lx;
                dst[y1 * w + x0] += v * ly * (T::one() - lx);
                dst[y1 * w + x1] += v * ly * lx;
            }
        }
    }
    Tensor { shape: in_shape.to_vec(), data: gx }
}

/// Checks that `from` can be broadcast to `to` (same rank, extents equal or 1).
pub(crate) fn check_broadcast(from: &[usize], to: &[usize]) -> Result<()> {
    if from.len() != to.len() || from.iter().zip(to).any(|(&f, &t)| f != t && f != 1) {
        return Err(shape_err("broadcast_to", format!("cannot broadcast {from:?} to {to:?}")));
    }
    Ok(())
}

/// Visits every index of `shape` in row-major order, passing the flat index of
/// the corresponding element of the (broadcast-compatible) `source` shape.
fn for_each_broadcast(shape: &[usize], source: &[usize], mut f: impl FnMut(usize, usize)) {
    let src_strides = strides_of(source);
    let eff: Vec<usize> = source.iter().zip(&src_strides).map(|(&e, &s)| if e == 1 { 0 } else { s }).collect();
    let rank = shape.len();
    let total: usize = shape.iter().product();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for flat in 0..total {
        f(flat, src);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += eff[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            src -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

pub fn broadcast_to<T: Real>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    check_broadcast(x.shape(), shape)?;
    let xs = x.data();
    let mut out = vec![T::zero(); shape.iter().product()];
    for_each_broadcast(shape, x.shape(), |o, s| out[o] = xs[s]);
    Tensor::new(shape.to_vec(), out)
}

/// Sums `x` down to the broadcast-compatible `target` shape.
pub fn reduce_to<T: Real>(x: &Tensor<T>, target: &[usize]) -> Result<Tensor<T>> {
    check_broadcast(target, x.shape())?;
    let xs = x.data();
    let mut out = vec![T::zero(); target.iter().product()];
    for_each_broadcast(x.shape(), target, |o, s| out[s] += xs[o]);
    Tensor::new(target.to_vec(), out)
}

/// Sum over `axes`, keeping each reduced axis with extent 1.
pub fn sum_axes<T: Real>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    const OP: &str = "reduce";
    if axes.is_empty() {
        return Err(arg_err(OP, "empty axis set"));
    }
    let mut target = x.shape().to_vec();
    for (i, &a) in axes.iter().enumerate() {
        if a >= x.rank() || axes[..i].contains(&a) {
            return Err(arg_err(OP, format!("axes {axes:?} invalid for rank {}", x.rank())));
        }
        target[a] = 1;
    }
    reduce_to(x, &target)
}

pub fn concat<T: Real>(xs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    const OP: &str = "concat";
    let first = xs.first().ok_or_else(|| arg_err(OP, "no inputs"))?;
    if axis >= first.rank() {
        return Err(arg_err(OP, format!("axis {axis} out of range")));
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = 0;
    for t in xs {
        let compatible = t.rank() == first.rank()
            && t.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(shape_err(OP, format!("{:?} vs {:?} along axis {axis}", t.shape(), first.shape())));
        }
        shape[axis] += t.shape()[axis];
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for t in xs {
            let chunk = t.shape()[axis] * inner;
            out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::new(shape, out)
}

pub fn slice_axis<T: Real>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() || len == 0 || start + len > x.shape()[axis] {
        return Err(shape_err("slice", format!("[{start}, {}) on axis {axis} of {:?}", start + len, x.shape())));
    }
    let (outer, n, inner) = outer_inner(x.shape(), axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        out.extend_from_slice(&x.data()[(o * n + start) * inner..(o * n + start + len) * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::new(shape, out)
}

/// Adds `grad` into the `[start, start+len)` window of `into` along `axis`.
pub(crate) fn slice_axis_accumulate<T: Real>(into: &mut Tensor<T>, grad: &Tensor<T>, axis: usize, start: usize) {
    let (outer, n, inner) = outer_inner(into.shape(), axis);
    let len = grad.shape()[axis];
    let gs = grad.data();
    let dst = into.data_mut();
    for o in 0..outer {
        let d = &mut dst[(o * n + start) * inner..(o * n + start + len) * inner];
        for (a, &g) in d.iter_mut().zip(&gs[o * len * inner..(o + 1) * len * inner]) {
            *a += g;
        }
    }
}
