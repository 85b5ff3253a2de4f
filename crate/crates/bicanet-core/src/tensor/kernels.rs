//! Forward and backward kernels for every primitive op.
//!
//! Forward kernels are generic over the element type so the tape can replay
//! a recorded program in f64 (the shadow path used by finite-difference
//! checks). Arithmetic happens in f64 regardless of storage type; conv and
//! pooling reductions therefore accumulate in 64-bit as required, with f32
//! storage at the boundaries.
//!
//! Backward kernels read the stored f32 values, do their arithmetic in f64,
//! and return owned f64 gradient buffers which the tape accumulates. All
//! loops are sequential with a fixed iteration order, so gradients are
//! bit-reproducible.

use super::Shape;

pub trait Elem: Copy + Send + Sync + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Elem for f32 {
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Elem for f64 {
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
}

pub fn conv2d_out_shape(xs: Shape, ws: Shape, stride: (usize, usize), pad: (usize, usize)) -> Shape {
    let oh = (xs.h + 2 * pad.0 - ws.h) / stride.0 + 1;
    let ow = (xs.w + 2 * pad.1 - ws.w) / stride.1 + 1;
    Shape::new(xs.n, ws.n, oh, ow)
}

/// Valid kernel tap range for one output coordinate, so the inner loops never
/// touch padding.
#[inline(always)]
fn tap_range(o: usize, s: usize, p: usize, k: usize, extent: usize) -> (usize, usize) {
    let base = o * s; // input coord of tap j is base + j - p
    let lo = p.saturating_sub(base);
    let hi = k.min((extent + p).saturating_sub(base));
    (lo, hi)
}

pub fn conv2d_fwd<E: Elem>(
    x: &[E],
    xs: Shape,
    w: &[E],
    ws: Shape,
    bias: Option<&[E]>,
    stride: (usize, usize),
    pad: (usize, usize),
) -> (Vec<E>, Shape) {
    let os = conv2d_out_shape(xs, ws, stride, pad);
    let (kh, kw) = (ws.h, ws.w);
    let mut out = Vec::with_capacity(os.count());
    for n in 0..os.n {
        for oc in 0..os.c {
            let b = bias.map_or(0.0, |b| b[oc].to_f64());
            for oy in 0..os.h {
                let (ky_lo, ky_hi) = tap_range(oy, stride.0, pad.0, kh, xs.h);
                for ox in 0..os.w {
                    let (kx_lo, kx_hi) = tap_range(ox, stride.1, pad.1, kw, xs.w);
                    let mut acc = b;
                    for ic in 0..xs.c {
                        for ky in ky_lo..ky_hi {
                            let iy = oy * stride.0 + ky - pad.0;
                            let xrow = xs.at(n, ic, iy, 0);
                            let wrow = ws.at(oc, ic, ky, 0);
                            for kx in kx_lo..kx_hi {
                                let ix = ox * stride.1 + kx - pad.1;
                                acc += x[xrow + ix].to_f64() * w[wrow + kx].to_f64();
                            }
                        }
                    }
                    out.push(E::from_f64(acc));
                }
            }
        }
    }
    (out, os)
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd(
    x: &[f32],
    xs: Shape,
    w: &[f32],
    ws: Shape,
    has_bias: bool,
    stride: (usize, usize),
    pad: (usize, usize),
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Option<Vec<f64>>) {
    let os = conv2d_out_shape(xs, ws, stride, pad);
    let mut dx = vec![0.0f64; xs.count()];
    let mut dw = vec![0.0f64; ws.count()];
    let mut db = has_bias.then(|| vec![0.0f64; os.c]);
    for n in 0..os.n {
        for oc in 0..os.c {
            for oy in 0..os.h {
                let (ky_lo, ky_hi) = tap_range(oy, stride.0, pad.0, ws.h, xs.h);
                for ox in 0..os.w {
                    let (kx_lo, kx_hi) = tap_range(ox, stride.1, pad.1, ws.w, xs.w);
                    let g = dy[os.at(n, oc, oy, ox)];
                    if let Some(db) = db.as_mut() {
                        db[oc] += g;
                    }
                    for ic in 0..xs.c {
                        for ky in ky_lo..ky_hi {
                            let iy = oy * stride.0 + ky - pad.0;
                            let xrow = xs.at(n, ic, iy, 0);
                            let wrow = ws.at(oc, ic, ky, 0);
                            for kx in kx_lo..kx_hi {
                                let ix = ox * stride.1 + kx - pad.1;
                                dx[xrow + ix] += g * w[wrow + kx] as f64;
                                dw[wrow + kx] += g * x[xrow + ix] as f64;
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Half-pixel-center source coordinate for bilinear interpolation:
/// `(dst + 0.5) / ratio - 0.5`, clamped to the source extent.
#[inline]
fn bilinear_axis(out_len: usize, in_len: usize, ratio: f64) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            let s = ((o as f64 + 0.5) / ratio - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

pub fn bilinear_upsample_fwd<E: Elem>(x: &[E], xs: Shape, ratio: usize) -> (Vec<E>, Shape) {
    let os = Shape::new(xs.n, xs.c, xs.h * ratio, xs.w * ratio);
    let ys = bilinear_axis(os.h, xs.h, ratio as f64);
    let xsax = bilinear_axis(os.w, xs.w, ratio as f64);
    let mut out = Vec::with_capacity(os.count());
    for n in 0..xs.n {
        for c in 0..xs.c {
            for &(y0, y1, ty) in &ys {
                let r0 = xs.at(n, c, y0, 0);
                let r1 = xs.at(n, c, y1, 0);
                for &(x0, x1, tx) in &xsax {
                    let v00 = x[r0 + x0].to_f64();
                    let v01 = x[r0 + x1].to_f64();
                    let v10 = x[r1 + x0].to_f64();
                    let v11 = x[r1 + x1].to_f64();
                    let top = v00 + (v01 - v00) * tx;
                    let bot = v10 + (v11 - v10) * tx;
                    out.push(E::from_f64(top + (bot - top) * ty));
                }
            }
        }
    }
    (out, os)
}

pub fn bilinear_upsample_bwd(xs: Shape, ratio: usize, dy: &[f64]) -> Vec<f64> {
    let os = Shape::new(xs.n, xs.c, xs.h * ratio, xs.w * ratio);
    let ys = bilinear_axis(os.h, xs.h, ratio as f64);
    let xsax = bilinear_axis(os.w, xs.w, ratio as f64);
    let mut dx = vec![0.0f64; xs.count()];
    for n in 0..xs.n {
        for c in 0..xs.c {
            for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
                let r0 = xs.at(n, c, y0, 0);
                let r1 = xs.at(n, c, y1, 0);
                for (ox, &(x0, x1, tx)) in xsax.iter().enumerate() {
                    let g = dy[os.at(n, c, oy, ox)];
                    dx[r0 + x0] += g * (1.0 - ty) * (1.0 - tx);
                    dx[r0 + x1] += g * (1.0 - ty) * tx;
                    dx[r1 + x0] += g * ty * (1.0 - tx);
                    dx[r1 + x1] += g * ty * tx;
                }
            }
        }
    }
    dx
}

/// Max over channels; ties resolve to the lowest channel index.
pub fn channel_max_squeeze_fwd<E: Elem>(x: &[E], xs: Shape) -> (Vec<E>, Vec<u32>, Shape) {
    let os = Shape::new(xs.n, 1, xs.h, xs.w);
    let mut out = Vec::with_capacity(os.count());
    let mut arg = Vec::with_capacity(os.count());
    for n in 0..xs.n {
        for y in 0..xs.h {
            for xx in 0..xs.w {
                let mut best = x[xs.at(n, 0, y, xx)].to_f64();
                let mut best_c = 0u32;
                for c in 1..xs.c {
                    let v = x[xs.at(n, c, y, xx)].to_f64();
                    if v > best {
                        best = v;
                        best_c = c as u32;
                    }
                }
                out.push(E::from_f64(best));
                arg.push(best_c);
            }
        }
    }
    (out, arg, os)
}

pub fn channel_max_squeeze_bwd(xs: Shape, argmax: &[u32], dy: &[f64]) -> Vec<f64> {
    let os = Shape::new(xs.n, 1, xs.h, xs.w);
    let mut dx = vec![0.0f64; xs.count()];
    for n in 0..xs.n {
        for y in 0..xs.h {
            for xx in 0..xs.w {
                let o = os.at(n, 0, y, xx);
                dx[xs.at(n, argmax[o] as usize, y, xx)] += dy[o];
            }
        }
    }
    dx
}

pub fn global_avg_pool_fwd<E: Elem>(x: &[E], xs: Shape) -> (Vec<E>, Shape) {
    let os = Shape::new(xs.n, xs.c, 1, 1);
    let m = (xs.h * xs.w) as f64;
    let mut out = Vec::with_capacity(os.count());
    for n in 0..xs.n {
        for c in 0..xs.c {
            let base = xs.at(n, c, 0, 0);
            let mut acc = 0.0f64;
            for i in 0..xs.h * xs.w {
                acc += x[base + i].to_f64();
            }
            out.push(E::from_f64(acc / m));
        }
    }
    (out, os)
}

pub fn global_avg_pool_bwd(xs: Shape, dy: &[f64]) -> Vec<f64> {
    let os = Shape::new(xs.n, xs.c, 1, 1);
    let m = (xs.h * xs.w) as f64;
    let mut dx = vec![0.0f64; xs.count()];
    for n in 0..xs.n {
        for c in 0..xs.c {
            let g = dy[os.at(n, c, 0, 0)] / m;
            let base = xs.at(n, c, 0, 0);
            for i in 0..xs.h * xs.w {
                dx[base + i] += g;
            }
        }
    }
    dx
}

pub fn add_fwd<E: Elem>(a: &[E], b: &[E]) -> Vec<E> {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| E::from_f64(x.to_f64() + y.to_f64()))
        .collect()
}

/// Broadcast-aware index: axes of size 1 repeat.
#[inline(always)]
fn bcast_at(s: Shape, n: usize, c: usize, y: usize, x: usize) -> usize {
    s.at(
        if s.n == 1 { 0 } else { n },
        if s.c == 1 { 0 } else { c },
        if s.h == 1 { 0 } else { y },
        if s.w == 1 { 0 } else { x },
    )
}

pub fn broadcast_out_shape(a: Shape, b: Shape) -> Shape {
    Shape::new(a.n.max(b.n), a.c.max(b.c), a.h.max(b.h), a.w.max(b.w))
}

pub fn mul_fwd<E: Elem>(a: &[E], ashape: Shape, b: &[E], bshape: Shape) -> (Vec<E>, Shape) {
    let os = broadcast_out_shape(ashape, bshape);
    let mut out = Vec::with_capacity(os.count());
    for n in 0..os.n {
        for c in 0..os.c {
            for y in 0..os.h {
                for x in 0..os.w {
                    let va = a[bcast_at(ashape, n, c, y, x)].to_f64();
                    let vb = b[bcast_at(bshape, n, c, y, x)].to_f64();
                    out.push(E::from_f64(va * vb));
                }
            }
        }
    }
    (out, os)
}

pub fn mul_bwd(
    a: &[f32],
    ashape: Shape,
    b: &[f32],
    bshape: Shape,
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let os = broadcast_out_shape(ashape, bshape);
    let mut da = vec![0.0f64; ashape.count()];
    let mut db = vec![0.0f64; bshape.count()];
    let mut i = 0;
    for n in 0..os.n {
        for c in 0..os.c {
            for y in 0..os.h {
                for x in 0..os.w {
                    let ia = bcast_at(ashape, n, c, y, x);
                    let ib = bcast_at(bshape, n, c, y, x);
                    let g = dy[i];
                    da[ia] += g * b[ib] as f64;
                    db[ib] += g * a[ia] as f64;
                    i += 1;
                }
            }
        }
    }
    (da, db)
}

pub fn concat_channels_fwd<E: Elem>(parts: &[(&[E], Shape)]) -> (Vec<E>, Shape) {
    let first = parts[0].1;
    let total_c: usize = parts.iter().map(|(_, s)| s.c).sum();
    let os = Shape::new(first.n, total_c, first.h, first.w);
    let plane = first.h * first.w;
    let mut out = Vec::with_capacity(os.count());
    for n in 0..os.n {
        for (data, s) in parts {
            let base = s.at(n, 0, 0, 0);
            out.extend_from_slice(&data[base..base + s.c * plane]);
        }
    }
    (out, os)
}

pub fn concat_channels_bwd(shapes: &[Shape], dy: &[f64]) -> Vec<Vec<f64>> {
    let first = shapes[0];
    let plane = first.h * first.w;
    let mut grads: Vec<Vec<f64>> = shapes.iter().map(|s| vec![0.0f64; s.count()]).collect();
    let mut i = 0;
    for n in 0..first.n {
        for (k, s) in shapes.iter().enumerate() {
            let base = s.at(n, 0, 0, 0);
            let len = s.c * plane;
            grads[k][base..base + len].copy_from_slice(&dy[i..i + len]);
            i += len;
        }
    }
    grads
}

pub fn relu_fwd<E: Elem>(x: &[E]) -> Vec<E> {
    x.iter()
        .map(|&v| {
            let f = v.to_f64();
            E::from_f64(if f > 0.0 { f } else { 0.0 })
        })
        .collect()
}

pub fn relu_bwd(x: &[f32], dy: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect()
}

pub fn sigmoid_fwd<E: Elem>(x: &[E]) -> Vec<E> {
    x.iter()
        .map(|&v| E::from_f64(1.0 / (1.0 + (-v.to_f64()).exp())))
        .collect()
}

/// Backward from the stored output: dy * y * (1 - y).
pub fn sigmoid_bwd(y: &[f32], dy: &[f64]) -> Vec<f64> {
    y.iter()
        .zip(dy)
        .map(|(&v, &g)| {
            let y = v as f64;
            g * y * (1.0 - y)
        })
        .collect()
}

pub fn softmax_channels_fwd<E: Elem>(x: &[E], xs: Shape) -> Vec<E> {
    let mut out = vec![E::from_f64(0.0); xs.count()];
    for n in 0..xs.n {
        for y in 0..xs.h {
            for xx in 0..xs.w {
                let mut m = f64::NEG_INFINITY;
                for c in 0..xs.c {
                    m = m.max(x[xs.at(n, c, y, xx)].to_f64());
                }
                let mut z = 0.0f64;
                for c in 0..xs.c {
                    z += (x[xs.at(n, c, y, xx)].to_f64() - m).exp();
                }
                for c in 0..xs.c {
                    let i = xs.at(n, c, y, xx);
                    out[i] = E::from_f64((x[i].to_f64() - m).exp() / z);
                }
            }
        }
    }
    out
}

pub fn softmax_channels_bwd(y: &[f32], xs: Shape, dy: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0f64; xs.count()];
    for n in 0..xs.n {
        for yy in 0..xs.h {
            for xx in 0..xs.w {
                let mut dot = 0.0f64;
                for c in 0..xs.c {
                    let i = xs.at(n, c, yy, xx);
                    dot += dy[i] * y[i] as f64;
                }
                for c in 0..xs.c {
                    let i = xs.at(n, c, yy, xx);
                    dx[i] = y[i] as f64 * (dy[i] - dot);
                }
            }
        }
    }
    dx
}

/// Per-channel batch moments over (n, h, w); biased variance.
pub fn batch_moments<E: Elem>(x: &[E], xs: Shape) -> (Vec<f64>, Vec<f64>) {
    let m = (xs.n * xs.h * xs.w) as f64;
    let plane = xs.h * xs.w;
    let mut mean = vec![0.0f64; xs.c];
    let mut var = vec![0.0f64; xs.c];
    for c in 0..xs.c {
        let mut acc = 0.0f64;
        for n in 0..xs.n {
            let base = xs.at(n, c, 0, 0);
            for i in 0..plane {
                acc += x[base + i].to_f64();
            }
        }
        mean[c] = acc / m;
        let mut acc2 = 0.0f64;
        for n in 0..xs.n {
            let base = xs.at(n, c, 0, 0);
            for i in 0..plane {
                let d = x[base + i].to_f64() - mean[c];
                acc2 += d * d;
            }
        }
        var[c] = acc2 / m;
    }
    (mean, var)
}

/// Normalize with given per-channel moments, then scale and shift.
pub fn batch_norm_apply<E: Elem>(
    x: &[E],
    xs: Shape,
    gamma: &[E],
    beta: &[E],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Vec<E> {
    let plane = xs.h * xs.w;
    let mut out = vec![E::from_f64(0.0); xs.count()];
    for c in 0..xs.c {
        let inv = 1.0 / (var[c] + eps).sqrt();
        let g = gamma[c].to_f64();
        let b = beta[c].to_f64();
        for n in 0..xs.n {
            let base = xs.at(n, c, 0, 0);
            for i in 0..plane {
                out[base + i] = E::from_f64((x[base + i].to_f64() - mean[c]) * inv * g + b);
            }
        }
    }
    out
}

/// Backward through train-mode batch norm (moments are functions of x).
pub fn batch_norm_train_bwd(
    x: &[f32],
    xs: Shape,
    gamma: &[f32],
    eps: f64,
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (mean, var) = batch_moments(x, xs);
    let m = (xs.n * xs.h * xs.w) as f64;
    let plane = xs.h * xs.w;
    let mut dx = vec![0.0f64; xs.count()];
    let mut dgamma = vec![0.0f64; xs.c];
    let mut dbeta = vec![0.0f64; xs.c];
    for c in 0..xs.c {
        let inv = 1.0 / (var[c] + eps).sqrt();
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for n in 0..xs.n {
            let base = xs.at(n, c, 0, 0);
            for i in 0..plane {
                let xhat = (x[base + i] as f64 - mean[c]) * inv;
                sum_dy += dy[base + i];
                sum_dy_xhat += dy[base + i] * xhat;
            }
        }
        dgamma[c] = sum_dy_xhat;
        dbeta[c] = sum_dy;
        let g = gamma[c] as f64;
        for n in 0..xs.n {
            let base = xs.at(n, c, 0, 0);
            for i in 0..plane {
                let xhat = (x[base + i] as f64 - mean[c]) * inv;
                dx[base + i] +=
                    g * inv * (dy[base + i] - sum_dy / m - xhat * sum_dy_xhat / m);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Backward through eval-mode batch norm (moments are constants).
pub fn batch_norm_eval_bwd(
    x: &[f32],
    xs: Shape,
    gamma: &[f32],
    mean: &[f64],
    var: &[f64],
    eps: f64,
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let plane = xs.h * xs.w;
    let mut dx = vec![0.0f64; xs.count()];
    let mut dgamma = vec![0.0f64; xs.c];
    let mut dbeta = vec![0.0f64; xs.c];
    for c in 0..xs.c {
        let inv = 1.0 / (var[c] + eps).sqrt();
        let g = gamma[c] as f64;
        for n in 0..xs.n {
            let base = xs.at(n, c, 0, 0);
            for i in 0..plane {
                let xhat = (x[base + i] as f64 - mean[c]) * inv;
                dgamma[c] += dy[base + i] * xhat;
                dbeta[c] += dy[base + i];
                dx[base + i] += dy[base + i] * g * inv;
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn sum_fwd<E: Elem>(x: &[E]) -> E {
    let mut acc = 0.0f64;
    for &v in x {
        acc += v.to_f64();
    }
    E::from_f64(acc)
}

pub fn crop_spatial_fwd<E: Elem>(x: &[E], xs: Shape, oh: usize, ow: usize) -> (Vec<E>, Shape) {
    let os = Shape::new(xs.n, xs.c, oh, ow);
    let mut out = Vec::with_capacity(os.count());
    for n in 0..xs.n {
        for c in 0..xs.c {
            for y in 0..oh {
                let base = xs.at(n, c, y, 0);
                out.extend_from_slice(&x[base..base + ow]);
            }
        }
    }
    (out, os)
}

pub fn crop_spatial_bwd(xs: Shape, oh: usize, ow: usize, dy: &[f64]) -> Vec<f64> {
    let os = Shape::new(xs.n, xs.c, oh, ow);
    let mut dx = vec![0.0f64; xs.count()];
    for n in 0..xs.n {
        for c in 0..xs.c {
            for y in 0..oh {
                let base = xs.at(n, c, y, 0);
                let obase = os.at(n, c, y, 0);
                dx[base..base + ow].copy_from_slice(&dy[obase..obase + ow]);
            }
        }
    }
    dx
}

pub const IGNORE_LABEL: u8 = 255;

/// Weighted softmax cross-entropy over pixels: sum over pixels of
/// `weight * (-log softmax(logits)[target])`. Pixels with zero weight are
/// skipped entirely, which is how ignore labels and OHEM selection enter.
pub fn masked_cross_entropy_fwd<E: Elem>(
    logits: &[E],
    ls: Shape,
    targets: &[u8],
    weights: &[f32],
) -> f64 {
    let mut loss = 0.0f64;
    for n in 0..ls.n {
        for y in 0..ls.h {
            for x in 0..ls.w {
                let p = (n * ls.h + y) * ls.w + x;
                let wgt = weights[p] as f64;
                if wgt == 0.0 {
                    continue;
                }
                let t = targets[p] as usize;
                let mut m = f64::NEG_INFINITY;
                for c in 0..ls.c {
                    m = m.max(logits[ls.at(n, c, y, x)].to_f64());
                }
                let mut z = 0.0f64;
                for c in 0..ls.c {
                    z += (logits[ls.at(n, c, y, x)].to_f64() - m).exp();
                }
                let lse = m + z.ln();
                loss += wgt * (lse - logits[ls.at(n, t, y, x)].to_f64());
            }
        }
    }
    loss
}

pub fn masked_cross_entropy_bwd(
    logits: &[f32],
    ls: Shape,
    targets: &[u8],
    weights: &[f32],
    dloss: f64,
) -> Vec<f64> {
    let mut dx = vec![0.0f64; ls.count()];
    for n in 0..ls.n {
        for y in 0..ls.h {
            for x in 0..ls.w {
                let p = (n * ls.h + y) * ls.w + x;
                let wgt = weights[p] as f64;
                if wgt == 0.0 {
                    continue;
                }
                let t = targets[p] as usize;
                let mut m = f64::NEG_INFINITY;
                for c in 0..ls.c {
                    m = m.max(logits[ls.at(n, c, y, x)] as f64);
                }
                let mut z = 0.0f64;
                for c in 0..ls.c {
                    z += (logits[ls.at(n, c, y, x)] as f64 - m).exp();
                }
                for c in 0..ls.c {
                    let i = ls.at(n, c, y, x);
                    let softmax = (logits[i] as f64 - m).exp() / z;
                    let delta = if c == t { 1.0 } else { 0.0 };
                    dx[i] += dloss * wgt * (softmax - delta);
                }
            }
        }
    }
    dx
}
