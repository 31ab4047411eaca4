//! Forward and adjoint kernels on raw NCHW buffers.
//!
//! These are the tape-free building blocks: [`Tape`](super::Tape) calls them
//! for both the forward values and the backward rules. Every kernel writes
//! disjoint output planes (or weight rows) and reduces in a fixed order, so
//! results do not depend on thread scheduling.

use super::{Result, Scalar, Shape, TensorError};
use crate::par;

/// Stride, zero-padding and group count of a square-kernel convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub const fn new(stride: usize, pad: usize, groups: usize) -> Self {
        Self {
            stride,
            pad,
            groups,
        }
    }
}

/// Output positions `o` in `[lo, hi)` for which `o*s + koff - p` lands inside
/// `[0, in_len)`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, koff: usize, s: usize, p: usize) -> (usize, usize) {
    let lo = if p > koff { (p - koff).div_ceil(s) } else { 0 };
    let hi = if in_len + p > koff {
        (in_len + p - koff - 1) / s + 1
    } else {
        0
    };
    let lo = lo.min(out_len);
    (lo, hi.min(out_len).max(lo))
}

/// Checks a conv2d configuration and returns the output shape.
pub fn conv2d_output_shape(xs: Shape, ws: Shape, g: ConvGeom) -> Result<Shape> {
    const OP: &str = "conv2d";
    xs.require_nonempty(OP)?;
    ws.require_nonempty(OP)?;
    if g.stride == 0 || g.groups == 0 {
        return Err(TensorError::Config {
            op: OP,
            detail: format!("stride {} / groups {} must be positive", g.stride, g.groups),
        });
    }
    if ws.h() != ws.w() {
        return Err(TensorError::Config {
            op: OP,
            detail: format!("kernel must be square, got {}x{}", ws.h(), ws.w()),
        });
    }
    let (cin, cout) = (xs.c(), ws.n());
    for c in [cin, cout] {
        if c % g.groups != 0 {
            return Err(TensorError::Divisibility {
                op: OP,
                channels: c,
                divisor: g.groups,
            });
        }
    }
    if ws.c() != cin / g.groups {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            a: xs,
            b: ws,
        });
    }
    let k = ws.h();
    for extent in [xs.h(), xs.w()] {
        if extent + 2 * g.pad < k {
            return Err(TensorError::KernelTooLarge {
                op: OP,
                kernel: k,
                padded: extent + 2 * g.pad,
            });
        }
    }
    let ho = (xs.h() + 2 * g.pad - k) / g.stride + 1;
    let wo = (xs.w() + 2 * g.pad - k) / g.stride + 1;
    Ok(Shape::new(xs.n(), cout, ho, wo))
}

/// Direct grouped convolution. `w` has layout (C_out, C_in/groups, k, k).
pub fn conv2d<T: Scalar>(
    x: &[T],
    xs: Shape,
    w: &[T],
    ws: Shape,
    bias: Option<&[T]>,
    g: ConvGeom,
) -> Result<(Vec<T>, Shape)> {
    let os = conv2d_output_shape(xs, ws, g)?;
    let (cin, cout, k) = (xs.c(), os.c(), ws.h());
    let (cin_g, cout_g) = (cin / g.groups, cout / g.groups);
    let (h, wd, ho, wo) = (xs.h(), xs.w(), os.h(), os.w());
    let (s, p) = (g.stride, g.pad);
    let mut out = vec![T::zero(); os.numel()];
    par::for_each_chunk_mut(&mut out, ho * wo, |idx, plane| {
        let (n, co) = (idx / cout, idx % cout);
        let grp = co / cout_g;
        if let Some(b) = bias {
            plane.fill(b[co]);
        }
        for cil in 0..cin_g {
            let ci = grp * cin_g + cil;
            let xp = &x[(n * cin + ci) * h * wd..][..h * wd];
            let wk = &w[(co * cin_g + cil) * k * k..][..k * k];
            for ky in 0..k {
                let (oy_lo, oy_hi) = valid_range(ho, h, ky, s, p);
                for kx in 0..k {
                    let wv = wk[ky * k + kx];
                    let (ox_lo, ox_hi) = valid_range(wo, wd, kx, s, p);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let ix0 = ox_lo * s + kx - p;
                    let len = ox_hi - ox_lo;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - p;
                        let orow = &mut plane[oy * wo + ox_lo..][..len];
                        let irow = &xp[iy * wd..][..wd];
                        if s == 1 {
                            for (o, &i) in orow.iter_mut().zip(&irow[ix0..ix0 + len]) {
                                *o += wv * i;
                            }
                        } else {
                            for (j, o) in orow.iter_mut().enumerate() {
                                *o += wv * irow[ix0 + j * s];
                            }
                        }
                    }
                }
            }
        }
    });
    Ok((out, os))
}

/// Adjoint of [`conv2d`] with respect to its input: maps an output-shaped
/// gradient back onto an input of shape `xs`.
pub fn conv2d_grad_input<T: Scalar>(
    gout: &[T],
    gs: Shape,
    w: &[T],
    ws: Shape,
    xs: Shape,
    g: ConvGeom,
) -> Vec<T> {
    let (cin, cout, k) = (xs.c(), gs.c(), ws.h());
    let (cin_g, cout_g) = (cin / g.groups, cout / g.groups);
    let (h, wd, ho, wo) = (xs.h(), xs.w(), gs.h(), gs.w());
    let (s, p) = (g.stride, g.pad);
    let mut gin = vec![T::zero(); xs.numel()];
    par::for_each_chunk_mut(&mut gin, h * wd, |idx, plane| {
        let (n, ci) = (idx / cin, idx % cin);
        let (grp, cil) = (ci / cin_g, ci % cin_g);
        for col in 0..cout_g {
            let co = grp * cout_g + col;
            let gp = &gout[(n * cout + co) * ho * wo..][..ho * wo];
            let wk = &w[(co * cin_g + cil) * k * k..][..k * k];
            for ky in 0..k {
                let (oy_lo, oy_hi) = valid_range(ho, h, ky, s, p);
                for kx in 0..k {
                    let wv = wk[ky * k + kx];
                    let (ox_lo, ox_hi) = valid_range(wo, wd, kx, s, p);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let ix0 = ox_lo * s + kx - p;
                    let len = ox_hi - ox_lo;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - p;
                        let grow = &gp[oy * wo + ox_lo..][..len];
                        let irow = &mut plane[iy * wd..][..wd];
                        if s == 1 {
                            for (i, &gv) in irow[ix0..ix0 + len].iter_mut().zip(grow) {
                                *i += wv * gv;
                            }
                        } else {
                            for (j, &gv) in grow.iter().enumerate() {
                                irow[ix0 + j * s] += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    });
    gin
}

/// Gradient of [`conv2d`] with respect to its weight.
pub fn conv2d_grad_weight<T: Scalar>(
    gout: &[T],
    gs: Shape,
    x: &[T],
    xs: Shape,
    ws: Shape,
    g: ConvGeom,
) -> Vec<T> {
    let (cin, cout, k) = (xs.c(), gs.c(), ws.h());
    let (cin_g, cout_g) = (cin / g.groups, cout / g.groups);
    let (h, wd, ho, wo) = (xs.h(), xs.w(), gs.h(), gs.w());
    let (s, p) = (g.stride, g.pad);
    let mut gw = vec![T::zero(); ws.numel()];
    par::for_each_chunk_mut(&mut gw, cin_g * k * k, |co, row| {
        let grp = co / cout_g;
        for n in 0..xs.n() {
            let gp = &gout[(n * cout + co) * ho * wo..][..ho * wo];
            for cil in 0..cin_g {
                let ci = grp * cin_g + cil;
                let xp = &x[(n * cin + ci) * h * wd..][..h * wd];
                for ky in 0..k {
                    let (oy_lo, oy_hi) = valid_range(ho, h, ky, s, p);
                    for kx in 0..k {
                        let (ox_lo, ox_hi) = valid_range(wo, wd, kx, s, p);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let ix0 = ox_lo * s + kx - p;
                        let len = ox_hi - ox_lo;
                        let mut acc = T::zero();
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky - p;
                            let grow = &gp[oy * wo + ox_lo..][..len];
                            let irow = &xp[iy * wd..][..wd];
                            if s == 1 {
                                for (&gv, &iv) in grow.iter().zip(&irow[ix0..ix0 + len]) {
                                    acc += gv * iv;
                                }
                            } else {
                                for (j, &gv) in grow.iter().enumerate() {
                                    acc += gv * irow[ix0 + j * s];
                                }
                            }
                        }
                        row[(cil * k + ky) * k + kx] += acc;
                    }
                }
            }
        }
    });
    gw
}

/// Per-channel sum of an output gradient (the bias gradient).
pub fn channel_sums<T: Scalar>(gout: &[T], gs: Shape) -> Vec<T> {
    let p = gs.plane();
    let mut out = vec![T::zero(); gs.c()];
    for n in 0..gs.n() {
        for (c, o) in out.iter_mut().enumerate() {
            let start = (n * gs.c() + c) * p;
            *o += gout[start..start + p].iter().copied().sum::<T>();
        }
    }
    out
}

/// Output shape of a transposed convolution; `w` has layout (C_in, C_out, k, k).
pub fn conv_transpose2d_output_shape(xs: Shape, ws: Shape, stride: usize, pad: usize) -> Result<Shape> {
    const OP: &str = "conv_transpose2d";
    xs.require_nonempty(OP)?;
    ws.require_nonempty(OP)?;
    if stride == 0 || ws.h() != ws.w() {
        return Err(TensorError::Config {
            op: OP,
            detail: format!("stride {stride}, kernel {}x{}", ws.h(), ws.w()),
        });
    }
    if ws.n() != xs.c() {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            a: xs,
            b: ws,
        });
    }
    let k = ws.h() as i64;
    let extent = |e: usize| (e as i64 - 1) * stride as i64 - 2 * pad as i64 + k;
    let (ho, wo) = (extent(xs.h()), extent(xs.w()));
    if ho <= 0 || wo <= 0 {
        return Err(TensorError::Config {
            op: OP,
            detail: format!("non-positive output extent {ho}x{wo}"),
        });
    }
    Ok(Shape::new(xs.n(), ws.c(), ho as usize, wo as usize))
}

/// Transposed convolution, computed as the input-adjoint of [`conv2d`].
pub fn conv_transpose2d<T: Scalar>(
    x: &[T],
    xs: Shape,
    w: &[T],
    ws: Shape,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
) -> Result<(Vec<T>, Shape)> {
    let os = conv_transpose2d_output_shape(xs, ws, stride, pad)?;
    let mut out = conv2d_grad_input(x, xs, w, ws, os, ConvGeom::new(stride, pad, 1));
    if let Some(b) = bias {
        add_channel_bias(&mut out, os, b);
    }
    Ok((out, os))
}

pub fn add_channel_bias<T: Scalar>(data: &mut [T], s: Shape, bias: &[T]) {
    let c = s.c();
    par::for_each_chunk_mut(data, s.plane(), |idx, plane| {
        let b = bias[idx % c];
        plane.iter_mut().for_each(|v| *v += b);
    });
}

pub fn pixel_shuffle_shape(xs: Shape, r: usize) -> Result<Shape> {
    xs.require_nonempty("pixel_shuffle")?;
    if r == 0 || xs.c() % (r * r) != 0 {
        return Err(TensorError::Divisibility {
            op: "pixel_shuffle",
            channels: xs.c(),
            divisor: r * r,
        });
    }
    Ok(Shape::new(xs.n(), xs.c() / (r * r), xs.h() * r, xs.w() * r))
}

/// `out[n, c, y*r+dy, x*r+dx] = in[n, c*r*r + dy*r + dx, y, x]`.
pub fn pixel_shuffle<T: Scalar>(x: &[T], xs: Shape, r: usize) -> Vec<T> {
    let os = Shape::new(xs.n(), xs.c() / (r * r), xs.h() * r, xs.w() * r);
    let (h, w, wo) = (xs.h(), xs.w(), os.w());
    let mut out = vec![T::zero(); os.numel()];
    par::for_each_chunk_mut(&mut out, os.plane(), |idx, plane| {
        let (n, c) = (idx / os.c(), idx % os.c());
        for dy in 0..r {
            for dx in 0..r {
                let src = &x[(n * xs.c() + c * r * r + dy * r + dx) * h * w..][..h * w];
                for y in 0..h {
                    for xx in 0..w {
                        plane[(y * r + dy) * wo + xx * r + dx] = src[y * w + xx];
                    }
                }
            }
        }
    });
    out
}

/// Inverse of [`pixel_shuffle`]; `ys` is the shuffled (output) shape.
pub fn pixel_unshuffle<T: Scalar>(y: &[T], ys: Shape, r: usize) -> Vec<T> {
    let xs = Shape::new(ys.n(), ys.c() * r * r, ys.h() / r, ys.w() / r);
    let (h, w, wo) = (xs.h(), xs.w(), ys.w());
    let mut out = vec![T::zero(); xs.numel()];
    par::for_each_chunk_mut(&mut out, xs.plane(), |idx, plane| {
        let (n, cc) = (idx / xs.c(), idx % xs.c());
        let (c, dy, dx) = (cc / (r * r), (cc % (r * r)) / r, cc % r);
        let src = &y[(n * ys.c() + c) * ys.plane()..][..ys.plane()];
        for yy in 0..h {
            for xx in 0..w {
                plane[yy * w + xx] = src[(yy * r + dy) * wo + xx * r + dx];
            }
        }
    });
    out
}

/// Source channel for each output channel of a channel shuffle.
pub fn channel_shuffle_perm(channels: usize, groups: usize) -> Vec<usize> {
    let per = channels / groups;
    (0..channels).map(|j| (j % groups) * per + j / groups).collect()
}

/// Reorders channels: output channel `j` reads input channel `perm[j]`.
pub fn permute_channels<T: Scalar>(x: &[T], xs: Shape, perm: &[usize]) -> Vec<T> {
    let p = xs.plane();
    let mut out = vec![T::zero(); xs.numel()];
    par::for_each_chunk_mut(&mut out, p, |idx, plane| {
        let (n, c) = (idx / xs.c(), idx % xs.c());
        plane.copy_from_slice(&x[(n * xs.c() + perm[c]) * p..][..p]);
    });
    out
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (j, &src) in perm.iter().enumerate() {
        inv[src] = j;
    }
    inv
}

pub fn global_avg_pool<T: Scalar>(x: &[T], xs: Shape) -> Vec<T> {
    let p = xs.plane();
    let inv = T::one() / T::from_f64(p as f64);
    x.chunks(p)
        .map(|plane| plane.iter().copied().sum::<T>() * inv)
        .collect()
}

/// Multiplies `a` by `b`, where `b` is either the same shape or (N,C,1,1).
pub fn mul_broadcast<T: Scalar>(a: &[T], as_: Shape, b: &[T], bs: Shape) -> Vec<T> {
    if as_ == bs {
        return a.iter().zip(b).map(|(&x, &y)| x * y).collect();
    }
    let p = as_.plane();
    let mut out = a.to_vec();
    par::for_each_chunk_mut(&mut out, p, |idx, plane| {
        let f = b[idx];
        plane.iter_mut().for_each(|v| *v *= f);
    });
    out
}

/// Per-plane dot product of two equal-shaped buffers.
pub fn plane_dots<T: Scalar>(a: &[T], b: &[T], s: Shape) -> Vec<T> {
    let p = s.plane();
    a.chunks(p)
        .zip(b.chunks(p))
        .map(|(x, y)| x.iter().zip(y).map(|(&u, &v)| u * v).sum())
        .collect()
}

pub fn concat_channels<T: Scalar>(parts: &[(&[T], Shape)]) -> Result<(Vec<T>, Shape)> {
    let (_, first) = *parts.first().ok_or(TensorError::Config {
        op: "concat_channels",
        detail: "no inputs".into(),
    })?;
    let mut c_total = 0;
    for &(_, s) in parts {
        if s.n() != first.n() || s.h() != first.h() || s.w() != first.w() {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                a: first,
                b: s,
            });
        }
        c_total += s.c();
    }
    let os = first.with_c(c_total);
    let p = os.plane();
    let mut out = Vec::with_capacity(os.numel());
    for n in 0..os.n() {
        for &(d, s) in parts {
            out.extend_from_slice(&d[n * s.c() * p..(n + 1) * s.c() * p]);
        }
    }
    Ok((out, os))
}

/// Splits a channel-concatenated buffer back into per-part buffers.
pub fn split_channels<T: Scalar>(g: &[T], gs: Shape, channels: &[usize]) -> Vec<Vec<T>> {
    let p = gs.plane();
    let mut parts: Vec<Vec<T>> = channels
        .iter()
        .map(|&c| Vec::with_capacity(gs.n() * c * p))
        .collect();
    for n in 0..gs.n() {
        let mut off = n * gs.c() * p;
        for (part, &c) in parts.iter_mut().zip(channels) {
            part.extend_from_slice(&g[off..off + c * p]);
            off += c * p;
        }
    }
    parts
}

/// Mirror index without edge repetition (`reflect` padding), periodic for
/// offsets beyond one extent.
#[inline]
pub fn reflect_index(i: usize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let m = i % period;
    if m < len {
        m
    } else {
        period - m
    }
}

/// Reflect-pads the bottom and right edges up to (h, w).
pub fn reflect_pad<T: Scalar>(x: &[T], xs: Shape, h: usize, w: usize) -> Vec<T> {
    let os = xs.with_hw(h, w);
    let mut out = vec![T::zero(); os.numel()];
    par::for_each_chunk_mut(&mut out, os.plane(), |idx, plane| {
        let src = &x[idx * xs.plane()..][..xs.plane()];
        for y in 0..h {
            let sy = reflect_index(y, xs.h());
            for xx in 0..w {
                plane[y * w + xx] = src[sy * xs.w() + reflect_index(xx, xs.w())];
            }
        }
    });
    out
}

pub fn reflect_pad_grad<T: Scalar>(g: &[T], gs: Shape, xs: Shape) -> Vec<T> {
    let mut out = vec![T::zero(); xs.numel()];
    par::for_each_chunk_mut(&mut out, xs.plane(), |idx, plane| {
        let src = &g[idx * gs.plane()..][..gs.plane()];
        for y in 0..gs.h() {
            let sy = reflect_index(y, xs.h());
            for xx in 0..gs.w() {
                plane[sy * xs.w() + reflect_index(xx, xs.w())] += src[y * gs.w() + xx];
            }
        }
    });
    out
}

/// Keeps the top-left (h, w) window of every plane.
pub fn crop<T: Scalar>(x: &[T], xs: Shape, h: usize, w: usize) -> Vec<T> {
    let os = xs.with_hw(h, w);
    let mut out = vec![T::zero(); os.numel()];
    par::for_each_chunk_mut(&mut out, os.plane(), |idx, plane| {
        let src = &x[idx * xs.plane()..][..xs.plane()];
        for y in 0..h {
            plane[y * w..(y + 1) * w].copy_from_slice(&src[y * xs.w()..y * xs.w() + w]);
        }
    });
    out
}

pub fn crop_grad<T: Scalar>(g: &[T], gs: Shape, xs: Shape) -> Vec<T> {
    let mut out = vec![T::zero(); xs.numel()];
    par::for_each_chunk_mut(&mut out, xs.plane(), |idx, plane| {
        let src = &g[idx * gs.plane()..][..gs.plane()];
        for y in 0..gs.h() {
            plane[y * xs.w()..y * xs.w() + gs.w()].copy_from_slice(&src[y * gs.w()..(y + 1) * gs.w()]);
        }
    });
    out
}
