//! Low-level numeric loops behind the differentiable ops.
//!
//! Everything here is plain slice arithmetic with fixed iteration order, so
//! results are bit-reproducible run to run. Convolutions use zero padding
//! and the usual CNN output size `(len + 2*pad - k) / stride + 1`.

use crate::tensor::Shape;

/// Dot product with four independent accumulators.
///
/// The fixed regrouping `(s0+s1)+(s2+s3)+tail` is part of the contract: it
/// changes the rounding relative to a sequential sum but is deterministic.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..chunks {
        let j = i * 4;
        s0 += a[j] * b[j];
        s1 += a[j + 1] * b[j + 1];
        s2 += a[j + 2] * b[j + 2];
        s3 += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in chunks * 4..n {
        tail += a[j] * b[j];
    }
    (s0 + s1) + (s2 + s3) + tail
}

/// `y += alpha * x` over equal-length slices.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Valid output range for one spatial axis: all `o` in `lo..hi` satisfy
/// `0 <= o*stride + off < len_in`, clipped to `len_out`.
#[inline]
fn valid_range(len_in: usize, len_out: usize, stride: usize, off: isize) -> (usize, usize) {
    let lo = if off >= 0 {
        0
    } else {
        ((-off) as usize).div_ceil(stride)
    };
    let last = len_in as isize - 1 - off;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last as usize / stride + 1).min(len_out);
    (lo.min(hi), hi)
}

/// Output spatial side for a padded strided convolution, or `None` if the
/// kernel does not fit.
pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Geometry of one kernel tap: its flat index within a `(K, K)` kernel and
/// the output ranges it touches. Computed once per call instead of once per
/// channel; taps whose ranges are empty are dropped up front.
struct Tap {
    k: usize,
    y_off: isize,
    x_off: isize,
    oy_lo: usize,
    oy_hi: usize,
    ox_lo: usize,
    ox_hi: usize,
}

fn tap_table(
    ws: Shape,
    xs: Shape,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<Tap> {
    let mut taps = Vec::with_capacity(ws.h * ws.w);
    for ky in 0..ws.h {
        for kx in 0..ws.w {
            let y_off = ky as isize - pad as isize;
            let x_off = kx as isize - pad as isize;
            let (oy_lo, oy_hi) = valid_range(xs.h, out_h, stride, y_off);
            let (ox_lo, ox_hi) = valid_range(xs.w, out_w, stride, x_off);
            if oy_lo >= oy_hi || ox_lo >= ox_hi {
                continue;
            }
            taps.push(Tap {
                k: ky * ws.w + kx,
                y_off,
                x_off,
                oy_lo,
                oy_hi,
                ox_lo,
                ox_hi,
            });
        }
    }
    taps
}

/// Writes the `(C, P)` plane-major block starting at `src` as `(P, C)` into
/// `dst`.
#[inline]
fn transpose_cp(src: &[f64], c: usize, p: usize, dst: &mut [f64]) {
    debug_assert_eq!(src.len(), c * p);
    debug_assert_eq!(dst.len(), c * p);
    for ci in 0..c {
        let row = &src[ci * p..(ci + 1) * p];
        for (pi, &v) in row.iter().enumerate() {
            dst[pi * c + ci] = v;
        }
    }
}

/// Forward pass for the 1x1 stride-1 unpadded case, which is a per-image
/// matrix product `out[n] = w (Co,Ci) . x[n] (Ci,P)`.
///
/// The channel dimension is made contiguous first so every accumulation is
/// one long [`dot`]; small spatial maps otherwise spend most of their time
/// in loop bookkeeping.
fn pointwise_forward(x: &[f64], xs: Shape, w: &[f64], ws: Shape) -> Vec<f64> {
    let (ci, co, p) = (xs.c, ws.n, xs.h * xs.w);
    let mut out = vec![0.0; xs.n * co * p];
    if p == 1 {
        for n in 0..xs.n {
            let xv = &x[n * ci..(n + 1) * ci];
            let ov = &mut out[n * co..(n + 1) * co];
            for (o, slot) in ov.iter_mut().enumerate() {
                *slot = dot(&w[o * ci..(o + 1) * ci], xv);
            }
        }
        return out;
    }
    let mut xt = vec![0.0; ci * p];
    for n in 0..xs.n {
        transpose_cp(&x[n * ci * p..(n + 1) * ci * p], ci, p, &mut xt);
        for o in 0..co {
            let wrow = &w[o * ci..(o + 1) * ci];
            let orow = &mut out[(n * co + o) * p..(n * co + o + 1) * p];
            for (pi, slot) in orow.iter_mut().enumerate() {
                *slot = dot(wrow, &xt[pi * ci..(pi + 1) * ci]);
            }
        }
    }
    out
}

/// Input gradient for the 1x1 stride-1 unpadded case:
/// `gx[n] += w^T (Ci,Co) . go[n] (Co,P)`.
fn pointwise_backward_data(go: &[f64], w: &[f64], ws: Shape, xs: Shape, gx: &mut [f64]) {
    let (ci, co, p) = (xs.c, ws.n, xs.h * xs.w);
    let mut wt = vec![0.0; ci * co];
    transpose_cp(w, co, ci, &mut wt);
    if p == 1 {
        for n in 0..xs.n {
            let gv = &go[n * co..(n + 1) * co];
            let xv = &mut gx[n * ci..(n + 1) * ci];
            for (c, slot) in xv.iter_mut().enumerate() {
                *slot += dot(&wt[c * co..(c + 1) * co], gv);
            }
        }
        return;
    }
    let mut got = vec![0.0; co * p];
    for n in 0..xs.n {
        transpose_cp(&go[n * co * p..(n + 1) * co * p], co, p, &mut got);
        for c in 0..ci {
            let wrow = &wt[c * co..(c + 1) * co];
            let grow = &mut gx[(n * ci + c) * p..(n * ci + c + 1) * p];
            for (pi, slot) in grow.iter_mut().enumerate() {
                *slot += dot(wrow, &got[pi * co..(pi + 1) * co]);
            }
        }
    }
}

/// Weight gradient for the 1x1 stride-1 unpadded case:
/// `gw += sum_n go[n] (Co,P) . x[n]^T (P,Ci)`.
fn pointwise_backward_weights(go: &[f64], x: &[f64], xs: Shape, ws: Shape, gw: &mut [f64]) {
    let (ci, co, p) = (xs.c, ws.n, xs.h * xs.w);
    if p == 1 {
        for n in 0..xs.n {
            let xv = &x[n * ci..(n + 1) * ci];
            for o in 0..co {
                axpy(go[n * co + o], xv, &mut gw[o * ci..(o + 1) * ci]);
            }
        }
        return;
    }
    let mut xt = vec![0.0; ci * p];
    for n in 0..xs.n {
        transpose_cp(&x[n * ci * p..(n + 1) * ci * p], ci, p, &mut xt);
        for o in 0..co {
            let grow = &go[(n * co + o) * p..(n * co + o + 1) * p];
            let wrow = &mut gw[o * ci..(o + 1) * ci];
            for (pi, &g) in grow.iter().enumerate() {
                axpy(g, &xt[pi * ci..(pi + 1) * ci], wrow);
            }
        }
    }
}

/// Dense 2-D convolution forward pass.
///
/// `x` is `(N, Ci, H, W)`, `w` is `(Co, Ci, K, K)`; the result is
/// `(N, Co, Ho, Wo)` written into a fresh buffer.
pub fn conv2d_forward(
    x: &[f64],
    xs: Shape,
    w: &[f64],
    ws: Shape,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    if ws.h == 1 && ws.w == 1 && stride == 1 && pad == 0 {
        return pointwise_forward(x, xs, w, ws);
    }
    let os = Shape::new(xs.n, ws.n, out_h, out_w);
    let mut out = vec![0.0; os.count()];
    let taps = tap_table(ws, xs, stride, pad, out_h, out_w);
    for n in 0..xs.n {
        for co in 0..ws.n {
            for ci in 0..xs.c {
                let wbase = ws.index(co, ci, 0, 0);
                for t in &taps {
                    let a = w[wbase + t.k];
                    if a == 0.0 {
                        continue;
                    }
                    for oy in t.oy_lo..t.oy_hi {
                        let iy = (oy * stride) as isize + t.y_off;
                        let xrow = xs.index(n, ci, iy as usize, 0);
                        let orow = os.index(n, co, oy, 0);
                        if stride == 1 {
                            let ix0 = (t.ox_lo as isize + t.x_off) as usize;
                            let len = t.ox_hi - t.ox_lo;
                            axpy(
                                a,
                                &x[xrow + ix0..xrow + ix0 + len],
                                &mut out[orow + t.ox_lo..orow + t.ox_lo + len],
                            );
                        } else {
                            for ox in t.ox_lo..t.ox_hi {
                                let ix = ((ox * stride) as isize + t.x_off) as usize;
                                out[orow + ox] += a * x[xrow + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient of [`conv2d_forward`] with respect to the input.
pub fn conv2d_backward_data(
    go: &[f64],
    w: &[f64],
    ws: Shape,
    xs: Shape,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
    gx: &mut [f64],
) {
    if ws.h == 1 && ws.w == 1 && stride == 1 && pad == 0 {
        pointwise_backward_data(go, w, ws, xs, gx);
        return;
    }
    let os = Shape::new(xs.n, ws.n, out_h, out_w);
    let taps = tap_table(ws, xs, stride, pad, out_h, out_w);
    for n in 0..xs.n {
        for co in 0..ws.n {
            for ci in 0..xs.c {
                let wbase = ws.index(co, ci, 0, 0);
                for t in &taps {
                    let a = w[wbase + t.k];
                    if a == 0.0 {
                        continue;
                    }
                    for oy in t.oy_lo..t.oy_hi {
                        let iy = (oy * stride) as isize + t.y_off;
                        let xrow = xs.index(n, ci, iy as usize, 0);
                        let orow = os.index(n, co, oy, 0);
                        if stride == 1 {
                            let ix0 = (t.ox_lo as isize + t.x_off) as usize;
                            let len = t.ox_hi - t.ox_lo;
                            axpy(
                                a,
                                &go[orow + t.ox_lo..orow + t.ox_lo + len],
                                &mut gx[xrow + ix0..xrow + ix0 + len],
                            );
                        } else {
                            for ox in t.ox_lo..t.ox_hi {
                                let ix = ((ox * stride) as isize + t.x_off) as usize;
                                gx[xrow + ix] += a * go[orow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of [`conv2d_forward`] with respect to the weights.
pub fn conv2d_backward_weights(
    go: &[f64],
    x: &[f64],
    xs: Shape,
    ws: Shape,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
    gw: &mut [f64],
) {
    if ws.h == 1 && ws.w == 1 && stride == 1 && pad == 0 {
        pointwise_backward_weights(go, x, xs, ws, gw);
        return;
    }
    let os = Shape::new(xs.n, ws.n, out_h, out_w);
    let taps = tap_table(ws, xs, stride, pad, out_h, out_w);
    for n in 0..xs.n {
        for co in 0..ws.n {
            for ci in 0..xs.c {
                let wbase = ws.index(co, ci, 0, 0);
                for t in &taps {
                    let mut acc = 0.0;
                    for oy in t.oy_lo..t.oy_hi {
                        let iy = (oy * stride) as isize + t.y_off;
                        let xrow = xs.index(n, ci, iy as usize, 0);
                        let orow = os.index(n, co, oy, 0);
                        if stride == 1 {
                            let ix0 = (t.ox_lo as isize + t.x_off) as usize;
                            let len = t.ox_hi - t.ox_lo;
                            acc += dot(
                                &go[orow + t.ox_lo..orow + t.ox_lo + len],
                                &x[xrow + ix0..xrow + ix0 + len],
                            );
                        } else {
                            for ox in t.ox_lo..t.ox_hi {
                                let ix = ((ox * stride) as isize + t.x_off) as usize;
                                acc += go[orow + ox] * x[xrow + ix];
                            }
                        }
                    }
                    gw[wbase + t.k] += acc;
                }
            }
        }
    }
}

/// Depthwise 2-D convolution forward pass.
///
/// `x` is `(N, C, H, W)`, `w` is `(C, 1, K, K)`; channel `c` of the output
/// depends only on channel `c` of the input.
pub fn depthwise_forward(
    x: &[f64],
    xs: Shape,
    w: &[f64],
    ws: Shape,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let os = Shape::new(xs.n, xs.c, out_h, out_w);
    let mut out = vec![0.0; os.count()];
    let taps = tap_table(ws, xs, stride, pad, out_h, out_w);
    for n in 0..xs.n {
        for c in 0..xs.c {
            let wbase = ws.index(c, 0, 0, 0);
            for t in &taps {
                let a = w[wbase + t.k];
                for oy in t.oy_lo..t.oy_hi {
                    let iy = (oy * stride) as isize + t.y_off;
                    let xrow = xs.index(n, c, iy as usize, 0);
                    let orow = os.index(n, c, oy, 0);
                    if stride == 1 {
                        let ix0 = (t.ox_lo as isize + t.x_off) as usize;
                        let len = t.ox_hi - t.ox_lo;
                        axpy(
                            a,
                            &x[xrow + ix0..xrow + ix0 + len],
                            &mut out[orow + t.ox_lo..orow + t.ox_lo + len],
                        );
                    } else {
                        for ox in t.ox_lo..t.ox_hi {
                            let ix = ((ox * stride) as isize + t.x_off) as usize;
                            out[orow + ox] += a * x[xrow + ix];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient of [`depthwise_forward`] with respect to the input.
pub fn depthwise_backward_data(
    go: &[f64],
    w: &[f64],
    ws: Shape,
    xs: Shape,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
    gx: &mut [f64],
) {
    let os = Shape::new(xs.n, xs.c, out_h, out_w);
    let taps = tap_table(ws, xs, stride, pad, out_h, out_w);
    for n in 0..xs.n {
        for c in 0..xs.c {
            let wbase = ws.index(c, 0, 0, 0);
            for t in &taps {
                let a = w[wbase + t.k];
                for oy in t.oy_lo..t.oy_hi {
                    let iy = (oy * stride) as isize + t.y_off;
                    let xrow = xs.index(n, c, iy as usize, 0);
                    let orow = os.index(n, c, oy, 0);
                    if stride == 1 {
                        let ix0 = (t.ox_lo as isize + t.x_off) as usize;
                        let len = t.ox_hi - t.ox_lo;
                        axpy(
                            a,
                            &go[orow + t.ox_lo..orow + t.ox_lo + len],
                            &mut gx[xrow + ix0..xrow + ix0 + len],
                        );
                    } else {
                        for ox in t.ox_lo..t.ox_hi {
                            let ix = ((ox * stride) as isize + t.x_off) as usize;
                            gx[xrow + ix] += a * go[orow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of [`depthwise_forward`] with respect to the weights.
pub fn depthwise_backward_weights(
    go: &[f64],
    x: &[f64],
    xs: Shape,
    ws: Shape,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
    gw: &mut [f64],
) {
    let os = Shape::new(xs.n, xs.c, out_h, out_w);
    let taps = tap_table(ws, xs, stride, pad, out_h, out_w);
    for n in 0..xs.n {
        for c in 0..xs.c {
            let wbase = ws.index(c, 0, 0, 0);
            for t in &taps {
                let mut acc = 0.0;
                for oy in t.oy_lo..t.oy_hi {
                    let iy = (oy * stride) as isize + t.y_off;
                    let xrow = xs.index(n, c, iy as usize, 0);
                    let orow = os.index(n, c, oy, 0);
                    if stride == 1 {
                        let ix0 = (t.ox_lo as isize + t.x_off) as usize;
                        let len = t.ox_hi - t.ox_lo;
                        acc += dot(
                            &go[orow + t.ox_lo..orow + t.ox_lo + len],
                            &x[xrow + ix0..xrow + ix0 + len],
                        );
                    } else {
                        for ox in t.ox_lo..t.ox_hi {
                            let ix = ((ox * stride) as isize + t.x_off) as usize;
                            acc += go[orow + ox] * x[xrow + ix];
                        }
                    }
                }
                gw[wbase + t.k] += acc;
            }
        }
    }
}
