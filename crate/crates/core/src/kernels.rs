//! Raw numeric kernels shared by the pure operators and the autodiff tape.
//!
//! Keeping forward math in one place guarantees that the public warping
//! functions and the tape ops cannot drift apart.

use crate::tensor::Scalar;

/// Output spatial size of a padded strided convolution.
#[inline]
pub fn conv_out_size(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1)
}

/// Unfold `[cin, h, w]` into columns `[cin*k*k, oh*ow]` (zero padded).
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Scalar>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    col: &mut [T],
) {
    let (oh, ow) = conv_out_size(h, w, k, stride, pad);
    let ocols = oh * ow;
    debug_assert_eq!(col.len(), cin * k * k * ocols);
    for c in 0..cin {
        let xc = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * ocols;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut col[row + oy * ow..row + (oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::ZERO);
                        continue;
                    }
                    let src = &xc[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        dst[ox] = if ix < 0 || ix >= w as isize {
                            T::ZERO
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Fold columns back onto the input grid, accumulating overlaps.
#[allow(clippy::too_many_arguments)]
pub fn col2im_accum<T: Scalar>(
    col: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    x_grad: &mut [T],
) {
    let (oh, ow) = conv_out_size(h, w, k, stride, pad);
    let ocols = oh * ow;
    for c in 0..cin {
        let xg = &mut x_grad[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * ocols;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &col[row + oy * ow..row + (oy + 1) * ow];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            xg[iy as usize * w + ix as usize] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution forward: `out[o] = sum_i w[o,i] * x[i] + b[o]`.
///
/// `out` must be sized `[cout, oh, ow]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    bias: Option<&[T]>,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out: &mut [T],
) -> Vec<T> {
    let (oh, ow) = conv_out_size(h, w, k, stride, pad);
    let ocols = oh * ow;
    let kk = cin * k * k;
    let mut col = vec![T::ZERO; kk * ocols];
    im2col(x, cin, h, w, k, stride, pad, &mut col);
    unsafe {
        T::gemm(
            cout,
            kk,
            ocols,
            T::ONE,
            weight.as_ptr(),
            kk as isize,
            1,
            col.as_ptr(),
            ocols as isize,
            1,
            T::ZERO,
            out.as_mut_ptr(),
            ocols as isize,
            1,
        );
    }
    if let Some(b) = bias {
        for o in 0..cout {
            let bo = b[o];
            for v in &mut out[o * ocols..(o + 1) * ocols] {
                *v += bo;
            }
        }
    }
    col
}

/// Convolution backward. Accumulates into the provided gradient buffers;
/// any of them may be absent when that input does not require gradients.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    col: &[T],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    grad_out: &[T],
    grad_x: Option<&mut [T]>,
    grad_w: Option<&mut [T]>,
    grad_b: Option<&mut [T]>,
) {
    let (oh, ow) = conv_out_size(h, w, k, stride, pad);
    let ocols = oh * ow;
    let kk = cin * k * k;
    debug_assert_eq!(col.len(), kk * ocols);

    if let Some(gb) = grad_b {
        for o in 0..cout {
            let mut s = T::ZERO;
            for &g in &grad_out[o * ocols..(o + 1) * ocols] {
                s += g;
            }
            gb[o] += s;
        }
    }

    if let Some(gw) = grad_w {
        // gw[cout, kk] += grad_out[cout, ocols] * col[kk, ocols]^T
        unsafe {
            T::gemm(
                cout,
                ocols,
                kk,
                T::ONE,
                grad_out.as_ptr(),
                ocols as isize,
                1,
                col.as_ptr(),
                1,
                ocols as isize,
                T::ONE,
                gw.as_mut_ptr(),
                kk as isize,
                1,
            );
        }
    }

    if let Some(gx) = grad_x {
        // gcol[kk, ocols] = weight[cout, kk]^T * grad_out[cout, ocols]
        let mut gcol = vec![T::ZERO; kk * ocols];
        unsafe {
            T::gemm(
                kk,
                cout,
                ocols,
                T::ONE,
                weight.as_ptr(),
                1,
                kk as isize,
                grad_out.as_ptr(),
                ocols as isize,
                1,
                T::ZERO,
                gcol.as_mut_ptr(),
                ocols as isize,
                1,
            );
        }
        col2im_accum(&gcol, cin, h, w, k, stride, pad, gx);
    }
}

/// Bilinear sample of `x` at displaced positions, zero outside the grid.
///
/// `out[c,i,j] = x(j + flow_x[i,j], i + flow_y[i,j])` where `flow` is a
/// `[2, h, w]` buffer, channel 0 horizontal, channel 1 vertical, in pixels.
pub fn grid_sample_forward<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    flow: &[T],
    out: &mut [T],
) {
    let plane = h * w;
    debug_assert_eq!(flow.len(), 2 * plane);
    debug_assert_eq!(out.len(), c * plane);
    let hi = h as isize;
    let wi = w as isize;
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let sx = T::from_f64(j as f64) + flow[p];
            let sy = T::from_f64(i as f64) + flow[plane + p];
            let x0f = sx.floor();
            let y0f = sy.floor();
            let wx = (sx - x0f).to_f64();
            let wy = (sy - y0f).to_f64();
            let x0 = x0f.to_f64() as isize;
            let y0 = y0f.to_f64() as isize;
            let w00 = T::from_f64((1.0 - wx) * (1.0 - wy));
            let w01 = T::from_f64(wx * (1.0 - wy));
            let w10 = T::from_f64((1.0 - wx) * wy);
            let w11 = T::from_f64(wx * wy);
            let in00 = x0 >= 0 && x0 < wi && y0 >= 0 && y0 < hi;
            let in01 = x0 + 1 >= 0 && x0 + 1 < wi && y0 >= 0 && y0 < hi;
            let in10 = x0 >= 0 && x0 < wi && y0 + 1 >= 0 && y0 + 1 < hi;
            let in11 = x0 + 1 >= 0 && x0 + 1 < wi && y0 + 1 >= 0 && y0 + 1 < hi;
            for ch in 0..c {
                let base = ch * plane;
                let mut acc = T::ZERO;
                if in00 {
                    acc += w00 * x[base + y0 as usize * w + x0 as usize];
                }
                if in01 {
                    acc += w01 * x[base + y0 as usize * w + (x0 + 1) as usize];
                }
                if in10 {
                    acc += w10 * x[base + (y0 + 1) as usize * w + x0 as usize];
                }
                if in11 {
                    acc += w11 * x[base + (y0 + 1) as usize * w + (x0 + 1) as usize];
                }
                out[base + p] = acc;
            }
        }
    }
}

/// Backward of [`grid_sample_forward`] with respect to both inputs.
#[allow(clippy::too_many_arguments)]
pub fn grid_sample_backward<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    flow: &[T],
    grad_out: &[T],
    mut grad_x: Option<&mut [T]>,
    mut grad_flow: Option<&mut [T]>,
) {
    let plane = h * w;
    let hi = h as isize;
    let wi = w as isize;
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let sx = T::from_f64(j as f64) + flow[p];
            let sy = T::from_f64(i as f64) + flow[plane + p];
            let x0f = sx.floor();
            let y0f = sy.floor();
            let wx = (sx - x0f).to_f64();
            let wy = (sy - y0f).to_f64();
            let x0 = x0f.to_f64() as isize;
            let y0 = y0f.to_f64() as isize;
            let in00 = x0 >= 0 && x0 < wi && y0 >= 0 && y0 < hi;
            let in01 = x0 + 1 >= 0 && x0 + 1 < wi && y0 >= 0 && y0 < hi;
            let in10 = x0 >= 0 && x0 < wi && y0 + 1 >= 0 && y0 + 1 < hi;
            let in11 = x0 + 1 >= 0 && x0 + 1 < wi && y0 + 1 >= 0 && y0 + 1 < hi;
            let w00 = T::from_f64((1.0 - wx) * (1.0 - wy));
            let w01 = T::from_f64(wx * (1.0 - wy));
            let w10 = T::from_f64((1.0 - wx) * wy);
            let w11 = T::from_f64(wx * wy);
            let mut gfx = T::ZERO;
            let mut gfy = T::ZERO;
            for ch in 0..c {
                let base = ch * plane;
                let g = grad_out[base + p];
                let v00 = if in00 {
                    x[base + y0 as usize * w + x0 as usize]
                } else {
                    T::ZERO
                };
                let v01 = if in01 {
                    x[base + y0 as usize * w + (x0 + 1) as usize]
                } else {
                    T::ZERO
                };
                let v10 = if in10 {
                    x[base + (y0 + 1) as usize * w + x0 as usize]
                } else {
                    T::ZERO
                };
                let v11 = if in11 {
                    x[base + (y0 + 1) as usize * w + (x0 + 1) as usize]
                } else {
                    T::ZERO
                };
                if let Some(gx) = grad_x.as_deref_mut() {
                    if in00 {
                        gx[base + y0 as usize * w + x0 as usize] += g * w00;
                    }
                    if in01 {
                        gx[base + y0 as usize * w + (x0 + 1) as usize] += g * w01;
                    }
                    if in10 {
                        gx[base + (y0 + 1) as usize * w + x0 as usize] += g * w10;
                    }
                    if in11 {
                        gx[base + (y0 + 1) as usize * w + (x0 + 1) as usize] += g * w11;
                    }
                }
                if grad_flow.is_some() {
                    let one_wy = T::from_f64(1.0 - wy);
                    let one_wx = T::from_f64(1.0 - wx);
                    let tw = T::from_f64(wy);
                    let txw = T::from_f64(wx);
                    gfx += g * ((v01 - v00) * one_wy + (v11 - v10) * tw);
                    gfy += g * ((v10 - v00) * one_wx + (v11 - v01) * txw);
                }
            }
            if let Some(gf) = grad_flow.as_deref_mut() {
                gf[p] += gfx;
                gf[plane + p] += gfy;
            }
        }
    }
}

#[derive(Clone, Copy)]
struct LinTap {
    i0: usize,
    i1: usize,
    w1: f64,
}

fn linear_taps(n_in: usize, n_out: usize) -> Vec<LinTap> {
    // Half-pixel centers with clamp-to-edge, so constants are preserved.
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let clamped = src.clamp(0.0, (n_in - 1) as f64);
            let i0 = clamped.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            LinTap {
                i0,
                i1,
                w1: clamped - i0 as f64,
            }
        })
        .collect()
}

/// Bilinear resize of `[c, h, w]` to `[c, oh, ow]` (edge clamped).
pub fn bilinear_resize_forward<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    out: &mut [T],
) {
    let ys = linear_taps(h, oh);
    let xs = linear_taps(w, ow);
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, ty) in ys.iter().enumerate() {
            let r0 = &src[ty.i0 * w..ty.i0 * w + w];
            let r1 = &src[ty.i1 * w..ty.i1 * w + w];
            let wy1 = T::from_f64(ty.w1);
            let wy0 = T::from_f64(1.0 - ty.w1);
            for (ox, tx) in xs.iter().enumerate() {
                let wx1 = T::from_f64(tx.w1);
                let wx0 = T::from_f64(1.0 - tx.w1);
                let top = r0[tx.i0] * wx0 + r0[tx.i1] * wx1;
                let bot = r1[tx.i0] * wx0 + r1[tx.i1] * wx1;
                dst[oy * ow + ox] = top * wy0 + bot * wy1;
            }
        }
    }
}

/// Backward of [`bilinear_resize_forward`]; accumulates into `grad_x`.
pub fn bilinear_resize_backward<T: Scalar>(
    grad_out: &[T],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    grad_x: &mut [T],
) {
    let ys = linear_taps(h, oh);
    let xs = linear_taps(w, ow);
    for ch in 0..c {
        let g = &grad_out[ch * oh * ow..(ch + 1) * oh * ow];
        let gx = &mut grad_x[ch * h * w..(ch + 1) * h * w];
        for (oy, ty) in ys.iter().enumerate() {
            let wy1 = T::from_f64(ty.w1);
            let wy0 = T::from_f64(1.0 - ty.w1);
            for (ox, tx) in xs.iter().enumerate() {
                let wx1 = T::from_f64(tx.w1);
                let wx0 = T::from_f64(1.0 - tx.w1);
                let gv = g[oy * ow + ox];
                gx[ty.i0 * w + tx.i0] += gv * wy0 * wx0;
                gx[ty.i0 * w + tx.i1] += gv * wy0 * wx1;
                gx[ty.i1 * w + tx.i0] += gv * wy1 * wx0;
                gx[ty.i1 * w + tx.i1] += gv * wy1 * wx1;
            }
        }
    }
}

#[inline]
fn cubic_kernel(t: f64) -> f64 {
    // Catmull-Rom (a = -0.5)
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (A + 2.0) * t * t * t - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * t * t * t - 5.0 * A * t * t + 8.0 * A * t - 4.0 * A
    } else {
        0.0
    }
}

struct CubicTap {
    idx: [usize; 4],
    w: [f64; 4],
}

fn cubic_taps(n_in: usize, n_out: usize) -> Vec<CubicTap> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let base = src.floor() as isize;
            let fr = src - base as f64;
            let mut idx = [0usize; 4];
            let mut w = [0f64; 4];
            for (t, (ii, ww)) in idx.iter_mut().zip(w.iter_mut()).enumerate() {
                let i = base - 1 + t as isize;
                *ii = i.clamp(0, n_in as isize - 1) as usize;
                *ww = cubic_kernel(fr - (t as f64 - 1.0));
            }
            // Kernel weights of Catmull-Rom sum to 1 for interior points;
            // normalize anyway so edge clamping keeps constants exact.
            let s: f64 = w.iter().sum();
            for ww in &mut w {
                *ww /= s;
            }
            CubicTap { idx, w }
        })
        .collect()
}

/// Bicubic (Catmull-Rom) resize of `[c, h, w]` to `[c, oh, ow]`.
pub fn bicubic_resize<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ys = cubic_taps(h, oh);
    let xs = cubic_taps(w, ow);
    // Horizontal pass then vertical pass.
    let mut tmp = vec![T::ZERO; c * h * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut tmp[ch * h * ow..(ch + 1) * h * ow];
        for row in 0..h {
            let r = &src[row * w..(row + 1) * w];
            for (ox, tap) in xs.iter().enumerate() {
                let mut acc = 0.0f64;
                for t in 0..4 {
                    acc += tap.w[t] * r[tap.idx[t]].to_f64();
                }
                dst[row * ow + ox] = T::from_f64(acc);
            }
        }
    }
    let mut out = vec![T::ZERO; c * oh * ow];
    for ch in 0..c {
        let src = &tmp[ch * h * ow..(ch + 1) * h * ow];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, tap) in ys.iter().enumerate() {
            for ox in 0..ow {
                let mut acc = 0.0f64;
                for t in 0..4 {
                    acc += tap.w[t] * src[tap.idx[t] * ow + ox].to_f64();
                }
                dst[oy * ow + ox] = T::from_f64(acc);
            }
        }
    }
    out
}

/// Nearest-neighbor resize for label maps (ids must not be blended).
pub fn nearest_resize_u8(x: &[u8], h: usize, w: usize, oh: usize, ow: usize) -> Vec<u8> {
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let mut out = vec![0u8; oh * ow];
    for oy in 0..oh {
        let iy = (((oy as f64 + 0.5) * sy - 0.5).round().max(0.0) as usize).min(h - 1);
        for ox in 0..ow {
            let ix = (((ox as f64 + 0.5) * sx - 0.5).round().max(0.0) as usize).min(w - 1);
            out[oy * ow + ox] = x[iy * w + ix];
        }
    }
    out
}
