//! Per-item compute kernels for the layer stack.
//!
//! Convolutions go through im2col + a small matmul so the hot loops run
//! over contiguous `oh*ow`-wide rows, which the compiler vectorizes.

use crate::tensor::Element;

pub struct ConvDims {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }
    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }
}

/// Gather `x[C,H,W]` into `col[c_in*k*k, oh*ow]`; out-of-image taps are 0.
fn im2col<T: Element>(x: &[T], d: &ConvDims, col: &mut [T]) {
    let (oh, ow) = (d.out_h(), d.out_w());
    col.fill(T::zero());
    let mut row = 0;
    for ic in 0..d.c_in {
        let plane = &x[ic * d.h * d.w..(ic + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let crow = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let xrow = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    if d.stride == 1 {
                        let ox_lo = d.pad.saturating_sub(kx);
                        let ox_hi = (d.w + d.pad - kx).min(ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let ix_lo = ox_lo + kx - d.pad;
                        crow[oy * ow + ox_lo..oy * ow + ox_hi]
                            .copy_from_slice(&xrow[ix_lo..ix_lo + (ox_hi - ox_lo)]);
                    } else {
                        for ox in 0..ow {
                            let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                            if ix >= 0 && ix < d.w as isize {
                                crow[oy * ow + ox] = xrow[ix as usize];
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add the col layout back onto the image: adjoint of [`im2col`].
fn col2im_add<T: Element>(col: &[T], d: &ConvDims, dx: &mut [T]) {
    let (oh, ow) = (d.out_h(), d.out_w());
    let mut row = 0;
    for ic in 0..d.c_in {
        let plane = &mut dx[ic * d.h * d.w..(ic + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let crow = &col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let xrow =
                        &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    if d.stride == 1 {
                        let ox_lo = d.pad.saturating_sub(kx);
                        let ox_hi = (d.w + d.pad - kx).min(ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let ix_lo = ox_lo + kx - d.pad;
                        let src = &crow[oy * ow + ox_lo..oy * ow + ox_hi];
                        let dst = &mut xrow[ix_lo..ix_lo + src.len()];
                        for i in 0..src.len() {
                            dst[i] += src[i];
                        }
                    } else {
                        for ox in 0..ow {
                            let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                            if ix >= 0 && ix < d.w as isize {
                                xrow[ix as usize] += crow[oy * ow + ox];
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `out[oc,oy,ox] = b[oc] + sum_{ic,ky,kx} w[oc,ic,ky,kx] * x[ic, oy*s+ky-p, ox*s+kx-p]`
pub fn conv_forward_item<T: Element>(x: &[T], wts: &[T], bias: &[T], d: &ConvDims, out: &mut [T]) {
    let (oh, ow) = (d.out_h(), d.out_w());
    let n = oh * ow;
    debug_assert_eq!(out.len(), d.c_out * n);
    let kk = d.col_rows();
    let mut col = vec![T::zero(); kk * n];
    im2col(x, d, &mut col);
    // out = W[c_out, kk] * col[kk, n]
    for oc in 0..d.c_out {
        let orow = &mut out[oc * n..(oc + 1) * n];
        orow.fill(bias[oc]);
        let wrow = &wts[oc * kk..(oc + 1) * kk];
        for (j, &wv) in wrow.iter().enumerate() {
            let crow = &col[j * n..(j + 1) * n];
            for i in 0..n {
                orow[i] += wv * crow[i];
            }
        }
    }
}

/// Gradients for one item: fills `dx` and, when `dw`/`db` are given,
/// accumulates the parameter gradients (attack loops skip them).
pub fn conv_backward_item<T: Element>(
    x: &[T],
    wts: &[T],
    dout: &[T],
    d: &ConvDims,
    dx: &mut [T],
    mut dw_db: Option<(&mut [T], &mut [T])>,
) {
    let (oh, ow) = (d.out_h(), d.out_w());
    let n = oh * ow;
    let kk = d.col_rows();
    let mut col = vec![T::zero(); kk * n];
    im2col(x, d, &mut col);

    // db[oc] += sum(dout[oc]); dw[oc,j] += dot(dout[oc], col[j])
    if let Some((dw, db)) = dw_db.as_mut() {
        for oc in 0..d.c_out {
            let dorow = &dout[oc * n..(oc + 1) * n];
            let mut s = T::zero();
            for &v in dorow {
                s += v;
            }
            db[oc] += s;
            let dwrow = &mut dw[oc * kk..(oc + 1) * kk];
            for j in 0..kk {
                let crow = &col[j * n..(j + 1) * n];
                let mut acc = T::zero();
                for i in 0..n {
                    acc += dorow[i] * crow[i];
                }
                dwrow[j] += acc;
            }
        }
    }

    // dcol[j, :] = sum_oc w[oc,j] * dout[oc, :], then scatter back
    let dcol = {
        let mut dcol = vec![T::zero(); kk * n];
        for oc in 0..d.c_out {
            let dorow = &dout[oc * n..(oc + 1) * n];
            let wrow = &wts[oc * kk..(oc + 1) * kk];
            for (j, &wv) in wrow.iter().enumerate() {
                let drow = &mut dcol[j * n..(j + 1) * n];
                for i in 0..n {
                    drow[i] += wv * dorow[i];
                }
            }
        }
        dcol
    };
    dx.fill(T::zero());
    col2im_add(&dcol, d, dx);
}

/// 2x2 stride-2 max pooling; trailing odd row/column is dropped.
/// Returns flat source index per output element (ties: first in scan order).
pub fn maxpool_forward_item<T: Element>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    out: &mut [T],
    argmax: &mut [usize],
) {
    let (oh, ow) = (h / 2, w / 2);
    for ch in 0..c {
        let plane = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_i = plane + (2 * oy) * w + 2 * ox;
                let mut best = x[best_i];
                for (dy, dx_) in [(0, 1), (1, 0), (1, 1)] {
                    let i = plane + (2 * oy + dy) * w + 2 * ox + dx_;
                    if x[i] > best {
                        best = x[i];
                        best_i = i;
                    }
                }
                let o = (ch * oh + oy) * ow + ox;
                out[o] = best;
                argmax[o] = best_i;
            }
        }
    }
}

/// `out[n,o] = b[o] + sum_i x[n,i] * w[o,i]` over a whole batch.
pub fn dense_forward<T: Element>(
    x: &[T],
    wts: &[T],
    bias: &[T],
    n: usize,
    in_dim: usize,
    out_dim: usize,
    out: &mut [T],
) {
    for row in 0..n {
        let xr = &x[row * in_dim..(row + 1) * in_dim];
        let or = &mut out[row * out_dim..(row + 1) * out_dim];
        for o in 0..out_dim {
            let wr = &wts[o * in_dim..(o + 1) * in_dim];
            let mut acc = bias[o];
            for i in 0..in_dim {
                acc += xr[i] * wr[i];
            }
            or[o] = acc;
        }
    }
}

pub fn dense_backward<T: Element>(
    x: &[T],
    wts: &[T],
    dout: &[T],
    n: usize,
    in_dim: usize,
    out_dim: usize,
    dx: &mut [T],
    mut dw_db: Option<(&mut [T], &mut [T])>,
) {
    for row in 0..n {
        let xr = &x[row * in_dim..(row + 1) * in_dim];
        let dor = &dout[row * out_dim..(row + 1) * out_dim];
        let dxr = &mut dx[row * in_dim..(row + 1) * in_dim];
        for o in 0..out_dim {
            let g = dor[o];
            let wr = &wts[o * in_dim..(o + 1) * in_dim];
            if let Some((dw, db)) = dw_db.as_mut() {
                db[o] += g;
                let dwr = &mut dw[o * in_dim..(o + 1) * in_dim];
                for i in 0..in_dim {
                    dwr[i] += g * xr[i];
                    dxr[i] += g * wr[i];
                }
            } else {
                for i in 0..in_dim {
                    dxr[i] += g * wr[i];
                }
            }
        }
    }
}
