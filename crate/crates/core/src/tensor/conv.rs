//! Patch extraction for 3×3 same-padded convolutions.
//!
//! Column matrices are laid out `[channels · 9, n · out_h · out_w]`, row index
//! `c·9 + ky·3 + kx`, column index `sample · out_h · out_w + pixel`. Keeping
//! the batch in the column dimension turns a whole batch into one GEMM.

use super::Real;

pub(crate) const K: usize = 3;
pub(crate) const TAPS: usize = K * K;

/// Unfolds `x[n,c,h,w]` into patch columns for a stride-`s` convolution.
pub(crate) fn im2col<T: Real>(x: &[T], n: usize, c: usize, h: usize, w: usize, s: usize) -> Vec<T> {
    let (oh, ow) = (h / s, w / s);
    let p = oh * ow;
    let ld = n * p;
    let mut cols = vec![T::zero(); c * TAPS * ld];
    for b in 0..n {
        for ci in 0..c {
            let plane = &x[(b * c + ci) * h * w..][..h * w];
            for ky in 0..K {
                for kx in 0..K {
                    let row = &mut cols[(ci * TAPS + ky * K + kx) * ld + b * p..][..p];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..][..w];
                        let dst = &mut row[oy * ow..][..ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch columns back onto `[n,c,h,w]`.
pub(crate) fn col2im<T: Real>(cols: &[T], n: usize, c: usize, h: usize, w: usize, s: usize) -> Vec<T> {
    let (oh, ow) = (h / s, w / s);
    let p = oh * ow;
    let ld = n * p;
    let mut x = vec![T::zero(); n * c * h * w];
    for b in 0..n {
        for ci in 0..c {
            let plane = &mut x[(b * c + ci) * h * w..][..h * w];
            for ky in 0..K {
                for kx in 0..K {
                    let row = &cols[(ci * TAPS + ky * K + kx) * ld + b * p..][..p];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..][..w];
                        let src = &row[oy * ow..][..ow];
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * s + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[n, c, p]` → `[c, n·p]`.
pub(crate) fn to_channel_major<T: Real>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    if n == 1 {
        return x.to_vec();
    }
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ci in 0..c {
            out[ci * n * p + b * p..][..p].copy_from_slice(&x[(b * c + ci) * p..][..p]);
        }
    }
    out
}

/// `[c, n·p]` → `[n, c, p]`.
pub(crate) fn from_channel_major<T: Real>(x: Vec<T>, n: usize, c: usize, p: usize) -> Vec<T> {
    if n == 1 {
        return x;
    }
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ci in 0..c {
            out[(b * c + ci) * p..][..p].copy_from_slice(&x[ci * n * p + b * p..][..p]);
        }
    }
    out
}
