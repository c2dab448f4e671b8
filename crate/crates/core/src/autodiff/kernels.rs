//! Plain-slice kernels shared by forward and backward rules.
//!
//! All loops run in a fixed row-major, ascending-index order so results are
//! bitwise reproducible.

use super::Real;

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
}

/// `a[m×k] · b[k×n]` into a fresh buffer.
pub fn gemm<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    gemm_acc(a, b, &mut c, m, k, n);
    c
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let bt = transpose(b, n, k);
    gemm_acc(a, &bt, c, m, k, n);
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let at = transpose(a, k, m);
    gemm_acc(&at, b, c, m, k, n);
}

/// Transpose of a row-major `rows × cols` matrix.
pub fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Geometry of one image plane for im2col.
#[derive(Debug, Clone, Copy)]
pub struct PlaneGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Unfolds `channels×h×w` into `(channels·kh·kw) × (out_h·out_w)` columns.
pub fn im2col<T: Real>(x: &[T], g: &PlaneGeom) -> Vec<T> {
    let cols_w = g.out_h * g.out_w;
    let mut cols = vec![T::zero(); g.channels * g.kh * g.kw * cols_w];
    for c in 0..g.channels {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * cols_w..(row + 1) * cols_w];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[oy * g.out_w + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back onto the plane, accumulating.
pub fn col2im_acc<T: Real>(cols: &[T], g: &PlaneGeom, x: &mut [T]) {
    let cols_w = g.out_h * g.out_w;
    for c in 0..g.channels {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * cols_w..(row + 1) * cols_w];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            plane[iy as usize * g.w + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}
