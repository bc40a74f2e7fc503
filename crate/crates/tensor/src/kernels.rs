//! Raw loops behind the differentiable ops. Everything here works on flat
//! row-major slices; shape checking happens in the tape layer.

use crate::real::Real;

/// `out[m×n] = a[m×k] · b[k×n]`
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `out[m×n] = a[m×k] · b[n×k]ᵀ`
pub fn matmul_bt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = dot(arow, brow);
        }
    }
    out
}

/// `out[k×n] = a[m×k]ᵀ · b[m×n]`
pub fn matmul_at<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = *yv + alpha * xv;
    }
}

pub fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Geometry of a dilated 1-D cross-correlation.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub width: usize,
    pub len_in: usize,
    pub len_out: usize,
    pub dilation: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    /// Range of output positions `n` for which input index
    /// `n + k·dilation − pad_left` is inside `[0, len_in)`.
    #[inline]
    fn valid_range(&self, k: usize) -> (usize, usize, isize) {
        let shift = (k * self.dilation) as isize - self.pad_left as isize;
        let lo = (-shift).max(0) as usize;
        let hi_signed = self.len_in as isize - shift;
        let hi = hi_signed.clamp(0, self.len_out as isize) as usize;
        (lo.min(hi), hi, shift)
    }
}

/// `out[o, n] = Σ_i Σ_k w[o, i, k] · x[i, n + k·d − pad]` with zero padding.
pub fn conv1d<T: Real>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let mut out = vec![T::zero(); g.c_out * g.len_out];
    for o in 0..g.c_out {
        let orow = &mut out[o * g.len_out..(o + 1) * g.len_out];
        for i in 0..g.c_in {
            let xrow = &x[i * g.len_in..(i + 1) * g.len_in];
            for k in 0..g.width {
                let wv = w[(o * g.c_in + i) * g.width + k];
                if wv == T::zero() {
                    continue;
                }
                let (lo, hi, shift) = g.valid_range(k);
                if lo >= hi {
                    continue;
                }
                let xs = (lo as isize + shift) as usize;
                axpy(wv, &xrow[xs..xs + (hi - lo)], &mut orow[lo..hi]);
            }
        }
    }
    out
}

/// Gradients of [`conv1d`] with respect to input and kernel.
pub fn conv1d_backward<T: Real>(
    x: &[T],
    w: &[T],
    grad_out: &[T],
    g: &ConvGeom,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let mut gx = need_x.then(|| vec![T::zero(); g.c_in * g.len_in]);
    let mut gw = need_w.then(|| vec![T::zero(); w.len()]);
    for o in 0..g.c_out {
        let grow = &grad_out[o * g.len_out..(o + 1) * g.len_out];
        for i in 0..g.c_in {
            for k in 0..g.width {
                let (lo, hi, shift) = g.valid_range(k);
                if lo >= hi {
                    continue;
                }
                let xs = (lo as isize + shift) as usize;
                let widx = (o * g.c_in + i) * g.width + k;
                if let Some(gx) = gx.as_mut() {
                    let xrow = &mut gx[i * g.len_in..(i + 1) * g.len_in];
                    axpy(w[widx], &grow[lo..hi], &mut xrow[xs..xs + (hi - lo)]);
                }
                if let Some(gw) = gw.as_mut() {
                    let xrow = &x[i * g.len_in..(i + 1) * g.len_in];
                    gw[widx] = gw[widx] + dot(&grow[lo..hi], &xrow[xs..xs + (hi - lo)]);
                }
            }
        }
    }
    (gx, gw)
}

/// Splits a shape around `axis` into `(outer, extent, inner)`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let ab = matmul(&a, &b, 2, 3, 4);
        let bt = transpose(&b, 3, 4);
        assert_eq!(matmul_bt(&a, &bt, 2, 3, 4), ab);
        let at = transpose(&a, 2, 3);
        assert_eq!(matmul_at(&at, &b, 3, 2, 4).len(), 8);
        assert_eq!(matmul_at(&at, &b, 3, 2, 4), ab);
    }

    #[test]
    fn conv_valid_range_covers_padding() {
        let g = ConvGeom {
            c_in: 1,
            c_out: 1,
            width: 3,
            len_in: 5,
            len_out: 5,
            dilation: 2,
            pad_left: 2,
        };
        assert_eq!(g.valid_range(0), (2, 5, -2));
        assert_eq!(g.valid_range(1), (0, 5, 0));
        assert_eq!(g.valid_range(2), (0, 3, 2));
    }
}
