//! Raw loops over flat buffers used by the tape ops.

use crate::Scalar;

/// Numpy-style broadcast of two shapes, or `None` when incompatible.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Flat source index in `src_shape` for every flat index of `out_shape`.
///
/// `src_shape` must broadcast to `out_shape`.
pub(crate) fn broadcast_index(src_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let out_numel: usize = out_shape.iter().product();
    let src_numel: usize = src_shape.iter().product();
    if src_shape == out_shape {
        return (0..out_numel).collect();
    }
    // Trailing-suffix case (bias rows): cyclic indexing.
    if src_shape.len() <= out_shape.len() && out_shape[out_shape.len() - src_shape.len()..] == *src_shape {
        return (0..out_numel).map(|i| i % src_numel.max(1)).collect();
    }
    let rank = out_shape.len();
    let offset = rank - src_shape.len();
    // Stride 0 on broadcast axes.
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..src_shape.len()).rev() {
        if src_shape[d] != 1 {
            strides[d + offset] = acc;
        }
        acc *= src_shape[d];
    }
    let mut idx = Vec::with_capacity(out_numel);
    let mut counter = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..out_numel {
        idx.push(src);
        for d in (0..rank).rev() {
            counter[d] += 1;
            src += strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            src -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}

/// `out[m×p] += a[m×k] · b[k×p]`.
pub fn matmul_raw<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, p: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * p);
    debug_assert_eq!(out.len(), m * p);
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            let b_row = &b[kk * p..(kk + 1) * p];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// `out[k×p] += aᵀ · g` for `a[m×k]`, `g[m×p]`.
pub(crate) fn matmul_at_b<T: Scalar>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let g_row = &g[i * p..(i + 1) * p];
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            let o = &mut out[kk * p..(kk + 1) * p];
            for (ov, &gv) in o.iter_mut().zip(g_row) {
                *ov += aik * gv;
            }
        }
    }
}

/// `out[m×k] += g · bᵀ` for `g[m×p]`, `b[k×p]`.
pub(crate) fn matmul_a_bt<T: Scalar>(g: &[T], b: &[T], out: &mut [T], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let g_row = &g[i * p..(i + 1) * p];
        let o = &mut out[i * k..(i + 1) * k];
        for (kk, ov) in o.iter_mut().enumerate() {
            let b_row = &b[kk * p..(kk + 1) * p];
            let mut s = T::zero();
            for (&gv, &bv) in g_row.iter().zip(b_row) {
                s += gv * bv;
            }
            *ov += s;
        }
    }
}
