//! Dense f64 kernels backing the tensor operations.
//!
//! Every kernel has a sequential implementation; with the `parallel` feature
//! the public entry points dispatch to a rayon variant above a size
//! threshold. Each output element is computed independently and written
//! exactly once, so the parallel variants are bitwise identical to the
//! sequential ones. Reductions stay sequential: their result depends on the
//! order of summation.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Minimum element count before an elementwise kernel goes parallel.
pub const PAR_ELEMWISE_MIN: usize = 16_384;
/// Minimum m*k*n before a matmul kernel goes parallel.
pub const PAR_MATMUL_MIN: usize = 32_768;

/// Broadcast shape under trailing-axis alignment, or `None` if incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db {
            out[i] = da;
        } else if da == 1 {
            out[i] = db;
        } else if db == 1 {
            out[i] = da;
        } else {
            return None;
        }
    }
    Some(out)
}

/// Row-major strides, with stride 0 on axes of extent 1 (broadcast axes).
/// The shape is right-aligned to `rank`.
fn broadcast_strides(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut strides = vec![0usize; rank];
    let offset = rank - shape.len();
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Flat source index for output position `flat` of `out_shape`, where the
/// source participates with broadcast `strides`.
#[inline]
fn src_index(mut flat: usize, out_shape: &[usize], strides: &[usize]) -> usize {
    let mut idx = 0usize;
    for d in (0..out_shape.len()).rev() {
        let c = flat % out_shape[d];
        flat /= out_shape[d];
        idx += c * strides[d];
    }
    idx
}

// ---------------------------------------------------------------------------
// Elementwise map
// ---------------------------------------------------------------------------

pub fn map_seq<F: Fn(f64) -> f64>(src: &[f64], f: F) -> Vec<f64> {
    src.iter().map(|&x| f(x)).collect()
}

#[cfg(feature = "parallel")]
pub fn map_par<F: Fn(f64) -> f64 + Sync>(src: &[f64], f: F) -> Vec<f64> {
    src.par_iter().map(|&x| f(x)).collect()
}

pub fn map<F: Fn(f64) -> f64 + Sync>(src: &[f64], f: F) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    if src.len() >= PAR_ELEMWISE_MIN {
        return map_par(src, f);
    }
    map_seq(src, f)
}

/// Elementwise combine of two same-length slices.
pub fn zip_same_seq<F: Fn(f64, f64) -> f64>(a: &[f64], b: &[f64], f: F) -> Vec<f64> {
    a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
}

#[cfg(feature = "parallel")]
pub fn zip_same_par<F: Fn(f64, f64) -> f64 + Sync>(a: &[f64], b: &[f64], f: F) -> Vec<f64> {
    a.par_iter().zip(b.par_iter()).map(|(&x, &y)| f(x, y)).collect()
}

// ---------------------------------------------------------------------------
// Elementwise combine with broadcasting
// ---------------------------------------------------------------------------

pub fn zip_broadcast_seq<F: Fn(f64, f64) -> f64>(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
    out_shape: &[usize],
    f: F,
) -> Vec<f64> {
    if a_shape == b_shape {
        return zip_same_seq(a, b, f);
    }
    if a.len() == 1 {
        let x = a[0];
        return map_seq(b, |y| f(x, y));
    }
    if b.len() == 1 {
        let y = b[0];
        return map_seq(a, |x| f(x, y));
    }
    let rank = out_shape.len();
    let sa = broadcast_strides(a_shape, rank);
    let sb = broadcast_strides(b_shape, rank);
    let n: usize = out_shape.iter().product();
    (0..n)
        .map(|i| f(a[src_index(i, out_shape, &sa)], b[src_index(i, out_shape, &sb)]))
        .collect()
}

#[cfg(feature = "parallel")]
pub fn zip_broadcast_par<F: Fn(f64, f64) -> f64 + Sync>(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
    out_shape: &[usize],
    f: F,
) -> Vec<f64> {
    if a_shape == b_shape {
        return zip_same_par(a, b, f);
    }
    if a.len() == 1 {
        let x = a[0];
        return map_par(b, |y| f(x, y));
    }
    if b.len() == 1 {
        let y = b[0];
        return map_par(a, |x| f(x, y));
    }
    let rank = out_shape.len();
    let sa = broadcast_strides(a_shape, rank);
    let sb = broadcast_strides(b_shape, rank);
    let n: usize = out_shape.iter().product();
    (0..n)
        .into_par_iter()
        .map(|i| f(a[src_index(i, out_shape, &sa)], b[src_index(i, out_shape, &sb)]))
        .collect()
}

pub fn zip_broadcast<F: Fn(f64, f64) -> f64 + Sync>(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
    out_shape: &[usize],
    f: F,
) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    {
        let n: usize = out_shape.iter().product();
        if n >= PAR_ELEMWISE_MIN {
            return zip_broadcast_par(a, a_shape, b, b_shape, out_shape, f);
        }
    }
    zip_broadcast_seq(a, a_shape, b, b_shape, out_shape, f)
}

// ---------------------------------------------------------------------------
// Matrix multiplication, plain and transposed operand forms
// ---------------------------------------------------------------------------

#[inline]
fn matmul_nn_row(a: &[f64], b: &[f64], k: usize, n: usize, i: usize, out_row: &mut [f64]) {
    let arow = &a[i * k..(i + 1) * k];
    for (p, &av) in arow.iter().enumerate() {
        let brow = &b[p * n..(p + 1) * n];
        for j in 0..n {
            out_row[j] += av * brow[j];
        }
    }
}

/// C[m,n] = A[m,k] * B[k,n]
pub fn matmul_nn_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        matmul_nn_row(a, b, k, n, i, &mut out[i * n..(i + 1) * n]);
    }
    out
}

#[cfg(feature = "parallel")]
pub fn matmul_nn_par(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    out.par_chunks_mut(n)
        .enumerate()
        .for_each(|(i, row)| matmul_nn_row(a, b, k, n, i, row));
    out
}

/// C[m,k] = A[m,n] * B[k,n]^T
pub fn matmul_nt_seq(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += arow[j] * brow[j];
            }
            orow[p] = s;
        }
    }
    out
}

#[cfg(feature = "parallel")]
pub fn matmul_nt_par(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    out.par_chunks_mut(k).enumerate().for_each(|(i, orow)| {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += arow[j] * brow[j];
            }
            orow[p] = s;
        }
    });
    out
}

/// C[k,n] = A[m,k]^T * B[m,n]
pub fn matmul_tn_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for p in 0..k {
        let orow = &mut out[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[i * k + p];
            let brow = &b[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

#[cfg(feature = "parallel")]
pub fn matmul_tn_par(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    out.par_chunks_mut(n).enumerate().for_each(|(p, orow)| {
        for i in 0..m {
            let av = a[i * k + p];
            let brow = &b[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    });
    out
}

pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    if m * k * n >= PAR_MATMUL_MIN {
        return matmul_nn_par(a, b, m, k, n);
    }
    matmul_nn_seq(a, b, m, k, n)
}

pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    if m * k * n >= PAR_MATMUL_MIN {
        return matmul_nt_par(a, b, m, n, k);
    }
    matmul_nt_seq(a, b, m, n, k)
}

pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    if m * k * n >= PAR_MATMUL_MIN {
        return matmul_tn_par(a, b, m, k, n);
    }
    matmul_tn_seq(a, b, m, k, n)
}

// ---------------------------------------------------------------------------
// Reductions (always sequential: summation order is part of the contract)
// ---------------------------------------------------------------------------

pub fn sum_all(data: &[f64]) -> f64 {
    data.iter().sum()
}

/// Sum over one axis; output shape is the input shape with `axis` removed.
pub fn sum_axis(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let extent = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for e in 0..extent {
            let base = (o * extent + e) * inner;
            let orow = &mut out[o * inner..(o + 1) * inner];
            for i in 0..inner {
                orow[i] += data[base + i];
            }
        }
    }
    out
}

/// Inverse of `sum_axis` for gradients: repeat `src` along `axis` of `shape`.
pub fn repeat_axis(src: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let extent = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * extent * inner];
    for o in 0..outer {
        let srow = &src[o * inner..(o + 1) * inner];
        for e in 0..extent {
            let base = (o * extent + e) * inner;
            out[base..base + inner].copy_from_slice(srow);
        }
    }
    out
}

/// Reduce a gradient of `from_shape` down to `to_shape` by summing the axes
/// that were broadcast, so the result matches the operand's shape.
pub fn reduce_to_shape(grad: &[f64], from_shape: &[usize], to_shape: &[usize]) -> Vec<f64> {
    if from_shape == to_shape {
        return grad.to_vec();
    }
    let rank = from_shape.len();
    let strides = broadcast_strides(to_shape, rank);
    let to_len: usize = to_shape.iter().product();
    let mut out = vec![0.0; to_len.max(1)];
    for (i, &g) in grad.iter().enumerate() {
        out[src_index(i, from_shape, &strides)] += g;
    }
    if to_shape.is_empty() {
        out.truncate(1);
    }
    out
}
