//! Value-level kernels. Nothing here touches the tape.

use super::index::{broadcast_shape, broadcast_strides, contiguous_strides, for_each_offset2};
use super::{cst, Element, Tensor};
use crate::error::{Error, Result};
use crate::par;

/// Marks a gather position that reads an implicit zero.
pub const ZERO_SLOT: u32 = u32::MAX;

/// `c = alpha * a * b + beta * c` for an `m x k` by `k x n` product with
/// explicit (row, column) strides for each operand.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    beta: T,
    c: &mut [T],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: output out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let v = &mut c[i * rsc + j * csc];
                *v = if beta == T::zero() { T::zero() } else { beta * *v };
            }
        }
        return;
    }
    assert!(last(m, k, rsa, csa) < a.len(), "gemm: lhs out of bounds");
    assert!(last(k, n, rsb, csb) < b.len(), "gemm: rhs out of bounds");
    // SAFETY: the bounds of every strided access were checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

pub fn binary<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let out = broadcast_shape(a.shape(), b.shape())
        .ok_or_else(|| Error::shape(op, format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape())))?;
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let (da, db) = (a.data(), b.data());
    let mut data = vec![T::zero(); out.iter().product()];
    for_each_offset2(&out, &sa, &sb, |l, ia, ib| data[l] = f(da[ia], db[ib]));
    Ok(Tensor::from_parts(out, data))
}

/// Sums `g` over the axes along which `target` was broadcast.
pub fn sum_to_shape<T: Element>(g: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    if g.shape() == target {
        return g.clone();
    }
    let gs = contiguous_strides(g.shape());
    let ts = broadcast_strides(target, g.shape());
    let mut out = vec![T::zero(); target.iter().product()];
    let data = g.data();
    for_each_offset2(g.shape(), &gs, &ts, |_, ig, it| out[it] = out[it] + data[ig]);
    Tensor::from_parts(target.to_vec(), out)
}

pub fn broadcast_to<T: Element>(t: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if t.shape() == shape {
        return t.clone();
    }
    let os = contiguous_strides(shape);
    let ts = broadcast_strides(t.shape(), shape);
    let src = t.data();
    let mut out = vec![T::zero(); shape.iter().product()];
    for_each_offset2(shape, &os, &ts, |l, _, it| out[l] = src[it]);
    Tensor::from_parts(shape.to_vec(), out)
}

/// Shape with the listed axes collapsed to extent 1.
pub fn reduced_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .map(|(i, &n)| if axes.contains(&i) { 1 } else { n })
        .collect()
}

/// Max over `axes` (kept with extent 1) plus the flat input index of the
/// first maximal element per output.
pub fn max_axes<T: Element>(x: &Tensor<T>, axes: &[usize]) -> (Tensor<T>, Vec<usize>) {
    let out_shape = reduced_shape(x.shape(), axes);
    let n_out = out_shape.iter().product();
    let mut best = vec![T::neg_infinity(); n_out];
    let mut arg = vec![usize::MAX; n_out];
    let xs = contiguous_strides(x.shape());
    let os = broadcast_strides(&out_shape, x.shape());
    let data = x.data();
    for_each_offset2(x.shape(), &xs, &os, |_, ix, io| {
        let v = data[ix];
        if arg[io] == usize::MAX || v > best[io] {
            best[io] = v;
            arg[io] = ix;
        }
    });
    (Tensor::from_parts(out_shape, best), arg)
}

/// Softmax along `axis`, numerically stabilised by the row maximum.
pub fn softmax<T: Element>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (_, len, inner) = super::index::split_at_axis(x.shape(), axis);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    par::for_each_chunk_mut(&mut out, len * inner, |o, block| {
        let base = o * len * inner;
        for i in 0..inner {
            let at = |j: usize| base + j * inner + i;
            let mut m = T::neg_infinity();
            for j in 0..len {
                m = m.max(src[at(j)]);
            }
            let mut s = T::zero();
            for j in 0..len {
                let e = (src[at(j)] - m).exp();
                block[j * inner + i] = e;
                s = s + e;
            }
            let inv = T::one() / s;
            for j in 0..len {
                block[j * inner + i] = block[j * inner + i] * inv;
            }
        }
    });
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub fn softmax_backward<T: Element>(y: &Tensor<T>, g: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (_, len, inner) = super::index::split_at_axis(y.shape(), axis);
    let (ys, gs) = (y.data(), g.data());
    let mut out = vec![T::zero(); ys.len()];
    par::for_each_chunk_mut(&mut out, len * inner, |o, block| {
        let base = o * len * inner;
        for i in 0..inner {
            let mut dot = T::zero();
            for j in 0..len {
                let k = base + j * inner + i;
                dot = dot + ys[k] * gs[k];
            }
            for j in 0..len {
                let k = base + j * inner + i;
                block[j * inner + i] = ys[k] * (gs[k] - dot);
            }
        }
    });
    Tensor::from_parts(y.shape().to_vec(), out)
}

/// Per-plane standardisation. Returns the normalised values and one inverse
/// standard deviation per plane.
pub fn standardize_rows<T: Element>(x: &[T], row: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / row;
    let n = cst::<T>(row as f64);
    let stats: Vec<(T, T)> = par::map_range(rows, |r| {
        let xs = &x[r * row..(r + 1) * row];
        let mean = xs.iter().copied().sum::<T>() / n;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        (mean, T::one() / (var + eps).sqrt())
    });
    let mut out = vec![T::zero(); x.len()];
    par::for_each_chunk_mut(&mut out, row, |r, o| {
        let (mean, inv) = stats[r];
        for (dst, &v) in o.iter_mut().zip(&x[r * row..(r + 1) * row]) {
            *dst = (v - mean) * inv;
        }
    });
    (out, stats.into_iter().map(|(_, inv)| inv).collect())
}

/// Backward of [`standardize_rows`] given the normalised values `xhat`.
pub fn standardize_rows_backward<T: Element>(xhat: &[T], inv: &[T], g: &[T], row: usize) -> Vec<T> {
    let n = cst::<T>(row as f64);
    let mut out = vec![T::zero(); g.len()];
    par::for_each_chunk_mut(&mut out, row, |r, o| {
        let xh = &xhat[r * row..(r + 1) * row];
        let gr = &g[r * row..(r + 1) * row];
        let mean_g = gr.iter().copied().sum::<T>() / n;
        let mean_gx = gr.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / n;
        for ((dst, &gi), &xi) in o.iter_mut().zip(gr).zip(xh) {
            *dst = inv[r] * (gi - mean_g - xi * mean_gx);
        }
    });
    out
}

pub fn permute<T: Element>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let in_strides = contiguous_strides(x.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let out_strides = contiguous_strides(&out_shape);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for_each_offset2(&out_shape, &out_strides, &src_strides, |l, _, is| out[l] = src[is]);
    Tensor::from_parts(out_shape, out)
}

pub fn gather<T: Element>(x: &[T], index: &[u32]) -> Vec<T> {
    index
        .iter()
        .map(|&i| if i == ZERO_SLOT { T::zero() } else { x[i as usize] })
        .collect()
}

pub fn scatter_add<T: Element>(g: &[T], index: &[u32], len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); len];
    for (&i, &v) in index.iter().zip(g) {
        if i != ZERO_SLOT {
            out[i as usize] = out[i as usize] + v;
        }
    }
    out
}
