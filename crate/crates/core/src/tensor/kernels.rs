//! Loop kernels shared by the primitive operations.
//!
//! Parallel kernels split work so that every output element is produced by
//! exactly one task with a fixed loop order; results do not depend on the
//! number of worker threads.

use rayon::prelude::*;

use super::{numel, Element, Tensor};

/// Minimum number of multiply-adds before a kernel fans out to rayon.
const PAR_THRESHOLD: usize = 1 << 15;

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
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

/// Strides of `shape` expressed in the coordinates of `out` (right-aligned),
/// zero along broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - shape.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_offset, b_offset)` for every element of `out`.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total = numel(out);
    if total == 0 {
        return;
    }
    if out.is_empty() {
        f(0, 0, 0);
        return;
    }
    let rank = out.len();
    let inner = out[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let mut oa = 0usize;
    let mut ob = 0usize;
    let mut o = 0usize;
    while o < total {
        for j in 0..inner {
            f(o + j, oa + j * ia, ob + j * ib);
        }
        o += inner;
        // advance the outer multi-index
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Elementwise `f(a, b)` over the broadcast of both shapes.
pub(crate) fn zip_broadcast<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    out_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Tensor<T> {
    let (da, db) = (a.data(), b.data());
    let data = if a.shape() == b.shape() {
        da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
    } else if b.numel() == 1 && a.shape() == out_shape {
        let y = db[0];
        da.iter().map(|&x| f(x, y)).collect()
    } else if a.numel() == 1 && b.shape() == out_shape {
        let x = da[0];
        db.iter().map(|&y| f(x, y)).collect()
    } else {
        let sa = broadcast_strides(a.shape(), out_shape);
        let sb = broadcast_strides(b.shape(), out_shape);
        let mut out = vec![T::zero(); numel(out_shape)];
        for_each_broadcast(out_shape, &sa, &sb, |o, i, j| out[o] = f(da[i], db[j]));
        out
    };
    Tensor::from_vec(out_shape.to_vec(), data).expect("broadcast shape")
}

/// Sums `g` over the axes along which `target` was broadcast.
pub(crate) fn reduce_to_shape<T: Element>(g: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    if g.shape() == target {
        return g.clone();
    }
    let mut out = vec![T::zero(); numel(target)];
    if numel(target) == 1 {
        out[0] = g.sum_all();
    } else {
        let st = broadcast_strides(target, g.shape());
        let zero = vec![0; g.rank()];
        let data = g.data();
        for_each_broadcast(g.shape(), &st, &zero, |o, t, _| out[t] = out[t] + data[o]);
    }
    Tensor::from_vec(target.to_vec(), out).expect("target shape")
}

/// `c[m×n] = a[m×k] · b[k×n]`, all row-major.
/// Dot product with eight independent partial sums, which lets the compiler
/// vectorize it; the summation order is fixed, so results are deterministic.
#[inline]
pub(crate) fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] = acc[i] + x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail = tail + x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

pub(crate) fn gemm<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    const ROWS: usize = 4;
    let mut c = vec![T::zero(); m * n];
    if m == 0 || n == 0 {
        return c;
    }
    if n < 32 && k >= 16 {
        return gemm_dot(a, b, m, k, n);
    }
    // four output rows share each pass over a row of `b`
    let block = |(blk, cblk): (usize, &mut [T])| {
        let i0 = blk * ROWS;
        let rows = cblk.len() / n;
        if rows < ROWS {
            for (r, crow) in cblk.chunks_mut(n).enumerate() {
                let arow = &a[(i0 + r) * k..(i0 + r + 1) * k];
                for (p, &aip) in arow.iter().enumerate() {
                    let brow = &b[p * n..(p + 1) * n];
                    for (c, &bv) in crow.iter_mut().zip(brow) {
                        *c = *c + aip * bv;
                    }
                }
            }
            return;
        }
        let (c0, rest) = cblk.split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        for p in 0..k {
            let (a0, a1, a2, a3) = (a[i0 * k + p], a[(i0 + 1) * k + p], a[(i0 + 2) * k + p], a[(i0 + 3) * k + p]);
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                let bv = brow[j];
                c0[j] = c0[j] + a0 * bv;
                c1[j] = c1[j] + a1 * bv;
                c2[j] = c2[j] + a2 * bv;
                c3[j] = c3[j] + a3 * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        c.par_chunks_mut(ROWS * n).enumerate().for_each(block);
    } else {
        c.chunks_mut(ROWS * n).enumerate().for_each(block);
    }
    c
}

/// Narrow outputs: each entry is a contiguous dot product against `bᵀ`.
fn gemm_dot<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let bt = transpose2(b, k, n);
    let mut c = vec![T::zero(); m * n];
    let row = |(i, crow): (usize, &mut [T])| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cv) in crow.iter_mut().enumerate() {
            *cv = dot(arow, &bt[j * k..(j + 1) * k]);
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
    c
}

/// Transpose of a row-major `rows × cols` matrix.
pub(crate) fn transpose2<T: Element>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    const BLOCK: usize = 32;
    for r0 in (0..rows).step_by(BLOCK) {
        for c0 in (0..cols).step_by(BLOCK) {
            for r in r0..(r0 + BLOCK).min(rows) {
                for c in c0..(c0 + BLOCK).min(cols) {
                    out[c * rows + r] = a[r * cols + c];
                }
            }
        }
    }
    out
}

/// General axis permutation: output axis `i` is input axis `perm[i]`.
pub(crate) fn permute<T: Element>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let rank = shape.len();
    // Fast path: swapping the last two axes of a batch of matrices.
    if rank >= 2
        && perm[..rank - 2].iter().enumerate().all(|(i, &p)| i == p)
        && perm[rank - 2] == rank - 1
        && perm[rank - 1] == rank - 2
    {
        let (r, c) = (shape[rank - 2], shape[rank - 1]);
        let batch = numel(&shape[..rank - 2]);
        let mut out = Vec::with_capacity(x.numel());
        for b in 0..batch {
            out.extend(transpose2(&x.data()[b * r * c..(b + 1) * r * c], r, c));
        }
        return Tensor::from_vec(out_shape, out).unwrap();
    }
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zero = vec![0; rank];
    let data = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for_each_broadcast(&out_shape, &strides, &zero, |o, i, _| out[o] = data[i]);
    Tensor::from_vec(out_shape, out).unwrap()
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 1, 3], &[4, 1]), Some(vec![2, 4, 3]));
        assert_eq!(broadcast_shape(&[], &[5]), Some(vec![5]));
        assert_eq!(broadcast_shape(&[2, 3], &[3, 2]), None);
    }

    #[test]
    fn zip_broadcast_row_and_column() {
        let a = Tensor::<f64>::from_vec(vec![2, 1], vec![10.0, 20.0]).unwrap();
        let b = Tensor::<f64>::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let c = zip_broadcast(&a, &b, &[2, 3], |x, y| x + y);
        assert_eq!(c.data(), &[11.0, 12.0, 13.0, 21.0, 22.0, 23.0]);
        let s = Tensor::<f64>::scalar(1.0);
        let c = zip_broadcast(&b, &s, &[2, 3], |x, y| x + y);
        assert_eq!(c.data(), &[2.0, 3.0, 4.0, 2.0, 3.0, 4.0]);
        let c = zip_broadcast(&s, &b, &[2, 3], |x, y| x - y);
        assert_eq!(c.data(), &[0.0, -1.0, -2.0, 0.0, -1.0, -2.0]);
    }

    #[test]
    fn reduce_inverts_broadcast_sum() {
        let g = Tensor::<f64>::from_fn(vec![2, 3], |i| i as f64);
        assert_eq!(reduce_to_shape(&g, &[3]).data(), &[3.0, 5.0, 7.0]);
        assert_eq!(reduce_to_shape(&g, &[2, 1]).data(), &[3.0, 12.0]);
        assert_eq!(reduce_to_shape(&g, &[]).data(), &[15.0]);
    }

    #[test]
    fn gemm_small() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(gemm::<f64>(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn permute_matches_index_formula() {
        let x = Tensor::<f64>::from_fn(vec![2, 3, 4], |i| i as f64);
        let y = permute(&x, &[2, 0, 1]);
        assert_eq!(y.shape(), &[4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(y.data()[c * 6 + a * 3 + b], x.data()[a * 12 + b * 4 + c]);
                }
            }
        }
        let z = permute(&x, &[0, 2, 1]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(z.data()[a * 12 + c * 3 + b], x.data()[a * 12 + b * 4 + c]);
                }
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn broadcast_then_reduce_scales_by_copies(
            dims in proptest::collection::vec((1usize..4, 1usize..4, proptest::bool::ANY), 1..4),
            lead in 1usize..3,
        ) {
            // source keeps each axis or collapses it to 1; output expands it
            let src: Vec<usize> = dims.iter().map(|&(d, _, keep)| if keep { d } else { 1 }).collect();
            let mut out: Vec<usize> = vec![lead];
            out.extend(dims.iter().map(|&(d, e, keep)| if keep { d } else { e }));
            let copies = numel(&out) / numel(&src);
            let x = Tensor::<f64>::from_fn(src.clone(), |i| i as f64 * 0.5 - 1.0);
            let zero = Tensor::scalar(0.0);
            let b = zip_broadcast(&x, &zero, &out, |v, _| v);
            let back = reduce_to_shape(&b, &src);
            for (a, c) in back.data().iter().zip(x.data()) {
                proptest::prop_assert_eq!(*a, *c * copies as f64);
            }
        }
    }
}
