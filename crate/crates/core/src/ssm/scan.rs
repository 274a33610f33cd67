//! Linear recurrences `h_t = a_t ∘ h_{t−1} + b_t` with `h_{−1} = 0`.
//!
//! Pairs `(a, b)` compose under `(a₁, b₁) ∘ (a₂, b₂) = (a₁a₂, a₂b₁ + b₂)`,
//! which is associative with identity `(1, 0)`; the parallel kernel is a
//! Blelloch up-sweep/down-sweep over that monoid. Its combination tree
//! depends only on the sequence length, never on the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::tensor::{Element, Result, Tensor, TensorError, Var};

/// How the state recurrence of a selective SSM block is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanKernel {
    /// One primitive for discretization, recurrence and readout; the state
    /// tensor is never materialized on the graph.
    #[default]
    Fused,
    /// Composed primitives with the sequential scan.
    Sequential,
    /// Composed primitives with the Blelloch scan.
    Parallel,
}

/// Data viewed as `[outer, len, inner]`, recurrence along `len`.
#[derive(Debug, Clone, Copy)]
struct Lanes {
    outer: usize,
    len: usize,
    inner: usize,
}

impl Lanes {
    fn of(shape: &[usize], axis: usize) -> Self {
        Lanes {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }

    fn block(&self) -> usize {
        self.len * self.inner
    }
}

fn sequential_lanes<T: Element>(a: &[T], b: &[T], l: Lanes) -> Vec<T> {
    let mut h = vec![T::zero(); a.len()];
    for o in 0..l.outer {
        let base = o * l.block();
        for t in 0..l.len {
            let row = base + t * l.inner;
            for i in 0..l.inner {
                let prev = if t == 0 { T::zero() } else { h[row - l.inner + i] };
                h[row + i] = a[row + i] * prev + b[row + i];
            }
        }
    }
    h
}

/// In-place Blelloch exclusive scan of one `[n, inner]` block, `n` a power
/// of two, followed by the inclusive fix-up. Returns the `b` components.
fn blelloch_block<T: Element>(a: &[T], b: &[T], len: usize, inner: usize) -> Vec<T> {
    let n = len.next_power_of_two();
    let mut sa = vec![T::one(); n * inner];
    let mut sb = vec![T::zero(); n * inner];
    sa[..len * inner].copy_from_slice(a);
    sb[..len * inner].copy_from_slice(b);

    let combine_into = |la: &[T], lb: &[T], ra: &mut [T], rb: &mut [T]| {
        for i in 0..inner {
            rb[i] = ra[i] * lb[i] + rb[i];
            ra[i] = la[i] * ra[i];
        }
    };

    // up-sweep: the last slot of each block accumulates the block total
    let mut stride = 2;
    while stride <= n {
        let half = stride / 2;
        let chunk = stride * inner;
        let sweep = |(ca, cb): (&mut [T], &mut [T])| {
            let (la, ra) = ca.split_at_mut(half * inner);
            let (lb, rb) = cb.split_at_mut(half * inner);
            let l = (half - 1) * inner;
            let r = (half - 1) * inner;
            combine_into(&la[l..l + inner], &lb[l..l + inner], &mut ra[r..r + inner], &mut rb[r..r + inner]);
        };
        if n / stride >= 64 && chunk >= 64 {
            sa.par_chunks_mut(chunk).zip(sb.par_chunks_mut(chunk)).for_each(sweep);
        } else {
            sa.chunks_mut(chunk).zip(sb.chunks_mut(chunk)).for_each(sweep);
        }
        stride *= 2;
    }

    // down-sweep to the exclusive prefix
    let last = (n - 1) * inner;
    sa[last..].iter_mut().for_each(|v| *v = T::one());
    sb[last..].iter_mut().for_each(|v| *v = T::zero());
    let mut stride = n;
    let mut tmp_a = vec![T::zero(); inner];
    let mut tmp_b = vec![T::zero(); inner];
    while stride >= 2 {
        let half = stride / 2;
        let chunk = stride * inner;
        let sweep = |(ca, cb): (&mut [T], &mut [T]), ta: &mut [T], tb: &mut [T]| {
            let (la, ra) = ca.split_at_mut(half * inner);
            let (lb, rb) = cb.split_at_mut(half * inner);
            let p = (half - 1) * inner;
            let (la, lb) = (&mut la[p..p + inner], &mut lb[p..p + inner]);
            let (ra, rb) = (&mut ra[p..p + inner], &mut rb[p..p + inner]);
            // left ← prefix; right ← prefix ∘ left-total
            ta.copy_from_slice(la);
            tb.copy_from_slice(lb);
            la.copy_from_slice(ra);
            lb.copy_from_slice(rb);
            for i in 0..inner {
                rb[i] = ta[i] * rb[i] + tb[i];
                ra[i] = ra[i] * ta[i];
            }
        };
        if n / stride >= 64 && chunk >= 64 {
            sa.par_chunks_mut(chunk)
                .zip(sb.par_chunks_mut(chunk))
                .for_each_init(|| (vec![T::zero(); inner], vec![T::zero(); inner]), |(ta, tb), c| sweep(c, ta, tb));
        } else {
            sa.chunks_mut(chunk)
                .zip(sb.chunks_mut(chunk))
                .for_each(|c| sweep(c, &mut tmp_a, &mut tmp_b));
        }
        stride /= 2;
    }

    // inclusive: h_t = a_t · prefix_b + b_t
    sb.truncate(len * inner);
    for (i, h) in sb.iter_mut().enumerate() {
        *h = a[i] * *h + b[i];
    }
    sb
}

fn parallel_lanes<T: Element>(a: &[T], b: &[T], l: Lanes) -> Vec<T> {
    if l.block() == 0 {
        return Vec::new();
    }
    let blocks: Vec<Vec<T>> = (0..l.outer)
        .into_par_iter()
        .map(|o| {
            let r = o * l.block()..(o + 1) * l.block();
            blelloch_block(&a[r.clone()], &b[r], l.len, l.inner)
        })
        .collect();
    blocks.concat()
}

fn run<T: Element>(a: &[T], b: &[T], l: Lanes, kind: ScanKernel) -> Vec<T> {
    match kind {
        ScanKernel::Parallel => parallel_lanes(a, b, l),
        ScanKernel::Sequential | ScanKernel::Fused => sequential_lanes(a, b, l),
    }
}

fn check_pair<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>, axis: usize) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::shapes(op, a.shape(), b.shape()));
    }
    if axis >= a.rank() {
        return Err(TensorError::invalid(op, format!("axis {axis} out of range for {:?}", a.shape())));
    }
    Ok(())
}

/// Reference recurrence along axis 0 of `[T, ...]` tensors.
pub fn scan_sequential<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_pair("scan_sequential", a, b, 0)?;
    let h = sequential_lanes(a.data(), b.data(), Lanes::of(a.shape(), 0));
    Tensor::from_vec(a.shape().to_vec(), h)
}

/// Blelloch scan along axis 0; same contract as [`scan_sequential`].
pub fn scan_parallel<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_pair("scan_parallel", a, b, 0)?;
    let h = parallel_lanes(a.data(), b.data(), Lanes::of(a.shape(), 0));
    Tensor::from_vec(a.shape().to_vec(), h)
}

/// Reverses the time axis of a lane layout.
fn reverse_time<T: Element>(x: &[T], l: Lanes) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for o in 0..l.outer {
        for t in (0..l.len).rev() {
            let row = o * l.block() + t * l.inner;
            out.extend_from_slice(&x[row..row + l.inner]);
        }
    }
    out
}

/// Differentiable recurrence along `axis`.
///
/// The adjoint is itself a reversed recurrence:
/// `ĝ_t = g_t + a_{t+1} ĝ_{t+1}`, `∂b_t = ĝ_t`, `∂a_t = ĝ_t h_{t−1}`.
pub fn scan<'g, T: Element>(a: Var<'g, T>, b: Var<'g, T>, axis: usize, kind: ScanKernel) -> Result<Var<'g, T>> {
    let (av, bv) = (a.value(), b.value());
    check_pair("scan", &av, &bv, axis)?;
    let l = Lanes::of(av.shape(), axis);
    let h = Tensor::from_vec(av.shape().to_vec(), run(av.data(), bv.data(), l, kind))?;
    Ok(a.graph().record(
        &[a, b],
        h,
        Box::new(move |g, ins, h| {
            let a = ins[0].data();
            // shifted decay: coefficient for step t of the reversed scan is a_{t+1}
            let mut shifted = vec![T::zero(); a.len()];
            for o in 0..l.outer {
                let base = o * l.block();
                let n = l.block().saturating_sub(l.inner);
                shifted[base..base + n].copy_from_slice(&a[base + l.inner..base + l.block()]);
            }
            let gh_rev = run(&reverse_time(&shifted, l), &reverse_time(g.data(), l), l, kind);
            let gh = reverse_time(&gh_rev, l);
            let hd = h.data();
            let mut ga = vec![T::zero(); a.len()];
            for o in 0..l.outer {
                let base = o * l.block();
                for i in l.inner..l.block() {
                    ga[base + i] = gh[base + i] * hd[base + i - l.inner];
                }
            }
            let shape = ins[0].shape().to_vec();
            vec![
                Some(Tensor::from_vec(shape.clone(), ga).unwrap()),
                Some(Tensor::from_vec(shape, gh).unwrap()),
            ]
        }),
    ))
}

/// Shapes of a selective scan: batch, time, inner width, state size.
#[derive(Debug, Clone, Copy)]
struct SelDims {
    batch: usize,
    len: usize,
    width: usize,
    state: usize,
}

/// Per-batch forward recurrence. Returns `y` and, when `keep` is set, the
/// states `h_t` and decays `exp(Δ_t A)`, each `[T, D·N]`.
fn selective_forward<T: Element>(
    x: &[T],
    dt: &[T],
    a: &[T],
    bm: &[T],
    cm: &[T],
    d: SelDims,
    keep: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (w, n) = (d.width, d.state);
    let mut h = vec![T::zero(); w * n];
    let mut y = vec![T::zero(); d.len * w];
    let cap = if keep { d.len * w * n } else { 0 };
    let (mut hs, mut decays) = (Vec::with_capacity(cap), Vec::with_capacity(cap));
    let mut decay = vec![T::zero(); w * n];
    for t in 0..d.len {
        let (bt, ct) = (&bm[t * n..(t + 1) * n], &cm[t * n..(t + 1) * n]);
        let dtt = &dt[t * w..(t + 1) * w];
        for ((dj, aj), &dtv) in decay.chunks_exact_mut(n).zip(a.chunks_exact(n)).zip(dtt) {
            for (v, &av) in dj.iter_mut().zip(aj) {
                *v = (dtv * av).fast_exp();
            }
        }
        for j in 0..w {
            let dx = dtt[j] * x[t * w + j];
            let hj = &mut h[j * n..(j + 1) * n];
            let dj = &decay[j * n..(j + 1) * n];
            let mut acc = T::zero();
            for s in 0..n {
                hj[s] = dj[s] * hj[s] + dx * bt[s];
                acc = acc + ct[s] * hj[s];
            }
            y[t * w + j] = acc;
        }
        if keep {
            decays.extend_from_slice(&decay);
            hs.extend_from_slice(&h);
        }
    }
    (y, hs, decays)
}

/// Selective scan with input-dependent discretization, as one primitive:
///
/// `h_t = exp(Δ_t ⊗ A) ∘ h_{t−1} + (Δ_t x_t) ⊗ B_t`, `y_t = h_t · C_t`,
///
/// with `x, Δ: [B, T, D]`, `A: [D, N]`, `B_t, C_t: [B, T, N]`, `y: [B, T, D]`.
/// The backward pass recomputes the states per batch element.
pub fn selective_scan<'g, T: Element>(
    x: Var<'g, T>,
    dt: Var<'g, T>,
    a: Var<'g, T>,
    bm: Var<'g, T>,
    cm: Var<'g, T>,
) -> Result<Var<'g, T>> {
    let xs = x.shape();
    let &[batch, len, width] = xs.as_slice() else {
        return Err(TensorError::invalid("selective_scan", format!("x must be [B, T, D], got {xs:?}")));
    };
    let state = a.shape().get(1).copied().unwrap_or(0);
    if dt.shape() != xs
        || a.shape() != [width, state]
        || bm.shape() != [batch, len, state]
        || cm.shape() != [batch, len, state]
    {
        return Err(TensorError::invalid(
            "selective_scan",
            format!(
                "inconsistent shapes: x {xs:?}, dt {:?}, A {:?}, B {:?}, C {:?}",
                dt.shape(),
                a.shape(),
                bm.shape(),
                cm.shape()
            ),
        ));
    }
    let d = SelDims {
        batch,
        len,
        width,
        state,
    };
    let (xv, dtv, av, bv, cv) = (x.value(), dt.value(), a.value(), bm.value(), cm.value());
    let (sx, sn) = (len * width, len * state);
    let ys: Vec<Vec<T>> = (0..batch)
        .into_par_iter()
        .map(|i| {
            selective_forward(
                &xv.data()[i * sx..(i + 1) * sx],
                &dtv.data()[i * sx..(i + 1) * sx],
                av.data(),
                &bv.data()[i * sn..(i + 1) * sn],
                &cv.data()[i * sn..(i + 1) * sn],
                d,
                false,
            )
            .0
        })
        .collect();
    let y = Tensor::from_vec(xs.clone(), ys.concat())?;
    Ok(x.graph().record(
        &[x, dt, a, bm, cm],
        y,
        Box::new(move |g, ins, _| {
            let (xd, dtd, ad, bd, cd) = (ins[0].data(), ins[1].data(), ins[2].data(), ins[3].data(), ins[4].data());
            let per_batch: Vec<_> = (0..d.batch)
                .into_par_iter()
                .map(|i| {
                    let (rx, rn) = (i * sx..(i + 1) * sx, i * sn..(i + 1) * sn);
                    selective_backward(
                        &xd[rx.clone()],
                        &dtd[rx.clone()],
                        ad,
                        &bd[rn.clone()],
                        &cd[rn],
                        &g.data()[rx],
                        d,
                    )
                })
                .collect();
            let mut gx = Vec::with_capacity(d.batch * sx);
            let mut gdt = Vec::with_capacity(d.batch * sx);
            let mut gb = Vec::with_capacity(d.batch * sn);
            let mut gc = Vec::with_capacity(d.batch * sn);
            let mut ga = vec![T::zero(); d.width * d.state];
            for r in per_batch {
                gx.extend(r.gx);
                gdt.extend(r.gdt);
                gb.extend(r.gb);
                gc.extend(r.gc);
                for (acc, v) in ga.iter_mut().zip(r.ga) {
                    *acc = *acc + v;
                }
            }
            vec![
                Some(Tensor::from_vec(ins[0].shape().to_vec(), gx).unwrap()),
                Some(Tensor::from_vec(ins[1].shape().to_vec(), gdt).unwrap()),
                Some(Tensor::from_vec(ins[2].shape().to_vec(), ga).unwrap()),
                Some(Tensor::from_vec(ins[3].shape().to_vec(), gb).unwrap()),
                Some(Tensor::from_vec(ins[4].shape().to_vec(), gc).unwrap()),
            ]
        }),
    ))
}

struct SelGrads<T> {
    gx: Vec<T>,
    gdt: Vec<T>,
    ga: Vec<T>,
    gb: Vec<T>,
    gc: Vec<T>,
}

fn selective_backward<T: Element>(
    x: &[T],
    dt: &[T],
    a: &[T],
    bm: &[T],
    cm: &[T],
    gy: &[T],
    d: SelDims,
) -> SelGrads<T> {
    let (w, n) = (d.width, d.state);
    let (_, hs, decays) = selective_forward(x, dt, a, bm, cm, d, true);
    let mut r = SelGrads {
        gx: vec![T::zero(); d.len * w],
        gdt: vec![T::zero(); d.len * w],
        ga: vec![T::zero(); w * n],
        gb: vec![T::zero(); d.len * n],
        gc: vec![T::zero(); d.len * n],
    };
    // gh holds ∂L/∂h_t after adding the readout term at step t
    let mut gh = vec![T::zero(); w * n];
    for t in (0..d.len).rev() {
        let (bt, ct) = (&bm[t * n..(t + 1) * n], &cm[t * n..(t + 1) * n]);
        let ht = &hs[t * w * n..(t + 1) * w * n];
        let prev = if t > 0 { Some(&hs[(t - 1) * w * n..t * w * n]) } else { None };
        let dec = &decays[t * w * n..(t + 1) * w * n];
        for j in 0..w {
            let (g, dtv, xv) = (gy[t * w + j], dt[t * w + j], x[t * w + j]);
            let mut gdt = T::zero();
            let mut gxv = T::zero();
            for s in 0..n {
                let k = j * n + s;
                gh[k] = gh[k] + ct[s] * g;
                r.gc[t * n + s] = r.gc[t * n + s] + g * ht[k];
                let hp = prev.map_or(T::zero(), |p| p[k]);
                let g_decay = gh[k] * hp * dec[k];
                gdt = gdt + g_decay * a[k] + gh[k] * bt[s] * xv;
                r.ga[k] = r.ga[k] + g_decay * dtv;
                r.gb[t * n + s] = r.gb[t * n + s] + gh[k] * dtv * xv;
                gxv = gxv + gh[k] * dtv * bt[s];
                gh[k] = gh[k] * dec[k];
            }
            r.gdt[t * w + j] = gdt;
            r.gx[t * w + j] = gxv;
        }
    }
    r
}
