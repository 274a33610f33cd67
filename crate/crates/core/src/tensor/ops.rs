//! Differentiable primitives.

use super::fft::{self, is_power_of_two};
use super::kernels::{
    broadcast_shape, gemm, permute, reduce_to_shape, split_axis, transpose2, zip_broadcast,
};
use super::{numel, Element, Result, Tensor, TensorError, Var};

#[inline]
pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    let e = (-x.abs()).fast_exp();
    let r = T::one() / (T::one() + e);
    if x >= T::zero() {
        r
    } else {
        e * r
    }
}

/// `ln(1 + e^x)` without overflow for large `x`.
#[inline]
pub(crate) fn softplus<T: Element>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).fast_exp().ln_1p()
}

impl<'g, T: Element> Var<'g, T> {
    fn check_graph(&self, other: &Var<'_, T>) {
        assert!(
            self.same_graph(other),
            "operands belong to different graphs"
        );
    }

    /// Elementwise map with derivative `deriv(x, y)` where `y = f(x)`.
    fn unary(
        self,
        f: impl Fn(T) -> T,
        deriv: impl Fn(T, T) -> T + 'static,
    ) -> Var<'g, T> {
        let x = self.value();
        let y = x.map(f);
        self.graph.record(
            &[self],
            y,
            Box::new(move |g, inputs, out| {
                let data: Vec<T> = g
                    .data()
                    .iter()
                    .zip(inputs[0].data())
                    .zip(out.data())
                    .map(|((&g, &x), &y)| g * deriv(x, y))
                    .collect();
                vec![Some(Tensor::from_vec(g.shape().to_vec(), data).unwrap())]
            }),
        )
    }

    fn binary(
        self,
        other: Var<'g, T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
        vjp: impl Fn(&Tensor<T>, &Tensor<T>, &Tensor<T>, &[usize]) -> (Tensor<T>, Tensor<T>)
            + 'static,
    ) -> Result<Var<'g, T>> {
        self.check_graph(&other);
        let (a, b) = (self.value(), other.value());
        let out_shape = broadcast_shape(a.shape(), b.shape())
            .ok_or_else(|| TensorError::shapes(op, a.shape(), b.shape()))?;
        let y = zip_broadcast(&a, &b, &out_shape, f);
        Ok(self.graph.record(
            &[self, other],
            y,
            Box::new(move |g, inputs, _| {
                let (ga, gb) = vjp(g, inputs[0], inputs[1], &out_shape);
                vec![
                    Some(reduce_to_shape(&ga, inputs[0].shape())),
                    Some(reduce_to_shape(&gb, inputs[1].shape())),
                ]
            }),
        ))
    }

    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "add", |a, b| a + b, |g, _, _, _| (g.clone(), g.clone()))
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(
            other,
            "sub",
            |a, b| a - b,
            |g, _, _, _| (g.clone(), g.map(|v| -v)),
        )
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(
            other,
            "mul",
            |a, b| a * b,
            |g, a, b, shape| {
                (
                    zip_broadcast(g, b, shape, |g, b| g * b),
                    zip_broadcast(g, a, shape, |g, a| g * a),
                )
            },
        )
    }

    pub fn div(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(
            other,
            "div",
            |a, b| a / b,
            |g, a, b, shape| {
                let ga = zip_broadcast(g, b, shape, |g, b| g / b);
                // d(a/b)/db = -a/b²
                let ab = zip_broadcast(a, b, shape, |a, b| -a / (b * b));
                let gb = zip_broadcast(g, &ab, shape, |g, v| g * v);
                (ga, gb)
            },
        )
    }

    pub fn neg(self) -> Var<'g, T> {
        self.unary(|x| -x, |_, _| -T::one())
    }

    pub fn exp(self) -> Var<'g, T> {
        self.unary(|x| x.fast_exp(), |_, y| y)
    }

    pub fn log(self) -> Var<'g, T> {
        self.unary(|x| x.ln(), |x, _| T::one() / x)
    }

    /// Derivative is taken as 0 at 0.
    pub fn abs(self) -> Var<'g, T> {
        self.unary(
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn powf(self, p: f64) -> Var<'g, T> {
        let pt = T::of(p);
        self.unary(move |x| x.powf(pt), move |x, _| pt * x.powf(pt - T::one()))
    }

    pub fn sqrt(self) -> Var<'g, T> {
        self.unary(|x| x.sqrt(), |_, y| T::of(0.5) / y)
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        self.unary(sigmoid, |_, y| y * (T::one() - y))
    }

    /// `x · sigmoid(x)`.
    pub fn silu(self) -> Var<'g, T> {
        self.unary(
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s + x * s * (T::one() - s)
            },
        )
    }

    pub fn softplus(self) -> Var<'g, T> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    /// Clamp into `[lo, hi]`; gradient passes only inside the interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'g, T> {
        let (lo, hi) = (T::of(lo), T::of(hi));
        self.unary(
            move |x| x.max(lo).min(hi),
            move |x, _| {
                if x >= lo && x <= hi {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn scale(self, c: f64) -> Var<'g, T> {
        let c = T::of(c);
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'g, T> {
        let c = T::of(c);
        self.unary(move |x| x + c, |_, _| T::one())
    }

    fn compare(self, other: Var<'g, T>, op: &'static str, f: impl Fn(T, T) -> bool) -> Result<Var<'g, T>> {
        self.check_graph(&other);
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(a.shape(), b.shape())
            .ok_or_else(|| TensorError::shapes(op, a.shape(), b.shape()))?;
        let mask = zip_broadcast(&a, &b, &shape, |x, y| if f(x, y) { T::one() } else { T::zero() });
        Ok(self.graph.constant(mask))
    }

    /// 1 where `self > other`, else 0. Not differentiable.
    pub fn gt(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.compare(other, "gt", |a, b| a > b)
    }

    /// 1 where `self < other`, else 0. Not differentiable.
    pub fn lt(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.compare(other, "lt", |a, b| a < b)
    }

    /// `[..., m, k] · [k, n] -> [..., m, n]`.
    pub fn matmul(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.check_graph(&rhs);
        let (a, b) = (self.value(), rhs.value());
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(TensorError::shapes("matmul", &sa, &sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = a.numel() / k;
        let c = gemm(a.data(), b.data(), m, k, n);
        let mut out_shape = sa.clone();
        *out_shape.last_mut().unwrap() = n;
        let y = Tensor::from_vec(out_shape, c)?;
        Ok(self.graph.record(
            &[self, rhs],
            y,
            Box::new(move |g, inputs, _| {
                let (a, b) = (inputs[0], inputs[1]);
                let bt = transpose2(b.data(), k, n);
                let ga = gemm(g.data(), &bt, m, n, k);
                let at = transpose2(a.data(), m, k);
                let gb = gemm(&at, g.data(), k, m, n);
                vec![
                    Some(Tensor::from_vec(a.shape().to_vec(), ga).unwrap()),
                    Some(Tensor::from_vec(vec![k, n], gb).unwrap()),
                ]
            }),
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        let y = x.reshape(shape.to_vec())?;
        let in_shape = x.shape().to_vec();
        Ok(self.graph.record(
            &[self],
            y,
            Box::new(move |g, _, _| vec![Some(g.reshape(in_shape.clone()).unwrap())]),
        ))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        let rank = x.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::invalid(
                "permute",
                format!("{perm:?} is not a permutation of {rank} axes"),
            ));
        }
        let y = permute(&x, perm);
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Ok(self.graph.record(
            &[self],
            y,
            Box::new(move |g, _, _| vec![Some(permute(g, &inverse))]),
        ))
    }

    pub fn transpose(self, a: usize, b: usize) -> Result<Var<'g, T>> {
        let rank = self.shape().len();
        if a >= rank || b >= rank {
            return Err(TensorError::invalid(
                "transpose",
                format!("axes ({a}, {b}) out of range for rank {rank}"),
            ));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        match broadcast_shape(x.shape(), shape) {
            Some(s) if s == shape => {}
            _ => return Err(TensorError::shapes("broadcast_to", x.shape(), shape)),
        }
        let zero = Tensor::zeros(Vec::<usize>::new());
        let y = zip_broadcast(&x, &zero, shape, |v, _| v);
        let in_shape = x.shape().to_vec();
        Ok(self.graph.record(
            &[self],
            y,
            Box::new(move |g, _, _| vec![Some(reduce_to_shape(g, &in_shape))]),
        ))
    }

    /// `self[..., start..end, ...]` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(TensorError::invalid(
                "slice",
                format!("range {start}..{end} on axis {axis} of shape {shape:?}"),
            ));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let len = end - start;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let y = Tensor::from_vec(out_shape, data)?;
        Ok(self.graph.record(
            &[self],
            y,
            Box::new(move |g, _, _| {
                let mut gx = vec![T::zero(); outer * extent * inner];
                for o in 0..outer {
                    let base = (o * extent + start) * inner;
                    gx[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(Tensor::from_vec(shape.clone(), gx).unwrap())]
            }),
        ))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let values: Vec<Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::invalid(
                "concat",
                format!("axis {axis} out of range for shape {base:?}"),
            ));
        }
        for (p, v) in parts.iter().zip(&values) {
            first.check_graph(p);
            let s = v.shape();
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::shapes("concat", &base, s));
            }
        }
        let extents: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = extents.iter().sum();
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &e) in values.iter().zip(&extents) {
                data.extend_from_slice(&v.data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let y = Tensor::from_vec(out_shape, data)?;
        Ok(first.graph.record(
            parts,
            y,
            Box::new(move |g, inputs, _| {
                let mut grads: Vec<Vec<T>> = extents
                    .iter()
                    .map(|&e| Vec::with_capacity(outer * e * inner))
                    .collect();
                let gd = g.data();
                let mut pos = 0;
                for _ in 0..outer {
                    for (buf, &e) in grads.iter_mut().zip(&extents) {
                        buf.extend_from_slice(&gd[pos..pos + e * inner]);
                        pos += e * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(inputs)
                    .map(|(d, x)| Some(Tensor::from_vec(x.shape().to_vec(), d).unwrap()))
                    .collect()
            }),
        ))
    }

    /// Zero-pads the last axis to `len`.
    pub fn pad_last(self, len: usize) -> Result<Var<'g, T>> {
        let shape = self.shape();
        let cur = *shape
            .last()
            .ok_or_else(|| TensorError::invalid("pad_last", "scalar input"))?;
        if len < cur {
            return Err(TensorError::invalid(
                "pad_last",
                format!("target length {len} shorter than {cur}"),
            ));
        }
        if len == cur {
            return Ok(self);
        }
        let mut zshape = shape.clone();
        *zshape.last_mut().unwrap() = len - cur;
        let zeros = self.graph.constant(Tensor::zeros(zshape));
        Var::concat(&[self, zeros], shape.len() - 1)
    }

    /// Sum of all elements (rank-0 result).
    pub fn sum(self) -> Var<'g, T> {
        let x = self.value();
        let y = Tensor::scalar(x.sum_all());
        let shape = x.shape().to_vec();
        self.graph.record(
            &[self],
            y,
            Box::new(move |g, _, _| vec![Some(Tensor::full(shape.clone(), g.data()[0]))]),
        )
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = numel(&self.shape()).max(1);
        self.sum().scale(1.0 / n as f64)
    }

    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Result<Var<'g, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::invalid(
                "sum_axis",
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let mut data = vec![T::zero(); outer * inner];
        let xd = x.data();
        for o in 0..outer {
            for e in 0..extent {
                let src = &xd[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        let mut out_shape = shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        let y = Tensor::from_vec(out_shape, data)?;
        Ok(self.graph.record(
            &[self],
            y,
            Box::new(move |g, _, _| {
                let gd = g.data();
                let mut gx = Vec::with_capacity(outer * extent * inner);
                for o in 0..outer {
                    for _ in 0..extent {
                        gx.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(Tensor::from_vec(shape.clone(), gx).unwrap())]
            }),
        ))
    }

    pub fn mean_axis(self, axis: usize, keepdim: bool) -> Result<Var<'g, T>> {
        let n = self.shape().get(axis).copied().unwrap_or(1).max(1);
        Ok(self.sum_axis(axis, keepdim)?.scale(1.0 / n as f64))
    }

    /// Maximum along `axis` (axis removed) and the arg-max indices. Ties
    /// resolve to the lowest index; the gradient flows only to the arg-max.
    pub fn max_axis(self, axis: usize) -> Result<(Var<'g, T>, Vec<usize>)> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(TensorError::invalid(
                "max_axis",
                format!("axis {axis} invalid for shape {shape:?}"),
            ));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let xd = x.data();
        let mut vals = Vec::with_capacity(outer * inner);
        let mut idx = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = xd[o * extent * inner + i];
                let mut arg = 0;
                for e in 1..extent {
                    let v = xd[(o * extent + e) * inner + i];
                    if v > best {
                        best = v;
                        arg = e;
                    }
                }
                vals.push(best);
                idx.push(arg);
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let y = Tensor::from_vec(out_shape, vals)?;
        let arg = idx.clone();
        let var = self.graph.record(
            &[self],
            y,
            Box::new(move |g, _, _| {
                let mut gx = vec![T::zero(); outer * extent * inner];
                let gd = g.data();
                for o in 0..outer {
                    for i in 0..inner {
                        let e = arg[o * inner + i];
                        gx[(o * extent + e) * inner + i] = gd[o * inner + i];
                    }
                }
                vec![Some(Tensor::from_vec(shape.clone(), gx).unwrap())]
            }),
        );
        Ok((var, idx))
    }

    /// Real DFT along the last axis (power-of-two length `n`). The output has
    /// shape `[..., n/2 + 1, 2]`, i.e. interleaved real and imaginary parts.
    pub fn rfft(self) -> Result<Var<'g, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| TensorError::invalid("rfft", "scalar input"))?;
        if n == 0 || !is_power_of_two(n) {
            return Err(TensorError::invalid(
                "rfft",
                format!("length {n} is not a nonzero power of two"),
            ));
        }
        let bins = n / 2 + 1;
        let rows = x.numel() / n;
        let mut data = Vec::with_capacity(rows * bins * 2);
        for row in x.data().chunks(n) {
            let (re, im) = fft::rfft(row)?;
            for (r, i) in re.into_iter().zip(im) {
                data.push(r);
                data.push(i);
            }
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = bins;
        out_shape.push(2);
        let y = Tensor::from_vec(out_shape, data)?;
        Ok(self.graph.record(
            &[self],
            y,
            Box::new(move |g, _, _| {
                // Adjoint of x -> (Re X_k, Im X_k): gx = Re(DFT(conj(G))) with
                // G zero beyond the stored bins.
                let mut gx = Vec::with_capacity(rows * n);
                let mut re = vec![T::zero(); n];
                let mut im = vec![T::zero(); n];
                for row in g.data().chunks(bins * 2) {
                    re.iter_mut().for_each(|v| *v = T::zero());
                    im.iter_mut().for_each(|v| *v = T::zero());
                    for k in 0..bins {
                        re[k] = row[2 * k];
                        im[k] = -row[2 * k + 1];
                    }
                    fft::fft_in_place(&mut re, &mut im, false).expect("power of two");
                    gx.extend_from_slice(&re);
                }
                vec![Some(Tensor::from_vec(shape.clone(), gx).unwrap())]
            }),
        ))
    }

    /// `[..., 2]` interleaved complex values to magnitudes `[...]`. The
    /// gradient at a zero magnitude is taken as zero.
    pub fn complex_abs(self) -> Result<Var<'g, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if shape.last() != Some(&2) {
            return Err(TensorError::invalid(
                "complex_abs",
                format!("last axis must be 2, shape is {shape:?}"),
            ));
        }
        let data: Vec<T> = x
            .data()
            .chunks(2)
            .map(|c| (c[0] * c[0] + c[1] * c[1]).sqrt())
            .collect();
        let y = Tensor::from_vec(shape[..shape.len() - 1].to_vec(), data)?;
        Ok(self.graph.record(
            &[self],
            y,
            Box::new(move |g, inputs, out| {
                let mut gx = Vec::with_capacity(inputs[0].numel());
                for ((c, &m), &gv) in inputs[0].data().chunks(2).zip(out.data()).zip(g.data()) {
                    if m > T::zero() {
                        gx.push(gv * c[0] / m);
                        gx.push(gv * c[1] / m);
                    } else {
                        gx.push(T::zero());
                        gx.push(T::zero());
                    }
                }
                vec![Some(Tensor::from_vec(shape.clone(), gx).unwrap())]
            }),
        ))
    }

    /// Magnitude spectrum of the last axis zero-padded to `pad_to` (a power
    /// of two): shape `[..., pad_to/2 + 1]`.
    pub fn rfft_magnitude(self, pad_to: usize) -> Result<Var<'g, T>> {
        let len = self.shape().last().copied().unwrap_or(0);
        if pad_to < len {
            return Err(TensorError::invalid(
                "rfft_magnitude",
                format!("pad length {pad_to} shorter than input {len}"),
            ));
        }
        self.pad_last(pad_to)?.rfft()?.complex_abs()
    }
}
