//! Differentiable layers: 1D convolution (grouped, transposed), linear,
//! layer normalization, pooling and the U-Net double-convolution block.
//!
//! Convolutions use the cross-correlation convention and symmetric zero
//! padding: `T_out = (T + 2·pad − K) / stride + 1`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::tensor::{Element, Graph, Result, Tensor, TensorError, Var};
use crate::tensor::kernels::dot;

/// Named traversal over the learnable tensors of a parameter struct.
pub trait ParamSet<T: Element> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>));

    fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |name, t| out.push((name, t)));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Uniform in `±1/sqrt(fan_in)`: Kaiming-uniform with negative slope √5.
pub(crate) fn kaiming_uniform<T: Element>(
    shape: Vec<usize>,
    fan_in: usize,
    rng: &mut impl Rng,
) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..=bound)))
}

/// Shape bookkeeping of a (possibly grouped) 1D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    cout: usize,
    len_in: usize,
    len_out: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    groups: usize,
}

impl ConvGeom {
    /// Range of output positions `t` with `0 <= t·stride + k − pad < len_in`.
    fn valid(&self, k: usize) -> std::ops::Range<usize> {
        let s = self.stride;
        let lo = if self.pad > k {
            (self.pad - k).div_ceil(s)
        } else {
            0
        };
        let hi = if self.len_in + self.pad > k {
            ((self.len_in + self.pad - k - 1) / s + 1).min(self.len_out)
        } else {
            0
        };
        lo..hi.max(lo)
    }

    /// `out[b, co, t] = Σ w[co, c, k] · x[b, g·cig + c, t·s + k − p]`.
    fn forward<T: Element>(&self, x: &[T], w: &[T]) -> Vec<T> {
        let (cig, cog, k_len) = (self.cin / self.groups, self.cout / self.groups, self.kernel);
        let mut out = vec![T::zero(); self.batch * self.cout * self.len_out];
        out.par_chunks_mut(self.len_out)
            .enumerate()
            .for_each(|(row, orow)| {
                let (b, co) = (row / self.cout, row % self.cout);
                let grp = co / cog;
                for c in 0..cig {
                    let ci = grp * cig + c;
                    let xrow = &x[(b * self.cin + ci) * self.len_in..][..self.len_in];
                    let wrow = &w[(co * cig + c) * k_len..][..k_len];
                    for (k, &wv) in wrow.iter().enumerate() {
                        let r = self.valid(k);
                        if r.is_empty() {
                            continue;
                        }
                        if self.stride == 1 {
                            let off = r.start + k - self.pad;
                            let xs = &xrow[off..off + r.len()];
                            for (o, &xv) in orow[r].iter_mut().zip(xs) {
                                *o = *o + wv * xv;
                            }
                        } else {
                            for t in r {
                                orow[t] = orow[t] + wv * xrow[t * self.stride + k - self.pad];
                            }
                        }
                    }
                }
            });
        out
    }

    /// Adjoint of `forward` with respect to `x` (the transposed convolution).
    fn input_grad<T: Element>(&self, g: &[T], w: &[T]) -> Vec<T> {
        let (cig, cog, k_len) = (self.cin / self.groups, self.cout / self.groups, self.kernel);
        let mut gx = vec![T::zero(); self.batch * self.cin * self.len_in];
        gx.par_chunks_mut(self.len_in)
            .enumerate()
            .for_each(|(row, xrow)| {
                let (b, ci) = (row / self.cin, row % self.cin);
                let grp = ci / cig;
                let c = ci % cig;
                for co in grp * cog..(grp + 1) * cog {
                    let grow = &g[(b * self.cout + co) * self.len_out..][..self.len_out];
                    let wrow = &w[(co * cig + c) * k_len..][..k_len];
                    for (k, &wv) in wrow.iter().enumerate() {
                        let r = self.valid(k);
                        if r.is_empty() {
                            continue;
                        }
                        if self.stride == 1 {
                            let off = r.start + k - self.pad;
                            let xs = &mut xrow[off..off + r.len()];
                            for (xv, &gv) in xs.iter_mut().zip(&grow[r]) {
                                *xv = *xv + wv * gv;
                            }
                        } else {
                            for t in r {
                                let i = t * self.stride + k - self.pad;
                                xrow[i] = xrow[i] + wv * grow[t];
                            }
                        }
                    }
                }
            });
        gx
    }

    /// Gradient with respect to the weights, `[cout, cin/groups, kernel]`.
    fn weight_grad<T: Element>(&self, g: &[T], x: &[T]) -> Vec<T> {
        let (cig, cog, k_len) = (self.cin / self.groups, self.cout / self.groups, self.kernel);
        let mut gw = vec![T::zero(); self.cout * cig * k_len];
        gw.par_chunks_mut(cig * k_len)
            .enumerate()
            .for_each(|(co, wrow)| {
                let grp = co / cog;
                for b in 0..self.batch {
                    let grow = &g[(b * self.cout + co) * self.len_out..][..self.len_out];
                    for c in 0..cig {
                        let ci = grp * cig + c;
                        let xrow = &x[(b * self.cin + ci) * self.len_in..][..self.len_in];
                        for k in 0..k_len {
                            let r = self.valid(k);
                            if r.is_empty() {
                                continue;
                            }
                            let mut acc = T::zero();
                            if self.stride == 1 {
                                let off = r.start + k - self.pad;
                                acc = dot(&grow[r.clone()], &xrow[off..off + r.len()]);
                            } else {
                                for t in r {
                                    acc = acc + grow[t] * xrow[t * self.stride + k - self.pad];
                                }
                            }
                            wrow[c * k_len + k] = wrow[c * k_len + k] + acc;
                        }
                    }
                }
            });
        gw
    }
}

/// Sum of `g[b, c, t]` over batch and time, per channel.
fn channel_sums<T: Element>(g: &[T], batch: usize, channels: usize, len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); channels];
    for b in 0..batch {
        for (c, o) in out.iter_mut().enumerate() {
            let row = &g[(b * channels + c) * len..][..len];
            *o = *o + row.iter().copied().sum();
        }
    }
    out
}

fn add_channel_bias<T: Element>(out: &mut [T], bias: &[T], len: usize) {
    let channels = bias.len();
    for (row, chunk) in out.chunks_mut(len).enumerate() {
        let b = bias[row % channels];
        chunk.iter_mut().for_each(|v| *v = *v + b);
    }
}

fn dims3(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        &[b, c, t] => Ok((b, c, t)),
        _ => Err(TensorError::invalid(op, format!("expected [B, C, T], got {shape:?}"))),
    }
}

/// Grouped 1D convolution on `[B, Cin, T]` with weight `[Cout, Cin/groups, K]`.
pub fn conv1d_op<'g, T: Element>(
    x: Var<'g, T>,
    weight: Var<'g, T>,
    bias: Option<Var<'g, T>>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<Var<'g, T>> {
    let (batch, cin, len_in) = dims3("conv1d", &x.shape())?;
    let ws = weight.shape();
    let &[cout, cig, kernel] = ws.as_slice() else {
        return Err(TensorError::invalid("conv1d", format!("weight must be rank 3, got {ws:?}")));
    };
    if groups == 0 || stride == 0 || kernel == 0 || cin % groups != 0 || cout % groups != 0 || cig * groups != cin {
        return Err(TensorError::invalid(
            "conv1d",
            format!("channel mismatch: input {:?}, weight {ws:?}, groups {groups}", x.shape()),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(TensorError::shapes("conv1d bias", &b.shape(), &[cout]));
        }
    }
    if len_in + 2 * pad < kernel {
        return Err(TensorError::invalid(
            "conv1d",
            format!("input length {len_in} + 2·{pad} shorter than kernel {kernel}"),
        ));
    }
    let geom = ConvGeom {
        batch,
        cin,
        cout,
        len_in,
        len_out: (len_in + 2 * pad - kernel) / stride + 1,
        kernel,
        stride,
        pad,
        groups,
    };
    let (xv, wv) = (x.value(), weight.value());
    let mut out = geom.forward(xv.data(), wv.data());
    let mut inputs = vec![x, weight];
    if let Some(b) = bias {
        add_channel_bias(&mut out, b.value().data(), geom.len_out);
        inputs.push(b);
    }
    let y = Tensor::from_vec(vec![batch, cout, geom.len_out], out)?;
    Ok(x.graph().record(
        &inputs,
        y,
        Box::new(move |g, ins, _| {
            let gd = g.data();
            let mut grads = vec![
                Some(Tensor::from_vec(ins[0].shape().to_vec(), geom.input_grad(gd, ins[1].data())).unwrap()),
                Some(Tensor::from_vec(ins[1].shape().to_vec(), geom.weight_grad(gd, ins[0].data())).unwrap()),
            ];
            if ins.len() == 3 {
                grads.push(Some(
                    Tensor::from_vec(vec![geom.cout], channel_sums(gd, geom.batch, geom.cout, geom.len_out)).unwrap(),
                ));
            }
            grads
        }),
    ))
}

/// Transposed convolution on `[B, Cin, T]` with weight `[Cin, Cout, K]`:
/// `T_out = (T − 1)·stride − 2·pad + K`. Without bias it is the exact adjoint
/// of [`conv1d_op`] sharing the same weight tensor.
pub fn conv1d_transpose_op<'g, T: Element>(
    x: Var<'g, T>,
    weight: Var<'g, T>,
    bias: Option<Var<'g, T>>,
    stride: usize,
    pad: usize,
) -> Result<Var<'g, T>> {
    let (batch, cin, len_in) = dims3("conv1d_transpose", &x.shape())?;
    let ws = weight.shape();
    let &[wcin, cout, kernel] = ws.as_slice() else {
        return Err(TensorError::invalid("conv1d_transpose", format!("weight must be rank 3, got {ws:?}")));
    };
    if wcin != cin || stride == 0 || kernel == 0 {
        return Err(TensorError::invalid(
            "conv1d_transpose",
            format!("channel mismatch: input {:?}, weight {ws:?}", x.shape()),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(TensorError::shapes("conv1d_transpose bias", &b.shape(), &[cout]));
        }
    }
    let full = (len_in.max(1) - 1) * stride + kernel;
    if len_in == 0 || full < 2 * pad + 1 {
        return Err(TensorError::invalid(
            "conv1d_transpose",
            format!("output length would be empty for input length {len_in}"),
        ));
    }
    let len_out = full - 2 * pad;
    // The forward conv this is the adjoint of: [B, cout, len_out] -> [B, cin, len_in].
    let geom = ConvGeom {
        batch,
        cin: cout,
        cout: cin,
        len_in: len_out,
        len_out: len_in,
        kernel,
        stride,
        pad,
        groups: 1,
    };
    let (xv, wv) = (x.value(), weight.value());
    let mut out = geom.input_grad(xv.data(), wv.data());
    let mut inputs = vec![x, weight];
    if let Some(b) = bias {
        add_channel_bias(&mut out, b.value().data(), len_out);
        inputs.push(b);
    }
    let y = Tensor::from_vec(vec![batch, cout, len_out], out)?;
    Ok(x.graph().record(
        &inputs,
        y,
        Box::new(move |g, ins, _| {
            let gd = g.data();
            let mut grads = vec![
                Some(Tensor::from_vec(ins[0].shape().to_vec(), geom.forward(gd, ins[1].data())).unwrap()),
                Some(Tensor::from_vec(ins[1].shape().to_vec(), geom.weight_grad(ins[0].data(), gd)).unwrap()),
            ];
            if ins.len() == 3 {
                grads.push(Some(
                    Tensor::from_vec(vec![geom.cin], channel_sums(gd, geom.batch, geom.cin, geom.len_in)).unwrap(),
                ));
            }
            grads
        }),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv1dParams<T> {
    /// `[out_channels, in_channels / groups, kernel]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl<T: Element> Conv1dParams<T> {
    pub fn init(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(groups > 0 && cin % groups == 0 && cout % groups == 0 && kernel >= 1);
        let fan_in = cin / groups * kernel;
        Conv1dParams {
            weight: kaiming_uniform(vec![cout, cin / groups, kernel], fan_in, rng),
            bias: Tensor::zeros(vec![cout]),
            stride,
            padding,
            groups,
        }
    }

    pub fn zeros(cin: usize, cout: usize, kernel: usize, stride: usize, padding: usize, groups: usize) -> Self {
        Conv1dParams {
            weight: Tensor::zeros(vec![cout, cin / groups, kernel]),
            bias: Tensor::zeros(vec![cout]),
            stride,
            padding,
            groups,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }
}

impl<T: Element> ParamSet<T> for Conv1dParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

pub fn conv1d<'g, T: Element>(x: Var<'g, T>, p: &Conv1dParams<T>) -> Result<Var<'g, T>> {
    let g = x.graph();
    conv1d_op(x, g.param(&p.weight), Some(g.param(&p.bias)), p.stride, p.padding, p.groups)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose1dParams<T> {
    /// `[in_channels, out_channels, kernel]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Element> ConvTranspose1dParams<T> {
    pub fn init(cin: usize, cout: usize, kernel: usize, stride: usize, padding: usize, rng: &mut impl Rng) -> Self {
        ConvTranspose1dParams {
            weight: kaiming_uniform(vec![cin, cout, kernel], cout * kernel, rng),
            bias: Tensor::zeros(vec![cout]),
            stride,
            padding,
        }
    }
}

impl<T: Element> ParamSet<T> for ConvTranspose1dParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

pub fn conv1d_transpose<'g, T: Element>(x: Var<'g, T>, p: &ConvTranspose1dParams<T>) -> Result<Var<'g, T>> {
    let g = x.graph();
    conv1d_transpose_op(x, g.param(&p.weight), Some(g.param(&p.bias)), p.stride, p.padding)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams<T> {
    /// `[out, in]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> LinearParams<T> {
    pub fn init(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        LinearParams {
            weight: kaiming_uniform(vec![output, input], input, rng),
            bias: Tensor::zeros(vec![output]),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        LinearParams {
            weight: Tensor::zeros(vec![output, input]),
            bias: Tensor::zeros(vec![output]),
        }
    }
}

impl<T: Element> ParamSet<T> for LinearParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// `x · Wᵀ + b` over the last axis.
pub fn linear<'g, T: Element>(x: Var<'g, T>, p: &LinearParams<T>) -> Result<Var<'g, T>> {
    let g = x.graph();
    let wt = g.param(&p.weight).transpose(0, 1)?;
    x.matmul(wt)?.add(g.param(&p.bias))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub eps: f64,
}

impl<T: Element> LayerNormParams<T> {
    pub fn new(dim: usize) -> Self {
        LayerNormParams {
            gamma: Tensor::ones(vec![dim]),
            beta: Tensor::zeros(vec![dim]),
            eps: 1e-5,
        }
    }
}

impl<T: Element> ParamSet<T> for LayerNormParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}

/// Normalizes the last axis to zero mean and unit (population) variance,
/// then applies `gamma`, `beta`.
pub fn layer_norm_op<'g, T: Element>(
    x: Var<'g, T>,
    gamma: Var<'g, T>,
    beta: Var<'g, T>,
    eps: f64,
) -> Result<Var<'g, T>> {
    let shape = x.shape();
    let d = *shape
        .last()
        .ok_or_else(|| TensorError::invalid("layer_norm", "scalar input"))?;
    if d == 0 || gamma.shape() != [d] || beta.shape() != [d] {
        return Err(TensorError::shapes("layer_norm", &shape, &gamma.shape()));
    }
    if eps <= 0.0 {
        return Err(TensorError::invalid("layer_norm", "epsilon must be positive"));
    }
    let eps = T::of(eps);
    let dt = T::of(d as f64);
    let stats = move |row: &[T]| {
        let mean = row.iter().copied().sum::<T>() / dt;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
        (mean, T::one() / (var + eps).sqrt())
    };
    let (xv, gv, bv) = (x.value(), gamma.value(), beta.value());
    let mut out = Vec::with_capacity(xv.numel());
    for row in xv.data().chunks(d) {
        let (mean, inv) = stats(row);
        for ((&v, &ga), &be) in row.iter().zip(gv.data()).zip(bv.data()) {
            out.push((v - mean) * inv * ga + be);
        }
    }
    let y = Tensor::from_vec(shape.clone(), out)?;
    Ok(x.graph().record(
        &[x, gamma, beta],
        y,
        Box::new(move |g, ins, _| {
            let (xd, gam) = (ins[0].data(), ins[1].data());
            let mut gx = Vec::with_capacity(xd.len());
            let mut ggam = vec![T::zero(); d];
            let mut gbet = vec![T::zero(); d];
            let mut xhat = vec![T::zero(); d];
            let mut gxhat = vec![T::zero(); d];
            for (row, grow) in xd.chunks(d).zip(g.data().chunks(d)) {
                let (mean, inv) = stats(row);
                let mut m1 = T::zero();
                let mut m2 = T::zero();
                for j in 0..d {
                    xhat[j] = (row[j] - mean) * inv;
                    gxhat[j] = grow[j] * gam[j];
                    ggam[j] = ggam[j] + grow[j] * xhat[j];
                    gbet[j] = gbet[j] + grow[j];
                    m1 = m1 + gxhat[j];
                    m2 = m2 + gxhat[j] * xhat[j];
                }
                m1 = m1 / dt;
                m2 = m2 / dt;
                for j in 0..d {
                    gx.push(inv * (gxhat[j] - m1 - xhat[j] * m2));
                }
            }
            vec![
                Some(Tensor::from_vec(ins[0].shape().to_vec(), gx).unwrap()),
                Some(Tensor::from_vec(vec![d], ggam).unwrap()),
                Some(Tensor::from_vec(vec![d], gbet).unwrap()),
            ]
        }),
    ))
}

pub fn layer_norm<'g, T: Element>(x: Var<'g, T>, p: &LayerNormParams<T>) -> Result<Var<'g, T>> {
    let g = x.graph();
    layer_norm_op(x, g.param(&p.gamma), g.param(&p.beta), p.eps)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Mean,
    Max,
}

/// Non-overlapping pooling over the last axis of `[B, C, T]`.
pub fn pool1d<'g, T: Element>(x: Var<'g, T>, factor: usize, mode: PoolMode) -> Result<Var<'g, T>> {
    let (b, c, t) = dims3("pool1d", &x.shape())?;
    if factor == 0 || t % factor != 0 {
        return Err(TensorError::invalid(
            "pool1d",
            format!("length {t} not divisible by factor {factor}"),
        ));
    }
    let windows = x.reshape(&[b, c, t / factor, factor])?;
    match mode {
        PoolMode::Mean => windows.mean_axis(3, false),
        PoolMode::Max => Ok(windows.max_axis(3)?.0),
    }
}

/// Two "same"-padded convolutions, each followed by SiLU.
#[derive(Debug, Clone, PartialEq)]
pub struct DoubleConvParams<T> {
    pub first: Conv1dParams<T>,
    pub second: Conv1dParams<T>,
}

impl<T: Element> DoubleConvParams<T> {
    pub const KERNEL: usize = 5;

    pub fn init(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let k = Self::KERNEL;
        DoubleConvParams {
            first: Conv1dParams::init(cin, cout, k, 1, (k - 1) / 2, 1, rng),
            second: Conv1dParams::init(cout, cout, k, 1, (k - 1) / 2, 1, rng),
        }
    }
}

impl<T: Element> ParamSet<T> for DoubleConvParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.first.visit(&join(prefix, "first"), f);
        self.second.visit(&join(prefix, "second"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.first.visit_mut(&join(prefix, "first"), f);
        self.second.visit_mut(&join(prefix, "second"), f);
    }
}

pub fn double_conv<'g, T: Element>(x: Var<'g, T>, p: &DoubleConvParams<T>) -> Result<Var<'g, T>> {
    let h = conv1d(x, &p.first)?.silu();
    Ok(conv1d(h, &p.second)?.silu())
}

/// Evaluates `f` on a throwaway inference graph and returns the output value.
pub fn eval<T: Element>(
    x: &Tensor<T>,
    f: impl for<'g> FnOnce(Var<'g, T>) -> Result<Var<'g, T>>,
) -> Result<Tensor<T>> {
    let g = Graph::inference();
    let v = g.constant(x.clone());
    Ok(f(v)?.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check, random};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution.
    fn naive_conv(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        bias: &[f64],
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Tensor<f64> {
        let (b, cin, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, cig, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        let cog = cout / groups;
        let tout = (t + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; b * cout * tout];
        for bi in 0..b {
            for co in 0..cout {
                for to in 0..tout {
                    let mut acc = bias[co];
                    for c in 0..cig {
                        let ci = (co / cog) * cig + c;
                        for kk in 0..k {
                            let pos = (to * stride + kk) as isize - pad as isize;
                            if pos >= 0 && (pos as usize) < t {
                                acc += w.data()[(co * cig + c) * k + kk]
                                    * x.data()[(bi * cin + ci) * t + pos as usize];
                            }
                        }
                    }
                    out[(bi * cout + co) * tout + to] = acc;
                }
            }
        }
        Tensor::from_vec(vec![b, cout, tout], out).unwrap()
    }

    fn conv_eval(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize, groups: usize) -> Tensor<f64> {
        let g = Graph::new();
        let y = conv1d_op(g.constant(x.clone()), g.constant(w.clone()), None, stride, pad, groups).unwrap();
        y.value()
    }

    #[test]
    fn identity_kernel() {
        let x = random(&[2, 3, 7], 1);
        let mut w = Tensor::zeros(vec![3, 1, 1]);
        w.data_mut().iter_mut().for_each(|v| *v = 1.0);
        assert_eq!(conv_eval(&x, &w, 1, 0, 3), x);
    }

    #[test]
    fn box_filter_edges() {
        let x = Tensor::<f64>::ones(vec![1, 1, 10]);
        let w = Tensor::full(vec![1, 1, 3], 1.0 / 3.0);
        let y = conv_eval(&x, &w, 1, 1, 1);
        let d = y.data();
        assert_eq!(d.len(), 10);
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-12 && (d[9] - 2.0 / 3.0).abs() < 1e-12);
        for v in &d[1..9] {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_naive_loops() {
        let cases = [(2, 4, 17, 6, 3, 1, 1, 1), (1, 6, 20, 4, 5, 2, 2, 2), (3, 3, 9, 3, 4, 3, 0, 3), (1, 1, 30, 2, 10, 1, 5, 1)];
        for (i, &(b, cin, t, cout, k, stride, pad, groups)) in cases.iter().enumerate() {
            let x = random(&[b, cin, t], 10 + i as u64);
            let w = random(&[cout, cin / groups, k], 20 + i as u64);
            let bias: Vec<f64> = random(&[cout], 30 + i as u64).into_vec();
            let g = Graph::new();
            let y = conv1d_op(
                g.constant(x.clone()),
                g.constant(w.clone()),
                Some(g.constant(Tensor::from_vec(vec![cout], bias.clone()).unwrap())),
                stride,
                pad,
                groups,
            )
            .unwrap()
            .value();
            let oracle = naive_conv(&x, &w, &bias, stride, pad, groups);
            assert_eq!(y.shape(), oracle.shape());
            for (a, b) in y.data().iter().zip(oracle.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn transpose_output_length() {
        let g = Graph::<f64>::new();
        let x = g.constant(random(&[1, 2, 5], 3));
        let w = g.constant(random(&[2, 3, 4], 4));
        let y = conv1d_transpose_op(x, w, None, 4, 0).unwrap();
        assert_eq!(y.shape(), vec![1, 3, 20]);
    }

    #[test]
    fn transpose_of_zero_is_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ConvTranspose1dParams::<f64>::init(2, 3, 4, 4, 0, &mut rng);
        p.bias = Tensor::from_vec(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let y = eval(&Tensor::zeros(vec![1, 2, 3]), |x| conv1d_transpose(x, &p)).unwrap();
        for (row, &b) in y.data().chunks(12).zip(p.bias.data()) {
            assert!(row.iter().all(|&v| v == b));
        }
    }

    #[test]
    fn adjoint_identity() {
        // (b, cin, cout, t, k, stride, pad): (T + 2p − K) divisible by stride
        let cases = [(2, 3, 4, 16, 4, 4, 0), (1, 2, 5, 11, 3, 2, 1), (2, 4, 2, 12, 5, 1, 2), (1, 1, 1, 9, 3, 3, 0)];
        for (i, &(b, cin, cout, t, k, s, p)) in cases.iter().enumerate() {
            let x = random(&[b, cin, t], 40 + i as u64);
            let w = random(&[cout, cin, k], 50 + i as u64);
            let tout = (t + 2 * p - k) / s + 1;
            let y = random(&[b, cout, tout], 60 + i as u64);
            let g = Graph::new();
            let cx = conv1d_op(g.constant(x.clone()), g.constant(w.clone()), None, s, p, 1).unwrap().value();
            let ty = conv1d_transpose_op(g.constant(y.clone()), g.constant(w.clone()), None, s, p).unwrap().value();
            assert_eq!(ty.shape(), x.shape());
            let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-6 * (1.0 + lhs.abs()), "case {i}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn conv_gradients() {
        let inputs = [random(&[2, 4, 9], 1), random(&[6, 2, 3], 2), random(&[6], 3)];
        let err = check(&inputs, 1e-5, |_, v| Ok(conv1d_op(v[0], v[1], Some(v[2]), 2, 1, 2)?.powf(2.0).mean()));
        assert!(err < 1e-4, "{err}");
        let inputs = [random(&[2, 3, 5], 4), random(&[3, 2, 4], 5), random(&[2], 6)];
        let err = check(&inputs, 1e-5, |_, v| Ok(conv1d_transpose_op(v[0], v[1], Some(v[2]), 3, 1)?.powf(2.0).mean()));
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn channel_mismatch_fails() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![1, 3, 10]));
        let w = g.constant(Tensor::zeros(vec![2, 2, 3]));
        assert!(conv1d_op(x, w, None, 1, 0, 1).is_err());
        let w = g.constant(Tensor::zeros(vec![2, 3, 20]));
        assert!(conv1d_op(x, w, None, 1, 0, 1).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let p = LayerNormParams::<f64>::new(2);
        let y = eval(&Tensor::from_vec(vec![2], vec![1.0, 3.0]).unwrap(), |x| layer_norm(x, &p)).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-4 && (y.data()[1] - 1.0).abs() < 1e-4);
        let p = LayerNormParams::<f64>::new(4);
        let y = eval(&Tensor::full(vec![4], 7.5), |x| layer_norm(x, &p)).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn layer_norm_moments() {
        let p = LayerNormParams::<f64>::new(16);
        let x = random(&[5, 16], 8).map(|v| 3.0 * v + 1.0);
        let y = eval(&x, |x| layer_norm(x, &p)).unwrap();
        for row in y.data().chunks(16) {
            let m = row.iter().sum::<f64>() / 16.0;
            let v = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 16.0;
            assert!(m.abs() < 1e-6);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn layer_norm_gradient() {
        let inputs = [random(&[3, 6], 1), random(&[6], 2), random(&[6], 3)];
        let err = check(&inputs, 1e-5, |g, v| {
            let w = g.constant(random(&[3, 6], 4));
            Ok(layer_norm_op(v[0], v[1], v[2], 1e-5)?.mul(w)?.sum())
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn pooling_examples() {
        let x = Tensor::<f64>::from_vec(vec![1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(eval(&x, |x| pool1d(x, 4, PoolMode::Mean)).unwrap().data(), &[2.5]);
        let x = Tensor::<f64>::from_vec(vec![1, 1, 4], vec![1.0, 5.0, 2.0, 2.0]).unwrap();
        assert_eq!(eval(&x, |x| pool1d(x, 2, PoolMode::Max)).unwrap().data(), &[5.0, 2.0]);
        assert!(eval(&x, |x| pool1d(x, 3, PoolMode::Mean)).is_err());
    }

    #[test]
    fn mean_pool_expand_is_projection() {
        // P = expand ∘ pool is idempotent: P(P(x)) = P(x).
        let project = |x: &Tensor<f64>| {
            eval(x, |v| {
                let p = pool1d(v, 4, PoolMode::Mean)?;
                p.reshape(&[2, 3, 5, 1])?.broadcast_to(&[2, 3, 5, 4])?.reshape(&[2, 3, 20])
            })
            .unwrap()
        };
        let x = random(&[2, 3, 20], 9);
        let once = project(&x);
        let twice = project(&once);
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn double_conv_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = DoubleConvParams::<f64>::init(3, 4, &mut rng);
        let y = eval(&Tensor::zeros(vec![2, 3, 11]), |x| double_conv(x, &p)).unwrap();
        assert_eq!(y.shape(), &[2, 4, 11]);
        assert!(y.data().iter().all(|v| *v == 0.0));

        p.first.bias = random(&[4], 5);
        p.second.bias = random(&[4], 6);
        let inputs = [random(&[1, 3, 8], 7)];
        let err = check(&inputs, 1e-5, |_, v| Ok(double_conv(v[0], &p)?.powf(2.0).sum()));
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn layers_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = DoubleConvParams::<f32>::init(4, 8, &mut rng);
        let x = random(&[2, 4, 64], 1).cast::<f32>();
        let a = eval(&x, |x| double_conv(x, &p)).unwrap();
        let b = eval(&x, |x| double_conv(x, &p)).unwrap();
        assert_eq!(a, b);
    }
}
