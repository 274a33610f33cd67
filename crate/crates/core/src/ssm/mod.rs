//! Selective state-space (Mamba) blocks.
//!
//! A block maps `u: [B, T, D]` to
//!
//! ```text
//! (x, z) = split(in_proj(u))                    x, z: [B, T, E·D]
//! x      = SiLU(causal_depthwise_conv(x))
//! Δ      = softplus(dt_up(dt_down(x)))          low rank, per channel
//! B, C   = split(x_to_bc(x))                    [B, T, N] each
//! h_t    = exp(Δ_t ⊗ A) ∘ h_{t−1} + (Δ_t x_t) ⊗ B_t,   A = −exp(A_log)
//! y_t    = h_t · C_t + D_skip ∘ x_t
//! out    = u + LayerNorm(out_proj(y ∘ SiLU(z)))
//! ```
//!
//! Channels never interact inside the recurrence; mixing happens only in
//! the projections.

mod scan;

pub use scan::{scan, scan_parallel, scan_sequential, selective_scan, ScanKernel};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{self, join, Conv1dParams, LayerNormParams, LinearParams, ParamSet};
use crate::tensor::{Element, Result, Tensor, TensorError, Var};

/// Internal sizes of a selective SSM block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsmConfig {
    /// State size N per channel.
    pub d_state: usize,
    /// Inner width is `expand · d_model`.
    pub expand: usize,
    pub conv_kernel: usize,
    /// Rank of the step-size projection; `ceil(d_model / 16)` when unset.
    pub dt_rank: Option<usize>,
    /// Range of the initial step sizes, sampled log-uniformly.
    pub dt_min: f64,
    pub dt_max: f64,
    pub scan: ScanKernel,
}

impl Default for SsmConfig {
    fn default() -> Self {
        SsmConfig {
            d_state: 16,
            expand: 2,
            conv_kernel: 4,
            dt_rank: None,
            dt_min: 1e-3,
            dt_max: 1e-1,
            scan: ScanKernel::Fused,
        }
    }
}

impl SsmConfig {
    pub fn dt_rank_for(&self, d_model: usize) -> usize {
        self.dt_rank.unwrap_or_else(|| d_model.div_ceil(16))
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.d_state == 0 || self.expand == 0 || self.conv_kernel == 0 {
            return Err("ssm sizes must be positive".into());
        }
        if self.dt_rank == Some(0) {
            return Err("ssm.dt_rank must be positive".into());
        }
        if !(self.dt_min > 0.0 && self.dt_min <= self.dt_max) {
            return Err(format!("ssm.dt_min {} / dt_max {} must satisfy 0 < min <= max", self.dt_min, self.dt_max));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsmBlockParams<T> {
    pub in_proj: LinearParams<T>,
    /// Depthwise, causal: padding `kernel − 1` with the tail dropped.
    pub conv: Conv1dParams<T>,
    /// `[D_inner, N]`; the state matrix is `−exp(a_log)`.
    pub a_log: Tensor<T>,
    pub x_to_bc: LinearParams<T>,
    pub dt_down: LinearParams<T>,
    pub dt_up: LinearParams<T>,
    pub d_skip: Tensor<T>,
    pub out_proj: LinearParams<T>,
    pub norm: LayerNormParams<T>,
}

/// `softplus⁻¹(y) = y + ln(1 − e^{−y})`.
pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl<T: Element> SsmBlockParams<T> {
    pub fn init(d_model: usize, cfg: &SsmConfig, rng: &mut impl Rng) -> Self {
        let di = cfg.expand * d_model;
        let (n, k, r) = (cfg.d_state, cfg.conv_kernel, cfg.dt_rank_for(d_model));
        let mut dt_up = LinearParams::init(r, di, rng);
        let (lo, hi) = (cfg.dt_min.ln(), cfg.dt_max.ln());
        dt_up.bias = Tensor::from_fn(vec![di], |_| {
            let dt = if hi > lo { rng.random_range(lo..hi) } else { lo }.exp();
            T::of(inverse_softplus(dt))
        });
        SsmBlockParams {
            in_proj: LinearParams::init(d_model, 2 * di, rng),
            conv: Conv1dParams::init(di, di, k, 1, k - 1, di, rng),
            a_log: Tensor::from_fn(vec![di, n], |i| T::of(((i % n) + 1) as f64).ln()),
            x_to_bc: LinearParams::init(di, 2 * n, rng),
            dt_down: LinearParams::init(di, r, rng),
            dt_up,
            d_skip: Tensor::ones(vec![di]),
            out_proj: LinearParams::init(di, d_model, rng),
            norm: LayerNormParams::new(d_model),
        }
    }

    pub fn d_model(&self) -> usize {
        self.out_proj.weight.shape()[0]
    }

    pub fn d_inner(&self) -> usize {
        self.d_skip.numel()
    }

    pub fn d_state(&self) -> usize {
        self.a_log.shape()[1]
    }
}

impl<T: Element> ParamSet<T> for SsmBlockParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.in_proj.visit(&join(prefix, "in_proj"), f);
        self.conv.visit(&join(prefix, "conv"), f);
        f(join(prefix, "a_log"), &self.a_log);
        self.x_to_bc.visit(&join(prefix, "x_to_bc"), f);
        self.dt_down.visit(&join(prefix, "dt_down"), f);
        self.dt_up.visit(&join(prefix, "dt_up"), f);
        f(join(prefix, "d_skip"), &self.d_skip);
        self.out_proj.visit(&join(prefix, "out_proj"), f);
        self.norm.visit(&join(prefix, "norm"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.in_proj.visit_mut(&join(prefix, "in_proj"), f);
        self.conv.visit_mut(&join(prefix, "conv"), f);
        f(join(prefix, "a_log"), &mut self.a_log);
        self.x_to_bc.visit_mut(&join(prefix, "x_to_bc"), f);
        self.dt_down.visit_mut(&join(prefix, "dt_down"), f);
        self.dt_up.visit_mut(&join(prefix, "dt_up"), f);
        f(join(prefix, "d_skip"), &mut self.d_skip);
        self.out_proj.visit_mut(&join(prefix, "out_proj"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

/// Discretized recurrence coefficients for inputs `x: [B, T, D_inner]`.
pub struct Discretized<'g, T> {
    /// `Δ: [B, T, D]`, positive.
    pub dt: Var<'g, T>,
    /// `exp(Δ ⊗ A): [B, T, D, N]`, in (0, 1).
    pub a_bar: Var<'g, T>,
    /// `(Δ x) ⊗ B: [B, T, D, N]`.
    pub b_x: Var<'g, T>,
    /// `C: [B, T, N]`.
    pub c: Var<'g, T>,
}

fn finite<T: Element>(op: &'static str, x: Var<'_, T>) -> Result<()> {
    if x.value().all_finite() {
        Ok(())
    } else {
        Err(TensorError::invalid(op, "non-finite input"))
    }
}

/// State matrix `A = −exp(A_log)`.
fn state_matrix<'g, T: Element>(x: Var<'g, T>, p: &SsmBlockParams<T>) -> Var<'g, T> {
    x.graph().param(&p.a_log).exp().neg()
}

fn step_and_projections<'g, T: Element>(
    x: Var<'g, T>,
    p: &SsmBlockParams<T>,
) -> Result<(Var<'g, T>, Var<'g, T>, Var<'g, T>)> {
    let n = p.d_state();
    let dt = nn::linear(nn::linear(x, &p.dt_down)?, &p.dt_up)?.softplus();
    let bc = nn::linear(x, &p.x_to_bc)?;
    let last = bc.shape().len() - 1;
    Ok((dt, bc.slice(last, 0, n)?, bc.slice(last, n, 2 * n)?))
}

pub fn discretize<'g, T: Element>(x: Var<'g, T>, p: &SsmBlockParams<T>) -> Result<Discretized<'g, T>> {
    finite("discretize", x)?;
    let s = x.shape();
    let &[b, t, d] = s.as_slice() else {
        return Err(TensorError::invalid("discretize", format!("expected [B, T, D], got {s:?}")));
    };
    let n = p.d_state();
    let (dt, bm, c) = step_and_projections(x, p)?;
    let a_bar = dt.reshape(&[b, t, d, 1])?.mul(state_matrix(x, p))?.exp();
    let b_x = dt.mul(x)?.reshape(&[b, t, d, 1])?.mul(bm.reshape(&[b, t, 1, n])?)?;
    Ok(Discretized { dt, a_bar, b_x, c })
}

/// `y = SSM(x) + D_skip ∘ x` for `x: [B, T, D_inner]`.
pub fn ssm<'g, T: Element>(x: Var<'g, T>, p: &SsmBlockParams<T>, kernel: ScanKernel) -> Result<Var<'g, T>> {
    let y = match kernel {
        ScanKernel::Fused => {
            finite("ssm", x)?;
            let (dt, bm, c) = step_and_projections(x, p)?;
            selective_scan(x, dt, state_matrix(x, p), bm, c)?
        }
        ScanKernel::Sequential | ScanKernel::Parallel => {
            let s = x.shape();
            let d = discretize(x, p)?;
            let h = scan(d.a_bar, d.b_x, 1, kernel)?;
            h.mul(d.c.reshape(&[s[0], s[1], 1, p.d_state()])?)?.sum_axis(3, false)?
        }
    };
    y.add(x.mul(x.graph().param(&p.d_skip))?)
}

/// Causal depthwise convolution over time of `x: [B, T, D]`.
fn causal_conv<'g, T: Element>(x: Var<'g, T>, p: &Conv1dParams<T>) -> Result<Var<'g, T>> {
    let len = x.shape()[1];
    let y = nn::conv1d(x.transpose(1, 2)?, p)?;
    y.slice(2, 0, len)?.transpose(1, 2)
}

/// One residual block on `u: [B, T, D]` or `[T, D]`.
pub fn mamba_block<'g, T: Element>(u: Var<'g, T>, p: &SsmBlockParams<T>, kernel: ScanKernel) -> Result<Var<'g, T>> {
    let s = u.shape();
    if s.len() == 2 {
        let out = mamba_block(u.reshape(&[1, s[0], s[1]])?, p, kernel)?;
        return out.reshape(&s);
    }
    if s.len() != 3 || s[2] != p.d_model() {
        return Err(TensorError::invalid(
            "mamba_block",
            format!("expected [B, T, {}], got {s:?}", p.d_model()),
        ));
    }
    finite("mamba_block", u)?;
    let di = p.d_inner();
    let xz = nn::linear(u, &p.in_proj)?;
    let (x, z) = (xz.slice(2, 0, di)?, xz.slice(2, di, 2 * di)?);
    let x = causal_conv(x, &p.conv)?.silu();
    let y = ssm(x, p, kernel)?.mul(z.silu())?;
    let inner = nn::linear(y, &p.out_proj)?;
    u.add(nn::layer_norm(inner, &p.norm)?)
}

/// Applies blocks in order.
pub fn mamba_stack<'g, T: Element>(
    mut u: Var<'g, T>,
    blocks: &[SsmBlockParams<T>],
    kernel: ScanKernel,
) -> Result<Var<'g, T>> {
    for b in blocks {
        u = mamba_block(u, b, kernel)?;
    }
    Ok(u)
}
