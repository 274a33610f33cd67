//! The U-Net encoder–decoder with selective SSM blocks and its task heads.
//!
//! Inputs are `[B, channels, window_samples]`. Convolutions run on
//! `[B, C, T]` and SSM blocks on `[B, T, C]`; the forward functions transpose
//! between the two.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    self, conv1d, conv1d_transpose, double_conv, join, linear, Conv1dParams, ConvTranspose1dParams,
    DoubleConvParams, LinearParams, ParamSet, PoolMode,
};
use crate::ssm::{mamba_stack, ScanKernel, SsmBlockParams, SsmConfig};
use crate::tensor::io::{read_tensor, write_tensor};
use crate::tensor::{Element, Graph, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub window_samples: usize,
    /// Temporal filters of the front convolution, shared by all channels.
    pub front_filters: usize,
    pub front_kernel: usize,
    pub d_model: usize,
    pub mamba_blocks_per_level: usize,
    /// State size N of every SSM block.
    pub ssm_state: usize,
    pub ssm_expand: usize,
    pub ssm_conv_kernel: usize,
    /// Defaults to `ceil(width / 16)` per block.
    pub dt_rank: Option<usize>,
    pub dt_min: f64,
    pub dt_max: f64,
    pub scan_kernel: ScanKernel,
    pub levels: usize,
    pub pool_factor: usize,
    /// Widths of the U-Net levels, `levels + 1` entries, first equal to `d_model`.
    pub level_dims: Vec<usize>,
    pub head_hidden: usize,
    /// DFT length of the spectral reconstruction loss.
    pub spectral_pad: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 19,
            window_samples: 2000,
            front_filters: 8,
            front_kernel: 100,
            d_model: 128,
            mamba_blocks_per_level: 4,
            ssm_state: 16,
            ssm_expand: 2,
            ssm_conv_kernel: 4,
            dt_rank: None,
            dt_min: 1e-3,
            dt_max: 1e-1,
            scan_kernel: ScanKernel::Fused,
            levels: 2,
            pool_factor: 4,
            level_dims: vec![128, 256, 512],
            head_hidden: 64,
            spectral_pad: 2048,
        }
    }
}

impl ModelConfig {
    /// Narrow single-level configuration that trains on a laptop CPU in
    /// minutes. `d_model` stays above the channel count so the skip path can
    /// carry every input channel.
    pub fn desk() -> Self {
        ModelConfig {
            front_filters: 2,
            d_model: 24,
            mamba_blocks_per_level: 1,
            ssm_state: 4,
            levels: 1,
            level_dims: vec![24, 28],
            head_hidden: 16,
            ..ModelConfig::default()
        }
    }

    pub fn ssm_config(&self) -> SsmConfig {
        SsmConfig {
            d_state: self.ssm_state,
            expand: self.ssm_expand,
            conv_kernel: self.ssm_conv_kernel,
            dt_rank: self.dt_rank,
            dt_min: self.dt_min,
            dt_max: self.dt_max,
            scan: self.scan_kernel,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.channels == 0 || self.window_samples == 0 || self.front_filters == 0 || self.front_kernel == 0 {
            return fail("channels, window_samples, front_filters and front_kernel must be positive".into());
        }
        if self.d_model == 0 || self.head_hidden == 0 || self.pool_factor == 0 {
            return fail("d_model, head_hidden and pool_factor must be positive".into());
        }
        if self.level_dims.len() != self.levels + 1 {
            return fail(format!(
                "level_dims has {} entries, expected levels + 1 = {}",
                self.level_dims.len(),
                self.levels + 1
            ));
        }
        if self.level_dims[0] != self.d_model || self.level_dims.contains(&0) {
            return fail(format!("level_dims {:?} must be positive and start with d_model {}", self.level_dims, self.d_model));
        }
        let total = self.pool_factor.checked_pow(self.levels as u32);
        if total.is_none_or(|t| self.window_samples % t != 0) {
            return fail(format!(
                "window_samples {} not divisible by pool_factor^levels = {}^{}",
                self.window_samples, self.pool_factor, self.levels
            ));
        }
        if !crate::tensor::fft::is_power_of_two(self.spectral_pad) || self.spectral_pad < self.window_samples {
            return fail(format!(
                "spectral_pad {} must be a power of two of at least window_samples {}",
                self.spectral_pad, self.window_samples
            ));
        }
        self.ssm_config().validate().map_err(Error::Config)
    }

    /// Sequence length at the bottleneck.
    pub fn bottleneck_len(&self) -> usize {
        self.window_samples / self.pool_factor.pow(self.levels as u32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLevel<T> {
    pub blocks: Vec<SsmBlockParams<T>>,
    pub down: DoubleConvParams<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLevel<T> {
    pub up: ConvTranspose1dParams<T>,
    pub conv: DoubleConvParams<T>,
    pub blocks: Vec<SsmBlockParams<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClsHead<T> {
    pub hidden: LinearParams<T>,
    pub out: LinearParams<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    /// `[F, 1, K]`, applied to every channel.
    pub front_conv: Conv1dParams<T>,
    pub channel_mix: LinearParams<T>,
    pub encoder: Vec<EncoderLevel<T>>,
    pub bottleneck: Vec<SsmBlockParams<T>>,
    /// Indexed by level; applied from the deepest level up.
    pub decoder: Vec<DecoderLevel<T>>,
    pub recon_head: Conv1dParams<T>,
    pub cls_head: ClsHead<T>,
}

fn visit_blocks<'a, T: Element>(
    blocks: &'a [SsmBlockParams<T>],
    prefix: &str,
    f: &mut dyn FnMut(String, &'a Tensor<T>),
) {
    for (i, b) in blocks.iter().enumerate() {
        b.visit(&join(prefix, &format!("blocks.{i}")), f);
    }
}

fn visit_blocks_mut<T: Element>(
    blocks: &mut [SsmBlockParams<T>],
    prefix: &str,
    f: &mut dyn FnMut(String, &mut Tensor<T>),
) {
    for (i, b) in blocks.iter_mut().enumerate() {
        b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
    }
}

impl<T: Element> ParamSet<T> for ClsHead<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.out.visit(&join(prefix, "out"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.hidden.visit_mut(&join(prefix, "hidden"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

impl<T: Element> ParamSet<T> for ModelParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.front_conv.visit(&join(prefix, "front_conv"), f);
        self.channel_mix.visit(&join(prefix, "channel_mix"), f);
        for (i, l) in self.encoder.iter().enumerate() {
            let p = join(prefix, &format!("encoder.{i}"));
            visit_blocks(&l.blocks, &p, f);
            l.down.visit(&join(&p, "down"), f);
        }
        visit_blocks(&self.bottleneck, &join(prefix, "bottleneck"), f);
        for (i, l) in self.decoder.iter().enumerate() {
            let p = join(prefix, &format!("decoder.{i}"));
            l.up.visit(&join(&p, "up"), f);
            l.conv.visit(&join(&p, "conv"), f);
            visit_blocks(&l.blocks, &p, f);
        }
        self.recon_head.visit(&join(prefix, "recon_head"), f);
        self.cls_head.visit(&join(prefix, "cls_head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.front_conv.visit_mut(&join(prefix, "front_conv"), f);
        self.channel_mix.visit_mut(&join(prefix, "channel_mix"), f);
        for (i, l) in self.encoder.iter_mut().enumerate() {
            let p = join(prefix, &format!("encoder.{i}"));
            visit_blocks_mut(&mut l.blocks, &p, f);
            l.down.visit_mut(&join(&p, "down"), f);
        }
        visit_blocks_mut(&mut self.bottleneck, &join(prefix, "bottleneck"), f);
        for (i, l) in self.decoder.iter_mut().enumerate() {
            let p = join(prefix, &format!("decoder.{i}"));
            l.up.visit_mut(&join(&p, "up"), f);
            l.conv.visit_mut(&join(&p, "conv"), f);
            visit_blocks_mut(&mut l.blocks, &p, f);
        }
        self.recon_head.visit_mut(&join(prefix, "recon_head"), f);
        self.cls_head.visit_mut(&join(prefix, "cls_head"), f);
    }
}

impl<T: Element> ModelParams<T> {
    /// Fresh parameters; the reconstruction head starts at exactly zero.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let ssm = cfg.ssm_config();
        let dims = &cfg.level_dims;
        let blocks = |width: usize, rng: &mut ChaCha8Rng| -> Vec<SsmBlockParams<T>> {
            (0..cfg.mamba_blocks_per_level)
                .map(|_| SsmBlockParams::init(width, &ssm, rng))
                .collect()
        };
        let k = cfg.front_kernel;
        let front_conv = Conv1dParams::init(1, cfg.front_filters, k, 1, k / 2, 1, rng);
        let channel_mix = LinearParams::init(cfg.channels * cfg.front_filters, cfg.d_model, rng);
        let encoder = (0..cfg.levels)
            .map(|i| EncoderLevel {
                blocks: blocks(dims[i], rng),
                down: DoubleConvParams::init(dims[i], dims[i + 1], rng),
            })
            .collect();
        let bottleneck = blocks(dims[cfg.levels], rng);
        let decoder = (0..cfg.levels)
            .map(|i| DecoderLevel {
                up: ConvTranspose1dParams::init(dims[i + 1], dims[i], cfg.pool_factor, cfg.pool_factor, 0, rng),
                conv: DoubleConvParams::init(2 * dims[i], dims[i], rng),
                blocks: blocks(dims[i], rng),
            })
            .collect();
        let cls_head = ClsHead {
            hidden: LinearParams::init(dims[cfg.levels], cfg.head_hidden, rng),
            out: LinearParams::init(cfg.head_hidden, 1, rng),
        };
        Ok(ModelParams {
            front_conv,
            channel_mix,
            encoder,
            bottleneck,
            decoder,
            recon_head: Conv1dParams::zeros(cfg.d_model, cfg.channels, 1, 1, 0, 1),
            cls_head,
        })
    }

    pub fn cast<U: Element>(&self) -> ModelParams<U> {
        ModelParams {
            front_conv: cast_conv(&self.front_conv),
            channel_mix: cast_linear(&self.channel_mix),
            encoder: self
                .encoder
                .iter()
                .map(|l| EncoderLevel {
                    blocks: l.blocks.iter().map(cast_block).collect(),
                    down: cast_double(&l.down),
                })
                .collect(),
            bottleneck: self.bottleneck.iter().map(cast_block).collect(),
            decoder: self
                .decoder
                .iter()
                .map(|l| DecoderLevel {
                    up: ConvTranspose1dParams {
                        weight: l.up.weight.cast(),
                        bias: l.up.bias.cast(),
                        stride: l.up.stride,
                        padding: l.up.padding,
                    },
                    conv: cast_double(&l.conv),
                    blocks: l.blocks.iter().map(cast_block).collect(),
                })
                .collect(),
            recon_head: cast_conv(&self.recon_head),
            cls_head: ClsHead {
                hidden: cast_linear(&self.cls_head.hidden),
                out: cast_linear(&self.cls_head.out),
            },
        }
    }
}

fn cast_linear<T: Element, U: Element>(p: &LinearParams<T>) -> LinearParams<U> {
    LinearParams {
        weight: p.weight.cast(),
        bias: p.bias.cast(),
    }
}

fn cast_conv<T: Element, U: Element>(p: &Conv1dParams<T>) -> Conv1dParams<U> {
    Conv1dParams {
        weight: p.weight.cast(),
        bias: p.bias.cast(),
        stride: p.stride,
        padding: p.padding,
        groups: p.groups,
    }
}

fn cast_double<T: Element, U: Element>(p: &DoubleConvParams<T>) -> DoubleConvParams<U> {
    DoubleConvParams {
        first: cast_conv(&p.first),
        second: cast_conv(&p.second),
    }
}

fn cast_block<T: Element, U: Element>(p: &SsmBlockParams<T>) -> SsmBlockParams<U> {
    SsmBlockParams {
        in_proj: cast_linear(&p.in_proj),
        conv: cast_conv(&p.conv),
        a_log: p.a_log.cast(),
        x_to_bc: cast_linear(&p.x_to_bc),
        dt_down: cast_linear(&p.dt_down),
        dt_up: cast_linear(&p.dt_up),
        d_skip: p.d_skip.cast(),
        out_proj: cast_linear(&p.out_proj),
        norm: nn::LayerNormParams {
            gamma: p.norm.gamma.cast(),
            beta: p.norm.beta.cast(),
            eps: p.norm.eps,
        },
    }
}

fn check_input<T: Element>(x: Var<'_, T>, cfg: &ModelConfig) -> crate::tensor::Result<usize> {
    let s = x.shape();
    match s.as_slice() {
        &[b, c, t] if c == cfg.channels && t == cfg.window_samples => Ok(b),
        _ => Err(TensorError::invalid(
            "model input",
            format!("expected [B, {}, {}], got {s:?}", cfg.channels, cfg.window_samples),
        )),
    }
}

/// `[B, C, T] ↔ [B, T, C]`.
fn swap<'g, T: Element>(x: Var<'g, T>) -> crate::tensor::Result<Var<'g, T>> {
    x.transpose(1, 2)
}

/// Shared temporal filters per channel, then the per-step channel mixing,
/// as `[B, T, d_model]`.
fn front_end_btc<'g, T: Element>(
    x: Var<'g, T>,
    p: &ModelParams<T>,
    cfg: &ModelConfig,
) -> crate::tensor::Result<Var<'g, T>> {
    let b = check_input(x, cfg)?;
    let (c, t, f) = (cfg.channels, cfg.window_samples, p.front_conv.out_channels());
    let per_channel = x.reshape(&[b * c, 1, t])?;
    let filtered = conv1d(per_channel, &p.front_conv)?.slice(2, 0, t)?;
    let features = filtered.reshape(&[b, c * f, t])?;
    linear(swap(features)?, &p.channel_mix)
}

/// `[B, channels, T] → [B, d_model, T]`; feature `c·F + f` is channel `c`
/// under filter `f`.
pub fn front_end<'g, T: Element>(
    x: Var<'g, T>,
    p: &ModelParams<T>,
    cfg: &ModelConfig,
) -> crate::tensor::Result<Var<'g, T>> {
    swap(front_end_btc(x, p, cfg)?)
}

/// Encoder output: the bottleneck `[B, dims[L], T / pool^L]` (after the
/// bottleneck blocks) and one skip `[B, dims[i], T / pool^i]` per level.
pub struct Encoded<'g, T> {
    pub bottleneck: Var<'g, T>,
    pub skips: Vec<Var<'g, T>>,
}

pub fn encode<'g, T: Element>(
    x: Var<'g, T>,
    p: &ModelParams<T>,
    cfg: &ModelConfig,
) -> crate::tensor::Result<Encoded<'g, T>> {
    let kernel = cfg.scan_kernel;
    let mut h = front_end_btc(x, p, cfg)?;
    let mut skips = Vec::with_capacity(p.encoder.len());
    for level in &p.encoder {
        let s = swap(mamba_stack(h, &level.blocks, kernel)?)?;
        skips.push(s);
        let down = double_conv(s, &level.down)?;
        h = swap(nn::pool1d(down, cfg.pool_factor, PoolMode::Mean)?)?;
    }
    let bottleneck = swap(mamba_stack(h, &p.bottleneck, kernel)?)?;
    Ok(Encoded { bottleneck, skips })
}

/// Reconstruction `[B, channels, T]`.
pub fn reconstruct<'g, T: Element>(
    x: Var<'g, T>,
    p: &ModelParams<T>,
    cfg: &ModelConfig,
) -> crate::tensor::Result<Var<'g, T>> {
    let enc = encode(x, p, cfg)?;
    let mut h = enc.bottleneck;
    for (level, skip) in p.decoder.iter().zip(&enc.skips).rev() {
        let up = conv1d_transpose(h, &level.up)?;
        let merged = Var::concat(&[up, *skip], 1)?;
        let conv = double_conv(merged, &level.conv)?;
        h = swap(mamba_stack(swap(conv)?, &level.blocks, cfg.scan_kernel)?)?;
    }
    conv1d(h, &p.recon_head)
}

/// Pre-sigmoid detection score `[B]` from the max-pooled bottleneck.
pub fn classify_logit<'g, T: Element>(
    x: Var<'g, T>,
    p: &ModelParams<T>,
    cfg: &ModelConfig,
) -> crate::tensor::Result<Var<'g, T>> {
    let b = check_input(x, cfg)?;
    let enc = encode(x, p, cfg)?;
    let (pooled, _) = enc.bottleneck.max_axis(2)?;
    let hidden = linear(pooled, &p.cls_head.hidden)?.silu();
    linear(hidden, &p.cls_head.out)?.reshape(&[b])
}

/// Seizure probability per window, `[B]`.
pub fn classify<'g, T: Element>(
    x: Var<'g, T>,
    p: &ModelParams<T>,
    cfg: &ModelConfig,
) -> crate::tensor::Result<Var<'g, T>> {
    Ok(classify_logit(x, p, cfg)?.sigmoid())
}

/// Closed-form number of learnable scalars for a configuration.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let ssm = cfg.ssm_config();
    let block = |d: usize| {
        let di = ssm.expand * d;
        let (n, k, r) = (ssm.d_state, ssm.conv_kernel, ssm.dt_rank_for(d));
        (2 * di * d + 2 * di)
            + (di * k + di)
            + (2 * n * di + 2 * n)
            + (r * di + r)
            + (di * r + di)
            + di * n
            + di
            + (d * di + d)
            + 2 * d
    };
    let dconv = |cin: usize, cout: usize| (cin * cout * 5 + cout) + (cout * cout * 5 + cout);
    let dims = &cfg.level_dims;
    let nb = cfg.mamba_blocks_per_level;
    let (f, k, c, l) = (cfg.front_filters, cfg.front_kernel, cfg.channels, cfg.levels);
    let mut total = (f * k + f) + (c * f * cfg.d_model + cfg.d_model);
    for i in 0..l {
        total += nb * block(dims[i]) + dconv(dims[i], dims[i + 1]);
        total += dims[i + 1] * dims[i] * cfg.pool_factor + dims[i];
        total += dconv(2 * dims[i], dims[i]) + nb * block(dims[i]);
    }
    total += nb * block(dims[l]);
    total += cfg.d_model * c + c;
    total += dims[l] * cfg.head_hidden + cfg.head_hidden + cfg.head_hidden + 1;
    total
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ECKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Canonical key-sorted JSON of a configuration.
pub fn canonical_json<S: Serialize>(value: &S) -> String {
    // serde_json's map type is ordered by key
    let v = serde_json::to_value(value).expect("serializable config");
    serde_json::to_string(&v).expect("json value")
}

/// Serializes `cfg` and `params`:
/// magic `ECKP`, version `u32`, header length `u32`, key-sorted JSON config,
/// tensor count `u32`, then per tensor a `u32` name length, the UTF-8 name
/// and one tensor record.
pub fn write_checkpoint<T: Element, W: Write>(w: &mut W, cfg: &ModelConfig, params: &ModelParams<T>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let header = canonical_json(cfg);
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());
    let named = params.named_params("");
    buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        write_tensor(&mut buf, t)?;
    }
    w.write_all(&buf).map_err(TensorError::Io)?;
    Ok(())
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Tensor(TensorError::Format(msg.into()))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| format_err(format!("checkpoint truncated in {what}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<T: Element, R: Read>(r: &mut R) -> Result<(ModelConfig, ModelParams<T>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| format_err("checkpoint truncated in magic"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(format_err(format!("not a checkpoint (magic {magic:?})")));
    }
    let version = read_u32(r, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(format_err(format!("unsupported checkpoint version {version}")));
    }
    let len = read_u32(r, "header")? as usize;
    let mut header = vec![0u8; len];
    r.read_exact(&mut header)
        .map_err(|_| format_err("checkpoint truncated in header"))?;
    let cfg: ModelConfig =
        serde_json::from_slice(&header).map_err(|e| format_err(format!("checkpoint header: {e}")))?;
    cfg.validate()?;
    let mut params = ModelParams::<T>::init(&cfg, 0)?;
    let count = read_u32(r, "tensor count")? as usize;
    let mut loaded = std::collections::BTreeMap::new();
    for _ in 0..count {
        let n = read_u32(r, "tensor name")? as usize;
        if n > 4096 {
            return Err(format_err(format!("implausible tensor name length {n}")));
        }
        let mut name = vec![0u8; n];
        r.read_exact(&mut name)
            .map_err(|_| format_err("checkpoint truncated in tensor name"))?;
        let name = String::from_utf8(name).map_err(|_| format_err("tensor name is not UTF-8"))?;
        let t: Tensor<T> = read_tensor(r)?;
        loaded.insert(name, t);
    }
    let mut problem = None;
    params.visit_mut("", &mut |name, slot| match loaded.remove(&name) {
        Some(t) if t.shape() == slot.shape() => *slot = t,
        Some(t) => {
            problem.get_or_insert(format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), slot.shape()));
        }
        None => {
            problem.get_or_insert(format!("checkpoint lacks tensor {name}"));
        }
    });
    if let Some(p) = problem {
        return Err(format_err(p));
    }
    if let Some(extra) = loaded.keys().next() {
        return Err(format_err(format!("unexpected tensor {extra} in checkpoint")));
    }
    Ok((cfg, params))
}

/// Writes through a temporary sibling file and renames it into place.
pub fn save_checkpoint<T: Element>(path: &Path, cfg: &ModelConfig, params: &ModelParams<T>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, cfg, params)?;
    crate::ingest::write_atomic(path, &buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<(ModelConfig, ModelParams<T>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut bytes.as_slice()).map_err(|e| match e {
        Error::Tensor(TensorError::Format(msg)) => format_err(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Runs `f` on an inference graph over a batch.
pub fn infer<T: Element>(
    x: &Tensor<T>,
    f: impl for<'g> FnOnce(Var<'g, T>) -> crate::tensor::Result<Var<'g, T>>,
) -> crate::tensor::Result<Tensor<T>> {
    let g = Graph::inference();
    let v = g.constant(x.clone());
    Ok(f(v)?.value())
}

/// Small configuration for tests and gradient checks.
pub fn tiny_config(d_model: usize, window: usize, levels: usize) -> ModelConfig {
    let dims: Vec<usize> = (0..=levels).map(|i| d_model + 4 * i).collect();
    ModelConfig {
        channels: 19,
        window_samples: window,
        front_filters: 2,
        front_kernel: 100,
        d_model,
        mamba_blocks_per_level: 1,
        ssm_state: 4,
        level_dims: dims,
        levels,
        head_hidden: 6,
        spectral_pad: window.next_power_of_two(),
        ..ModelConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random;

    #[test]
    fn default_shapes() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.bottleneck_len(), 125);
        // the full-size forward pass is exercised by the integration tests
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config(8, 32, 1);
        cfg.validate().unwrap();
        cfg.window_samples = 30;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = tiny_config(8, 32, 1);
        cfg.level_dims = vec![8];
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config(8, 32, 1);
        cfg.spectral_pad = 48;
        assert!(cfg.validate().is_err());
        let json = r#"{"d_model": 8, "bogus": 1}"#;
        assert!(serde_json::from_str::<ModelConfig>(json).is_err());
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for cfg in [tiny_config(8, 32, 1), tiny_config(12, 64, 2)] {
            let p = ModelParams::<f32>::init(&cfg, 1).unwrap();
            assert_eq!(p.param_count(), param_count(&cfg));
        }
    }

    #[test]
    fn names_are_unique() {
        let cfg = tiny_config(8, 64, 2);
        let p = ModelParams::<f32>::init(&cfg, 1).unwrap();
        let names: Vec<String> = p.named_params("").into_iter().map(|(n, _)| n).collect();
        let set: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len());
        assert!(names.iter().any(|n| n == "decoder.1.blocks.0.a_log"));
    }

    #[test]
    fn checkpoint_rejects_damage() {
        let cfg = tiny_config(8, 32, 1);
        let p = ModelParams::<f32>::init(&cfg, 2).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &cfg, &p).unwrap();
        for cut in [0, 3, 9, 40, buf.len() / 2, buf.len() - 1] {
            assert!(read_checkpoint::<f32, _>(&mut &buf[..cut]).is_err());
        }
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint::<f32, _>(&mut bad.as_slice()).is_err());
        let (c2, p2) = read_checkpoint::<f32, _>(&mut buf.as_slice()).unwrap();
        assert_eq!(c2, cfg);
        assert_eq!(p2, p);
    }

    #[test]
    fn cast_round_trip() {
        let cfg = tiny_config(8, 32, 1);
        let p = ModelParams::<f32>::init(&cfg, 3).unwrap();
        assert_eq!(p.cast::<f64>().cast::<f32>(), p);
        let x = random(&[1, 19, 32], 4);
        let y = infer(&x, |v| classify(v, &p.cast::<f64>(), &cfg)).unwrap();
        assert!(y.data()[0] > 0.0 && y.data()[0] < 1.0);
    }
}
