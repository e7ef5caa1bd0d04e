//! Diffusion-transformer building blocks around the attention kernel.
//!
//! Data layout: images and feature maps are channel-major `[C×H×W]`; token
//! sequences are `[N×C]` with token `n = y·W + x`.
//!
//! Pinned choices:
//! - Mix-FFN activation is tanh-form GELU.
//! - Zero padding everywhere; 3×3 kernels pad by one.
//! - The timestep enters through a sinusoidal embedding and a two-layer
//!   SiLU MLP; the opaque guidance vector is projected and added to it. Each
//!   block adds a learned projection of that embedding after both pre-norms.
//! - The conditioning stem output is concatenated after the latent channels.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::attention::{AttentionConfig, MhaCache, MultiHeadAttention, DEFAULT_EPSILON};
use crate::error::{shape_err, Error, Result};
use crate::nn::{param_tree, LayerNorm, LayerNormCache, Linear, ParamTree};
use crate::rng::{normal_tensor, SeededRng};
use crate::tensor::{gelu, gelu_grad, silu, silu_grad, Tensor};

fn chw(x: &Tensor) -> Result<[usize; 3]> {
    match x.shape() {
        [c, h, w] => Ok([*c, *h, *w]),
        s => Err(shape_err!("expected [C×H×W], got {s:?}")),
    }
}

// --- convolutions -----------------------------------------------------------

/// 3×3 depthwise convolution, stride 1, zero padding 1.
pub fn depthwise_conv3x3(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let [c, h, w] = chw(x)?;
    if kernel.shape() != [c, 3, 3] {
        return Err(shape_err!("depthwise kernel {:?} for {c} channels", kernel.shape()));
    }
    let mut out = vec![0.0; c * h * w];
    depthwise_acc(x.data(), kernel.data(), &mut out, c, h, w);
    Tensor::new(vec![c, h, w], out)
}

fn depthwise_acc(x: &[f64], k: &[f64], out: &mut [f64], c: usize, h: usize, w: usize) {
    for ch in 0..c {
        let kc = &k[ch * 9..ch * 9 + 9];
        let xc = &x[ch * h * w..(ch + 1) * h * w];
        let oc = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let mut s = 0.0;
                for ky in 0..3 {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = xx as isize + kx as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        s += kc[ky * 3 + kx] * xc[iy as usize * w + ix as usize];
                    }
                }
                oc[y * w + xx] += s;
            }
        }
    }
}

/// Reverse pass of [`depthwise_conv3x3`]: returns `dx`, accumulates `dkernel`.
pub fn depthwise_conv3x3_backward(x: &Tensor, kernel: &Tensor, dy: &Tensor, dkernel: &mut Tensor) -> Result<Tensor> {
    let [c, h, w] = chw(x)?;
    if dy.shape() != x.shape() {
        return Err(shape_err!("depthwise backward: dy {:?} vs x {:?}", dy.shape(), x.shape()));
    }
    let (xd, kd, gd) = (x.data(), kernel.data(), dy.data());
    let mut dx = vec![0.0; c * h * w];
    let dk = dkernel.data_mut();
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for xx in 0..w {
                let g = gd[base + y * w + xx];
                if g == 0.0 {
                    continue;
                }
                for ky in 0..3 {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = xx as isize + kx as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let off = base + iy as usize * w + ix as usize;
                        dk[ch * 9 + ky * 3 + kx] += g * xd[off];
                        dx[off] += g * kd[ch * 9 + ky * 3 + kx];
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, h, w], dx)
}

/// Dense 3×3 convolution with stride and zero padding 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    /// `[C_out×C_in×3×3]`
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}
param_tree!(Conv2d { weight, bias });

impl Conv2d {
    pub fn init(c_in: usize, c_out: usize, stride: usize, rng: &mut SeededRng) -> Self {
        let std = 1.0 / ((c_in * 9) as f64).sqrt();
        Conv2d {
            weight: normal_tensor(&[c_out, c_in, 3, 3], std, rng),
            bias: Tensor::zeros(&[c_out]).expect("positive extents"),
            stride,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let s = self.stride;
        if s == 0 || !h.is_multiple_of(s) || !w.is_multiple_of(s) {
            return Err(shape_err!("stride {s} does not divide {h}×{w}"));
        }
        Ok((h / s, w / s))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let [ci, h, w] = chw(x)?;
        if ci != self.in_channels() {
            return Err(shape_err!("conv expects {} input channels, got {ci}", self.in_channels()));
        }
        let (oh, ow) = self.output_hw(h, w)?;
        let co = self.out_channels();
        let (xd, wd, s) = (x.data(), self.weight.data(), self.stride);
        let mut out = vec![0.0; co * oh * ow];
        for o in 0..co {
            let b = self.bias.data()[o];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b;
                    for c in 0..ci {
                        for ky in 0..3 {
                            let iy = (oy * s + ky) as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let ix = (ox * s + kx) as isize - 1;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += wd[((o * ci + c) * 3 + ky) * 3 + kx] * xd[(c * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        Tensor::new(vec![co, oh, ow], out)
    }

    pub fn backward(&self, x: &Tensor, dy: &Tensor, grad: &mut Conv2d) -> Result<Tensor> {
        let [ci, h, w] = chw(x)?;
        let (oh, ow) = self.output_hw(h, w)?;
        let co = self.out_channels();
        if dy.shape() != [co, oh, ow] {
            return Err(shape_err!("conv backward: dy {:?}, expected {:?}", dy.shape(), [co, oh, ow]));
        }
        let (xd, wd, gd, s) = (x.data(), self.weight.data(), dy.data(), self.stride);
        let mut dx = vec![0.0; ci * h * w];
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = gd[(o * oh + oy) * ow + ox];
                    grad.bias.data_mut()[o] += g;
                    if g == 0.0 {
                        continue;
                    }
                    for c in 0..ci {
                        for ky in 0..3 {
                            let iy = (oy * s + ky) as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let ix = (ox * s + kx) as isize - 1;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xi = (c * h + iy as usize) * w + ix as usize;
                                let wi = ((o * ci + c) * 3 + ky) * 3 + kx;
                                grad.weight.data_mut()[wi] += g * xd[xi];
                                dx[xi] += g * wd[wi];
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(vec![ci, h, w], dx)
    }
}

// --- layout helpers -----------------------------------------------------------

/// `[C×H×W]` → `[N×C]` tokens.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let [c, h, w] = chw(x)?;
    x.clone().reshape(&[c, h * w])?.transpose()
}

/// `[N×C]` tokens → `[C×H×W]`.
pub fn from_tokens(tokens: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let [n, c] = tokens.as_matrix()?;
    if n != h * w {
        return Err(shape_err!("{n} tokens do not fill a {h}×{w} grid"));
    }
    tokens.transpose()?.reshape(&[c, h, w])
}

// --- Mix-FFN ---------------------------------------------------------------------

/// Expand → 3×3 depthwise conv on the token grid → GELU → contract.
#[derive(Clone, Debug, PartialEq)]
pub struct MixFfn {
    pub expand: Linear,
    /// `[hidden×3×3]`, one filter per channel.
    pub dw_kernel: Tensor,
    pub dw_bias: Tensor,
    pub contract: Linear,
}
param_tree!(MixFfn { expand, dw_kernel, dw_bias, contract });

#[derive(Clone, Debug)]
pub struct MixFfnCache {
    x: Tensor,
    hidden_grid: Tensor,
    pre_act: Tensor,
    act_tokens: Tensor,
    grid: (usize, usize),
}

impl MixFfn {
    pub fn init(dim: usize, hidden: usize, rng: &mut SeededRng) -> Self {
        MixFfn {
            expand: Linear::init(dim, hidden, rng),
            dw_kernel: normal_tensor(&[hidden, 3, 3], 1.0 / 3.0, rng),
            dw_bias: Tensor::zeros(&[hidden]).expect("positive extents"),
            contract: Linear::init(hidden, dim, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.expand.fan_out()
    }

    pub fn forward(&self, x: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
        Ok(self.forward_cached(x, grid)?.0)
    }

    pub fn forward_cached(&self, x: &Tensor, grid: (usize, usize)) -> Result<(Tensor, MixFfnCache)> {
        let [n, _] = x.as_matrix()?;
        let (h, w) = grid;
        if n != h * w {
            return Err(shape_err!("mix-ffn: {n} tokens but grid is {h}×{w}"));
        }
        let hidden_grid = from_tokens(&self.expand.forward(x)?, h, w)?;
        let mut pre = depthwise_conv3x3(&hidden_grid, &self.dw_kernel)?;
        let hw = h * w;
        for (c, &b) in self.dw_bias.data().iter().enumerate() {
            for v in &mut pre.data_mut()[c * hw..(c + 1) * hw] {
                *v += b;
            }
        }
        let act_tokens = to_tokens(&pre.map(gelu))?;
        let out = self.contract.forward(&act_tokens)?;
        Ok((out, MixFfnCache { x: x.clone(), hidden_grid, pre_act: pre, act_tokens, grid }))
    }

    pub fn backward(&self, cache: &MixFfnCache, dy: &Tensor, grad: &mut MixFfn) -> Result<Tensor> {
        let (h, w) = cache.grid;
        let dact = self.contract.backward(&cache.act_tokens, dy, &mut grad.contract)?;
        let dact = from_tokens(&dact, h, w)?;
        let mut dpre = dact;
        for (d, &p) in dpre.data_mut().iter_mut().zip(cache.pre_act.data()) {
            *d *= gelu_grad(p);
        }
        let hw = h * w;
        for (c, g) in grad.dw_bias.data_mut().iter_mut().enumerate() {
            *g += dpre.data()[c * hw..(c + 1) * hw].iter().sum::<f64>();
        }
        let dhidden = depthwise_conv3x3_backward(&cache.hidden_grid, &self.dw_kernel, &dpre, &mut grad.dw_kernel)?;
        self.expand.backward(&cache.x, &to_tokens(&dhidden)?, &mut grad.expand)
    }
}

/// Mix-FFN on a token sequence laid out on an `h×w` grid.
pub fn mix_ffn(x: &Tensor, grid: (usize, usize), p: &MixFfn) -> Result<Tensor> {
    p.forward(x, grid)
}

// --- conditioning stem -------------------------------------------------------------

/// Three strided 3×3 convolutions, each followed by SiLU.
#[derive(Clone, Debug, PartialEq)]
pub struct CondStem {
    pub convs: Vec<Conv2d>,
}
param_tree!(CondStem { convs });

#[derive(Clone, Debug)]
pub struct CondStemCache {
    inputs: Vec<Tensor>,
    pre_acts: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemConfig {
    pub in_channels: usize,
    pub channels: [usize; 3],
    pub strides: [usize; 3],
}

impl StemConfig {
    pub fn downsample(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn out_channels(&self) -> usize {
        self.channels[2]
    }
}

impl CondStem {
    pub fn init(cfg: &StemConfig, rng: &mut SeededRng) -> Self {
        let mut c_in = cfg.in_channels;
        let mut convs = Vec::with_capacity(3);
        for (&c_out, &s) in cfg.channels.iter().zip(&cfg.strides) {
            convs.push(Conv2d::init(c_in, c_out, s, rng));
            c_in = c_out;
        }
        CondStem { convs }
    }

    pub fn out_channels(&self) -> usize {
        self.convs.last().map(Conv2d::out_channels).unwrap_or(0)
    }

    pub fn forward(&self, x_lr: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(x_lr)?.0)
    }

    pub fn forward_cached(&self, x_lr: &Tensor) -> Result<(Tensor, CondStemCache)> {
        let mut inputs = Vec::with_capacity(self.convs.len());
        let mut pre_acts = Vec::with_capacity(self.convs.len());
        let mut cur = x_lr.clone();
        for conv in &self.convs {
            let pre = conv.forward(&cur)?;
            inputs.push(cur);
            cur = pre.map(silu);
            pre_acts.push(pre);
        }
        Ok((cur, CondStemCache { inputs, pre_acts }))
    }

    pub fn backward(&self, cache: &CondStemCache, dy: &Tensor, grad: &mut CondStem) -> Result<Tensor> {
        let mut d = dy.clone();
        for (i, conv) in self.convs.iter().enumerate().rev() {
            for (g, &p) in d.data_mut().iter_mut().zip(cache.pre_acts[i].data()) {
                *g *= silu_grad(p);
            }
            d = conv.backward(&cache.inputs[i], &d, &mut grad.convs[i])?;
        }
        Ok(d)
    }
}

/// Runs the stem and checks its output lands on the latent grid.
pub fn cond_stem(x_lr: &Tensor, p: &CondStem, latent_hw: (usize, usize)) -> Result<Tensor> {
    let out = p.forward(x_lr)?;
    let [_, h, w] = chw(&out)?;
    if (h, w) != latent_hw {
        return Err(shape_err!("stem output {h}×{w} does not match latent {}×{}", latent_hw.0, latent_hw.1));
    }
    Ok(out)
}

/// Channel concatenation, latent channels first.
pub fn inject_condition(z_t: &Tensor, stem_out: &Tensor) -> Result<Tensor> {
    let [_, h, w] = chw(z_t)?;
    let [_, h2, w2] = chw(stem_out)?;
    if (h, w) != (h2, w2) {
        return Err(shape_err!("latent {h}×{w} vs condition {h2}×{w2}"));
    }
    z_t.concat(stem_out, 0)
}

// --- timestep embedding ---------------------------------------------------------------

/// Sinusoidal embedding of `t ∈ [0, 1]` (scaled by 1000) into `dim` features:
/// first half sines, second half cosines, frequencies `10000^(−i/(dim/2))`.
pub fn timestep_embed(t: f64, dim: usize) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("timestep {t} outside [0, 1]")));
    }
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(shape_err!("timestep embedding dim must be even and positive, got {dim}"));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = 1000.0 * t * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    Tensor::new(vec![dim], out)
}

// --- DiT block --------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct DitBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub mod1: Linear,
    pub norm2: LayerNorm,
    pub ffn: MixFfn,
    pub mod2: Linear,
}
param_tree!(DitBlock { norm1, attn, mod1, norm2, ffn, mod2 });

#[derive(Clone, Debug)]
pub struct DitBlockCache {
    c1: LayerNormCache,
    attn: MhaCache,
    c2: LayerNormCache,
    ffn: MixFfnCache,
}

fn add_row(x: &mut Tensor, row: &Tensor) {
    let d = row.numel();
    for chunk in x.data_mut().chunks_mut(d) {
        for (a, b) in chunk.iter_mut().zip(row.data()) {
            *a += b;
        }
    }
}

fn sum_rows(x: &Tensor) -> Result<Tensor> {
    x.sum_axis(0)
}

impl DitBlock {
    pub fn init(cfg: &AttentionConfig, hidden: usize, rng: &mut SeededRng) -> Self {
        let dim = cfg.model_dim();
        DitBlock {
            norm1: LayerNorm::new(dim),
            attn: MultiHeadAttention::init(cfg, rng),
            mod1: Linear::init_scaled(dim, dim, 0.5, rng),
            norm2: LayerNorm::new(dim),
            ffn: MixFfn::init(dim, hidden, rng),
            mod2: Linear::init_scaled(dim, dim, 0.5, rng),
        }
    }

    /// Pre-norm residual block: `x += attn(LN(x) + m1)`, `x += ffn(LN(x) + m2)`,
    /// with `m_i` projections of the conditioning embedding.
    pub fn forward(&self, x: &Tensor, t_emb: &Tensor, grid: (usize, usize), cfg: &AttentionConfig) -> Result<Tensor> {
        Ok(self.forward_cached(x, t_emb, grid, cfg)?.0)
    }

    pub fn forward_cached(
        &self,
        x: &Tensor,
        t_emb: &Tensor,
        grid: (usize, usize),
        cfg: &AttentionConfig,
    ) -> Result<(Tensor, DitBlockCache)> {
        let (mut u1, c1) = self.norm1.forward(x)?;
        add_row(&mut u1, &self.mod1.forward(t_emb)?);
        let (a, attn) = self.attn.forward_cached(&u1, cfg)?;
        let x1 = x.add(&a)?;
        let (mut u2, c2) = self.norm2.forward(&x1)?;
        add_row(&mut u2, &self.mod2.forward(t_emb)?);
        let (f, ffn) = self.ffn.forward_cached(&u2, grid)?;
        Ok((x1.add(&f)?, DitBlockCache { c1, attn, c2, ffn }))
    }

    /// Returns `dx` and accumulates `dL/dt_emb` into `dt_emb`.
    pub fn backward(
        &self,
        cache: &DitBlockCache,
        t_emb: &Tensor,
        dy: &Tensor,
        cfg: &AttentionConfig,
        grad: &mut DitBlock,
        dt_emb: &mut Tensor,
    ) -> Result<Tensor> {
        let du2 = self.ffn.backward(&cache.ffn, dy, &mut grad.ffn)?;
        let dm2 = self.mod2.backward(t_emb, &sum_rows(&du2)?, &mut grad.mod2)?;
        let mut dx1 = dy.add(&self.norm2.backward(&cache.c2, &du2, &mut grad.norm2)?)?;
        let du1 = self.attn.backward(&cache.attn, &dx1, cfg, &mut grad.attn)?;
        let dm1 = self.mod1.backward(t_emb, &sum_rows(&du1)?, &mut grad.mod1)?;
        let dn1 = self.norm1.backward(&cache.c1, &du1, &mut grad.norm1)?;
        for (a, b) in dx1.data_mut().iter_mut().zip(dn1.data()) {
            *a += b;
        }
        for ((d, a), b) in dt_emb.data_mut().iter_mut().zip(dm1.data()).zip(dm2.data()) {
            *d += a + b;
        }
        Ok(dx1)
    }
}

/// One block applied to a token sequence.
pub fn dit_block(x: &Tensor, t_emb: &Tensor, block: &DitBlock, grid: (usize, usize), cfg: &AttentionConfig) -> Result<Tensor> {
    block.forward(x, t_emb, grid, cfg)
}

// --- full model ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DitConfig {
    pub latent_channels: usize,
    pub grid: (usize, usize),
    pub model_dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub num_blocks: usize,
    pub time_freq_dim: usize,
    /// Width of the opaque guidance vector; 0 disables it.
    pub cond_dim: usize,
    pub stem: Option<StemConfig>,
    pub num_experts: usize,
    pub epsilon: f64,
}

impl Default for DitConfig {
    /// Two-channel, single-token model for 2-D point clouds.
    fn default() -> Self {
        DitConfig {
            latent_channels: 2,
            grid: (1, 1),
            model_dim: 32,
            num_heads: 2,
            mlp_ratio: 2,
            num_blocks: 2,
            time_freq_dim: 16,
            cond_dim: 0,
            stem: None,
            num_experts: 1,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl DitConfig {
    pub fn attention(&self) -> Result<AttentionConfig> {
        if self.num_heads == 0 || !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(shape_err!("model dim {} not divisible by {} heads", self.model_dim, self.num_heads));
        }
        AttentionConfig::new(self.num_heads, self.model_dim / self.num_heads, self.epsilon)
    }

    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn input_channels(&self) -> usize {
        self.latent_channels + self.stem.as_ref().map_or(0, StemConfig::out_channels)
    }

    /// Spatial size `x_lr` must have, if a stem is configured.
    pub fn lr_hw(&self) -> Option<(usize, usize)> {
        self.stem.as_ref().map(|s| (self.grid.0 * s.downsample(), self.grid.1 * s.downsample()))
    }

    pub fn validate(&self) -> Result<()> {
        self.attention()?;
        let positive = [
            self.latent_channels,
            self.grid.0,
            self.grid.1,
            self.mlp_ratio,
            self.num_blocks,
            self.time_freq_dim,
            self.num_experts,
        ];
        if positive.contains(&0) {
            return Err(Error::Config(format!("zero dimension in model config {self:?}")));
        }
        if !self.time_freq_dim.is_multiple_of(2) {
            return Err(Error::Config("time_freq_dim must be even".into()));
        }
        if let Some(s) = &self.stem {
            if s.in_channels == 0 || s.channels.contains(&0) || s.strides.contains(&0) {
                return Err(Error::Config(format!("invalid stem config {s:?}")));
            }
        }
        Ok(())
    }

    /// Tiny config used in tests: 2 blocks, dim 16, 8×8 grid, stem on 16×16 input.
    pub fn tiny() -> Self {
        DitConfig {
            latent_channels: 2,
            grid: (8, 8),
            model_dim: 16,
            num_heads: 2,
            mlp_ratio: 2,
            num_blocks: 2,
            time_freq_dim: 8,
            cond_dim: 3,
            stem: Some(StemConfig { in_channels: 1, channels: [4, 4, 2], strides: [2, 1, 1] }),
            num_experts: 1,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

/// Blocks owned by one expert.
#[derive(Clone, Debug, PartialEq)]
pub struct Expert {
    pub blocks: Vec<DitBlock>,
}
param_tree!(Expert { blocks });

/// All trainable tensors. The stem, embeddings and output head are shared;
/// each expert owns a full copy of the block stack.
#[derive(Clone, Debug, PartialEq)]
pub struct DitParams {
    pub stem: Option<CondStem>,
    pub input: Linear,
    pub time1: Linear,
    pub time2: Linear,
    pub cond: Option<Linear>,
    pub experts: Vec<Expert>,
    pub final_norm: LayerNorm,
    pub output: Linear,
}
param_tree!(DitParams { stem, input, time1, time2, cond, experts, final_norm, output });

impl DitParams {
    /// Names of tensors that belong to expert `k` start with this prefix.
    pub fn expert_prefix(k: usize) -> String {
        format!("experts.{k}.")
    }
}

/// Model inputs other than parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Conditioning {
    /// Opaque guidance vector of width `cond_dim`.
    pub vector: Option<Tensor>,
    /// Low-resolution image for the stem.
    pub x_lr: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dit {
    pub config: DitConfig,
    pub params: DitParams,
}

#[derive(Clone, Debug)]
pub struct DitCache {
    expert: usize,
    stem: Option<CondStemCache>,
    tokens_in: Tensor,
    freq: Tensor,
    time_pre: Tensor,
    time_hidden: Tensor,
    cond_in: Option<Tensor>,
    t_emb: Tensor,
    blocks: Vec<DitBlockCache>,
    fnorm: LayerNormCache,
    normed: Tensor,
}

impl DitCache {
    pub fn expert(&self) -> usize {
        self.expert
    }

    /// Hash of the ReLU on/off pattern of every attention feature input.
    pub fn relu_pattern(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for b in &self.blocks {
            let (q, k) = b.attn.feature_inputs();
            for v in q.data().iter().chain(k.data()) {
                (*v > 0.0).hash(&mut h);
            }
        }
        h.finish()
    }
}

impl Dit {
    /// Random init. With `zero_output` the output head starts at zero, so the
    /// untrained model predicts a zero field.
    pub fn init(config: DitConfig, zero_output: bool, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let attn = config.attention()?;
        let d = config.model_dim;
        let stem = config.stem.as_ref().map(|s| CondStem::init(s, rng));
        let input = Linear::init(config.input_channels(), d, rng);
        let time1 = Linear::init(config.time_freq_dim, d, rng);
        let time2 = Linear::init(d, d, rng);
        let cond = (config.cond_dim > 0).then(|| Linear::init(config.cond_dim, d, rng));
        let experts = (0..config.num_experts)
            .map(|_| Expert {
                blocks: (0..config.num_blocks).map(|_| DitBlock::init(&attn, d * config.mlp_ratio, rng)).collect(),
            })
            .collect();
        let output = if zero_output {
            Linear::zeros(d, config.latent_channels)
        } else {
            Linear::init(d, config.latent_channels, rng)
        };
        let params = DitParams { stem, input, time1, time2, cond, experts, final_norm: LayerNorm::new(d), output };
        Ok(Dit { config, params })
    }

    pub fn num_experts(&self) -> usize {
        self.params.experts.len()
    }

    pub fn forward(&self, z_t: &Tensor, t: f64, cond: &Conditioning, expert: usize) -> Result<Tensor> {
        Ok(self.forward_cached(z_t, t, cond, expert)?.0)
    }

    pub fn forward_cached(&self, z_t: &Tensor, t: f64, cond: &Conditioning, expert: usize) -> Result<(Tensor, DitCache)> {
        let cfg = &self.config;
        let attn = cfg.attention()?;
        let (gh, gw) = cfg.grid;
        if z_t.shape() != [cfg.latent_channels, gh, gw] {
            return Err(shape_err!("z_t {:?}, model expects {:?}", z_t.shape(), [cfg.latent_channels, gh, gw]));
        }
        let experts = &self.params.experts;
        let blocks = &experts
            .get(expert)
            .ok_or_else(|| Error::Domain(format!("expert {expert} of {}", experts.len())))?
            .blocks;

        let (z_in, stem_cache) = match (&self.params.stem, &cond.x_lr) {
            (Some(stem), Some(x_lr)) => {
                let (f, c) = stem.forward_cached(x_lr)?;
                let [_, h, w] = chw(&f)?;
                if (h, w) != cfg.grid {
                    return Err(shape_err!("stem output {h}×{w} does not match latent {gh}×{gw}"));
                }
                (inject_condition(z_t, &f)?, Some(c))
            }
            (Some(_), None) => return Err(shape_err!("model has a conditioning stem but no x_lr was given")),
            (None, _) => (z_t.clone(), None),
        };
        let tokens_in = to_tokens(&z_in)?;
        let mut x = self.params.input.forward(&tokens_in)?;

        let freq = timestep_embed(t, cfg.time_freq_dim)?;
        let time_pre = self.params.time1.forward(&freq)?;
        let time_hidden = time_pre.map(silu);
        let mut t_emb = self.params.time2.forward(&time_hidden)?;
        let cond_in = match (&self.params.cond, &cond.vector) {
            (Some(lin), Some(c)) => {
                t_emb = t_emb.add(&lin.forward(c)?)?;
                Some(c.clone())
            }
            (Some(_), None) => return Err(shape_err!("model expects a guidance vector of width {}", cfg.cond_dim)),
            (None, Some(_)) => return Err(shape_err!("model has no guidance input")),
            (None, None) => None,
        };

        let mut caches = Vec::with_capacity(blocks.len());
        for b in blocks {
            let (y, c) = b.forward_cached(&x, &t_emb, cfg.grid, &attn)?;
            x = y;
            caches.push(c);
        }
        let (normed, fnorm) = self.params.final_norm.forward(&x)?;
        let out_tokens = self.params.output.forward(&normed)?;
        let out = from_tokens(&out_tokens, gh, gw)?;
        out.ensure_finite("model output")?;
        Ok((
            out,
            DitCache {
                expert,
                stem: stem_cache,
                tokens_in,
                freq,
                time_pre,
                time_hidden,
                cond_in,
                t_emb,
                blocks: caches,
                fnorm,
                normed,
            },
        ))
    }

    /// Reverse pass; accumulates into `grads.params` and returns `dL/dz_t`.
    pub fn backward(&self, cache: &DitCache, d_out: &Tensor, grads: &mut DitParams) -> Result<Tensor> {
        let cfg = &self.config;
        let attn = cfg.attention()?;
        let (gh, gw) = cfg.grid;
        let p = &self.params;
        let d_tokens = to_tokens(d_out)?;
        let d_normed = p.output.backward(&cache.normed, &d_tokens, &mut grads.output)?;
        let mut dx = p.final_norm.backward(&cache.fnorm, &d_normed, &mut grads.final_norm)?;

        let mut dt_emb = Tensor::zeros(&[cfg.model_dim])?;
        let blocks = &p.experts[cache.expert].blocks;
        let gblocks = &mut grads.experts[cache.expert].blocks;
        for (i, b) in blocks.iter().enumerate().rev() {
            dx = b.backward(&cache.blocks[i], &cache.t_emb, &dx, &attn, &mut gblocks[i], &mut dt_emb)?;
        }

        if let (Some(lin), Some(c), Some(g)) = (&p.cond, &cache.cond_in, grads.cond.as_mut()) {
            lin.backward(c, &dt_emb, g)?;
        }
        let mut dh = p.time2.backward(&cache.time_hidden, &dt_emb, &mut grads.time2)?;
        for (g, &pre) in dh.data_mut().iter_mut().zip(cache.time_pre.data()) {
            *g *= silu_grad(pre);
        }
        p.time1.backward(&cache.freq, &dh, &mut grads.time1)?;

        let d_tokens_in = p.input.backward(&cache.tokens_in, &dx, &mut grads.input)?;
        let d_in = from_tokens(&d_tokens_in, gh, gw)?;
        match (&p.stem, &cache.stem, grads.stem.as_mut()) {
            (Some(stem), Some(sc), Some(g)) => {
                let (dz, dfeat) = d_in.split(0, cfg.latent_channels)?;
                stem.backward(sc, &dfeat, g)?;
                Ok(dz)
            }
            _ => Ok(d_in),
        }
    }

    pub fn zero_grads(&self) -> DitParams {
        self.params.zeros_like()
    }
}

/// Predicted velocity `v_θ(z_t, t, c)` using the given expert.
pub fn dit_forward(z_t: &Tensor, t: f64, cond: &Conditioning, model: &Dit, expert: usize) -> Result<Tensor> {
    model.forward(z_t, t, cond, expert)
}
