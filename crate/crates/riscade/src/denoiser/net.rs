//! Network assembly: denoising blocks, full-scale skip fusion, and the
//! exact backward pass over the whole graph.
//!
//! Shapes follow one rule set. With `L` levels and `C0` base filters,
//! encoder level `l` runs at resolution `H/2^l` with width `C0*2^l`; the
//! bottleneck shares the deepest resolution `H/2^(L-1)` at width `C0*2^L`;
//! decoder stages exist at levels `L-2..0`. Every decoder stage
//! concatenates, in shallow-to-deep source order: all shallower encoder
//! outputs max-pooled down, the same-level encoder output, all deeper
//! decoder outputs bilinearly upsampled, and the bottleneck output
//! upsampled — which makes the fused width the same at every stage,
//! `C0*(3*2^(L-1) - 1)`. The deepest encoder output feeds only the
//! bottleneck. A 1x1 head maps the level-0 decoder output back to the two
//! real/imaginary planes.

use ndarray::{Array1, Array4};

use super::layers::{
    bilinear_up, bilinear_up_backward, concat_channels, maxpool2, maxpool2_backward, relu,
    relu_backward, split_channels, BatchNorm, BnCache, Conv2d,
};
use super::{debug_assert_finite, TensorFloat};
use crate::rng::{stream, StreamDomain};
use crate::{Error, Result};
use rand::Rng;

/// The network consumes and produces real/imaginary plane pairs.
pub const PLANE_CHANNELS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    /// Number of encoder levels; at least 2 (one full-resolution level plus
    /// one pooled level feeding the bottleneck).
    pub levels: usize,
    /// Channel width of the full-resolution encoder level; deeper levels
    /// double it.
    pub base_filters: usize,
    /// Convolutions inside each denoising block, including the final
    /// zero-initialized one.
    pub convs_per_block: usize,
    /// Square kernel size for block and decoder convolutions; must be odd.
    pub kernel: usize,
    /// Insert batch normalization after each non-final block convolution.
    pub use_batchnorm: bool,
    /// Give every skip branch its own rectified convolution down to
    /// `base_filters` channels before decoder concatenation. Off, the
    /// decoder concatenates the raw resampled features and the first fused
    /// convolution absorbs the width differences.
    pub branch_convs: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            levels: 2,
            base_filters: 8,
            convs_per_block: 2,
            kernel: 3,
            use_batchnorm: true,
            branch_convs: false,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Config(format!(
                "network needs at least 2 levels, got {}",
                self.levels
            )));
        }
        if self.base_filters == 0 {
            return Err(Error::Config("base_filters must be positive".into()));
        }
        if self.convs_per_block == 0 {
            return Err(Error::Config("convs_per_block must be positive".into()));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel must be odd, got {}",
                self.kernel
            )));
        }
        Ok(())
    }

    /// Channel width of encoder level `l` (and of the decoder stage at the
    /// same level).
    pub fn width(&self, level: usize) -> usize {
        self.base_filters << level
    }

    /// Channel width of the bottleneck block.
    pub fn bottleneck_width(&self) -> usize {
        self.base_filters << self.levels
    }

    /// Fused channel count entering every decoder stage; independent of the
    /// stage level. With branch convolutions every source is first reduced
    /// to `base_filters` channels, so the fused width is `levels * C0`;
    /// without them the raw source widths add up.
    pub fn concat_width(&self) -> usize {
        if self.branch_convs {
            self.levels * self.base_filters
        } else {
            self.base_filters * (3 * (1 << (self.levels - 1)) - 1)
        }
    }

    /// Channel widths of the sources fused at a given decoder level, in
    /// shallow-to-deep order: encoders `0..=level`, deeper decoder stages,
    /// then the bottleneck.
    pub fn source_widths(&self, level: usize) -> Vec<usize> {
        let mut widths: Vec<usize> = (0..=level).map(|j| self.width(j)).collect();
        widths.extend((level + 1..self.levels - 1).map(|j| self.width(j)));
        widths.push(self.bottleneck_width());
        widths
    }

    /// Input height and width must be divisible by this for the pooling
    /// pyramid to bottom out on whole pixels.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.levels - 1)
    }
}

/// One denoising block: a 1x1 channel alignment, then a conv stack whose
/// output is *subtracted* from the aligned input. The last convolution
/// starts at zero, so a freshly built block is exactly the identity on its
/// aligned input.
#[derive(Debug, Clone)]
struct DenoiseBlock<T> {
    align: Conv2d<T>,
    convs: Vec<Conv2d<T>>,
    bns: Vec<BatchNorm<T>>,
}

/// Forward activations a block's backward pass needs.
#[derive(Debug)]
struct BlockCache<T> {
    input: Array4<T>,
    /// Input of each convolution in the stack; entry 0 is the aligned tensor.
    conv_ins: Vec<Array4<T>>,
    /// Input of each rectifier (output of conv or batch norm).
    relu_ins: Vec<Array4<T>>,
    bn_caches: Vec<BnCache<T>>,
}

/// Parameter gradients of one block, in the same order the visitors walk.
struct BlockGrads<T> {
    align_w: Array4<T>,
    align_b: Array1<T>,
    conv_w: Vec<Array4<T>>,
    conv_b: Vec<Array1<T>>,
    bn_gamma: Vec<Array1<T>>,
    bn_beta: Vec<Array1<T>>,
}

impl<T: TensorFloat> DenoiseBlock<T> {
    fn new(c_in: usize, width: usize, cfg: &NetConfig) -> Self {
        let i = cfg.convs_per_block;
        let convs = (0..i).map(|_| Conv2d::zeros(width, width, cfg.kernel)).collect();
        let bns = if cfg.use_batchnorm {
            (0..i.saturating_sub(1)).map(|_| BatchNorm::new(width)).collect()
        } else {
            Vec::new()
        };
        DenoiseBlock {
            align: Conv2d::zeros(width, c_in, 1),
            convs,
            bns,
        }
    }

    fn forward_train(&mut self, x: &Array4<T>) -> Result<(Array4<T>, BlockCache<T>)> {
        let i = self.convs.len();
        let aligned = self.align.forward(x)?;
        let mut conv_ins = Vec::with_capacity(i);
        let mut relu_ins = Vec::with_capacity(i.saturating_sub(1));
        let mut bn_caches = Vec::new();
        let mut t = aligned.clone();
        for j in 0..i - 1 {
            conv_ins.push(t.clone());
            let u = self.convs[j].forward(&t)?;
            let v = if self.bns.is_empty() {
                u
            } else {
                let (v, cache) = self.bns[j].forward_train(&u);
                bn_caches.push(cache);
                v
            };
            relu_ins.push(v.clone());
            t = relu(&v);
        }
        conv_ins.push(t.clone());
        let residual = self.convs[i - 1].forward(&t)?;
        let out = &aligned - &residual;
        Ok((
            out,
            BlockCache {
                input: x.clone(),
                conv_ins,
                relu_ins,
                bn_caches,
            },
        ))
    }

    fn forward_eval(&self, x: &Array4<T>) -> Result<Array4<T>> {
        let i = self.convs.len();
        let aligned = self.align.forward(x)?;
        let mut t = aligned.clone();
        for j in 0..i - 1 {
            let u = self.convs[j].forward(&t)?;
            let v = if self.bns.is_empty() {
                u
            } else {
                self.bns[j].forward_eval(&u)
            };
            t = relu(&v);
        }
        let residual = self.convs[i - 1].forward(&t)?;
        Ok(&aligned - &residual)
    }

    /// Returns the gradient at the block input plus all parameter gradients.
    fn backward(&self, cache: &BlockCache<T>, grad_out: &Array4<T>) -> (Array4<T>, BlockGrads<T>) {
        let i = self.convs.len();
        let mut conv_w: Vec<Option<Array4<T>>> = (0..i).map(|_| None).collect();
        let mut conv_b: Vec<Option<Array1<T>>> = (0..i).map(|_| None).collect();
        let mut bn_gamma: Vec<Option<Array1<T>>> = (0..self.bns.len()).map(|_| None).collect();
        let mut bn_beta: Vec<Option<Array1<T>>> = (0..self.bns.len()).map(|_| None).collect();

        // out = aligned - residual: the residual path sees a negated gradient.
        let g_res = grad_out.mapv(|v| T::zero() - v);
        let (mut g, dw, db) = self.convs[i - 1].backward(&cache.conv_ins[i - 1], &g_res);
        conv_w[i - 1] = Some(dw);
        conv_b[i - 1] = Some(db);
        for j in (0..i - 1).rev() {
            g = relu_backward(&cache.relu_ins[j], &g);
            if !self.bns.is_empty() {
                let (gx, dgamma, dbeta) = self.bns[j].backward(&cache.bn_caches[j], &g);
                bn_gamma[j] = Some(dgamma);
                bn_beta[j] = Some(dbeta);
                g = gx;
            }
            let (gx, dw, db) = self.convs[j].backward(&cache.conv_ins[j], &g);
            conv_w[j] = Some(dw);
            conv_b[j] = Some(db);
            g = gx;
        }
        // The aligned tensor feeds both the subtraction and the conv stack.
        let g_aligned = grad_out + &g;
        let (g_input, align_w, align_b) = self.align.backward(&cache.input, &g_aligned);
        (
            g_input,
            BlockGrads {
                align_w,
                align_b,
                conv_w: conv_w.into_iter().map(Option::unwrap).collect(),
                conv_b: conv_b.into_iter().map(Option::unwrap).collect(),
                bn_gamma: bn_gamma.into_iter().map(Option::unwrap).collect(),
                bn_beta: bn_beta.into_iter().map(Option::unwrap).collect(),
            },
        )
    }

    fn visit(&self, f: &mut dyn FnMut(&[T]), with_running: bool) {
        f(self.align.weight.as_slice().unwrap());
        f(self.align.bias.as_slice().unwrap());
        for (j, conv) in self.convs.iter().enumerate() {
            f(conv.weight.as_slice().unwrap());
            f(conv.bias.as_slice().unwrap());
            if j < self.bns.len() {
                let bn = &self.bns[j];
                f(bn.gamma.as_slice().unwrap());
                f(bn.beta.as_slice().unwrap());
                if with_running {
                    f(bn.running_mean.as_slice().unwrap());
                    f(bn.running_var.as_slice().unwrap());
                }
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [T]), with_running: bool) {
        f(self.align.weight.as_slice_mut().unwrap());
        f(self.align.bias.as_slice_mut().unwrap());
        let n_bns = self.bns.len();
        for (j, conv) in self.convs.iter_mut().enumerate() {
            f(conv.weight.as_slice_mut().unwrap());
            f(conv.bias.as_slice_mut().unwrap());
            if j < n_bns {
                let bn = &mut self.bns[j];
                f(bn.gamma.as_slice_mut().unwrap());
                f(bn.beta.as_slice_mut().unwrap());
                if with_running {
                    f(bn.running_mean.as_slice_mut().unwrap());
                    f(bn.running_var.as_slice_mut().unwrap());
                }
            }
        }
    }

    fn push_grads(grads: &BlockGrads<T>, out: &mut Vec<T>) {
        out.extend(grads.align_w.iter().copied());
        out.extend(grads.align_b.iter().copied());
        for j in 0..grads.conv_w.len() {
            out.extend(grads.conv_w[j].iter().copied());
            out.extend(grads.conv_b[j].iter().copied());
            if j < grads.bn_gamma.len() {
                out.extend(grads.bn_gamma[j].iter().copied());
                out.extend(grads.bn_beta[j].iter().copied());
            }
        }
    }
}

/// One decoder stage: optional per-branch rectified convolutions, then
/// convolution, rectifier, convolution over the fused tensor. No
/// normalization here.
#[derive(Debug, Clone)]
struct DecoderStage<T> {
    /// One convolution per fused source when the config asks for branch
    /// convolutions; empty otherwise.
    branches: Vec<Conv2d<T>>,
    conv0: Conv2d<T>,
    conv1: Conv2d<T>,
}

#[derive(Debug)]
struct StageCache<T> {
    /// Resampled source tensors, kept only when branch convolutions run.
    branch_ins: Vec<Array4<T>>,
    /// Pre-rectifier branch convolution outputs, same condition.
    branch_outs: Vec<Array4<T>>,
    concat_in: Array4<T>,
    conv0_out: Array4<T>,
    relu_out: Array4<T>,
}

struct StageGrads<T> {
    branch_w: Vec<Array4<T>>,
    branch_b: Vec<Array1<T>>,
    c0_w: Array4<T>,
    c0_b: Array1<T>,
    c1_w: Array4<T>,
    c1_b: Array1<T>,
}

impl<T: TensorFloat> DecoderStage<T> {
    fn new(cfg: &NetConfig, level: usize) -> Self {
        let branches = if cfg.branch_convs {
            cfg.source_widths(level)
                .iter()
                .map(|&c| Conv2d::zeros(cfg.base_filters, c, cfg.kernel))
                .collect()
        } else {
            Vec::new()
        };
        let width = cfg.width(level);
        DecoderStage {
            branches,
            conv0: Conv2d::zeros(width, cfg.concat_width(), cfg.kernel),
            conv1: Conv2d::zeros(width, width, cfg.kernel),
        }
    }

    /// Fuses the resampled sources and runs the stage convolutions.
    fn forward(&self, parts: &[Array4<T>]) -> Result<(Array4<T>, StageCache<T>)> {
        let (branch_ins, branch_outs, x) = if self.branches.is_empty() {
            let refs: Vec<&Array4<T>> = parts.iter().collect();
            (Vec::new(), Vec::new(), concat_channels(&refs)?)
        } else {
            let mut outs = Vec::with_capacity(parts.len());
            let mut rect = Vec::with_capacity(parts.len());
            for (conv, part) in self.branches.iter().zip(parts) {
                let u = conv.forward(part)?;
                rect.push(relu(&u));
                outs.push(u);
            }
            let refs: Vec<&Array4<T>> = rect.iter().collect();
            (parts.to_vec(), outs, concat_channels(&refs)?)
        };
        let u = self.conv0.forward(&x)?;
        let v = relu(&u);
        let y = self.conv1.forward(&v)?;
        Ok((
            y,
            StageCache {
                branch_ins,
                branch_outs,
                concat_in: x,
                conv0_out: u,
                relu_out: v,
            },
        ))
    }

    /// Cache-free forward for inference.
    fn forward_eval(&self, parts: &[Array4<T>]) -> Result<Array4<T>> {
        let x = if self.branches.is_empty() {
            let refs: Vec<&Array4<T>> = parts.iter().collect();
            concat_channels(&refs)?
        } else {
            let mut rect = Vec::with_capacity(parts.len());
            for (conv, part) in self.branches.iter().zip(parts) {
                rect.push(relu(&conv.forward(part)?));
            }
            let refs: Vec<&Array4<T>> = rect.iter().collect();
            concat_channels(&refs)?
        };
        let v = relu(&self.conv0.forward(&x)?);
        self.conv1.forward(&v)
    }

    /// Returns the gradient at each resampled source plus all parameter
    /// gradients. `source_widths` are the channel counts of the sources
    /// before any branch convolution.
    fn backward(
        &self,
        cache: &StageCache<T>,
        source_widths: &[usize],
        grad_out: &Array4<T>,
    ) -> (Vec<Array4<T>>, StageGrads<T>) {
        let (g, c1_w, c1_b) = self.conv1.backward(&cache.relu_out, grad_out);
        let g = relu_backward(&cache.conv0_out, &g);
        let (g_concat, c0_w, c0_b) = self.conv0.backward(&cache.concat_in, &g);
        let (g_sources, branch_w, branch_b) = if self.branches.is_empty() {
            let parts = split_channels(&g_concat, source_widths).expect("widths match concat");
            (parts, Vec::new(), Vec::new())
        } else {
            let even: Vec<usize> = self.branches.iter().map(|c| c.c_out()).collect();
            let parts = split_channels(&g_concat, &even).expect("widths match concat");
            let mut g_sources = Vec::with_capacity(parts.len());
            let mut branch_w = Vec::with_capacity(parts.len());
            let mut branch_b = Vec::with_capacity(parts.len());
            for (i, g_part) in parts.into_iter().enumerate() {
                let g_pre = relu_backward(&cache.branch_outs[i], &g_part);
                let (g_src, dw, db) = self.branches[i].backward(&cache.branch_ins[i], &g_pre);
                g_sources.push(g_src);
                branch_w.push(dw);
                branch_b.push(db);
            }
            (g_sources, branch_w, branch_b)
        };
        (
            g_sources,
            StageGrads {
                branch_w,
                branch_b,
                c0_w,
                c0_b,
                c1_w,
                c1_b,
            },
        )
    }

    fn visit(&self, f: &mut dyn FnMut(&[T])) {
        for conv in &self.branches {
            f(conv.weight.as_slice().unwrap());
            f(conv.bias.as_slice().unwrap());
        }
        f(self.conv0.weight.as_slice().unwrap());
        f(self.conv0.bias.as_slice().unwrap());
        f(self.conv1.weight.as_slice().unwrap());
        f(self.conv1.bias.as_slice().unwrap());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [T])) {
        for conv in &mut self.branches {
            f(conv.weight.as_slice_mut().unwrap());
            f(conv.bias.as_slice_mut().unwrap());
        }
        f(self.conv0.weight.as_slice_mut().unwrap());
        f(self.conv0.bias.as_slice_mut().unwrap());
        f(self.conv1.weight.as_slice_mut().unwrap());
        f(self.conv1.bias.as_slice_mut().unwrap());
    }

    fn push_grads(grads: &StageGrads<T>, out: &mut Vec<T>) {
        for (w, b) in grads.branch_w.iter().zip(&grads.branch_b) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out.extend(grads.c0_w.iter().copied());
        out.extend(grads.c0_b.iter().copied());
        out.extend(grads.c1_w.iter().copied());
        out.extend(grads.c1_b.iter().copied());
    }
}

/// The assembled denoiser.
#[derive(Debug, Clone)]
pub struct DenoiserNet<T> {
    cfg: NetConfig,
    encoder: Vec<DenoiseBlock<T>>,
    bottleneck: DenoiseBlock<T>,
    /// Stored deepest-first: index 0 is level `L-2`, the last is level 0.
    decoder: Vec<DecoderStage<T>>,
    head: Conv2d<T>,
}

/// Everything the backward pass needs from one training forward pass.
#[derive(Debug)]
pub struct NetTrace<T> {
    enc: Vec<BlockCache<T>>,
    /// Winner maps of the pools between consecutive encoder levels.
    enc_pool_args: Vec<Array4<u8>>,
    bottleneck: BlockCache<T>,
    stages: Vec<StageTrace<T>>,
    head_in: Array4<T>,
    in_h: usize,
    in_w: usize,
}

#[derive(Debug)]
struct StageTrace<T> {
    level: usize,
    cache: StageCache<T>,
    /// Winner maps for each shallower-encoder source, one chain per source.
    skip_pool_args: Vec<Vec<Array4<u8>>>,
    widths: Vec<usize>,
}

/// How a convolution's initial weights are drawn, by its role in the graph.
#[derive(Clone, Copy)]
enum InitRole {
    Zero,
    Linear,
    Rectified,
}

/// Builds the network and draws its initial parameters from a dedicated
/// random stream of the master seed.
pub fn build_net<T: TensorFloat>(cfg: &NetConfig, seed: u64) -> Result<DenoiserNet<T>> {
    cfg.validate()?;
    let levels = cfg.levels;
    let mut encoder = Vec::with_capacity(levels);
    for l in 0..levels {
        let c_in = if l == 0 { PLANE_CHANNELS } else { cfg.width(l - 1) };
        encoder.push(DenoiseBlock::new(c_in, cfg.width(l), cfg));
    }
    let bottleneck = DenoiseBlock::new(cfg.width(levels - 1), cfg.bottleneck_width(), cfg);
    let mut decoder = Vec::with_capacity(levels - 1);
    for l in (0..=levels.saturating_sub(2)).rev() {
        decoder.push(DecoderStage::new(cfg, l));
    }
    let head = Conv2d::zeros(PLANE_CHANNELS, cfg.base_filters, 1);
    let mut net = DenoiserNet {
        cfg: cfg.clone(),
        encoder,
        bottleneck,
        decoder,
        head,
    };
    net.init_params(seed);
    Ok(net)
}

impl<T: TensorFloat> DenoiserNet<T> {
    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    /// Fills weights with fan-in-scaled uniform draws and leaves biases at
    /// zero. Convolutions feeding a rectifier use the rectifier gain
    /// (`±sqrt(6/fan_in)`); linear-role convolutions — alignments and second
    /// decoder convs — use unit gain (`±sqrt(3/fan_in)`) so the initial
    /// feature scale stays near the input scale. The final convolution of
    /// every denoising block stays at zero so each block starts as the
    /// identity, and the output head stays at zero so the whole network
    /// starts as the zero map. Starting from the zero map matters: with a
    /// random head the initial output is uncorrelated with the target, the
    /// first updates mostly shrink its power, and because every path to the
    /// output crosses the decoder rectifier — whose outputs are one-sidedly
    /// non-negative — the cheapest way to shrink is to push all rectifier
    /// inputs negative, which permanently kills the feature path. With a
    /// zero head the first updates are driven by input–target correlation
    /// instead. Each convolution draws from its own substream, indexed by
    /// position, so the values do not depend on tensor iteration batching.
    fn init_params(&mut self, seed: u64) {
        let mut index = 0u64;
        let mut init_conv = |conv: &mut Conv2d<T>, role: InitRole| {
            let idx = index;
            index += 1;
            let gain = match role {
                InitRole::Zero => return,
                InitRole::Linear => 1.0,
                InitRole::Rectified => 2.0,
            };
            let fan_in = conv.c_in() * conv.kernel() * conv.kernel();
            let bound = (3.0 * gain / fan_in as f64).sqrt();
            let mut rng = stream(seed, StreamDomain::NetInit, idx);
            for w in conv.weight.iter_mut() {
                *w = T::from_f64_lossy((rng.gen::<f64>() * 2.0 - 1.0) * bound);
            }
        };
        let mut init_block = |block: &mut DenoiseBlock<T>| {
            init_conv(&mut block.align, InitRole::Linear);
            let last = block.convs.len() - 1;
            for (j, conv) in block.convs.iter_mut().enumerate() {
                let role = if j == last {
                    InitRole::Zero
                } else {
                    InitRole::Rectified
                };
                init_conv(conv, role);
            }
        };
        for block in &mut self.encoder {
            init_block(block);
        }
        init_block(&mut self.bottleneck);
        for stage in &mut self.decoder {
            for conv in &mut stage.branches {
                init_conv(conv, InitRole::Rectified);
            }
            init_conv(&mut stage.conv0, InitRole::Rectified);
            init_conv(&mut stage.conv1, InitRole::Linear);
        }
        init_conv(&mut self.head, InitRole::Zero);
    }

    fn check_input(&self, x: &Array4<T>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != PLANE_CHANNELS {
            return Err(Error::Shape(format!(
                "denoiser expects {PLANE_CHANNELS} input planes, got {c}"
            )));
        }
        let d = self.cfg.spatial_divisor();
        if h % d != 0 || w % d != 0 {
            let up = |v: usize| v.div_ceil(d) * d;
            return Err(Error::Shape(format!(
                "input {h}x{w} is not divisible by {d} ({} levels); \
                 pad or crop to {}x{}",
                self.cfg.levels,
                up(h),
                up(w)
            )));
        }
        Ok(())
    }

    /// Training-mode forward pass; updates batch-norm running statistics and
    /// returns the activations the backward pass consumes.
    pub fn forward_train(&mut self, x: &Array4<T>) -> Result<(Array4<T>, NetTrace<T>)> {
        self.check_input(x)?;
        let levels = self.cfg.levels;
        let (_, _, in_h, in_w) = x.dim();

        let mut enc_caches = Vec::with_capacity(levels);
        let mut enc_outputs: Vec<Array4<T>> = Vec::with_capacity(levels);
        let mut enc_pool_args = Vec::with_capacity(levels - 1);
        let mut cur = x.clone();
        for l in 0..levels {
            if l > 0 {
                let (p, arg) = maxpool2(&cur)?;
                enc_pool_args.push(arg);
                cur = p;
            }
            let (out, cache) = self.encoder[l].forward_train(&cur)?;
            debug_assert_finite(&out, "encoder block");
            enc_caches.push(cache);
            cur = out.clone();
            enc_outputs.push(out);
        }
        let (b_out, b_cache) = self.bottleneck.forward_train(&enc_outputs[levels - 1])?;
        debug_assert_finite(&b_out, "bottleneck block");

        let mut dec_outputs: Vec<Option<Array4<T>>> = (0..levels - 1).map(|_| None).collect();
        let mut stages = Vec::with_capacity(levels - 1);
        for idx in 0..self.decoder.len() {
            let level = levels - 2 - idx;
            let (concat, widths, skip_pool_args) =
                self.fuse(level, &enc_outputs, &dec_outputs, &b_out)?;
            let (y, cache) = self.decoder[idx].forward(&concat)?;
            debug_assert_finite(&y, "decoder stage");
            stages.push(StageTrace {
                level,
                cache,
                skip_pool_args,
                widths,
            });
            dec_outputs[level] = Some(y);
        }
        let head_in = dec_outputs[0].take().expect("level-0 stage always runs");
        let y = self.head.forward(&head_in)?;
        debug_assert_finite(&y, "output head");
        Ok((
            y,
            NetTrace {
                enc: enc_caches,
                enc_pool_args,
                bottleneck: b_cache,
                stages,
                head_in,
                in_h,
                in_w,
            },
        ))
    }

    /// Inference-mode forward pass; batch norm uses running statistics and
    /// nothing is cached.
    pub fn forward_eval(&self, x: &Array4<T>) -> Result<Array4<T>> {
        self.check_input(x)?;
        let levels = self.cfg.levels;
        let mut enc_outputs: Vec<Array4<T>> = Vec::with_capacity(levels);
        let mut cur = x.clone();
        for l in 0..levels {
            if l > 0 {
                cur = maxpool2(&cur)?.0;
            }
            let out = self.encoder[l].forward_eval(&cur)?;
            cur = out.clone();
            enc_outputs.push(out);
        }
        let b_out = self.bottleneck.forward_eval(&enc_outputs[levels - 1])?;
        let mut dec_outputs: Vec<Option<Array4<T>>> = (0..levels - 1).map(|_| None).collect();
        for idx in 0..self.decoder.len() {
            let level = levels - 2 - idx;
            let (concat, _, _) = self.fuse(level, &enc_outputs, &dec_outputs, &b_out)?;
            let u = self.decoder[idx].conv0.forward(&concat)?;
            let v = relu(&u);
            dec_outputs[level] = Some(self.decoder[idx].conv1.forward(&v)?);
        }
        self.head
            .forward(dec_outputs[0].as_ref().expect("level-0 stage always runs"))
    }

    /// Builds the fused skip tensor for a decoder stage, in shallow-to-deep
    /// source order.
    fn fuse(
        &self,
        level: usize,
        enc_outputs: &[Array4<T>],
        dec_outputs: &[Option<Array4<T>>],
        b_out: &Array4<T>,
    ) -> Result<(Array4<T>, Vec<usize>, Vec<Vec<Array4<u8>>>)> {
        let levels = self.cfg.levels;
        let mut parts: Vec<Array4<T>> = Vec::new();
        let mut widths = Vec::new();
        let mut skip_pool_args = Vec::new();
        for j in 0..=level {
            let mut t = enc_outputs[j].clone();
            let mut chain = Vec::new();
            for _ in j..level {
                let (p, arg) = maxpool2(&t)?;
                chain.push(arg);
                t = p;
            }
            widths.push(t.dim().1);
            skip_pool_args.push(chain);
            parts.push(t);
        }
        for j in level + 1..levels - 1 {
            let src = dec_outputs[j].as_ref().expect("deeper stages run first");
            let up = bilinear_up(src, 1 << (j - level));
            widths.push(up.dim().1);
            parts.push(up);
        }
        let upb = bilinear_up(b_out, 1 << (levels - 1 - level));
        widths.push(upb.dim().1);
        parts.push(upb);
        let refs: Vec<&Array4<T>> = parts.iter().collect();
        Ok((concat_channels(&refs)?, widths, skip_pool_args))
    }

    /// Backpropagates a loss gradient at the output through the whole graph.
    /// Returns the gradient at the input and the flat parameter gradient
    /// vector, ordered exactly as [`Self::for_each_trainable`] walks.
    pub fn backward(&self, trace: &NetTrace<T>, grad_out: &Array4<T>) -> (Array4<T>, Vec<T>) {
        let levels = self.cfg.levels;
        let accum = |slot: &mut Option<Array4<T>>, g: Array4<T>| match slot {
            Some(a) => a.zip_mut_with(&g, |x, y| *x = *x + *y),
            None => *slot = Some(g),
        };

        let (head_g, head_w, head_b) = self.head.backward(&trace.head_in, grad_out);
        let mut grad_dec: Vec<Option<Array4<T>>> = (0..levels - 1).map(|_| None).collect();
        let mut grad_enc: Vec<Option<Array4<T>>> = (0..levels).map(|_| None).collect();
        let mut grad_bottleneck: Option<Array4<T>> = None;
        grad_dec[0] = Some(head_g);

        // Shallow stages consume deep ones, so walking levels upward fully
        // accumulates each stage's output gradient before it is used.
        let mut stage_grads: Vec<Option<StageGrads<T>>> =
            (0..levels - 1).map(|_| None).collect();
        for level in 0..=levels - 2 {
            let idx = levels - 2 - level;
            let st = &trace.stages[idx];
            debug_assert_eq!(st.level, level);
            let g_out = grad_dec[level].take().expect("stage gradient accumulated");
            let (g_concat, grads) = self.decoder[idx].backward(&st.cache, &g_out);
            stage_grads[idx] = Some(grads);
            let parts = split_channels(&g_concat, &st.widths).expect("widths match concat");
            let mut part_iter = parts.into_iter();
            for j in 0..=level {
                let mut g = part_iter.next().unwrap();
                for arg in st.skip_pool_args[j].iter().rev() {
                    g = maxpool2_backward(arg, &g);
                }
                accum(&mut grad_enc[j], g);
            }
            for j in level + 1..levels - 1 {
                let g = part_iter.next().unwrap();
                let (h, w) = (trace.in_h >> j, trace.in_w >> j);
                accum(&mut grad_dec[j], bilinear_up_backward(&g, h, w, 1 << (j - level)));
            }
            let g = part_iter.next().unwrap();
            let (h, w) = (trace.in_h >> (levels - 1), trace.in_w >> (levels - 1));
            accum(
                &mut grad_bottleneck,
                bilinear_up_backward(&g, h, w, 1 << (levels - 1 - level)),
            );
        }

        let (g_bin, bottleneck_grads) = self
            .bottleneck
            .backward(&trace.bottleneck, &grad_bottleneck.expect("stages fed bottleneck"));
        accum(&mut grad_enc[levels - 1], g_bin);

        let mut enc_grads: Vec<Option<BlockGrads<T>>> = (0..levels).map(|_| None).collect();
        let mut grad_input = None;
        for l in (0..levels).rev() {
            let g_out = grad_enc[l].take().expect("encoder gradient accumulated");
            let (g_in, grads) = self.encoder[l].backward(&trace.enc[l], &g_out);
            enc_grads[l] = Some(grads);
            if l > 0 {
                accum(
                    &mut grad_enc[l - 1],
                    maxpool2_backward(&trace.enc_pool_args[l - 1], &g_in),
                );
            } else {
                grad_input = Some(g_in);
            }
        }

        let mut flat = Vec::with_capacity(self.param_count());
        for g in enc_grads.iter().flatten() {
            DenoiseBlock::push_grads(g, &mut flat);
        }
        DenoiseBlock::push_grads(&bottleneck_grads, &mut flat);
        for g in stage_grads.iter().flatten() {
            DecoderStage::push_grads(g, &mut flat);
        }
        flat.extend(head_w.iter().copied());
        flat.extend(head_b.iter().copied());
        debug_assert_eq!(flat.len(), self.param_count());
        (grad_input.expect("level-0 encoder reached"), flat)
    }

    /// Walks every trainable tensor in declaration order: encoder blocks
    /// shallow to deep, bottleneck, decoder stages deep to shallow, head.
    /// Within a block: alignment conv, then each stack conv followed by its
    /// batch-norm scale and shift.
    pub fn for_each_trainable(&self, f: &mut dyn FnMut(&[T])) {
        for block in &self.encoder {
            block.visit(f, false);
        }
        self.bottleneck.visit(f, false);
        for stage in &self.decoder {
            stage.visit(f);
        }
        f(self.head.weight.as_slice().unwrap());
        f(self.head.bias.as_slice().unwrap());
    }

    pub fn for_each_trainable_mut(&mut self, f: &mut dyn FnMut(&mut [T])) {
        for block in &mut self.encoder {
            block.visit_mut(f, false);
        }
        self.bottleneck.visit_mut(f, false);
        for stage in &mut self.decoder {
            stage.visit_mut(f);
        }
        f(self.head.weight.as_slice_mut().unwrap());
        f(self.head.bias.as_slice_mut().unwrap());
    }

    /// Like the trainable walk but with batch-norm running statistics
    /// appended after each norm's scale/shift; this is the checkpoint order.
    pub fn for_each_state(&self, f: &mut dyn FnMut(&[T])) {
        for block in &self.encoder {
            block.visit(f, true);
        }
        self.bottleneck.visit(f, true);
        for stage in &self.decoder {
            stage.visit(f);
        }
        f(self.head.weight.as_slice().unwrap());
        f(self.head.bias.as_slice().unwrap());
    }

    pub fn for_each_state_mut(&mut self, f: &mut dyn FnMut(&mut [T])) {
        for block in &mut self.encoder {
            block.visit_mut(f, true);
        }
        self.bottleneck.visit_mut(f, true);
        for stage in &mut self.decoder {
            stage.visit_mut(f);
        }
        f(self.head.weight.as_slice_mut().unwrap());
        f(self.head.bias.as_slice_mut().unwrap());
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_trainable(&mut |s| n += s.len());
        n
    }

    pub fn state_count(&self) -> usize {
        let mut n = 0;
        self.for_each_state(&mut |s| n += s.len());
        n
    }

    /// Adds `delta` to the idx-th trainable scalar (visitor order); used by
    /// the finite-difference gradient checker.
    pub fn perturb_trainable(&mut self, idx: usize, delta: T) {
        let mut seen = 0usize;
        let mut done = false;
        self.for_each_trainable_mut(&mut |s| {
            if !done && idx < seen + s.len() {
                s[idx - seen] = s[idx - seen] + delta;
                done = true;
            }
            seen += s.len();
        });
        assert!(done, "parameter index {idx} out of range");
    }
}

/// Static shape of one convolution inside the network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvShape {
    pub stage: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub height: usize,
    pub width: usize,
    /// True for the 1x1 channel-alignment convolutions inside denoising
    /// blocks (the output head is not an alignment).
    pub is_alignment: bool,
}

impl ConvShape {
    /// Multiply-accumulate operations for a single sample through this
    /// convolution.
    pub fn macs(&self) -> u64 {
        (self.height * self.width) as u64
            * (self.c_in * self.c_out) as u64
            * (self.kernel * self.kernel) as u64
    }
}

/// Enumerates every convolution the network would run on an input of the
/// given spatial size, in forward order. This is the ground truth the
/// complexity accounting sums over.
pub fn conv_shapes(cfg: &NetConfig, h0: usize, w0: usize) -> Result<Vec<ConvShape>> {
    cfg.validate()?;
    let d = cfg.spatial_divisor();
    if h0 % d != 0 || w0 % d != 0 {
        return Err(Error::Shape(format!(
            "input {h0}x{w0} is not divisible by {d}"
        )));
    }
    let levels = cfg.levels;
    let mut out = Vec::new();
    let push_block = |out: &mut Vec<ConvShape>, stage: String, c_in: usize, width: usize, h: usize, w: usize| {
        out.push(ConvShape {
            stage: stage.clone(),
            c_in,
            c_out: width,
            kernel: 1,
            height: h,
            width: w,
            is_alignment: true,
        });
        for _ in 0..cfg.convs_per_block {
            out.push(ConvShape {
                stage: stage.clone(),
                c_in: width,
                c_out: width,
                kernel: cfg.kernel,
                height: h,
                width: w,
                is_alignment: false,
            });
        }
    };
    for l in 0..levels {
        let c_in = if l == 0 { PLANE_CHANNELS } else { cfg.width(l - 1) };
        push_block(
            &mut out,
            format!("encoder{l}"),
            c_in,
            cfg.width(l),
            h0 >> l,
            w0 >> l,
        );
    }
    push_block(
        &mut out,
        "bottleneck".to_string(),
        cfg.width(levels - 1),
        cfg.bottleneck_width(),
        h0 >> (levels - 1),
        w0 >> (levels - 1),
    );
    for l in (0..=levels - 2).rev() {
        let stage = format!("decoder{l}");
        let (h, w) = (h0 >> l, w0 >> l);
        out.push(ConvShape {
            stage: stage.clone(),
            c_in: cfg.concat_width(),
            c_out: cfg.width(l),
            kernel: cfg.kernel,
            height: h,
            width: w,
            is_alignment: false,
        });
        out.push(ConvShape {
            stage,
            c_in: cfg.width(l),
            c_out: cfg.width(l),
            kernel: cfg.kernel,
            height: h,
            width: w,
            is_alignment: false,
        });
    }
    out.push(ConvShape {
        stage: "head".to_string(),
        c_in: cfg.base_filters,
        c_out: PLANE_CHANNELS,
        kernel: 1,
        height: h0,
        width: w0,
        is_alignment: false,
    });
    Ok(out)
}
