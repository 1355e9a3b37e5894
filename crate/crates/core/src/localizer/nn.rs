//! Small convolutional networks with hand-written backward passes.
//!
//! Parameters live in one flat `f32` vector; layers hold offsets into it.
//! Feature maps are planar (CHW). Convolutions are "same"-padded, stride 1,
//! and run as im2col followed by a single sgemm.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{LoocError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub offset: usize,
}

impl ConvSpec {
    fn kdim(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn weight_len(&self) -> usize {
        self.cout * self.kdim()
    }

    fn param_len(&self) -> usize {
        self.weight_len() + self.cout
    }

    fn init(&self, params: &mut [f32], rng: &mut impl Rng) {
        self.init_scaled(params, rng, 2.0, 0.0);
    }

    /// Normal weights with variance `gain / fan_in` and a constant bias.
    fn init_scaled(&self, params: &mut [f32], rng: &mut impl Rng, gain: f64, bias: f32) {
        let std = (gain / self.kdim() as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let w = &mut params[self.offset..self.offset + self.weight_len()];
        for v in w.iter_mut() {
            *v = normal.sample(rng) as f32;
        }
        let b = &mut params[self.offset + self.weight_len()..self.offset + self.param_len()];
        b.fill(bias);
    }
}

/// `c = a * b + beta * c` where `a` is m x k and `b` is k x n, each given
/// by (row stride, column stride).
#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: strides and extents describe sub-ranges of the given slices,
    // checked by the callers' shape bookkeeping (and debug asserts).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(input: &[f32], c: usize, h: usize, w: usize, k: usize) -> Vec<f32> {
    let hw = h * w;
    let pad = (k / 2) as isize;
    let mut col = vec![0.0f32; c * k * k * hw];
    for ch in 0..c {
        let plane = &input[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let sx0 = (x_lo as isize + dx) as usize;
                    dst[y * w + x_lo..y * w + x_hi].copy_from_slice(&src_row[sx0..sx0 + (x_hi - x_lo)]);
                }
            }
        }
    }
    col
}

fn col2im(col: &[f32], c: usize, h: usize, w: usize, k: usize) -> Vec<f32> {
    let hw = h * w;
    let pad = (k / 2) as isize;
    let mut out = vec![0.0f32; c * hw];
    for ch in 0..c {
        let plane = &mut out[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sx0 = (x_lo as isize + dx) as usize;
                    let dst = &mut plane[sy as usize * w + sx0..sy as usize * w + sx0 + (x_hi - x_lo)];
                    for (d, s) in dst.iter_mut().zip(&src[y * w + x_lo..y * w + x_hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
    out
}

/// Activations kept for the backward pass of one convolution.
#[derive(Debug, Clone)]
pub(crate) struct ConvTape {
    /// im2col matrix (or the raw input for 1x1 kernels).
    cols: Vec<f32>,
    /// Output after the optional ReLU.
    out: Vec<f32>,
    relu: bool,
}

fn conv_forward(params: &[f32], spec: &ConvSpec, input: &[f32], h: usize, w: usize, relu: bool) -> (Vec<f32>, Vec<f32>) {
    let hw = h * w;
    debug_assert_eq!(input.len(), spec.cin * hw);
    let cols = if spec.k == 1 {
        input.to_vec()
    } else {
        im2col(input, spec.cin, h, w, spec.k)
    };
    let kd = spec.kdim();
    let weights = &params[spec.offset..spec.offset + spec.weight_len()];
    let bias = &params[spec.offset + spec.weight_len()..spec.offset + spec.param_len()];
    let mut out = vec![0.0f32; spec.cout * hw];
    for (o, &b) in bias.iter().enumerate() {
        out[o * hw..(o + 1) * hw].fill(b);
    }
    gemm(spec.cout, kd, hw, weights, (kd, 1), &cols, (hw, 1), 1.0, &mut out);
    if relu {
        for v in out.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
    (out, cols)
}

/// Accumulates parameter gradients into `grad` and returns the input
/// gradient. `dout` is the gradient w.r.t. the (post-ReLU) output.
fn conv_backward(
    params: &[f32],
    spec: &ConvSpec,
    tape: &ConvTape,
    mut dout: Vec<f32>,
    h: usize,
    w: usize,
    grad: &mut [f32],
    need_input_grad: bool,
) -> Vec<f32> {
    let hw = h * w;
    if tape.relu {
        for (d, &o) in dout.iter_mut().zip(&tape.out) {
            if o <= 0.0 {
                *d = 0.0;
            }
        }
    }
    let kd = spec.kdim();
    let (gw, gb) = grad[spec.offset..spec.offset + spec.param_len()].split_at_mut(spec.weight_len());
    gemm(spec.cout, hw, kd, &dout, (hw, 1), &tape.cols, (1, hw), 1.0, gw);
    for (o, g) in gb.iter_mut().enumerate() {
        *g += dout[o * hw..(o + 1) * hw].iter().sum::<f32>();
    }
    if !need_input_grad {
        return Vec::new();
    }
    let weights = &params[spec.offset..spec.offset + spec.weight_len()];
    let mut dcols = vec![0.0f32; kd * hw];
    gemm(kd, spec.cout, hw, weights, (1, kd), &dout, (hw, 1), 0.0, &mut dcols);
    if spec.k == 1 {
        dcols
    } else {
        col2im(&dcols, spec.cin, h, w, spec.k)
    }
}

fn maxpool2(input: &[f32], c: usize, h: usize, w: usize) -> (Vec<f32>, Vec<u32>, usize, usize) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0f32; c * ho * wo];
    let mut arg = vec![0u32; c * ho * wo];
    for ch in 0..c {
        let plane = &input[ch * h * w..];
        for y in 0..ho {
            for x in 0..wo {
                let mut best = (2 * y) * w + 2 * x;
                for cand in [best + 1, best + w, best + w + 1] {
                    if plane[cand] > plane[best] {
                        best = cand;
                    }
                }
                let o = ch * ho * wo + y * wo + x;
                out[o] = plane[best];
                arg[o] = best as u32;
            }
        }
    }
    (out, arg, ho, wo)
}

fn maxpool2_backward(dout: &[f32], arg: &[u32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; c * h * w];
    let per = dout.len() / c.max(1);
    for ch in 0..c {
        for i in 0..per {
            dx[ch * h * w + arg[ch * per + i] as usize] += dout[ch * per + i];
        }
    }
    dx
}

/// Nearest-neighbour resize from `hs x ws` to `ht x wt` (target at most
/// twice the source plus one in each direction).
fn upsample(input: &[f32], c: usize, hs: usize, ws: usize, ht: usize, wt: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; c * ht * wt];
    for ch in 0..c {
        for y in 0..ht {
            let sy = (y / 2).min(hs - 1);
            for x in 0..wt {
                let sx = (x / 2).min(ws - 1);
                out[(ch * ht + y) * wt + x] = input[(ch * hs + sy) * ws + sx];
            }
        }
    }
    out
}

fn upsample_backward(dout: &[f32], c: usize, hs: usize, ws: usize, ht: usize, wt: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; c * hs * ws];
    for ch in 0..c {
        for y in 0..ht {
            let sy = (y / 2).min(hs - 1);
            for x in 0..wt {
                let sx = (x / 2).min(ws - 1);
                dx[(ch * hs + sy) * ws + sx] += dout[(ch * ht + y) * wt + x];
            }
        }
    }
    dx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    /// Number of 2x down-sampling stages.
    pub depth: usize,
    pub convs_per_stage: usize,
    pub max_channels: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            in_channels: 1,
            base_channels: 32,
            depth: 4,
            convs_per_stage: 2,
            max_channels: 256,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 || self.convs_per_stage == 0 {
            return Err(LoocError::Config("network channels and convs_per_stage must be >= 1".into()));
        }
        if self.depth > 8 {
            return Err(LoocError::Config("network depth must be <= 8".into()));
        }
        Ok(())
    }

    fn width_at(&self, level: usize) -> usize {
        (self.base_channels << level).min(self.max_channels.max(self.base_channels))
    }

    /// Smallest input side the encoder accepts.
    pub fn min_side(&self) -> usize {
        1 << self.depth
    }
}

struct ParamAlloc {
    next: usize,
}

impl ParamAlloc {
    fn conv(&mut self, cin: usize, cout: usize, k: usize) -> ConvSpec {
        let spec = ConvSpec {
            cin,
            cout,
            k,
            offset: self.next,
        };
        self.next += spec.param_len();
        spec
    }
}

/// Encoder shared by both networks: per level, optional 2x max-pool then
/// `convs_per_stage` conv+ReLU layers.
#[derive(Debug, Clone, PartialEq)]
struct Encoder {
    levels: Vec<Vec<ConvSpec>>,
}

struct EncoderTape {
    convs: Vec<Vec<ConvTape>>,
    pools: Vec<Vec<u32>>,
    sizes: Vec<(usize, usize)>,
}

impl EncoderTape {
    /// Pooling choices and ReLU on/off pattern; fixed within one linear piece.
    #[cfg(test)]
    fn pattern(&self) -> Vec<u32> {
        let mut p: Vec<u32> = self.pools.iter().flatten().copied().collect();
        for t in self.convs.iter().flatten() {
            p.extend(t.out.iter().map(|&v| (v > 0.0) as u32));
        }
        p
    }
}

impl Encoder {
    fn new(cfg: &NetConfig, alloc: &mut ParamAlloc) -> Self {
        let mut levels = Vec::new();
        let mut cin = cfg.in_channels;
        for l in 0..=cfg.depth {
            let cout = cfg.width_at(l);
            let mut convs = Vec::new();
            for _ in 0..cfg.convs_per_stage {
                convs.push(alloc.conv(cin, cout, 3));
                cin = cout;
            }
            levels.push(convs);
        }
        Encoder { levels }
    }

    fn out_channels(&self, level: usize) -> usize {
        self.levels[level].last().expect("non-empty level").cout
    }

    /// Returns the output of every level.
    fn forward(&self, params: &[f32], input: &[f32], h: usize, w: usize, tape: Option<&mut EncoderTape>) -> Vec<(Vec<f32>, usize, usize)> {
        let mut outs = Vec::with_capacity(self.levels.len());
        let mut x = input.to_vec();
        let (mut ch, mut cw) = (h, w);
        let mut cin = self.levels[0][0].cin;
        let mut tape = tape;
        for (l, convs) in self.levels.iter().enumerate() {
            if l > 0 {
                let (y, arg, ho, wo) = maxpool2(&x, cin, ch, cw);
                x = y;
                ch = ho;
                cw = wo;
                if let Some(t) = tape.as_deref_mut() {
                    t.pools.push(arg);
                }
            }
            let mut level_tape = Vec::new();
            for spec in convs {
                let (y, cols) = conv_forward(params, spec, &x, ch, cw, true);
                if tape.is_some() {
                    level_tape.push(ConvTape {
                        cols,
                        out: y.clone(),
                        relu: true,
                    });
                }
                x = y;
                cin = spec.cout;
            }
            if let Some(t) = tape.as_deref_mut() {
                t.convs.push(level_tape);
                t.sizes.push((ch, cw));
            }
            outs.push((x.clone(), ch, cw));
        }
        outs
    }

    /// `douts[l]` is the gradient arriving at the output of level `l`.
    fn backward(&self, params: &[f32], tape: &EncoderTape, mut douts: Vec<Vec<f32>>, grad: &mut [f32]) {
        for l in (0..self.levels.len()).rev() {
            let (h, w) = tape.sizes[l];
            let mut d = std::mem::take(&mut douts[l]);
            for (i, spec) in self.levels[l].iter().enumerate().rev() {
                let need = i > 0 || l > 0;
                d = conv_backward(params, spec, &tape.convs[l][i], d, h, w, grad, need);
            }
            if l > 0 {
                let (hp, wp) = tape.sizes[l - 1];
                let cin = self.levels[l][0].cin;
                let dx = maxpool2_backward(&d, &tape.pools[l - 1], cin, hp, wp);
                let below = &mut douts[l - 1];
                if below.is_empty() {
                    *below = dx;
                } else {
                    for (a, b) in below.iter_mut().zip(&dx) {
                        *a += b;
                    }
                }
            }
        }
    }

    fn init(&self, params: &mut [f32], rng: &mut impl Rng) {
        for spec in self.levels.iter().flatten() {
            spec.init(params, rng);
        }
    }
}

/// Initial foreground probability of the localizer head.
const HEAD_PRIOR: f64 = 0.01;

/// Encoder-decoder producing one logit per input pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct UNet {
    pub config: NetConfig,
    encoder: Encoder,
    /// `decoder[l]` upsamples from level `l + 1` and fuses the level-`l` skip.
    decoder: Vec<Vec<ConvSpec>>,
    head: ConvSpec,
    n_params: usize,
}

pub(crate) struct UNetTape {
    enc: EncoderTape,
    enc_channels: Vec<usize>,
    dec: Vec<Vec<ConvTape>>,
    head: ConvTape,
    h: usize,
    w: usize,
}

impl UNet {
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let mut alloc = ParamAlloc { next: 0 };
        let encoder = Encoder::new(&config, &mut alloc);
        let mut decoder = vec![Vec::new(); config.depth];
        for l in (0..config.depth).rev() {
            let up_ch = if l + 1 == config.depth {
                encoder.out_channels(l + 1)
            } else {
                config.width_at(l + 1)
            };
            let skip = encoder.out_channels(l);
            let cout = config.width_at(l);
            let mut cin = up_ch + skip;
            for _ in 0..config.convs_per_stage {
                decoder[l].push(alloc.conv(cin, cout, 3));
                cin = cout;
            }
        }
        let top = if config.depth == 0 {
            encoder.out_channels(0)
        } else {
            config.width_at(0)
        };
        let head = alloc.conv(top, 1, 1);
        Ok(UNet {
            config,
            encoder,
            decoder,
            head,
            n_params: alloc.next,
        })
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn init_params(&self, rng: &mut impl Rng) -> Vec<f32> {
        let mut p = vec![0.0; self.n_params];
        self.encoder.init(&mut p, rng);
        for spec in self.decoder.iter().flatten() {
            spec.init(&mut p, rng);
        }
        // Start from a small foreground prior so that the first steps are
        // not dominated by false-positive blobs covering the whole image.
        let prior = HEAD_PRIOR;
        self.head.init_scaled(&mut p, rng, 1.0, (prior / (1.0 - prior)).ln() as f32);
        p
    }

    pub fn check_input(&self, channels: usize, h: usize, w: usize) -> Result<()> {
        if channels != self.config.in_channels {
            return Err(LoocError::Contract(format!(
                "network expects {} channels, got {channels}",
                self.config.in_channels
            )));
        }
        let min = self.config.min_side();
        if h < min || w < min {
            return Err(LoocError::Contract(format!(
                "input {h}x{w} smaller than the {min}x{min} minimum for depth {}",
                self.config.depth
            )));
        }
        Ok(())
    }

    fn run(&self, params: &[f32], input: &[f32], h: usize, w: usize, record: bool) -> (Vec<f32>, Option<UNetTape>) {
        let mut enc_tape = EncoderTape {
            convs: Vec::new(),
            pools: Vec::new(),
            sizes: Vec::new(),
        };
        let outs = self
            .encoder
            .forward(params, input, h, w, if record { Some(&mut enc_tape) } else { None });
        let enc_channels: Vec<usize> = (0..outs.len()).map(|l| self.encoder.out_channels(l)).collect();
        let depth = self.config.depth;
        let (mut x, mut xh, mut xw) = outs[depth].clone();
        let mut xc = enc_channels[depth];
        let mut dec_tapes: Vec<Vec<ConvTape>> = vec![Vec::new(); depth];
        for l in (0..depth).rev() {
            let (skip, sh, sw) = &outs[l];
            let mut cat = upsample(&x, xc, xh, xw, *sh, *sw);
            cat.extend_from_slice(skip);
            x = cat;
            xh = *sh;
            xw = *sw;
            for spec in &self.decoder[l] {
                let (y, cols) = conv_forward(params, spec, &x, xh, xw, true);
                if record {
                    dec_tapes[l].push(ConvTape {
                        cols,
                        out: y.clone(),
                        relu: true,
                    });
                }
                x = y;
                xc = spec.cout;
            }
        }
        let (logits, cols) = conv_forward(params, &self.head, &x, h, w, false);
        let tape = record.then(|| UNetTape {
            enc: enc_tape,
            enc_channels,
            dec: dec_tapes,
            head: ConvTape {
                cols,
                out: Vec::new(),
                relu: false,
            },
            h,
            w,
        });
        (logits, tape)
    }

    /// Logits in row-major order.
    pub fn forward(&self, params: &[f32], input_chw: &[f32], h: usize, w: usize) -> Vec<f32> {
        self.run(params, input_chw, h, w, false).0
    }

    pub(crate) fn forward_train(&self, params: &[f32], input_chw: &[f32], h: usize, w: usize) -> (Vec<f32>, UNetTape) {
        let (logits, tape) = self.run(params, input_chw, h, w, true);
        (logits, tape.expect("recorded"))
    }

    /// Gradient of the parameters given the gradient of the logits.
    pub(crate) fn backward(&self, params: &[f32], tape: &UNetTape, dlogits: Vec<f32>) -> Vec<f32> {
        let mut grad = vec![0.0f32; self.n_params];
        let depth = self.config.depth;
        let mut d = conv_backward(params, &self.head, &tape.head, dlogits, tape.h, tape.w, &mut grad, true);
        let mut enc_grads: Vec<Vec<f32>> = vec![Vec::new(); depth + 1];
        for l in 0..depth {
            let (h, w) = tape.enc.sizes[l];
            for (i, spec) in self.decoder[l].iter().enumerate().rev() {
                d = conv_backward(params, spec, &tape.dec[l][i], d, h, w, &mut grad, true);
            }
            let up_ch = self.decoder[l][0].cin - tape.enc_channels[l];
            let (du, dskip) = d.split_at(up_ch * h * w);
            enc_grads[l] = dskip.to_vec();
            let (hs, ws) = tape.enc.sizes[l + 1];
            d = upsample_backward(du, up_ch, hs, ws, h, w);
        }
        enc_grads[depth] = d;
        self.encoder.backward(params, &tape.enc, enc_grads, &mut grad);
        grad
    }
}

impl UNetTape {
    #[cfg(test)]
    fn pattern(&self) -> Vec<u32> {
        let mut p = self.enc.pattern();
        for t in self.dec.iter().flatten() {
            p.extend(t.out.iter().map(|&v| (v > 0.0) as u32));
        }
        p
    }
}

/// Count regressor: encoder, global average pooling, linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct GlanceNet {
    pub config: NetConfig,
    encoder: Encoder,
    linear_offset: usize,
    features: usize,
    n_params: usize,
}

pub(crate) struct GlanceTape {
    enc: EncoderTape,
    pooled: Vec<f32>,
    h: usize,
    w: usize,
}

impl GlanceNet {
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let mut alloc = ParamAlloc { next: 0 };
        let encoder = Encoder::new(&config, &mut alloc);
        let features = encoder.out_channels(config.depth);
        let linear_offset = alloc.next;
        Ok(GlanceNet {
            config,
            encoder,
            linear_offset,
            features,
            n_params: linear_offset + features + 1,
        })
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn init_params(&self, rng: &mut impl Rng, bias: f32) -> Vec<f32> {
        let mut p = vec![0.0; self.n_params];
        self.encoder.init(&mut p, rng);
        let std = (1.0 / self.features as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        for v in &mut p[self.linear_offset..self.linear_offset + self.features] {
            *v = normal.sample(rng) as f32;
        }
        p[self.linear_offset + self.features] = bias;
        p
    }

    fn run(&self, params: &[f32], input: &[f32], h: usize, w: usize, record: bool) -> (f32, Option<GlanceTape>) {
        let mut tape = EncoderTape {
            convs: Vec::new(),
            pools: Vec::new(),
            sizes: Vec::new(),
        };
        let outs = self
            .encoder
            .forward(params, input, h, w, if record { Some(&mut tape) } else { None });
        let (top, th, tw) = outs.last().expect("at least one level");
        let n = (th * tw) as f32;
        let pooled: Vec<f32> = top.chunks_exact(th * tw).map(|c| c.iter().sum::<f32>() / n).collect();
        let lin = &params[self.linear_offset..self.linear_offset + self.features];
        let out = pooled.iter().zip(lin).map(|(a, b)| a * b).sum::<f32>() + params[self.linear_offset + self.features];
        let tape = record.then(|| GlanceTape {
            enc: tape,
            pooled,
            h: *th,
            w: *tw,
        });
        (out, tape)
    }

    pub fn forward(&self, params: &[f32], input_chw: &[f32], h: usize, w: usize) -> f32 {
        self.run(params, input_chw, h, w, false).0
    }

    pub(crate) fn forward_train(&self, params: &[f32], input_chw: &[f32], h: usize, w: usize) -> (f32, GlanceTape) {
        let (y, t) = self.run(params, input_chw, h, w, true);
        (y, t.expect("recorded"))
    }

    pub(crate) fn backward(&self, params: &[f32], tape: &GlanceTape, dout: f32) -> Vec<f32> {
        let mut grad = vec![0.0f32; self.n_params];
        let lin = &params[self.linear_offset..self.linear_offset + self.features];
        for (g, &p) in grad[self.linear_offset..].iter_mut().zip(&tape.pooled) {
            *g = dout * p;
        }
        grad[self.linear_offset + self.features] = dout;
        let plane = tape.h * tape.w;
        let mut dtop = vec![0.0f32; self.features * plane];
        for (c, &wc) in lin.iter().enumerate() {
            dtop[c * plane..(c + 1) * plane].fill(dout * wc / plane as f32);
        }
        let mut douts = vec![Vec::new(); self.config.depth + 1];
        douts[self.config.depth] = dtop;
        // Earlier levels only receive gradient through pooling.
        for (l, d) in douts.iter_mut().enumerate().take(self.config.depth) {
            let (h, w) = tape.enc.sizes[l];
            *d = vec![0.0; self.encoder.out_channels(l) * h * w];
        }
        self.encoder.backward(params, &tape.enc, douts, &mut grad);
        grad
    }
}
