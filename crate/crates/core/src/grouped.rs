//! Structured-sparse primitives: block-diagonal (grouped) linear maps, grouped
//! 1-D convolution over the sequence axis, and the gated linear unit.
//!
//! A grouped weight with `G` groups mapping `b` inputs to `c` outputs stores
//! only the `G` diagonal blocks of shape `(b/G) × (c/G)`. Output column block
//! `g` reads only input block `g`, so the product never multiplies by the
//! implicit zeros of the dense block-diagonal matrix.
//!
//! Channels are assigned to groups in contiguous index blocks: group `g` owns
//! inputs `[g·b/G, (g+1)·b/G)` and outputs `[g·c/G, (g+1)·c/G)`.

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, sigmoid};
use crate::tensor::graph::Op;
use crate::tensor::{Graph, Tensor, Var};

/// Block-diagonal weight `W⁽ᴳ⁾` stored as `G` dense blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedWeight {
    groups: usize,
    in_features: usize,
    out_features: usize,
    /// Shape `[G, b/G, c/G]`.
    blocks: Tensor,
    bias: Option<Tensor>,
}

impl GroupedWeight {
    pub fn new(blocks: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let s = blocks.shape();
        if s.len() != 3 {
            return Err(Error::Config(format!(
                "grouped weight blocks must be [groups, in/groups, out/groups], got {s:?}"
            )));
        }
        let (groups, in_features, out_features) = (s[0], s[0] * s[1], s[0] * s[2]);
        if let Some(b) = &bias {
            if b.shape() != [out_features] {
                return Err(Error::shape("grouped bias", b.shape(), &[out_features]));
            }
        }
        Ok(GroupedWeight {
            groups,
            in_features,
            out_features,
            blocks,
            bias,
        })
    }

    /// Validate the grouping before any storage exists.
    pub fn check_dims(groups: usize, in_features: usize, out_features: usize) -> Result<()> {
        if groups == 0 || in_features % groups != 0 || out_features % groups != 0 {
            return Err(Error::Config(format!(
                "{groups} groups must divide both in_features {in_features} and out_features {out_features}"
            )));
        }
        Ok(())
    }

    /// Build from a per-coordinate generator `f(group, row, col)`.
    pub fn from_fn(
        groups: usize,
        in_features: usize,
        out_features: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        Self::check_dims(groups, in_features, out_features)?;
        let (bg, cg) = (in_features / groups, out_features / groups);
        let blocks = Tensor::from_fn(&[groups, bg, cg], |i| {
            let g = i / (bg * cg);
            let r = (i / cg) % bg;
            f(g, r, i % cg)
        });
        Self::new(blocks, None)
    }

    pub fn with_bias(mut self, bias: Tensor) -> Result<Self> {
        if bias.shape() != [self.out_features] {
            return Err(Error::shape("grouped bias", bias.shape(), &[self.out_features]));
        }
        self.bias = Some(bias);
        Ok(self)
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    pub fn blocks(&self) -> &Tensor {
        &self.blocks
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    /// Stored weight parameters, `b·c/G`.
    pub fn weight_params(&self) -> usize {
        self.blocks.numel()
    }

    pub fn param_count(&self) -> usize {
        self.weight_params() + self.bias.as_ref().map_or(0, Tensor::numel)
    }

    /// The equivalent dense `b × c` block-diagonal matrix.
    pub fn expand_dense(&self) -> Tensor {
        let (b, c, g) = (self.in_features, self.out_features, self.groups);
        let (bg, cg) = (b / g, c / g);
        let mut out = vec![0.0; b * c];
        let blk = self.blocks.data();
        for grp in 0..g {
            for r in 0..bg {
                for q in 0..cg {
                    out[(grp * bg + r) * c + grp * cg + q] = blk[(grp * bg + r) * cg + q];
                }
            }
        }
        Tensor::from_parts(vec![b, c], out)
    }
}

/// Grouped 1-D convolution weight: `channels / group_size` groups, each a
/// `kernel × group_size × group_size` filter bank.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeight {
    kernel: usize,
    group_size: usize,
    channels: usize,
    /// Shape `[channels/group_size, kernel, group_size(in), group_size(out)]`.
    weight: Tensor,
    bias: Option<Tensor>,
}

impl ConvWeight {
    pub fn check_dims(kernel: usize, group_size: usize, channels: usize) -> Result<()> {
        if kernel == 0 || kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "convolution kernel size must be odd, got {kernel}"
            )));
        }
        if group_size == 0 || channels % group_size != 0 {
            return Err(Error::Config(format!(
                "convolution group size {group_size} must divide channels {channels}"
            )));
        }
        Ok(())
    }

    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 4 || s[2] != s[3] {
            return Err(Error::Config(format!(
                "conv weight must be [groups, kernel, group_size, group_size], got {s:?}"
            )));
        }
        let (kernel, group_size, channels) = (s[1], s[2], s[0] * s[2]);
        Self::check_dims(kernel, group_size, channels)?;
        if let Some(b) = &bias {
            if b.shape() != [channels] {
                return Err(Error::shape("conv bias", b.shape(), &[channels]));
            }
        }
        Ok(ConvWeight {
            kernel,
            group_size,
            channels,
            weight,
            bias,
        })
    }

    /// Build from `f(group, tap, in_channel, out_channel)` with in/out local to the group.
    pub fn from_fn(
        kernel: usize,
        group_size: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Result<Self> {
        Self::check_dims(kernel, group_size, channels)?;
        let s = group_size;
        let w = Tensor::from_fn(&[channels / s, kernel, s, s], |i| {
            let o = i % s;
            let inp = (i / s) % s;
            let tap = (i / (s * s)) % kernel;
            let g = i / (s * s * kernel);
            f(g, tap, inp, o)
        });
        Self::new(w, None)
    }

    pub fn with_bias(mut self, bias: Tensor) -> Result<Self> {
        if bias.shape() != [self.channels] {
            return Err(Error::shape("conv bias", bias.shape(), &[self.channels]));
        }
        self.bias = Some(bias);
        Ok(self)
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    /// `k·s·d` kernel parameters.
    pub fn weight_params(&self) -> usize {
        self.weight.numel()
    }

    pub fn param_count(&self) -> usize {
        self.weight_params() + self.bias.as_ref().map_or(0, Tensor::numel)
    }
}

// ---------------------------------------------------------------------------
// kernels

fn grouped_linear_forward(x: &[f64], blocks: &[f64], [groups, bg, cg]: [usize; 3]) -> Vec<f64> {
    let (b, c) = (groups * bg, groups * cg);
    let rows = x.len() / b;
    let mut out = vec![0.0; rows * c];
    for r in 0..rows {
        for g in 0..groups {
            let xin = &x[r * b + g * bg..][..bg];
            let dst = &mut out[r * c + g * cg..][..cg];
            let blk = &blocks[g * bg * cg..][..bg * cg];
            for (p, &xv) in xin.iter().enumerate() {
                for (o, &w) in dst.iter_mut().zip(&blk[p * cg..(p + 1) * cg]) {
                    *o += xv * w;
                }
            }
        }
    }
    out
}

pub(crate) fn grouped_linear_backward(
    dout: &[f64],
    x: &[f64],
    blocks: &[f64],
    block_shape: &[usize],
    groups: usize,
) -> (Vec<f64>, Vec<f64>) {
    let (bg, cg) = (block_shape[1], block_shape[2]);
    let (b, c) = (groups * bg, groups * cg);
    let rows = x.len() / b;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; blocks.len()];
    for r in 0..rows {
        for g in 0..groups {
            let gout = &dout[r * c + g * cg..][..cg];
            let xin = &x[r * b + g * bg..][..bg];
            let blk = &blocks[g * bg * cg..][..bg * cg];
            let dblk = &mut dw[g * bg * cg..][..bg * cg];
            for p in 0..bg {
                let wrow = &blk[p * cg..(p + 1) * cg];
                let mut acc = 0.0;
                for (gv, wv) in gout.iter().zip(wrow) {
                    acc += gv * wv;
                }
                dx[r * b + g * bg + p] += acc;
                let xv = xin[p];
                for (d, gv) in dblk[p * cg..(p + 1) * cg].iter_mut().zip(gout) {
                    *d += xv * gv;
                }
            }
        }
    }
    (dx, dw)
}

fn conv_forward(
    x: &[f64],
    weight: &[f64],
    [batch, seq, d]: [usize; 3],
    kernel: usize,
    s: usize,
    keep: Option<&[bool]>,
) -> Vec<f64> {
    let pad = (kernel - 1) / 2;
    let groups = d / s;
    let live = |b: usize, t: usize| keep.is_none_or(|k| k[b * seq + t]);
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for t in 0..seq {
            if !live(b, t) {
                continue;
            }
            let dst_row = (b * seq + t) * d;
            for tap in 0..kernel {
                let Some(src) = (t + tap).checked_sub(pad).filter(|&p| p < seq) else {
                    continue;
                };
                if !live(b, src) {
                    continue;
                }
                let src_row = (b * seq + src) * d;
                for g in 0..groups {
                    let wbase = (g * kernel + tap) * s * s;
                    for i in 0..s {
                        let xv = x[src_row + g * s + i];
                        let wrow = &weight[wbase + i * s..][..s];
                        let dst = &mut out[dst_row + g * s..][..s];
                        for (o, &w) in dst.iter_mut().zip(wrow) {
                            *o += xv * w;
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn grouped_conv1d_backward(
    dout: &[f64],
    x: &[f64],
    weight: &[f64],
    x_shape: &[usize],
    kernel: usize,
    s: usize,
    keep: Option<&[bool]>,
) -> (Vec<f64>, Vec<f64>) {
    let (batch, seq, d) = (x_shape[0], x_shape[1], x_shape[2]);
    let pad = (kernel - 1) / 2;
    let groups = d / s;
    let live = |b: usize, t: usize| keep.is_none_or(|k| k[b * seq + t]);
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; weight.len()];
    for b in 0..batch {
        for t in 0..seq {
            if !live(b, t) {
                continue;
            }
            let out_row = (b * seq + t) * d;
            for tap in 0..kernel {
                let Some(src) = (t + tap).checked_sub(pad).filter(|&p| p < seq) else {
                    continue;
                };
                if !live(b, src) {
                    continue;
                }
                let src_row = (b * seq + src) * d;
                for g in 0..groups {
                    let wbase = (g * kernel + tap) * s * s;
                    let gout = &dout[out_row + g * s..][..s];
                    for i in 0..s {
                        let wrow = &weight[wbase + i * s..][..s];
                        let mut acc = 0.0;
                        for (gv, wv) in gout.iter().zip(wrow) {
                            acc += gv * wv;
                        }
                        dx[src_row + g * s + i] += acc;
                        let xv = x[src_row + g * s + i];
                        for (dwv, gv) in dw[wbase + i * s..][..s].iter_mut().zip(gout) {
                            *dwv += xv * gv;
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

fn glu_forward(x: &[f64], width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = Vec::with_capacity(x.len() / 2);
    for row in x.chunks_exact(width) {
        let (a, gate) = row.split_at(half);
        out.extend(a.iter().zip(gate).map(|(a, b)| a * sigmoid(*b)));
    }
    out
}

pub(crate) fn glu_backward(dout: &[f64], x: &[f64], width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut dx = vec![0.0; x.len()];
    for ((row, drow), g) in x
        .chunks_exact(width)
        .zip(dx.chunks_exact_mut(width))
        .zip(dout.chunks_exact(half))
    {
        for j in 0..half {
            let (a, b) = (row[j], row[half + j]);
            let s = sigmoid(b);
            drow[j] = g[j] * s;
            drow[half + j] = g[j] * a * s * (1.0 - s);
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// tensor-level API

/// `h[a×b] · W⁽ᴳ⁾ (+ bias)` computed block by block.
pub fn grouped_linear(h: &Tensor, w: &GroupedWeight) -> Result<Tensor> {
    if h.last_dim() != w.in_features {
        return Err(Error::shape("grouped_linear", h.shape(), &[w.in_features, w.out_features]));
    }
    let bs = w.blocks.shape();
    let mut out = grouped_linear_forward(h.data(), w.blocks.data(), [bs[0], bs[1], bs[2]]);
    if let Some(bias) = &w.bias {
        for row in out.chunks_exact_mut(w.out_features) {
            for (o, b) in row.iter_mut().zip(bias.data()) {
                *o += b;
            }
        }
    }
    let mut shape = h.shape().to_vec();
    *shape.last_mut().unwrap() = w.out_features;
    Ok(Tensor::from_parts(shape, out))
}

pub fn expand_dense(w: &GroupedWeight) -> Tensor {
    w.expand_dense()
}

/// Grouped "same"-padded convolution of `x[batch×L×d]` along the sequence axis.
///
/// `mask[b·L + t]` marks real tokens; padded positions are zeroed on the input
/// side and on the output.
pub fn grouped_conv1d(x: &Tensor, w: &ConvWeight, mask: Option<&[bool]>) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 || s[2] != w.channels {
        return Err(Error::shape("grouped_conv1d", s, &[w.channels]));
    }
    if let Some(m) = mask {
        if m.len() != s[0] * s[1] {
            return Err(Error::shape("grouped_conv1d mask", s, &[m.len()]));
        }
    }
    let mut out = conv_forward(x.data(), w.weight.data(), [s[0], s[1], s[2]], w.kernel, w.group_size, mask);
    if let Some(bias) = &w.bias {
        for (t, row) in out.chunks_exact_mut(w.channels).enumerate() {
            if mask.is_none_or(|m| m[t]) {
                for (o, b) in row.iter_mut().zip(bias.data()) {
                    *o += b;
                }
            }
        }
    }
    Ok(Tensor::from_parts(s.to_vec(), out))
}

/// `first_half ⊙ σ(second_half)` over the last axis.
pub fn glu(x: &Tensor) -> Result<Tensor> {
    let w = x.last_dim();
    if w % 2 != 0 {
        return Err(Error::shape("glu", x.shape(), &[w / 2]));
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = w / 2;
    Ok(Tensor::from_parts(shape, glu_forward(x.data(), w)))
}

pub fn swish(x: &Tensor) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| kernels::swish(v)).collect())
}

// ---------------------------------------------------------------------------
// graph ops

impl Graph {
    /// Grouped linear map; `blocks` has shape `[G, b/G, c/G]`.
    pub fn grouped_linear(&mut self, x: Var, blocks: Var) -> Result<Var> {
        let bs = self.shape(blocks).to_vec();
        if bs.len() != 3 || self.value(x).last_dim() != bs[0] * bs[1] {
            return Err(Error::shape("grouped_linear", self.shape(x), &bs));
        }
        let out = grouped_linear_forward(self.raw(x), self.raw(blocks), [bs[0], bs[1], bs[2]]);
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = bs[0] * bs[2];
        let rg = self.requires(&[x, blocks]);
        self.push(
            "grouped_linear",
            shape,
            out,
            rg,
            Op::GroupedLinear {
                x,
                blocks,
                groups: bs[0],
            },
        )
    }

    /// Grouped convolution (no bias) of `x[batch×L×d]` with
    /// `weight[d/s, k, s, s]`. Masked positions are zeroed on input and output.
    pub fn grouped_conv1d(&mut self, x: Var, weight: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[2] != ws[3] || ws[0] * ws[2] != xs[2] {
            return Err(Error::shape("grouped_conv1d", &xs, &ws));
        }
        let (kernel, s) = (ws[1], ws[2]);
        ConvWeight::check_dims(kernel, s, xs[2])?;
        if let Some(m) = mask {
            if m.len() != xs[0] * xs[1] {
                return Err(Error::shape("grouped_conv1d mask", &xs, &[m.len()]));
            }
        }
        let out = conv_forward(self.raw(x), self.raw(weight), [xs[0], xs[1], xs[2]], kernel, s, mask);
        let rg = self.requires(&[x, weight]);
        self.push(
            "grouped_conv1d",
            xs,
            out,
            rg,
            Op::GroupedConv {
                x,
                weight,
                kernel,
                group_size: s,
                keep: mask.map(<[bool]>::to_vec),
            },
        )
    }

    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let w = self.value(x).last_dim();
        if w % 2 != 0 {
            return Err(Error::shape("glu", self.shape(x), &[w / 2]));
        }
        let out = glu_forward(self.raw(x), w);
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = w / 2;
        let rg = self.requires(&[x]);
        self.push("glu", shape, out, rg, Op::Glu { x })
    }
}
