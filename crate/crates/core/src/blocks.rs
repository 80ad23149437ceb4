//! Composite network pieces: the per-branch depthwise-separable backbone,
//! the bottleneck projection into tokens, cross-branch fusion, the nested
//! residual block and the classifier head.

use crate::error::{Error, Result};
use crate::tensor::{
    avg_pool2d, batch_norm, conv2d, elementwise_add, relu, softmax_in_place, upsample_nearest,
    BatchNormParams, Tensor,
};

/// Weight and bias of a convolution (or a 1x1 convolution used as a
/// per-position affine map).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    /// `[C_out, C_in/groups, K_h, K_w]`.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvParams {
    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    fn forward(&self, x: &Tensor, stride: usize, padding: usize, groups: usize) -> Result<Tensor> {
        conv2d(
            x,
            &self.weight,
            Some(self.bias.data()),
            stride,
            padding,
            groups,
        )
    }
}

/// One depthwise-separable stage: dw 3x3 -> BN -> ReLU -> pw 1x1 -> BN -> ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparableBlock {
    /// `[C_in, 1, 3, 3]`.
    pub depthwise: ConvParams,
    pub bn1: BatchNormParams,
    /// `[C_out, C_in, 1, 1]`.
    pub pointwise: ConvParams,
    pub bn2: BatchNormParams,
    pub stride: usize,
}

impl SeparableBlock {
    pub fn in_channels(&self) -> usize {
        self.depthwise.out_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.pointwise.out_channels()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.in_channels();
        let h = subsample(&self.depthwise.forward(x, 1, 1, c)?, self.stride)?;
        let h = relu(&batch_norm(&h, &self.bn1)?);
        let h = self.pointwise.forward(&h, 1, 0, 1)?;
        Ok(relu(&batch_norm(&h, &self.bn2)?))
    }
}

/// Keeps every `stride`-th row and column starting at 0.
///
/// A stride-1 padded 3x3 convolution followed by this equals the floored
/// strided convolution, which `conv2d` rejects for even extents.
fn subsample(x: &Tensor, stride: usize) -> Result<Tensor> {
    let [c, h, w] = *x.shape() else {
        return Err(Error::shape(format!(
            "expected [C,H,W], got {:?}",
            x.shape()
        )));
    };
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    if stride == 1 {
        return Ok(x.clone());
    }
    let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
    let d = x.data();
    let mut out = Vec::with_capacity(c * ho * wo);
    for ci in 0..c {
        for y in 0..ho {
            let row = (ci * h + y * stride) * w;
            out.extend((0..wo).map(|xo| d[row + xo * stride]));
        }
    }
    Tensor::new(&[c, ho, wo], out)
}

/// Simplified stand-in for the per-branch feature extractor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BackboneParams {
    pub blocks: Vec<SeparableBlock>,
}

impl BackboneParams {
    pub fn validate(&self, in_channels: usize) -> Result<()> {
        let mut c = in_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.in_channels() != c {
                return Err(Error::shape(format!(
                    "backbone block {i} expects {} channels, previous stage yields {c}",
                    b.in_channels()
                )));
            }
            c = b.out_channels();
        }
        Ok(())
    }

    pub fn out_channels(&self, in_channels: usize) -> usize {
        self.blocks
            .last()
            .map_or(in_channels, SeparableBlock::out_channels)
    }

    pub fn total_stride(&self) -> usize {
        self.blocks.iter().map(|b| b.stride).product()
    }
}

/// Runs every backbone block in order. An empty backbone is the identity.
pub fn backbone_forward(x: &Tensor, p: &BackboneParams) -> Result<Tensor> {
    let c_in = x.shape().first().copied().unwrap_or(0);
    p.validate(c_in)?;
    let stride = p.total_stride();
    if let [_, h, w] = *x.shape() {
        if h % stride != 0 || w % stride != 0 {
            return Err(Error::shape(format!(
                "input {h}x{w} is not divisible by the backbone's total stride {stride}"
            )));
        }
    }
    let mut h = x.clone();
    for b in &p.blocks {
        h = b.forward(&h)?;
    }
    Ok(h)
}

/// 1x1 convolution from `C` to `d` channels, returned token-major `[H,W,d]`.
pub fn bottleneck_project(f: &Tensor, p: &ConvParams) -> Result<Tensor> {
    if p.weight.shape().len() != 4 || p.weight.shape()[2..] != [1, 1] {
        return Err(Error::shape(format!(
            "bottleneck weight must be [d, C, 1, 1], got {:?}",
            p.weight.shape()
        )));
    }
    p.forward(f, 1, 0, 1)?.chw_to_hwc()
}

/// Sums branch token maps element-wise, then mixes channels with a 1x1 map.
///
/// Each element's branch values are added in ascending value order, so the
/// result is bit-identical under any permutation of `branches`.
pub fn fuse_branches(branches: &[Tensor], mix: &ConvParams) -> Result<Tensor> {
    let first = branches
        .first()
        .ok_or_else(|| Error::Fusion("at least one branch is required".into()))?;
    if let Some(bad) = branches.iter().find(|b| b.shape() != first.shape()) {
        return Err(Error::Fusion(format!(
            "branch shapes differ: {:?} vs {:?}",
            first.shape(),
            bad.shape()
        )));
    }
    let mut summed = first.clone();
    if branches.len() > 1 {
        let mut vals = Vec::with_capacity(branches.len());
        for (i, out) in summed.data_mut().iter_mut().enumerate() {
            vals.clear();
            vals.extend(branches.iter().map(|b| b.data()[i]));
            vals.sort_by(f32::total_cmp);
            *out = vals[1..].iter().fold(vals[0], |acc, &v| acc + v);
        }
    }
    let chw = summed.hwc_to_chw()?;
    mix.forward(&chw, 1, 0, 1)?.chw_to_hwc()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NestedResidualParams {
    /// 3x3, channel preserving.
    pub conv1: ConvParams,
    pub bn1: BatchNormParams,
    /// 3x3, channel preserving.
    pub conv2: ConvParams,
    pub bn2: BatchNormParams,
    pub pool: usize,
}

/// Every intermediate of one nested residual pass.
#[derive(Debug, Clone, PartialEq)]
pub struct NestedResidualTrace {
    pub x1: Tensor,
    pub x_down: Tensor,
    pub x_up: Tensor,
    pub x_res: Tensor,
    pub y: Tensor,
}

/// `x1 = ReLU(BN1(conv1(x)))`, pooled and re-expanded, merged back into `x1`
/// additively, then `y = BN2(conv2(x_res))`.
pub fn nested_residual_forward(
    x: &Tensor,
    p: &NestedResidualParams,
) -> Result<(Tensor, NestedResidualTrace)> {
    if let [c, h, w] = *x.shape() {
        if p.pool == 0 || h % p.pool != 0 || w % p.pool != 0 {
            return Err(Error::shape(format!(
                "residual input {h}x{w} is not divisible by pool factor {}",
                p.pool
            )));
        }
        if p.conv1.out_channels() != c || p.conv2.out_channels() != c {
            return Err(Error::shape(format!(
                "residual convs must preserve {c} channels, got {} and {}",
                p.conv1.out_channels(),
                p.conv2.out_channels()
            )));
        }
    }
    let x1 = relu(&batch_norm(&p.conv1.forward(x, 1, 1, 1)?, &p.bn1)?);
    let x_down = avg_pool2d(&x1, p.pool)?;
    let x_up = upsample_nearest(&x_down, p.pool)?;
    let x_res = elementwise_add(&x1, &x_up)?;
    let y = batch_norm(&p.conv2.forward(&x_res, 1, 1, 1)?, &p.bn2)?;
    let trace = NestedResidualTrace {
        x1,
        x_down,
        x_up,
        x_res,
        y: y.clone(),
    };
    Ok((y, trace))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureLayout {
    /// `[C,H,W]`
    Chw,
    /// `[H,W,C]`
    Hwc,
}

/// Fully connected 2-way classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    /// `[2, C]`.
    pub weight: Tensor,
    pub bias: Tensor,
}

pub const BONAFIDE: usize = 0;
pub const ATTACK: usize = 1;

/// Spatial mean per channel, summed in raster order.
pub fn global_average(features: &Tensor, layout: FeatureLayout) -> Result<Vec<f32>> {
    let [a, b, c] = *features.shape() else {
        return Err(Error::shape(format!(
            "classifier expects a rank-3 feature map, got {:?}",
            features.shape()
        )));
    };
    let d = features.data();
    Ok(match layout {
        FeatureLayout::Chw => {
            let hw = b * c;
            (0..a)
                .map(|ch| d[ch * hw..(ch + 1) * hw].iter().fold(0.0f32, |s, &v| s + v) / hw as f32)
                .collect()
        }
        FeatureLayout::Hwc => {
            let mut acc = vec![0.0f32; c];
            for px in d.chunks(c) {
                for (s, &v) in acc.iter_mut().zip(px) {
                    *s += v;
                }
            }
            let hw = (a * b) as f32;
            acc.into_iter().map(|s| s / hw).collect()
        }
    })
}

/// Global average pool -> affine map to two logits -> softmax.
/// Index [`BONAFIDE`] is the bona fide probability.
pub fn classifier_head(
    features: &Tensor,
    layout: FeatureLayout,
    fc: &LinearParams,
) -> Result<Tensor> {
    let pooled = global_average(features, layout)?;
    let c = pooled.len();
    if fc.weight.shape() != [2, c] || fc.bias.shape() != [2] {
        return Err(Error::shape(format!(
            "classifier weight {:?} / bias {:?} do not match {c} features",
            fc.weight.shape(),
            fc.bias.shape()
        )));
    }
    let w = fc.weight.data();
    let mut logits = [0.0f32; 2];
    for (k, logit) in logits.iter_mut().enumerate() {
        let mut acc = 0.0f32;
        for (&x, &wv) in pooled.iter().zip(&w[k * c..(k + 1) * c]) {
            acc += x * wv;
        }
        *logit = acc + fc.bias.data()[k];
    }
    softmax_in_place(&mut logits);
    Tensor::new(&[2], logits.to_vec())
}
