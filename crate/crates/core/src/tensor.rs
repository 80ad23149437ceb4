//! Dense row-major `f32` tensors and the handful of kernels the network needs.
//!
//! Every reduction accumulates in ascending index order, so results are
//! bit-reproducible across runs and platforms without FMA contraction.

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        check_shape(shape)?;
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Result<Self> {
        check_shape(shape)?;
        let n = shape.iter().product();
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        })
    }

    /// Builds a tensor by evaluating `f` at each flat (row-major) index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f32) -> Result<Self> {
        check_shape(shape)?;
        let n = shape.iter().product();
        Ok(Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn dims3(&self, what: &str) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(Error::shape(format!(
                "{what} expects a rank-3 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// `[C,H,W]` -> `[H,W,C]`.
    pub fn chw_to_hwc(&self) -> Result<Tensor> {
        let (c, h, w) = self.dims3("chw_to_hwc")?;
        let mut out = vec![0.0; self.data.len()];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[(y * w + x) * c + ch] = self.data[(ch * h + y) * w + x];
                }
            }
        }
        Tensor::new(&[h, w, c], out)
    }

    /// `[H,W,C]` -> `[C,H,W]`.
    pub fn hwc_to_chw(&self) -> Result<Tensor> {
        let (h, w, c) = self.dims3("hwc_to_chw")?;
        let mut out = vec![0.0; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[(ch * h + y) * w + x] = self.data[(y * w + x) * c + ch];
                }
            }
        }
        Tensor::new(&[c, h, w], out)
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::shape(format!(
            "rank must be 1..={MAX_RANK}, got shape {shape:?}"
        )));
    }
    if shape.contains(&0) {
        return Err(Error::shape(format!("zero extent in shape {shape:?}")));
    }
    Ok(())
}

/// Inference-mode batch-norm parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub epsilon: f32,
}

impl BatchNormParams {
    pub const DEFAULT_EPSILON: f32 = 1e-5;

    /// gamma=1, beta=0, mean=0, var=1.
    pub fn identity(channels: usize) -> Self {
        BatchNormParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            epsilon: Self::DEFAULT_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(Error::shape(format!(
                "batch-norm vectors disagree in length: gamma {}, beta {}, mean {}, var {}",
                c,
                self.beta.len(),
                self.running_mean.len(),
                self.running_var.len()
            )));
        }
        if self.running_var.iter().any(|&v| v < 0.0) {
            return Err(Error::Config("batch-norm running_var must be >= 0".into()));
        }
        if self.epsilon.is_nan() || self.epsilon < 0.0 {
            return Err(Error::Config("batch-norm epsilon must be >= 0".into()));
        }
        Ok(())
    }
}

/// `c[i,j] = sum_k a[i,k] * b[k,j]`, summed in ascending `k`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = match *a.shape() {
        [m, k] => (m, k),
        _ => {
            return Err(Error::shape(format!(
                "matmul lhs must be rank 2, got {:?}",
                a.shape()
            )))
        }
    };
    let (k2, n) = match *b.shape() {
        [k2, n] => (k2, n),
        _ => {
            return Err(Error::shape(format!(
                "matmul rhs must be rank 2, got {:?}",
                b.shape()
            )))
        }
    };
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Vec::with_capacity(m * n);
    matmul_into(a.data(), b.data(), m, k, n, &mut out);
    Tensor::new(&[m, n], out)
}

/// Appends the row-major `[m,n]` product of `a: [m,k]` and `b: [k,n]` to `out`.
fn matmul_into(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut Vec<f32>) {
    for i in 0..m {
        let start = out.len();
        out.resize(start + n, 0.0);
        let row = &mut out[start..];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Affine map over token rows: `y[t,o] = sum_i x[t,i] * weight[o,i] + bias[o]`.
///
/// `weight` is stored output-major (`[d_out, d_in]`). The dot product is
/// accumulated in ascending `i` and the bias is added last.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (t, d_in) = match *x.shape() {
        [t, d] => (t, d),
        _ => {
            return Err(Error::shape(format!(
                "linear input must be rank 2, got {:?}",
                x.shape()
            )))
        }
    };
    let (d_out, w_in) = match *weight.shape() {
        [o, i] => (o, i),
        _ => {
            return Err(Error::shape(format!(
                "linear weight must be rank 2, got {:?}",
                weight.shape()
            )))
        }
    };
    if w_in != d_in {
        return Err(Error::shape(format!(
            "linear input {:?} does not match weight {:?}",
            x.shape(),
            weight.shape()
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [d_out] {
            return Err(Error::shape(format!(
                "linear bias {:?} does not match output width {d_out}",
                b.shape()
            )));
        }
    }
    // x . W^T keeps the ascending-`i` accumulation per output while letting
    // the inner loop run over contiguous output columns.
    let wd = weight.data();
    let mut wt = vec![0.0f32; d_in * d_out];
    for o in 0..d_out {
        for i in 0..d_in {
            wt[i * d_out + o] = wd[o * d_in + i];
        }
    }
    let mut out = matmul(x, &Tensor::new(&[d_in, d_out], wt)?)?;
    if let Some(b) = bias {
        for row in out.data_mut().chunks_mut(d_out) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
    }
    debug_assert_eq!(out.shape(), [t, d_out]);
    Ok(out)
}

/// Output extent of a strided, zero-padded convolution along one axis.
pub fn conv_out_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel || !(padded - kernel).is_multiple_of(stride) {
        return Err(Error::shape(format!(
            "extent {input} with kernel {kernel}, stride {stride}, padding {padding} \
             does not give an integer output size"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Grouped 2-D cross-correlation with zero padding.
///
/// `input` is `[C_in,H,W]`, `weight` is `[C_out, C_in/groups, K_h, K_w]`.
/// Each output value accumulates over (input channel, ky, kx) in ascending
/// order; the bias, if any, is added after the full sum.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&[f32]>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor> {
    let (c_in, h, w) = input.dims3("conv2d input")?;
    let (c_out, cpg, kh, kw) = match *weight.shape() {
        [a, b, c, d] => (a, b, c, d),
        _ => {
            return Err(Error::shape(format!(
                "conv2d weight must be rank 4, got {:?}",
                weight.shape()
            )))
        }
    };
    if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
        return Err(Error::Config(format!(
            "conv2d groups={groups} must divide C_in={c_in} and C_out={c_out}"
        )));
    }
    if cpg != c_in / groups {
        return Err(Error::shape(format!(
            "conv2d weight {:?} expects {} input channels per group, input {:?} with groups={groups} has {}",
            weight.shape(),
            cpg,
            input.shape(),
            c_in / groups
        )));
    }
    if let Some(b) = bias {
        if b.len() != c_out {
            return Err(Error::shape(format!(
                "conv2d bias has {} entries, expected {c_out}",
                b.len()
            )));
        }
    }
    if stride == 0 {
        return Err(Error::Config("conv2d stride must be positive".into()));
    }
    let h_out = conv_out_extent(h, kh, stride, padding)?;
    let w_out = conv_out_extent(w, kw, stride, padding)?;
    let opg = c_out / groups;
    let (xd, wd) = (input.data(), weight.data());
    let plane_len = h_out * w_out;
    let rows = cpg * kh * kw;
    let mut out = Vec::with_capacity(c_out * plane_len);

    // im2col: row (ci, ky, kx) holds the input value each output position
    // multiplies with that weight, or 0 in the padding. Padding terms add
    // +0 to an accumulator that starts at +0, so they leave sums unchanged.
    let mut col = vec![0.0f32; rows * plane_len];
    for g in 0..groups {
        for ci in 0..cpg {
            let src_c = g * cpg + ci;
            let src = &xd[src_c * h * w..(src_c + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let r = (ci * kh + ky) * kw + kx;
                    let dst = &mut col[r * plane_len..(r + 1) * plane_len];
                    for oy in 0..h_out {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        let dst_row = &mut dst[oy * w_out..(oy + 1) * w_out];
                        if iy < 0 || iy >= h as isize {
                            dst_row.fill(0.0);
                            continue;
                        }
                        let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            *d = if ix < 0 || ix >= w as isize {
                                0.0
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    }
                }
            }
        }
        let wg = &wd[g * opg * rows..(g + 1) * opg * rows];
        matmul_into(wg, &col, opg, rows, plane_len, &mut out);
    }
    if let Some(b) = bias {
        for (plane, &bv) in out.chunks_mut(plane_len).zip(b) {
            for v in plane.iter_mut() {
                *v += bv;
            }
        }
    }
    Tensor::new(&[c_out, h_out, w_out], out)
}

/// Inference batch normalization over the leading channel axis of `[C,H,W]`.
pub fn batch_norm(x: &Tensor, p: &BatchNormParams) -> Result<Tensor> {
    let (c, h, w) = x.dims3("batch_norm")?;
    p.validate()?;
    if p.channels() != c {
        return Err(Error::shape(format!(
            "batch_norm has {} channels of parameters, input {:?} has {c}",
            p.channels(),
            x.shape()
        )));
    }
    let hw = h * w;
    let mut out = x.clone();
    for ch in 0..c {
        let denom = (p.running_var[ch] + p.epsilon).sqrt();
        let (g, b, m) = (p.gamma[ch], p.beta[ch], p.running_mean[ch]);
        for v in &mut out.data_mut()[ch * hw..(ch + 1) * hw] {
            *v = g * (*v - m) / denom + b;
        }
    }
    Ok(out)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Numerically stable softmax along the last axis.
pub fn softmax_last_axis(x: &Tensor) -> Tensor {
    let n = *x.shape().last().expect("rank >= 1");
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(n) {
        softmax_in_place(row);
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn elementwise_add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "elementwise_add shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape(), data)
}

/// Mean over non-overlapping `k x k` tiles of a `[C,H,W]` map.
pub fn avg_pool2d(x: &Tensor, k: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3("avg_pool2d")?;
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::shape(format!(
            "avg_pool2d: spatial extent {h}x{w} is not divisible by k={k}"
        )));
    }
    let (ho, wo) = (h / k, w / k);
    let area = (k * k) as f32;
    let xd = x.data();
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0f32;
                for dy in 0..k {
                    for dx in 0..k {
                        acc += xd[(ch * h + oy * k + dy) * w + ox * k + dx];
                    }
                }
                out.push(acc / area);
            }
        }
    }
    Tensor::new(&[c, ho, wo], out)
}

/// Replicates each cell of a `[C,H,W]` map into a `k x k` tile.
pub fn upsample_nearest(x: &Tensor, k: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3("upsample_nearest")?;
    if k == 0 {
        return Err(Error::shape("upsample_nearest: k must be positive"));
    }
    let (ho, wo) = (h * k, w * k);
    let xd = x.data();
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                out.push(xd[(ch * h + oy / k) * w + ox / k]);
            }
        }
    }
    Tensor::new(&[c, ho, wo], out)
}
