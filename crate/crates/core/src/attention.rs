//! Multi-head self-attention over non-overlapping square windows with a
//! learned relative position bias per head.
//!
//! Feature maps are token-major (`[H,W,d]`). A map is cut into `w x w`
//! windows enumerated row-major over the window grid, every window is
//! attended independently with the same parameters, and the windows are
//! stitched back into place.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{linear, softmax_in_place, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowAttentionConfig {
    /// Embedding width `d`.
    pub dim: usize,
    pub heads: usize,
    /// Window side `w`.
    pub window: usize,
}

impl WindowAttentionConfig {
    pub fn new(dim: usize, heads: usize, window: usize) -> Result<Self> {
        let cfg = WindowAttentionConfig { dim, heads, window };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.window == 0 {
            return Err(Error::Config(format!(
                "attention dims must be positive (d={}, h={}, w={})",
                self.dim, self.heads, self.window
            )));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed dim d={} is not divisible by head count h={}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Tokens per window, `N = w * w`.
    pub fn tokens(&self) -> usize {
        self.window * self.window
    }

    /// Entries per head in the shared offset table, `(2w - 1)^2`.
    pub fn table_len(&self) -> usize {
        (2 * self.window - 1) * (2 * self.window - 1)
    }
}

/// Lookup from a token pair inside a window to its row in the bias table.
///
/// `idx[i,j] = (drow + w - 1) * (2w - 1) + (dcol + w - 1)` where the offset is
/// token `i`'s coordinate minus token `j`'s.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelativeIndexMap {
    window: usize,
    idx: Vec<usize>,
}

impl RelativeIndexMap {
    pub fn new(window: usize) -> Self {
        let n = window * window;
        let span = 2 * window - 1;
        let mut idx = Vec::with_capacity(n * n);
        for i in 0..n {
            let (ri, ci) = (i / window, i % window);
            for j in 0..n {
                let (rj, cj) = (j / window, j % window);
                let dr = ri + window - 1 - rj;
                let dc = ci + window - 1 - cj;
                idx.push(dr * span + dc);
            }
        }
        RelativeIndexMap { window, idx }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn get(&self, i: usize, j: usize) -> usize {
        let n = self.window * self.window;
        self.idx[i * n + j]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.idx
    }
}

/// Relative position bias, either the shared offset table or one dense
/// `N x N` matrix per head.
#[derive(Debug, Clone, PartialEq)]
pub enum PositionBias {
    /// `[h, (2w-1)^2]`, expanded through a [`RelativeIndexMap`].
    Table(Tensor),
    /// `[h, N, N]`, used as is.
    Dense(Tensor),
}

impl PositionBias {
    /// Expands to the per-head `[h, N, N]` bias added to the logits.
    pub fn expand(&self, cfg: &WindowAttentionConfig) -> Result<Tensor> {
        let (h, n) = (cfg.heads, cfg.tokens());
        match self {
            PositionBias::Table(table) => {
                if table.shape() != [h, cfg.table_len()] {
                    return Err(Error::shape(format!(
                        "relative bias table {:?} does not match [{h}, {}]",
                        table.shape(),
                        cfg.table_len()
                    )));
                }
                let map = RelativeIndexMap::new(cfg.window);
                let t = table.data();
                let mut out = Vec::with_capacity(h * n * n);
                for head in 0..h {
                    let row = &t[head * cfg.table_len()..(head + 1) * cfg.table_len()];
                    out.extend(map.as_slice().iter().map(|&k| row[k]));
                }
                Tensor::new(&[h, n, n], out)
            }
            PositionBias::Dense(dense) => {
                if dense.shape() != [h, n, n] {
                    return Err(Error::shape(format!(
                        "dense relative bias {:?} does not match [{h}, {n}, {n}]",
                        dense.shape()
                    )));
                }
                Ok(dense.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// `[3d, d]`, output rows ordered `[Q | K | V]`.
    pub qkv_weight: Tensor,
    pub qkv_bias: Tensor,
    /// `[d, d]`.
    pub out_weight: Tensor,
    pub out_bias: Tensor,
    pub bias: PositionBias,
}

impl AttentionParams {
    /// All-zero parameters with a zero bias table.
    pub fn zeros(cfg: &WindowAttentionConfig) -> Self {
        let d = cfg.dim;
        AttentionParams {
            qkv_weight: Tensor::zeros(&[3 * d, d]).unwrap(),
            qkv_bias: Tensor::zeros(&[3 * d]).unwrap(),
            out_weight: Tensor::zeros(&[d, d]).unwrap(),
            out_bias: Tensor::zeros(&[d]).unwrap(),
            bias: PositionBias::Table(Tensor::zeros(&[cfg.heads, cfg.table_len()]).unwrap()),
        }
    }

    pub fn validate(&self, cfg: &WindowAttentionConfig) -> Result<()> {
        let d = cfg.dim;
        let checks: [(&str, &Tensor, &[usize]); 4] = [
            ("qkv_weight", &self.qkv_weight, &[3 * d, d]),
            ("qkv_bias", &self.qkv_bias, &[3 * d]),
            ("out_weight", &self.out_weight, &[d, d]),
            ("out_bias", &self.out_bias, &[d]),
        ];
        for (name, t, want) in checks {
            if t.shape() != want {
                return Err(Error::shape(format!(
                    "attention {name} is {:?}, expected {want:?}",
                    t.shape()
                )));
            }
        }
        self.bias.expand(cfg).map(|_| ())
    }
}

fn dims_hwd(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [h, w, d] => Ok((h, w, d)),
        _ => Err(Error::shape(format!(
            "expected a token map [H,W,d], got {:?}",
            x.shape()
        ))),
    }
}

/// `[H,W,d]` -> `[nW, N, d]` with no padding.
pub fn window_partition(x: &Tensor, window: usize) -> Result<Tensor> {
    let (h, w, d) = dims_hwd(x)?;
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::shape(format!(
            "map {h}x{w} is not divisible into {window}x{window} windows"
        )));
    }
    let (gh, gw) = (h / window, w / window);
    let xd = x.data();
    let mut out = Vec::with_capacity(xd.len());
    for wy in 0..gh {
        for wx in 0..gw {
            for ty in 0..window {
                let row = wy * window + ty;
                let start = (row * w + wx * window) * d;
                out.extend_from_slice(&xd[start..start + window * d]);
            }
        }
    }
    Tensor::new(&[gh * gw, window * window, d], out)
}

/// Inverse of [`window_partition`].
pub fn window_reverse(
    windows: &Tensor,
    height: usize,
    width: usize,
    window: usize,
) -> Result<Tensor> {
    let (nw, n, d) = match *windows.shape() {
        [a, b, c] => (a, b, c),
        _ => {
            return Err(Error::shape(format!(
                "expected windows [nW,N,d], got {:?}",
                windows.shape()
            )))
        }
    };
    if window == 0
        || n != window * window
        || !height.is_multiple_of(window)
        || !width.is_multiple_of(window)
        || nw * n != height * width
    {
        return Err(Error::shape(format!(
            "{nw} windows of {n} tokens cannot tile a {height}x{width} map with window {window}"
        )));
    }
    let gw = width / window;
    let src = windows.data();
    let mut out = vec![0.0f32; src.len()];
    for win in 0..nw {
        let (wy, wx) = (win / gw, win % gw);
        for ty in 0..window {
            let row = wy * window + ty;
            let dst = (row * width + wx * window) * d;
            let s = (win * n + ty * window) * d;
            out[dst..dst + window * d].copy_from_slice(&src[s..s + window * d]);
        }
    }
    Tensor::new(&[height, width, d], out)
}

/// Per-head query/key/value tensors, each `[h, N, d_h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Qkv {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

/// Applies the `[Q|K|V]` affine map to every token of one window and splits
/// the result into contiguous heads.
pub fn qkv_project(xw: &Tensor, p: &AttentionParams, cfg: &WindowAttentionConfig) -> Result<Qkv> {
    let (n, d) = match *xw.shape() {
        [n, d] => (n, d),
        _ => {
            return Err(Error::shape(format!(
                "window tokens must be [N,d], got {:?}",
                xw.shape()
            )))
        }
    };
    if d != cfg.dim {
        return Err(Error::shape(format!(
            "token width {d} does not match d={}",
            cfg.dim
        )));
    }
    let proj = linear(xw, &p.qkv_weight, Some(&p.qkv_bias))?;
    let (h, dh) = (cfg.heads, cfg.head_dim());
    let pd = proj.data();
    let split = |part: usize| -> Result<Tensor> {
        let mut out = Vec::with_capacity(h * n * dh);
        for head in 0..h {
            for t in 0..n {
                let s = t * 3 * d + part * d + head * dh;
                out.extend_from_slice(&pd[s..s + dh]);
            }
        }
        Tensor::new(&[h, n, dh], out)
    };
    Ok(Qkv {
        q: split(0)?,
        k: split(1)?,
        v: split(2)?,
    })
}

/// Row-stochastic weights `softmax(q k^T / sqrt(d_h) + bias)` for one head.
pub fn attention_weights(q: &Tensor, k: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, dh) = match *q.shape() {
        [n, dh] => (n, dh),
        _ => {
            return Err(Error::shape(format!(
                "q must be [N,d_h], got {:?}",
                q.shape()
            )))
        }
    };
    if k.shape() != q.shape() || bias.shape() != [n, n] {
        return Err(Error::shape(format!(
            "attention shapes disagree: q {:?}, k {:?}, bias {:?}",
            q.shape(),
            k.shape(),
            bias.shape()
        )));
    }
    let scale = (dh as f32).sqrt();
    let (qd, kd, bd) = (q.data(), k.data(), bias.data());
    let mut logits = vec![0.0f32; n * n];
    for i in 0..n {
        let qi = &qd[i * dh..(i + 1) * dh];
        for j in 0..n {
            let kj = &kd[j * dh..(j + 1) * dh];
            let mut dot = 0.0f32;
            for (&a, &b) in qi.iter().zip(kj) {
                dot += a * b;
            }
            logits[i * n + j] = dot / scale + bd[i * n + j];
        }
        softmax_in_place(&mut logits[i * n..(i + 1) * n]);
    }
    Tensor::new(&[n, n], logits)
}

/// Single-head window attention: `softmax(q k^T / sqrt(d_h) + bias) v`.
pub fn window_attention_head(q: &Tensor, k: &Tensor, v: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if v.shape() != q.shape() {
        return Err(Error::shape(format!(
            "v {:?} does not match q {:?}",
            v.shape(),
            q.shape()
        )));
    }
    let weights = attention_weights(q, k, bias)?;
    let (n, dh) = (q.shape()[0], q.shape()[1]);
    let (wd, vd) = (weights.data(), v.data());
    let mut out = vec![0.0f32; n * dh];
    for i in 0..n {
        let row = &mut out[i * dh..(i + 1) * dh];
        for j in 0..n {
            let a = wd[i * n + j];
            for (o, &vv) in row.iter_mut().zip(&vd[j * dh..(j + 1) * dh]) {
                *o += a * vv;
            }
        }
    }
    Tensor::new(&[n, dh], out)
}

fn head_slice(t: &Tensor, head: usize) -> Tensor {
    let (n, dh) = (t.shape()[1], t.shape()[2]);
    Tensor::new(
        &[n, dh],
        t.data()[head * n * dh..(head + 1) * n * dh].to_vec(),
    )
    .unwrap()
}

/// Attention over the tokens of one window (`[N,d]` in, `[N,d]` out),
/// including the output projection.
pub fn attend_window(
    xw: &Tensor,
    p: &AttentionParams,
    bias: &Tensor,
    cfg: &WindowAttentionConfig,
) -> Result<Tensor> {
    let qkv = qkv_project(xw, p, cfg)?;
    let (n, d, dh) = (cfg.tokens(), cfg.dim, cfg.head_dim());
    let mut merged = vec![0.0f32; n * d];
    for head in 0..cfg.heads {
        let b = head_slice(bias, head);
        let o = window_attention_head(
            &head_slice(&qkv.q, head),
            &head_slice(&qkv.k, head),
            &head_slice(&qkv.v, head),
            &b,
        )?;
        for t in 0..n {
            merged[t * d + head * dh..t * d + (head + 1) * dh]
                .copy_from_slice(&o.data()[t * dh..(t + 1) * dh]);
        }
    }
    let merged = Tensor::new(&[n, d], merged)?;
    linear(&merged, &p.out_weight, Some(&p.out_bias))
}

/// Full window attention over a `[H,W,d]` token map.
pub fn multi_head_window_attention(
    x: &Tensor,
    p: &AttentionParams,
    cfg: &WindowAttentionConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    p.validate(cfg)?;
    let (h, w, d) = dims_hwd(x)?;
    if d != cfg.dim {
        return Err(Error::shape(format!(
            "token width {d} does not match d={}",
            cfg.dim
        )));
    }
    let bias = p.bias.expand(cfg)?;
    let windows = window_partition(x, cfg.window)?;
    let (nw, n) = (windows.shape()[0], windows.shape()[1]);
    let mut out = Vec::with_capacity(windows.len());
    for win in 0..nw {
        let xw = Tensor::new(
            &[n, d],
            windows.data()[win * n * d..(win + 1) * n * d].to_vec(),
        )?;
        out.extend_from_slice(attend_window(&xw, p, &bias, cfg)?.data());
    }
    window_reverse(&Tensor::new(&[nw, n, d], out)?, h, w, cfg.window)
}
