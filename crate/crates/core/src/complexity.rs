//! Multiply-accumulate and parameter accounting.
//!
//! One MAC is one multiply plus its accumulate. Bias additions, softmax,
//! normalization, pooling and activations cost zero MACs.

use serde::Serialize;

use crate::attention::WindowAttentionConfig;
use crate::error::{Error, Result};
use crate::model::{tensor_shapes, ModelConfig};
use crate::quant::{QuantParams, QuantPolicy};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub macs: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ComplexityReport {
    pub layers: Vec<LayerCost>,
    pub total_macs: u64,
    pub total_params: u64,
    /// `total_macs / 1e9` with three decimals.
    pub gmacs: String,
    /// Bytes of all stored tensors, int8 payloads plus their 16-byte
    /// parameter trailer when DQ is enabled.
    pub weight_bytes: u64,
    pub dq_enabled: bool,
    pub notes: Vec<String>,
}

impl ComplexityReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Three-decimal GMAC string, computed in integers.
pub fn format_gmacs(macs: u64) -> String {
    let milli = (macs as u128 + 500_000) / 1_000_000;
    format!("{}.{:03}", milli / 1000, milli % 1000)
}

#[allow(clippy::too_many_arguments)]
pub fn macs_conv2d(
    c_in: usize,
    c_out: usize,
    k_h: usize,
    k_w: usize,
    h_out: usize,
    w_out: usize,
    groups: usize,
) -> Result<(u64, u64)> {
    if groups == 0 || !c_in.is_multiple_of(groups) || !c_out.is_multiple_of(groups) {
        return Err(Error::shape(format!(
            "channels {c_in}->{c_out} not divisible by groups {groups}"
        )));
    }
    let per_out = (k_h * k_w * (c_in / groups)) as u64;
    let macs = (h_out * w_out * c_out) as u64 * per_out;
    let params = c_out as u64 * per_out + c_out as u64;
    Ok((macs, params))
}

pub fn macs_linear(d_in: usize, d_out: usize, tokens: usize) -> (u64, u64) {
    let (d_in, d_out) = (d_in as u64, d_out as u64);
    (tokens as u64 * d_in * d_out, d_in * d_out + d_out)
}

pub fn macs_window_attention(cfg: &WindowAttentionConfig, n_windows: usize) -> (u64, u64) {
    let n = cfg.tokens() as u64;
    let d = cfg.dim as u64;
    let per_window = 3 * n * d * d + 2 * n * n * d + n * d * d;
    let params = 3 * d * d + 3 * d + d * d + d + (cfg.heads * cfg.table_len()) as u64;
    (per_window * n_windows as u64, params)
}

struct Walker {
    layers: Vec<LayerCost>,
}

impl Walker {
    fn add(&mut self, name: String, (macs, params): (u64, u64)) {
        self.layers.push(LayerCost { name, macs, params });
    }

    fn bn(&mut self, name: String, channels: usize) {
        self.add(name, (0, 2 * channels as u64));
    }
}

pub fn model_complexity(cfg: &ModelConfig) -> Result<ComplexityReport> {
    cfg.validate()?;
    let dims = cfg.dims();
    let d = dims.dim;
    let f = dims.feature_size();
    let mut w = Walker { layers: Vec::new() };
    for space in cfg.enabled_branches() {
        let b = space.key();
        let (mut c, mut size) = (3, dims.input_size);
        for (i, stage) in dims.backbone.iter().enumerate() {
            let p = format!("{b}.backbone.{i}");
            let out = size.div_ceil(stage.stride);
            w.add(
                format!("{p}.depthwise"),
                macs_conv2d(c, c, 3, 3, out, out, c)?,
            );
            w.bn(format!("{p}.bn1"), c);
            w.add(
                format!("{p}.pointwise"),
                macs_conv2d(c, stage.channels, 1, 1, out, out, 1)?,
            );
            w.bn(format!("{p}.bn2"), stage.channels);
            c = stage.channels;
            size = out;
        }
        w.add(format!("{b}.bottleneck"), macs_conv2d(c, d, 1, 1, f, f, 1)?);
        if cfg.attention_enabled {
            let n_windows = (f / dims.window) * (f / dims.window);
            w.add(
                format!("{b}.attn"),
                macs_window_attention(&dims.attention(), n_windows),
            );
        }
    }
    w.add("fusion".into(), macs_conv2d(d, d, 1, 1, f, f, 1)?);
    if cfg.residual_enabled {
        w.add("residual.conv1".into(), macs_conv2d(d, d, 3, 3, f, f, 1)?);
        w.bn("residual.bn1".into(), d);
        w.add("residual.conv2".into(), macs_conv2d(d, d, 3, 3, f, f, 1)?);
        w.bn("residual.bn2".into(), d);
    }
    w.add("head".into(), macs_linear(d, 2, 1));

    let total_macs = w.layers.iter().map(|l| l.macs).sum();
    let total_params = w.layers.iter().map(|l| l.params).sum();
    let policy = QuantPolicy::projections();
    let weight_bytes = tensor_shapes(cfg)
        .iter()
        .map(|(name, shape)| {
            let n = shape.iter().product::<usize>() as u64;
            if cfg.dq_enabled && policy.matches(name) {
                n + QuantParams::ENCODED_LEN as u64
            } else {
                4 * n
            }
        })
        .sum();
    let mut notes = vec![
        "counts multiply-accumulates; bias, normalization, activation, pooling and softmax excluded"
            .to_string(),
        "simplified depthwise-separable backbone; totals are not comparable to a full MobileNetV3-Large"
            .to_string(),
    ];
    if cfg.dq_enabled {
        notes.push(
            "DQ enabled: projection weights stored as int8, MACs unchanged (simulated quantization)"
                .to_string(),
        );
    }
    Ok(ComplexityReport {
        layers: w.layers,
        total_macs,
        total_params,
        gmacs: format_gmacs(total_macs),
        weight_bytes,
        dq_enabled: cfg.dq_enabled,
        notes,
    })
}
