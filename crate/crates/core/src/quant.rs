//! Per-tensor 8-bit dynamic quantization of weights.
//!
//! A tensor with range `[f_min, f_max]` is mapped onto `[-128, 127]`:
//!
//! ```text
//! S = (f_max - f_min) / 255
//! Z = round(-f_min / S) - 128
//! q = round((f - f_min) / S) - 128
//! f' = (q + 128) * S + f_min
//! ```
//!
//! `round` is half away from zero. Zero-range tensors use `S = 1`, so every
//! element quantizes to `-128` and reconstructs to the constant exactly.
//! Reconstruction goes through `f_min` and `S`; `Z` is carried alongside for
//! consumers that expect a zero point.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::weights::{StoredTensor, WeightSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuantParams {
    pub f_min: f32,
    pub f_max: f32,
    pub scale: f32,
    pub zero_point: i32,
}

impl QuantParams {
    /// Bytes taken by the parameters in a weight file chunk.
    pub const ENCODED_LEN: usize = 16;
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    qdata: Vec<i8>,
    params: QuantParams,
}

impl QuantizedTensor {
    pub fn new(shape: &[usize], qdata: Vec<i8>, params: QuantParams) -> Result<Self> {
        // Borrow Tensor's shape checks.
        let n: usize = Tensor::zeros(shape)?.len();
        if qdata.len() != n {
            return Err(Error::shape(format!(
                "quantized shape {shape:?} needs {n} values, got {}",
                qdata.len()
            )));
        }
        Ok(QuantizedTensor {
            shape: shape.to_vec(),
            qdata,
            params,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn qdata(&self) -> &[i8] {
        &self.qdata
    }

    pub fn params(&self) -> QuantParams {
        self.params
    }

    pub fn len(&self) -> usize {
        self.qdata.len()
    }

    pub fn is_empty(&self) -> bool {
        self.qdata.is_empty()
    }
}

pub fn compute_quant_params(f: &Tensor) -> Result<QuantParams> {
    if f.is_empty() {
        return Err(Error::Quant("cannot quantize an empty tensor".into()));
    }
    if let Some(pos) = f.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::Quant(format!("non-finite value at element {pos}")));
    }
    let (f_min, f_max) = f
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let exact_scale = if f_max > f_min {
        (f_max as f64 - f_min as f64) / 255.0
    } else {
        1.0
    };
    let zero_point = ((-(f_min as f64) / exact_scale).round() - 128.0) as i32;
    Ok(QuantParams {
        f_min,
        f_max,
        // Ranges below 255 * f32::MIN_POSITIVE would round S to zero.
        scale: (exact_scale as f32).max(f32::MIN_POSITIVE),
        zero_point,
    })
}

/// `q = clamp(round((f - f_min) / S) - 128, -128, 127)`.
pub fn quantize(f: &Tensor, p: &QuantParams) -> QuantizedTensor {
    let (lo, s) = (p.f_min as f64, p.scale as f64);
    let qdata = f
        .data()
        .iter()
        .map(|&v| (((v as f64 - lo) / s).round() - 128.0).clamp(-128.0, 127.0) as i8)
        .collect();
    QuantizedTensor {
        shape: f.shape().to_vec(),
        qdata,
        params: *p,
    }
}

/// `f' = (q + 128) * S + f_min`.
pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let (lo, s) = (q.params.f_min as f64, q.params.scale as f64);
    let data = q
        .qdata
        .iter()
        .map(|&v| ((v as f64 + 128.0) * s + lo) as f32)
        .collect();
    Tensor::new(&q.shape, data).expect("shape validated on construction")
}

/// Computes parameters from `f` itself and quantizes it.
pub fn quantize_tensor(f: &Tensor) -> Result<QuantizedTensor> {
    Ok(quantize(f, &compute_quant_params(f)?))
}

/// Which tensors of a weight set get quantized.
///
/// Patterns are matched against full tensor names; `*` matches any run of
/// characters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantPolicy {
    patterns: Vec<String>,
}

impl QuantPolicy {
    /// Affine/attention projections and 1x1 convolution weight matrices.
    pub fn projections() -> Self {
        QuantPolicy::from_patterns([
            "*.pointwise.weight",
            "*.bottleneck.weight",
            "*.attn.qkv.weight",
            "*.attn.proj.weight",
            "fusion.weight",
            "head.weight",
        ])
    }

    pub fn none() -> Self {
        QuantPolicy { patterns: vec![] }
    }

    pub fn all() -> Self {
        QuantPolicy::from_patterns(["*"])
    }

    pub fn from_patterns<S: Into<String>>(patterns: impl IntoIterator<Item = S>) -> Self {
        QuantPolicy {
            patterns: patterns.into_iter().map(Into::into).collect(),
        }
    }

    /// `default`, `none`, `all`, or a comma-separated pattern list.
    pub fn parse(spec: &str) -> Self {
        match spec.trim() {
            "default" => Self::projections(),
            "none" | "" => Self::none(),
            "all" => Self::all(),
            list => Self::from_patterns(list.split(',').map(str::trim).filter(|s| !s.is_empty())),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn matches(&self, name: &str) -> bool {
        self.patterns.iter().any(|p| wildcard_match(p, name))
    }
}

impl Default for QuantPolicy {
    fn default() -> Self {
        Self::projections()
    }
}

fn wildcard_match(pattern: &str, name: &str) -> bool {
    let parts: Vec<&str> = pattern.split('*').collect();
    if parts.len() == 1 {
        return pattern == name;
    }
    let (first, last) = (parts[0], parts[parts.len() - 1]);
    if !name.starts_with(first) || name.len() < first.len() + last.len() || !name.ends_with(last) {
        return false;
    }
    let mut rest = &name[first.len()..name.len() - last.len()];
    for mid in &parts[1..parts.len() - 1] {
        match rest.find(mid) {
            Some(i) => rest = &rest[i + mid.len()..],
            None => return false,
        }
    }
    true
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorQuantReport {
    pub name: String,
    pub elements: usize,
    pub scale: f32,
    pub zero_point: i32,
    pub max_abs_error: f64,
    pub mean_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantReport {
    pub tensors: Vec<TensorQuantReport>,
    pub bytes_before: u64,
    pub bytes_after: u64,
    pub warnings: Vec<String>,
}

impl QuantReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Storage cost of one tensor as it sits in a weight set.
pub fn stored_bytes(t: &StoredTensor) -> u64 {
    match t {
        StoredTensor::Float(f) => 4 * f.len() as u64,
        StoredTensor::Quantized(q) => (q.len() + QuantParams::ENCODED_LEN) as u64,
    }
}

/// Quantizes every float tensor in `weights` selected by `policy`.
///
/// Tensors that are already quantized, or not selected, pass through
/// unchanged. Reconstruction errors are measured against the original values.
pub fn quantize_model(
    weights: &WeightSet,
    policy: &QuantPolicy,
) -> Result<(WeightSet, QuantReport)> {
    let mut out = WeightSet::new();
    let mut tensors = Vec::new();
    let (mut before, mut after) = (0u64, 0u64);
    for (name, stored) in weights.iter() {
        before += stored_bytes(stored);
        let converted = match stored {
            StoredTensor::Float(f) if policy.matches(name) => {
                let q = quantize_tensor(f).map_err(|e| Error::Quant(format!("{name}: {e}")))?;
                let recon = dequantize(&q);
                let (mut max, mut sum) = (0.0f64, 0.0f64);
                for (&a, &b) in f.data().iter().zip(recon.data()) {
                    let err = (a as f64 - b as f64).abs();
                    max = max.max(err);
                    sum += err;
                }
                tensors.push(TensorQuantReport {
                    name: name.clone(),
                    elements: q.len(),
                    scale: q.params().scale,
                    zero_point: q.params().zero_point,
                    max_abs_error: max,
                    mean_abs_error: sum / q.len() as f64,
                });
                StoredTensor::Quantized(q)
            }
            other => other.clone(),
        };
        after += stored_bytes(&converted);
        out.insert(name.clone(), converted);
    }
    let mut warnings = Vec::new();
    if tensors.is_empty() {
        warnings.push("quantization policy matched no float tensors".to_string());
    }
    Ok((
        out,
        QuantReport {
            tensors,
            bytes_before: before,
            bytes_after: after,
            warnings,
        },
    ))
}
