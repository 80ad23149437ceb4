//! Multi-color-space finger photo presentation attack detection.
//!
//! Three lightweight branches (RGB, HSV, YCbCr) each run a depthwise-separable
//! backbone, a pointwise bottleneck and windowed self-attention. Their token
//! maps are fused, refined by a nested residual block and classified into
//! bona fide vs attack. Weights can be stored as dynamically quantized int8.
//! Evaluation uses APCER/BPCER/EER.

pub mod attention;
pub mod blocks;
pub mod colorspace;
pub mod complexity;
pub mod error;
pub mod metrics;
pub mod model;
pub mod quant;
pub mod tensor;
pub mod weights;

pub use colorspace::{ColorImage, ColorSpace};
pub use complexity::{model_complexity, ComplexityReport, LayerCost};
pub use error::{Error, Result};
pub use metrics::{EvalReport, ScoreSet};
pub use model::{build_model, load_weights, Model, ModelConfig, Preset};
pub use quant::{QuantParams, QuantPolicy, QuantReport, QuantizedTensor};
pub use tensor::Tensor;
pub use weights::{StoredTensor, WeightSet};
