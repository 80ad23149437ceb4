//! Full network assembly, seeded initialization, inference and weight I/O.
//!
//! Per enabled color space: convert -> scale to `[0,1]` -> backbone ->
//! bottleneck projection -> window attention (optional). Branch tokens are
//! fused, passed through the nested residual block (optional) and
//! classified. The bona fide probability is the score.

mod ablate;
mod config;

use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use ablate::{
    ablate, ablation_csv, reference_grid, AblationRow, EvalSource, GridEntry, Toggles,
    ABLATION_HEADER,
};
pub use config::{Dims, InputScaling, ModelConfig, Preset, StageSpec};

use crate::attention::{multi_head_window_attention, AttentionParams, PositionBias};
use crate::blocks::{
    backbone_forward, bottleneck_project, classifier_head, fuse_branches, nested_residual_forward,
    BackboneParams, ConvParams, FeatureLayout, LinearParams, NestedResidualParams,
    NestedResidualTrace, SeparableBlock, BONAFIDE,
};
use crate::colorspace::{convert, image_to_tensor, ColorImage, ColorSpace};
use crate::error::{Error, Result};
use crate::quant::{quantize_model, QuantPolicy};
use crate::tensor::{BatchNormParams, Tensor};
use crate::weights::{self, StoredTensor, WeightSet};

/// Shared bound of the seeded relative-bias table initialization.
pub const REL_BIAS_INIT: f32 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct BranchParams {
    pub space: ColorSpace,
    pub backbone: BackboneParams,
    pub bottleneck: ConvParams,
    pub attention: Option<AttentionParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub branches: Vec<BranchParams>,
    pub fusion: ConvParams,
    pub residual: Option<NestedResidualParams>,
    pub head: LinearParams,
}

/// An immutable, ready-to-run network.
///
/// `stored` is the weight set exactly as it is saved (possibly holding int8
/// tensors); `params` holds the values the kernels consume.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    stored: WeightSet,
    params: ModelParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Token maps `[H',W',d]` entering fusion, one per enabled branch.
    pub branch_tokens: Vec<(ColorSpace, Tensor)>,
    pub fused: Tensor,
    pub residual: Option<NestedResidualTrace>,
    pub probabilities: [f32; 2],
    pub score: f32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
    Uniform(f32),
    Const(f32),
}

struct Spec {
    shape: Vec<usize>,
    init: Init,
}

fn push(specs: &mut IndexMap<String, Spec>, name: String, shape: &[usize], init: Init) {
    specs.insert(
        name,
        Spec {
            shape: shape.to_vec(),
            init,
        },
    );
}

fn push_bn(specs: &mut IndexMap<String, Spec>, prefix: &str, c: usize) {
    push(specs, format!("{prefix}.gamma"), &[c], Init::Const(1.0));
    push(specs, format!("{prefix}.beta"), &[c], Init::Const(0.0));
    push(
        specs,
        format!("{prefix}.running_mean"),
        &[c],
        Init::Const(0.0),
    );
    push(
        specs,
        format!("{prefix}.running_var"),
        &[c],
        Init::Const(1.0),
    );
}

fn push_conv(specs: &mut IndexMap<String, Spec>, prefix: &str, shape: [usize; 4]) {
    let fan_in = shape[1] * shape[2] * shape[3];
    push(
        specs,
        format!("{prefix}.weight"),
        &shape,
        Init::FanIn(fan_in),
    );
    push(
        specs,
        format!("{prefix}.bias"),
        &[shape[0]],
        Init::FanIn(fan_in),
    );
}

/// Every tensor the configuration needs, in file order.
fn tensor_specs(cfg: &ModelConfig) -> IndexMap<String, Spec> {
    let dims = cfg.dims();
    let att = dims.attention();
    let d = dims.dim;
    let mut specs = IndexMap::new();
    for space in cfg.enabled_branches() {
        let b = space.key();
        let mut c = 3;
        for (i, stage) in dims.backbone.iter().enumerate() {
            let p = format!("{b}.backbone.{i}");
            push_conv(&mut specs, &format!("{p}.depthwise"), [c, 1, 3, 3]);
            push_bn(&mut specs, &format!("{p}.bn1"), c);
            push_conv(
                &mut specs,
                &format!("{p}.pointwise"),
                [stage.channels, c, 1, 1],
            );
            push_bn(&mut specs, &format!("{p}.bn2"), stage.channels);
            c = stage.channels;
        }
        push_conv(&mut specs, &format!("{b}.bottleneck"), [d, c, 1, 1]);
        if cfg.attention_enabled {
            let fan = Init::FanIn(d);
            push(&mut specs, format!("{b}.attn.qkv.weight"), &[3 * d, d], fan);
            push(&mut specs, format!("{b}.attn.qkv.bias"), &[3 * d], fan);
            push(&mut specs, format!("{b}.attn.proj.weight"), &[d, d], fan);
            push(&mut specs, format!("{b}.attn.proj.bias"), &[d], fan);
            push(
                &mut specs,
                format!("{b}.attn.rel_bias_table"),
                &[att.heads, att.table_len()],
                Init::Uniform(REL_BIAS_INIT),
            );
        }
    }
    push_conv(&mut specs, "fusion", [d, d, 1, 1]);
    if cfg.residual_enabled {
        push_conv(&mut specs, "residual.conv1", [d, d, 3, 3]);
        push_bn(&mut specs, "residual.bn1", d);
        push_conv(&mut specs, "residual.conv2", [d, d, 3, 3]);
        push_bn(&mut specs, "residual.bn2", d);
    }
    push(&mut specs, "head.weight".into(), &[2, d], Init::FanIn(d));
    push(&mut specs, "head.bias".into(), &[2], Init::FanIn(d));
    specs
}

/// Name and shape of every tensor `cfg` stores, in file order.
pub(crate) fn tensor_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    tensor_specs(cfg)
        .into_iter()
        .map(|(name, spec)| (name, spec.shape))
        .collect()
}

/// 64-bit FNV-1a, used to give every tensor its own ChaCha stream.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn init_tensor(seed: u64, name: &str, spec: &Spec) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name.as_bytes()));
    let bound = match spec.init {
        Init::Const(v) => return Tensor::full(&spec.shape, v).expect("positive extents"),
        Init::FanIn(f) => 1.0 / (f as f32).sqrt(),
        Init::Uniform(b) => b,
    };
    Tensor::from_fn(&spec.shape, |_| rng.random_range(-bound..bound)).expect("positive extents")
}

/// Seeded float weights for `cfg`, independent of quantization settings.
///
/// Each tensor draws from ChaCha8 seeded with `cfg.seed` on a stream derived
/// from the tensor name, so disabling one component never changes the
/// weights of another.
pub fn init_weights(cfg: &ModelConfig) -> Result<WeightSet> {
    cfg.validate()?;
    Ok(tensor_specs(cfg)
        .iter()
        .map(|(name, spec)| {
            (
                name.clone(),
                StoredTensor::Float(init_tensor(cfg.seed, name, spec)),
            )
        })
        .collect())
}

/// Builds a model from its configuration with deterministic weights.
pub fn build_model(cfg: &ModelConfig) -> Result<Model> {
    Model::from_weights(cfg, init_weights(cfg)?)
}

/// Reads a weight file and checks it against `cfg`.
pub fn load_weights(path: &Path, cfg: &ModelConfig) -> Result<Model> {
    Model::from_weights(cfg, weights::load(path)?)
}

struct Materializer<'a> {
    set: &'a WeightSet,
}

impl Materializer<'_> {
    fn tensor(&self, name: &str) -> Tensor {
        self.set[name].materialize()
    }

    fn vec(&self, name: &str) -> Vec<f32> {
        self.tensor(name).into_data()
    }

    fn conv(&self, prefix: &str) -> ConvParams {
        ConvParams {
            weight: self.tensor(&format!("{prefix}.weight")),
            bias: self.tensor(&format!("{prefix}.bias")),
        }
    }

    fn bn(&self, prefix: &str) -> BatchNormParams {
        BatchNormParams {
            gamma: self.vec(&format!("{prefix}.gamma")),
            beta: self.vec(&format!("{prefix}.beta")),
            running_mean: self.vec(&format!("{prefix}.running_mean")),
            running_var: self.vec(&format!("{prefix}.running_var")),
            epsilon: BatchNormParams::DEFAULT_EPSILON,
        }
    }
}

impl Model {
    /// Validates `stored` against the tensors `cfg` requires and materializes
    /// the inference parameters. With `dq_enabled`, float tensors selected by
    /// the default policy are quantized first.
    pub fn from_weights(cfg: &ModelConfig, stored: WeightSet) -> Result<Model> {
        cfg.validate()?;
        let specs = tensor_specs(cfg);
        let dims = cfg.dims();
        let att = dims.attention();
        let dense_shape = [att.heads, att.tokens(), att.tokens()];

        let mut stored = stored;
        // A dense per-head bias matrix may stand in for the offset table.
        for space in cfg.enabled_branches() {
            let table = format!("{}.attn.rel_bias_table", space.key());
            let dense = format!("{}.attn.rel_bias_dense", space.key());
            if cfg.attention_enabled && !stored.contains_key(&table) {
                if let Some(t) = stored.get(&dense) {
                    if t.shape() != dense_shape {
                        return Err(Error::Load {
                            tensor: dense,
                            offset: 0,
                            reason: format!("shape {:?}, expected {dense_shape:?}", t.shape()),
                        });
                    }
                }
            }
        }
        for (name, spec) in &specs {
            let alt = name
                .strip_suffix("rel_bias_table")
                .map(|p| format!("{p}rel_bias_dense"));
            match stored.get(name) {
                Some(t) if t.shape() != spec.shape.as_slice() => {
                    return Err(Error::Load {
                        tensor: name.clone(),
                        offset: 0,
                        reason: format!("shape {:?}, config expects {:?}", t.shape(), spec.shape),
                    })
                }
                Some(_) => {}
                None if alt.as_ref().is_some_and(|a| stored.contains_key(a)) => {}
                None => {
                    return Err(Error::Load {
                        tensor: name.clone(),
                        offset: 0,
                        reason: "missing from weight set".into(),
                    })
                }
            }
        }
        if let Some(extra) = stored.keys().find(|k| {
            !specs.contains_key(*k)
                && !k
                    .strip_suffix("rel_bias_dense")
                    .is_some_and(|p| specs.contains_key(&format!("{p}rel_bias_table")))
        }) {
            return Err(Error::Load {
                tensor: extra.clone(),
                offset: 0,
                reason: "not used by this configuration".into(),
            });
        }
        for (name, t) in &stored {
            if !t.materialize().all_finite() {
                return Err(Error::Load {
                    tensor: name.clone(),
                    offset: 0,
                    reason: "non-finite weights".into(),
                });
            }
        }
        if cfg.dq_enabled {
            stored = quantize_model(&stored, &QuantPolicy::projections())?.0;
        } else if let Some((name, _)) = stored.iter().find(|(_, t)| t.is_quantized()) {
            return Err(Error::Load {
                tensor: name.clone(),
                offset: 0,
                reason: "int8 tensor but dq_enabled is false".into(),
            });
        }

        let m = Materializer { set: &stored };
        let mut branches = Vec::new();
        for space in cfg.enabled_branches() {
            let b = space.key();
            let blocks = dims
                .backbone
                .iter()
                .enumerate()
                .map(|(i, stage)| {
                    let p = format!("{b}.backbone.{i}");
                    SeparableBlock {
                        depthwise: m.conv(&format!("{p}.depthwise")),
                        bn1: m.bn(&format!("{p}.bn1")),
                        pointwise: m.conv(&format!("{p}.pointwise")),
                        bn2: m.bn(&format!("{p}.bn2")),
                        stride: stage.stride,
                    }
                })
                .collect();
            let attention = cfg.attention_enabled.then(|| {
                let table = format!("{b}.attn.rel_bias_table");
                let bias = if stored.contains_key(&table) {
                    PositionBias::Table(m.tensor(&table))
                } else {
                    PositionBias::Dense(m.tensor(&format!("{b}.attn.rel_bias_dense")))
                };
                AttentionParams {
                    qkv_weight: m.tensor(&format!("{b}.attn.qkv.weight")),
                    qkv_bias: m.tensor(&format!("{b}.attn.qkv.bias")),
                    out_weight: m.tensor(&format!("{b}.attn.proj.weight")),
                    out_bias: m.tensor(&format!("{b}.attn.proj.bias")),
                    bias,
                }
            });
            branches.push(BranchParams {
                space,
                backbone: BackboneParams { blocks },
                bottleneck: m.conv(&format!("{b}.bottleneck")),
                attention,
            });
        }
        let residual = cfg.residual_enabled.then(|| NestedResidualParams {
            conv1: m.conv("residual.conv1"),
            bn1: m.bn("residual.bn1"),
            conv2: m.conv("residual.conv2"),
            bn2: m.bn("residual.bn2"),
            pool: dims.pool,
        });
        let params = ModelParams {
            branches,
            fusion: m.conv("fusion"),
            residual,
            head: LinearParams {
                weight: m.tensor("head.weight"),
                bias: m.tensor("head.bias"),
            },
        };
        for bn in params
            .branches
            .iter()
            .flat_map(|b| b.backbone.blocks.iter().flat_map(|k| [&k.bn1, &k.bn2]))
            .chain(params.residual.iter().flat_map(|r| [&r.bn1, &r.bn2]))
        {
            bn.validate()?;
        }
        Ok(Model {
            config: cfg.clone(),
            stored,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn stored_weights(&self) -> &WeightSet {
        &self.stored
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        weights::save(&self.stored, path)
    }

    fn check_image(&self, img: &ColorImage) -> Result<()> {
        let size = self.config.dims().input_size;
        if img.space() != ColorSpace::Rgb {
            return Err(Error::Space {
                expected: ColorSpace::Rgb.to_string(),
                found: img.space().to_string(),
            });
        }
        if img.width() != size || img.height() != size {
            return Err(Error::shape(format!(
                "image is {}x{}, model expects {size}x{size}",
                img.width(),
                img.height()
            )));
        }
        Ok(())
    }

    /// Token map `[H',W',d]` one branch contributes to fusion.
    pub fn branch_tokens(&self, img: &ColorImage, branch: &BranchParams) -> Result<Tensor> {
        self.check_image(img)?;
        let x = image_to_tensor(&convert(img, branch.space)?);
        let feats = backbone_forward(&x, &branch.backbone)?;
        let tokens = bottleneck_project(&feats, &branch.bottleneck)?;
        match &branch.attention {
            Some(p) => multi_head_window_attention(&tokens, p, &self.config.dims().attention()),
            None => Ok(tokens),
        }
    }

    pub fn forward_traced(&self, img: &ColorImage) -> Result<ForwardTrace> {
        self.check_image(img)?;
        let mut branch_tokens = Vec::with_capacity(self.params.branches.len());
        for b in &self.params.branches {
            branch_tokens.push((b.space, self.branch_tokens(img, b)?));
        }
        let maps: Vec<Tensor> = branch_tokens.iter().map(|(_, t)| t.clone()).collect();
        let fused = fuse_branches(&maps, &self.params.fusion)?;
        let (features, layout, residual) = match &self.params.residual {
            Some(p) => {
                let (y, trace) = nested_residual_forward(&fused.hwc_to_chw()?, p)?;
                (y, FeatureLayout::Chw, Some(trace))
            }
            None => (fused.clone(), FeatureLayout::Hwc, None),
        };
        let probs = classifier_head(&features, layout, &self.params.head)?;
        let probabilities = [probs.data()[0], probs.data()[1]];
        Ok(ForwardTrace {
            branch_tokens,
            fused,
            residual,
            probabilities,
            score: probabilities[BONAFIDE],
        })
    }

    /// Bona fide probability for one RGB image.
    pub fn forward(&self, img: &ColorImage) -> Result<f32> {
        Ok(self.forward_traced(img)?.score)
    }
}

/// `path,score` CSV with rows in the given order.
pub fn score_rows_csv<S: AsRef<str>>(rows: &[(S, f32)]) -> String {
    let mut out = String::from("path,score\n");
    for (path, score) in rows {
        out.push_str(&format!("{},{score}\n", path.as_ref()));
    }
    out
}
