use serde::{Deserialize, Serialize};

use crate::attention::WindowAttentionConfig;
use crate::colorspace::ColorSpace;
use crate::error::{Error, Result};

/// One depthwise-separable backbone stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    /// Output channels of the pointwise convolution.
    pub channels: usize,
    pub stride: usize,
}

/// Every architectural dimension of the network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Side of the square input image.
    pub input_size: usize,
    pub backbone: Vec<StageSpec>,
    /// Token width `d`.
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    /// Pool factor of the nested residual block.
    pub pool: usize,
}

impl Dims {
    fn default_backbone() -> Vec<StageSpec> {
        [16, 32, 64]
            .into_iter()
            .map(|channels| StageSpec {
                channels,
                stride: 2,
            })
            .collect()
    }

    /// 112x112 input, three stride-2 stages to a 14x14 map, d=64, 4 heads.
    pub fn desk() -> Self {
        Dims {
            input_size: 112,
            backbone: Self::default_backbone(),
            dim: 64,
            heads: 4,
            window: 7,
            pool: 2,
        }
    }

    /// Full-size attention: d=768, 24 heads of 32, 7x7 windows.
    pub fn paper() -> Self {
        Dims {
            dim: 768,
            heads: 24,
            ..Self::desk()
        }
    }

    pub fn total_stride(&self) -> usize {
        self.backbone.iter().map(|s| s.stride.max(1)).product()
    }

    /// Side of the backbone output map.
    pub fn feature_size(&self) -> usize {
        self.input_size / self.total_stride()
    }

    pub fn backbone_channels(&self) -> usize {
        self.backbone.last().map_or(3, |s| s.channels)
    }

    pub fn attention(&self) -> WindowAttentionConfig {
        WindowAttentionConfig {
            dim: self.dim,
            heads: self.heads,
            window: self.window,
        }
    }

    fn collect_violations(&self, out: &mut Vec<String>) {
        for (name, v) in [
            ("input_size", self.input_size),
            ("dim", self.dim),
            ("heads", self.heads),
            ("window", self.window),
            ("pool", self.pool),
        ] {
            if v == 0 {
                out.push(format!("{name} must be positive"));
            }
        }
        for (i, s) in self.backbone.iter().enumerate() {
            if s.channels == 0 || s.stride == 0 {
                out.push(format!(
                    "backbone stage {i} needs positive channels and stride"
                ));
            }
        }
        if self.heads > 0 && !self.dim.is_multiple_of(self.heads) {
            out.push(format!(
                "d={} is not divisible by h={}",
                self.dim, self.heads
            ));
        }
        let stride = self.total_stride();
        if !self.input_size.is_multiple_of(stride) {
            out.push(format!(
                "input_size {} is not divisible by the backbone stride {stride}",
                self.input_size
            ));
            return;
        }
        let feat = self.feature_size();
        if self.window > 0 && !feat.is_multiple_of(self.window) {
            out.push(format!(
                "backbone output {feat}x{feat} is not divisible by window {}",
                self.window
            ));
        }
        if self.pool > 0 && !feat.is_multiple_of(self.pool) {
            out.push(format!(
                "backbone output {feat}x{feat} is not divisible by pool factor {}",
                self.pool
            ));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
    Custom(Dims),
}

/// How 8-bit pixels become branch inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputScaling {
    /// Divide by 255; no per-channel mean/std normalization.
    #[default]
    Unit,
}

fn default_branches() -> Vec<ColorSpace> {
    ColorSpace::ALL.to_vec()
}

fn yes() -> bool {
    true
}

fn default_preset() -> Preset {
    Preset::Desk
}

/// Architecture toggles, dimensions and initialization seed.
///
/// Serialized as JSON; omitted fields default to the full desk-scale model
/// with seed 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_branches")]
    pub branches: Vec<ColorSpace>,
    #[serde(default = "yes")]
    pub attention_enabled: bool,
    #[serde(default = "yes")]
    pub residual_enabled: bool,
    #[serde(default)]
    pub dq_enabled: bool,
    #[serde(default = "default_preset")]
    pub preset: Preset,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub input_scaling: InputScaling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            branches: default_branches(),
            attention_enabled: true,
            residual_enabled: true,
            dq_enabled: false,
            preset: Preset::Desk,
            seed: 0,
            input_scaling: InputScaling::Unit,
        }
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self::default()
    }

    pub fn paper() -> Self {
        ModelConfig {
            preset: Preset::Paper,
            ..Self::default()
        }
    }

    pub fn with_branches(mut self, branches: &[ColorSpace]) -> Self {
        self.branches = branches.to_vec();
        self
    }

    pub fn dims(&self) -> Dims {
        match &self.preset {
            Preset::Desk => Dims::desk(),
            Preset::Paper => Dims::paper(),
            Preset::Custom(d) => d.clone(),
        }
    }

    /// Enabled branches in canonical RGB, HSV, YCbCr order.
    pub fn enabled_branches(&self) -> Vec<ColorSpace> {
        ColorSpace::ALL
            .into_iter()
            .filter(|s| self.branches.contains(s))
            .collect()
    }

    pub fn has_branch(&self, space: ColorSpace) -> bool {
        self.branches.contains(&space)
    }

    /// Checks every invariant and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.branches.is_empty() {
            problems.push("at least one color-space branch must be enabled".to_string());
        }
        for (i, b) in self.branches.iter().enumerate() {
            if self.branches[..i].contains(b) {
                problems.push(format!("branch {b} listed more than once"));
            }
        }
        self.dims().collect_violations(&mut problems);
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config JSON: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}
