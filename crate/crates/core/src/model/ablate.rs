//! Component ablation table: one row of toggles and BPCER cells per config.

use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{build_model, ModelConfig};
use crate::colorspace::{load_ppm, ColorSpace};
use crate::error::{Error, Result};
use crate::metrics::{bpcer_at_apcer, read_score_csv, ScoreSet};

pub const ABLATION_HEADER: &str =
    "RGB,HSV,YCbCr,BottleNeck Attention,Residual Block,DQ,BPCER@APCER=5%,BPCER@APCER=10%";

const ON: &str = "✓";
const OFF: &str = "x";

/// Where the scores for one configuration come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EvalSource {
    /// A `label,score` CSV.
    Scores { scores: PathBuf },
    /// Directories of binary PPM images scored by the seeded model.
    Images {
        bonafide_dir: PathBuf,
        attack_dir: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub config: ModelConfig,
    #[serde(flatten)]
    pub source: EvalSource,
}

impl GridEntry {
    /// Parses a JSON array of entries.
    pub fn parse_grid(text: &str) -> Result<Vec<GridEntry>> {
        let grid: Vec<GridEntry> =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("grid JSON: {e}")))?;
        Ok(grid)
    }
}

/// The architecture columns of one row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Toggles {
    pub rgb: bool,
    pub hsv: bool,
    pub ycbcr: bool,
    pub attention: bool,
    pub residual: bool,
    pub dq: bool,
}

impl Toggles {
    pub fn of(cfg: &ModelConfig) -> Self {
        Toggles {
            rgb: cfg.has_branch(ColorSpace::Rgb),
            hsv: cfg.has_branch(ColorSpace::Hsv),
            ycbcr: cfg.has_branch(ColorSpace::YCbCr),
            attention: cfg.attention_enabled,
            residual: cfg.residual_enabled,
            dq: cfg.dq_enabled,
        }
    }

    pub fn cells(&self) -> [bool; 6] {
        [
            self.rgb,
            self.hsv,
            self.ycbcr,
            self.attention,
            self.residual,
            self.dq,
        ]
    }

    pub fn config(&self) -> ModelConfig {
        let branches: Vec<ColorSpace> = ColorSpace::ALL
            .into_iter()
            .zip([self.rgb, self.hsv, self.ycbcr])
            .filter_map(|(s, on)| on.then_some(s))
            .collect();
        ModelConfig {
            attention_enabled: self.attention,
            residual_enabled: self.residual,
            dq_enabled: self.dq,
            ..ModelConfig::default()
        }
        .with_branches(&branches)
    }
}

/// The seven component combinations of the reference ablation, in order.
pub fn reference_grid() -> Vec<ModelConfig> {
    const ROWS: [[bool; 6]; 7] = [
        [true, false, false, true, true, false],
        [true, true, false, true, true, false],
        [true, false, true, true, true, false],
        [true, true, true, true, false, false],
        [true, true, true, false, true, false],
        [true, true, true, true, true, false],
        [true, true, true, true, true, true],
    ];
    ROWS.iter()
        .map(|r| {
            Toggles {
                rgb: r[0],
                hsv: r[1],
                ycbcr: r[2],
                attention: r[3],
                residual: r[4],
                dq: r[5],
            }
            .config()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub toggles: Toggles,
    /// Fractions in `[0,1]`.
    pub bpcer_at_5: f64,
    pub bpcer_at_10: f64,
}

impl AblationRow {
    pub fn from_scores(cfg: &ModelConfig, scores: &ScoreSet) -> Result<Self> {
        Ok(AblationRow {
            toggles: Toggles::of(cfg),
            bpcer_at_5: bpcer_at_apcer(scores, 0.05)?.bpcer,
            bpcer_at_10: bpcer_at_apcer(scores, 0.10)?.bpcer,
        })
    }

    /// Toggle cells as `✓`/`x`, BPCER cells as percentages with two decimals.
    pub fn to_csv_line(&self) -> String {
        let mut cells: Vec<String> = self
            .toggles
            .cells()
            .iter()
            .map(|&on| if on { ON } else { OFF }.to_string())
            .collect();
        cells.push(format!("{:.2}", self.bpcer_at_5 * 100.0));
        cells.push(format!("{:.2}", self.bpcer_at_10 * 100.0));
        cells.join(",")
    }
}

fn ppm_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")));
    files.sort();
    Ok(files)
}

fn score_dir(model: &super::Model, dir: &Path) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for path in ppm_files(dir)? {
        let img = load_ppm(&std::fs::read(&path)?)?;
        out.push(model.forward(&img)? as f64);
    }
    Ok(out)
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Scores every grid entry and computes its row. Relative paths in sources
/// are resolved against `base`.
pub fn ablate(grid: &[GridEntry], base: &Path) -> Result<Vec<AblationRow>> {
    if grid.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for entry in grid {
        entry.config.validate()?;
        let scores = match &entry.source {
            EvalSource::Scores { scores } => read_score_csv(File::open(resolve(base, scores))?)?,
            EvalSource::Images {
                bonafide_dir,
                attack_dir,
            } => {
                let model = build_model(&entry.config)?;
                ScoreSet::new(
                    score_dir(&model, &resolve(base, bonafide_dir))?,
                    score_dir(&model, &resolve(base, attack_dir))?,
                )?
            }
        };
        rows.push(AblationRow::from_scores(&entry.config, &scores)?);
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(ABLATION_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv_line());
        out.push('\n');
    }
    out
}
