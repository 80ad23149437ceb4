//! ISO/IEC 30107-3 style PAD error rates over labeled score sets.
//!
//! Scores express confidence that a presentation is bona fide. A
//! presentation is accepted as bona fide iff `score >= threshold`.

use std::collections::BTreeMap;
use std::io::Read;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    bonafide: Vec<f64>,
    attack: Vec<f64>,
}

impl ScoreSet {
    pub fn new(bonafide: Vec<f64>, attack: Vec<f64>) -> Result<Self> {
        if bonafide.is_empty() {
            return Err(Error::Scores("no bona fide scores".into()));
        }
        if attack.is_empty() {
            return Err(Error::Scores("no attack scores".into()));
        }
        if bonafide.iter().chain(&attack).any(|v| !v.is_finite()) {
            return Err(Error::Scores("scores must be finite".into()));
        }
        Ok(ScoreSet { bonafide, attack })
    }

    pub fn bonafide(&self) -> &[f64] {
        &self.bonafide
    }

    pub fn attack(&self) -> &[f64] {
        &self.attack
    }

    fn sorted(&self) -> SortedScores {
        let mut b = self.bonafide.clone();
        let mut a = self.attack.clone();
        b.sort_by(f64::total_cmp);
        a.sort_by(f64::total_cmp);
        SortedScores {
            bonafide: b,
            attack: a,
        }
    }
}

struct SortedScores {
    bonafide: Vec<f64>,
    attack: Vec<f64>,
}

impl SortedScores {
    fn apcer(&self, t: f64) -> f64 {
        let rejected = self.attack.partition_point(|&s| s < t);
        (self.attack.len() - rejected) as f64 / self.attack.len() as f64
    }

    fn bpcer(&self, t: f64) -> f64 {
        self.bonafide.partition_point(|&s| s < t) as f64 / self.bonafide.len() as f64
    }
}

/// Fraction of attacks accepted as bona fide at `threshold`.
pub fn apcer_at(s: &ScoreSet, threshold: f64) -> f64 {
    let accepted = s.attack.iter().filter(|&&a| a >= threshold).count();
    accepted as f64 / s.attack.len() as f64
}

/// Fraction of bona fide presentations rejected at `threshold`.
pub fn bpcer_at(s: &ScoreSet, threshold: f64) -> f64 {
    let rejected = s.bonafide.iter().filter(|&&b| b < threshold).count();
    rejected as f64 / s.bonafide.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub apcer: f64,
    pub bpcer: f64,
}

/// One point per distinct score plus `-inf` and `+inf` sentinels, in
/// ascending threshold order.
pub fn det_curve(s: &ScoreSet) -> Vec<DetPoint> {
    let sorted = s.sorted();
    let mut thresholds: Vec<f64> = sorted
        .bonafide
        .iter()
        .chain(&sorted.attack)
        .copied()
        .collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    std::iter::once(f64::NEG_INFINITY)
        .chain(thresholds)
        .chain(std::iter::once(f64::INFINITY))
        .map(|t| DetPoint {
            threshold: t,
            apcer: sorted.apcer(t),
            bpcer: sorted.bpcer(t),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eer {
    pub eer: f64,
    pub threshold: f64,
}

/// Equal error rate over the DET thresholds: the point minimising
/// `|apcer - bpcer|` (smallest threshold on ties), reported as the mean of
/// the two rates there.
pub fn eer(s: &ScoreSet) -> Eer {
    let curve = det_curve(s);
    let best = curve
        .iter()
        .copied()
        .reduce(|best, p| {
            if (p.apcer - p.bpcer).abs() < (best.apcer - best.bpcer).abs() {
                p
            } else {
                best
            }
        })
        .expect("curve has sentinels");
    Eer {
        eer: (best.apcer + best.bpcer) / 2.0,
        threshold: best.threshold,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub bpcer: f64,
    pub threshold: f64,
}

/// Lowest BPCER among DET points with `apcer <= alpha`, at the smallest
/// threshold achieving it.
pub fn bpcer_at_apcer(s: &ScoreSet, alpha: f64) -> Result<OperatingPoint> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Scores(format!(
            "APCER target {alpha} must lie in (0, 1)"
        )));
    }
    let best = det_curve(s)
        .into_iter()
        .filter(|p| p.apcer <= alpha)
        .reduce(|best, p| if p.bpcer < best.bpcer { p } else { best })
        .expect("+inf sentinel always has apcer 0");
    Ok(OperatingPoint {
        bpcer: best.bpcer,
        threshold: best.threshold,
    })
}

/// Draws `n` bona fide scores from `N(mu_bonafide, sigma^2)` followed by `n`
/// attack scores from `N(mu_attack, sigma^2)`, using ChaCha8 seeded with
/// `seed` via `SeedableRng::seed_from_u64`.
pub fn synth_scores(
    mu_bonafide: f64,
    mu_attack: f64,
    sigma: f64,
    n: usize,
    seed: u64,
) -> Result<ScoreSet> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Scores(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    if n == 0 {
        return Err(Error::Scores("n must be at least 1".into()));
    }
    if !mu_bonafide.is_finite() || !mu_attack.is_finite() {
        return Err(Error::Scores("means must be finite".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nb = Normal::new(mu_bonafide, sigma).expect("validated");
    let na = Normal::new(mu_attack, sigma).expect("validated");
    let bonafide = (0..n).map(|_| nb.sample(&mut rng)).collect();
    let attack = (0..n).map(|_| na.sample(&mut rng)).collect();
    ScoreSet::new(bonafide, attack)
}

/// Parses a `label,score` CSV. Errors carry the 1-based file line.
pub fn read_score_csv(reader: impl Read) -> Result<ScoreSet> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Csv {
            line: 1,
            reason: e.to_string(),
        })?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["label", "score"] {
        return Err(Error::Csv {
            line: 1,
            reason: format!(
                "expected header `label,score`, found `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    let (mut bonafide, mut attack) = (Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Csv {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let (label, raw) = (&rec[0], &rec[1]);
        let score: f64 = raw
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| Error::Csv {
                line,
                reason: format!("invalid score `{raw}`"),
            })?;
        match label {
            "bonafide" => bonafide.push(score),
            "attack" => attack.push(score),
            other => {
                return Err(Error::Csv {
                    line,
                    reason: format!("unknown label `{other}` (expected bonafide or attack)"),
                })
            }
        }
    }
    ScoreSet::new(bonafide, attack)
}

pub fn write_score_csv(s: &ScoreSet) -> String {
    let mut out = String::from("label,score\n");
    for v in &s.bonafide {
        out.push_str(&format!("bonafide,{v}\n"));
    }
    for v in &s.attack {
        out.push_str(&format!("attack,{v}\n"));
    }
    out
}

pub fn det_csv(points: &[DetPoint]) -> String {
    let mut out = String::from("threshold,apcer,bpcer\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.threshold, p.apcer, p.bpcer));
    }
    out
}

/// EER plus BPCER at each requested APCER target.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub eer: f64,
    /// `None` serializes as `null` (an infinite sentinel threshold).
    pub threshold: Option<f64>,
    pub bpcer_at: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn compute(s: &ScoreSet, apcer_targets: &[f64]) -> Result<Self> {
        let e = eer(s);
        let mut bpcer_at = BTreeMap::new();
        for &alpha in apcer_targets {
            bpcer_at.insert(format!("{alpha}"), bpcer_at_apcer(s, alpha)?.bpcer);
        }
        Ok(EvalReport {
            eer: e.eer,
            threshold: e.threshold.is_finite().then_some(e.threshold),
            bpcer_at,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}
