//! Dense soft pseudo-labels from point annotations: linear decay around each
//! point plus a non-sentiment gate driven by the model's own scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::ScoreMatrix;
use crate::numeric::Tensor;
use crate::pssc::PointAnnotationSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BspgConfig {
    /// Half-width of the smoothing window in frames.
    pub w: usize,
    /// Score at the window boundary.
    pub beta: f64,
    /// Non-sentiment gate threshold.
    pub tau: f64,
}

impl Default for BspgConfig {
    fn default() -> Self {
        Self {
            w: 7,
            beta: 0.6,
            tau: 0.95,
        }
    }
}

impl BspgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.w == 0 {
            return Err(Error::Config("bspg.w must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("bspg.beta {} outside [0,1]", self.beta)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("bspg.tau {} outside (0,1]", self.tau)));
        }
        Ok(())
    }
}

/// How training targets are built from points.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoLabelMode {
    /// No label propagation: the detached predictions serve as targets except
    /// at annotated frames, which get their one-hot label.
    None,
    /// Only annotated frames are labelled; every other frame is background,
    /// and the gate is applied.
    ThresholdOnly,
    /// Smoothing windows without the gate.
    StepOnly,
    /// Smoothing windows and the gate.
    #[default]
    Full,
}

impl PseudoLabelMode {
    pub const ALL: [PseudoLabelMode; 4] = [
        PseudoLabelMode::None,
        PseudoLabelMode::ThresholdOnly,
        PseudoLabelMode::StepOnly,
        PseudoLabelMode::Full,
    ];

    pub fn label(self) -> &'static str {
        match self {
            PseudoLabelMode::None => "None",
            PseudoLabelMode::ThresholdOnly => "Threshold Only",
            PseudoLabelMode::StepOnly => "Step Only",
            PseudoLabelMode::Full => "Full",
        }
    }
}

/// `β + (1−β)(1 − |t−t_p|/w)`.
pub fn smoothing_score(t: usize, t_p: usize, cfg: &BspgConfig) -> Result<f64> {
    let offset = t.abs_diff(t_p);
    if offset > cfg.w {
        return Err(Error::OutOfWindow { offset, window: cfg.w });
    }
    let r = offset as f64 / cfg.w as f64;
    Ok(cfg.beta + (1.0 - cfg.beta) * (1.0 - r))
}

/// Pseudo-labels with smoothing windows and gating (the `Full` mode).
pub fn generate_pseudo_labels(y: &ScoreMatrix, ann: &PointAnnotationSet, cfg: &BspgConfig) -> Result<ScoreMatrix> {
    generate_with_mode(y, ann, cfg, PseudoLabelMode::Full)
}

pub fn generate_with_mode(
    y: &ScoreMatrix,
    ann: &PointAnnotationSet,
    cfg: &BspgConfig,
    mode: PseudoLabelMode,
) -> Result<ScoreMatrix> {
    cfg.validate()?;
    let frames = y.frames();
    let c = y.class_count();
    ann.validate(frames, c)?;

    if mode == PseudoLabelMode::None {
        let mut out = y.tensor().clone();
        for p in ann.points() {
            for k in 0..=c {
                out.set(p.t, k, if k == p.class { 1.0 } else { 0.0 });
            }
        }
        return ScoreMatrix::new(out);
    }

    let w = if mode == PseudoLabelMode::ThresholdOnly {
        0
    } else {
        cfg.w
    };
    let gate = mode != PseudoLabelMode::StepOnly;
    let mut out = Tensor::zeros(&[frames, c + 1]);
    for t in 0..frames {
        let gated = gate && y.non_sentiment(t) > cfg.tau;
        // Points are sorted by time, so the first minimum is the earlier one.
        let nearest = ann
            .points()
            .iter()
            .filter(|p| p.t.abs_diff(t) <= w)
            .min_by_key(|p| p.t.abs_diff(t));
        match nearest {
            Some(p) if !gated => {
                let s = if w == 0 { 1.0 } else { smoothing_score(t, p.t, cfg)? };
                out.set(t, p.class, s);
                out.set(t, c, 1.0 - s);
            }
            _ => out.set(t, c, 1.0),
        }
    }
    ScoreMatrix::new(out)
}
