//! Training objective: video-level base loss, soft-target focal alignment and
//! their weighted total.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Tape, Tensor, Var};

const PROB_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.05,
            gamma: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("gamma", self.gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss.{name} must be a nonnegative number")));
            }
        }
        Ok(())
    }
}

/// `−Σ_{c<C} avg_t(ŷ_c) · log max(avg_t(y_c), 1e-8)`.
pub fn base_loss(tape: &mut Tape, y: Var, y_hat: &Tensor) -> Result<Var> {
    if tape.shape(y) != y_hat.shape() {
        return Err(Error::dim("base_loss", tape.shape(y), y_hat.shape()));
    }
    let classes = y_hat.cols() - 1;
    let avg = tape.mean_rows(y)?;
    let avg = tape.slice_cols(avg, 0, classes)?;
    let avg = tape.clamp(avg, PROB_FLOOR, f64::INFINITY);
    let log_avg = tape.log(avg)?;

    let frames = y_hat.rows() as f64;
    let target: Vec<f64> = (0..classes)
        .map(|c| -y_hat.column_values(c).iter().sum::<f64>() / frames)
        .collect();
    let target = tape.constant(Tensor::matrix(1, classes, target)?);
    let weighted = tape.mul(log_avg, target)?;
    Ok(tape.sum(weighted))
}

/// Mean over frames of `Σ_c −q(1−p)^γ log p − (1−q) p^γ log(1−p)`, with `p`
/// clamped to `[1e-8, 1−1e-8]`.
pub fn focal_align(tape: &mut Tape, pred: Var, target: &Tensor, gamma: f64) -> Result<Var> {
    if tape.shape(pred) != target.shape() {
        return Err(Error::dim("focal_align", tape.shape(pred), target.shape()));
    }
    let p = tape.clamp(pred, PROB_FLOOR, 1.0 - PROB_FLOOR);
    let q = tape.constant(target.clone());
    let q_bar = tape.constant(target.map(|v| 1.0 - v));

    let one_minus_p = tape.affine(p, -1.0, 1.0);
    let log_p = tape.log(p)?;
    let log_1p = tape.log(one_minus_p)?;
    let pos = tape.powf(one_minus_p, gamma);
    let pos = tape.mul(pos, log_p)?;
    let pos = tape.mul(pos, q)?;
    let neg = tape.powf(p, gamma);
    let neg = tape.mul(neg, log_1p)?;
    let neg = tape.mul(neg, q_bar)?;
    let both = tape.add(pos, neg)?;
    let s = tape.sum(both);
    Ok(tape.scale(s, -1.0 / target.rows() as f64))
}

/// The four objective terms of one video; disabled terms are `None`.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub base: Option<Var>,
    pub frame: Option<Var>,
    pub frame_glo: Option<Var>,
    pub sc: Option<Var>,
}

/// `base + λ₁(frame + frame_glo) + λ₂·sc` on the tape.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, weights: &LossWeights) -> Result<Var> {
    let mut total = tape.constant(Tensor::scalar(0.0));
    let scaled = [
        (terms.base, 1.0),
        (terms.frame, weights.lambda1),
        (terms.frame_glo, weights.lambda1),
        (terms.sc, weights.lambda2),
    ];
    for (term, w) in scaled {
        if let Some(v) = term {
            let v = tape.scale(v, w);
            total = tape.add(total, v)?;
        }
    }
    Ok(total)
}

/// Scalar values of each term after a forward pass, logged once per step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub step: usize,
    pub base: f64,
    pub frame: f64,
    pub frame_glo: f64,
    pub sc: f64,
    pub total: f64,
}

impl LossComponents {
    pub fn combine(&self, weights: &LossWeights) -> f64 {
        self.base + weights.lambda1 * (self.frame + self.frame_glo) + weights.lambda2 * self.sc
    }

    /// Adds `other` scaled by `s`, keeping this step index.
    pub fn accumulate(&mut self, other: &LossComponents, s: f64) {
        self.base += s * other.base;
        self.frame += s * other.frame;
        self.frame_glo += s * other.frame_glo;
        self.sc += s * other.sc;
        self.total += s * other.total;
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain struct serialises")
    }
}
