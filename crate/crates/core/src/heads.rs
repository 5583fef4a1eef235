//! Frame-level class heads and their fusion with the sentiment weight.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::fsd::SentimentWeights;
use crate::numeric::{Tape, Tensor, Var};

/// `T×(C+1)` matrix of scores in `[0,1]`; the last column is non-sentiment.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    scores: Tensor,
}

impl ScoreMatrix {
    pub fn new(scores: Tensor) -> Result<Self> {
        if scores.rank() != 2 || scores.cols() < 2 {
            return Err(Error::dim("score_matrix", scores.shape(), &[0, 2]));
        }
        if scores.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidTensor("score outside [0,1]".into()));
        }
        Ok(Self { scores })
    }

    /// Every row `(0, …, 0, 1)`.
    pub fn background(frames: usize, class_count: usize) -> Self {
        let mut t = Tensor::zeros(&[frames, class_count + 1]);
        for r in 0..frames {
            t.set(r, class_count, 1.0);
        }
        Self { scores: t }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.scores
    }

    pub fn into_tensor(self) -> Tensor {
        self.scores
    }

    pub fn frames(&self) -> usize {
        self.scores.rows()
    }

    /// Number of sentiment classes `C` (excludes the non-sentiment column).
    pub fn class_count(&self) -> usize {
        self.scores.cols() - 1
    }

    pub fn get(&self, t: usize, c: usize) -> f64 {
        self.scores.get(t, c)
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.scores.row(t)
    }

    pub fn non_sentiment(&self, t: usize) -> f64 {
        self.scores.get(t, self.class_count())
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        self.scores.column_values(c)
    }

    /// CSV with header `t,class_0,…,class_C`, one row per frame.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for c in 0..=self.class_count() {
            let _ = write!(out, ",class_{c}");
        }
        out.push('\n');
        for t in 0..self.frames() {
            let _ = write!(out, "{t}");
            for v in self.row(t) {
                let _ = write!(out, ",{v:.6}");
            }
            out.push('\n');
        }
        out
    }
}

/// `C+1` independent pointwise classifiers over the fused embedding, one
/// `(k×2d×1 weight, 1×1 bias)` pair per class.
#[derive(Clone, Debug)]
pub struct ClsVars {
    pub heads: Vec<(Var, Var)>,
}

/// `sigmoid(CLS(F_mix))`, shape `T×(C+1)`.
pub fn cas(tape: &mut Tape, f_mix: Var, params: &ClsVars) -> Result<Var> {
    let mut cols = Vec::with_capacity(params.heads.len());
    for &(w, b) in &params.heads {
        cols.push(tape.conv1d(f_mix, w, b)?);
    }
    let logits = tape.concat_cols(&cols)?;
    Ok(tape.sigmoid(logits))
}

/// Scales sentiment columns by `w_t` and the non-sentiment column by `1 - w_t`.
pub fn global_cas(tape: &mut Tape, y: Var, w: Var) -> Result<Var> {
    let (t, n) = (tape.shape(y)[0], tape.shape(y)[1]);
    if tape.shape(w) != [t, 1] {
        return Err(Error::dim("global_cas", tape.shape(y), tape.shape(w)));
    }
    let c = n - 1;
    let sent = tape.slice_cols(y, 0, c)?;
    let sent = tape.mul_col(sent, w)?;
    let ns = tape.slice_cols(y, c, n)?;
    let inv = tape.affine(w, -1.0, 1.0);
    let ns = tape.mul(ns, inv)?;
    tape.concat_cols(&[sent, ns])
}

/// Value-level version of [`global_cas`].
pub fn global_cas_values(y: &ScoreMatrix, w: &SentimentWeights) -> Result<ScoreMatrix> {
    if y.frames() != w.len() {
        return Err(Error::dim("global_cas", y.tensor().shape(), w.0.shape()));
    }
    let c = y.class_count();
    let mut out = y.tensor().clone();
    for (t, &wt) in w.values().iter().enumerate() {
        for k in 0..c {
            out.set(t, k, wt * y.get(t, k));
        }
        out.set(t, c, (1.0 - wt) * y.get(t, c));
    }
    ScoreMatrix::new(out)
}
