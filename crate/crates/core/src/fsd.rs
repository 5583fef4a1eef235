//! Face-guided fusion: two-stage face-centric cross-attention producing the
//! fused embedding, and the convolutional sentiment-weight branch.

use crate::error::{Error, Result};
use crate::numeric::{Tape, Tensor, Var};

/// Frame-aligned audio, visual and face tracks of one video, each `T×d`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub audio: Tensor,
    pub visual: Tensor,
    pub face: Tensor,
}

impl FeatureSequence {
    pub fn new(audio: Tensor, visual: Tensor, face: Tensor) -> Result<Self> {
        let shape = audio.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::dim("feature_sequence", &shape, &[0, 0]));
        }
        for t in [&visual, &face] {
            if t.shape() != shape.as_slice() {
                return Err(Error::dim("feature_sequence", &shape, t.shape()));
            }
        }
        if !(audio.is_finite() && visual.is_finite() && face.is_finite()) {
            return Err(Error::NonFinite("feature track".into()));
        }
        Ok(Self { audio, visual, face })
    }

    pub fn frame_count(&self) -> usize {
        self.audio.rows()
    }

    pub fn dim(&self) -> usize {
        self.audio.cols()
    }
}

/// Square `d×d` projections of one attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub query: Var,
    pub key: Var,
    pub value: Var,
    pub output: Var,
}

impl AttentionVars {
    /// Registers the four projections as trainable leaves.
    pub fn register(tape: &mut Tape, q: &Tensor, k: &Tensor, v: &Tensor, o: &Tensor) -> Self {
        Self {
            query: tape.variable(q.clone()),
            key: tape.variable(k.clone()),
            value: tape.variable(v.clone()),
            output: tape.variable(o.clone()),
        }
    }
}

/// Scaled dot-product attention split over `heads` heads of width `d/heads`,
/// heads concatenated and passed through the output projection.
pub fn multi_head_attention(
    tape: &mut Tape,
    query: Var,
    key: Var,
    value: Var,
    params: &AttentionVars,
    heads: usize,
) -> Result<Var> {
    let d = tape.shape(query)[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("head count {heads} does not divide dim {d}")));
    }
    if tape.shape(key) != tape.shape(value) || tape.shape(key)[1] != d {
        return Err(Error::dim("multi_head_attention", tape.shape(key), tape.shape(value)));
    }
    let q = tape.matmul(query, params.query)?;
    let k = tape.matmul(key, params.key)?;
    let v = tape.matmul(value, params.value)?;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, lo, hi)?,
                tape.slice_cols(k, lo, hi)?,
                tape.slice_cols(v, lo, hi)?,
            )
        };
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scores)?;
        outs.push(tape.matmul(attn, vh)?);
    }
    let joined = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    tape.matmul(joined, params.output)
}

/// Stage I: the face track queries the visual and audio tracks.
///
/// Returns `(F_v + MHA(F_f, F_v, F_v), F_a + MHA(F_f, F_a, F_a))`.
pub fn fci_stage1(
    tape: &mut Tape,
    audio: Var,
    visual: Var,
    face: Var,
    to_visual: &AttentionVars,
    to_audio: &AttentionVars,
    heads: usize,
) -> Result<(Var, Var)> {
    let av = multi_head_attention(tape, face, visual, visual, to_visual, heads)?;
    let visual_f = tape.add(visual, av)?;
    let aa = multi_head_attention(tape, face, audio, audio, to_audio, heads)?;
    let audio_f = tape.add(audio, aa)?;
    Ok((visual_f, audio_f))
}

/// Stage II: the face-guided tracks query each other; the two results are
/// concatenated into the `T×2d` fused embedding `[visual ; audio]`.
pub fn fci_stage2(
    tape: &mut Tape,
    visual_f: Var,
    audio_f: Var,
    to_visual: &AttentionVars,
    to_audio: &AttentionVars,
    heads: usize,
) -> Result<Var> {
    if tape.shape(visual_f) != tape.shape(audio_f) {
        return Err(Error::dim("fci_stage2", tape.shape(visual_f), tape.shape(audio_f)));
    }
    let av = multi_head_attention(tape, audio_f, visual_f, visual_f, to_visual, heads)?;
    let visual_af = tape.add(visual_f, av)?;
    let va = multi_head_attention(tape, visual_f, audio_f, audio_f, to_audio, heads)?;
    let audio_vf = tape.add(audio_f, va)?;
    tape.concat_cols(&[visual_af, audio_vf])
}

/// Convolutional encoder plus regression head of the sentiment-weight branch.
#[derive(Clone, Copy, Debug)]
pub struct GspVars {
    /// `k×3d×d`
    pub conv1_w: Var,
    pub conv1_b: Var,
    /// `k×d×d`
    pub conv2_w: Var,
    pub conv2_b: Var,
    /// `d×1`
    pub reg_w: Var,
    pub reg_b: Var,
}

/// `sigmoid(reg(conv2(relu(conv1([F_a; F_v; F_f])))))`, one weight per frame.
pub fn gsp_weight(tape: &mut Tape, audio: Var, visual: Var, face: Var, params: &GspVars) -> Result<Var> {
    let x = tape.concat_cols(&[audio, visual, face])?;
    let h = tape.conv1d(x, params.conv1_w, params.conv1_b)?;
    let h = tape.relu(h);
    let h = tape.conv1d(h, params.conv2_w, params.conv2_b)?;
    let r = tape.matmul(h, params.reg_w)?;
    let r = tape.add_row(r, params.reg_b)?;
    Ok(tape.sigmoid(r))
}

/// Per-frame sentiment weights in `(0, 1)`, shape `T×1`.
#[derive(Clone, Debug, PartialEq)]
pub struct SentimentWeights(pub Tensor);

impl SentimentWeights {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 2 || t.cols() != 1 {
            return Err(Error::dim("sentiment_weights", t.shape(), &[t.rows(), 1]));
        }
        if t.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidTensor("sentiment weight outside [0,1]".into()));
        }
        Ok(Self(t))
    }

    /// All-ones weights, used when the global branch is disabled.
    pub fn ones(frames: usize) -> Self {
        Self(Tensor::full(&[frames, 1], 1.0))
    }

    pub fn values(&self) -> &[f64] {
        self.0.data()
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}
