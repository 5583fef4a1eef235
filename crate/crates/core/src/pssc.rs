//! Point-aware contrast: class prototypes from annotated frames, similarity
//! scoring, top-K positive mining and the prototype contrastive loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsd::SentimentWeights;
use crate::numeric::{Tape, Tensor, Var};

/// One annotated frame. `class` is zero-based over the `C` sentiment classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointAnnotation {
    pub t: usize,
    pub class: usize,
}

/// The sparse supervision of one video, sorted by timestamp.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PointAnnotationSet {
    points: Vec<PointAnnotation>,
}

impl PointAnnotationSet {
    pub fn new(mut points: Vec<PointAnnotation>, frames: usize, class_count: usize) -> Result<Self> {
        points.sort_by_key(|p| p.t);
        for (i, p) in points.iter().enumerate() {
            if p.t >= frames {
                return Err(Error::Annotation(format!(
                    "timestamp {} outside video of {frames} frames",
                    p.t
                )));
            }
            if p.class >= class_count {
                return Err(Error::Annotation(format!(
                    "class {} is not a sentiment class (C = {class_count})",
                    p.class
                )));
            }
            if i > 0 && points[i - 1].t == p.t {
                return Err(Error::Annotation(format!("duplicate timestamp {}", p.t)));
            }
        }
        Ok(Self { points })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// Re-checks the invariants against a concrete video.
    pub fn validate(&self, frames: usize, class_count: usize) -> Result<()> {
        Self::new(self.points.clone(), frames, class_count).map(|_| ())
    }

    pub fn points(&self) -> &[PointAnnotation] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn frames_of(&self, class: usize) -> Vec<usize> {
        self.points.iter().filter(|p| p.class == class).map(|p| p.t).collect()
    }

    pub fn is_annotated(&self, t: usize) -> bool {
        self.points.binary_search_by_key(&t, |p| p.t).is_ok()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityMetric {
    #[default]
    Cosine,
    /// Negated L1 distance.
    L1,
    /// Negated Euclidean distance.
    L2,
    Dot,
}

impl SimilarityMetric {
    pub fn similarity(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            SimilarityMetric::Cosine => {
                let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    0.0
                } else {
                    dot(a, b) / (na * nb)
                }
            }
            SimilarityMetric::L1 => -a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>(),
            SimilarityMetric::L2 => -a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt(),
            SimilarityMetric::Dot => dot(a, b),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean embedding of one class's annotated frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototype {
    pub class: usize,
    pub vector: Vec<f64>,
}

pub fn class_prototype(ann: &PointAnnotationSet, f_mix: &Tensor, class: usize) -> Result<Prototype> {
    let frames = ann.frames_of(class);
    if frames.is_empty() {
        return Err(Error::AbsentClass(class));
    }
    let mut vector = vec![0.0; f_mix.cols()];
    for &t in &frames {
        for (acc, v) in vector.iter_mut().zip(f_mix.row(t)) {
            *acc += v;
        }
    }
    let n = frames.len() as f64;
    vector.iter_mut().for_each(|v| *v /= n);
    Ok(Prototype { class, vector })
}

/// Per-frame similarity to one class's annotated points.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceVector(pub Vec<f64>);

/// `d_t = mean_n sim(f_t, f_{t_n})` over the class's annotated frames `t_n`.
pub fn point_distance(
    f_mix: &Tensor,
    ann: &PointAnnotationSet,
    class: usize,
    metric: SimilarityMetric,
) -> Result<DistanceVector> {
    let frames = ann.frames_of(class);
    if frames.is_empty() {
        return Err(Error::AbsentClass(class));
    }
    let n = frames.len() as f64;
    let d = (0..f_mix.rows())
        .map(|t| {
            frames
                .iter()
                .map(|&p| metric.similarity(f_mix.row(t), f_mix.row(p)))
                .sum::<f64>()
                / n
        })
        .collect();
    Ok(DistanceVector(d))
}

/// Mined frames: `positives[c]` is `None` for classes absent from the video.
/// Negatives of class `c` are the frames claimed by any other class.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContrastSets {
    pub positives: Vec<Option<Vec<usize>>>,
    /// Weighted score of each frame under each present class.
    #[serde(skip)]
    pub scores: Vec<Option<Vec<f64>>>,
}

impl ContrastSets {
    pub fn class_count(&self) -> usize {
        self.positives.len()
    }

    /// Frames claimed by classes other than `class`, with their owner.
    pub fn negatives(&self, class: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (c, set) in self.positives.iter().enumerate() {
            if c == class {
                continue;
            }
            if let Some(set) = set {
                out.extend(set.iter().map(|&t| (t, c)));
            }
        }
        out.sort_unstable();
        out
    }

    /// JSON dump of positive/negative indices and weighted scores.
    pub fn debug_json(&self) -> serde_json::Value {
        let classes: Vec<_> = (0..self.class_count())
            .map(|c| {
                serde_json::json!({
                    "class": c,
                    "positives": self.positives[c],
                    "negatives": self.negatives(c).iter().map(|&(t, _)| t).collect::<Vec<_>>(),
                    "weighted_scores": self.scores[c],
                })
            })
            .collect();
        serde_json::json!({ "classes": classes })
    }
}

/// `K = ⌊T / divisor⌋`.
pub fn top_k_size(frames: usize, divisor: usize) -> Result<usize> {
    if divisor == 0 {
        return Err(Error::Config("k_divisor must be positive".into()));
    }
    Ok(frames / divisor)
}

/// Selects `k` unannotated frames per present class by descending
/// `w_t · d_t`. Candidates from all classes are ranked together (ties by
/// ascending frame, then class) and a frame is claimed by at most one class.
pub fn build_contrast_sets(
    distances: &[Option<DistanceVector>],
    weights: Option<&SentimentWeights>,
    ann: &PointAnnotationSet,
    k: usize,
) -> Result<ContrastSets> {
    let frames = match distances.iter().flatten().next() {
        Some(d) => d.0.len(),
        None => {
            return Ok(ContrastSets {
                positives: vec![None; distances.len()],
                scores: vec![None; distances.len()],
            })
        }
    };
    let free = frames.saturating_sub(ann.len());
    if k >= free {
        return Err(Error::Config(format!("top-K size {k} must be below T - N = {free}")));
    }
    if let Some(w) = weights {
        if w.len() != frames {
            return Err(Error::dim("build_contrast_sets", &[frames], &[w.len()]));
        }
    }
    let scores: Vec<Option<Vec<f64>>> = distances
        .iter()
        .map(|d| {
            d.as_ref().map(|d| {
                if d.0.len() != frames {
                    return Vec::new();
                }
                match weights {
                    Some(w) => d.0.iter().zip(w.values()).map(|(d, w)| d * w).collect(),
                    None => d.0.clone(),
                }
            })
        })
        .collect();
    if scores.iter().flatten().any(|s| s.len() != frames) {
        return Err(Error::Config("distance vectors differ in length".into()));
    }

    let mut candidates = Vec::new();
    for (c, s) in scores.iter().enumerate() {
        if let Some(s) = s {
            for (t, &v) in s.iter().enumerate() {
                if !ann.is_annotated(t) {
                    candidates.push((v, t, c));
                }
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut positives: Vec<Option<Vec<usize>>> = scores.iter().map(|s| s.as_ref().map(|_| Vec::new())).collect();
    let mut claimed = vec![false; frames];
    for (_, t, c) in candidates {
        let set = positives[c].as_mut().expect("candidate of present class");
        if claimed[t] || set.len() >= k {
            continue;
        }
        claimed[t] = true;
        set.push(t);
    }
    Ok(ContrastSets { positives, scores })
}

/// Prototype paired with a negative frame in the denominator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativePairing {
    /// Negatives of class `i` are scored against `p̄_i`.
    #[default]
    AnchorPrototype,
    /// Negatives are scored against the prototype of the class that claimed
    /// them.
    ClaimingPrototype,
}

/// `Σ_i −log(Σ⁺ exp(f̂_t·p̂_i) / (Σ⁺ exp(f̂_t·p̂_i) + Σ⁻ exp(f̂_t·p̂_k)))` over
/// present classes with a nonempty positive set, on unit-normalised
/// embeddings. Prototypes stay on the tape.
pub fn contrastive_loss(
    tape: &mut Tape,
    f_mix: Var,
    sets: &ContrastSets,
    ann: &PointAnnotationSet,
    pairing: NegativePairing,
) -> Result<Var> {
    let unit = tape.normalize_rows(f_mix, 1e-12)?;
    let mut protos = vec![None; sets.class_count()];
    for (c, slot) in protos.iter_mut().enumerate() {
        let frames = ann.frames_of(c);
        if frames.is_empty() || sets.positives[c].is_none() {
            continue;
        }
        let rows = tape.gather_rows(f_mix, &frames)?;
        let mean = tape.mean_rows(rows)?;
        *slot = Some(tape.normalize_rows(mean, 1e-12)?);
    }

    let mut terms = Vec::new();
    for c in 0..sets.class_count() {
        let (Some(pos), Some(proto)) = (sets.positives[c].as_ref(), protos[c]) else {
            continue;
        };
        if pos.is_empty() {
            log::warn!("class {c} has an empty positive set; skipping its contrast term");
            continue;
        }
        let pos_sum = exp_dot_sum(tape, unit, pos, proto)?;
        let negatives = sets.negatives(c);
        if negatives.is_empty() {
            // The ratio is exactly one.
            continue;
        }
        let mut neg_terms = Vec::new();
        match pairing {
            NegativePairing::AnchorPrototype => {
                let frames: Vec<usize> = negatives.iter().map(|&(t, _)| t).collect();
                neg_terms.push(exp_dot_sum(tape, unit, &frames, proto)?);
            }
            NegativePairing::ClaimingPrototype => {
                for (owner, owner_proto) in protos.iter().enumerate() {
                    let frames: Vec<usize> = negatives
                        .iter()
                        .filter(|&&(_, o)| o == owner)
                        .map(|&(t, _)| t)
                        .collect();
                    if frames.is_empty() {
                        continue;
                    }
                    let p = owner_proto.expect("claiming class is present");
                    neg_terms.push(exp_dot_sum(tape, unit, &frames, p)?);
                }
            }
        }
        let mut denom = pos_sum;
        for n in neg_terms {
            denom = tape.add(denom, n)?;
        }
        let log_denom = tape.log(denom)?;
        let log_pos = tape.log(pos_sum)?;
        terms.push(tape.sub(log_denom, log_pos)?);
    }

    let mut total = tape.constant(Tensor::scalar(0.0));
    for t in terms {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

fn exp_dot_sum(tape: &mut Tape, unit: Var, frames: &[usize], proto: Var) -> Result<Var> {
    let rows = tape.gather_rows(unit, frames)?;
    let dots = tape.matmul_nt(rows, proto)?;
    let e = tape.exp(dots)?;
    let s = tape.sum(e);
    Ok(s)
}
