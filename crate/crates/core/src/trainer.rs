//! Training loop: per-video forward/backward, pseudo-label and contrast-set
//! mining from the current predictions, AdamW updates, and inference.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bspg::{generate_with_mode, BspgConfig, PseudoLabelMode};
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, MetricsReport};
use crate::fsd::{FeatureSequence, SentimentWeights};
use crate::heads::ScoreMatrix;
use crate::losses::{base_loss, focal_align, total_loss, LossComponents, LossTerms, LossWeights};
use crate::model::{forward, ModelConfig, ModelParams, ParamVars};
use crate::numeric::{Tape, Tensor, Var};
use crate::pssc::{
    build_contrast_sets, contrastive_loss, point_distance, top_k_size, ContrastSets, NegativePairing,
    PointAnnotationSet, SimilarityMetric,
};
use crate::synth::Video;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub bspg: BspgConfig,
    pub loss: LossWeights,
    /// `K = ⌊T / k_divisor⌋` positives per class.
    pub k_divisor: usize,
    pub model: ModelConfig,
    pub pseudo_labels: PseudoLabelMode,
    pub metric: SimilarityMetric,
    pub negative_pairing: NegativePairing,
    pub use_base: bool,
    pub use_frame: bool,
    pub use_frame_glo: bool,
    pub use_sc: bool,
    /// Fraction of videos used for training; the rest are held out.
    pub train_fraction: f64,
    /// Held-out evaluation period in epochs; 0 evaluates only after the last.
    pub eval_every: usize,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 5e-4,
            epochs: 200,
            batch_size: 8,
            seed: 0,
            bspg: BspgConfig::default(),
            loss: LossWeights::default(),
            k_divisor: 8,
            model: ModelConfig::default(),
            pseudo_labels: PseudoLabelMode::Full,
            metric: SimilarityMetric::Cosine,
            negative_pairing: NegativePairing::AnchorPrototype,
            use_base: true,
            use_frame: true,
            use_frame_glo: true,
            use_sc: true,
            train_fraction: 0.8,
            eval_every: 0,
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.bspg.validate()?;
        self.loss.validate()?;
        self.eval.validate()?;
        if !(self.learning_rate > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "learning_rate must be positive, weight_decay nonnegative".into(),
            ));
        }
        if self.batch_size == 0 || self.k_divisor == 0 {
            return Err(Error::Config("batch_size and k_divisor must be positive".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Config("train_fraction must lie in (0,1]".into()));
        }
        Ok(())
    }
}

/// What the optimisation loop may see of a video: features and points only.
#[derive(Clone, Debug)]
pub struct TrainingVideo {
    pub id: String,
    pub features: FeatureSequence,
    pub points: PointAnnotationSet,
}

impl From<&Video> for TrainingVideo {
    fn from(v: &Video) -> Self {
        Self {
            id: v.id.clone(),
            features: v.features.clone(),
            points: v.points.clone(),
        }
    }
}

/// Seeded shuffle of `0..n` split into (train, held-out), each sorted.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let cut = ((n as f64) * train_fraction).round() as usize;
    let cut = cut.clamp(1.min(n), n);
    let mut train = idx[..cut].to_vec();
    let mut test = idx[cut..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Targets derived from the current predictions; constants for the backward
/// pass.
#[derive(Clone, Debug)]
pub struct Targets {
    pub pseudo: ScoreMatrix,
    pub sets: Option<ContrastSets>,
}

/// Builds the per-video objective on `tape`. With `frozen`, the given targets
/// are reused instead of being recomputed from this forward pass.
pub fn objective(
    tape: &mut Tape,
    vars: &ParamVars,
    cfg: &TrainConfig,
    features: &FeatureSequence,
    points: &PointAnnotationSet,
    frozen: Option<&Targets>,
) -> Result<(Var, LossTerms, Targets)> {
    let out = forward(tape, vars, &cfg.model, features)?;
    let gsp = cfg.model.architecture.gsp;
    let targets = match frozen {
        Some(t) => t.clone(),
        None => {
            let y = ScoreMatrix::new(tape.value(out.cas).clone())?;
            let pseudo = generate_with_mode(&y, points, &cfg.bspg, cfg.pseudo_labels)?;
            let sets = if cfg.use_sc {
                let weights = match out.weight {
                    Some(w) => Some(SentimentWeights::new(tape.value(w).clone())?),
                    None => None,
                };
                mine_contrast_sets(tape.value(out.f_mix), weights.as_ref(), points, cfg)?
            } else {
                None
            };
            Targets { pseudo, sets }
        }
    };

    let mut terms = LossTerms::default();
    if cfg.use_base {
        terms.base = Some(base_loss(tape, out.cas, targets.pseudo.tensor())?);
    }
    if cfg.use_frame {
        terms.frame = Some(focal_align(tape, out.cas, targets.pseudo.tensor(), cfg.loss.gamma)?);
    }
    if cfg.use_frame_glo && gsp {
        terms.frame_glo = Some(focal_align(
            tape,
            out.global_cas,
            targets.pseudo.tensor(),
            cfg.loss.gamma,
        )?);
    }
    if let Some(sets) = &targets.sets {
        terms.sc = Some(contrastive_loss(tape, out.f_mix, sets, points, cfg.negative_pairing)?);
    }
    let total = total_loss(tape, &terms, &cfg.loss)?;
    Ok((total, terms, targets))
}

fn mine_contrast_sets(
    f_mix: &Tensor,
    weights: Option<&SentimentWeights>,
    points: &PointAnnotationSet,
    cfg: &TrainConfig,
) -> Result<Option<ContrastSets>> {
    if points.is_empty() {
        return Ok(None);
    }
    let k = top_k_size(f_mix.rows(), cfg.k_divisor)?;
    if k == 0 {
        return Ok(None);
    }
    let distances = (0..cfg.model.class_count)
        .map(|c| {
            if points.frames_of(c).is_empty() {
                Ok(None)
            } else {
                point_distance(f_mix, points, c, cfg.metric).map(Some)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    build_contrast_sets(&distances, weights, points, k).map(Some)
}

type Grads = BTreeMap<String, Tensor>;

fn video_step(params: &ModelParams, cfg: &TrainConfig, video: &TrainingVideo) -> Result<(LossComponents, Grads)> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let (total, terms, _) = objective(&mut tape, &vars, cfg, &video.features, &video.points, None)?;
    let value = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
    let comp = LossComponents {
        step: 0,
        base: value(terms.base),
        frame: value(terms.frame),
        frame_glo: value(terms.frame_glo),
        sc: value(terms.sc),
        total: tape.value(total).item(),
    };
    if !comp.total.is_finite() {
        return Err(Error::NonFinite(format!("loss of video {}", video.id)));
    }
    let mut g = tape.backward(total)?;
    let grads = vars
        .iter()
        .filter_map(|(name, v)| g.take(v).map(|t| (name.to_string(), t)))
        .collect();
    Ok((comp, grads))
}

/// Adam moments with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u32,
    m: Grads,
    v: Grads,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update; parameters without a gradient are treated as having a
    /// zero gradient.
    pub fn step(&mut self, params: &mut ModelParams, grads: &Grads) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (lr, wd, b1, b2, eps) = (self.learning_rate, self.weight_decay, self.beta1, self.beta2, self.eps);
        for (name, p) in params.iter_mut() {
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let g = grads.get(name);
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                md[i] = b1 * md[i] + (1.0 - b1) * gi;
                vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
                let update = (md[i] / bc1) / ((vd[i] / bc2).sqrt() + eps);
                pd[i] -= lr * (update + wd * pd[i]);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochEval {
    pub epoch: usize,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Batch-mean loss components, one per optimiser step.
    pub steps: Vec<LossComponents>,
    pub evals: Vec<EpochEval>,
}

impl TrainHistory {
    pub fn loss_lines(&self) -> String {
        self.steps.iter().map(|c| c.to_json_line() + "\n").collect()
    }
}

/// Held-out scorer called between epochs. It lives outside this module so the
/// loop itself never sees segment boundaries.
pub type Monitor<'a> = &'a (dyn Fn(&ModelParams) -> Result<MetricsReport> + Sync);

/// Worker count from `FSENET_THREADS`, defaulting to the machine's
/// parallelism.
pub fn worker_threads() -> usize {
    std::env::var("FSENET_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub fn train(
    cfg: &TrainConfig,
    videos: &[TrainingVideo],
    monitor: Option<Monitor>,
) -> Result<(ModelParams, TrainHistory)> {
    cfg.validate()?;
    if videos.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    for v in videos {
        if v.features.dim() != cfg.model.input_dim {
            return Err(Error::Config(format!(
                "video {} has feature width {}, model expects {}",
                v.id,
                v.features.dim(),
                cfg.model.input_dim
            )));
        }
        v.points.validate(v.features.frame_count(), cfg.model.class_count)?;
    }
    let mut params = ModelParams::init(&cfg.model, cfg.seed)?;
    let mut history = TrainHistory::default();
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads())
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut order: Vec<usize> = (0..videos.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let step = history.steps.len();
            let results: Vec<Result<(LossComponents, Grads)>> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| video_step(&params, cfg, &videos[i]))
                    .collect()
            });
            let scale = 1.0 / batch.len() as f64;
            let mut mean = LossComponents {
                step,
                ..Default::default()
            };
            let mut grads: Grads = BTreeMap::new();
            for r in results {
                let (comp, g) = r.map_err(|e| Error::Divergence {
                    step,
                    detail: e.to_string(),
                })?;
                mean.accumulate(&comp, scale);
                for (name, t) in g {
                    match grads.get_mut(&name) {
                        Some(acc) => acc.add_assign(&t),
                        None => {
                            grads.insert(name, t);
                        }
                    }
                }
            }
            for t in grads.values_mut() {
                *t = t.scale(scale);
            }
            opt.step(&mut params, &grads);
            if !params.iter().all(|(_, t)| t.is_finite()) {
                return Err(Error::Divergence {
                    step,
                    detail: "non-finite parameter after update".into(),
                });
            }
            log::debug!("{}", mean.to_json_line());
            history.steps.push(mean);
        }
        let last = epoch + 1 == cfg.epochs;
        let due = cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0;
        if let Some(m) = monitor {
            if due || last {
                let report = m(&params)?;
                log::info!("epoch {}: avg mAP {:.4}", epoch + 1, report.avg_map);
                history.evals.push(EpochEval {
                    epoch: epoch + 1,
                    report,
                });
            }
        }
    }
    Ok((params, history))
}

/// Forward-only outputs of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub cas: ScoreMatrix,
    pub global_cas: ScoreMatrix,
    pub weights: SentimentWeights,
}

pub fn infer(params: &ModelParams, features: &FeatureSequence) -> Result<Inference> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let out = forward(&mut tape, &vars, &params.config, features)?;
    let weights = match out.weight {
        Some(w) => SentimentWeights::new(tape.value(w).clone())?,
        None => SentimentWeights::ones(features.frame_count()),
    };
    Ok(Inference {
        cas: ScoreMatrix::new(tape.value(out.cas).clone())?,
        global_cas: ScoreMatrix::new(tape.value(out.global_cas).clone())?,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthSpec};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 2,
            model: ModelConfig {
                input_dim: 6,
                dim: 8,
                heads: 2,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn tiny_data() -> Vec<TrainingVideo> {
        let spec = SynthSpec {
            video_count: 4,
            frame_range: [24, 32],
            segment_length: [3, 6],
            feature_dim: 6,
            ..Default::default()
        };
        generate(&spec)
            .unwrap()
            .videos
            .iter()
            .map(TrainingVideo::from)
            .collect()
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let cfg = TrainConfig {
            epochs: 0,
            ..tiny_cfg()
        };
        let (p, h) = train(&cfg, &tiny_data(), None).unwrap();
        assert_eq!(p, ModelParams::init(&cfg.model, cfg.seed).unwrap());
        assert!(h.steps.is_empty());
    }

    #[test]
    fn identical_seeds_identical_history() {
        let data = tiny_data();
        let (p1, h1) = train(&tiny_cfg(), &data, None).unwrap();
        let (p2, h2) = train(&tiny_cfg(), &data, None).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(h1.loss_lines(), h2.loss_lines());
        assert_eq!(h1.steps.len(), 3 * 2);
    }

    #[test]
    fn weight_decay_alone_shrinks_norm_every_step() {
        let cfg = TrainConfig {
            use_base: false,
            use_frame: false,
            use_frame_glo: false,
            use_sc: false,
            weight_decay: 0.1,
            ..tiny_cfg()
        };
        let data = tiny_data();
        let mut params = ModelParams::init(&cfg.model, 3).unwrap();
        let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
        let mut prev = params.norm();
        for _ in 0..5 {
            let (comp, grads) = video_step(&params, &cfg, &data[0]).unwrap();
            assert_eq!(comp.total, 0.0);
            opt.step(&mut params, &grads);
            let n = params.norm();
            assert!(n < prev);
            prev = n;
        }
    }

    #[test]
    fn zero_params_infer_halves() {
        let cfg = tiny_cfg();
        let p = ModelParams::zeros(&cfg.model).unwrap();
        let v = &tiny_data()[0];
        let out = infer(&p, &v.features).unwrap();
        let t = v.features.frame_count();
        assert_eq!(out.cas.tensor().shape(), &[t, 3]);
        assert_eq!(out.weights.0.shape(), &[t, 1]);
        assert!(out.cas.tensor().data().iter().all(|&x| x == 0.5));
        assert!(out.weights.values().iter().all(|&x| x == 0.5));
        assert_eq!(out, infer(&p, &v.features).unwrap());
    }

    #[test]
    fn mismatched_feature_width_is_config_error() {
        let cfg = tiny_cfg();
        let p = ModelParams::zeros(&ModelConfig {
            input_dim: 5,
            ..cfg.model.clone()
        })
        .unwrap();
        let v = &tiny_data()[0];
        assert!(matches!(infer(&p, &v.features), Err(Error::Config(_))));
    }

    #[test]
    fn split_is_eighty_twenty_and_seeded() {
        let (tr, te) = split_indices(62, 0.8, 5);
        assert_eq!((tr.len(), te.len()), (50, 12));
        assert_eq!(split_indices(62, 0.8, 5), (tr.clone(), te.clone()));
        let mut all: Vec<usize> = tr.iter().chain(&te).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..62).collect::<Vec<_>>());
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = TrainConfig::default();
        let s = serde_json::to_string(&cfg).unwrap();
        let back: TrainConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(cfg, back);
        let partial: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "bspg": {"w": 4}}"#).unwrap();
        assert_eq!((partial.epochs, partial.bspg.w, partial.bspg.beta), (3, 4, 0.6));
    }
}
