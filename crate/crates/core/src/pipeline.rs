//! End-to-end helpers shared by the command line, the ablation grids and the
//! tests: held-out scoring and a split/train/evaluate run.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::eval::{evaluate, extract_segments, EvalConfig, MetricsReport, SentimentSegment};
use crate::model::ModelParams;
use crate::synth::{Dataset, Video};
use crate::trainer::{infer, split_indices, train, TrainConfig, TrainHistory, TrainingVideo};

/// Proposals for one video from its reweighted scores.
pub fn predict_segments(params: &ModelParams, video: &Video, cfg: &EvalConfig) -> Result<Vec<SentimentSegment>> {
    let out = infer(params, &video.features)?;
    Ok(extract_segments(&out.global_cas, cfg))
}

pub fn evaluate_model(params: &ModelParams, videos: &[&Video], cfg: &EvalConfig) -> Result<MetricsReport> {
    let mut predictions = BTreeMap::new();
    let mut truth = BTreeMap::new();
    for v in videos {
        predictions.insert(v.id.clone(), predict_segments(params, v, cfg)?);
        truth.insert(v.id.clone(), v.segments.clone());
    }
    evaluate(&predictions, &truth, params.config.class_count, cfg)
}

pub struct RunOutcome {
    pub params: ModelParams,
    pub history: TrainHistory,
    pub report: MetricsReport,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

/// Splits `data` by `cfg.seed`, trains on point annotations of the training
/// part and scores the held-out part.
pub fn run(cfg: &TrainConfig, data: &Dataset) -> Result<RunOutcome> {
    let (train_idx, test_idx) = split_indices(data.len(), cfg.train_fraction, cfg.seed);
    let train_videos: Vec<TrainingVideo> = train_idx
        .iter()
        .map(|&i| TrainingVideo::from(&data.videos[i]))
        .collect();
    // Without a held-out part, score on the training videos.
    let held: Vec<&Video> = if test_idx.is_empty() {
        train_idx.iter().map(|&i| &data.videos[i]).collect()
    } else {
        test_idx.iter().map(|&i| &data.videos[i]).collect()
    };
    let monitor = |p: &ModelParams| evaluate_model(p, &held, &cfg.eval);
    let (params, history) = train(cfg, &train_videos, Some(&monitor))?;
    let report = match history.evals.last() {
        Some(e) => e.report.clone(),
        None => evaluate_model(&params, &held, &cfg.eval)?,
    };
    Ok(RunOutcome {
        params,
        history,
        report,
        train_ids: train_idx.iter().map(|&i| data.videos[i].id.clone()).collect(),
        test_ids: held.iter().map(|v| v.id.clone()).collect(),
    })
}
