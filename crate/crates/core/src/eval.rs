//! Localization metrics: proposal extraction from score tracks, temporal IoU,
//! detection AP, mAP over IoU thresholds, recall and F2.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::ScoreMatrix;

/// Half-open frame interval `[start, end)` of one class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentimentSegment {
    pub start: usize,
    pub end: usize,
    pub class: usize,
    #[serde(default = "unit_score")]
    pub score: f64,
}

fn unit_score() -> f64 {
    1.0
}

impl SentimentSegment {
    pub fn new(start: usize, end: usize, class: usize, score: f64) -> Result<Self> {
        if start >= end {
            return Err(Error::Evaluation(format!("empty segment [{start},{end})")));
        }
        Ok(Self {
            start,
            end,
            class,
            score,
        })
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, t: usize) -> bool {
        (self.start..self.end).contains(&t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub proposal_thresholds: Vec<f64>,
    pub nms_iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: vec![0.1, 0.15, 0.2, 0.25, 0.3],
            proposal_thresholds: (1..=9).map(|i| i as f64 / 10.0).collect(),
            nms_iou: 0.5,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, list) in [
            ("iou_thresholds", &self.iou_thresholds),
            ("proposal_thresholds", &self.proposal_thresholds),
        ] {
            if list.is_empty() {
                return Err(Error::Config(format!("{name} is empty")));
            }
            if list.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
                return Err(Error::Config(format!("{name} must lie in (0,1)")));
            }
            if list.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config(format!("{name} must be ascending")));
            }
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return Err(Error::Config("nms_iou must lie in (0,1]".into()));
        }
        Ok(())
    }
}

pub fn iou(a: &SentimentSegment, b: &SentimentSegment) -> f64 {
    let inter = a.end.min(b.end).saturating_sub(a.start.max(b.start));
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Maximal runs of `scores[t] ≥ theta`, scored by their mean.
pub fn threshold_runs(scores: &[f64], theta: f64, class: usize) -> Vec<SentimentSegment> {
    let mut out = Vec::new();
    let mut start = None;
    for t in 0..=scores.len() {
        let on = t < scores.len() && scores[t] >= theta;
        match (on, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                let mean = scores[s..t].iter().sum::<f64>() / (t - s) as f64;
                out.push(SentimentSegment {
                    start: s,
                    end: t,
                    class,
                    score: mean,
                });
                start = None;
            }
            _ => {}
        }
    }
    out
}

fn by_score_desc(a: &SentimentSegment, b: &SentimentSegment) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.start.cmp(&b.start))
        .then(a.end.cmp(&b.end))
}

/// Multi-threshold proposals per sentiment class, pooled and suppressed.
pub fn extract_segments(y_glo: &ScoreMatrix, cfg: &EvalConfig) -> Vec<SentimentSegment> {
    let mut out = Vec::new();
    for c in 0..y_glo.class_count() {
        let col = y_glo.column(c);
        let mut pool: Vec<SentimentSegment> = cfg
            .proposal_thresholds
            .iter()
            .flat_map(|&theta| threshold_runs(&col, theta, c))
            .collect();
        pool.sort_by(by_score_desc);
        let mut kept: Vec<SentimentSegment> = Vec::new();
        for s in pool {
            if kept.iter().all(|k| iou(k, &s) <= cfg.nms_iou) {
                kept.push(s);
            }
        }
        out.extend(kept);
    }
    out
}

/// A segment tagged with the video it belongs to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tagged<'a> {
    pub video: &'a str,
    pub segment: SentimentSegment,
}

struct Matching {
    /// True-positive flag per proposal in descending-score order.
    hits: Vec<bool>,
    gt_count: usize,
}

fn match_class(proposals: &[Tagged], ground_truth: &[Tagged], class: usize, thr: f64) -> Matching {
    let mut props: Vec<&Tagged> = proposals.iter().filter(|p| p.segment.class == class).collect();
    props.sort_by(|a, b| by_score_desc(&a.segment, &b.segment).then(a.video.cmp(b.video)));
    let gts: Vec<&Tagged> = ground_truth.iter().filter(|g| g.segment.class == class).collect();
    let mut used = vec![false; gts.len()];
    let mut hits = Vec::with_capacity(props.len());
    for p in props {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if used[j] || g.video != p.video {
                continue;
            }
            let o = iou(&p.segment, &g.segment);
            if o >= thr && best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            used[j] = true;
        }
        hits.push(best.is_some());
    }
    Matching {
        hits,
        gt_count: gts.len(),
    }
}

/// Detection AP of one class, or `None` when the class has no ground truth.
pub fn average_precision(proposals: &[Tagged], ground_truth: &[Tagged], class: usize, iou_thr: f64) -> Option<f64> {
    let m = match_class(proposals, ground_truth, class, iou_thr);
    if m.gt_count == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut ap = 0.0;
    for (rank, &hit) in m.hits.iter().enumerate() {
        if hit {
            tp += 1;
            ap += tp as f64 / (rank + 1) as f64;
        }
    }
    Some(ap / m.gt_count as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// mAP keyed by IoU threshold formatted with two decimals.
    #[serde(rename = "mAP")]
    pub map: BTreeMap<String, f64>,
    #[serde(rename = "avg_mAP")]
    pub avg_map: f64,
    pub recall: f64,
    pub f2: f64,
}

impl MetricsReport {
    pub fn map_at(&self, thr: f64) -> Option<f64> {
        self.map.get(&threshold_key(thr)).copied()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct serialises")
    }

    /// Aligned table: one column per IoU threshold, then AVG, Recall, F2.
    pub fn to_table(&self) -> String {
        let mut header = String::new();
        let mut row = String::new();
        for (k, v) in &self.map {
            let _ = write!(header, "{:>8}", format!("@{k}"));
            let _ = write!(row, "{:>8.2}", 100.0 * v);
        }
        for (name, v) in [("AVG", self.avg_map), ("Recall", self.recall), ("F2", self.f2)] {
            let _ = write!(header, "{name:>8}");
            let _ = write!(row, "{:>8.2}", 100.0 * v);
        }
        format!("{header}\n{row}\n")
    }
}

pub fn threshold_key(thr: f64) -> String {
    format!("{thr:.2}")
}

/// `5PR / (4P + R)`, zero when both are zero.
pub fn f2_score(precision: f64, recall: f64) -> f64 {
    let denom = 4.0 * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        5.0 * precision * recall / denom
    }
}

/// Scores predictions against ground truth, both keyed by video id.
pub fn evaluate(
    predictions: &BTreeMap<String, Vec<SentimentSegment>>,
    ground_truth: &BTreeMap<String, Vec<SentimentSegment>>,
    class_count: usize,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    cfg.validate()?;
    if let Some(id) = predictions.keys().find(|k| !ground_truth.contains_key(*k)) {
        return Err(Error::Evaluation(format!("predictions for unknown video {id}")));
    }
    let tag = |m: &'_ BTreeMap<String, Vec<SentimentSegment>>| -> Vec<(String, SentimentSegment)> {
        m.iter()
            .flat_map(|(k, v)| v.iter().map(move |s| (k.clone(), *s)))
            .collect()
    };
    let props_owned = tag(predictions);
    let gts_owned = tag(ground_truth);
    if gts_owned.is_empty() {
        return Err(Error::Evaluation("ground truth is empty".into()));
    }
    let props: Vec<Tagged> = props_owned
        .iter()
        .map(|(v, s)| Tagged { video: v, segment: *s })
        .collect();
    let gts: Vec<Tagged> = gts_owned
        .iter()
        .map(|(v, s)| Tagged { video: v, segment: *s })
        .collect();

    let mut map = BTreeMap::new();
    let mut total = 0.0;
    for &thr in &cfg.iou_thresholds {
        let aps: Vec<f64> = (0..class_count)
            .filter_map(|c| average_precision(&props, &gts, c, thr))
            .collect();
        let m = if aps.is_empty() {
            0.0
        } else {
            aps.iter().sum::<f64>() / aps.len() as f64
        };
        total += m;
        map.insert(threshold_key(thr), m);
    }

    let lowest = cfg.iou_thresholds[0];
    let tp: usize = (0..class_count)
        .map(|c| match_class(&props, &gts, c, lowest).hits.iter().filter(|&&h| h).count())
        .sum();
    let recall = tp as f64 / gts.len() as f64;
    let precision = if props.is_empty() {
        0.0
    } else {
        tp as f64 / props.len() as f64
    };
    Ok(MetricsReport {
        map,
        avg_map: total / cfg.iou_thresholds.len() as f64,
        recall,
        f2: f2_score(precision, recall),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tensor;

    fn seg(start: usize, end: usize, class: usize, score: f64) -> SentimentSegment {
        SentimentSegment {
            start,
            end,
            class,
            score,
        }
    }

    fn tagged(v: &[SentimentSegment]) -> Vec<Tagged<'static>> {
        v.iter()
            .map(|s| Tagged {
                video: "v",
                segment: *s,
            })
            .collect()
    }

    fn one_class(col: &[f64]) -> ScoreMatrix {
        let rows: Vec<[f64; 2]> = col.iter().map(|&v| [v, 1.0 - v]).collect();
        ScoreMatrix::new(Tensor::from_rows(&rows).unwrap()).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = seg(0, 10, 0, 1.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &seg(10, 12, 0, 1.0)), 0.0);
        let b = seg(5, 15, 0, 1.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&a, &b), iou(&b, &a));
    }

    #[test]
    fn run_extraction() {
        let runs = threshold_runs(&[0.0, 0.0, 0.9, 0.9, 0.0, 0.0], 0.5, 0);
        assert_eq!(runs, vec![seg(2, 4, 0, 0.9)]);
        let cfg = EvalConfig::default();
        assert!(extract_segments(&one_class(&[0.05, 0.0, 0.09]), &cfg).is_empty());
        let full = extract_segments(&one_class(&[1.0; 7]), &cfg);
        assert_eq!(full, vec![seg(0, 7, 0, 1.0)]);
    }

    #[test]
    fn ap_examples() {
        let gt = tagged(&[seg(0, 10, 0, 1.0)]);
        assert_eq!(
            average_precision(&tagged(&[seg(1, 10, 0, 0.7)]), &gt, 0, 0.5),
            Some(1.0)
        );
        let two = tagged(&[seg(20, 30, 0, 0.9), seg(0, 10, 0, 0.5)]);
        assert_eq!(average_precision(&two, &gt, 0, 0.5), Some(0.5));
        assert_eq!(average_precision(&[], &gt, 0, 0.5), Some(0.0));
        assert_eq!(average_precision(&two, &gt, 1, 0.5), None);
    }

    #[test]
    fn proposals_only_match_their_own_video() {
        let gt = vec![Tagged {
            video: "a",
            segment: seg(0, 10, 0, 1.0),
        }];
        let p = vec![Tagged {
            video: "b",
            segment: seg(0, 10, 0, 1.0),
        }];
        assert_eq!(average_precision(&p, &gt, 0, 0.1), Some(0.0));
    }

    #[test]
    fn perfect_predictions() {
        let mut gt = BTreeMap::new();
        gt.insert("a".to_string(), vec![seg(3, 9, 0, 1.0), seg(12, 20, 1, 1.0)]);
        gt.insert("b".to_string(), vec![seg(0, 4, 1, 1.0)]);
        let r = evaluate(&gt, &gt, 2, &EvalConfig::default()).unwrap();
        assert!(r.map.values().all(|&v| v == 1.0));
        assert_eq!((r.avg_map, r.recall, r.f2), (1.0, 1.0, 1.0));
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert!(json["mAP"]["0.10"].is_number());
        assert!(json["avg_mAP"].is_number());
        assert_eq!(r.to_table().lines().count(), 2);
    }

    #[test]
    fn f2_example() {
        assert!((f2_score(0.5, 1.0) - 2.5 / 3.0).abs() < 1e-15);
        assert_eq!(f2_score(0.0, 0.0), 0.0);
    }

    #[test]
    fn empty_ground_truth_is_an_error() {
        let gt: BTreeMap<String, Vec<SentimentSegment>> = [("a".to_string(), vec![])].into();
        assert!(matches!(
            evaluate(&gt, &gt, 2, &EvalConfig::default()),
            Err(Error::Evaluation(_))
        ));
    }

    proptest::proptest! {
        #[test]
        fn ap_in_range_and_monotone_in_threshold(
            props in proptest::collection::vec((0usize..30, 1usize..12, 0.0f64..1.0), 0..8),
            gts in proptest::collection::vec((0usize..30, 1usize..12), 1..5),
        ) {
            let p: Vec<_> = props.iter().map(|&(s, l, sc)| seg(s, s + l, 0, sc)).collect();
            let g: Vec<_> = gts.iter().map(|&(s, l)| seg(s, s + l, 0, 1.0)).collect();
            let (p, g) = (tagged(&p), tagged(&g));
            let mut prev = f64::INFINITY;
            for thr in [0.1, 0.2, 0.3, 0.5, 0.7, 0.9] {
                let ap = average_precision(&p, &g, 0, thr).unwrap();
                proptest::prop_assert!((0.0..=1.0).contains(&ap));
                proptest::prop_assert!(ap <= prev + 1e-12);
                prev = ap;
            }
        }

        #[test]
        fn runs_are_disjoint_and_iou_symmetric(
            col in proptest::collection::vec(0.0f64..=1.0, 1..40),
            theta in 0.05f64..0.95,
        ) {
            let runs = threshold_runs(&col, theta, 0);
            for w in runs.windows(2) {
                proptest::prop_assert!(w[0].end < w[1].start);
            }
            for a in &runs {
                for b in &runs {
                    proptest::prop_assert_eq!(iou(a, b), iou(b, a));
                }
            }
        }
    }
}
