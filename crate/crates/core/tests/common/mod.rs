//! Checks shared by the per-topic integration tests and the acceptance run.
//! Each returns `Ok(detail)` when the property holds, `Err(reason)` otherwise.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use fsenet::bspg::{generate_pseudo_labels, BspgConfig};
use fsenet::eval::{average_precision, MetricsReport, SentimentSegment, Tagged};
use fsenet::heads::ScoreMatrix;
use fsenet::model::{ModelConfig, ModelParams};
use fsenet::numeric::{grad_check, Tape, Tensor};
use fsenet::pipeline::run;
use fsenet::pssc::{
    build_contrast_sets, contrastive_loss, point_distance, top_k_size, NegativePairing, PointAnnotation,
    PointAnnotationSet, SimilarityMetric,
};
use fsenet::synth::{generate, Dataset, SynthSpec};
use fsenet::trainer::{objective, Targets, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn single_point_labels(frames: usize, t_p: usize, cfg: &BspgConfig) -> ScoreMatrix {
    // A zero non-sentiment column keeps the gate from firing.
    let y = ScoreMatrix::new(Tensor::zeros(&[frames, 3])).unwrap();
    let ann = PointAnnotationSet::new(vec![PointAnnotation { t: t_p, class: 0 }], frames, 2).unwrap();
    generate_pseudo_labels(&y, &ann, cfg).unwrap()
}

/// Exhaustive window geometry over β, w and point position for T = 64.
pub fn bspg_geometry() -> Outcome {
    let start = Instant::now();
    let frames = 64;
    let mut cases = 0;
    for beta in [0.0, 0.3, 0.6, 1.0] {
        for w in 1..=9usize {
            for t_p in [0, w, frames / 2, frames - 1] {
                let cfg = BspgConfig { w, beta, tau: 0.95 };
                let m = single_point_labels(frames, t_p, &cfg);
                let ctx = format!("beta={beta} w={w} t_p={t_p}");
                ensure(m.get(t_p, 0) == 1.0, || format!("{ctx}: peak {}", m.get(t_p, 0)))?;
                for t in 0..frames {
                    let d = t.abs_diff(t_p);
                    let row = m.row(t);
                    if d > w {
                        ensure(row == [0.0, 0.0, 1.0], || {
                            format!("{ctx}: out-of-window row {t} = {row:?}")
                        })?;
                        continue;
                    }
                    let s = row[0];
                    ensure((beta..=1.0).contains(&s), || {
                        format!("{ctx}: t={t} score {s} outside [beta,1]")
                    })?;
                    ensure(row[1] == 0.0, || format!("{ctx}: t={t} other class {}", row[1]))?;
                    ensure(s + row[2] == 1.0, || {
                        format!("{ctx}: t={t} pair sums to {}", s + row[2])
                    })?;
                    if t > t_p {
                        let mirror = 2 * t_p as i64 - t as i64;
                        if mirror >= 0 {
                            let m_s = m.get(mirror as usize, 0);
                            ensure(m_s == s, || format!("{ctx}: asymmetric at ±{d}: {m_s} vs {s}"))?;
                        }
                    }
                    if d > 0 {
                        let inner = if t > t_p { t - 1 } else { t + 1 };
                        let prev = m.get(inner, 0);
                        ensure(s <= prev, || format!("{ctx}: rises from {prev} to {s} at t={t}"))?;
                    }
                }
                cases += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(1), || format!("took {elapsed:?}"))?;
    Ok(format!("{cases} cases in {elapsed:?}"))
}

/// β = 0.6, w = 7, t_p = 10, T = 24 against the closed form `1 − 2d/35`.
pub fn hand_vector() -> Outcome {
    let cfg = BspgConfig {
        w: 7,
        beta: 0.6,
        tau: 1.0,
    };
    let m = single_point_labels(24, 10, &cfg);
    #[rustfmt::skip]
    let oracle: [f64; 24] = [
        0.0, 0.0, 0.0,
        21.0 / 35.0, 23.0 / 35.0, 25.0 / 35.0, 27.0 / 35.0, 29.0 / 35.0, 31.0 / 35.0, 33.0 / 35.0,
        1.0,
        33.0 / 35.0, 31.0 / 35.0, 29.0 / 35.0, 27.0 / 35.0, 25.0 / 35.0, 23.0 / 35.0, 21.0 / 35.0,
        0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
    ];
    let mut worst = 0.0f64;
    for (t, want) in oracle.iter().enumerate() {
        let got = m.get(t, 0);
        worst = worst.max((got - want).abs());
        let ns_want = if (t as i64 - 10).abs() <= 7 { 1.0 - want } else { 1.0 };
        worst = worst.max((m.get(t, 2) - ns_want).abs());
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("max deviation {worst:e}"))
}

/// Finite-difference check of the total objective on a tiny instance.
pub fn total_loss_gradients() -> Outcome {
    let start = Instant::now();
    let cfg = TrainConfig {
        model: ModelConfig {
            input_dim: 8,
            dim: 8,
            heads: 2,
            class_count: 2,
            ..Default::default()
        },
        k_divisor: 4,
        ..Default::default()
    };
    let spec = SynthSpec {
        video_count: 1,
        frame_range: [8, 8],
        segments_per_video: [2, 2],
        segment_length: [2, 3],
        min_gap: 1,
        feature_dim: 8,
        seed: 11,
        ..Default::default()
    };
    let video = generate(&spec).map_err(|e| e.to_string())?.videos.remove(0);
    let params = ModelParams::init(&cfg.model, 5).map_err(|e| e.to_string())?;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let (_, terms, targets): (_, _, Targets) =
        objective(&mut tape, &vars, &cfg, &video.features, &video.points, None).map_err(|e| e.to_string())?;
    ensure(terms.base.is_some() && terms.frame.is_some(), || {
        "base or frame term missing".into()
    })?;
    ensure(terms.sc.is_some() && terms.frame_glo.is_some(), || {
        "contrast or global term missing".into()
    })?;

    let inputs = params.ordered_tensors();
    let r = grad_check(
        |tape, vars| {
            let pv = ModelParams::bind(&cfg.model, vars)?;
            let (l, _, _) = objective(tape, &pv, &cfg, &video.features, &video.points, Some(&targets))?;
            Ok(l)
        },
        &inputs,
        1e-4,
    )
    .map_err(|e| e.to_string())?;
    let names = cfg.model.parameter_shapes();
    let elapsed = start.elapsed();
    let detail = format!(
        "max rel error {:.2e} at {} (analytic {:e}, numeric {:e}; {} tensors, {elapsed:?})",
        r.max_rel_error,
        names[r.worst.0].0,
        r.analytic,
        r.numeric,
        inputs.len()
    );
    ensure(r.max_rel_error < 1e-3 && elapsed < Duration::from_secs(30), || {
        detail.clone()
    })?;
    Ok(detail)
}

fn frame_iou(a: &SentimentSegment, b: &SentimentSegment) -> f64 {
    let hi = a.end.max(b.end);
    let (mut both, mut either) = (0usize, 0usize);
    for t in 0..hi {
        let (x, y) = (a.start <= t && t < a.end, b.start <= t && t < b.end);
        both += (x && y) as usize;
        either += (x || y) as usize;
    }
    if either == 0 {
        0.0
    } else {
        both as f64 / either as f64
    }
}

/// Hits of the top-`k` proposals, matched from scratch.
fn prefix_hits(ranked: &[(&str, SentimentSegment)], gts: &[(&str, SentimentSegment)], k: usize, thr: f64) -> usize {
    let mut used = vec![false; gts.len()];
    let mut hits = 0;
    for (video, p) in &ranked[..k] {
        let mut best: Option<(usize, f64)> = None;
        for (j, (gv, g)) in gts.iter().enumerate() {
            if used[j] || gv != video {
                continue;
            }
            let o = frame_iou(p, g);
            if o >= thr && best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            used[j] = true;
            hits += 1;
        }
    }
    hits
}

/// `Σ_k P(k)·ΔTP(k) / |GT|`, rematching every prefix.
fn brute_force_ap(
    props: &[(&str, SentimentSegment)],
    gts: &[(&str, SentimentSegment)],
    class: usize,
    thr: f64,
) -> Option<f64> {
    let gts: Vec<_> = gts.iter().copied().filter(|g| g.1.class == class).collect();
    if gts.is_empty() {
        return None;
    }
    let mut ranked: Vec<_> = props.iter().copied().filter(|p| p.1.class == class).collect();
    ranked.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap());
    let mut ap = 0.0;
    let mut prev = 0;
    for k in 1..=ranked.len() {
        let tp = prefix_hits(&ranked, &gts, k, thr);
        if tp > prev {
            ap += (tp as f64 / k as f64) * (tp - prev) as f64;
        }
        prev = tp;
    }
    Some(ap / gts.len() as f64)
}

fn random_segment(rng: &mut ChaCha8Rng, class: usize, score: f64) -> SentimentSegment {
    let start = rng.random_range(0..18);
    let len = rng.random_range(1..=8);
    SentimentSegment::new(start, start + len, class, score).unwrap()
}

/// AP against the brute-force oracle on 100 seeded instances.
pub fn average_precision_oracle() -> Outcome {
    let start = Instant::now();
    let videos = ["a", "b"];
    let mut worst = 0.0f64;
    let mut compared = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_props = rng.random_range(0..=6);
        let n_gts = rng.random_range(1..=4);
        // Distinct scores keep the ranking unambiguous.
        let mut scores: Vec<f64> = (0..n_props)
            .map(|i| (i as f64 + rng.random::<f64>() * 0.5) / 6.0)
            .collect();
        for i in (1..scores.len()).rev() {
            let j = rng.random_range(0..=i);
            scores.swap(i, j);
        }
        let props: Vec<(&str, SentimentSegment)> = scores
            .iter()
            .map(|&s| {
                let c = rng.random_range(0..2);
                (videos[rng.random_range(0..2)], random_segment(&mut rng, c, s))
            })
            .collect();
        let gts: Vec<(&str, SentimentSegment)> = (0..n_gts)
            .map(|_| {
                let c = rng.random_range(0..2);
                (videos[rng.random_range(0..2)], random_segment(&mut rng, c, 1.0))
            })
            .collect();
        let tag = |v: &[(&'static str, SentimentSegment)]| -> Vec<Tagged<'static>> {
            v.iter().map(|&(video, segment)| Tagged { video, segment }).collect()
        };
        let (tp, tg) = (tag(&props), tag(&gts));
        for class in 0..2 {
            for thr in [0.1, 0.3, 0.5, 0.7] {
                let got = average_precision(&tp, &tg, class, thr);
                let want = brute_force_ap(&props, &gts, class, thr);
                match (got, want) {
                    (None, None) => {}
                    (Some(g), Some(w)) => {
                        worst = worst.max((g - w).abs());
                        compared += 1;
                    }
                    _ => return Err(format!("seed {seed} class {class}: {got:?} vs oracle {want:?}")),
                }
            }
        }
    }
    let elapsed = start.elapsed();
    let detail = format!("{compared} comparisons, max deviation {worst:e}, {elapsed:?}");
    ensure(worst <= 1e-9 && elapsed < Duration::from_secs(5), || detail.clone())?;
    Ok(detail)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Mean positive and negative cosine to each class's mean point embedding.
fn contrast_similarities(table: &Tensor, positives: &[Vec<usize>], points: &[Vec<usize>]) -> (f64, f64) {
    let dim = table.cols();
    let protos: Vec<Vec<f64>> = points
        .iter()
        .map(|ts| {
            (0..dim)
                .map(|j| ts.iter().map(|&t| table.get(t, j)).sum::<f64>() / ts.len() as f64)
                .collect()
        })
        .collect();
    let (mut pos, mut np, mut neg, mut nn) = (0.0, 0, 0.0, 0);
    for (c, proto) in protos.iter().enumerate() {
        for (o, set) in positives.iter().enumerate() {
            for &t in set {
                let s = cosine(table.row(t), proto);
                if o == c {
                    pos += s;
                    np += 1;
                } else {
                    neg += s;
                    nn += 1;
                }
            }
        }
    }
    (pos / np as f64, neg / nn as f64)
}

/// Gradient descent on the contrastive term alone over a free embedding
/// table with fixed contrast sets.
pub fn pssc_optimization() -> Outcome {
    let frames = 48;
    let dim = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut table = Tensor::matrix(
        frames,
        dim,
        (0..frames * dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let points = vec![
        PointAnnotation { t: 4, class: 0 },
        PointAnnotation { t: 21, class: 0 },
        PointAnnotation { t: 30, class: 1 },
        PointAnnotation { t: 41, class: 1 },
    ];
    let ann = PointAnnotationSet::new(points, frames, 2).map_err(|e| e.to_string())?;
    let k = top_k_size(frames, 8).map_err(|e| e.to_string())?;
    let distances: Vec<_> = (0..2)
        .map(|c| point_distance(&table, &ann, c, SimilarityMetric::Cosine).map(Some))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let sets = build_contrast_sets(&distances, None, &ann, k).map_err(|e| e.to_string())?;
    let positives: Vec<Vec<usize>> = sets.positives.iter().map(|p| p.clone().unwrap_or_default()).collect();
    let point_frames: Vec<Vec<usize>> = (0..2).map(|c| ann.frames_of(c)).collect();

    let steps = 100;
    let lr = 0.05;
    let mut trace = vec![contrast_similarities(&table, &positives, &point_frames)];
    for _ in 0..steps {
        let mut tape = Tape::new();
        let e = tape.variable(table.clone());
        let loss =
            contrastive_loss(&mut tape, e, &sets, &ann, NegativePairing::AnchorPrototype).map_err(|e| e.to_string())?;
        let grads = tape.backward(loss).map_err(|e| e.to_string())?;
        let g = grads.get(e).ok_or("no gradient for the table")?;
        table = table.zip_map(g, |x, d| x - lr * d);
        trace.push(contrast_similarities(&table, &positives, &point_frames));
    }
    let violations = trace.windows(2).filter(|w| w[1].0 < w[0].0 || w[1].1 > w[0].1).count();
    let (first, last) = (trace[0], trace[steps]);
    let detail = format!(
        "positive cos {:.3} -> {:.3}, negative cos {:.3} -> {:.3}, {violations}/{steps} violating steps",
        first.0, last.0, first.1, last.1
    );
    ensure(last.0 > first.0 && last.1 < first.1 && violations * 20 <= steps, || {
        detail.clone()
    })?;
    Ok(detail)
}

pub fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_fsenet")
}

pub fn fsenet(args: &[&str]) -> std::process::Output {
    Command::new(binary()).args(args).output().expect("binary runs")
}

/// Every file under `dir` with its bytes.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.clone(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// `gen`, `train` and `eval` in a fresh directory; returns the eval report
/// bytes and the trained model directory contents.
pub fn cli_pipeline(root: &Path) -> Result<(Vec<u8>, BTreeMap<PathBuf, Vec<u8>>), String> {
    let spec = root.join("spec.json");
    std::fs::write(&spec, r#"{"video_count": 12, "seed": 5}"#).map_err(|e| e.to_string())?;
    let data = root.join("data");
    let model = root.join("model");
    let report = root.join("report.json");
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let steps: [Vec<String>; 3] = [
        vec!["gen".into(), "--spec".into(), s(&spec), "--out".into(), s(&data)],
        vec![
            "train".into(),
            "--data".into(),
            s(&data),
            "--out".into(),
            s(&model),
            "--set".into(),
            "epochs=4".into(),
            "--set".into(),
            "seed=3".into(),
        ],
        vec![
            "eval".into(),
            "--model".into(),
            s(&model),
            "--data".into(),
            s(&data),
            "--report".into(),
            s(&report),
        ],
    ];
    let mut before = BTreeMap::new();
    for args in &steps {
        if args[0] != "gen" {
            before = snapshot(&data);
        }
        let argv: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = fsenet(&argv);
        if !out.status.success() {
            return Err(format!("{} failed: {}", args[0], String::from_utf8_lossy(&out.stderr)));
        }
        if args[0] != "gen" && snapshot(&data) != before {
            return Err(format!("{} modified the dataset", args[0]));
        }
    }
    let bytes = std::fs::read(&report).map_err(|e| e.to_string())?;
    let relative = snapshot(&model)
        .into_iter()
        .map(|(p, b)| (p.strip_prefix(&model).unwrap().to_path_buf(), b))
        .collect();
    Ok((bytes, relative))
}

/// Two identical command sequences give byte-identical reports and models.
pub fn cli_determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (ra, ma) = cli_pipeline(a.path())?;
    let (rb, mb) = cli_pipeline(b.path())?;
    let report: MetricsReport = serde_json::from_slice(&ra).map_err(|e| e.to_string())?;
    ensure(ra == rb, || "eval reports differ".into())?;
    ensure(ma == mb, || "model directories differ".into())?;
    Ok(format!(
        "{} report bytes identical, avg_mAP {:.4}",
        ra.len(),
        report.avg_map
    ))
}

/// Held-out reports of `cfg` trained with seeds `cfg.seed..cfg.seed+n`, with
/// the wall time of each run.
pub fn seed_reports(cfg: &TrainConfig, data: &Dataset, seeds: u64) -> Vec<(MetricsReport, Duration)> {
    (0..seeds)
        .map(|s| {
            let c = TrainConfig {
                seed: cfg.seed + s,
                ..cfg.clone()
            };
            let start = Instant::now();
            let out = run(&c, data).expect("training run");
            (out.report, start.elapsed())
        })
        .collect()
}

pub fn mean_avg_map(reports: &[(MetricsReport, Duration)]) -> f64 {
    reports.iter().map(|r| r.0.avg_map).sum::<f64>() / reports.len() as f64
}
