//! Named configuration grids for the pseudo-label, loss and hyperparameter
//! ablations, run over several seeds and printed as comparison tables.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::str::FromStr;

use crate::bspg::PseudoLabelMode;
use crate::error::{Error, Result};
use crate::eval::MetricsReport;
use crate::pipeline::run;
use crate::synth::Dataset;
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Table5,
    Table6,
    SweepW,
    SweepBeta,
    SweepK,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Table5,
        Suite::Table6,
        Suite::SweepW,
        Suite::SweepBeta,
        Suite::SweepK,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Table5 => "table5",
            Suite::Table6 => "table6",
            Suite::SweepW => "sweep-w",
            Suite::SweepBeta => "sweep-beta",
            Suite::SweepK => "sweep-k",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite {s}")))
    }
}

/// One labelled configuration of a grid.
#[derive(Clone, Debug)]
pub struct Variant {
    pub label: String,
    pub config: TrainConfig,
}

fn variant(label: impl Into<String>, config: TrainConfig) -> Variant {
    Variant {
        label: label.into(),
        config,
    }
}

pub fn pseudo_label_variant(base: &TrainConfig, mode: PseudoLabelMode) -> Variant {
    variant(
        mode.label(),
        TrainConfig {
            pseudo_labels: mode,
            ..base.clone()
        },
    )
}

/// Toggles of the frame, global-frame and contrastive terms; the base loss
/// stays on in every row.
pub fn loss_variant(base: &TrainConfig, id: char) -> Result<Variant> {
    let (frame, glo, sc) = match id {
        'a' => (true, true, true),
        'b' => (false, true, true),
        'c' => (true, false, true),
        'd' => (true, true, false),
        'e' => (false, false, true),
        'f' => (false, false, false),
        _ => return Err(Error::Config(format!("unknown loss row {id}"))),
    };
    let mark = |on: bool| if on { "+" } else { "-" };
    let label = format!("{id} frame{} glo{} sc{}", mark(frame), mark(glo), mark(sc));
    let config = TrainConfig {
        use_frame: frame,
        use_frame_glo: glo,
        use_sc: sc,
        ..base.clone()
    };
    Ok(variant(label, config))
}

pub fn variants(suite: Suite, base: &TrainConfig) -> Vec<Variant> {
    match suite {
        Suite::Table5 => PseudoLabelMode::ALL
            .into_iter()
            .map(|m| pseudo_label_variant(base, m))
            .collect(),
        Suite::Table6 => "abcdef"
            .chars()
            .map(|id| loss_variant(base, id).expect("listed rows exist"))
            .collect(),
        Suite::SweepW => (5..=9)
            .map(|w| {
                let mut c = base.clone();
                c.bspg.w = w;
                variant(format!("w={w}"), c)
            })
            .collect(),
        Suite::SweepBeta => [0.1, 0.3, 0.5, 0.6, 0.7]
            .into_iter()
            .map(|b| {
                let mut c = base.clone();
                c.bspg.beta = b;
                variant(format!("beta={b}"), c)
            })
            .collect(),
        Suite::SweepK => [5, 6, 8, 10, 12]
            .into_iter()
            .map(|k| {
                variant(
                    format!("k={k}"),
                    TrainConfig {
                        k_divisor: k,
                        ..base.clone()
                    },
                )
            })
            .collect(),
    }
}

/// Elementwise mean of reports sharing the same thresholds.
pub fn mean_report(reports: &[MetricsReport]) -> Result<MetricsReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Evaluation("no reports to average".into()))?;
    let n = reports.len() as f64;
    let mut map = BTreeMap::new();
    for key in first.map.keys() {
        let mut s = 0.0;
        for r in reports {
            s += r
                .map
                .get(key)
                .ok_or_else(|| Error::Evaluation(format!("report lacks threshold {key}")))?;
        }
        map.insert(key.clone(), s / n);
    }
    Ok(MetricsReport {
        map,
        avg_map: reports.iter().map(|r| r.avg_map).sum::<f64>() / n,
        recall: reports.iter().map(|r| r.recall).sum::<f64>() / n,
        f2: reports.iter().map(|r| r.f2).sum::<f64>() / n,
    })
}

/// Trains `cfg` with seeds `cfg.seed, cfg.seed+1, …` and averages the
/// held-out reports.
pub fn seed_mean(cfg: &TrainConfig, data: &Dataset, seeds: usize) -> Result<MetricsReport> {
    let mut reports = Vec::with_capacity(seeds);
    for s in 0..seeds as u64 {
        let c = TrainConfig {
            seed: cfg.seed + s,
            ..cfg.clone()
        };
        let out = run(&c, data)?;
        log::info!("seed {} avg mAP {:.4}", c.seed, out.report.avg_map);
        reports.push(out.report);
    }
    mean_report(&reports)
}

pub struct AblationRow {
    pub label: String,
    pub report: MetricsReport,
}

pub fn run_suite(suite: Suite, base: &TrainConfig, data: &Dataset, seeds: usize) -> Result<Vec<AblationRow>> {
    variants(suite, base)
        .into_iter()
        .map(|v| {
            log::info!("{}: {}", suite.name(), v.label);
            Ok(AblationRow {
                report: seed_mean(&v.config, data, seeds)?,
                label: v.label,
            })
        })
        .collect()
}

/// Rows of mAP per IoU threshold, average mAP, recall and F2, in percent.
pub fn format_table(rows: &[AblationRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(7);
    let mut out = String::new();
    let Some(first) = rows.first() else {
        return out;
    };
    let _ = write!(out, "{:<width$}", "variant");
    for k in first.report.map.keys() {
        let _ = write!(out, "{:>8}", format!("@{k}"));
    }
    let _ = writeln!(out, "{:>8}{:>8}{:>8}", "AVG", "Recall", "F2");
    for r in rows {
        let _ = write!(out, "{:<width$}", r.label);
        for v in r.report.map.values() {
            let _ = write!(out, "{:>8.2}", 100.0 * v);
        }
        let m = &r.report;
        let _ = writeln!(
            out,
            "{:>8.2}{:>8.2}{:>8.2}",
            100.0 * m.avg_map,
            100.0 * m.recall,
            100.0 * m.f2
        );
    }
    out
}
