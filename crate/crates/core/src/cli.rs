//! Command-line front end: dataset generation, training, evaluation, score
//! dumps and ablation grids.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde_json::Value;

use crate::ablation::{format_table, run_suite, Suite};
use crate::bspg::generate_with_mode;
use crate::model::ModelParams;
use crate::pipeline::{evaluate_model, run};
use crate::synth::{generate, Dataset, SynthSpec, Video};
use crate::trainer::{infer, split_indices, TrainConfig};

pub const PARAMS_FILE: &str = "params.bin";
pub const CONFIG_FILE: &str = "config.json";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const SPLIT_FILE: &str = "split.json";

#[derive(Debug, Parser)]
#[command(name = "fsenet", version, about = "Point-supervised temporal sentiment localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        /// Generator spec as JSON; defaults are used for missing fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the training split of a dataset and save the model.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override a config field, e.g. `bspg.w=5` or `pseudo_labels=\"none\"`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Score a trained model on the held-out split (or all videos).
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        all: bool,
    },
    /// Write the score tracks of one video as CSV.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        video: String,
        #[arg(long)]
        dump_cas: PathBuf,
        /// Also write the reweighted scores.
        #[arg(long)]
        dump_global: Option<PathBuf>,
    },
    /// Write the pseudo-labels of one video as CSV.
    Pseudo {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        video: String,
        #[arg(long)]
        dump_pseudo: PathBuf,
    },
    /// Run a named configuration grid and print a comparison table.
    Ablate {
        #[arg(long, value_parser = parse_suite)]
        suite: Suite,
        /// Dataset directory; the default synthetic corpus otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_suite(s: &str) -> std::result::Result<Suite, String> {
    s.parse().map_err(|e: crate::Error| e.to_string())
}

/// Parses `argv` and runs one subcommand. Returns 0 on success, 1 on a usage
/// error and 2 on a runtime failure.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen { spec, out } => {
            let spec: SynthSpec = match spec {
                Some(p) => read_json(&p)?,
                None => SynthSpec::default(),
            };
            let data = generate(&spec).context("generating dataset")?;
            data.save(&out, Some(&spec))
                .with_context(|| format!("writing dataset to {}", out.display()))?;
            println!("wrote {} videos to {}", data.len(), out.display());
        }
        Command::Train {
            config,
            data,
            out,
            overrides,
        } => {
            let cfg = load_config(config.as_deref(), &overrides)?;
            let data = load_data(&data)?;
            let outcome = run(&cfg, &data).context("training")?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            outcome
                .params
                .save(&out.join(PARAMS_FILE))
                .context("saving parameters")?;
            write_text(&out.join(CONFIG_FILE), &serde_json::to_string_pretty(&cfg)?)?;
            write_text(&out.join(LOG_FILE), &outcome.history.loss_lines())?;
            write_text(&out.join(REPORT_FILE), &outcome.report.to_json())?;
            let split = serde_json::json!({ "train": outcome.train_ids, "test": outcome.test_ids });
            write_text(&out.join(SPLIT_FILE), &serde_json::to_string_pretty(&split)?)?;
            print!("{}", outcome.report.to_table());
        }
        Command::Eval {
            model,
            data,
            report,
            all,
        } => {
            let (params, cfg) = load_model(&model)?;
            let data = load_data(&data)?;
            let videos: Vec<&Video> = if all {
                data.videos.iter().collect()
            } else {
                let (train, test) = split_indices(data.len(), cfg.train_fraction, cfg.seed);
                let idx = if test.is_empty() { train } else { test };
                idx.iter().map(|&i| &data.videos[i]).collect()
            };
            let r = evaluate_model(&params, &videos, &cfg.eval).context("evaluating")?;
            write_text(&report, &r.to_json())?;
            print!("{}", r.to_table());
        }
        Command::Infer {
            model,
            data,
            video,
            dump_cas,
            dump_global,
        } => {
            let (params, _) = load_model(&model)?;
            let data = load_data(&data)?;
            let v = data.video(&video)?;
            let out = infer(&params, &v.features).with_context(|| format!("inference on {video}"))?;
            write_text(&dump_cas, &out.cas.to_csv())?;
            if let Some(p) = dump_global {
                write_text(&p, &out.global_cas.to_csv())?;
            }
        }
        Command::Pseudo {
            model,
            data,
            video,
            dump_pseudo,
        } => {
            let (params, cfg) = load_model(&model)?;
            let data = load_data(&data)?;
            let v = data.video(&video)?;
            let out = infer(&params, &v.features).with_context(|| format!("inference on {video}"))?;
            let labels = generate_with_mode(&out.cas, &v.points, &cfg.bspg, cfg.pseudo_labels)
                .with_context(|| format!("pseudo-labels of {video}"))?;
            write_text(&dump_pseudo, &labels.to_csv())?;
        }
        Command::Ablate {
            suite,
            data,
            config,
            overrides,
            seeds,
            out,
        } => {
            let cfg = load_config(config.as_deref(), &overrides)?;
            let data = match data {
                Some(d) => load_data(&d)?,
                None => generate(&SynthSpec::default()).context("generating dataset")?,
            };
            let rows =
                run_suite(suite, &cfg, &data, seeds.max(1)).with_context(|| format!("suite {}", suite.name()))?;
            let table = format_table(&rows);
            if let Some(p) = out {
                write_text(&p, &table)?;
            }
            print!("{table}");
        }
    }
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_data(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn load_model(dir: &Path) -> Result<(ModelParams, TrainConfig)> {
    let params = ModelParams::load(&dir.join(PARAMS_FILE)).context("loading parameters")?;
    let cfg: TrainConfig = read_json(&dir.join(CONFIG_FILE))?;
    Ok((params, cfg))
}

/// Reads the config (or defaults) and applies `key=value` overrides, where
/// keys are dotted paths and values are JSON, falling back to plain strings.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let mut value = match path {
        Some(p) => read_json::<Value>(p)?,
        None => serde_json::to_value(TrainConfig::default())?,
    };
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let cfg: TrainConfig = serde_json::from_value(value).context("invalid config")?;
    cfg.validate().context("invalid config")?;
    Ok(cfg)
}

fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .with_context(|| format!("override {spec} is not KEY=VALUE"))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for part in key.split('.') {
        let obj = node
            .as_object_mut()
            .with_context(|| format!("override {key}: {part} is not inside an object"))?;
        node = obj.entry(part).or_insert(Value::Null);
    }
    *node = parsed;
    Ok(())
}
