//! Named experiment suites. Each suite is a list of rows, each row a set of
//! config overrides applied on top of a base config and run for several
//! seeds. Failed runs are recorded in the row and the suite continues.
//!
//! Output directory layout:
//!
//! ```text
//! suite.csv                  one row per suite row: mean and std over seeds
//! runs.csv                   one row per (row, seed)
//! <row>/seed_<k>/            the run directory of that run
//! ```

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

use crate::config::{DataSource, ExperimentConfig};
use crate::data::{ingest, synth, Dataset};
use crate::train::{train, Status};
use toklab::Rng;

pub const SUITES: &[&str] = &[
    "structure",
    "entities",
    "partition",
    "placement",
    "norm",
    "loss",
    "lambda",
    "decoder",
    "optim",
    "combine",
    "data",
];

/// SGD learning rate and weight decay used by SGD rows.
pub const SGD_LR: f64 = 0.05;
pub const SGD_WEIGHT_DECAY: f64 = 5e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRow {
    pub label: String,
    pub overrides: Vec<(String, String)>,
}

fn row(label: &str, overrides: &[(&str, &str)]) -> SuiteRow {
    SuiteRow {
        label: label.to_string(),
        overrides: overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
    }
}

fn owned(label: String, overrides: Vec<(&str, String)>) -> SuiteRow {
    SuiteRow {
        label,
        overrides: overrides.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
    }
}

/// Transformer blocks split into early, middle and late thirds.
fn block_thirds(depth: usize) -> [Vec<usize>; 3] {
    let mut out: [Vec<usize>; 3] = Default::default();
    for b in 0..depth {
        out[b * 3 / depth.max(1)].push(b);
    }
    out
}

pub fn rows(suite: &str, base: &ExperimentConfig) -> Result<Vec<SuiteRow>> {
    let sgd_lr = SGD_LR.to_string();
    let sgd_wd = SGD_WEIGHT_DECAY.to_string();
    let sgd = [("optim", "sgd"), ("lr", sgd_lr.as_str()), ("weight_decay", sgd_wd.as_str())];
    let with = |label: &str, head: &[(&str, &str)], tail: &[(&str, &str)]| {
        let all: Vec<(&str, &str)> = head.iter().chain(tail).copied().collect();
        row(label, &all)
    };
    Ok(match suite {
        "structure" => toklab::Variant::ALL
            .iter()
            .map(|v| row(v.name(), &[("tokenizer", v.name())]))
            .collect(),
        "entities" => {
            let mut out = vec![row("baseline", &[("moto", "off")])];
            for n in [2, 4, 8, 16] {
                out.push(owned(
                    format!("n={n}"),
                    vec![("moto", "on".into()), ("moto.entities", n.to_string())],
                ));
            }
            out
        }
        "partition" => vec![
            row("baseline", &[("moto", "off")]),
            row("soft n=16", &[("moto", "on"), ("moto.entities", "16"), ("moto.partition", "soft")]),
            row("hard n=16", &[("moto", "on"), ("moto.entities", "16"), ("moto.partition", "hard")]),
            row("hard n=32", &[("moto", "on"), ("moto.entities", "32"), ("moto.partition", "hard")]),
        ],
        "placement" => {
            let mut out = vec![
                row("baseline", &[("moto", "off")]),
                row("tokenizer", &[("moto", "on"), ("moto.placement", "input")]),
            ];
            let mut blocks: Vec<String> = Vec::new();
            for (third, label) in block_thirds(base.depth).iter().zip(["+early", "+middle", "+late"]) {
                blocks.extend(third.iter().map(usize::to_string));
                let placement = std::iter::once("input".to_string()).chain(blocks.iter().cloned()).collect::<Vec<_>>();
                out.push(owned(
                    format!("tokenizer{label}"),
                    vec![("moto", "on".into()), ("moto.placement", placement.join(","))],
                ));
            }
            out
        }
        "norm" => vec![
            row("none", &[("norm", "none"), ("moto", "off")]),
            row("layer", &[("norm", "layer"), ("moto", "off")]),
            row("batch", &[("norm", "batch"), ("moto", "off")]),
            row("instance", &[("norm", "instance"), ("moto", "off")]),
            row("moto", &[("norm", "none"), ("moto", "on"), ("moto.placement", "input")]),
        ],
        "loss" => vec![
            row("baseline", &[("tokenprop", "off")]),
            row("l1", &[("tokenprop", "on"), ("tokenprop.loss", "l1")]),
            row("l2", &[("tokenprop", "on"), ("tokenprop.loss", "l2")]),
        ],
        "lambda" => {
            let mut out = vec![row("baseline", &[("tokenprop", "off")])];
            for l in ["0.001", "0.01", "0.1", "1"] {
                out.push(row(&format!("lambda={l}"), &[("tokenprop", "on"), ("tokenprop.lambda", l)]));
            }
            out
        }
        "decoder" => vec![
            row("baseline", &[("tokenprop", "off")]),
            row("x1 64", &[("tokenprop", "on"), ("decoder.multiplier", "1"), ("decoder.scale", "64")]),
            row("x1 128", &[("tokenprop", "on"), ("decoder.multiplier", "1"), ("decoder.scale", "128")]),
            row("x1 256", &[("tokenprop", "on"), ("decoder.multiplier", "1"), ("decoder.scale", "256")]),
            row("x2 64", &[("tokenprop", "on"), ("decoder.multiplier", "2"), ("decoder.scale", "64")]),
            row("x4 64", &[("tokenprop", "on"), ("decoder.multiplier", "4"), ("decoder.scale", "64")]),
        ],
        "optim" => vec![
            row("baseline adamw", &[("optim", "adamw"), ("tokenprop", "off")]),
            with("baseline sgd", &[("tokenprop", "off")], &sgd),
            row("frozen adamw", &[("optim", "adamw"), ("tokenizer", "frozen"), ("tokenprop", "off")]),
            with("frozen sgd", &[("tokenizer", "frozen"), ("tokenprop", "off")], &sgd),
            row("tokenprop adamw", &[("optim", "adamw"), ("tokenprop", "on")]),
            with("tokenprop sgd", &[("tokenprop", "on")], &sgd),
        ],
        "combine" => vec![
            row("baseline", &[("moto", "off"), ("tokenprop", "off")]),
            row("moto", &[("moto", "on"), ("tokenprop", "off")]),
            row("tokenprop", &[("moto", "off"), ("tokenprop", "on")]),
            row("moto+tokenprop", &[("moto", "on"), ("tokenprop", "on")]),
        ],
        "data" => {
            let mut out = Vec::new();
            for f in ["0.5", "0.4", "0.2", "0.1"] {
                out.push(row(&format!("baseline {f}"), &[("fraction", f), ("moto", "off"), ("tokenprop", "off")]));
                out.push(row(&format!("ours {f}"), &[("fraction", f), ("moto", "on"), ("tokenprop", "on")]));
            }
            out
        }
        other => bail!("unknown suite `{other}` (one of {})", SUITES.join(", ")),
    })
}

/// `base` with the row's overrides, seed offset and output directory.
pub fn row_config(base: &ExperimentConfig, row: &SuiteRow, seed_offset: u64, out: &Path) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    for (k, v) in &row.overrides {
        cfg.set(k, v).with_context(|| format!("row `{}`", row.label))?;
    }
    cfg.name = row.label.clone();
    cfg.seed = base.seed + seed_offset;
    cfg.output_dir = out.join(dir_name(&row.label)).join(format!("seed_{}", cfg.seed));
    cfg.validate().with_context(|| format!("row `{}`", row.label))?;
    Ok(cfg)
}

fn dir_name(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.data {
        DataSource::Synth => synth(cfg.classes, cfg.per_class, cfg.image_size, &mut Rng::new(cfg.data_seed)),
        DataSource::Dir(dir) => ingest(dir),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub row: String,
    pub seed: u64,
    /// `completed`, `nan_abort ...` or `error: ...`.
    pub status: String,
    pub val_acc: Option<f64>,
    pub train_acc: Option<f64>,
    pub recon_error: Option<f64>,
    pub token_similarity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowSummary {
    pub label: String,
    pub runs: Vec<RunSummary>,
}

/// Mean and sample standard deviation.
pub fn mean_std(v: &[f64]) -> Option<(f64, f64)> {
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some((mean, std))
}

impl RowSummary {
    pub fn completed(&self) -> usize {
        self.runs.iter().filter(|r| r.status == "completed").count()
    }

    fn stat(&self, f: impl Fn(&RunSummary) -> Option<f64>) -> Option<(f64, f64)> {
        let v: Vec<f64> = self.runs.iter().filter(|r| r.status == "completed").filter_map(f).collect();
        mean_std(&v)
    }

    pub fn accuracy(&self) -> Option<(f64, f64)> {
        self.stat(|r| r.val_acc)
    }

    pub fn recon_error(&self) -> Option<(f64, f64)> {
        self.stat(|r| r.recon_error)
    }

    pub fn token_similarity(&self) -> Option<(f64, f64)> {
        self.stat(|r| r.token_similarity)
    }
}

fn run_one(cfg: &ExperimentConfig, data: &Dataset) -> RunSummary {
    let mut s = RunSummary {
        row: cfg.name.clone(),
        seed: cfg.seed,
        status: String::new(),
        val_acc: None,
        train_acc: None,
        recon_error: None,
        token_similarity: None,
    };
    match train(cfg, data, None) {
        Ok(out) => {
            s.status = out.status.to_string();
            if out.status == Status::Completed {
                s.val_acc = out.final_val_acc();
                s.train_acc = out.metrics.last().map(|m| m.train_acc);
                s.recon_error = out.probe.as_ref().map(|p| p.recon_error);
                s.token_similarity = out.probe.as_ref().map(|p| p.token_similarity);
            }
        }
        Err(e) => s.status = format!("error: {e:#}"),
    }
    s
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Runs every row of `suite` for `seeds` seeds and writes the CSVs.
pub fn run_suite(suite: &str, base: &ExperimentConfig, seeds: usize, out: &Path) -> Result<Vec<RowSummary>> {
    let rows = rows(suite, base)?;
    run_rows(suite, &rows, base, seeds, out)
}

pub fn run_rows(suite: &str, rows: &[SuiteRow], base: &ExperimentConfig, seeds: usize, out: &Path) -> Result<Vec<RowSummary>> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let data = load_data(base)?;
    let mut summaries = Vec::new();
    for row in rows {
        let mut runs = Vec::new();
        for k in 0..seeds as u64 {
            let run = match row_config(base, row, k, out) {
                Ok(cfg) => run_one(&cfg, &data),
                Err(e) => failed(row, base.seed + k, e),
            };
            runs.push(run);
        }
        summaries.push(RowSummary {
            label: row.label.clone(),
            runs,
        });
    }
    write_suite(suite, &summaries, out)?;
    Ok(summaries)
}

fn failed(row: &SuiteRow, seed: u64, e: anyhow::Error) -> RunSummary {
    RunSummary {
        row: row.label.clone(),
        seed,
        status: format!("error: {e:#}"),
        val_acc: None,
        train_acc: None,
        recon_error: None,
        token_similarity: None,
    }
}

pub fn write_suite(suite: &str, rows: &[RowSummary], out: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(out.join("suite.csv"))?;
    w.write_record([
        "suite",
        "row",
        "runs",
        "completed",
        "acc_mean",
        "acc_std",
        "recon_mean",
        "recon_std",
        "similarity_mean",
        "similarity_std",
        "failures",
    ])?;
    for r in rows {
        let split = |s: Option<(f64, f64)>| (opt(s.map(|p| p.0)), opt(s.map(|p| p.1)));
        let (am, asd) = split(r.accuracy());
        let (rm, rsd) = split(r.recon_error());
        let (sm, ssd) = split(r.token_similarity());
        let failures = r
            .runs
            .iter()
            .filter(|x| x.status != "completed")
            .map(|x| format!("seed {}: {}", x.seed, x.status))
            .collect::<Vec<_>>()
            .join("; ");
        w.write_record([
            suite.to_string(),
            r.label.clone(),
            r.runs.len().to_string(),
            r.completed().to_string(),
            am,
            asd,
            rm,
            rsd,
            sm,
            ssd,
            failures,
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join("runs.csv"))?;
    w.write_record(["row", "seed", "status", "val_acc", "train_acc", "recon_error", "token_similarity"])?;
    for run in rows.iter().flat_map(|r| &r.runs) {
        w.write_record([
            run.row.clone(),
            run.seed.to_string(),
            run.status.clone(),
            opt(run.val_acc),
            opt(run.train_acc),
            opt(run.recon_error),
            opt(run.token_similarity),
        ])?;
    }
    w.flush()?;
    Ok(())
}
