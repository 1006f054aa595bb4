//! Acceptance report: one line per criterion.
//!
//! Property criteria (1, 2, 3, 7) fail the target. Directional criteria
//! (4, 5, 8) print FAIL without failing it unless `ACCEPTANCE_STRICT=1`;
//! criterion 6 prints FLAG for review. Run artifacts go to a temporary
//! directory, or to `ACCEPTANCE_OUT` when set.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{ensure, Result};
use toklab::gradsuite::cases;
use toklab::moto::{hard_partition, Moto, MotoConfig};
use toklab::probes::token_similarity;
use toklab::{
    Decoder, DecoderConfig, LossWeights, Module, RecLoss, Rng, Tensor64, TokenEncoder, TokenSet, Tokenizer,
    TokenizerConfig, Vit, VitConfig,
};
use toklab_harness::config::ExperimentConfig;
use toklab_harness::suite::{run_rows, RowSummary, SuiteRow, SGD_LR, SGD_WEIGHT_DECAY};
use toklab_harness::timing;

const SEEDS: usize = 3;

#[derive(Clone, Copy, PartialEq)]
enum Kind {
    Property,
    Directional,
    Flag,
}

struct Report {
    failed_hard: usize,
    failed_soft: usize,
}

impl Report {
    fn line(&mut self, id: u8, kind: Kind, ok: bool, detail: &str) {
        let tag = match (ok, kind) {
            (true, _) => "PASS",
            (false, Kind::Flag) => "FLAG",
            (false, _) => "FAIL",
        };
        println!("criterion {id}: {tag}  {detail}");
        if !ok {
            match kind {
                Kind::Property => self.failed_hard += 1,
                Kind::Directional => self.failed_soft += 1,
                Kind::Flag => {}
            }
        }
    }
}

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor64 {
    Tensor64::from_vec(rng.normal(shape.iter().product(), 0.0, 1.0), shape).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn check(name: &str, ok: bool, failures: &mut Vec<String>) {
    if !ok {
        failures.push(name.to_string());
    }
}

/// Invariants over many random seeds; returns the names that failed.
fn invariants() -> Result<Vec<String>> {
    let mut failures = Vec::new();
    for seed in 0..20u64 {
        let mut rng = Rng::new(seed);

        // soft layout is a distribution over entities at every pixel
        let cfg = MotoConfig {
            entities: 5,
            kq_dim: 8,
            ..MotoConfig::default()
        };
        let m = Moto::<f64>::new(&mut rng, 3, cfg)?;
        let x = randn(&mut rng, &[2, 3, 6, 5]).mul_scalar(1.0 + seed as f64);
        let probs = m.layout(&x)?.probs;
        let sums = probs.sum_axis(1, false)?.to_vec();
        check("layout normalization", sums.iter().all(|s| (s - 1.0).abs() < 1e-6), &mut failures);

        // one entity reduces to per-channel instance norm
        let one = Moto::<f64>::new(
            &mut rng,
            4,
            MotoConfig {
                entities: 1,
                kq_dim: 4,
                ..MotoConfig::default()
            },
        )?;
        let beta: Vec<f64> = rng.normal(4, 1.0, 0.5);
        let alpha: Vec<f64> = rng.normal(4, 0.0, 0.5);
        one.beta.set_data(&beta)?;
        one.alpha.set_data(&alpha)?;
        let x = randn(&mut rng, &[2, 4, 5, 5]).mul_scalar(2.0).add_scalar(0.5);
        let got = one.forward(&x)?.to_vec();
        let xs = x.to_vec();
        let mut want = vec![0.0; xs.len()];
        for (k, plane) in xs.chunks(25).enumerate() {
            let c = k % 4;
            let mean = plane.iter().sum::<f64>() / 25.0;
            let sd = (plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 25.0).sqrt();
            for (i, v) in plane.iter().enumerate() {
                want[k * 25 + i] = (v - mean) / (sd + 1e-5) * beta[c] + alpha[c];
            }
        }
        check("moto n=1 is instance norm", max_abs_diff(&got, &want) < 1e-5, &mut failures);

        // hard partition of logits equals hard partition of any softmax of them
        let z = randn(&mut rng, &[2, 4, 3, 3]);
        let tau = 0.05 + seed as f64 * 0.2;
        check(
            "argmax invariance",
            hard_partition(&z)?.probs.to_vec() == hard_partition(&z.softmax(1, tau)?)?.probs.to_vec(),
            &mut failures,
        );

        let s = randn(&mut rng, &[3, 7]).softmax(-1, 1.0)?;
        let rows = s.sum_axis(1, false)?.to_vec();
        check("softmax row sums", rows.iter().all(|r| (r - 1.0).abs() < 1e-12), &mut failures);

        let attn = toklab::MultiHeadAttention::<f64>::new(&mut rng, 8, 2)?;
        let w = attn.attention_weights(&randn(&mut rng, &[2, 5, 8]))?;
        let rows = w.sum_axis(3, false)?.to_vec();
        check("attention row sums", rows.iter().all(|r| (r - 1.0).abs() < 1e-12), &mut failures);

        // mean pairwise cosine against a direct double loop
        let v = rng.normal(6 * 5, 0.0, 1.0);
        let set = TokenSet::new(Tensor64::from_vec(v.clone(), &[1, 6, 5])?, (2, 3))?;
        let rows: Vec<&[f64]> = v.chunks(5).collect();
        let mut total = 0.0;
        for i in 0..6 {
            for j in i + 1..6 {
                let dot: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| a * b).sum();
                let n = |r: &[f64]| r.iter().map(|a| a * a).sum::<f64>().sqrt();
                total += dot / (n(rows[i]) * n(rows[j]));
            }
        }
        check(
            "token similarity brute force",
            (token_similarity(&set)? - total / 15.0).abs() < 1e-10,
            &mut failures,
        );
    }
    for seed in 0..5u64 {
        tokenprop_invariants(seed, &mut failures)?;
    }
    failures.sort();
    failures.dedup();
    Ok(failures)
}

fn tokenprop_invariants(seed: u64, failures: &mut Vec<String>) -> Result<()> {
    let mut rng = Rng::new(100 + seed);
    let tok = Tokenizer::<f64>::new(
        &mut rng,
        TokenizerConfig {
            patch_size: 4,
            embed_dim: 8,
            image_size: 16,
            ..TokenizerConfig::default()
        },
    )?;
    let vit = Vit::<f64>::new(
        &mut rng,
        VitConfig {
            depth: 1,
            heads: 2,
            embed_dim: 8,
            mlp_ratio: 2,
            num_classes: 3,
            ..VitConfig::default()
        },
    )?;
    let dec = Decoder::<f64>::new(
        &mut rng,
        8,
        DecoderConfig {
            base_channels: 16,
            ..DecoderConfig::default()
        },
    )?;
    let x = Tensor64::from_vec(rng.uniform(2 * 3 * 256, 0.0, 1.0), &[2, 3, 16, 16])?;
    let loss = |lambda: f64| -> Result<toklab::tokenprop::TokenPropLoss<f64>> {
        let t = tok.encode(&x)?;
        let w = LossWeights {
            lambda,
            kind: RecLoss::L2,
        };
        Ok(toklab::tokenprop::tokenprop_loss(&vit.forward(&t)?, &[0, 2], &dec.forward(&t)?, &x, w)?)
    };
    let (l0, l1) = (loss(0.0)?, loss(1.0)?);
    let lin = (0..5).all(|k| {
        let lambda = [0.001, 0.01, 0.1, 0.5, 2.0][k];
        let got = loss(lambda).unwrap().total.item();
        (got - (l0.task.item() + lambda * l1.rec.item())).abs() < 1e-10
    });
    check("objective linear in lambda", lin, failures);

    // reconstruction term alone reaches tokenizer and decoder, never the body
    l1.rec.backward()?;
    let zero = |p: &[(String, Tensor64)]| {
        p.iter()
            .all(|(_, t)| t.grad().map(|g| g.iter().all(|v| *v == 0.0)).unwrap_or(true))
    };
    check(
        "gradient routing",
        zero(&vit.named_params()) && !zero(&tok.named_params()) && !zero(&dec.named_params()),
        failures,
    );
    Ok(())
}

fn gradchecks(seeds: u64) -> Result<Vec<(String, f64)>> {
    let mut worst = Vec::new();
    for case in cases() {
        let mut w = 0.0f64;
        for seed in 0..seeds {
            w = w.max(case.run(seed, 1e-5)?.max_rel_error);
        }
        worst.push((case.name.to_string(), w));
    }
    Ok(worst)
}

fn base(out: &Path) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::parse(
        "per_class = 100\nepochs = 10\nembed_dim = 32\nheads = 2\nmoto.kq_dim = 16\n\
         decoder.channels = 16\nprobe_epochs = 0\ndtype = f32\n",
    )?;
    cfg.output_dir = out.to_path_buf();
    Ok(cfg)
}

fn row(label: &str, overrides: &[(&str, &str)]) -> SuiteRow {
    SuiteRow {
        label: label.to_string(),
        overrides: overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
    }
}

fn find<'a>(rows: &'a [RowSummary], label: &str) -> &'a RowSummary {
    rows.iter().find(|r| r.label == label).expect("row label")
}

fn acc(rows: &[RowSummary], label: &str) -> f64 {
    find(rows, label).accuracy().map_or(f64::NAN, |(m, _)| m)
}

fn fmt_row(r: &RowSummary) -> String {
    let a = r.accuracy().map_or("-".into(), |(m, s)| format!("{:.1}±{:.1}", 100.0 * m, 100.0 * s));
    format!("{} {a} ({}/{})", r.label, r.completed(), r.runs.len())
}

fn desk(report: &mut Report, out: &Path) -> Result<()> {
    let cfg = base(out)?;
    let sgd_lr = SGD_LR.to_string();
    let sgd_wd = SGD_WEIGHT_DECAY.to_string();
    let sgd = [("optim", "sgd"), ("lr", sgd_lr.as_str()), ("weight_decay", sgd_wd.as_str())];
    let with_sgd = |label: &str, head: &[(&str, &str)]| {
        let all: Vec<(&str, &str)> = head.iter().chain(&sgd).copied().collect();
        row(label, &all)
    };

    let start = Instant::now();
    let main_rows = [
        row("none", &[("probe_epochs", "10")]),
        row("layer", &[("norm", "layer")]),
        row("batch", &[("norm", "batch")]),
        row("instance", &[("norm", "instance")]),
        row("moto", &[("moto", "on")]),
        row("frozen", &[("tokenizer", "frozen"), ("probe_epochs", "10")]),
        row("lambda=0.001", &[("tokenprop", "on"), ("tokenprop.lambda", "0.001")]),
        with_sgd("none sgd", &[]),
        with_sgd("lambda=0.001 sgd", &[("tokenprop", "on"), ("tokenprop.lambda", "0.001")]),
    ];
    let rows = run_rows("acceptance", &main_rows, &cfg, SEEDS, &out.join("main"))?;
    let main_secs = start.elapsed().as_secs_f64();
    for r in &rows {
        println!("  {}", fmt_row(r));
    }

    let sweep_start = Instant::now();
    let sweep_rows: Vec<SuiteRow> = ["0.01", "0.1", "1"]
        .iter()
        .map(|l| row(&format!("lambda={l}"), &[("tokenprop", "on"), ("tokenprop.lambda", l)]))
        .collect();
    let sweep = run_rows("lambda sweep", &sweep_rows, &cfg, 1, &out.join("sweep"))?;
    let sweep_secs = sweep_start.elapsed().as_secs_f64();
    for r in &sweep {
        println!("  {} status {}", fmt_row(r), r.runs[0].status);
    }

    // criterion 4
    let (none, moto) = (acc(&rows, "none"), acc(&rows, "moto"));
    let (layer, batch) = (acc(&rows, "layer"), acc(&rows, "batch"));
    let ok = moto > none && layer <= moto && batch <= moto;
    report.line(
        4,
        Kind::Directional,
        ok,
        &format!(
            "moto {:.1} vs none {:.1}, layer {:.1}, batch {:.1} (instance {:.1}); {SEEDS} seeds, {:.0}s",
            100.0 * moto,
            100.0 * none,
            100.0 * layer,
            100.0 * batch,
            100.0 * acc(&rows, "instance"),
            main_secs
        ),
    );

    // criterion 5
    let tp = find(&rows, "lambda=0.001");
    let tp_acc = acc(&rows, "lambda=0.001");
    let finite = tp.completed() == SEEDS;
    let swept = sweep.iter().all(|r| r.runs.iter().all(|s| !s.status.starts_with("error")));
    let ok = finite && swept && tp_acc >= none - 0.005;
    let lam1 = &find(&sweep, "lambda=1").runs[0].status;
    report.line(
        5,
        Kind::Directional,
        ok,
        &format!(
            "lambda=0.001 {:.1} vs baseline {:.1}, nan-free {finite}; sweep completed {swept}, lambda=1 {lam1}; {:.0}s sweep",
            100.0 * tp_acc,
            100.0 * none,
            sweep_secs
        ),
    );

    // criterion 6: lower reconstruction error means more accessible input
    let frozen = find(&rows, "frozen");
    let trained = find(&rows, "none");
    let m = |v: Option<(f64, f64)>| v.map_or(f64::NAN, |(m, _)| m);
    let (fr, tr) = (m(frozen.recon_error()), m(trained.recon_error()));
    let (fs, ts) = (m(frozen.token_similarity()), m(trained.token_similarity()));
    report.line(
        6,
        Kind::Flag,
        fr <= tr && fs <= ts,
        &format!("recon error frozen {fr:.5} vs trained {tr:.5}; similarity frozen {fs:.4} vs trained {ts:.4}"),
    );

    // criterion 8: gap = adamw accuracy minus sgd accuracy
    let base_gap = none - acc(&rows, "none sgd");
    let tp_gap = tp_acc - acc(&rows, "lambda=0.001 sgd");
    report.line(
        8,
        Kind::Directional,
        tp_gap <= base_gap,
        &format!(
            "sgd gap tokenprop {:.1} vs baseline {:.1} points",
            100.0 * tp_gap,
            100.0 * base_gap
        ),
    );
    Ok(())
}

fn determinism(out: &Path) -> Result<Vec<String>> {
    let mut cfg = base(out)?;
    cfg.epochs = 3;
    cfg.probe_epochs = 2;
    let rows = [
        row("moto", &[("moto", "on")]),
        row("tokenprop", &[("tokenprop", "on"), ("tokenprop.lambda", "0.01")]),
    ];
    let files = [
        "suite.csv",
        "runs.csv",
        "moto/seed_0/metrics.csv",
        "moto/seed_0/probe.csv",
        "tokenprop/seed_0/metrics.csv",
        "tokenprop/seed_0/probe.csv",
    ];
    let (a, b) = (out.join("a"), out.join("b"));
    run_rows("determinism", &rows, &cfg, 1, &a)?;
    run_rows("determinism", &rows, &cfg, 1, &b)?;
    let mut differ = Vec::new();
    for f in files {
        if fs::read(a.join(f))? != fs::read(b.join(f))? {
            differ.push(f.to_string());
        }
    }
    Ok(differ)
}

fn main() -> Result<()> {
    let _keep;
    let out: PathBuf = match std::env::var_os("ACCEPTANCE_OUT") {
        Some(p) => p.into(),
        None => {
            let t = tempfile::tempdir()?;
            let p = t.path().to_path_buf();
            _keep = t;
            p
        }
    };
    let mut report = Report {
        failed_hard: 0,
        failed_soft: 0,
    };

    let start = Instant::now();
    let failures = invariants()?;
    let secs = start.elapsed().as_secs_f64();
    report.line(
        1,
        Kind::Property,
        failures.is_empty() && secs < 120.0,
        &format!("invariants over 20 seeds in {secs:.1}s; failing: {failures:?}"),
    );

    let start = Instant::now();
    let worst = gradchecks(20)?;
    let secs = start.elapsed().as_secs_f64();
    let (name, max) = worst.iter().cloned().fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    report.line(
        2,
        Kind::Property,
        max < 1e-3 && secs < 600.0,
        &format!("{} cases x 20 seeds, worst rel err {max:.2e} ({name}), {secs:.0}s", worst.len()),
    );

    let rows = timing::measure(&timing::LADDER, timing::TRIALS, 0)?;
    let (mr, ar) = timing::ratios(&rows);
    report.line(
        3,
        Kind::Property,
        mr.iter().all(|r| *r <= 5.0) && ar.iter().all(|r| *r >= 10.0),
        &format!("sizes {:?}: moto ratios {mr:.2?}, attention ratios {ar:.2?}", timing::LADDER),
    );

    desk(&mut report, &out)?;

    let differ = determinism(&out.join("determinism"))?;
    report.line(7, Kind::Property, differ.is_empty(), &format!("differing files: {differ:?}"));

    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    println!(
        "acceptance: {} property failures, {} directional failures{}",
        report.failed_hard,
        report.failed_soft,
        if strict { " (strict)" } else { "" }
    );
    ensure!(report.failed_hard == 0, "property criteria failed");
    ensure!(!strict || report.failed_soft == 0, "directional criteria failed");
    Ok(())
}
