use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use toklab::gradsuite::cases;
use toklab::moto::{default_palette, layout_colorize, Ppm};
use toklab::probes::{estimate_accessibility, ProbeConfig};
use toklab::{no_grad, Rng};
use toklab_harness::config::{ExperimentConfig, KEYS};
use toklab_harness::data::split;
use toklab_harness::model::Model;
use toklab_harness::suite::{load_data, run_suite, SUITES};
use toklab_harness::timing;
use toklab_harness::train::{load_params, train, write_probe, Status};

#[derive(Parser)]
#[command(name = "toklab", about = "Vision tokenizer experiments at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// Plain-text key = value config file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Config overrides as KEY=VALUE; run `toklab keys` for the list.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        for o in &self.overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| anyhow!("override `{o}` is not KEY=VALUE"))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one configuration.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint directory to resume from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Reconstruction probe of a tokenizer, fresh or from a checkpoint.
    Probe {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run a named suite over several seeds.
    Suite {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(SUITES))]
        name: String,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long, default_value = "runs/suite")]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write the synthetic dataset as a TLAB directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Render MoTo semantic layouts of validation images as PPM files.
    Colorize {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        images: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Finite-difference gradient checks of every op and composed path.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
    /// Wall time of MoTo against pixel-wise self-attention.
    Timing {
        #[arg(long, default_value_t = timing::TRIALS)]
        trials: usize,
        #[arg(long, value_delimiter = ',', default_values_t = timing::LADDER)]
        sizes: Vec<usize>,
    },
    /// List the config keys with their defaults.
    Keys,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Train { cfg, resume } => {
            let cfg = cfg.load()?;
            let data = load_data(&cfg)?;
            let out = train(&cfg, &data, resume.as_deref())?;
            for m in &out.metrics {
                println!(
                    "epoch {:>3}  task {:.4}  rec {:.4}  train {:.3}  val {:.3}",
                    m.epoch, m.task_loss, m.rec_loss, m.train_acc, m.val_acc
                );
            }
            if let Some(p) = &out.probe {
                println!("probe  recon {:.5}  similarity {:.4}", p.recon_error, p.token_similarity);
            }
            println!("{} -> {}", out.status, out.dir.display());
            Ok(match out.status {
                Status::Completed => ExitCode::SUCCESS,
                Status::NanAbort { .. } => ExitCode::from(3),
            })
        }
        Cmd::Probe { cfg, checkpoint } => {
            let cfg = cfg.load()?;
            let data = load_data(&cfg)?;
            let model = Model::<f64>::new(&cfg, &Rng::new(cfg.seed))?;
            if let Some(dir) = &checkpoint {
                load_params(&model, dir)?;
            }
            let (train_idx, val_idx) = split(data.len(), cfg.fraction);
            let (train, _) = data.batch::<f64>(&train_idx)?;
            let (val, _) = data.batch::<f64>(&val_idx)?;
            let pcfg = ProbeConfig {
                epochs: cfg.probe_epochs,
                batch_size: cfg.batch_size,
                decoder: cfg.decoder_config(),
                seed: cfg.seed,
                ..ProbeConfig::default()
            };
            let report = estimate_accessibility(&model.encoder(), &cfg.name, &train, &val, &pcfg)?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            write_probe(&cfg.output_dir.join("probe.csv"), &report)?;
            println!(
                "{}  recon {:.5}  similarity {:.4}",
                report.tokenizer_id, report.recon_error, report.token_similarity
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Suite { name, seeds, out, cfg } => {
            let cfg = cfg.load()?;
            let rows = run_suite(&name, &cfg, seeds, &out)?;
            for r in &rows {
                let acc = r.accuracy().map_or("-".into(), |(m, s)| format!("{:.2}±{:.2}", 100.0 * m, 100.0 * s));
                println!("{:<24} acc {acc:<14} completed {}/{}", r.label, r.completed(), r.runs.len());
            }
            println!("wrote {}", out.join("suite.csv").display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Synth { out, cfg } => {
            let cfg = cfg.load()?;
            let data = load_data(&cfg)?;
            data.save(&out)?;
            println!("{} images of {} classes -> {}", data.len(), data.classes(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Colorize {
            out,
            images,
            checkpoint,
            cfg,
        } => {
            let cfg = cfg.load()?;
            if !(cfg.moto && cfg.moto_placement.input) {
                bail!("colorize needs `moto = on` with input placement");
            }
            let data = load_data(&cfg)?;
            let model = Model::<f64>::new(&cfg, &Rng::new(cfg.seed))?;
            if let Some(dir) = &checkpoint {
                load_params(&model, dir)?;
            }
            let moto = model.tokenizer.moto.as_ref().expect("input moto");
            let (_, val_idx) = split(data.len(), 1.0);
            let idx = &val_idx[..images.min(val_idx.len())];
            let (x, _) = data.batch::<f64>(idx)?;
            let layout = no_grad(|| moto.layout(&model.norm.forward(&x, false)?))?;
            let maps = layout_colorize(&layout, &default_palette(cfg.moto_entities))?;
            std::fs::create_dir_all(&out)?;
            for (k, (&i, map)) in idx.iter().zip(&maps).enumerate() {
                let img = data.image(i);
                let plane = data.size * data.size;
                let rgb = (0..plane)
                    .flat_map(|p| (0..3).map(move |c| (img[c * plane + p] * 255.0).round() as u8))
                    .collect();
                let src = Ppm {
                    width: data.size,
                    height: data.size,
                    rgb,
                };
                std::fs::write(out.join(format!("image_{k:03}.ppm")), src.to_bytes())?;
                std::fs::write(out.join(format!("layout_{k:03}.ppm")), map.to_bytes())?;
            }
            println!("{} layouts -> {}", maps.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Gradcheck { seeds, eps } => {
            let mut failed = 0;
            for case in cases() {
                let tol = if case.composed { 1e-3 } else { 1e-4 };
                let mut worst = 0.0f64;
                for seed in 0..seeds {
                    let r = case.run(seed, eps).with_context(|| format!("case {}", case.name))?;
                    worst = worst.max(r.max_rel_error);
                }
                let ok = worst < tol;
                failed += usize::from(!ok);
                println!("{:<4} {:<28} max rel err {worst:.2e}", if ok { "ok" } else { "FAIL" }, case.name);
            }
            Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Cmd::Timing { trials, sizes } => {
            let rows = timing::measure(&sizes, trials, 0)?;
            println!("{:>6} {:>12} {:>14}", "size", "moto ms", "attention ms");
            for r in &rows {
                println!("{:>6} {:>12.3} {:>14.3}", r.size, r.moto_ms, r.attention_ms);
            }
            let (m, a) = timing::ratios(&rows);
            println!("moto ratios {m:.2?}\nattention ratios {a:.2?}");
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Keys => {
            let cfg = ExperimentConfig::default();
            for k in KEYS {
                println!("{k} = {}", cfg.get(k).unwrap_or_default());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
