//! The training loop, metrics files and checkpoints.
//!
//! A run directory contains
//!
//! ```text
//! config.txt         the full experiment config
//! metrics.csv        one row per epoch; deterministic for a given config
//! timing.csv         wall seconds per epoch
//! probe.csv          the final reconstruction probe
//! status.txt         `completed`, or `nan_abort epoch=<e> step=<s> lambda=<l>`
//! checkpoints/epoch_NNNN/{params.tlab, optim.tlab, manifest.txt, metrics.csv}
//! ```

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, ensure, Context, Result};
use toklab::optim::warmup_cosine;
use toklab::probes::{estimate_accessibility, ProbeConfig, ProbeReport};
use toklab::tokenprop::{tokenprop_loss, LossWeights};
use toklab::{no_grad, serialize, DType, Module, NamedParams, Optimizer, Rng, Scalar, Tensor};

use crate::config::ExperimentConfig;
use crate::data::{split, Dataset};
use crate::model::Model;

/// Probe images are capped to keep the post-training probe cheap.
pub const PROBE_TRAIN_IMAGES: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub task_loss: f64,
    pub rec_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

impl EpochMetrics {
    pub const HEADER: [&'static str; 6] = ["epoch", "lr", "task_loss", "rec_loss", "train_acc", "val_acc"];

    fn record(&self) -> [String; 6] {
        [
            self.epoch.to_string(),
            self.lr.to_string(),
            self.task_loss.to_string(),
            self.rec_loss.to_string(),
            self.train_acc.to_string(),
            self.val_acc.to_string(),
        ]
    }

    fn parse(rec: &csv::StringRecord) -> Result<Self> {
        let f = |i: usize| -> Result<f64> { Ok(rec.get(i).ok_or_else(|| anyhow!("short metrics row"))?.parse()?) };
        Ok(Self {
            epoch: rec.get(0).ok_or_else(|| anyhow!("empty metrics row"))?.parse()?,
            lr: f(1)?,
            task_loss: f(2)?,
            rec_loss: f(3)?,
            train_acc: f(4)?,
            val_acc: f(5)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Status {
    Completed,
    /// Non-finite loss or gradient; training stopped.
    NanAbort { epoch: usize, step: u64, lambda: f64 },
}

impl std::fmt::Display for Status {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Status::Completed => f.write_str("completed"),
            Status::NanAbort { epoch, step, lambda } => write!(f, "nan_abort epoch={epoch} step={step} lambda={lambda}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub status: Status,
    pub metrics: Vec<EpochMetrics>,
    pub probe: Option<ProbeReport>,
}

impl RunOutcome {
    pub fn final_val_acc(&self) -> Option<f64> {
        self.metrics.last().map(|m| m.val_acc)
    }
}

/// Trains `cfg` on `data`, optionally resuming from a checkpoint directory.
pub fn train(cfg: &ExperimentConfig, data: &Dataset, resume: Option<&Path>) -> Result<RunOutcome> {
    cfg.validate()?;
    ensure!(
        data.size == cfg.image_size,
        "config image_size {} but dataset images are {}px",
        cfg.image_size,
        data.size
    );
    ensure!(
        data.classes() == cfg.classes,
        "config classes {} but dataset has {}",
        cfg.classes,
        data.classes()
    );
    match cfg.dtype {
        DType::F32 => Trainer::<f32>::new(cfg, data)?.run(resume),
        DType::F64 => Trainer::<f64>::new(cfg, data)?.run(resume),
    }
}

struct Trainer<'a, T: Scalar> {
    cfg: &'a ExperimentConfig,
    data: &'a Dataset,
    model: Model<T>,
    opt: Optimizer<T>,
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
    rng: Rng,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    fn new(cfg: &'a ExperimentConfig, data: &'a Dataset) -> Result<Self> {
        let rng = Rng::new(cfg.seed);
        let model = Model::<T>::new(cfg, &rng)?;
        let opt = Optimizer::new(model.named_params(), cfg.optim_config())?;
        let (train_idx, val_idx) = split(data.len(), cfg.fraction);
        ensure!(!train_idx.is_empty() && !val_idx.is_empty(), "dataset too small to split");
        Ok(Self {
            cfg,
            data,
            model,
            opt,
            train_idx,
            val_idx,
            rng,
        })
    }

    fn steps_per_epoch(&self) -> usize {
        self.train_idx.len().div_ceil(self.cfg.batch_size)
    }

    fn run(mut self, resume: Option<&Path>) -> Result<RunOutcome> {
        let dir = self.cfg.output_dir.clone();
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join("config.txt"), self.cfg.to_text())?;

        let mut metrics = Vec::new();
        let mut timing = Vec::new();
        if let Some(ckpt) = resume {
            metrics = self.load_checkpoint(ckpt)?;
        }
        let spe = self.steps_per_epoch();
        let total = self.cfg.epochs * spe;
        let warmup = self.cfg.warmup_epochs * spe;
        let mut status = Status::Completed;

        for epoch in metrics.len()..self.cfg.epochs {
            let start = Instant::now();
            let mut order = self.train_idx.clone();
            self.rng.fork(1000 + epoch as u64).shuffle(&mut order);
            let (mut task_sum, mut rec_sum, mut correct, mut lr) = (0.0, 0.0, 0usize, self.cfg.lr);
            let mut aborted = false;
            for idx in order.chunks(self.cfg.batch_size) {
                let step = self.opt.steps() as usize;
                lr = warmup_cosine(self.cfg.lr, self.cfg.min_lr, step, warmup, total);
                self.opt.set_lr(lr);
                match self.step(idx)? {
                    Some((task, rec, hits)) => {
                        task_sum += task * idx.len() as f64;
                        rec_sum += rec * idx.len() as f64;
                        correct += hits;
                    }
                    None => {
                        aborted = true;
                        break;
                    }
                }
            }
            if aborted {
                status = Status::NanAbort {
                    epoch,
                    step: self.opt.steps(),
                    lambda: if self.cfg.tokenprop { self.cfg.lambda } else { 0.0 },
                };
                break;
            }
            let n = self.train_idx.len() as f64;
            metrics.push(EpochMetrics {
                epoch,
                lr,
                task_loss: task_sum / n,
                rec_loss: rec_sum / n,
                train_acc: correct as f64 / n,
                val_acc: self.evaluate()?,
            });
            timing.push((epoch, start.elapsed().as_secs_f64()));
            let done = epoch + 1 == self.cfg.epochs;
            let every = self.cfg.checkpoint_every;
            if done || (every > 0 && (epoch + 1) % every == 0) {
                self.save_checkpoint(&dir.join("checkpoints").join(format!("epoch_{:04}", epoch + 1)), &metrics)?;
            }
        }

        write_metrics(&dir.join("metrics.csv"), &metrics)?;
        let mut w = csv::Writer::from_path(dir.join("timing.csv"))?;
        w.write_record(["epoch", "wall_seconds"])?;
        for (e, s) in &timing {
            w.write_record([e.to_string(), format!("{s:.3}")])?;
        }
        w.flush()?;
        fs::write(dir.join("status.txt"), format!("{status}\n"))?;

        let probe = if status == Status::Completed && self.cfg.probe_epochs > 0 {
            let report = self.probe()?;
            write_probe(&dir.join("probe.csv"), &report)?;
            Some(report)
        } else {
            None
        };
        Ok(RunOutcome {
            dir,
            status,
            metrics,
            probe,
        })
    }

    /// One optimizer step; `None` on a non-finite loss or gradient.
    fn step(&mut self, idx: &[usize]) -> Result<Option<(f64, f64, usize)>> {
        let (x, labels) = self.data.batch::<T>(idx)?;
        self.opt.zero_grad();
        let out = self.model.forward(&x, true)?;
        let hits = count_hits(&out.logits, &labels)?;
        let (loss, task, rec) = match &self.model.decoder {
            Some(dec) => {
                let recon = dec.forward(&out.tokens)?;
                let weights = LossWeights {
                    lambda: self.cfg.lambda,
                    kind: self.cfg.rec_loss,
                };
                let l = tokenprop_loss(&out.logits, &labels, &recon, &x, weights)?;
                let (t, r) = (l.task.item().as_f64(), l.rec.item().as_f64());
                (l.total, t, r)
            }
            None => {
                let l = out.logits.cross_entropy(&labels)?;
                let t = l.item().as_f64();
                (l, t, 0.0)
            }
        };
        if !loss.item().as_f64().is_finite() {
            return Ok(None);
        }
        loss.backward()?;
        match self.opt.step() {
            Ok(_) => Ok(Some((task, rec, hits))),
            Err(toklab::Error::NonFiniteGrad(_)) => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn evaluate(&self) -> Result<f64> {
        let mut correct = 0;
        for idx in self.val_idx.chunks(self.cfg.batch_size) {
            let (x, labels) = self.data.batch::<T>(idx)?;
            let logits = no_grad(|| self.model.forward(&x, false).map(|o| o.logits))?;
            correct += count_hits(&logits, &labels)?;
        }
        Ok(correct as f64 / self.val_idx.len() as f64)
    }

    fn probe(&self) -> Result<ProbeReport> {
        let cap = self.train_idx.len().min(PROBE_TRAIN_IMAGES);
        let (train, _) = self.data.batch::<T>(&self.train_idx[..cap])?;
        let (val, _) = self.data.batch::<T>(&self.val_idx)?;
        let cfg = ProbeConfig {
            epochs: self.cfg.probe_epochs,
            batch_size: self.cfg.batch_size,
            decoder: self.cfg.decoder_config(),
            seed: self.cfg.seed,
            ..ProbeConfig::default()
        };
        Ok(estimate_accessibility(&self.model.encoder(), &self.cfg.name, &train, &val, &cfg)?)
    }

    fn save_checkpoint(&self, dir: &Path, metrics: &[EpochMetrics]) -> Result<()> {
        fs::create_dir_all(dir)?;
        let params = self.model.named_params();
        let state = self.opt.state();
        write_tensors(&dir.join("params.tlab"), &params)?;
        write_tensors(&dir.join("optim.tlab"), &state)?;
        let mut manifest = format!("epoch = {}\nsteps = {}\n", metrics.len(), self.opt.steps());
        for (name, p) in &params {
            manifest += &format!("param {name} {:?}\n", p.shape());
        }
        for (name, s) in &state {
            manifest += &format!("optim {name} {:?}\n", s.shape());
        }
        fs::write(dir.join("manifest.txt"), manifest)?;
        write_metrics(&dir.join("metrics.csv"), metrics)
    }

    fn load_checkpoint(&mut self, dir: &Path) -> Result<Vec<EpochMetrics>> {
        let manifest = load_params(&self.model, dir)?;
        let state = read_tensors::<T>(&dir.join("optim.tlab"), &manifest_names(&manifest, "optim "))?;
        self.opt.load_state(&state)?;
        let mut r = csv::Reader::from_path(dir.join("metrics.csv"))?;
        let metrics = r.records().map(|rec| EpochMetrics::parse(&rec?)).collect::<Result<Vec<_>>>()?;
        if metrics.len() as u64 * self.steps_per_epoch() as u64 != self.opt.steps() {
            bail!("checkpoint epoch and optimizer step count disagree");
        }
        Ok(metrics)
    }
}

fn manifest_names(manifest: &str, tag: &str) -> Vec<String> {
    manifest
        .lines()
        .filter_map(|l| l.strip_prefix(tag))
        .filter_map(|l| l.split_whitespace().next().map(String::from))
        .collect()
}

/// Copies checkpointed parameters into `model`; returns the manifest text.
pub fn load_params<T: Scalar>(model: &Model<T>, dir: &Path) -> Result<String> {
    let manifest = fs::read_to_string(dir.join("manifest.txt"))
        .with_context(|| format!("reading checkpoint {}", dir.display()))?;
    let params = model.named_params();
    let stored = read_tensors::<T>(&dir.join("params.tlab"), &manifest_names(&manifest, "param "))?;
    ensure!(
        stored.len() == params.len(),
        "checkpoint has {} tensors, model {}",
        stored.len(),
        params.len()
    );
    for ((name, p), (sname, s)) in params.iter().zip(&stored) {
        ensure!(name == sname, "checkpoint tensor `{sname}` where model has `{name}`");
        ensure!(p.shape() == s.shape(), "shape mismatch for `{name}`");
        p.set_data(&s.to_vec())?;
    }
    Ok(manifest)
}

fn count_hits<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<usize> {
    let pred = logits.argmax_axis(-1)?;
    Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count())
}

fn write_tensors<T: Scalar>(path: &Path, tensors: &NamedParams<T>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for (_, t) in tensors {
        serialize::write_tensor(&mut w, t)?;
    }
    w.flush()?;
    Ok(())
}

fn read_tensors<T: Scalar>(path: &Path, names: &[String]) -> Result<NamedParams<T>> {
    let mut r = BufReader::new(fs::File::open(path).with_context(|| format!("opening {}", path.display()))?);
    names
        .iter()
        .map(|n| {
            let t = serialize::read_tensor(&mut r).with_context(|| format!("reading `{n}` from {}", path.display()))?;
            Ok((n.clone(), t))
        })
        .collect()
}

pub fn write_metrics(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(EpochMetrics::HEADER)?;
    for m in metrics {
        w.write_record(m.record())?;
    }
    w.flush()?;
    Ok(())
}

pub const PROBE_HEADER: [&str; 5] = ["tokenizer_id", "recon_error", "token_similarity", "epochs", "seed"];

pub fn probe_record(r: &ProbeReport) -> [String; 5] {
    [
        r.tokenizer_id.clone(),
        r.recon_error.to_string(),
        r.token_similarity.to_string(),
        r.epochs_trained.to_string(),
        r.seed.to_string(),
    ]
}

pub fn write_probe(path: &Path, report: &ProbeReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(PROBE_HEADER)?;
    w.write_record(probe_record(report))?;
    w.flush()?;
    Ok(())
}
