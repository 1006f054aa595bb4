//! Experiment configuration as a plain-text `key = value` file.
//!
//! Every key has a default, unknown keys are rejected, and
//! [`ExperimentConfig::to_text`] writes every key so a parsed file
//! reproduces the config exactly.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use toklab::moto::Partition;
use toklab::{DType, DecoderConfig, MotoConfig, OptimConfig, OptimKind, RecLoss, TokenizerConfig, Variant, VitConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputNormKind {
    None,
    Layer,
    Batch,
    Instance,
}

impl fmt::Display for InputNormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputNormKind::None => "none",
            InputNormKind::Layer => "layer",
            InputNormKind::Batch => "batch",
            InputNormKind::Instance => "instance",
        })
    }
}

impl FromStr for InputNormKind {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => InputNormKind::None,
            "layer" => InputNormKind::Layer,
            "batch" => InputNormKind::Batch,
            "instance" => InputNormKind::Instance,
            _ => bail!("unknown norm `{s}` (none|layer|batch|instance)"),
        })
    }
}

/// Where MoTo layers go: on the input image and/or after transformer blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placement {
    pub input: bool,
    pub blocks: Vec<usize>,
}

impl Default for Placement {
    fn default() -> Self {
        Self {
            input: true,
            blocks: Vec::new(),
        }
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts: Vec<String> = Vec::new();
        if self.input {
            parts.push("input".into());
        }
        parts.extend(self.blocks.iter().map(usize::to_string));
        f.write_str(&parts.join(","))
    }
}

impl FromStr for Placement {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut p = Placement {
            input: false,
            blocks: Vec::new(),
        };
        for part in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            if part == "input" {
                p.input = true;
            } else {
                p.blocks
                    .push(part.parse().with_context(|| format!("bad placement entry `{part}`"))?);
            }
        }
        if !p.input && p.blocks.is_empty() {
            bail!("empty placement");
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSource {
    Synth,
    Dir(PathBuf),
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSource::Synth => f.write_str("synth"),
            DataSource::Dir(p) => write!(f, "{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub dtype: DType,
    pub data: DataSource,
    /// Seed of the synthetic generator, independent of the training seed.
    pub data_seed: u64,
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    /// Share of the training split kept.
    pub fraction: f64,
    pub tokenizer: Variant,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub norm: InputNormKind,
    pub moto: bool,
    pub moto_entities: usize,
    pub moto_tau: f64,
    pub moto_partition: Partition,
    pub moto_placement: Placement,
    pub moto_kq_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub tokenprop: bool,
    pub lambda: f64,
    pub rec_loss: RecLoss,
    pub decoder_multiplier: usize,
    pub decoder_scale: usize,
    pub decoder_channels: usize,
    pub optim: OptimKind,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Checkpoint interval in epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Epochs of the post-training reconstruction probe; 0 skips it.
    pub probe_epochs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            dtype: DType::F32,
            data: DataSource::Synth,
            data_seed: 0,
            classes: 10,
            per_class: 500,
            image_size: 32,
            fraction: 1.0,
            tokenizer: Variant::Patchify,
            patch_size: 8,
            embed_dim: 64,
            norm: InputNormKind::None,
            moto: false,
            moto_entities: 8,
            moto_tau: 0.1,
            moto_partition: Partition::Soft,
            moto_placement: Placement::default(),
            moto_kq_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            tokenprop: false,
            lambda: 0.001,
            rec_loss: RecLoss::L2,
            decoder_multiplier: 1,
            decoder_scale: 64,
            decoder_channels: 32,
            optim: OptimKind::AdamW,
            lr: 1e-3,
            min_lr: 1e-5,
            warmup_epochs: 0,
            momentum: 0.9,
            betas: (0.9, 0.999),
            weight_decay: 0.05,
            grad_clip: None,
            epochs: 30,
            batch_size: 64,
            seed: 0,
            output_dir: PathBuf::from("runs/run"),
            checkpoint_every: 0,
            probe_epochs: 10,
        }
    }
}

fn parse_bool(v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => bail!("expected on/off, got `{v}`"),
    }
}

fn onoff(b: bool) -> String {
    if b { "on" } else { "off" }.into()
}

fn num<T: FromStr>(v: &str) -> Result<T>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    v.parse::<T>().with_context(|| format!("bad number `{v}`"))
}

fn core<T, E: fmt::Display>(r: std::result::Result<T, E>) -> Result<T> {
    r.map_err(|e| anyhow!("{e}"))
}

/// Keys accepted in config files, in canonical order.
pub const KEYS: &[&str] = &[
    "name",
    "dtype",
    "data",
    "data_seed",
    "classes",
    "per_class",
    "image_size",
    "fraction",
    "tokenizer",
    "patch_size",
    "embed_dim",
    "norm",
    "moto",
    "moto.entities",
    "moto.tau",
    "moto.partition",
    "moto.placement",
    "moto.kq_dim",
    "depth",
    "heads",
    "mlp_ratio",
    "tokenprop",
    "tokenprop.lambda",
    "tokenprop.loss",
    "decoder.multiplier",
    "decoder.scale",
    "decoder.channels",
    "optim",
    "lr",
    "min_lr",
    "warmup_epochs",
    "momentum",
    "betas",
    "weight_decay",
    "grad_clip",
    "epochs",
    "batch_size",
    "seed",
    "output_dir",
    "checkpoint_every",
    "probe_epochs",
];

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "name" => self.name = v.to_string(),
            "dtype" => {
                self.dtype = match v {
                    "f32" => DType::F32,
                    "f64" => DType::F64,
                    _ => bail!("dtype must be f32 or f64"),
                }
            }
            "data" => {
                self.data = if v == "synth" {
                    DataSource::Synth
                } else {
                    DataSource::Dir(PathBuf::from(v))
                }
            }
            "data_seed" => self.data_seed = num(v)?,
            "classes" => self.classes = num(v)?,
            "per_class" => self.per_class = num(v)?,
            "image_size" => self.image_size = num(v)?,
            "fraction" => self.fraction = num(v)?,
            "tokenizer" => self.tokenizer = core(v.parse())?,
            "patch_size" => self.patch_size = num(v)?,
            "embed_dim" => self.embed_dim = num(v)?,
            "norm" => self.norm = v.parse()?,
            "moto" => self.moto = parse_bool(v)?,
            "moto.entities" => self.moto_entities = num(v)?,
            "moto.tau" => self.moto_tau = num(v)?,
            "moto.partition" => self.moto_partition = core(v.parse())?,
            "moto.placement" => self.moto_placement = v.parse()?,
            "moto.kq_dim" => self.moto_kq_dim = num(v)?,
            "depth" => self.depth = num(v)?,
            "heads" => self.heads = num(v)?,
            "mlp_ratio" => self.mlp_ratio = num(v)?,
            "tokenprop" => self.tokenprop = parse_bool(v)?,
            "tokenprop.lambda" => self.lambda = num(v)?,
            "tokenprop.loss" => self.rec_loss = core(v.parse())?,
            "decoder.multiplier" => self.decoder_multiplier = num(v)?,
            "decoder.scale" => self.decoder_scale = num(v)?,
            "decoder.channels" => self.decoder_channels = num(v)?,
            "optim" => self.optim = core(v.parse())?,
            "lr" => self.lr = num(v)?,
            "min_lr" => self.min_lr = num(v)?,
            "warmup_epochs" => self.warmup_epochs = num(v)?,
            "momentum" => self.momentum = num(v)?,
            "betas" => {
                let (a, b) = v.split_once(',').ok_or_else(|| anyhow!("betas must be `b1,b2`"))?;
                self.betas = (num(a.trim())?, num(b.trim())?);
            }
            "weight_decay" => self.weight_decay = num(v)?,
            "grad_clip" => self.grad_clip = if v == "none" { None } else { Some(num(v)?) },
            "epochs" => self.epochs = num(v)?,
            "batch_size" => self.batch_size = num(v)?,
            "seed" => self.seed = num(v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "checkpoint_every" => self.checkpoint_every = num(v)?,
            "probe_epochs" => self.probe_epochs = num(v)?,
            other => bail!("unknown config key `{other}`"),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "name" => self.name.clone(),
            "dtype" => self.dtype.name().into(),
            "data" => self.data.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "classes" => self.classes.to_string(),
            "per_class" => self.per_class.to_string(),
            "image_size" => self.image_size.to_string(),
            "fraction" => self.fraction.to_string(),
            "tokenizer" => self.tokenizer.to_string(),
            "patch_size" => self.patch_size.to_string(),
            "embed_dim" => self.embed_dim.to_string(),
            "norm" => self.norm.to_string(),
            "moto" => onoff(self.moto),
            "moto.entities" => self.moto_entities.to_string(),
            "moto.tau" => self.moto_tau.to_string(),
            "moto.partition" => self.moto_partition.to_string(),
            "moto.placement" => self.moto_placement.to_string(),
            "moto.kq_dim" => self.moto_kq_dim.to_string(),
            "depth" => self.depth.to_string(),
            "heads" => self.heads.to_string(),
            "mlp_ratio" => self.mlp_ratio.to_string(),
            "tokenprop" => onoff(self.tokenprop),
            "tokenprop.lambda" => self.lambda.to_string(),
            "tokenprop.loss" => self.rec_loss.to_string(),
            "decoder.multiplier" => self.decoder_multiplier.to_string(),
            "decoder.scale" => self.decoder_scale.to_string(),
            "decoder.channels" => self.decoder_channels.to_string(),
            "optim" => self.optim.to_string(),
            "lr" => self.lr.to_string(),
            "min_lr" => self.min_lr.to_string(),
            "warmup_epochs" => self.warmup_epochs.to_string(),
            "momentum" => self.momentum.to_string(),
            "betas" => format!("{},{}", self.betas.0, self.betas.1),
            "weight_decay" => self.weight_decay.to_string(),
            "grad_clip" => self.grad_clip.map_or("none".into(), |c| c.to_string()),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "seed" => self.seed.to_string(),
            "output_dir" => self.output_dir.display().to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "probe_epochs" => self.probe_epochs.to_string(),
            _ => return None,
        })
    }

    /// Applies `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key=value, got `{line}`", i + 1))?;
            self.set(k, v).with_context(|| format!("line {}", i + 1))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    pub fn tokenizer_config(&self) -> TokenizerConfig {
        TokenizerConfig {
            variant: self.tokenizer,
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            image_size: self.image_size,
            in_channels: 3,
            inter_heads: self.heads,
            moto: (self.moto && self.moto_placement.input).then(|| self.moto_config()),
        }
    }

    pub fn moto_config(&self) -> MotoConfig {
        MotoConfig {
            entities: self.moto_entities,
            tau: self.moto_tau,
            kq_dim: self.moto_kq_dim,
            partition: self.moto_partition,
            ..MotoConfig::default()
        }
    }

    pub fn vit_config(&self) -> VitConfig {
        VitConfig {
            depth: self.depth,
            heads: self.heads,
            embed_dim: self.embed_dim,
            mlp_ratio: self.mlp_ratio,
            num_classes: self.classes,
            drop_path_rate: 0.0,
            moto_blocks: if self.moto { self.moto_placement.blocks.clone() } else { Vec::new() },
            moto: self.moto_config(),
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            base_channels: self.decoder_channels,
            multiplier: self.decoder_multiplier,
            output_scale: self.decoder_scale,
        }
    }

    pub fn optim_config(&self) -> OptimConfig {
        OptimConfig {
            kind: self.optim,
            lr: self.lr,
            momentum: self.momentum,
            betas: self.betas,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            ..OptimConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.per_class == 0 {
            bail!("need at least 2 classes and 1 image per class");
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            bail!("fraction {} outside (0, 1]", self.fraction);
        }
        if self.epochs == 0 || self.batch_size == 0 {
            bail!("epochs and batch_size must be positive");
        }
        if !(self.lambda >= 0.0) {
            bail!("tokenprop.lambda must be non-negative");
        }
        if !(self.min_lr >= 0.0) {
            bail!("min_lr must be non-negative");
        }
        core(self.tokenizer_config().validate())?;
        core(self.vit_config().validate())?;
        core(self.optim_config().validate())?;
        if self.moto {
            core(self.moto_config().validate())?;
        }
        if self.tokenprop {
            core(self.decoder_config().validate())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_is_lossless() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(
            "moto = on\nmoto.placement = input,2\nlr = 0.000301\nbetas = 0.5, 0.99\ngrad_clip = 1.5\ndata = /tmp/x y",
        )
        .unwrap();
        let back = ExperimentConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn comments_and_unknown_keys() {
        let cfg = ExperimentConfig::parse("# header\nepochs = 3 # short\n\n").unwrap();
        assert_eq!(cfg.epochs, 3);
        let err = ExperimentConfig::parse("epoch = 3").unwrap_err();
        assert!(format!("{err:#}").contains("unknown config key `epoch`"));
        assert!(ExperimentConfig::parse("epochs").is_err());
    }

    #[test]
    fn every_key_is_readable() {
        let cfg = ExperimentConfig::default();
        for k in KEYS {
            assert!(cfg.get(k).is_some(), "{k}");
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(ExperimentConfig::parse("fraction = 0").is_err());
        assert!(ExperimentConfig::parse("image_size = 30").is_err());
        assert!(ExperimentConfig::parse("moto = maybe").is_err());
        assert!(ExperimentConfig::parse("moto = on\nmoto.placement = 9").is_err());
    }
}
