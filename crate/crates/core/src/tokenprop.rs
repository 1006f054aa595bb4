//! Reconstruction decoder and the joint task + reconstruction objective.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{join, Conv2d, Module, NamedParams};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer::TokenSet;

/// Spatial size the token map is resized to before upsampling.
pub const DECODER_GRID: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderConfig {
    pub base_channels: usize,
    pub multiplier: usize,
    /// Output side length; `64·2^k`.
    pub output_scale: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            base_channels: 256,
            multiplier: 1,
            output_scale: 64,
        }
    }
}

impl DecoderConfig {
    /// Narrow variant for desk-scale runs.
    pub fn desk() -> Self {
        Self {
            base_channels: 32,
            ..Self::default()
        }
    }

    pub fn channels(&self) -> usize {
        self.base_channels * self.multiplier
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.output_scale;
        if s < 64 || s % 64 != 0 || !(s / 64).is_power_of_two() {
            return Err(Error::invalid("decoder", format!("output scale {s} is not 64·2^k")));
        }
        if self.multiplier == 0 || self.base_channels == 0 || self.channels() % 16 != 0 {
            return Err(Error::invalid(
                "decoder",
                format!("channel count {} must be a positive multiple of 16", self.channels()),
            ));
        }
        Ok(())
    }
}

/// `x + conv3x3(gelu(x))`.
#[derive(Debug, Clone)]
pub struct ResConv<T: Scalar> {
    pub conv: Conv2d<T>,
}

impl<T: Scalar> ResConv<T> {
    pub fn new(rng: &mut Rng, ch: usize) -> Self {
        Self {
            conv: Conv2d::new(rng, ch, ch, 3, 1, 1),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.add(&self.conv.forward(&x.gelu())?)
    }
}

impl<T: Scalar> Module<T> for ResConv<T> {
    fn visit_params(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.conv.visit_params(&join(prefix, "conv"), out);
    }
}

/// Upsampling stage beyond 64×64: residual conv, widen ×4, pixel shuffle.
#[derive(Debug, Clone)]
pub struct UpStage<T: Scalar> {
    pub res: ResConv<T>,
    pub widen: Conv2d<T>,
}

impl<T: Scalar> Module<T> for UpStage<T> {
    fn visit_params(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.res.visit_params(&join(prefix, "res"), out);
        self.widen.visit_params(&join(prefix, "widen"), out);
    }
}

/// Token map → 1×1 projection to `c` channels at 16×16, then
/// res(c) → res(c)+shuffle → res(c/4)+shuffle → conv to 3 channels at 64×64.
#[derive(Debug, Clone)]
pub struct Decoder<T: Scalar> {
    pub cfg: DecoderConfig,
    pub input: Conv2d<T>,
    pub res1: ResConv<T>,
    pub res2: ResConv<T>,
    pub res3: ResConv<T>,
    pub extra: Vec<UpStage<T>>,
    pub out: Conv2d<T>,
}

impl<T: Scalar> Decoder<T> {
    pub fn new(rng: &mut Rng, token_dim: usize, cfg: DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels();
        let tail = c / 16;
        let stages = (cfg.output_scale / 64).trailing_zeros() as usize;
        Ok(Self {
            input: Conv2d::new(rng, token_dim, c, 1, 1, 0),
            res1: ResConv::new(rng, c),
            res2: ResConv::new(rng, c),
            res3: ResConv::new(rng, c / 4),
            extra: (0..stages)
                .map(|_| UpStage {
                    res: ResConv::new(rng, tail),
                    widen: Conv2d::new(rng, tail, 4 * tail, 3, 1, 1),
                })
                .collect(),
            out: Conv2d::new(rng, tail, 3, 3, 1, 1),
            cfg,
        })
    }

    pub fn forward(&self, tokens: &TokenSet<T>) -> Result<Tensor<T>> {
        let mut x = self.input.forward(&tokens.to_grid()?)?;
        if tokens.grid != (DECODER_GRID, DECODER_GRID) {
            x = x.bilinear_resize(DECODER_GRID, DECODER_GRID)?;
        }
        x = self.res1.forward(&x)?;
        x = self.res2.forward(&x)?.pixel_shuffle(2)?;
        x = self.res3.forward(&x)?.pixel_shuffle(2)?;
        for stage in &self.extra {
            x = stage.widen.forward(&stage.res.forward(&x)?.gelu())?.pixel_shuffle(2)?;
        }
        self.out.forward(&x.gelu())
    }
}

impl<T: Scalar> Module<T> for Decoder<T> {
    fn visit_params(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.input.visit_params(&join(prefix, "input"), out);
        self.res1.visit_params(&join(prefix, "res1"), out);
        self.res2.visit_params(&join(prefix, "res2"), out);
        self.res3.visit_params(&join(prefix, "res3"), out);
        for (i, s) in self.extra.iter().enumerate() {
            s.visit_params(&join(prefix, &format!("up{i}")), out);
        }
        self.out.visit_params(&join(prefix, "out"), out);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecLoss {
    L1,
    L2,
}

impl fmt::Display for RecLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RecLoss::L1 => "l1",
            RecLoss::L2 => "l2",
        })
    }
}

impl FromStr for RecLoss {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(RecLoss::L1),
            "l2" => Ok(RecLoss::L2),
            _ => Err(Error::invalid("rec_loss", format!("unknown loss `{s}`"))),
        }
    }
}

/// Mean absolute or mean squared error.
pub fn rec_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, kind: RecLoss) -> Result<Tensor<T>> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("rec_loss", pred.shape(), target.shape()));
    }
    let diff = pred.sub(target)?;
    Ok(match kind {
        RecLoss::L1 => diff.abs().mean_all(),
        RecLoss::L2 => diff.square().mean_all(),
    })
}

/// Reconstruction target: the network input resized to `scale × scale`.
pub fn rec_target<T: Scalar>(image: &Tensor<T>, scale: usize) -> Result<Tensor<T>> {
    if image.rank() == 4 && image.dim(2) == scale && image.dim(3) == scale {
        Ok(image.detach())
    } else {
        image.detach().bilinear_resize(scale, scale)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub kind: RecLoss,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.001,
            kind: RecLoss::L2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TokenPropLoss<T: Scalar> {
    pub total: Tensor<T>,
    pub task: Tensor<T>,
    pub rec: Tensor<T>,
}

/// `cross_entropy(logits, labels) + λ · rec_loss(recon, image resized)`.
pub fn tokenprop_loss<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    recon: &Tensor<T>,
    image: &Tensor<T>,
    weights: LossWeights,
) -> Result<TokenPropLoss<T>> {
    if !(weights.lambda >= 0.0) {
        return Err(Error::invalid("tokenprop_loss", format!("lambda {} must be non-negative", weights.lambda)));
    }
    if recon.rank() != 4 || recon.dim(2) != recon.dim(3) {
        return Err(Error::shape("tokenprop_loss", recon.shape(), image.shape()));
    }
    let task = logits.cross_entropy(labels)?;
    let target = rec_target(image, recon.dim(2))?;
    let rec = rec_loss(recon, &target, weights.kind)?;
    let total = task.add(&rec.mul_scalar(T::lit(weights.lambda)))?;
    Ok(TokenPropLoss { total, task, rec })
}
