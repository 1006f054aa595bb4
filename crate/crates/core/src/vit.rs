//! Pre-norm transformer body with a class token and linear classifier.

use crate::attention::MultiHeadAttention;
use crate::error::{Error, Result};
use crate::moto::{Moto, MotoConfig};
use crate::nn::{init_normal, join, LayerNorm, Linear, Module, NamedParams};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer::TokenSet;

#[derive(Debug, Clone, PartialEq)]
pub struct VitConfig {
    pub depth: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    /// Stochastic depth is not implemented; only 0 is accepted.
    pub drop_path_rate: f64,
    /// Blocks (0-based) followed by a MoTo layer over the token grid.
    pub moto_blocks: Vec<usize>,
    pub moto: MotoConfig,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            heads: 4,
            embed_dim: 64,
            mlp_ratio: 4,
            num_classes: 10,
            drop_path_rate: 0.0,
            moto_blocks: Vec::new(),
            moto: MotoConfig::default(),
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::invalid(
                "vit",
                format!("embed dim {} not divisible by {} heads", self.embed_dim, self.heads),
            ));
        }
        if self.num_classes == 0 || self.mlp_ratio == 0 {
            return Err(Error::invalid("vit", "num_classes and mlp_ratio must be positive"));
        }
        if self.drop_path_rate != 0.0 {
            return Err(Error::invalid("vit", "stochastic depth is not supported"));
        }
        if let Some(&b) = self.moto_blocks.iter().find(|&&b| b >= self.depth) {
            return Err(Error::invalid("vit", format!("MoTo block {b} out of range for depth {}", self.depth)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Block<T: Scalar> {
    pub norm1: LayerNorm<T>,
    pub attn: MultiHeadAttention<T>,
    pub norm2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> Block<T> {
    pub fn new(rng: &mut Rng, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(dim),
            attn: MultiHeadAttention::new(rng, dim, heads)?,
            norm2: LayerNorm::new(dim),
            fc1: Linear::new(rng, dim, dim * mlp_ratio, true),
            fc2: Linear::new(rng, dim * mlp_ratio, dim, true),
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let x = x.add(&self.attn.forward(&self.norm1.forward(x)?)?)?;
        let h = self.fc1.forward(&self.norm2.forward(&x)?)?.gelu();
        x.add(&self.fc2.forward(&h)?)
    }
}

impl<T: Scalar> Module<T> for Block<T> {
    fn visit_params(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.norm1.visit_params(&join(prefix, "norm1"), out);
        self.attn.visit_params(&join(prefix, "attn"), out);
        self.norm2.visit_params(&join(prefix, "norm2"), out);
        self.fc1.visit_params(&join(prefix, "fc1"), out);
        self.fc2.visit_params(&join(prefix, "fc2"), out);
    }
}

#[derive(Debug, Clone)]
pub struct Vit<T: Scalar> {
    pub cfg: VitConfig,
    pub cls: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    /// MoTo layers keyed by the block they follow.
    pub motos: Vec<(usize, Moto<T>)>,
    pub norm: LayerNorm<T>,
    pub head: Linear<T>,
}

impl<T: Scalar> Vit<T> {
    pub fn new(rng: &mut Rng, cfg: VitConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let cls = init_normal(rng, &[1, 1, d], 0.02, true);
        let blocks = (0..cfg.depth)
            .map(|_| Block::new(rng, d, cfg.heads, cfg.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        let mut placements = cfg.moto_blocks.clone();
        placements.sort_unstable();
        placements.dedup();
        let motos = placements
            .into_iter()
            .map(|b| Ok((b, Moto::new(rng, d, cfg.moto.clone())?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            norm: LayerNorm::new(d),
            head: Linear::new(rng, d, cfg.num_classes, true),
            cls,
            blocks,
            motos,
            cfg,
        })
    }

    /// Final normalized class-token features `[N, D]`.
    pub fn features(&self, tokens: &TokenSet<T>) -> Result<Tensor<T>> {
        let d = self.cfg.embed_dim;
        if tokens.dim() != d {
            return Err(Error::shape("vit", tokens.tokens.shape(), &[tokens.batch(), tokens.len(), d]));
        }
        let (n, len) = (tokens.batch(), tokens.len());
        let cls = self.cls.index_select(0, &vec![0; n])?;
        let mut x = Tensor::concat(&[cls, tokens.tokens.clone()], 1)?;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(&x)?;
            for (_, moto) in self.motos.iter().filter(|(b, _)| *b == i) {
                let mut set = TokenSet::new(x.narrow(1, 1, len)?, tokens.grid)?;
                set.cls = Some(x.narrow(1, 0, 1)?);
                let out = moto.forward_tokens(&set)?;
                x = Tensor::concat(&[out.cls.expect("class token kept"), out.tokens], 1)?;
            }
        }
        self.norm.forward(&x.narrow(1, 0, 1)?.reshape(&[n, d])?)
    }

    /// Class logits `[N, num_classes]`.
    pub fn forward(&self, tokens: &TokenSet<T>) -> Result<Tensor<T>> {
        self.head.forward(&self.features(tokens)?)
    }
}

impl<T: Scalar> Module<T> for Vit<T> {
    fn visit_params(&self, prefix: &str, out: &mut NamedParams<T>) {
        out.push((join(prefix, "cls"), self.cls.clone()));
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_params(&join(prefix, &format!("blocks.{i}")), out);
        }
        for (i, m) in &self.motos {
            m.visit_params(&join(prefix, &format!("moto.{i}")), out);
        }
        self.norm.visit_params(&join(prefix, "norm"), out);
        self.head.visit_params(&join(prefix, "head"), out);
    }
}
