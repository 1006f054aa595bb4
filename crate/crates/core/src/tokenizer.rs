//! Image tokenizers: naive patchify, the intra-token / locality / inter-token
//! refinements, and a frozen random projection, all behind [`TokenEncoder`].

use std::fmt;
use std::str::FromStr;

use crate::attention::MultiHeadAttention;
use crate::error::{Error, Result};
use crate::moto::{Moto, MotoConfig};
use crate::nn::{init_normal, join, Conv2d, LayerNorm, Linear, Module, NamedParams};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Patch tokens `[N, n_token, l_token]` with their spatial grid.
#[derive(Debug, Clone)]
pub struct TokenSet<T: Scalar> {
    pub tokens: Tensor<T>,
    pub grid: (usize, usize),
    /// Class token `[N, 1, l_token]`, kept apart from the grid.
    pub cls: Option<Tensor<T>>,
}

impl<T: Scalar> TokenSet<T> {
    pub fn new(tokens: Tensor<T>, grid: (usize, usize)) -> Result<Self> {
        if tokens.rank() != 3 || tokens.dim(1) == 0 || tokens.dim(2) == 0 || grid.0 * grid.1 != tokens.dim(1) {
            return Err(Error::shape("token_set", tokens.shape(), &[grid.0, grid.1]));
        }
        Ok(Self { tokens, grid, cls: None })
    }

    pub fn batch(&self) -> usize {
        self.tokens.dim(0)
    }

    pub fn len(&self) -> usize {
        self.tokens.dim(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.dim(2)
    }

    /// Tokens laid out as a feature map `[N, l_token, rows, cols]`.
    pub fn to_grid(&self) -> Result<Tensor<T>> {
        let (n, d) = (self.batch(), self.dim());
        self.tokens.transpose(1, 2)?.reshape(&[n, d, self.grid.0, self.grid.1])
    }

    /// Inverse of [`to_grid`](Self::to_grid).
    pub fn from_grid(map: &Tensor<T>, cls: Option<Tensor<T>>) -> Result<Self> {
        if map.rank() != 4 {
            return Err(Error::shape("from_grid", map.shape(), &[0, 0, 0, 0]));
        }
        let (n, d, r, c) = (map.dim(0), map.dim(1), map.dim(2), map.dim(3));
        let tokens = map.reshape(&[n, d, r * c])?.transpose(1, 2)?;
        let mut set = Self::new(tokens, (r, c))?;
        set.cls = cls;
        Ok(set)
    }
}

/// Anything that turns an image batch into a [`TokenSet`].
pub trait TokenEncoder<T: Scalar>: Module<T> {
    fn encode(&self, image: &Tensor<T>) -> Result<TokenSet<T>>;

    fn token_dim(&self) -> usize;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Patchify,
    Intra,
    IntraLocal,
    IntraLocalInter,
    Frozen,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Patchify,
        Variant::Intra,
        Variant::IntraLocal,
        Variant::IntraLocalInter,
        Variant::Frozen,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Patchify => "patchify",
            Variant::Intra => "intra",
            Variant::IntraLocal => "intra+local",
            Variant::IntraLocalInter => "intra+local+inter",
            Variant::Frozen => "frozen",
        }
    }

    fn multi_scale(self) -> bool {
        matches!(self, Variant::Intra | Variant::IntraLocal | Variant::IntraLocalInter)
    }

    fn overlapping(self) -> bool {
        matches!(self, Variant::IntraLocal | Variant::IntraLocalInter)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid("tokenizer", format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerConfig {
    pub variant: Variant,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub image_size: usize,
    pub in_channels: usize,
    /// Heads of the inter-token attention layer.
    pub inter_heads: usize,
    /// MoTo applied to the input image before projection.
    pub moto: Option<MotoConfig>,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Patchify,
            patch_size: 8,
            embed_dim: 64,
            image_size: 32,
            in_channels: 3,
            inter_heads: 4,
            moto: None,
        }
    }
}

impl TokenizerConfig {
    pub fn grid(&self) -> (usize, usize) {
        let g = self.image_size / self.patch_size;
        (g, g)
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.embed_dim == 0 || self.in_channels == 0 {
            return Err(Error::invalid("tokenizer", "patch size, embed dim and channels must be positive"));
        }
        if self.image_size == 0 || self.image_size % p != 0 {
            return Err(Error::invalid(
                "tokenizer",
                format!("image size {} not divisible by patch size {p}", self.image_size),
            ));
        }
        if self.variant.multi_scale() && p % 4 != 0 {
            return Err(Error::invalid("tokenizer", format!("multi-scale kernels need patch size divisible by 4, got {p}")));
        }
        if self.variant == Variant::IntraLocalInter && self.embed_dim % self.inter_heads.max(1) != 0 {
            return Err(Error::invalid("tokenizer", "embed dim not divisible by inter-token heads"));
        }
        if let Some(m) = &self.moto {
            m.validate()?;
        }
        Ok(())
    }

    /// Kernel sizes of the parallel intra-token branches.
    pub fn intra_kernels(&self) -> Vec<usize> {
        let p = self.patch_size;
        vec![p / 4, p / 2, p]
    }
}

fn check_image<T: Scalar>(op: &'static str, x: &Tensor<T>, channels: usize, patch: usize) -> Result<()> {
    if x.rank() != 4 || x.dim(1) != channels {
        return Err(Error::shape(op, x.shape(), &[0, channels, 0, 0]));
    }
    if x.dim(2) % patch != 0 || x.dim(3) % patch != 0 {
        return Err(Error::invalid(
            op,
            format!("image {}x{} not divisible by patch size {patch}", x.dim(2), x.dim(3)),
        ));
    }
    Ok(())
}

/// Edge-replicating spatial padding of `[N, C, H, W]`.
pub fn replicate_pad<T: Scalar>(x: &Tensor<T>, pad: usize) -> Result<Tensor<T>> {
    let idx = |n: usize| -> Vec<usize> {
        (0..n + 2 * pad)
            .map(|i| i.saturating_sub(pad).min(n - 1))
            .collect()
    };
    let (h, w) = (x.dim(2), x.dim(3));
    x.index_select(2, &idx(h))?.index_select(3, &idx(w))
}

/// `p×p` stride-`p` convolution.
#[derive(Debug, Clone)]
pub struct PatchEmbed<T: Scalar> {
    pub conv: Conv2d<T>,
}

impl<T: Scalar> PatchEmbed<T> {
    pub fn new(rng: &mut Rng, in_ch: usize, dim: usize, patch: usize) -> Self {
        Self {
            conv: Conv2d::new(rng, in_ch, dim, patch, patch, 0),
        }
    }

    /// Weights drawn from normal(0, 0.02) and excluded from training.
    pub fn frozen(rng: &mut Rng, in_ch: usize, dim: usize, patch: usize) -> Self {
        Self {
            conv: Conv2d::with_std(rng, in_ch, dim, patch, patch, 0, 0.02, false),
        }
    }

    pub fn patch(&self) -> usize {
        self.conv.stride
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_image("patchify", x, self.conv.weight.dim(1), self.patch())?;
        self.conv.forward(x)
    }
}

impl<T: Scalar> Module<T> for PatchEmbed<T> {
    fn visit_params(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.conv.visit_params(&join(prefix, "conv"), out);
    }
}

/// Overlapping windows of `2p` at stride `p`; the input is edge-padded by
/// `p/2` so the token grid equals the patchify grid.
#[derive(Debug, Clone)]
pub struct OverlapEmbed<T: Scalar> {
    pub conv: Conv2d<T>,
}

impl<T: Scalar> OverlapEmbed<T> {
    pub fn new(rng: &mut Rng, in_ch: usize, dim: usize, patch: usize) -> Result<Self> {
        if patch < 2 || patch % 2 != 0 {
            return Err(Error::invalid("locality_embed", format!("patch size {patch} must be even")));
        }
        Ok(Self {
            conv: Conv2d::new(rng, in_ch, dim, 2 * patch, patch, 0),
        })
    }

    pub fn patch(&self) -> usize {
        self.conv.stride
    }

    /// Input rows/cols covered by the window of token `(r, c)`, half-open and
    /// clipped to the image.
    pub fn window(&self, r: usize, c: usize, h: usize, w: usize) -> ((usize, usize), (usize, usize)) {
        let p = self.patch();
        let span = |i: usize, n: usize| ((i * p).saturating_sub(p / 2), (i * p + p + p / 2).min(n));
        (span(r, h), span(c, w))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_image("locality_embed", x, self.conv.weight.dim(1), self.patch())?;
        self.conv.forward(&replicate_pad(x, self.patch() / 2)?)
    }
}

impl<T: Scalar> Module<T> for OverlapEmbed<T> {
    fn visit_params(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.conv.visit_params(&join(prefix, "conv"), out);
    }
}

/// Parallel stride-`p` convolutions of several kernel sizes, each centered
/// on its patch, concatenated and projected back to `dim`. Optionally
/// includes an [`OverlapEmbed`] branch.
#[derive(Debug, Clone)]
pub struct MultiScaleEmbed<T: Scalar> {
    pub branches: Vec<Conv2d<T>>,
    pub overlap: Option<OverlapEmbed<T>>,
    pub proj: Linear<T>,
    patch: usize,
}

impl<T: Scalar> MultiScaleEmbed<T> {
    pub fn new(rng: &mut Rng, in_ch: usize, dim: usize, patch: usize, kernels: &[usize], overlap: bool) -> Result<Self> {
        if kernels.iter().any(|&k| k == 0 || k > patch) {
            return Err(Error::invalid("intra_token_embed", format!("kernels {kernels:?} must lie in 1..={patch}")));
        }
        let branches = kernels
            .iter()
            .map(|&k| Conv2d::new(rng, in_ch, dim, k, patch, 0))
            .collect::<Vec<_>>();
        let overlap = overlap.then(|| OverlapEmbed::new(rng, in_ch, dim, patch)).transpose()?;
        let parts = branches.len() + usize::from(overlap.is_some());
        Ok(Self {
            branches,
            overlap,
            proj: Linear::new(rng, parts * dim, dim, true),
            patch,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let in_ch = self.branches[0].weight.dim(1);
        check_image("intra_token_embed", x, in_ch, self.patch)?;
        let (h, w) = (x.dim(2), x.dim(3));
        let p = self.patch;
        let mut maps = Vec::with_capacity(self.branches.len() + 1);
        for conv in &self.branches {
            let k = conv.kernel();
            let off = (p - k) / 2;
            let view = if off == 0 && k == p {
                x.clone()
            } else {
                x.narrow(2, off, h - (p - k))?.narrow(3, off, w - (p - k))?
            };
            maps.push(conv.forward(&view)?);
        }
        if let Some(o) = &self.overlap {
            maps.push(o.forward(x)?);
        }
        let cat = Tensor::concat(&maps, 1)?; // [N, parts·D, r, c]
        let (n, cd, r, c) = (cat.dim(0), cat.dim(1), cat.dim(2), cat.dim(3));
        let tokens = cat.reshape(&[n, cd, r * c])?.transpose(1, 2)?;
        let out = self.proj.forward(&tokens)?; // [N, rc, D]
        let d = out.dim(2);
        out.transpose(1, 2)?.reshape(&[n, d, r, c])
    }
}

impl<T: Scalar> Module<T> for MultiScaleEmbed<T> {
    fn visit_params(&self, prefix: &str, out: &mut NamedParams<T>) {
        for (i, b) in self.branches.iter().enumerate() {
            b.visit_params(&join(prefix, &format!("branch{i}")), out);
        }
        if let Some(o) = &self.overlap {
            o.visit_params(&join(prefix, "overlap"), out);
        }
        self.proj.visit_params(&join(prefix, "proj"), out);
    }
}

/// Pre-norm self-attention with residual over the token sequence.
#[derive(Debug, Clone)]
pub struct TokenAttention<T: Scalar> {
    pub norm: LayerNorm<T>,
    pub attn: MultiHeadAttention<T>,
}

impl<T: Scalar> TokenAttention<T> {
    pub fn new(rng: &mut Rng, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(dim),
            attn: MultiHeadAttention::new(rng, dim, heads)?,
        })
    }

    pub fn forward(&self, tokens: &TokenSet<T>) -> Result<TokenSet<T>> {
        let x = &tokens.tokens;
        let y = x.add(&self.attn.forward(&self.norm.forward(x)?)?)?;
        Ok(TokenSet {
            tokens: y,
            grid: tokens.grid,
            cls: tokens.cls.clone(),
        })
    }
}

impl<T: Scalar> Module<T> for TokenAttention<T> {
    fn visit_params(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.norm.visit_params(&join(prefix, "norm"), out);
        self.attn.visit_params(&join(prefix, "attn"), out);
    }
}

#[derive(Debug, Clone)]
pub enum Stem<T: Scalar> {
    Patch(PatchEmbed<T>),
    MultiScale(MultiScaleEmbed<T>),
}

impl<T: Scalar> Stem<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Stem::Patch(s) => s.forward(x),
            Stem::MultiScale(s) => s.forward(x),
        }
    }
}

/// A configured tokenizer: optional MoTo, a projection stem, optional
/// inter-token attention, then a learned positional embedding.
#[derive(Debug, Clone)]
pub struct Tokenizer<T: Scalar> {
    pub cfg: TokenizerConfig,
    pub moto: Option<Moto<T>>,
    pub stem: Stem<T>,
    pub inter: Option<TokenAttention<T>>,
    pub pos: Tensor<T>,
}

impl<T: Scalar> Tokenizer<T> {
    pub fn new(rng: &mut Rng, cfg: TokenizerConfig) -> Result<Self> {
        cfg.validate()?;
        let (c, d, p) = (cfg.in_channels, cfg.embed_dim, cfg.patch_size);
        let moto = cfg.moto.clone().map(|m| Moto::new(rng, c, m)).transpose()?;
        let stem = match cfg.variant {
            Variant::Patchify => Stem::Patch(PatchEmbed::new(rng, c, d, p)),
            Variant::Frozen => Stem::Patch(PatchEmbed::frozen(rng, c, d, p)),
            v => Stem::MultiScale(MultiScaleEmbed::new(rng, c, d, p, &cfg.intra_kernels(), v.overlapping())?),
        };
        let inter = (cfg.variant == Variant::IntraLocalInter)
            .then(|| TokenAttention::new(rng, d, cfg.inter_heads))
            .transpose()?;
        let (r, cols) = cfg.grid();
        let pos = init_normal(rng, &[1, r * cols, d], 0.02, true);
        Ok(Self {
            cfg,
            moto,
            stem,
            inter,
            pos,
        })
    }

    /// Tokens before the positional embedding is added.
    pub fn features(&self, image: &Tensor<T>) -> Result<TokenSet<T>> {
        let s = self.cfg.image_size;
        if image.rank() != 4 || image.shape()[1..] != [self.cfg.in_channels, s, s] {
            return Err(Error::shape("tokenizer", image.shape(), &[0, self.cfg.in_channels, s, s]));
        }
        let x = match &self.moto {
            Some(m) => m.forward(image)?,
            None => image.clone(),
        };
        let set = TokenSet::from_grid(&self.stem.forward(&x)?, None)?;
        match &self.inter {
            Some(a) => a.forward(&set),
            None => Ok(set),
        }
    }
}

impl<T: Scalar> TokenEncoder<T> for Tokenizer<T> {
    fn encode(&self, image: &Tensor<T>) -> Result<TokenSet<T>> {
        let mut set = self.features(image)?;
        set.tokens = set.tokens.add(&self.pos)?;
        Ok(set)
    }

    fn token_dim(&self) -> usize {
        self.cfg.embed_dim
    }
}

impl<T: Scalar> Module<T> for Tokenizer<T> {
    fn visit_params(&self, prefix: &str, out: &mut NamedParams<T>) {
        if let Some(m) = &self.moto {
            m.visit_params(&join(prefix, "moto"), out);
        }
        match &self.stem {
            Stem::Patch(s) => s.visit_params(&join(prefix, "patch"), out),
            Stem::MultiScale(s) => s.visit_params(&join(prefix, "multiscale"), out),
        }
        if let Some(a) = &self.inter {
            a.visit_params(&join(prefix, "inter"), out);
        }
        out.push((join(prefix, "pos"), self.pos.clone()));
    }
}

/// Parameter-free lossless tokenizer: each `p×p` patch's raw pixels become
/// one token of dimension `C·p²`.
#[derive(Debug, Clone, Copy)]
pub struct PixelTokens {
    pub patch: usize,
    pub channels: usize,
}

impl<T: Scalar> TokenEncoder<T> for PixelTokens {
    fn encode(&self, image: &Tensor<T>) -> Result<TokenSet<T>> {
        check_image("pixel_tokens", image, self.channels, self.patch)?;
        TokenSet::from_grid(&image.pixel_unshuffle(self.patch)?, None)
    }

    fn token_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }
}

impl<T: Scalar> Module<T> for PixelTokens {
    fn visit_params(&self, _prefix: &str, _out: &mut NamedParams<T>) {}
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("swin".parse::<Variant>().is_err());
    }

    #[test]
    fn replicate_pad_copies_edges() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]).unwrap();
        let y = replicate_pad(&x, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert_eq!(
            y.to_vec(),
            vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn indivisible_image_is_rejected() {
        let cfg = TokenizerConfig {
            image_size: 30,
            ..TokenizerConfig::default()
        };
        assert!(Tokenizer::<f64>::new(&mut Rng::new(0), cfg).is_err());
        let pe = PatchEmbed::<f64>::new(&mut Rng::new(0), 3, 4, 8);
        assert!(pe.forward(&Tensor::zeros(&[1, 3, 12, 16])).is_err());
    }

    #[test]
    fn token_set_requires_matching_grid() {
        assert!(TokenSet::new(Tensor::<f64>::zeros(&[1, 6, 2]), (2, 2)).is_err());
        assert!(TokenSet::new(Tensor::<f64>::zeros(&[1, 6, 2]), (2, 3)).is_ok());
    }
}
