//! Modulation across tokens (MoTo).
//!
//! A soft semantic partition assigns every pixel a probability over `n`
//! entities; spatial-aware modulation then normalizes the input once per
//! entity with layout-weighted statistics and blends the results back with
//! the layout weights:
//!
//! ```text
//! Z    = u · k_n(X)ᵀ q(X) + f(X)
//! L_k  = exp(τ Z_k) / Σ_i exp(τ Z_i)
//! out  = Σ_i ((X − μ_i) / (σ_i + ε) · β_i + α_i) ⊙ L_i
//! ```
//!
//! `μ_i`, `σ_i` are per-channel means and standard deviations over space
//! weighted by `L_i` (normalized by `Σ L_i`), so one entity reduces to
//! instance normalization. `τ` multiplies the logits exactly as written:
//! the default 0.1 smooths the layout rather than sharpening it.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{init_const, init_normal, join, Conv2d, Module, NamedParams};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{no_grad, Tensor};
use crate::tokenizer::TokenSet;

/// Below this layout mass an entity is treated as empty.
pub const EMPTY_MASS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Soft,
    /// Per-pixel argmax of the soft layout, without gradient through it.
    Hard,
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Partition::Soft => "soft",
            Partition::Hard => "hard",
        })
    }
}

impl FromStr for Partition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(Partition::Soft),
            "hard" => Ok(Partition::Hard),
            _ => Err(Error::invalid("partition", format!("unknown partition `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotoConfig {
    pub entities: usize,
    pub tau: f64,
    pub eps: f64,
    /// Channel width of the key/query feature extractors.
    pub kq_dim: usize,
    pub partition: Partition,
}

impl Default for MotoConfig {
    fn default() -> Self {
        Self {
            entities: 8,
            tau: 0.1,
            eps: 1e-5,
            kq_dim: 64,
            partition: Partition::Soft,
        }
    }
}

impl MotoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.entities == 0 {
            return Err(Error::invalid("moto", "entity count must be at least 1"));
        }
        if !(self.tau > 0.0) || !(self.eps > 0.0) {
            return Err(Error::invalid("moto", "tau and eps must be positive"));
        }
        if self.kq_dim == 0 {
            return Err(Error::invalid("moto", "kq_dim must be positive"));
        }
        Ok(())
    }
}

/// Per-pixel probabilities over entities, `[N, n, H, W]`.
#[derive(Debug, Clone)]
pub struct SemanticLayout<T: Scalar> {
    pub probs: Tensor<T>,
}

impl<T: Scalar> SemanticLayout<T> {
    pub fn entities(&self) -> usize {
        self.probs.dim(1)
    }

    /// Most probable entity per pixel, `[N·H·W]` in row-major order; ties
    /// go to the lowest index.
    pub fn argmax(&self) -> Result<Vec<usize>> {
        self.probs.argmax_axis(1)
    }
}

/// Flat spatial indices of the `n` sampled feature points on an `h×w` map.
///
/// `n == h·w` takes every pixel. A square `n = s²` with `s ≤ h, w` takes the
/// centers of an `s×s` grid of cells. Otherwise `n` evenly spaced row-major
/// indices are used.
pub fn sample_indices(h: usize, w: usize, n: usize) -> Result<Vec<usize>> {
    let total = h * w;
    if n == 0 || n > total {
        return Err(Error::invalid("sample_points", format!("cannot sample {n} points from {h}x{w}")));
    }
    if n == total {
        return Ok((0..total).collect());
    }
    let s = (n as f64).sqrt().round() as usize;
    if s * s == n && s <= h && s <= w {
        let center = |i: usize, extent: usize| ((2 * i + 1) * extent) / (2 * s);
        let mut idx = Vec::with_capacity(n);
        for r in 0..s {
            for c in 0..s {
                idx.push(center(r, h) * w + center(c, w));
            }
        }
        return Ok(idx);
    }
    Ok((0..n).map(|j| ((2 * j + 1) * total) / (2 * n)).collect())
}

/// Gathers the sampled points of `[N, d, H, W]` features into `[N, d, n]`.
pub fn sample_points<T: Scalar>(feat: &Tensor<T>, n: usize) -> Result<Tensor<T>> {
    if feat.rank() != 4 {
        return Err(Error::shape("sample_points", feat.shape(), &[n]));
    }
    let (b, d, h, w) = (feat.dim(0), feat.dim(1), feat.dim(2), feat.dim(3));
    let idx = sample_indices(h, w, n)?;
    feat.reshape(&[b, d, h * w])?.index_select(2, &idx)
}

/// Layout-weighted normalization of `x [N, C, H, W]` under `layout [N, n, H, W]`
/// with per-entity, per-channel affine `alpha`, `beta` of shape `[n, C]`.
pub fn spatial_modulation<T: Scalar>(
    x: &Tensor<T>,
    layout: &SemanticLayout<T>,
    alpha: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let l = &layout.probs;
    if x.rank() != 4 || l.rank() != 4 || x.dim(0) != l.dim(0) || x.shape()[2..] != l.shape()[2..] {
        return Err(Error::shape("spatial_modulation", x.shape(), l.shape()));
    }
    let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let n = l.dim(1);
    if alpha.shape() != [n, c] || beta.shape() != [n, c] {
        return Err(Error::shape("spatial_modulation", alpha.shape(), &[n, c]));
    }
    let p = h * w;
    let lf = l.reshape(&[b, n, p])?;
    let xf = x.reshape(&[b, c, p])?;

    let raw_mass = lf.sum_axis(-1, true)?; // [B, n, 1]
    let keep: Vec<T> = raw_mass
        .data()
        .iter()
        .map(|&m| if m.as_f64() < EMPTY_MASS { T::zero() } else { T::one() })
        .collect();
    let keep = Tensor::from_vec(keep, &[b, n, 1])?;
    let mass = raw_mass.clamp_min(T::lit(EMPTY_MASS));

    // Statistics are taken around a constant per-channel shift, which
    // leaves them unchanged but avoids cancellation in E[x²] − E[x]².
    let shift: Vec<T> = xf
        .data()
        .chunks(p)
        .map(|ch| ch.iter().copied().sum::<T>() / T::count(p))
        .collect();
    let xs = xf.sub(&Tensor::from_vec(shift, &[b, c, 1])?)?;
    let mean = lf.matmul_t(&xs)?.div(&mass)?; // [B, n, C]
    let second = lf.matmul_t(&xs.square())?.div(&mass)?;
    let var = second.sub(&mean.square())?.clamp_min(T::zero());
    let scale = beta.reshape(&[1, n, c])?.div(&var.sqrt().add_scalar(T::lit(eps)))?;
    let offset = alpha.reshape(&[1, n, c])?.sub(&scale.mul(&mean)?)?;
    // Σ_k L_k (scale_k · x + offset_k) as two [C, n]·[n, P] products
    let lk = lf.mul(&keep)?;
    let gain = scale.transpose(1, 2)?.matmul(&lk)?; // [B, C, P]
    let bias = offset.transpose(1, 2)?.matmul(&lk)?;
    xs.mul(&gain)?.add(&bias)?.reshape(&[b, c, h, w])
}

/// One-hot layout at the per-pixel argmax of `scores [N, n, H, W]` (logits
/// or probabilities). Ties resolve to the lowest entity index. The result
/// carries no gradient.
pub fn hard_partition<T: Scalar>(scores: &Tensor<T>) -> Result<SemanticLayout<T>> {
    if scores.rank() != 4 {
        return Err(Error::shape("hard_partition", scores.shape(), &[0, 0, 0, 0]));
    }
    let (b, n, h, w) = (scores.dim(0), scores.dim(1), scores.dim(2), scores.dim(3));
    let p = h * w;
    let winners = scores.argmax_axis(1)?;
    let mut onehot = vec![T::zero(); b * n * p];
    for (pos, &k) in winners.iter().enumerate() {
        let (i, px) = (pos / p, pos % p);
        onehot[(i * n + k) * p + px] = T::one();
    }
    Ok(SemanticLayout {
        probs: Tensor::from_vec(onehot, scores.shape())?,
    })
}

/// Binary PPM (P6) image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ppm {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Ppm {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }
}

/// Evenly spaced hues, fully saturated.
pub fn default_palette(n: usize) -> Vec<[u8; 3]> {
    (0..n)
        .map(|i| {
            let hue = i as f64 / n.max(1) as f64 * 6.0;
            let x = 1.0 - (hue % 2.0 - 1.0).abs();
            let (r, g, b) = match hue as usize {
                0 => (1.0, x, 0.0),
                1 => (x, 1.0, 0.0),
                2 => (0.0, 1.0, x),
                3 => (0.0, x, 1.0),
                4 => (x, 0.0, 1.0),
                _ => (1.0, 0.0, x),
            };
            [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
        })
        .collect()
}

/// Colors each pixel of every sample by its most probable entity.
pub fn layout_colorize<T: Scalar>(layout: &SemanticLayout<T>, palette: &[[u8; 3]]) -> Result<Vec<Ppm>> {
    let probs = &layout.probs;
    if palette.len() != layout.entities() {
        return Err(Error::invalid(
            "layout_colorize",
            format!("palette has {} colors for {} entities", palette.len(), layout.entities()),
        ));
    }
    let (b, h, w) = (probs.dim(0), probs.dim(2), probs.dim(3));
    let winners = layout.argmax()?;
    Ok(winners
        .chunks(h * w)
        .take(b)
        .map(|ks| Ppm {
            width: w,
            height: h,
            rgb: ks.iter().flat_map(|&k| palette[k]).collect(),
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct Moto<T: Scalar> {
    pub cfg: MotoConfig,
    pub f_conv: Conv2d<T>,
    pub k_conv: Conv2d<T>,
    pub q_conv: Conv2d<T>,
    /// Dictionary weighting the correlation per entity, `[1, n, 1, 1]`.
    pub u: Tensor<T>,
    pub alpha: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> Moto<T> {
    pub fn new(rng: &mut Rng, channels: usize, cfg: MotoConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.entities;
        Ok(Self {
            f_conv: Conv2d::new(rng, channels, n, 3, 1, 1),
            k_conv: Conv2d::new(rng, channels, cfg.kq_dim, 3, 1, 1),
            q_conv: Conv2d::new(rng, channels, cfg.kq_dim, 3, 1, 1),
            u: init_normal(rng, &[1, n, 1, 1], 0.02, true),
            alpha: init_const(&[n, channels], 0.0, true),
            beta: init_const(&[n, channels], 1.0, true),
            cfg,
        })
    }

    pub fn channels(&self) -> usize {
        self.alpha.dim(1)
    }

    /// Semantic activation map `Z`, `[N, n, H, W]`.
    pub fn semantic_logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rank() != 4 || x.dim(1) != self.channels() {
            return Err(Error::shape("moto", x.shape(), &[self.channels()]));
        }
        if !x.all_finite() {
            return Err(Error::NonFinite { op: "moto" });
        }
        let (b, _, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let n = self.cfg.entities;
        let f = self.f_conv.forward(x)?;
        let k = self.k_conv.forward(x)?;
        let q = self.q_conv.forward(x)?;
        let kn = sample_points(&k, n)?; // [B, d, n]
        let d = kn.dim(1);
        let corr = kn
            .transpose(1, 2)?
            .matmul(&q.reshape(&[b, d, h * w])?)? // [B, n, HW]
            .reshape(&[b, n, h, w])?;
        let z = corr.mul(&self.u)?.add(&f)?;
        if !z.all_finite() {
            return Err(Error::NonFinite { op: "moto" });
        }
        Ok(z)
    }

    /// Soft semantic partition of `x`.
    pub fn layout(&self, x: &Tensor<T>) -> Result<SemanticLayout<T>> {
        let z = self.semantic_logits(x)?;
        Ok(SemanticLayout {
            probs: z.softmax(1, T::lit(self.cfg.tau))?,
        })
    }

    /// Layout actually used for modulation under the configured partition.
    pub fn partition_layout(&self, x: &Tensor<T>) -> Result<SemanticLayout<T>> {
        match self.cfg.partition {
            Partition::Soft => self.layout(x),
            Partition::Hard => {
                let z = no_grad(|| self.semantic_logits(x))?;
                hard_partition(&z)
            }
        }
    }

    pub fn modulate(&self, x: &Tensor<T>, layout: &SemanticLayout<T>) -> Result<Tensor<T>> {
        spatial_modulation(x, layout, &self.alpha, &self.beta, self.cfg.eps)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let layout = self.partition_layout(x)?;
        self.modulate(x, &layout)
    }

    /// Applies MoTo to the patch tokens laid out on their grid; a class
    /// token passes through untouched.
    pub fn forward_tokens(&self, tokens: &TokenSet<T>) -> Result<TokenSet<T>> {
        let map = tokens.to_grid()?;
        let out = self.forward(&map)?;
        TokenSet::from_grid(&out, tokens.cls.clone())
    }
}

impl<T: Scalar> Module<T> for Moto<T> {
    fn visit_params(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.f_conv.visit_params(&join(prefix, "f"), out);
        self.k_conv.visit_params(&join(prefix, "k"), out);
        self.q_conv.visit_params(&join(prefix, "q"), out);
        out.push((join(prefix, "u"), self.u.clone()));
        out.push((join(prefix, "alpha"), self.alpha.clone()));
        out.push((join(prefix, "beta"), self.beta.clone()));
    }
}
